//! Batch-means output analysis with a single control variate.
//!
//! With `b` batch means `X_i` of the response and `C_i` of the control:
//!
//! ```text
//! V_XX = Σ (X_i − X̄)² / (b−1),  V_CC, V_XC likewise
//! β    = −V_XC / V_CC,           point = X̄ + β C̄
//! R²   = (b−1)/(b−2) · (V_XX − V_XC² / V_CC)
//! S²   = R² · (1/b + C̄² / ((b−1) V_CC))
//! ```
//!
//! and `(point − α) / S` is asymptotically t with `b − 2` degrees of freedom.
//! Without a control the classical batch-means variance `V_XX / b` with
//! `b − 1` degrees of freedom is used.

use alloc::vec::Vec;
use core::fmt;

use crate::stats::student_t_quantile;
use crate::{Error, Result};

pub const DEFAULT_BATCHES: usize = 20;
pub const CONFIDENCE: f64 = 0.95;

/// Batch means of a response and, optionally, one control.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSeries {
    response: Vec<f64>,
    control: Option<Vec<f64>>,
    batch_size: usize,
}

impl BatchSeries {
    /// Wraps precomputed batch means.
    pub fn from_means(response: Vec<f64>, control: Option<Vec<f64>>, batch_size: usize) -> Result<Self> {
        if response.len() < 3 {
            return Err(Error::TooFewBatches(response.len()));
        }
        if let Some(c) = &control {
            if c.len() != response.len() {
                return Err(Error::SeriesLength {
                    response: response.len(),
                    control: c.len(),
                });
            }
        }
        Ok(Self {
            response,
            control,
            batch_size,
        })
    }

    pub fn batches(&self) -> usize {
        self.response.len()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Observations used, `n = m b`.
    pub fn observations(&self) -> usize {
        self.batch_size * self.batches()
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn control(&self) -> Option<&[f64]> {
        self.control.as_deref()
    }

    /// Drops the control.
    pub fn without_control(&self) -> Self {
        Self {
            response: self.response.clone(),
            control: None,
            batch_size: self.batch_size,
        }
    }
}

/// Splits raw series into `batches` contiguous batches of equal size. A
/// trailing remainder that does not fill a batch is discarded.
pub fn batch(response: &[f64], control: Option<&[f64]>, batches: usize) -> Result<BatchSeries> {
    if batches < 3 {
        return Err(Error::TooFewBatches(batches));
    }
    if let Some(c) = control {
        if c.len() != response.len() {
            return Err(Error::SeriesLength {
                response: response.len(),
                control: c.len(),
            });
        }
    }
    let m = response.len() / batches;
    if m == 0 {
        return Err(Error::TooFewObservations {
            len: response.len(),
            batches,
        });
    }
    let means = |xs: &[f64]| -> Vec<f64> {
        xs[..m * batches]
            .chunks_exact(m)
            .map(|c| c.iter().sum::<f64>() / m as f64)
            .collect()
    };
    Ok(BatchSeries {
        response: means(response),
        control: control.map(means),
        batch_size: m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimatorKind {
    Standard,
    Quadratic,
    Fluid,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Standard, EstimatorKind::Quadratic, EstimatorKind::Fluid];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Standard => "standard",
            EstimatorKind::Quadratic => "quadratic",
            EstimatorKind::Fluid => "fluid",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.label() == s)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorResult {
    pub kind: EstimatorKind,
    pub point: f64,
    pub beta: f64,
    /// Estimated variance of `point`.
    pub s2: f64,
    pub dof: usize,
    /// Half width of the 95% t interval.
    pub ci_half_width: f64,
    /// Set when the control had zero sample variance and the uncontrolled
    /// estimate was returned instead.
    pub degenerate_control: bool,
}

impl EstimatorResult {
    fn with_interval(kind: EstimatorKind, point: f64, beta: f64, s2: f64, dof: usize, degenerate: bool) -> Self {
        let s2 = s2.max(0.0);
        let t = student_t_quantile(0.5 + CONFIDENCE / 2.0, dof as f64);
        Self {
            kind,
            point,
            beta,
            s2,
            dof,
            ci_half_width: t * libm::sqrt(s2),
            degenerate_control: degenerate,
        }
    }

    pub fn ci_low(&self) -> f64 {
        self.point - self.ci_half_width
    }

    pub fn ci_high(&self) -> f64 {
        self.point + self.ci_half_width
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low() <= value && value <= self.ci_high()
    }
}

/// Sample moments of the batch means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMoments {
    pub x_mean: f64,
    pub c_mean: f64,
    pub vxx: f64,
    pub vcc: f64,
    pub vxc: f64,
}

pub fn moments(bs: &BatchSeries) -> BatchMoments {
    let b = bs.batches() as f64;
    let x_mean = bs.response.iter().sum::<f64>() / b;
    let (c_mean, vcc, vxc) = match &bs.control {
        Some(c) => {
            let c_mean = c.iter().sum::<f64>() / b;
            let vcc = c.iter().map(|v| (v - c_mean) * (v - c_mean)).sum::<f64>() / (b - 1.0);
            let vxc = bs
                .response
                .iter()
                .zip(c)
                .map(|(x, v)| (x - x_mean) * (v - c_mean))
                .sum::<f64>()
                / (b - 1.0);
            (c_mean, vcc, vxc)
        }
        None => (0.0, 0.0, 0.0),
    };
    let vxx = bs.response.iter().map(|x| (x - x_mean) * (x - x_mean)).sum::<f64>() / (b - 1.0);
    BatchMoments {
        x_mean,
        c_mean,
        vxx,
        vcc,
        vxc,
    }
}

/// Classical batch means: `X̄` with variance `V_XX / b` on `b − 1` dof.
pub fn standard_estimate(bs: &BatchSeries) -> EstimatorResult {
    standard_as(EstimatorKind::Standard, bs, false)
}

fn standard_as(kind: EstimatorKind, bs: &BatchSeries, degenerate: bool) -> EstimatorResult {
    let m = moments(&bs.without_control());
    let b = bs.batches();
    EstimatorResult::with_interval(kind, m.x_mean, 0.0, m.vxx / b as f64, b - 1, degenerate)
}

fn control_is_degenerate(bs: &BatchSeries, m: &BatchMoments) -> bool {
    let scale = bs
        .control
        .as_deref()
        .unwrap_or(&[])
        .iter()
        .fold(0.0f64, |a, c| a.max(c.abs()));
    !(m.vcc > (1e-12 * scale) * (1e-12 * scale))
}

/// Controlled estimator with the batch-means β, labelled `kind`. Falls back
/// to classical batch means when there is no control or it is degenerate.
pub fn loh_estimate(kind: EstimatorKind, bs: &BatchSeries) -> EstimatorResult {
    if bs.control.is_none() {
        return standard_as(kind, bs, false);
    }
    let m = moments(bs);
    if control_is_degenerate(bs, &m) {
        return standard_as(kind, bs, true);
    }
    let b = bs.batches() as f64;
    let beta = -m.vxc / m.vcc;
    let point = m.x_mean + beta * m.c_mean;
    let r2 = (b - 1.0) / (b - 2.0) * (m.vxx - m.vxc * m.vxc / m.vcc);
    let s2 = r2 * (1.0 / b + m.c_mean * m.c_mean / ((b - 1.0) * m.vcc));
    EstimatorResult::with_interval(kind, point, beta, s2, bs.batches() - 2, false)
}

/// How the control coefficient is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BetaRule {
    /// Batch-means estimate of the variance-minimizing β.
    #[default]
    Estimated,
    Fixed(f64),
}

pub fn controlled_estimate(kind: EstimatorKind, bs: &BatchSeries, rule: BetaRule) -> EstimatorResult {
    match rule {
        BetaRule::Estimated => loh_estimate(kind, bs),
        BetaRule::Fixed(beta) => fixed_beta_estimate(kind, bs, beta),
    }
}

/// Controlled estimator with β fixed in advance. The combined series
/// `X_i + β C_i` is analysed by classical batch means.
pub fn fixed_beta_estimate(kind: EstimatorKind, bs: &BatchSeries, beta: f64) -> EstimatorResult {
    let combined: Vec<f64> = match &bs.control {
        Some(c) => bs.response.iter().zip(c).map(|(x, v)| x + beta * v).collect(),
        None => bs.response.clone(),
    };
    let series = BatchSeries {
        response: combined,
        control: None,
        batch_size: bs.batch_size,
    };
    let mut r = standard_as(kind, &series, false);
    r.beta = beta;
    r
}
