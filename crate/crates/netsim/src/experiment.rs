//! Replicated experiments over a sweep of loads.

use std::fmt;

use netsim_core::chain::{run, Control, RngStream, RunAccumulator, RunOptions};
use netsim_core::cvcore::{self, BetaRule};
use netsim_core::fluid::{fluid_estimate, FluidValueFn};
use netsim_core::network::uniformize;
use netsim_core::quadratic::{build_constraints, priority_zero_mask, quadratic_estimate, QuadraticControl};
use netsim_core::{EstimatorKind, EstimatorResult, NetworkSpec, PriorityPolicy, QuadraticCv, UniformizedNetwork};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "NETSIM_THREADS";

/// How the arrival rates are set for one point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Load {
    /// Scale arrivals so that `station` (0-based) carries load `rho`.
    StationLoad { station: usize, rho: f64 },
    /// Multiply every arrival rate by this factor.
    ArrivalScale(f64),
}

impl Load {
    /// The number reported in the `load` column.
    pub fn value(&self) -> f64 {
        match *self {
            Load::StationLoad { rho, .. } => rho,
            Load::ArrivalScale(f) => f,
        }
    }

    pub fn apply(&self, spec: &NetworkSpec) -> netsim_core::Result<NetworkSpec> {
        match *self {
            Load::StationLoad { station, rho } => spec.with_station_load(station, rho),
            Load::ArrivalScale(f) => spec.with_arrival_scale(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub policy: PriorityPolicy,
    /// Controlled estimators to add; the standard estimator is always run.
    pub estimators: Vec<EstimatorKind>,
    pub steps: u64,
    pub batches: usize,
    pub reps: usize,
    pub seed: u64,
    pub loads: Vec<Load>,
    /// Drop `z_ij` that vanish under the priority policy when choosing `ν`.
    pub zero_mask: bool,
    /// Worker count; falls back to `NETSIM_THREADS`, then to rayon's default.
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("at least one replication is required")]
    NoReps,
    #[error("{batches} batches need at least {batches} steps, got {steps}")]
    TooFewSteps { steps: u64, batches: usize },
    #[error("controlled estimators need at least 3 batches, got {0}")]
    TooFewBatches(usize),
    #[error("the load sweep is empty")]
    NoLoads,
    #[error("policy does not fit the network: {0}")]
    Policy(netsim_core::Error),
}

impl ExperimentConfig {
    /// Standard first, then the requested controlled estimators without
    /// repeats.
    pub fn estimator_list(&self) -> Vec<EstimatorKind> {
        let mut out = vec![EstimatorKind::Standard];
        for k in EstimatorKind::ALL {
            if k != EstimatorKind::Standard && self.estimators.contains(&k) {
                out.push(k);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.reps == 0 {
            return Err(ConfigError::NoReps);
        }
        if self.loads.is_empty() {
            return Err(ConfigError::NoLoads);
        }
        let controlled = self.estimator_list().len() > 1;
        if self.batches < if controlled { 3 } else { 2 } {
            return Err(ConfigError::TooFewBatches(self.batches));
        }
        if self.steps < self.batches as u64 {
            return Err(ConfigError::TooFewSteps {
                steps: self.steps,
                batches: self.batches,
            });
        }
        netsim_core::policy::verify_policy(self.policy.order(), &self.network).map_err(ConfigError::Policy)
    }

    fn thread_count(&self) -> Option<usize> {
        self.threads.or_else(|| {
            std::env::var(THREADS_ENV)
                .ok()
                .and_then(|v| v.trim().parse::<usize>().ok())
                .filter(|n| *n > 0)
        })
    }
}

/// One estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRow {
    pub load: f64,
    #[serde(with = "kind_label")]
    pub estimator: EstimatorKind,
    pub rep: usize,
    pub point: f64,
    pub beta: f64,
    pub s2: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl RepRow {
    fn new(load: f64, rep: usize, r: &EstimatorResult) -> Self {
        Self {
            load,
            estimator: r.kind,
            rep,
            point: r.point,
            beta: r.beta,
            s2: r.s2,
            ci_lo: r.ci_low(),
            ci_hi: r.ci_high(),
        }
    }
}

/// Estimators travel as their labels (`standard`, `quadratic`, `fluid`).
pub mod kind_label {
    use netsim_core::EstimatorKind;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &EstimatorKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(k.label())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<EstimatorKind, D::Error> {
        let s = String::deserialize(d)?;
        EstimatorKind::from_label(&s).ok_or_else(|| D::Error::custom(format!("unknown estimator {s:?}")))
    }
}

pub const INSUFFICIENT_REPS: &str = "insufficient reps";

/// Aggregate over replications for one (load, estimator) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub load: f64,
    #[serde(with = "kind_label")]
    pub estimator: EstimatorKind,
    pub reps: usize,
    pub mean: Option<f64>,
    /// Sample variance of the point estimates across replications.
    pub variance: Option<f64>,
    pub mean_s2: Option<f64>,
    pub mean_beta: Option<f64>,
    /// Variance of the standard estimator over this one's, same load.
    pub reduction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<RepRow>,
    pub cells: Vec<CellSummary>,
}

impl ExperimentReport {
    pub fn cell(&self, load: f64, estimator: EstimatorKind) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.load == load && c.estimator == estimator)
    }

    pub fn rows_for(&self, load: f64, estimator: EstimatorKind) -> impl Iterator<Item = &RepRow> {
        self.rows.iter().filter(move |r| r.load == load && r.estimator == estimator)
    }
}

/// Cell-level failure, kept in the report instead of aborting the sweep.
#[derive(Debug, Clone, PartialEq)]
struct CellError {
    estimator: Option<EstimatorKind>,
    message: String,
}

impl fmt::Display for CellError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

struct LoadSetup {
    net: UniformizedNetwork,
    quadratic: Option<QuadraticCv>,
    fluid: Option<FluidValueFn>,
}

fn setup_load(cfg: &ExperimentConfig, load: &Load, kinds: &[EstimatorKind]) -> Result<LoadSetup, CellError> {
    let whole = |e: netsim_core::Error| CellError {
        estimator: None,
        message: e.to_string(),
    };
    let spec = load.apply(&cfg.network).map_err(whole)?;
    let net = uniformize(&spec);
    if !net.traffic().is_stable() {
        return Err(CellError {
            estimator: None,
            message: format!("station loads {:?} are not all below 1", net.traffic().station_load),
        });
    }
    let quadratic = if kinds.contains(&EstimatorKind::Quadratic) {
        let mask = cfg.zero_mask.then(|| priority_zero_mask(&net, &cfg.policy));
        Some(
            build_constraints(&net, mask.as_deref())
                .and_then(|cv| cv.choose_nu())
                .map_err(whole)?,
        )
    } else {
        None
    };
    let fluid = kinds
        .contains(&EstimatorKind::Fluid)
        .then(|| FluidValueFn::new(&net, &cfg.policy));
    Ok(LoadSetup { net, quadratic, fluid })
}

type RepOutcome = (Vec<EstimatorResult>, Vec<CellError>);

fn run_rep(cfg: &ExperimentConfig, setup: &LoadSetup, fluid: Option<&mut FluidValueFn>, rep: usize) -> RepOutcome {
    let mut errors = Vec::new();
    let mut quad = setup.quadratic.as_ref().map(QuadraticControl);
    let mut fluid = fluid;
    let opts = RunOptions::new(cfg.steps);

    // Control slots: quadratic first, then fluid. A failing control is
    // dropped and the replication rerun on the same random stream.
    let mut use_quad = quad.is_some();
    let mut use_fluid = fluid.is_some();
    let acc: RunAccumulator = loop {
        let mut controls: Vec<&mut dyn Control> = Vec::new();
        let mut kinds = Vec::new();
        if use_quad {
            controls.push(quad.as_mut().unwrap());
            kinds.push(EstimatorKind::Quadratic);
        }
        if use_fluid {
            controls.push(*fluid.as_mut().unwrap());
            kinds.push(EstimatorKind::Fluid);
        }
        let mut rng = RngStream::new(cfg.seed, rep as u64);
        match run(&setup.net, &cfg.policy, &opts, &mut rng, &mut controls) {
            Ok(acc) => break acc,
            Err(netsim_core::Error::ControlEvaluation { control, source, .. }) => {
                let kind = kinds[control];
                errors.push(CellError {
                    estimator: Some(kind),
                    message: source.to_string(),
                });
                match kind {
                    EstimatorKind::Quadratic => use_quad = false,
                    _ => use_fluid = false,
                }
            }
            Err(e) => {
                errors.push(CellError {
                    estimator: None,
                    message: e.to_string(),
                });
                return (Vec::new(), errors);
            }
        }
    };

    let mut results = Vec::new();
    match cvcore::batch(acc.population_series(), None, cfg.batches) {
        Ok(bs) => results.push(cvcore::standard_estimate(&bs)),
        Err(e) => errors.push(CellError {
            estimator: Some(EstimatorKind::Standard),
            message: e.to_string(),
        }),
    }
    let mut slot = 0;
    let mut controlled = |kind: EstimatorKind, on: bool, results: &mut Vec<EstimatorResult>, errors: &mut Vec<CellError>| {
        if !on {
            return;
        }
        let r = match kind {
            EstimatorKind::Quadratic => quadratic_estimate(&acc, slot, cfg.batches, BetaRule::Estimated),
            _ => fluid_estimate(&acc, slot, cfg.batches, BetaRule::Estimated),
        };
        slot += 1;
        match r {
            Ok(r) => results.push(r),
            Err(e) => errors.push(CellError {
                estimator: Some(kind),
                message: e.to_string(),
            }),
        }
    };
    controlled(EstimatorKind::Quadratic, use_quad, &mut results, &mut errors);
    controlled(EstimatorKind::Fluid, use_fluid, &mut results, &mut errors);
    (results, errors)
}

/// Runs every replication at every load. Failures are recorded per cell and
/// the rest of the sweep continues.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ConfigError> {
    cfg.validate()?;
    let kinds = cfg.estimator_list();
    let work = || {
        let mut rows = Vec::new();
        let mut cells = Vec::new();
        for load in &cfg.loads {
            let value = load.value();
            let setup = match setup_load(cfg, load, &kinds) {
                Ok(s) => s,
                Err(e) => {
                    for &k in &kinds {
                        cells.push(failed_cell(value, k, cfg.reps, e.message.clone()));
                    }
                    continue;
                }
            };
            let outcomes: Vec<RepOutcome> = (0..cfg.reps)
                .into_par_iter()
                .map_init(
                    || setup.fluid.clone(),
                    |fluid, rep| run_rep(cfg, &setup, fluid.as_mut(), rep),
                )
                .collect();

            let mut load_rows = Vec::new();
            let mut errors: Vec<(EstimatorKind, String)> = Vec::new();
            for (rep, (results, errs)) in outcomes.iter().enumerate() {
                load_rows.extend(results.iter().map(|r| RepRow::new(value, rep, r)));
                for e in errs {
                    match e.estimator {
                        Some(k) => errors.push((k, format!("rep {rep}: {e}"))),
                        None => kinds.iter().for_each(|&k| errors.push((k, format!("rep {rep}: {e}")))),
                    }
                }
            }
            let mut load_cells = summarize_load(value, &kinds, &load_rows);
            for cell in &mut load_cells {
                let mine: Vec<&String> = errors.iter().filter(|(k, _)| *k == cell.estimator).map(|(_, m)| m).collect();
                if let Some(first) = mine.first() {
                    cell.error = Some(if mine.len() == 1 {
                        (*first).clone()
                    } else {
                        format!("{first} (and {} more)", mine.len() - 1)
                    });
                }
            }
            rows.extend(load_rows);
            cells.extend(load_cells);
        }
        ExperimentReport { rows, cells }
    };
    Ok(match cfg.thread_count() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(work),
        None => work(),
    })
}

fn failed_cell(load: f64, estimator: EstimatorKind, reps: usize, error: String) -> CellSummary {
    CellSummary {
        load,
        estimator,
        reps: 0,
        mean: None,
        variance: None,
        mean_s2: None,
        mean_beta: None,
        reduction: None,
        note: (reps < 2).then(|| INSUFFICIENT_REPS.to_string()),
        error: Some(error),
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn sample_variance(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    (xs.len() >= 2).then(|| xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64)
}

/// Cells for one load, computed from its rows only, in `kinds` order.
pub fn summarize_load(load: f64, kinds: &[EstimatorKind], rows: &[RepRow]) -> Vec<CellSummary> {
    let mut by_rep: Vec<&RepRow> = rows.iter().filter(|r| r.load == load).collect();
    by_rep.sort_by_key(|r| r.rep);
    let column = |k: EstimatorKind, f: fn(&RepRow) -> f64| -> Vec<f64> {
        by_rep.iter().filter(|r| r.estimator == k).map(|r| f(r)).collect()
    };
    let standard_var = sample_variance(&column(EstimatorKind::Standard, |r| r.point));
    kinds
        .iter()
        .map(|&k| {
            let points = column(k, |r| r.point);
            let variance = sample_variance(&points);
            let reduction = match (standard_var, variance) {
                (Some(s), Some(v)) if v > 0.0 => Some(s / v),
                (Some(0.0), Some(_)) => Some(1.0),
                _ => None,
            };
            CellSummary {
                load,
                estimator: k,
                reps: points.len(),
                mean: mean(&points),
                variance,
                mean_s2: mean(&column(k, |r| r.s2)),
                mean_beta: mean(&column(k, |r| r.beta)),
                reduction,
                note: (points.len() < 2).then(|| INSUFFICIENT_REPS.to_string()),
                error: None,
            }
        })
        .collect()
}

/// Cells for every load present in `rows`, in order of first appearance.
pub fn summarize(rows: &[RepRow]) -> Vec<CellSummary> {
    let mut loads: Vec<f64> = Vec::new();
    let mut kinds: Vec<EstimatorKind> = Vec::new();
    for r in rows {
        if !loads.contains(&r.load) {
            loads.push(r.load);
        }
        if !kinds.contains(&r.estimator) {
            kinds.push(r.estimator);
        }
    }
    kinds.sort_by_key(|k| EstimatorKind::ALL.iter().position(|a| a == k));
    loads.iter().flat_map(|&l| summarize_load(l, &kinds, rows)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::files::two_station_three_buffer;

    fn small(reps: usize, steps: u64) -> ExperimentConfig {
        let network = two_station_three_buffer(9.0);
        ExperimentConfig {
            policy: PriorityPolicy::fbfs(&network),
            network,
            estimators: vec![EstimatorKind::Quadratic, EstimatorKind::Fluid],
            steps,
            batches: 20,
            reps,
            seed: 42,
            loads: vec![Load::StationLoad { station: 1, rho: 0.5 }],
            zero_mask: false,
            threads: Some(2),
        }
    }

    #[test]
    fn single_rep_has_no_variance() {
        let report = run_experiment(&small(1, 100)).unwrap();
        assert_eq!(report.rows.len(), 3);
        for cell in &report.cells {
            assert_eq!(cell.variance, None);
            assert_eq!(cell.note.as_deref(), Some(INSUFFICIENT_REPS));
            assert!(cell.error.is_none());
        }
    }

    #[test]
    fn standard_reduction_is_one_and_rows_are_paired() {
        let report = run_experiment(&small(6, 4000)).unwrap();
        let std = report.cell(0.5, EstimatorKind::Standard).unwrap();
        assert_eq!(std.reduction, Some(1.0));
        assert!(report.cells.iter().all(|c| c.variance.unwrap() >= 0.0));
        for rep in 0..6 {
            let s = report.rows.iter().find(|r| r.rep == rep && r.estimator == EstimatorKind::Standard).unwrap();
            assert!(s.ci_lo <= s.point && s.point <= s.ci_hi);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut a = small(5, 3000);
        a.threads = Some(1);
        let mut b = a.clone();
        b.threads = Some(4);
        assert_eq!(run_experiment(&a).unwrap(), run_experiment(&b).unwrap());
    }

    #[test]
    fn unstable_load_is_a_cell_error() {
        let mut cfg = small(2, 200);
        cfg.loads = vec![Load::StationLoad { station: 1, rho: 1.2 }, Load::StationLoad { station: 1, rho: 0.3 }];
        let report = run_experiment(&cfg).unwrap();
        assert!(report.cell(1.2, EstimatorKind::Standard).unwrap().error.is_some());
        let ok = report.cell(0.3, EstimatorKind::Quadratic).unwrap();
        assert!(ok.error.is_none() && ok.reps == 2);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = small(0, 100);
        assert_eq!(run_experiment(&cfg), Err(ConfigError::NoReps));
        cfg.reps = 1;
        cfg.steps = 10;
        assert_eq!(
            run_experiment(&cfg),
            Err(ConfigError::TooFewSteps { steps: 10, batches: 20 })
        );
    }

    #[test]
    fn summaries_recompute_from_rows() {
        let report = run_experiment(&small(4, 2000)).unwrap();
        assert_eq!(summarize(&report.rows), report.cells);
    }
}
