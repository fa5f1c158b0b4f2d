//! Presets that rerun the published experiments on the two-station line and
//! the values they are compared against.

use netsim_core::chain::RngStream;
use netsim_core::network::uniformize;
use netsim_core::quadratic::{build_constraints, optimal_nu_diagnostic};
use netsim_core::{EstimatorKind, PriorityPolicy};
use serde::{Deserialize, Serialize};

use crate::experiment::{ExperimentConfig, Load};
use crate::files::two_station_three_buffer;

pub const PUBLISHED_STEPS: u64 = 100_000;
pub const PUBLISHED_BATCHES: usize = 20;
pub const PUBLISHED_REPS: usize = 200;
pub const DESK_REPS: usize = 50;

/// Station carrying `ρ₂` (0-based).
pub const RHO2_STATION: usize = 1;

/// One published row: load, then per estimator (mean, variance) and the
/// variance reduction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub rho2: f64,
    pub standard: (f64, f64),
    pub controlled: (f64, f64),
    pub reduction: f64,
}

/// Standard against quadratic, FBFS.
pub const TABLE1: [PublishedRow; 7] = [
    PublishedRow { rho2: 0.2, standard: (0.48, 2.1e-4), controlled: (0.48, 1.7e-6), reduction: 120.0 },
    PublishedRow { rho2: 0.4, standard: (1.26, 1.4e-3), controlled: (1.26, 2.7e-5), reduction: 52.0 },
    PublishedRow { rho2: 0.6, standard: (2.8, 1.1e-2), controlled: (2.8, 5.1e-4), reduction: 22.0 },
    PublishedRow { rho2: 0.8, standard: (6.9, 0.19), controlled: (6.9, 2.6e-2), reduction: 7.1 },
    PublishedRow { rho2: 0.9, standard: (14.0, 2.0), controlled: (14.0, 0.64), reduction: 3.1 },
    PublishedRow { rho2: 0.95, standard: (25.0, 13.0), controlled: (25.0, 7.1), reduction: 1.9 },
    PublishedRow { rho2: 0.99, standard: (70.0, 99.0), controlled: (70.0, 95.0), reduction: 1.0 },
];

/// Fluid estimator; the standard columns are not published for this table.
pub const TABLE3: [(f64, f64, f64, f64); 7] = [
    (0.2, 0.47, 6.1e-5, 3.5),
    (0.4, 1.3, 4.0e-4, 3.5),
    (0.6, 2.8, 3.5e-3, 3.1),
    (0.8, 6.9, 4.3e-2, 4.4),
    (0.9, 14.0, 0.17, 12.0),
    (0.95, 26.0, 0.23, 56.0),
    (0.99, 110.0, 0.98, 100.0),
];

/// Best possible quadratic weights: `(ρ₂, standard, quadratic, reduction)`
/// in asymptotic variance units per step.
pub const TABLE2: [(f64, f64, f64, f64); 5] = [
    (0.2, 14.0, 5.7e-3, 2500.0),
    (0.4, 88.0, 0.13, 680.0),
    (0.6, 670.0, 2.0, 340.0),
    (0.8, 1.7e4, 41.0, 420.0),
    (0.9, 7.1e4, 320.0, 220.0),
];

fn sweep(loads: &[f64]) -> Vec<Load> {
    loads
        .iter()
        .map(|&rho| Load::StationLoad {
            station: RHO2_STATION,
            rho,
        })
        .collect()
}

fn base(estimator: EstimatorKind, loads: &[f64], reps: usize, seed: u64) -> ExperimentConfig {
    let network = two_station_three_buffer(9.0);
    ExperimentConfig {
        policy: PriorityPolicy::fbfs(&network),
        network,
        estimators: vec![estimator],
        steps: PUBLISHED_STEPS,
        batches: PUBLISHED_BATCHES,
        reps,
        seed,
        loads: sweep(loads),
        zero_mask: false,
        threads: None,
    }
}

pub fn table1_config(reps: usize, seed: u64) -> ExperimentConfig {
    let loads: Vec<f64> = TABLE1.iter().map(|r| r.rho2).collect();
    base(EstimatorKind::Quadratic, &loads, reps, seed)
}

pub fn table3_config(reps: usize, seed: u64) -> ExperimentConfig {
    let loads: Vec<f64> = TABLE3.iter().map(|r| r.0).collect();
    base(EstimatorKind::Fluid, &loads, reps, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPossibleRow {
    pub rho2: f64,
    /// `p'Λp`.
    pub standard: f64,
    /// `min_ν (p+Uν)'Λ(p+Uν)`.
    pub quadratic: f64,
    pub reduction: f64,
    /// Same quadratic form at the least-squares `ν` actually used.
    pub least_squares: Option<f64>,
    /// `Λ` needed a ridge to be factored.
    pub regularized: bool,
}

/// Estimates the best achievable quadratic variance at each load from one
/// long run of `steps` transitions split into `batches` batches.
pub fn best_possible(loads: &[f64], steps: u64, batches: usize, seed: u64) -> netsim_core::Result<Vec<BestPossibleRow>> {
    let network = two_station_three_buffer(9.0);
    let policy = PriorityPolicy::fbfs(&network);
    loads
        .iter()
        .enumerate()
        .map(|(i, &rho2)| {
            let net = uniformize(&network.with_station_load(RHO2_STATION, rho2)?);
            let cv = build_constraints(&net, None)?.choose_nu()?;
            let d = optimal_nu_diagnostic(&net, &policy, &cv, steps, batches, &mut RngStream::new(seed, i as u64))?;
            Ok(BestPossibleRow {
                rho2,
                standard: d.standard_variance,
                quadratic: d.optimal_variance,
                reduction: d.reduction(),
                least_squares: d.chosen_variance,
                regularized: d.regularized,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_the_published_design() {
        let c = table1_config(DESK_REPS, 1);
        assert_eq!((c.steps, c.batches, c.reps), (100_000, 20, 50));
        assert_eq!(c.loads.len(), 7);
        assert_eq!(c.estimator_list(), vec![EstimatorKind::Standard, EstimatorKind::Quadratic]);
        let spec = c.loads[0].apply(&c.network).unwrap();
        // ρ₂ = λ/μ₂ with μ₂ = 10.
        assert!((spec.arrival_rates()[0] - 2.0).abs() < 1e-12);
        let c = table3_config(PUBLISHED_REPS, 1);
        assert_eq!(c.estimator_list(), vec![EstimatorKind::Standard, EstimatorKind::Fluid]);
    }

    #[test]
    fn published_reductions_are_variance_ratios() {
        for r in TABLE1 {
            let ratio = r.standard.1 / r.controlled.1;
            assert!((ratio / r.reduction - 1.0).abs() < 0.15, "{} {}", ratio, r.reduction);
        }
        for r in TABLE2 {
            assert!((r.1 / r.2 / r.3 - 1.0).abs() < 0.15);
        }
    }
}
