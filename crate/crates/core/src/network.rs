//! Open multiclass network model: validation, traffic equations and
//! uniformization.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{self, Matrix};
use crate::{Error, Result};

const ROW_SUM_SLACK: f64 = 1e-12;
const TRANSIENCE_THRESHOLD: f64 = 1e-12;
const TRANSIENCE_MAX_ITER: usize = 100_000;

/// Static description of an open multiclass network with exponential
/// service and Poisson arrivals. Always validated.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    num_stations: usize,
    station_of: Vec<usize>,
    arrival_rates: Vec<f64>,
    service_rates: Vec<f64>,
    routing: Matrix,
}

impl NetworkSpec {
    /// Validates and builds a network.
    ///
    /// `station_of[i]` is the 0-based station serving class `i`; `routing` is
    /// the ℓ×ℓ matrix of class-to-class transfer probabilities.
    pub fn new(
        num_stations: usize,
        station_of: Vec<usize>,
        arrival_rates: Vec<f64>,
        service_rates: Vec<f64>,
        routing: Matrix,
    ) -> Result<Self> {
        let classes = station_of.len();
        if classes == 0 {
            return Err(Error::InvalidNetwork("network needs at least one class"));
        }
        if num_stations == 0 {
            return Err(Error::BadStationMap("network needs at least one station"));
        }
        if arrival_rates.len() != classes || service_rates.len() != classes {
            return Err(Error::InvalidNetwork("rate vectors must have one entry per class"));
        }
        if routing.rows() != classes || routing.cols() != classes {
            return Err(Error::InvalidNetwork("routing matrix must be classes x classes"));
        }
        if station_of.iter().any(|&s| s >= num_stations) {
            return Err(Error::BadStationMap("class mapped to a nonexistent station"));
        }
        if (0..num_stations).any(|s| !station_of.contains(&s)) {
            return Err(Error::BadStationMap("station without classes"));
        }
        if arrival_rates.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidNetwork("arrival rates must be finite and nonnegative"));
        }
        if service_rates.iter().any(|m| !m.is_finite() || *m <= 0.0) {
            return Err(Error::InvalidNetwork("service rates must be finite and positive"));
        }
        if routing.as_slice().iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidNetwork("routing probabilities must be finite and nonnegative"));
        }
        for i in 0..classes {
            let sum: f64 = routing.row(i).iter().sum();
            if sum > 1.0 + ROW_SUM_SLACK {
                return Err(Error::NonTransientRouting { row: i, sum });
            }
        }
        check_transient(&routing)?;

        let spec = Self {
            num_stations,
            station_of,
            arrival_rates,
            service_rates,
            routing,
        };
        let gamma = spec.solve_gamma()?;
        if let Some(class) = gamma.iter().position(|g| !(*g > 0.0)) {
            return Err(Error::ZeroTraffic { class });
        }
        Ok(spec)
    }

    pub fn num_classes(&self) -> usize {
        self.station_of.len()
    }

    pub fn num_stations(&self) -> usize {
        self.num_stations
    }

    pub fn station_of(&self, class: usize) -> usize {
        self.station_of[class]
    }

    pub fn station_map(&self) -> &[usize] {
        &self.station_of
    }

    /// Classes served at `station`, in class order.
    pub fn classes_at(&self, station: usize) -> impl Iterator<Item = usize> + '_ {
        self.station_of
            .iter()
            .enumerate()
            .filter(move |(_, s)| **s == station)
            .map(|(i, _)| i)
    }

    pub fn arrival_rates(&self) -> &[f64] {
        &self.arrival_rates
    }

    pub fn service_rates(&self) -> &[f64] {
        &self.service_rates
    }

    pub fn routing(&self) -> &Matrix {
        &self.routing
    }

    /// `R_{i0}`, the probability a finished class-`i` job leaves the network.
    pub fn exit_probability(&self, class: usize) -> f64 {
        (1.0 - self.routing.row(class).iter().sum::<f64>()).max(0.0)
    }

    /// Copy with every exogenous arrival rate multiplied by `factor`.
    pub fn with_arrival_scale(&self, factor: f64) -> Result<Self> {
        let arrivals = self.arrival_rates.iter().map(|l| l * factor).collect();
        Self::new(
            self.num_stations,
            self.station_of.clone(),
            arrivals,
            self.service_rates.clone(),
            self.routing.clone(),
        )
    }

    /// Copy with arrivals scaled so that `station` carries load `target`.
    pub fn with_station_load(&self, station: usize, target: f64) -> Result<Self> {
        if station >= self.num_stations {
            return Err(Error::BadStationMap("load target names a nonexistent station"));
        }
        let current = solve_traffic(self).station_load[station];
        self.with_arrival_scale(target / current)
    }

    fn solve_gamma(&self) -> Result<Vec<f64>> {
        let n = self.num_classes();
        let mut a = Matrix::identity(n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] -= self.routing[(j, i)];
            }
        }
        linalg::solve(&a, &self.arrival_rates)
    }
}

/// Iterates `v ← R v` from `v = e`; transient routing drives `v` to zero.
fn check_transient(routing: &Matrix) -> Result<()> {
    let n = routing.rows();
    let mut v = vec![1.0; n];
    for _ in 0..TRANSIENCE_MAX_ITER {
        v = routing.mul_vec(&v);
        let norm = v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if norm < TRANSIENCE_THRESHOLD {
            return Ok(());
        }
    }
    let (row, sum) = (0..n)
        .map(|i| (i, routing.row(i).iter().sum::<f64>()))
        .fold((0, -1.0), |b, c| if c.1 > b.1 { c } else { b });
    Err(Error::NonTransientRouting { row, sum })
}

/// Solution of the traffic equations `γ = λ + R'γ` and the per-station loads.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSolution {
    pub gamma: Vec<f64>,
    /// `ρ_s = Σ_{i: s(i) = s} γ_i / μ_i`.
    pub station_load: Vec<f64>,
}

impl TrafficSolution {
    pub fn is_stable(&self) -> bool {
        self.station_load.iter().all(|r| *r < 1.0)
    }
}

pub fn solve_traffic(spec: &NetworkSpec) -> TrafficSolution {
    let gamma = spec
        .solve_gamma()
        .expect("validated networks have a nonsingular traffic system");
    let mut station_load = vec![0.0; spec.num_stations()];
    for (i, g) in gamma.iter().enumerate() {
        station_load[spec.station_of(i)] += g / spec.service_rates[i];
    }
    TrafficSolution { gamma, station_load }
}

/// A network whose rates have been rescaled so that `Σλ + Σμ = 1`; every rate
/// is then the probability of the corresponding event in one step of the
/// uniformized chain.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformizedNetwork {
    spec: NetworkSpec,
    traffic: TrafficSolution,
    time_scale: f64,
    mu0: f64,
}

impl UniformizedNetwork {
    /// The rescaled network.
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn traffic(&self) -> &TrafficSolution {
        &self.traffic
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    /// Divisor applied to the original rates.
    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }

    /// Pooled exogenous arrival probability `μ₀ = Σ_k λ_k`.
    pub fn mu0(&self) -> f64 {
        self.mu0
    }

    /// Row 0 of the extended routing matrix: an exogenous arrival joins
    /// class `k` with probability `λ_k / μ₀`.
    pub fn arrival_split(&self) -> Vec<f64> {
        if self.mu0 == 0.0 {
            return vec![0.0; self.num_classes()];
        }
        self.spec.arrival_rates.iter().map(|l| l / self.mu0).collect()
    }

    pub fn lambda(&self) -> &[f64] {
        &self.spec.arrival_rates
    }

    pub fn mu(&self) -> &[f64] {
        &self.spec.service_rates
    }

    pub fn gamma(&self) -> &[f64] {
        &self.traffic.gamma
    }
}

pub fn uniformize(spec: &NetworkSpec) -> UniformizedNetwork {
    let total: f64 = spec.arrival_rates.iter().sum::<f64>() + spec.service_rates.iter().sum::<f64>();
    let scaled = NetworkSpec {
        num_stations: spec.num_stations,
        station_of: spec.station_of.clone(),
        arrival_rates: spec.arrival_rates.iter().map(|l| l / total).collect(),
        service_rates: spec.service_rates.iter().map(|m| m / total).collect(),
        routing: spec.routing.clone(),
    };
    let traffic = solve_traffic(&scaled);
    let mu0 = scaled.arrival_rates.iter().sum();
    UniformizedNetwork {
        spec: scaled,
        traffic,
        time_scale: total,
        mu0,
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_station_network_is_valid() {
        let spec = two_station(9.0);
        assert_eq!(spec.num_classes(), 3);
        assert_eq!(spec.classes_at(0).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(spec.exit_probability(2), 1.0);
    }

    #[test]
    fn self_loop_with_probability_one_is_rejected() {
        let r = Matrix::from_row_major(1, 1, vec![1.0]).unwrap();
        let err = NetworkSpec::new(1, vec![0], vec![1.0], vec![2.0], r).unwrap_err();
        assert!(matches!(err, Error::NonTransientRouting { .. }));
    }

    #[test]
    fn row_sum_above_one_is_rejected() {
        let r = Matrix::from_row_major(2, 2, vec![0.0, 0.7, 0.6, 0.5]).unwrap();
        let err = NetworkSpec::new(1, vec![0, 0], vec![1.0, 0.0], vec![2.0, 2.0], r).unwrap_err();
        assert!(matches!(err, Error::NonTransientRouting { row: 1, .. }));
    }

    #[test]
    fn closed_cycle_is_rejected() {
        let r = Matrix::from_row_major(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let err = NetworkSpec::new(2, vec![0, 1], vec![1.0, 0.0], vec![2.0, 2.0], r).unwrap_err();
        assert!(matches!(err, Error::NonTransientRouting { .. }));
    }

    #[test]
    fn unreachable_class_has_zero_traffic() {
        let r = Matrix::zeros(2, 2);
        let err = NetworkSpec::new(1, vec![0, 0], vec![1.0, 0.0], vec![2.0, 2.0], r).unwrap_err();
        assert_eq!(err, Error::ZeroTraffic { class: 1 });
    }

    #[test]
    fn bad_station_maps() {
        let r = Matrix::zeros(2, 2);
        let err = NetworkSpec::new(2, vec![0, 2], vec![1.0, 1.0], vec![2.0, 2.0], r.clone()).unwrap_err();
        assert!(matches!(err, Error::BadStationMap(_)));
        let err = NetworkSpec::new(3, vec![0, 1], vec![1.0, 1.0], vec![2.0, 2.0], r).unwrap_err();
        assert!(matches!(err, Error::BadStationMap(_)));
    }

    #[test]
    fn traffic_of_two_station_network() {
        let t = solve_traffic(&two_station(9.0));
        for g in &t.gamma {
            assert!((g - 9.0).abs() < 1e-12);
        }
        assert!((t.station_load[0] - 9.0 / 11.0).abs() < 1e-12);
        assert!((t.station_load[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn traffic_of_mm1_and_tandem() {
        let t = solve_traffic(&mm1(0.3, 0.7));
        assert!((t.gamma[0] - 0.3).abs() < 1e-15);
        assert!((t.station_load[0] - 3.0 / 7.0).abs() < 1e-15);

        let mut r = Matrix::zeros(2, 2);
        r[(0, 1)] = 1.0;
        let tandem = NetworkSpec::new(2, vec![0, 1], vec![1.0, 0.0], vec![4.0, 2.0], r).unwrap();
        let t = solve_traffic(&tandem);
        assert_eq!(t.gamma, vec![1.0, 1.0]);
        assert_eq!(t.station_load, vec![0.25, 0.5]);
    }

    #[test]
    fn uniformize_two_station() {
        let u = uniformize(&two_station(9.0));
        assert_eq!(u.time_scale(), 63.0);
        let l = u.lambda();
        assert!((l[0] - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(&l[1..], &[0.0, 0.0]);
        let m = u.mu();
        assert!((m[0] - 22.0 / 63.0).abs() < 1e-15);
        assert!((m[1] - 10.0 / 63.0).abs() < 1e-15);
        assert!((u.mu0() - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(u.arrival_split(), vec![1.0, 0.0, 0.0]);
        let total: f64 = l.iter().chain(m).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniformize_mm1() {
        let u = uniformize(&mm1(3.0, 7.0));
        assert!((u.lambda()[0] - 0.3).abs() < 1e-15);
        assert!((u.mu()[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn station_load_rule() {
        let spec = two_station(1.0).with_station_load(1, 0.2).unwrap();
        assert!((spec.arrival_rates()[0] - 2.0).abs() < 1e-12);
    }

    fn random_transient() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..6).prop_flat_map(|n| {
            (
                Just(n),
                proptest::collection::vec(0.0f64..1.0, n * n),
                proptest::collection::vec(0.1f64..5.0, n),
                proptest::collection::vec(0.5f64..5.0, n),
            )
        })
    }

    /// Rows scaled to sum to at most 0.9 keep the matrix strictly substochastic.
    fn substochastic(n: usize, raw: &[f64]) -> Matrix {
        let mut r = Matrix::from_row_major(n, n, raw.to_vec()).unwrap();
        for i in 0..n {
            let s: f64 = r.row(i).iter().sum();
            let target = 0.9 * raw[i * n];
            for j in 0..n {
                r[(i, j)] *= if s > 0.0 { target / s } else { 0.0 };
            }
        }
        r
    }

    proptest! {
        #[test]
        fn traffic_residual_is_small((n, raw, lambda, mu) in random_transient()) {
            let r = substochastic(n, &raw);
            let spec = NetworkSpec::new(1, vec![0; n], lambda.clone(), mu, r.clone()).unwrap();
            let t = solve_traffic(&spec);
            let rg = r.tr_mul_vec(&t.gamma);
            let lmax = lambda.iter().fold(0.0f64, |a, b| a.max(*b));
            for i in 0..n {
                let resid = (t.gamma[i] - rg[i] - lambda[i]).abs();
                prop_assert!(resid <= 1e-10 * (1.0 + lmax));
            }
        }

        #[test]
        fn neumann_series_matches_direct_inverse((n, raw, _l, _m) in random_transient()) {
            let r = substochastic(n, &raw);
            let mut a = Matrix::identity(n);
            for i in 0..n { for j in 0..n { a[(i, j)] -= r[(i, j)]; } }
            let mut term = Matrix::identity(n);
            let mut series = Matrix::identity(n);
            for _ in 1..1000 {
                term = term.mul(&r).unwrap();
                for i in 0..n { for j in 0..n { series[(i, j)] += term[(i, j)]; } }
            }
            for col in 0..n {
                let mut e = vec![0.0; n];
                e[col] = 1.0;
                let x = linalg::solve(&a, &e).unwrap();
                for row in 0..n {
                    prop_assert!(x[row] >= -1e-12);
                    prop_assert!((x[row] - series[(row, col)]).abs() <= 1e-8);
                }
            }
        }

        #[test]
        fn uniformize_is_idempotent_and_preserves_loads((n, raw, lambda, mu) in random_transient()) {
            let r = substochastic(n, &raw);
            let spec = NetworkSpec::new(1, vec![0; n], lambda, mu, r).unwrap();
            let once = uniformize(&spec);
            let twice = uniformize(once.spec());
            prop_assert!((twice.time_scale() - 1.0).abs() < 1e-12);
            for (a, b) in once.lambda().iter().zip(twice.lambda()) {
                prop_assert!((a - b).abs() < 1e-15);
            }
            let before = solve_traffic(&spec).station_load;
            for (a, b) in before.iter().zip(&once.traffic().station_load) {
                prop_assert!((a - b).abs() < 1e-12 * (1.0 + a));
            }
        }
    }
}
