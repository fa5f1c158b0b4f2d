//! The uniformized discrete-time chain and the per-run statistics every
//! estimator needs.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::network::UniformizedNetwork;
use crate::policy::{Allocation, Policy};
use crate::{Error, Result};

/// Uniform random numbers for one replication.
///
/// `(seed, rep)` selects a ChaCha8 key and stream, so replications are
/// independent and every trajectory is reproducible bit for bit.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rep: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, rep: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(rep);
        Self { seed, rep, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rep(&self) -> u64 {
        self.rep
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// One entry of the event table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    /// Exogenous arrival to `class`.
    Arrival { class: usize },
    /// Potential service completion of `class`, routed to `to` (or leaving
    /// when `None`). It is virtual when `class` is not being served.
    Service { class: usize, to: Option<usize> },
}

/// Cumulative distribution over the at most `ℓ² + 2ℓ` possible events of one
/// uniformized step.
#[derive(Debug, Clone)]
pub struct EventTable {
    events: Vec<Event>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl EventTable {
    pub fn new(net: &UniformizedNetwork) -> Self {
        let spec = net.spec();
        let n = spec.num_classes();
        let mut events = Vec::new();
        let mut probs = Vec::new();
        for (k, &l) in net.lambda().iter().enumerate() {
            if l > 0.0 {
                events.push(Event::Arrival { class: k });
                probs.push(l);
            }
        }
        for j in 0..n {
            let mu = net.mu()[j];
            for k in 0..n {
                let r = spec.routing()[(j, k)];
                if r > 0.0 {
                    events.push(Event::Service { class: j, to: Some(k) });
                    probs.push(mu * r);
                }
            }
            let exit = spec.exit_probability(j);
            if exit > 0.0 {
                events.push(Event::Service { class: j, to: None });
                probs.push(mu * exit);
            }
        }
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self {
            events,
            probs,
            cumulative,
        }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (Event, f64)> + '_ {
        self.events.iter().copied().zip(self.probs.iter().copied())
    }

    /// Maps a uniform draw to an event.
    #[inline]
    pub fn sample(&self, u: f64) -> Event {
        let idx = self.cumulative.partition_point(|c| *c <= u);
        self.events[idx.min(self.events.len() - 1)]
    }
}

/// Population vector and step index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainState {
    pub y: Vec<u32>,
    pub step: u64,
}

impl ChainState {
    pub fn empty(classes: usize) -> Self {
        Self {
            y: vec![0; classes],
            step: 0,
        }
    }

    /// Applies `event` under allocation `w`. Returns false for a virtual
    /// (self-loop) event. The step counter advances either way.
    #[inline]
    pub fn apply(&mut self, event: Event, w: &Allocation) -> bool {
        self.step += 1;
        match event {
            Event::Arrival { class } => {
                self.y[class] += 1;
                true
            }
            Event::Service { class, to } => {
                if !w.is_active(class) {
                    return false;
                }
                self.y[class] -= 1;
                if let Some(k) = to {
                    self.y[k] += 1;
                }
                true
            }
        }
    }
}

/// Steps the chain under a policy.
#[derive(Debug)]
pub struct Simulator<'p, P: Policy + ?Sized> {
    table: EventTable,
    policy: &'p P,
    state: ChainState,
    alloc: Allocation,
}

impl<'p, P: Policy + ?Sized> Simulator<'p, P> {
    pub fn new(net: &UniformizedNetwork, policy: &'p P, initial: ChainState) -> Result<Self> {
        let n = net.num_classes();
        if initial.y.len() != n {
            return Err(Error::StateDimension {
                expected: n,
                got: initial.y.len(),
            });
        }
        let mut alloc = Allocation::idle(n);
        policy.allocate(&initial.y, &mut alloc);
        Ok(Self {
            table: EventTable::new(net),
            policy,
            state: initial,
            alloc,
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    /// Allocation in the current state.
    pub fn allocation(&self) -> &Allocation {
        &self.alloc
    }

    pub fn events(&self) -> &EventTable {
        &self.table
    }

    /// One uniformized transition; returns the sampled event.
    #[inline]
    pub fn step(&mut self, rng: &mut RngStream) -> Event {
        let event = self.table.sample(rng.uniform());
        if self.state.apply(event, &self.alloc) {
            self.policy.allocate(&self.state.y, &mut self.alloc);
        }
        event
    }
}

/// A per-step statistic recorded alongside the trajectory, such as a
/// control variate.
pub trait Control {
    fn evaluate(&mut self, y: &[u32], w: &Allocation) -> Result<f64>;
}

impl<C: Control + ?Sized> Control for &mut C {
    fn evaluate(&mut self, y: &[u32], w: &Allocation) -> Result<f64> {
        (**self).evaluate(y, w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOptions {
    /// Observations accumulated (`n`).
    pub steps: u64,
    /// Transitions discarded before accumulating. Off by default.
    pub warmup: u64,
    /// Starting population; empty network when `None`.
    pub initial: Option<Vec<u32>>,
}

impl RunOptions {
    pub fn new(steps: u64) -> Self {
        Self {
            steps,
            warmup: 0,
            initial: None,
        }
    }
}

/// Running sums over a trajectory.
///
/// Step `n` contributes the state *before* its transition, so the first
/// observation is `Y(0)`. Sums are kept in integers, which makes the identity
/// `Σ_n y_j(n) = Σ_{i: s(i)=s(j)} Σ_n w_i(n) y_j(n)` exact.
#[derive(Debug, Clone, PartialEq)]
pub struct RunAccumulator {
    steps: u64,
    classes: usize,
    y_sum: Vec<u64>,
    z_sum: Vec<u64>,
    population: Vec<f64>,
    controls: Vec<Vec<f64>>,
    final_state: ChainState,
}

impl RunAccumulator {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn y_sum(&self) -> &[u64] {
        &self.y_sum
    }

    /// `Σ_n W_i(n) Y_j(n)` at index `i * ℓ + j`.
    pub fn z_sum(&self) -> &[u64] {
        &self.z_sum
    }

    pub fn ybar(&self) -> Vec<f64> {
        let n = self.steps as f64;
        self.y_sum.iter().map(|s| *s as f64 / n).collect()
    }

    pub fn zbar(&self) -> Vec<f64> {
        let n = self.steps as f64;
        self.z_sum.iter().map(|s| *s as f64 / n).collect()
    }

    /// `|Ȳ(n)|`, the standard estimator.
    pub fn mean_population(&self) -> f64 {
        self.y_sum.iter().sum::<u64>() as f64 / self.steps as f64
    }

    /// `|Y(n)|` for every accumulated step.
    pub fn population_series(&self) -> &[f64] {
        &self.population
    }

    pub fn control_series(&self, index: usize) -> Option<&[f64]> {
        self.controls.get(index).map(|c| c.as_slice())
    }

    pub fn num_controls(&self) -> usize {
        self.controls.len()
    }

    /// State after the last transition.
    pub fn final_state(&self) -> &ChainState {
        &self.final_state
    }
}

/// Simulates `opts.steps` observations and evaluates every control at each
/// observed state.
pub fn run<P: Policy + ?Sized>(
    net: &UniformizedNetwork,
    policy: &P,
    opts: &RunOptions,
    rng: &mut RngStream,
    controls: &mut [&mut dyn Control],
) -> Result<RunAccumulator> {
    let n = net.num_classes();
    let initial = match &opts.initial {
        Some(y) => ChainState { y: y.clone(), step: 0 },
        None => ChainState::empty(n),
    };
    let mut sim = Simulator::new(net, policy, initial)?;
    for _ in 0..opts.warmup {
        sim.step(rng);
    }

    let cap = usize::try_from(opts.steps).unwrap_or(usize::MAX);
    let mut y_sum = vec![0u64; n];
    let mut z_sum = vec![0u64; n * n];
    let mut population = Vec::with_capacity(cap);
    let mut series: Vec<Vec<f64>> = controls.iter().map(|_| Vec::with_capacity(cap)).collect();

    for step in 0..opts.steps {
        let y = &sim.state().y;
        let w = sim.allocation();
        let mut total = 0u64;
        for (s, &yj) in y_sum.iter_mut().zip(y) {
            *s += yj as u64;
            total += yj as u64;
        }
        for i in (0..n).filter(|&i| w.is_active(i)) {
            for (z, &yj) in z_sum[i * n..(i + 1) * n].iter_mut().zip(y) {
                *z += yj as u64;
            }
        }
        population.push(total as f64);
        for (idx, (control, out)) in controls.iter_mut().zip(series.iter_mut()).enumerate() {
            let v = control.evaluate(y, w).map_err(|e| Error::ControlEvaluation {
                step,
                control: idx,
                source: Box::new(e),
            })?;
            out.push(v);
        }
        sim.step(rng);
    }

    Ok(RunAccumulator {
        steps: opts.steps,
        classes: n,
        y_sum,
        z_sum,
        population,
        controls: series,
        final_state: sim.state.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures::{mm1, two_station};
    use crate::network::uniformize;
    use crate::policy::PriorityPolicy;

    #[test]
    fn rng_is_reproducible_and_streams_differ() {
        let mut a = RngStream::new(42, 3);
        let mut b = RngStream::new(42, 3);
        let mut c = RngStream::new(42, 4);
        let xs: Vec<f64> = (0..100).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..100).map(|_| b.uniform()).collect();
        let zs: Vec<f64> = (0..100).map(|_| c.uniform()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
        assert!(xs.iter().all(|u| (0.0..1.0).contains(u)));
    }

    #[test]
    fn mm1_event_table() {
        let net = uniformize(&mm1(0.3, 0.7));
        let entries: Vec<_> = net_entries(&net);
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].0, Event::Arrival { class: 0 });
        assert!((entries[0].1 - 0.3).abs() < 1e-15);
        assert_eq!(entries[1].0, Event::Service { class: 0, to: None });
        assert!((entries[1].1 - 0.7).abs() < 1e-15);
    }

    fn net_entries(net: &UniformizedNetwork) -> Vec<(Event, f64)> {
        EventTable::new(net).entries().collect()
    }

    #[test]
    fn mm1_transitions() {
        let net = uniformize(&mm1(0.3, 0.7));
        let table = EventTable::new(&net);
        let policy = PriorityPolicy::fbfs(net.spec());
        // From y = 0 a service draw is a self-loop.
        let mut s = ChainState { y: vec![0], step: 0 };
        let w = policy.allocation(&s.y);
        assert!(!s.apply(table.sample(0.5), &w));
        assert_eq!(s.y, vec![0]);
        assert_eq!(s.step, 1);
        // From y = 4: u < 0.3 arrives, otherwise departs.
        let mut s = ChainState { y: vec![4], step: 0 };
        let w = policy.allocation(&s.y);
        s.apply(table.sample(0.29), &w);
        assert_eq!(s.y, vec![5]);
        let mut s = ChainState { y: vec![4], step: 0 };
        s.apply(table.sample(0.31), &w);
        assert_eq!(s.y, vec![3]);
    }

    #[test]
    fn class_three_completion_leaves_the_network() {
        let net = uniformize(&two_station(9.0));
        let table = EventTable::new(&net);
        let exit: Vec<_> = table
            .entries()
            .filter(|(e, _)| *e == Event::Service { class: 2, to: None })
            .collect();
        assert_eq!(exit.len(), 1);
        assert!((exit[0].1 - 22.0 / 63.0).abs() < 1e-15);
        let w = Allocation::from_active(vec![false, false, true]);
        let mut s = ChainState { y: vec![0, 0, 1], step: 0 };
        assert!(s.apply(Event::Service { class: 2, to: None }, &w));
        assert_eq!(s.y, vec![0, 0, 0]);
    }

    #[test]
    fn single_empty_observation() {
        let net = uniformize(&two_station(9.0));
        let policy = PriorityPolicy::fbfs(net.spec());
        let acc = run(&net, &policy, &RunOptions::new(1), &mut RngStream::new(1, 0), &mut []).unwrap();
        assert_eq!(acc.ybar(), vec![0.0; 3]);
        assert_eq!(acc.zbar(), vec![0.0; 9]);
        assert_eq!(acc.population_series(), &[0.0]);
    }

    #[test]
    fn rainagain_identity_is_exact() {
        let net = uniformize(&two_station(8.0));
        let spec = net.spec();
        let policy = PriorityPolicy::fbfs(spec);
        for steps in [1u64, 7, 1000, 20_000] {
            let acc = run(&net, &policy, &RunOptions::new(steps), &mut RngStream::new(9, steps), &mut []).unwrap();
            for j in 0..3 {
                let z: u64 = spec
                    .classes_at(spec.station_of(j))
                    .map(|i| acc.z_sum()[i * 3 + j])
                    .sum();
                assert_eq!(acc.y_sum()[j], z);
            }
        }
    }

    #[test]
    fn same_seed_same_run() {
        let net = uniformize(&two_station(8.0));
        let policy = PriorityPolicy::fbfs(net.spec());
        let a = run(&net, &policy, &RunOptions::new(5000), &mut RngStream::new(5, 1), &mut []).unwrap();
        let b = run(&net, &policy, &RunOptions::new(5000), &mut RngStream::new(5, 1), &mut []).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn initial_state_dimension_is_checked() {
        let net = uniformize(&two_station(8.0));
        let policy = PriorityPolicy::fbfs(net.spec());
        let opts = RunOptions {
            initial: Some(vec![1, 2]),
            ..RunOptions::new(10)
        };
        let err = run(&net, &policy, &opts, &mut RngStream::new(5, 1), &mut []).unwrap_err();
        assert_eq!(err, Error::StateDimension { expected: 3, got: 2 });
    }

    struct Failing;

    impl Control for Failing {
        fn evaluate(&mut self, y: &[u32], _w: &Allocation) -> Result<f64> {
            if y[0] > 2 {
                Err(Error::FluidUnstable { state: vec![] })
            } else {
                Ok(0.0)
            }
        }
    }

    #[test]
    fn control_failure_carries_step() {
        let net = uniformize(&mm1(0.45, 0.55));
        let policy = PriorityPolicy::fbfs(net.spec());
        let mut f = Failing;
        let err = run(&net, &policy, &RunOptions::new(100_000), &mut RngStream::new(1, 1), &mut [&mut f]).unwrap_err();
        match err {
            Error::ControlEvaluation { step, control, .. } => {
                assert!(step > 0);
                assert_eq!(control, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn event_frequencies_match_probabilities() {
        // Frozen allocation: draw events from a fixed state without moving.
        let net = uniformize(&two_station(9.0));
        let table = EventTable::new(&net);
        let w = Allocation::from_active(vec![true, false, false]);
        let mut rng = RngStream::new(77, 0);
        let draws = 1_000_000u32;
        let mut counts = vec![0u32; table.len()];
        let mut virtual_count = 0u32;
        for _ in 0..draws {
            let e = table.sample(rng.uniform());
            let idx = table.entries().position(|(x, _)| x == e).unwrap();
            counts[idx] += 1;
            let mut s = ChainState { y: vec![2, 1, 5], step: 0 };
            if !s.apply(e, &w) {
                virtual_count += 1;
            }
        }
        let mut virtual_prob = 0.0;
        for ((e, p), c) in table.entries().zip(&counts) {
            let se = libm::sqrt(p * (1.0 - p) / draws as f64);
            let freq = *c as f64 / draws as f64;
            assert!((freq - p).abs() <= 4.0 * se, "{e:?}: {freq} vs {p}");
            if let Event::Service { class, .. } = e {
                if !w.is_active(class) {
                    virtual_prob += p;
                }
            }
        }
        let vf = virtual_count as f64 / draws as f64;
        let se = libm::sqrt(virtual_prob * (1.0 - virtual_prob) / draws as f64);
        assert!((vf - virtual_prob).abs() <= 4.0 * se);
    }

    #[test]
    fn martingale_increments_average_to_zero() {
        // Y(n) − Y(0) − Σ B W(i) should stay O(√n).
        let net = uniformize(&two_station(7.0));
        let spec = net.spec();
        let policy = PriorityPolicy::fbfs(spec);
        let mut sim = Simulator::new(&net, &policy, ChainState::empty(3)).unwrap();
        let mut rng = RngStream::new(3, 3);
        let steps = 200_000u64;
        let mut drift_sum = [0.0f64; 3];
        for _ in 0..steps {
            let w = sim.allocation().clone();
            for (k, d) in drift_sum.iter_mut().enumerate() {
                let mut b = net.lambda()[k] - net.mu()[k] * w.weight(k);
                for j in 0..3 {
                    b += net.mu()[j] * w.weight(j) * spec.routing()[(j, k)];
                }
                *d += b;
            }
            sim.step(&mut rng);
        }
        // Each increment moves at most two coordinates by one, so its second
        // moment per coordinate is at most 1.
        let bound = 4.0 * libm::sqrt(1.0 / steps as f64);
        for k in 0..3 {
            let m = (sim.state().y[k] as f64 - drift_sum[k]) / steps as f64;
            assert!(m.abs() <= bound, "coordinate {k}: {m}");
        }
    }
}
