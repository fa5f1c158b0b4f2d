//! Fluid model under preemptive priority and the fluid value function.
//!
//! The fluid trajectory obeys `φ̇_k = λ_k − μ_k u_k + Σ_j μ_j u_j R_jk` with
//! `u` the fluid allocation. Under priority the allocation is constant on
//! cones of the positive orthant, so paths are piecewise linear and are
//! integrated exactly, one cone at a time.
//!
//! At an empty buffer the fluid allocation serves exactly the incoming flow,
//! if the station has capacity left, so the buffer stays empty.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use hashbrown::HashMap;

use crate::chain::{Control, RunAccumulator};
use crate::cvcore::{self, BetaRule, EstimatorKind, EstimatorResult};
use crate::linalg::{self, Matrix};
use crate::network::{NetworkSpec, UniformizedNetwork};
use crate::policy::{Allocation, PriorityPolicy};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Takes whatever capacity its station has left.
    Full,
    /// Empty buffer served at exactly its inflow rate.
    Balanced,
    /// Nothing left for it.
    Idle,
}

/// Fluid allocation and drift at `phi`.
///
/// Which empty classes can be kept empty depends on the inflows, which in
/// turn depend on the allocation. The allocation is found by guessing the
/// mode of every class, solving the resulting linear system, and correcting
/// the guess where a station runs out of capacity.
pub fn fluid_drift(spec: &NetworkSpec, policy: &PriorityPolicy, phi: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = spec.num_classes();
    if phi.len() != n {
        return Err(Error::StateDimension {
            expected: n,
            got: phi.len(),
        });
    }
    let lambda = spec.arrival_rates();
    let mu = spec.service_rates();
    let r = spec.routing();
    let tol = 1e-12;

    let mut mode = vec![Mode::Idle; n];
    for order in policy.order() {
        assign_from(order, 0, phi, &mut mode);
    }
    let inflow_of = |u: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|k| lambda[k] + (0..n).map(|j| mu[j] * u[j] * r[(j, k)]).sum::<f64>())
            .collect()
    };

    let passes = (n * n).max(4);
    for _ in 0..passes {
        let mut a = Matrix::zeros(n, n);
        let mut b = vec![0.0; n];
        for order in policy.order() {
            for (rank, &i) in order.iter().enumerate() {
                match mode[i] {
                    Mode::Idle => a[(i, i)] = 1.0,
                    Mode::Full => {
                        for &j in &order[..=rank] {
                            a[(i, j)] = 1.0;
                        }
                        b[i] = 1.0;
                    }
                    Mode::Balanced => {
                        a[(i, i)] += mu[i];
                        for j in 0..n {
                            a[(i, j)] -= mu[j] * r[(j, i)];
                        }
                        b[i] = lambda[i];
                    }
                }
            }
        }
        let u = linalg::solve(&a, &b).map_err(|_| Error::NonConvergentBoundary { state: phi.to_vec() })?;
        let inflow = inflow_of(&u);

        let mut changed = false;
        for order in policy.order() {
            let mut rem = 1.0;
            for (rank, &i) in order.iter().enumerate() {
                match mode[i] {
                    Mode::Balanced if u[i] > rem + tol => {
                        mode[i] = Mode::Full;
                        order[rank + 1..].iter().for_each(|&k| mode[k] = Mode::Idle);
                        changed = true;
                        break;
                    }
                    Mode::Full if phi[i] <= 0.0 && inflow[i] / mu[i] < rem - tol => {
                        mode[i] = Mode::Balanced;
                        assign_from(order, rank + 1, phi, &mut mode);
                        changed = true;
                        break;
                    }
                    Mode::Full | Mode::Idle => break,
                    Mode::Balanced => rem -= u[i],
                }
            }
        }
        if !changed {
            let u: Vec<f64> = u.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            let inflow = inflow_of(&u);
            let drift = (0..n)
                .map(|i| {
                    let d = inflow[i] - mu[i] * u[i];
                    if phi[i] <= 0.0 && d <= tol * (inflow[i] + mu[i] * u[i]) {
                        0.0
                    } else {
                        d
                    }
                })
                .collect();
            return Ok((u, drift));
        }
    }
    Err(Error::NonConvergentBoundary { state: phi.to_vec() })
}

/// Default modes for `order[from..]`: empty classes balanced until the first
/// nonempty one, which takes the rest.
fn assign_from(order: &[usize], from: usize, phi: &[f64], mode: &mut [Mode]) {
    let mut saturated = false;
    for &i in &order[from..] {
        mode[i] = if saturated {
            Mode::Idle
        } else if phi[i] > 0.0 {
            saturated = true;
            Mode::Full
        } else {
            Mode::Balanced
        };
    }
}

/// One linear piece of a fluid path.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidSegment {
    pub start: f64,
    pub duration: f64,
    /// `φ` at the start of the segment.
    pub phi: Vec<f64>,
    pub drift: Vec<f64>,
    pub allocation: Vec<f64>,
}

impl FluidSegment {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn phi_at(&self, t: f64) -> Vec<f64> {
        let s = (t - self.start).clamp(0.0, self.duration);
        self.phi.iter().zip(&self.drift).map(|(p, d)| (p + s * d).max(0.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FluidPath {
    segments: Vec<FluidSegment>,
    drain_time: f64,
    value: f64,
}

impl FluidPath {
    pub fn segments(&self) -> &[FluidSegment] {
        &self.segments
    }

    /// `T₀`, the first time `φ = 0`.
    pub fn drain_time(&self) -> f64 {
        self.drain_time
    }

    /// `∫₀^{T₀} |φ(t)| dt`.
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn phi_at(&self, t: f64) -> Vec<f64> {
        match self.segments.iter().find(|s| t <= s.end()) {
            Some(s) => s.phi_at(t),
            None => vec![0.0; self.segments.first().map_or(0, |s| s.phi.len())],
        }
    }
}

/// Integrates the fluid model from `y` until it drains.
pub fn solve_fluid(spec: &NetworkSpec, policy: &PriorityPolicy, y: &[f64]) -> Result<FluidPath> {
    let n = spec.num_classes();
    if y.len() != n {
        return Err(Error::StateDimension { expected: n, got: y.len() });
    }
    let mut phi: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
    let size0: f64 = phi.iter().sum();
    let snap = 1e-12 * size0;
    let max_segments = 64 * n * n;

    let mut segments = Vec::new();
    let mut t = 0.0;
    let mut value = 0.0;
    let mut size = size0;
    while size > 0.0 {
        if segments.len() >= max_segments {
            return Err(Error::FluidUnstable { state: y.to_vec() });
        }
        let (u, drift) = fluid_drift(spec, policy, &phi)?;
        let hit = (0..n)
            .filter(|&i| phi[i] > 0.0 && drift[i] < 0.0)
            .map(|i| (i, phi[i] / -drift[i]))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        let Some((first, tau)) = hit else {
            return Err(Error::FluidUnstable { state: y.to_vec() });
        };

        let mut next: Vec<f64> = phi.iter().zip(&drift).map(|(p, d)| p + tau * d).collect();
        next[first] = 0.0;
        for v in next.iter_mut() {
            if *v <= snap {
                *v = 0.0;
            }
        }
        let next_size: f64 = next.iter().sum();
        value += 0.5 * tau * (size + next_size);
        segments.push(FluidSegment {
            start: t,
            duration: tau,
            phi: core::mem::replace(&mut phi, next),
            drift,
            allocation: u,
        });
        t += tau;
        size = next_size;
    }
    Ok(FluidPath {
        segments,
        drain_time: t,
        value,
    })
}

/// Two generations of memoized values. When the young generation fills it
/// replaces the old one, which is dropped; hits in the old generation are
/// promoted. This approximates LRU with at most `capacity` entries.
#[derive(Debug, Clone)]
struct ValueCache {
    young: HashMap<Box<[u32]>, f64>,
    old: HashMap<Box<[u32]>, f64>,
    half: usize,
}

impl ValueCache {
    fn new(capacity: usize) -> Self {
        Self {
            young: HashMap::new(),
            old: HashMap::new(),
            half: (capacity / 2).max(1),
        }
    }

    fn get(&mut self, y: &[u32]) -> Option<f64> {
        if let Some(v) = self.young.get(y) {
            return Some(*v);
        }
        let (k, v) = self.old.remove_entry(y)?;
        self.insert_key(k, v);
        Some(v)
    }

    fn insert_key(&mut self, key: Box<[u32]>, v: f64) {
        if self.young.len() >= self.half {
            self.old = core::mem::take(&mut self.young);
        }
        self.young.insert(key, v);
    }

    fn len(&self) -> usize {
        self.young.len() + self.old.len()
    }
}

pub const DEFAULT_CACHE_CAPACITY: usize = 1_000_000;

/// `V(y) = ∫|φ|` on the uniformized time scale, with a bounded memo.
///
/// Each worker should own its own clone; `value` is a pure function of `y`.
#[derive(Debug, Clone)]
pub struct FluidValueFn {
    net: UniformizedNetwork,
    policy: PriorityPolicy,
    cache: ValueCache,
    scratch: Vec<u32>,
    phi: Vec<f64>,
}

impl FluidValueFn {
    pub fn new(net: &UniformizedNetwork, policy: &PriorityPolicy) -> Self {
        Self::with_capacity(net, policy, DEFAULT_CACHE_CAPACITY)
    }

    pub fn with_capacity(net: &UniformizedNetwork, policy: &PriorityPolicy, capacity: usize) -> Self {
        let n = net.num_classes();
        Self {
            net: net.clone(),
            policy: policy.clone(),
            cache: ValueCache::new(capacity),
            scratch: vec![0; n],
            phi: vec![0.0; n],
        }
    }

    pub fn network(&self) -> &UniformizedNetwork {
        &self.net
    }

    pub fn policy(&self) -> &PriorityPolicy {
        &self.policy
    }

    pub fn cached_states(&self) -> usize {
        self.cache.len()
    }

    pub fn path(&self, y: &[u32]) -> Result<FluidPath> {
        let phi: Vec<f64> = y.iter().map(|v| *v as f64).collect();
        solve_fluid(self.net.spec(), &self.policy, &phi)
    }

    pub fn value(&mut self, y: &[u32]) -> Result<f64> {
        cached_value(&mut self.cache, &mut self.phi, &self.net, &self.policy, y)
    }

    /// `Δ_V(y) = PV(y) − V(y)` for the uniformized chain with allocation `w`.
    pub fn delta(&mut self, y: &[u32], w: &Allocation) -> Result<f64> {
        let n = y.len();
        if n != self.net.num_classes() {
            return Err(Error::StateDimension {
                expected: self.net.num_classes(),
                got: n,
            });
        }
        let Self {
            net,
            policy,
            cache,
            scratch,
            phi,
        } = self;
        let spec = net.spec();
        let lambda = spec.arrival_rates();
        let mu = spec.service_rates();
        let r = spec.routing();
        let mut v = |state: &[u32]| cached_value(cache, phi, net, policy, state);
        scratch.copy_from_slice(y);

        let v0 = v(y)?;
        let mut pv = 0.0;
        let mut idle = 0.0;
        for k in (0..n).filter(|&k| lambda[k] > 0.0) {
            scratch[k] += 1;
            pv += lambda[k] * v(scratch)?;
            scratch[k] -= 1;
        }
        for j in 0..n {
            if !w.is_active(j) {
                idle += mu[j];
                continue;
            }
            scratch[j] -= 1;
            let mut inner = 0.0;
            for k in (0..n).filter(|&k| r[(j, k)] > 0.0) {
                scratch[k] += 1;
                inner += r[(j, k)] * v(scratch)?;
                scratch[k] -= 1;
            }
            let exit = spec.exit_probability(j);
            if exit > 0.0 {
                inner += exit * v(scratch)?;
            }
            scratch[j] += 1;
            pv += mu[j] * inner;
        }
        Ok(pv + idle * v0 - v0)
    }
}

fn cached_value(
    cache: &mut ValueCache,
    phi: &mut [f64],
    net: &UniformizedNetwork,
    policy: &PriorityPolicy,
    y: &[u32],
) -> Result<f64> {
    if y.iter().all(|v| *v == 0) {
        return Ok(0.0);
    }
    if let Some(v) = cache.get(y) {
        return Ok(v);
    }
    for (p, v) in phi.iter_mut().zip(y) {
        *p = *v as f64;
    }
    let v = solve_fluid(net.spec(), policy, phi)?.value();
    cache.insert_key(y.into(), v);
    Ok(v)
}

impl Control for FluidValueFn {
    fn evaluate(&mut self, y: &[u32], w: &Allocation) -> Result<f64> {
        self.delta(y, w)
    }
}

/// Fluid estimator from a run that recorded [`FluidValueFn`] as control
/// number `control`.
pub fn fluid_estimate(run: &RunAccumulator, control: usize, batches: usize, rule: BetaRule) -> Result<EstimatorResult> {
    let series = run.control_series(control).ok_or(Error::MissingControl(control))?;
    let bs = cvcore::batch(run.population_series(), Some(series), batches)?;
    Ok(cvcore::controlled_estimate(EstimatorKind::Fluid, &bs, rule))
}
