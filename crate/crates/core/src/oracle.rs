//! Independent reference computations used to check the estimators: M/M/1
//! closed forms, the stationary law of a truncated chain, and a brute-force
//! fluid integrator.

use alloc::vec;
use alloc::vec::Vec;

use crate::network::{NetworkSpec, UniformizedNetwork};
use crate::policy::{Allocation, Policy, PriorityPolicy};
use crate::{Error, Result};

/// Closed forms for the uniformized M/M/1 queue.
///
/// Rates are normalized so that `λ + μ = 1`; `α` is unaffected and `a`, `h*`
/// refer to the step-indexed chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mm1 {
    pub lambda: f64,
    pub mu: f64,
    /// `E_π Y = λ/(μ − λ)`.
    pub alpha: f64,
    /// `1/(2(μ − λ))`.
    pub a: f64,
}

pub fn mm1_analytics(lambda: f64, mu: f64) -> Result<Mm1> {
    if !(lambda >= 0.0 && lambda < mu) {
        return Err(Error::UnstableQueue { lambda, mu });
    }
    let total = lambda + mu;
    let (lambda, mu) = (lambda / total, mu / total);
    Ok(Mm1 {
        lambda,
        mu,
        alpha: lambda / (mu - lambda),
        a: 0.5 / (mu - lambda),
    })
}

impl Mm1 {
    /// `h*(y) = a(y² + y)`.
    pub fn h_star(&self, y: u32) -> f64 {
        let y = y as f64;
        self.a * (y * y + y)
    }

    /// `(P(y, y+1), P(y, y), P(y, y−1))`.
    pub fn transition_row(&self, y: u32) -> (f64, f64, f64) {
        if y == 0 {
            (self.lambda, self.mu, 0.0)
        } else {
            (self.lambda, 0.0, self.mu)
        }
    }

    /// `(P f)(y)`.
    pub fn apply(&self, y: u32, f: impl Fn(u32) -> f64) -> f64 {
        let (up, stay, down) = self.transition_row(y);
        let mut v = up * f(y + 1) + stay * f(y);
        if y > 0 {
            v += down * f(y - 1);
        }
        v
    }

    /// `P h*(y) − h*(y) − (α − y)`, which vanishes for the exact `h*`.
    pub fn poisson_residual(&self, y: u32) -> f64 {
        self.apply(y, |x| self.h_star(x)) - self.h_star(y) - (self.alpha - y as f64)
    }

    /// Stationary probability of `y` (geometric with ratio `λ/μ`).
    pub fn stationary(&self, y: u32) -> f64 {
        let rho = self.lambda / self.mu;
        (1.0 - rho) * libm::pow(rho, y as f64)
    }

    /// Time-average variance constant of `Y`, per step of the chain,
    /// `2 E[h*(Y)(Y − α)] − Var Y` with the sums carried to negligible tail.
    pub fn tavc(&self) -> f64 {
        let mut cross = 0.0;
        let mut var = 0.0;
        let mut y = 0u32;
        loop {
            let p = self.stationary(y);
            let c = y as f64 - self.alpha;
            cross += p * self.h_star(y) * c;
            var += p * c * c;
            if p < 1e-300 || (y > 10 && p * self.h_star(y) * c.abs() < 1e-18 * cross.abs()) {
                break;
            }
            y += 1;
        }
        2.0 * cross - var
    }
}

/// Stationary law of the uniformized chain restricted to a box
/// `0 ≤ y_i ≤ cap_i`. Arrivals to a full buffer are lost, and so is a job
/// routed into a full buffer on service completion.
#[derive(Debug, Clone)]
pub struct TruncatedChain {
    caps: Vec<u32>,
    states: Vec<Vec<u32>>,
    allocations: Vec<Allocation>,
    /// Sparse kernel in CSR form (self-loops merged).
    row_start: Vec<usize>,
    targets: Vec<usize>,
    probs: Vec<f64>,
    pi: Vec<f64>,
    residual: f64,
    iterations: usize,
}

pub const MAX_TRUNCATED_STATES: usize = 1_000_000;
const MAX_POWER_ITERATIONS: usize = 1_000_000;

pub fn truncated_stationary<P: Policy + ?Sized>(
    net: &UniformizedNetwork,
    policy: &P,
    caps: &[u32],
) -> Result<TruncatedChain> {
    truncated_stationary_to(net, policy, caps, 1e-10)
}

/// Same as [`truncated_stationary`] with a chosen stopping tolerance on
/// `‖πP − π‖₁`.
pub fn truncated_stationary_to<P: Policy + ?Sized>(
    net: &UniformizedNetwork,
    policy: &P,
    caps: &[u32],
    tol: f64,
) -> Result<TruncatedChain> {
    let spec = net.spec();
    let n = spec.num_classes();
    if caps.len() != n {
        return Err(Error::StateDimension {
            expected: n,
            got: caps.len(),
        });
    }
    let size = caps
        .iter()
        .try_fold(1usize, |acc, c| acc.checked_mul(*c as usize + 1))
        .filter(|s| *s <= MAX_TRUNCATED_STATES)
        .ok_or(Error::StateSpaceTooLarge(MAX_TRUNCATED_STATES))?;

    // Mixed radix, class 0 fastest.
    let mut stride = vec![1usize; n];
    for i in 1..n {
        stride[i] = stride[i - 1] * (caps[i - 1] as usize + 1);
    }
    let decode = |mut idx: usize| -> Vec<u32> {
        let mut y = vec![0u32; n];
        for i in 0..n {
            y[i] = (idx % (caps[i] as usize + 1)) as u32;
            idx /= caps[i] as usize + 1;
        }
        y
    };

    let lambda = spec.arrival_rates();
    let mu = spec.service_rates();
    let r = spec.routing();
    let mut states = Vec::with_capacity(size);
    let mut allocations = Vec::with_capacity(size);
    let mut row_start = Vec::with_capacity(size + 1);
    let mut targets = Vec::new();
    let mut probs = Vec::new();
    row_start.push(0);
    for idx in 0..size {
        let y = decode(idx);
        let w = policy.allocation(&y);
        let mut stay = 0.0;
        let push = |t: usize, p: f64, targets: &mut Vec<usize>, probs: &mut Vec<f64>| {
            if p > 0.0 {
                targets.push(t);
                probs.push(p);
            }
        };
        for k in 0..n {
            if y[k] < caps[k] {
                push(idx + stride[k], lambda[k], &mut targets, &mut probs);
            } else {
                stay += lambda[k];
            }
        }
        for j in 0..n {
            if !w.is_active(j) {
                stay += mu[j];
                continue;
            }
            let from = idx - stride[j];
            for k in 0..n {
                let p = mu[j] * r[(j, k)];
                if k == j {
                    stay += p;
                } else if y[k] < caps[k] {
                    push(from + stride[k], p, &mut targets, &mut probs);
                } else {
                    // Blocking here can deadlock a priority station.
                    push(from, p, &mut targets, &mut probs);
                }
            }
            push(from, mu[j] * spec.exit_probability(j), &mut targets, &mut probs);
        }
        push(idx, stay, &mut targets, &mut probs);
        row_start.push(targets.len());
        states.push(y);
        allocations.push(w);
    }

    let mut chain = TruncatedChain {
        caps: caps.to_vec(),
        states,
        allocations,
        row_start,
        targets,
        probs,
        pi: vec![0.0; size],
        residual: f64::INFINITY,
        iterations: 0,
    };
    chain.pi[0] = 1.0;
    chain.power_iterate(tol)?;
    Ok(chain)
}

impl TruncatedChain {
    /// `x ↦ xP`.
    fn push_forward(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (s, &mass) in x.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for e in self.row_start[s]..self.row_start[s + 1] {
                out[self.targets[e]] += mass * self.probs[e];
            }
        }
    }

    /// `f ↦ Pf`.
    fn pull_back(&self, f: &[f64], out: &mut [f64]) {
        for (s, o) in out.iter_mut().enumerate() {
            *o = (self.row_start[s]..self.row_start[s + 1])
                .map(|e| self.probs[e] * f[self.targets[e]])
                .sum();
        }
    }

    /// Iterates the lazy kernel `(I + P)/2`, which has the same stationary
    /// law and is aperiodic.
    fn power_iterate(&mut self, tol: f64) -> Result<()> {
        let mut next = vec![0.0; self.pi.len()];
        for it in 0..MAX_POWER_ITERATIONS {
            self.push_forward(&self.pi, &mut next);
            let residual: f64 = next.iter().zip(&self.pi).map(|(a, b)| (a - b).abs()).sum();
            self.residual = residual;
            self.iterations = it;
            if residual <= tol {
                return Ok(());
            }
            let mut total = 0.0;
            for (p, n) in self.pi.iter_mut().zip(&next) {
                *p = 0.5 * (*p + n);
                total += *p;
            }
            self.pi.iter_mut().for_each(|p| *p /= total);
        }
        Err(Error::NoConvergence { residual: self.residual })
    }

    pub fn caps(&self) -> &[u32] {
        &self.caps
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    /// `‖πP − π‖₁` at termination.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Largest deviation of a kernel row sum from one.
    pub fn row_sum_error(&self) -> f64 {
        (0..self.states.len())
            .map(|s| {
                let sum: f64 = self.probs[self.row_start[s]..self.row_start[s + 1]].iter().sum();
                (sum - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Stationary mass on states with some class at its cap.
    pub fn boundary_mass(&self) -> f64 {
        self.states
            .iter()
            .zip(&self.pi)
            .filter(|(y, _)| y.iter().zip(&self.caps).any(|(a, c)| a == c))
            .map(|(_, p)| p)
            .sum()
    }

    pub fn expectation(&self, f: impl Fn(&[u32], &Allocation) -> f64) -> f64 {
        self.states
            .iter()
            .zip(&self.allocations)
            .zip(&self.pi)
            .map(|((y, w), p)| p * f(y, w))
            .sum()
    }

    pub fn ybar(&self) -> Vec<f64> {
        let n = self.caps.len();
        (0..n).map(|j| self.expectation(|y, _| y[j] as f64)).collect()
    }

    /// `E_π[W_i Y_j]` at index `i·ℓ + j`.
    pub fn zbar(&self) -> Vec<f64> {
        let n = self.caps.len();
        let mut z = vec![0.0; n * n];
        for ((y, w), p) in self.states.iter().zip(&self.allocations).zip(&self.pi) {
            for i in (0..n).filter(|&i| w.is_active(i)) {
                for j in 0..n {
                    z[i * n + j] += p * y[j] as f64;
                }
            }
        }
        z
    }

    /// `E_π |Y|`.
    pub fn mean_population(&self) -> f64 {
        self.expectation(|y, _| y.iter().map(|v| *v as f64).sum())
    }

    /// Time-average variance constant of `f(Y)` per step,
    /// `2 E[ĥ (f − E f)] − Var f`, where `ĥ = Σ_{t≥0} P^t (f − E f)` solves
    /// Poisson's equation.
    pub fn tavc(&self, f: impl Fn(&[u32]) -> f64) -> Result<f64> {
        let values: Vec<f64> = self.states.iter().map(|y| f(y)).collect();
        let mean: f64 = values.iter().zip(&self.pi).map(|(v, p)| v * p).sum();
        let centred: Vec<f64> = values.iter().map(|v| v - mean).collect();
        let var: f64 = centred.iter().zip(&self.pi).map(|(c, p)| p * c * c).sum();
        let scale = centred.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let mut h = centred.clone();
        let mut term = centred.clone();
        let mut next = vec![0.0; h.len()];
        for _ in 0..MAX_POWER_ITERATIONS {
            self.pull_back(&term, &mut next);
            let drift: f64 = next.iter().zip(&self.pi).map(|(v, p)| v * p).sum();
            next.iter_mut().for_each(|v| *v -= drift);
            core::mem::swap(&mut term, &mut next);
            let size = term.iter().fold(0.0f64, |m, c| m.max(c.abs()));
            for (a, b) in h.iter_mut().zip(&term) {
                *a += b;
            }
            if size <= 1e-15 * scale {
                let cross: f64 = h.iter().zip(&centred).zip(&self.pi).map(|((h, c), p)| p * h * c).sum();
                return Ok(2.0 * cross - var);
            }
        }
        Err(Error::NoConvergence { residual: f64::NAN })
    }
}

/// `∫|φ|` by explicit Euler on a relaxation that needs no boundary rule:
/// each step a class is served at the largest rate its station has left and
/// its buffer can supply, with routed work arriving one step later.
pub fn euler_fluid(spec: &NetworkSpec, policy: &PriorityPolicy, y: &[f64], dt: f64) -> Result<f64> {
    let n = spec.num_classes();
    if y.len() != n {
        return Err(Error::StateDimension { expected: n, got: y.len() });
    }
    let lambda = spec.arrival_rates();
    let mu = spec.service_rates();
    let r = spec.routing();
    // Drain times grow linearly in the initial mass.
    let mass: f64 = y.iter().map(|v| v.max(0.0)).sum();
    let horizon = 1e6 * dt * n as f64 * (1.0 + mass);
    let max_steps = libm::ceil(horizon / dt) as u64;

    let mut phi: Vec<f64> = y.iter().map(|v| v.max(0.0)).collect();
    let mut routed = vec![0.0; n];
    let mut served = vec![0.0; n];
    let mut size: f64 = phi.iter().sum();
    let mut value = 0.0;
    let mut steps = 0u64;
    while size > 0.0 {
        if steps >= max_steps {
            return Err(Error::HorizonExceeded { horizon });
        }
        for i in 0..n {
            phi[i] += dt * lambda[i] + routed[i];
        }
        for order in policy.order() {
            let mut rem = 1.0f64;
            for &i in order {
                let full = mu[i] * dt * rem;
                if phi[i] <= full {
                    served[i] = phi[i];
                    rem -= phi[i] / (mu[i] * dt);
                    phi[i] = 0.0;
                } else {
                    served[i] = full;
                    phi[i] -= full;
                    rem = 0.0;
                }
                rem = rem.max(0.0);
            }
        }
        for k in 0..n {
            routed[k] = (0..n).map(|j| served[j] * r[(j, k)]).sum();
        }
        let next: f64 = phi.iter().sum::<f64>();
        value += 0.5 * dt * (size + next);
        size = next;
        steps += 1;
    }
    Ok(value)
}
