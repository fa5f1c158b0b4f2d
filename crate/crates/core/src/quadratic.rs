//! Quadratic control variate.
//!
//! Taking stationary expectations of the one-step drift of `y_j y_k`
//! (`1 ≤ j ≤ k ≤ ℓ`) gives `ℓ(ℓ+1)/2` linear equations in the moments
//! `z̄_ij = E_π[W_i Y_j]`, once every `ȳ_j` is replaced by
//! `Σ_{i: s(i)=s(j)} z̄_ij`. They are collected as `U' z̄ = c` with `U` of size
//! `ℓ² × ℓ(ℓ+1)/2`. For any weights `ν`, `ν'(U'Z(n) − c)` then has stationary
//! mean zero and is used as a control for the response `p'Z(n) = |Y(n)|`.
//!
//! Row `i·ℓ + j` of `U` (and of `p`, `z`) belongs to `z_ij`; column order is
//! `(0,0), (0,1), …, (0,ℓ−1), (1,1), …`. Each column is oriented so that its
//! constant `c_jk` collects the routing terms with a nonnegative sign.

use alloc::vec;
use alloc::vec::Vec;

use crate::chain::{Control, RngStream, Simulator};
use crate::cvcore::{self, BetaRule, EstimatorKind, EstimatorResult};
use crate::linalg::{self, Matrix};
use crate::network::UniformizedNetwork;
use crate::policy::{Allocation, Policy, PriorityPolicy};
use crate::chain::{ChainState, RunAccumulator};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCv {
    classes: usize,
    u: Matrix,
    c: Vec<f64>,
    p: Vec<f64>,
    zero_mask: Option<Vec<bool>>,
    nu: Option<NuChoice>,
}

#[derive(Debug, Clone, PartialEq)]
struct NuChoice {
    nu: Vec<f64>,
    residual: f64,
    rank_deficient: bool,
    /// `U ν`, so the control is `gain' z − offset`.
    gain: Vec<f64>,
    /// `ν' c`
    offset: f64,
}

/// Number of constraint columns for `classes` classes.
pub fn num_constraints(classes: usize) -> usize {
    classes * (classes + 1) / 2
}

/// Column index of the pair `(j, k)`, `j ≤ k`.
pub fn pair_index(classes: usize, j: usize, k: usize) -> usize {
    debug_assert!(j <= k && k < classes);
    j * classes - j * j.saturating_sub(1) / 2 + (k - j)
}

/// Assembles `U`, `c` and `p` from the uniformized rates.
///
/// `zero_mask`, when given, marks coordinates `z_ij` that are identically
/// zero under the policy; their rows of `U` are zeroed and they are ignored
/// when choosing `ν`.
pub fn build_constraints(net: &UniformizedNetwork, zero_mask: Option<&[bool]>) -> Result<QuadraticCv> {
    let spec = net.spec();
    let n = spec.num_classes();
    if let Some(mask) = zero_mask {
        if mask.len() != n * n {
            return Err(Error::Dimension("zero mask must have one entry per z coordinate"));
        }
    }
    let lambda = net.lambda();
    let mu = net.mu();
    let gamma = net.gamma();
    let r = spec.routing();
    let z = |i: usize, j: usize| i * n + j;

    let mut u = Matrix::zeros(n * n, num_constraints(n));
    let mut c = vec![0.0; num_constraints(n)];

    // ȳ_j expressed through z̄.
    let add_ybar = |u: &mut Matrix, col: usize, j: usize, coef: f64| {
        for i in spec.classes_at(spec.station_of(j)) {
            u[(z(i, j), col)] += coef;
        }
    };

    let mut col = 0;
    for j in 0..n {
        for k in j..n {
            if j == k {
                // −(2λ_j ȳ_j − 2μ_j z̄_jj + 2Σ_i μ_i R_ij z̄_ij) = 2γ_j (1 − R_jj)
                add_ybar(&mut u, col, j, -2.0 * lambda[j]);
                u[(z(j, j), col)] += 2.0 * mu[j];
                for i in 0..n {
                    u[(z(i, j), col)] -= 2.0 * mu[i] * r[(i, j)];
                }
                c[col] = 2.0 * gamma[j] * (1.0 - r[(j, j)]);
            } else {
                // λ_j ȳ_k + λ_k ȳ_j − μ_j z̄_jk − μ_k z̄_kj
                //   + Σ_i μ_i (R_ij z̄_ik + R_ik z̄_ij) = γ_j R_jk + γ_k R_kj
                add_ybar(&mut u, col, k, lambda[j]);
                add_ybar(&mut u, col, j, lambda[k]);
                u[(z(j, k), col)] -= mu[j];
                u[(z(k, j), col)] -= mu[k];
                for i in 0..n {
                    u[(z(i, k), col)] += mu[i] * r[(i, j)];
                    u[(z(i, j), col)] += mu[i] * r[(i, k)];
                }
                c[col] = gamma[j] * r[(j, k)] + gamma[k] * r[(k, j)];
            }
            col += 1;
        }
    }

    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if spec.station_of(i) == spec.station_of(j) {
                p[z(i, j)] = 1.0;
            }
        }
    }

    if let Some(mask) = zero_mask {
        for (row, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
            for col in 0..u.cols() {
                u[(row, col)] = 0.0;
            }
        }
    }

    Ok(QuadraticCv {
        classes: n,
        u,
        c,
        p,
        zero_mask: zero_mask.map(|m| m.to_vec()),
        nu: None,
    })
}

/// Coordinates `z_ij` that vanish identically under a preemptive priority
/// policy: class `i` is served only when every higher-priority class `j` at
/// its station is empty.
pub fn priority_zero_mask(net: &UniformizedNetwork, policy: &PriorityPolicy) -> Vec<bool> {
    let spec = net.spec();
    let n = spec.num_classes();
    let mut mask = vec![false; n * n];
    for order in policy.order() {
        for (ri, &i) in order.iter().enumerate() {
            for &j in &order[..ri] {
                mask[i * n + j] = true;
            }
        }
    }
    mask
}

impl QuadraticCv {
    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn zero_mask(&self) -> Option<&[bool]> {
        self.zero_mask.as_deref()
    }

    pub fn nu(&self) -> Option<&[f64]> {
        self.nu.as_ref().map(|c| c.nu.as_slice())
    }

    /// `‖Uν + p‖₂` over the unmasked coordinates.
    pub fn residual(&self) -> Option<f64> {
        self.nu.as_ref().map(|c| c.residual)
    }

    pub fn rank_deficient(&self) -> Option<bool> {
        self.nu.as_ref().map(|c| c.rank_deficient)
    }

    fn masked(&self, row: usize) -> bool {
        self.zero_mask.as_ref().is_some_and(|m| m[row])
    }

    /// Picks `ν` minimizing `‖Uν + p‖₂` (minimum norm if `U` is rank
    /// deficient).
    pub fn choose_nu(self) -> Result<Self> {
        let rows = self.u.rows();
        let mut a = self.u.clone();
        let mut rhs: Vec<f64> = self.p.iter().map(|v| -v).collect();
        for row in (0..rows).filter(|&r| self.masked(r)) {
            for col in 0..a.cols() {
                a[(row, col)] = 0.0;
            }
            rhs[row] = 0.0;
        }
        let ls = linalg::least_squares(&a, &rhs)?;
        let rank_deficient = ls.rank_deficient(a.cols());
        self.with_nu(ls.solution, ls.residual, rank_deficient)
    }

    /// Uses the given weights instead of the least-squares choice.
    pub fn with_nu(mut self, nu: Vec<f64>, residual: f64, rank_deficient: bool) -> Result<Self> {
        if nu.len() != self.u.cols() {
            return Err(Error::Dimension("nu must have one entry per constraint"));
        }
        let gain = self.u.mul_vec(&nu);
        let offset = linalg::dot(&nu, &self.c);
        self.nu = Some(NuChoice {
            nu,
            residual,
            rank_deficient,
            gain,
            offset,
        });
        Ok(self)
    }

    fn choice(&self) -> &NuChoice {
        self.nu.as_ref().expect("choose_nu must run before the control is evaluated")
    }

    /// `ν'(U'z − c)` for an `ℓ²` snapshot `z_ij = w_i y_j`.
    pub fn control_value(&self, z: &[f64]) -> f64 {
        let ch = self.choice();
        linalg::dot(&ch.gain, z) - ch.offset
    }

    /// Same as [`control_value`](Self::control_value) evaluated straight
    /// from a state and its allocation.
    #[inline]
    pub fn control_at(&self, y: &[u32], w: &Allocation) -> f64 {
        let ch = self.choice();
        let n = self.classes;
        let mut acc = 0.0;
        for i in (0..n).filter(|&i| w.is_active(i)) {
            for (g, &yj) in ch.gain[i * n..(i + 1) * n].iter().zip(y) {
                acc += g * yj as f64;
            }
        }
        acc - ch.offset
    }

    /// `U' z − c`, the per-constraint residuals at `z`.
    pub fn constraint_residuals(&self, z: &[f64]) -> Vec<f64> {
        self.u.tr_mul_vec(z).iter().zip(&self.c).map(|(a, b)| a - b).collect()
    }
}

/// Registers the quadratic control with [`crate::chain::run`].
#[derive(Debug, Clone, Copy)]
pub struct QuadraticControl<'a>(pub &'a QuadraticCv);

impl Control for QuadraticControl<'_> {
    fn evaluate(&mut self, y: &[u32], w: &Allocation) -> Result<f64> {
        Ok(self.0.control_at(y, w))
    }
}

/// Quadratic estimator from a run that recorded [`QuadraticControl`] as
/// control number `control`.
pub fn quadratic_estimate(
    run: &RunAccumulator,
    control: usize,
    batches: usize,
    rule: BetaRule,
) -> Result<EstimatorResult> {
    let series = run.control_series(control).ok_or(Error::MissingControl(control))?;
    let bs = cvcore::batch(run.population_series(), Some(series), batches)?;
    Ok(cvcore::controlled_estimate(EstimatorKind::Quadratic, &bs, rule))
}

/// Best achievable quadratic weights under an estimated time-average
/// covariance of `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimalNuDiagnostic {
    /// `Λ`, `ℓ² × ℓ²`, from batch means of `Z`.
    pub lambda: Matrix,
    pub nu: Vec<f64>,
    /// `p'Λp`: asymptotic variance constant of the standard estimator.
    pub standard_variance: f64,
    /// `(p + Uν)'Λ(p + Uν)` for the Λ-optimal `ν`.
    pub optimal_variance: f64,
    /// Same quantity for the `ν` carried by the input (least squares).
    pub chosen_variance: Option<f64>,
    /// `Λ + εI` was needed to factor `Λ`.
    pub regularized: bool,
}

impl OptimalNuDiagnostic {
    pub fn reduction(&self) -> f64 {
        self.standard_variance / self.optimal_variance
    }
}

fn quad_form(m: &Matrix, x: &[f64]) -> f64 {
    linalg::dot(x, &m.mul_vec(x))
}

/// Estimates `Λ` from a run of `steps` transitions split into `batches`
/// batches, then minimizes `‖Uν + p‖_Λ`.
pub fn optimal_nu_diagnostic<P: Policy + ?Sized>(
    net: &UniformizedNetwork,
    policy: &P,
    cv: &QuadraticCv,
    steps: u64,
    batches: usize,
    rng: &mut RngStream,
) -> Result<OptimalNuDiagnostic> {
    if batches < 3 {
        return Err(Error::TooFewBatches(batches));
    }
    let n = net.num_classes();
    let dim = n * n;
    let m = steps / batches as u64;
    if m == 0 {
        return Err(Error::TooFewObservations {
            len: steps as usize,
            batches,
        });
    }
    let mut sim = Simulator::new(net, policy, ChainState::empty(n))?;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(batches);
    let mut sums = vec![0u64; dim];
    for _ in 0..batches {
        sums.iter_mut().for_each(|s| *s = 0);
        for _ in 0..m {
            let y = &sim.state().y;
            let w = sim.allocation();
            for i in (0..n).filter(|&i| w.is_active(i)) {
                for (s, &yj) in sums[i * n..(i + 1) * n].iter_mut().zip(y) {
                    *s += yj as u64;
                }
            }
            sim.step(rng);
        }
        means.push(sums.iter().map(|s| *s as f64 / m as f64).collect());
    }
    let b = batches as f64;
    let mut centre = vec![0.0; dim];
    for row in &means {
        for (c, v) in centre.iter_mut().zip(row) {
            *c += v / b;
        }
    }
    let mut lambda = Matrix::zeros(dim, dim);
    for row in &means {
        for a in 0..dim {
            let da = row[a] - centre[a];
            if da == 0.0 {
                continue;
            }
            for bb in 0..dim {
                lambda[(a, bb)] += da * (row[bb] - centre[bb]);
            }
        }
    }
    let scale = m as f64 / (b - 1.0);
    for a in 0..dim {
        for bb in 0..dim {
            lambda[(a, bb)] *= scale;
        }
    }
    for a in 0..dim {
        for bb in a + 1..dim {
            let avg = 0.5 * (lambda[(a, bb)] + lambda[(bb, a)]);
            lambda[(a, bb)] = avg;
            lambda[(bb, a)] = avg;
        }
    }

    let (chol, regularized) = match linalg::cholesky(&lambda) {
        Some(l) => (l, false),
        None => {
            let eps = 1e-8 * lambda.trace() / dim as f64;
            let mut reg = lambda.clone();
            for a in 0..dim {
                reg[(a, a)] += eps;
            }
            (linalg::cholesky(&reg).ok_or(Error::Singular)?, true)
        }
    };
    // ‖L'(p + Uν)‖₂ with Λ = L L'.
    let lt = chol.transpose();
    let a = lt.mul(cv.u())?;
    let rhs: Vec<f64> = lt.mul_vec(cv.p()).iter().map(|v| -v).collect();
    let ls = linalg::least_squares(&a, &rhs)?;
    let nu = ls.solution;

    let combined = |nu: &[f64]| -> Vec<f64> {
        cv.u().mul_vec(nu).iter().zip(cv.p()).map(|(a, b)| a + b).collect()
    };
    let standard_variance = quad_form(&lambda, cv.p());
    let optimal_variance = quad_form(&lambda, &combined(&nu));
    let chosen_variance = cv.nu().map(|v| quad_form(&lambda, &combined(v)));
    Ok(OptimalNuDiagnostic {
        lambda,
        nu,
        standard_variance,
        optimal_variance,
        chosen_variance,
        regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{run, RunOptions};
    use crate::network::fixtures::{mm1, two_station};
    use crate::network::{uniformize, NetworkSpec};
    use crate::oracle::truncated_stationary;

    #[test]
    fn pair_indices_enumerate_upper_triangle() {
        let n = 4;
        let mut expected = 0;
        for j in 0..n {
            for k in j..n {
                assert_eq!(pair_index(n, j, k), expected);
                expected += 1;
            }
        }
    }

    #[test]
    fn mm1_constraint() {
        let net = uniformize(&mm1(0.3, 0.7));
        let cv = build_constraints(&net, None).unwrap();
        assert_eq!((cv.u().rows(), cv.u().cols()), (1, 1));
        assert!((cv.u()[(0, 0)] - 0.8).abs() < 1e-15);
        assert!((cv.c()[0] - 0.6).abs() < 1e-15);
        assert_eq!(cv.p(), &[1.0]);
        // Stationary mean z̄ = E[Y 1{Y>0}] = 0.75 satisfies the constraint.
        assert!((0.8 * 0.75 - 0.6f64).abs() < 1e-15);
        let cv = cv.choose_nu().unwrap();
        assert!((cv.nu().unwrap()[0] + 1.25).abs() < 1e-14);
        assert!(cv.residual().unwrap() < 1e-15);
        // control(y) = −y + 0.75 for y > 0; at y = 0 the control is 0.75.
        let w1 = Allocation::from_active(vec![true]);
        let w0 = Allocation::from_active(vec![false]);
        assert!((cv.control_at(&[4], &w1) - (-4.0 + 0.75)).abs() < 1e-14);
        assert!((cv.control_at(&[0], &w0) - 0.75).abs() < 1e-15);
        assert!((cv.control_value(&[4.0]) - (-3.25)).abs() < 1e-14);
    }

    #[test]
    fn two_station_dimensions_and_p() {
        let net = uniformize(&two_station(2.0));
        let cv = build_constraints(&net, None).unwrap();
        assert_eq!((cv.u().rows(), cv.u().cols(), cv.c().len()), (9, 6, 6));
        let ones: Vec<(usize, usize)> = (0..9).filter(|r| cv.p()[*r] == 1.0).map(|r| (r / 3, r % 3)).collect();
        assert_eq!(ones, vec![(0, 0), (0, 2), (1, 1), (2, 0), (2, 2)]);
    }

    #[test]
    fn nu_matches_normal_equations_and_is_reproducible() {
        let net = uniformize(&two_station(9.0));
        let cv = build_constraints(&net, None).unwrap();
        let a = cv.choose_nu().unwrap();
        let b = build_constraints(&net, None).unwrap().choose_nu().unwrap();
        assert_eq!(a.nu(), b.nu());
        assert!(a.residual().unwrap() > 0.0);
        let u = a.u();
        let ut = u.transpose();
        let neg_p: Vec<f64> = a.p().iter().map(|v| -v).collect();
        if !a.rank_deficient().unwrap() {
            let ne = linalg::solve(&ut.mul(u).unwrap(), &ut.mul_vec(&neg_p)).unwrap();
            for (x, y) in a.nu().unwrap().iter().zip(&ne) {
                assert!((x - y).abs() < 1e-8 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn zero_u_gives_zero_nu() {
        let cv = QuadraticCv {
            classes: 2,
            u: Matrix::zeros(4, 3),
            c: vec![0.0; 3],
            p: vec![1.0, 0.0, 0.0, 1.0],
            zero_mask: None,
            nu: None,
        }
        .choose_nu()
        .unwrap();
        assert_eq!(cv.nu().unwrap(), &[0.0, 0.0, 0.0]);
        assert!((cv.residual().unwrap() - libm::sqrt(2.0)).abs() < 1e-15);
        assert!(cv.rank_deficient().unwrap());
    }

    #[test]
    fn fbfs_zero_mask_marks_z31() {
        let net = uniformize(&two_station(2.0));
        let policy = PriorityPolicy::fbfs(net.spec());
        let mask = priority_zero_mask(&net, &policy);
        let marked: Vec<usize> = (0..9).filter(|r| mask[*r]).collect();
        assert_eq!(marked, vec![2 * 3]);
        let cv = build_constraints(&net, Some(&mask)).unwrap().choose_nu().unwrap();
        assert!(cv.u().row(6).iter().all(|v| *v == 0.0));
    }

    fn check_constraints_on_truncated_chain(spec: &NetworkSpec, caps: &[u32], tol: f64) {
        let net = uniformize(spec);
        let policy = PriorityPolicy::fbfs(net.spec());
        let chain = truncated_stationary(&net, &policy, caps).unwrap();
        let zbar = chain.zbar();
        let cv = build_constraints(&net, None).unwrap();
        for r in cv.constraint_residuals(&zbar) {
            assert!(r.abs() <= tol, "residual {r:e}");
        }
    }

    #[test]
    fn constraints_hold_for_mm1_stationary_moments() {
        check_constraints_on_truncated_chain(&mm1(0.3, 0.7), &[500], 1e-8);
    }

    #[test]
    fn constraints_hold_for_two_class_single_station() {
        // Class 0 feeds class 1 (and itself) at one station.
        let mut r = Matrix::zeros(2, 2);
        r[(0, 1)] = 0.6;
        r[(0, 0)] = 0.1;
        r[(1, 0)] = 0.2;
        let spec = NetworkSpec::new(1, vec![0, 0], vec![0.3, 0.2], vec![2.0, 1.5], r).unwrap();
        check_constraints_on_truncated_chain(&spec, &[60, 60], 1e-8);
    }

    #[test]
    fn zero_variance_for_mm1_with_beta_one() {
        let net = uniformize(&mm1(0.3, 0.7));
        let policy = PriorityPolicy::fbfs(net.spec());
        let cv = build_constraints(&net, None).unwrap().choose_nu().unwrap();
        for seed in 0..10 {
            let mut control = QuadraticControl(&cv);
            let acc = run(&net, &policy, &RunOptions::new(10_000), &mut RngStream::new(seed, 0), &mut [&mut control]).unwrap();
            let r = quadratic_estimate(&acc, 0, 20, BetaRule::Fixed(1.0)).unwrap();
            assert!((r.point - 0.75).abs() < 1e-10, "{}", r.point);
        }
    }

    #[test]
    fn nu_follows_rescaling() {
        let net = uniformize(&two_station(4.0));
        let cv = build_constraints(&net, None).unwrap();
        let a = 3.5;
        let z = [1.0, 0.0, 3.0, 0.0, 2.0, 0.0, 0.0, 0.0, 5.0];
        let unit_beta = |q: &QuadraticCv| linalg::dot(q.p(), &z) + q.control_value(&z);

        // Scaling p scales ν and the β = 1 estimate by a.
        let scaled_p = QuadraticCv {
            p: cv.p.iter().map(|v| v * a).collect(),
            ..cv.clone()
        }
        .choose_nu()
        .unwrap();
        // Scaling every constraint (U and c together) scales ν by 1/a and
        // leaves the estimate alone.
        let mut u = cv.u.clone();
        for r in 0..u.rows() {
            for c in 0..u.cols() {
                u[(r, c)] *= a;
            }
        }
        let scaled_uc = QuadraticCv {
            u,
            c: cv.c.iter().map(|v| v * a).collect(),
            ..cv.clone()
        }
        .choose_nu()
        .unwrap();
        let cv = cv.choose_nu().unwrap();

        for ((x, y), w) in cv.nu().unwrap().iter().zip(scaled_p.nu().unwrap()).zip(scaled_uc.nu().unwrap()) {
            assert!((a * x - y).abs() < 1e-12 * (1.0 + y.abs()));
            assert!((x / a - w).abs() < 1e-12 * (1.0 + w.abs()));
        }
        let e = unit_beta(&cv);
        assert!((unit_beta(&scaled_p) / a - e).abs() < 1e-12 * (1.0 + e.abs()));
        assert!((unit_beta(&scaled_uc) - e).abs() < 1e-12 * (1.0 + e.abs()));
    }

    #[test]
    fn mm1_optimal_nu_equals_least_squares_nu() {
        let net = uniformize(&mm1(0.3, 0.7));
        let policy = PriorityPolicy::fbfs(net.spec());
        let cv = build_constraints(&net, None).unwrap().choose_nu().unwrap();
        let d = optimal_nu_diagnostic(&net, &policy, &cv, 200_000, 20, &mut RngStream::new(1, 1)).unwrap();
        assert!((d.nu[0] - cv.nu().unwrap()[0]).abs() < 1e-10);
    }

    #[test]
    fn estimated_lambda_is_symmetric_psd() {
        let net = uniformize(&two_station(2.0));
        let policy = PriorityPolicy::fbfs(net.spec());
        let cv = build_constraints(&net, None).unwrap().choose_nu().unwrap();
        let d = optimal_nu_diagnostic(&net, &policy, &cv, 400_000, 40, &mut RngStream::new(4, 0)).unwrap();
        let l = &d.lambda;
        let m = nalgebra::DMatrix::from_row_slice(9, 9, l.as_slice());
        assert_eq!(m, m.transpose());
        let eig = m.symmetric_eigen();
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-8 * l.trace());
        // z_31 is identically zero under FBFS, so Λ is singular.
        assert!(d.regularized);
        assert!(d.optimal_variance <= d.chosen_variance.unwrap() * (1.0 + 1e-9));
    }
}
