//! Executable convergence checks on pairs of quadratic losses.
//!
//! Real loss `L(θ) = ½(θ − a)ᵀA(θ − a)`, synthetic loss
//! `Lˢ(θ) = ½(θ − b)ᵀB(θ − b)`. Gradient descent runs on `Lˢ`; the checks
//! compare what happens to `L` along that trajectory with three bounds:
//!
//! - gradient gap: `‖∇L(θ_t) − ∇Lˢ(θ_t)‖ ≤ ε + 2βδ_t`,
//! - loss: `L(θ_{t+1}) ≤ (1 − ημ)^{t+1} L(θ_0) + (2ξ∇̄ − ξ²)/(2μ)`, valid
//!   while `ξ ≤ ‖∇L(θ_t)‖` at every step (otherwise inconclusive),
//! - minimizers: `‖a − b‖ ≤ sqrt(ξ(2∇̄ − ξ)/(αμ))`, inheriting the loss
//!   bound's precondition.
//!
//! Quadratics give β (largest Hessian eigenvalue), μ and α (smallest
//! eigenvalue of `A`) exactly.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::model::{full_grad, last_layer_grad, ModelParams, TokenSequence};
use crate::rng::{Gaussian, SeedStream};

/// Absolute slack allowed on every inequality.
pub const SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryInstance {
    pub a_hess: DMatrix<f64>,
    pub b_hess: DMatrix<f64>,
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub theta0: DVector<f64>,
    pub eta: f64,
    pub t_max: usize,
}

/// Constants and the realized trajectory of an instance.
#[derive(Clone, Debug)]
pub struct Derived {
    pub beta: f64,
    pub mu: f64,
    pub alpha: f64,
    pub eps_match: f64,
    /// `θ_0 … θ_{t_max}`.
    pub trajectory: Vec<DVector<f64>>,
    /// `‖θ_t − θ_0‖`.
    pub drift: Vec<f64>,
    /// `‖∇L(θ_t)‖`.
    pub grad_norms: Vec<f64>,
    /// `ε + 2βδ_t`.
    pub xi_t: Vec<f64>,
    pub xi: f64,
    pub grad_bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Holds,
    Violated,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub verdict: Verdict,
    /// Smallest `rhs − lhs` seen (negative means violated).
    pub worst_slack: f64,
    pub worst_t: Option<usize>,
    /// Steps where the precondition failed.
    pub precondition_failures: Vec<usize>,
}

impl CheckReport {
    fn from_slacks(slacks: impl IntoIterator<Item = (usize, f64)>, failures: Vec<usize>) -> Self {
        let mut worst = (None, f64::INFINITY);
        for (t, s) in slacks {
            if s < worst.1 {
                worst = (Some(t), s);
            }
        }
        let verdict = if worst.1 < -SLACK {
            Verdict::Violated
        } else if !failures.is_empty() {
            Verdict::Inconclusive
        } else {
            Verdict::Holds
        };
        Self {
            verdict,
            worst_slack: worst.1,
            worst_t: worst.0,
            precondition_failures: failures,
        }
    }
}

fn sym_eigen(m: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(m.clone()).eigenvalues;
    let lo = e.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn power_iteration(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let n = m.nrows();
    // A fixed, generic start vector.
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64).normalize();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = m * &v;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / nw;
        if (next - lambda).abs() <= tol * next.abs().max(1.0) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// `(λmin, λmax)` of a symmetric PSD matrix by power iteration on `M` and on
/// `λmax·I − M`.
pub fn power_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let hi = power_iteration(m, 1e-15, 200_000);
    let shifted = DMatrix::identity(m.nrows(), m.ncols()) * hi - m;
    let lo = hi - power_iteration(&shifted, 1e-15, 200_000);
    (lo, hi)
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
}

impl TheoryInstance {
    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn real_loss(&self, theta: &DVector<f64>) -> f64 {
        let d = theta - &self.a;
        0.5 * d.dot(&(&self.a_hess * &d))
    }

    pub fn real_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.a_hess * (theta - &self.a)
    }

    pub fn syn_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.b_hess * (theta - &self.b)
    }

    /// Rejects malformed instances and step sizes above `1/β`.
    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        let shapes_ok = self.b.len() == n
            && self.theta0.len() == n
            && self.a_hess.shape() == (n, n)
            && self.b_hess.shape() == (n, n);
        if n == 0 || !shapes_ok {
            return Err(Error::InvalidArgument("inconsistent instance dimensions".into()));
        }
        if !is_symmetric(&self.a_hess) || !is_symmetric(&self.b_hess) {
            return Err(Error::InvalidArgument("Hessians must be symmetric".into()));
        }
        let (la, ha) = sym_eigen(&self.a_hess);
        let (lb, hb) = sym_eigen(&self.b_hess);
        if la <= 0.0 || lb <= 0.0 {
            return Err(Error::InvalidArgument("Hessians must be positive definite".into()));
        }
        let beta = ha.max(hb);
        if !(self.eta > 0.0 && self.eta <= 1.0 / beta) {
            return Err(Error::InvalidArgument(format!(
                "step size {} outside (0, 1/beta = {}]",
                self.eta,
                1.0 / beta
            )));
        }
        Ok(())
    }

    pub fn derive(&self) -> Result<Derived> {
        self.validate()?;
        let (mu, ha) = sym_eigen(&self.a_hess);
        let (_, hb) = sym_eigen(&self.b_hess);
        let beta = ha.max(hb);
        let mut trajectory = Vec::with_capacity(self.t_max + 1);
        let mut theta = self.theta0.clone();
        trajectory.push(theta.clone());
        for _ in 0..self.t_max {
            theta = &theta - self.eta * self.syn_grad(&theta);
            trajectory.push(theta.clone());
        }
        let eps_match = (self.real_grad(&self.theta0) - self.syn_grad(&self.theta0)).norm();
        let drift: Vec<f64> = trajectory.iter().map(|t| (t - &self.theta0).norm()).collect();
        let grad_norms: Vec<f64> = trajectory.iter().map(|t| self.real_grad(t).norm()).collect();
        let xi_t: Vec<f64> = drift.iter().map(|d| eps_match + 2.0 * beta * d).collect();
        let xi = xi_t.iter().copied().fold(0.0, f64::max);
        let grad_bound = grad_norms.iter().copied().fold(0.0, f64::max);
        Ok(Derived {
            beta,
            mu,
            alpha: mu,
            eps_match,
            trajectory,
            drift,
            grad_norms,
            xi_t,
            xi,
            grad_bound,
        })
    }

    /// Gradient-gap bound at every step of the trajectory.
    pub fn check_lemma1(&self) -> Result<CheckReport> {
        let d = self.derive()?;
        let slacks = d.trajectory.iter().enumerate().map(|(t, th)| {
            let gap = (self.real_grad(th) - self.syn_grad(th)).norm();
            (t, d.xi_t[t] - gap)
        });
        Ok(CheckReport::from_slacks(slacks, Vec::new()))
    }

    fn theorem_precondition(&self, d: &Derived) -> Vec<usize> {
        (0..self.t_max)
            .filter(|&t| d.xi > d.grad_norms[t])
            .collect()
    }

    /// Loss bound for `L(θ_{t+1})`, `t = 0 … t_max − 1`.
    pub fn check_theorem1(&self) -> Result<CheckReport> {
        let d = self.derive()?;
        let failures = self.theorem_precondition(&d);
        let l0 = self.real_loss(&self.theta0);
        let floor = (2.0 * d.xi * d.grad_bound - d.xi * d.xi) / (2.0 * d.mu);
        let rate = 1.0 - self.eta * d.mu;
        let slacks = (0..self.t_max).map(|t| {
            let rhs = rate.powi(t as i32 + 1) * l0 + floor;
            (t, rhs - self.real_loss(&d.trajectory[t + 1]))
        });
        Ok(CheckReport::from_slacks(slacks, failures))
    }

    /// Distance between minimizers against the bound from the measured ξ and
    /// ∇̄.
    pub fn check_corollary1(&self) -> Result<CheckReport> {
        let d = self.derive()?;
        let failures = self.theorem_precondition(&d);
        let inner = (d.xi * (2.0 * d.grad_bound - d.xi)).max(0.0);
        let rhs = (inner / (d.alpha * d.mu)).sqrt();
        let lhs = (&self.a - &self.b).norm();
        Ok(CheckReport::from_slacks([(0, rhs - lhs)], failures))
    }

    /// A random instance in the regime where the loss bound's precondition
    /// usually holds: synthetic gradient close to the real one at `θ_0`,
    /// `θ_0` far from both minimizers, and a horizon short relative to
    /// `1/(ηβ)`.
    pub fn random<R: Rng>(rng: &mut R, max_dim: usize) -> Self {
        let n = rng.random_range(1..=max_dim.max(1));
        let mut gauss = Gaussian::new(&mut *rng);
        let mut randn = |k: usize| -> Vec<f64> { (0..k).map(|_| gauss.sample()).collect() };
        let q = DMatrix::from_vec(n, n, randn(n * n)).qr().q();
        let kappa = 1.0 + 3.0 * randn(1)[0].abs().min(1.0);
        let spread = randn(n);
        let evals: Vec<f64> = (0..n)
            .map(|i| if i == 0 { 1.0 } else { 1.0 + (kappa - 1.0) * spread[i].abs().min(1.0) })
            .collect();
        let a_hess = &q * DMatrix::from_diagonal(&DVector::from_vec(evals)) * q.transpose();
        let a_hess = (&a_hess + a_hess.transpose()) * 0.5;

        let p = DMatrix::from_vec(n, n, randn(n * n));
        let sym = (&p + p.transpose()) * 0.5;
        let scale = 0.1 * randn(1)[0].abs().min(1.0) / sym.norm().max(1e-12);
        let b_hess = &a_hess + sym * scale;

        let a = DVector::from_vec(randn(n));
        let u = DVector::from_vec(randn(n));
        let u = if u.norm() > 0.0 { u.normalize() } else { DVector::from_element(n, 1.0) };
        let dist = 1.0 + 2.0 * randn(1)[0].abs().min(1.0);
        let theta0 = &a + u * dist;
        let noise = DVector::from_vec(randn(n)) * 0.02;
        let rhs = &a_hess * (&theta0 - &a) + noise;
        let b = &theta0 - b_hess.clone().lu().solve(&rhs).expect("positive definite");

        let (_, ha) = sym_eigen(&a_hess);
        let (_, hb) = sym_eigen(&b_hess);
        let beta = ha.max(hb);
        let c = 0.02 + 0.08 * randn(1)[0].abs().min(1.0);
        let eta = c / beta;
        let t_max = ((0.2 / c).round() as usize).max(1);
        Self {
            a_hess,
            b_hess,
            a,
            b,
            theta0,
            eta,
            t_max,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub instances: usize,
    pub holds: usize,
    pub violations: usize,
    pub inconclusive: usize,
    pub worst_slack: f64,
}

impl CheckSummary {
    fn add(&mut self, r: &CheckReport) {
        if self.instances == 0 {
            self.worst_slack = f64::INFINITY;
        }
        self.instances += 1;
        match r.verdict {
            Verdict::Holds => self.holds += 1,
            Verdict::Violated => self.violations += 1,
            Verdict::Inconclusive => self.inconclusive += 1,
        }
        // Inconclusive instances do not bound anything; keep their slack out.
        if r.verdict != Verdict::Inconclusive {
            self.worst_slack = self.worst_slack.min(r.worst_slack);
        }
    }

    pub fn inconclusive_fraction(&self) -> f64 {
        if self.instances == 0 {
            0.0
        } else {
            self.inconclusive as f64 / self.instances as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub instances: usize,
    pub max_dim: usize,
    pub seed: u64,
    pub lemma1: CheckSummary,
    pub theorem1: CheckSummary,
    pub corollary1: CheckSummary,
    /// Largest gap between eigendecomposition and power-iteration extremes.
    pub eigen_crosscheck_max_err: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.lemma1.violations == 0
            && self.theorem1.violations == 0
            && self.corollary1.violations == 0
    }
}

/// Runs all checks on `n` random instances; instance `i` uses
/// `seed.fork(i)`.
pub fn run_suite(n: usize, max_dim: usize, seed: SeedStream) -> Result<SuiteReport> {
    let results: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            let inst = TheoryInstance::random(&mut seed.fork(i as u64).rng(), max_dim);
            let (lo, hi) = sym_eigen(&inst.a_hess);
            let (plo, phi) = power_extremes(&inst.a_hess);
            let err = (lo - plo).abs().max((hi - phi).abs());
            Ok((
                inst.check_lemma1()?,
                inst.check_theorem1()?,
                inst.check_corollary1()?,
                err,
            ))
        })
        .collect::<Result<_>>()?;
    let mut report = SuiteReport {
        instances: n,
        max_dim,
        seed: seed.root(),
        lemma1: CheckSummary::default(),
        theorem1: CheckSummary::default(),
        corollary1: CheckSummary::default(),
        eigen_crosscheck_max_err: 0.0,
    };
    for (l, t, c, err) in &results {
        report.lemma1.add(l);
        report.theorem1.add(t);
        report.corollary1.add(c);
        report.eigen_crosscheck_max_err = report.eigen_crosscheck_max_err.max(*err);
    }
    Ok(report)
}

/// Normalized gradient errors of one comparison set at one fine-tuning step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradErrorRow {
    pub step: usize,
    pub set: String,
    pub last_layer: f64,
    pub full: f64,
}

fn rel_err(reference: &[f64], other: &[f64]) -> f64 {
    let diff: f64 = reference
        .iter()
        .zip(other)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    diff / crate::autodiff::norm(reference).max(f64::MIN_POSITIVE)
}

/// `‖∇L_real − ∇L_set‖ / ‖∇L_real‖` for the last layer and for all
/// parameters, at every snapshot and for every named comparison set.
pub fn empirical_grad_error(
    real: &[TokenSequence],
    sets: &[(&str, &[TokenSequence])],
    snapshots: &[(usize, ModelParams)],
) -> Result<Vec<GradErrorRow>> {
    let mut rows = Vec::new();
    for (step, params) in snapshots {
        let real_ll = last_layer_grad(real, params)?;
        let real_full = full_grad(real, params)?;
        for (name, set) in sets {
            rows.push(GradErrorRow {
                step: *step,
                set: name.to_string(),
                last_layer: rel_err(&real_ll, &last_layer_grad(set, params)?),
                full: rel_err(&real_full, &full_grad(set, params)?),
            });
        }
    }
    Ok(rows)
}
