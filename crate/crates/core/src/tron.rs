//! Trust-region Newton minimization (TRON) with a Steihaug conjugate
//! gradient inner solver.
//!
//! The minimizer only talks to the problem through [`Oracle`]: a fused
//! function+gradient evaluation and Hessian-vector products. Everything
//! distributed lives behind that trait.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{all_finite, axpy, dot, norm};

/// Function, gradient and (generalized) Hessian-vector products.
///
/// `fun_grad` evaluates a trial point. The minimizer then calls
/// `accept(true)` if that point becomes the current iterate, which is
/// where subsequent `hess_vec` calls take their curvature from.
pub trait Oracle {
    fn dim(&self) -> usize;
    fn fun_grad(&mut self, beta: &[f64]) -> Result<(f64, Vec<f64>)>;
    fn accept(&mut self, accepted: bool);
    fn hess_vec(&mut self, d: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TronConfig {
    /// Stop when `||g|| <= eps_rel * ||g(beta0)||`.
    pub eps_rel: f64,
    pub max_iter: usize,
    /// Inner CG stops when `||r|| <= cg_tol * ||g||`.
    pub cg_tol: f64,
    /// Inner iteration cap; `None` means the problem dimension.
    pub cg_max: Option<usize>,
    pub eta0: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    /// Initial radius; `None` means `||g(beta0)||`.
    pub delta0: Option<f64>,
}

impl Default for TronConfig {
    fn default() -> Self {
        TronConfig {
            eps_rel: 1e-4,
            max_iter: 1000,
            cg_tol: 0.1,
            cg_max: None,
            eta0: 1e-4,
            eta1: 0.25,
            eta2: 0.75,
            sigma1: 0.25,
            sigma2: 0.5,
            sigma3: 4.0,
            delta0: None,
        }
    }
}

impl TronConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_eta = 0.0 < self.eta0 && self.eta0 <= self.eta1 && self.eta1 < self.eta2 && self.eta2 < 1.0;
        let ok_sigma = 0.0 < self.sigma1 && self.sigma1 < self.sigma2 && self.sigma2 < 1.0 && 1.0 < self.sigma3;
        if !ok_eta {
            return Err(Error::Config("need 0 < eta0 <= eta1 < eta2 < 1".into()));
        }
        if !ok_sigma {
            return Err(Error::Config("need 0 < sigma1 < sigma2 < 1 < sigma3".into()));
        }
        if !(self.eps_rel >= 0.0 && self.cg_tol > 0.0) {
            return Err(Error::Config("eps_rel must be >= 0 and cg_tol > 0".into()));
        }
        if matches!(self.delta0, Some(d) if !(d > 0.0)) {
            return Err(Error::Config("delta0 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CgStatus {
    Converged,
    Boundary,
    NegCurvature,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult {
    pub step: Vec<f64>,
    /// `-g - H step`
    pub residual: Vec<f64>,
    pub status: CgStatus,
    pub iterations: usize,
}

/// Approximately minimizes `g's + s'Hs/2` subject to `||s|| <= delta`.
///
/// Each iteration makes exactly one `hess_vec` call.
pub fn cg_steihaug(
    mut hess_vec: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    g: &[f64],
    delta: f64,
    cg_tol: f64,
    cg_max: usize,
) -> Result<CgResult> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("trust radius must be positive, got {delta}")));
    }
    let n = g.len();
    let mut s = vec![0.0; n];
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut d = r.clone();
    let mut rtr = dot(&r, &r);
    let tol = cg_tol * norm(g);
    let mut iterations = 0;

    let status = loop {
        if rtr.sqrt() <= tol {
            break CgStatus::Converged;
        }
        if iterations >= cg_max {
            break CgStatus::MaxIter;
        }
        iterations += 1;
        let hd = hess_vec(&d)?;
        check_dim(n, hd.len())?;
        if !all_finite(&hd) {
            return Err(Error::Numerical { msg: "non-finite Hessian-vector product".into(), iterate: d });
        }
        let dhd = dot(&d, &hd);
        if dhd <= 0.0 {
            let tau = boundary_step(&s, &d, delta);
            axpy(tau, &d, &mut s);
            axpy(-tau, &hd, &mut r);
            break CgStatus::NegCurvature;
        }
        let alpha = rtr / dhd;
        axpy(alpha, &d, &mut s);
        if norm(&s) > delta {
            axpy(-alpha, &d, &mut s);
            let tau = boundary_step(&s, &d, delta);
            axpy(tau, &d, &mut s);
            axpy(-tau, &hd, &mut r);
            break CgStatus::Boundary;
        }
        axpy(-alpha, &hd, &mut r);
        let rnew = dot(&r, &r);
        let beta = rnew / rtr;
        for (di, ri) in d.iter_mut().zip(&r) {
            *di = ri + beta * *di;
        }
        rtr = rnew;
    };
    if !all_finite(&s) {
        return Err(Error::Numerical { msg: "non-finite CG step".into(), iterate: s });
    }
    Ok(CgResult { step: s, residual: r, status, iterations })
}

/// Nonnegative `tau` with `||s + tau d|| = delta`, given `||s|| <= delta`.
fn boundary_step(s: &[f64], d: &[f64], delta: f64) -> f64 {
    let std = dot(s, d);
    let sts = dot(s, s);
    let dtd = dot(d, d);
    if dtd == 0.0 {
        return 0.0;
    }
    let dsq = delta * delta;
    let rad = (std * std + dtd * (dsq - sts)).max(0.0).sqrt();
    // The two algebraically equal forms; pick the one without cancellation.
    if std >= 0.0 {
        (dsq - sts) / (std + rad)
    } else {
        (rad - std) / dtd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// Objective at the iterate after this step (unchanged on rejection).
    pub f: f64,
    pub gnorm: f64,
    /// Radius after the update.
    pub delta: f64,
    pub cg_steps: usize,
    pub cg_status: CgStatus,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    /// Predicted and actual reductions fell to round-off level.
    NoProgress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TronTrace {
    pub initial_f: f64,
    pub initial_gnorm: f64,
    pub records: Vec<IterationRecord>,
    pub fun_grad_calls: u64,
    pub hess_vec_calls: u64,
    pub termination: Termination,
}

impl TronTrace {
    pub fn accepted(&self) -> usize {
        self.records.iter().filter(|r| r.accepted).count()
    }

    pub fn rejected(&self) -> usize {
        self.records.len() - self.accepted()
    }

    pub fn final_f(&self) -> f64 {
        self.records.last().map_or(self.initial_f, |r| r.f)
    }

    pub fn final_gnorm(&self) -> f64 {
        self.records.last().map_or(self.initial_gnorm, |r| r.gnorm)
    }

    /// `iter,f,gnorm,delta,cg_steps,accepted`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,f,gnorm,delta,cg_steps,accepted\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:e},{:e},{:e},{},{}", r.iter, r.f, r.gnorm, r.delta, r.cg_steps, r.accepted);
        }
        s
    }
}

fn numerical(msg: &str, beta: &[f64]) -> Error {
    Error::Numerical { msg: msg.into(), iterate: beta.to_vec() }
}

/// Minimizes the oracle's objective from `beta0`.
pub fn minimize<O: Oracle + ?Sized>(
    oracle: &mut O,
    beta0: &[f64],
    cfg: &TronConfig,
) -> Result<(Vec<f64>, TronTrace)> {
    cfg.validate()?;
    let n = oracle.dim();
    check_dim(n, beta0.len())?;
    let cg_max = cfg.cg_max.unwrap_or(n).max(1);

    let mut beta = beta0.to_vec();
    let (mut f, mut g) = oracle.fun_grad(&beta)?;
    check_dim(n, g.len())?;
    if !f.is_finite() || !all_finite(&g) {
        return Err(numerical("non-finite objective or gradient at the starting point", &beta));
    }
    oracle.accept(true);
    let gnorm0 = norm(&g);
    let mut gnorm = gnorm0;
    let mut trace = TronTrace {
        initial_f: f,
        initial_gnorm: gnorm0,
        records: Vec::new(),
        fun_grad_calls: 1,
        hess_vec_calls: 0,
        termination: Termination::GradientTolerance,
    };
    if gnorm <= cfg.eps_rel * gnorm0 {
        return Ok((beta, trace));
    }
    let mut delta = cfg.delta0.unwrap_or(gnorm0);

    for iter in 1..=cfg.max_iter {
        let mut hd_calls = 0u64;
        let cg = cg_steihaug(
            |d| {
                hd_calls += 1;
                oracle.hess_vec(d)
            },
            &g,
            delta,
            cfg.cg_tol,
            cg_max,
        )?;
        trace.hess_vec_calls += hd_calls;

        let trial: Vec<f64> = beta.iter().zip(&cg.step).map(|(b, s)| b + s).collect();
        let gs = dot(&g, &cg.step);
        let prered = -0.5 * (gs - dot(&cg.step, &cg.residual));
        let (fnew, gnew) = oracle.fun_grad(&trial)?;
        trace.fun_grad_calls += 1;
        check_dim(n, gnew.len())?;
        if !fnew.is_finite() || !all_finite(&gnew) {
            return Err(numerical("non-finite objective or gradient at a trial point", &trial));
        }
        let actred = f - fnew;
        let snorm = norm(&cg.step);
        if iter == 1 {
            delta = delta.min(snorm);
        }

        let curv = fnew - f - gs;
        let alpha = if curv <= 0.0 { cfg.sigma3 } else { cfg.sigma1.max(-0.5 * (gs / curv)) };
        delta = if actred < cfg.eta0 * prered {
            (alpha.max(cfg.sigma1) * snorm).min(cfg.sigma2 * delta)
        } else if actred < cfg.eta1 * prered {
            (cfg.sigma1 * delta).max((alpha * snorm).min(cfg.sigma2 * delta))
        } else if actred < cfg.eta2 * prered {
            (cfg.sigma1 * delta).max((alpha * snorm).min(cfg.sigma3 * delta))
        } else {
            delta.max((alpha * snorm).min(cfg.sigma3 * delta))
        };

        // Accepted iterates must strictly decrease f.
        let accepted = actred > cfg.eta0 * prered && actred > 0.0;
        oracle.accept(accepted);
        if accepted {
            beta = trial;
            f = fnew;
            g = gnew;
            gnorm = norm(&g);
        }
        trace.records.push(IterationRecord {
            iter,
            f,
            gnorm,
            delta,
            cg_steps: cg.iterations,
            cg_status: cg.status,
            accepted,
        });
        log::debug!("iter {iter:>4} f {f:.10e} |g| {gnorm:.3e} delta {delta:.3e} cg {} {}", cg.iterations, if accepted { "" } else { "rejected" });

        if gnorm <= cfg.eps_rel * gnorm0 {
            trace.termination = Termination::GradientTolerance;
            return Ok((beta, trace));
        }
        let tiny = 1e-12 * f.abs();
        if (actred.abs() <= tiny && prered.abs() <= tiny) || (prered <= 0.0 && actred <= 0.0) || delta == 0.0 {
            log::warn!("TRON stopped without progress at iter {iter} (|g|/|g0| = {:.3e})", gnorm / gnorm0);
            trace.termination = Termination::NoProgress;
            return Ok((beta, trace));
        }
    }
    trace.termination = Termination::MaxIterations;
    Ok((beta, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `1/2 x'Ax - b'x` with explicit dense A.
    struct Quadratic {
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        fg: u64,
        hd: u64,
    }

    impl Oracle for Quadratic {
        fn dim(&self) -> usize {
            self.b.len()
        }
        fn fun_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            self.fg += 1;
            let ax: Vec<f64> = self.a.iter().map(|r| dot(r, x)).collect();
            let f = 0.5 * dot(x, &ax) - dot(&self.b, x);
            let g = ax.iter().zip(&self.b).map(|(a, b)| a - b).collect();
            Ok((f, g))
        }
        fn accept(&mut self, _: bool) {}
        fn hess_vec(&mut self, d: &[f64]) -> Result<Vec<f64>> {
            self.hd += 1;
            Ok(self.a.iter().map(|r| dot(r, d)).collect())
        }
    }

    fn identity_hv(d: &[f64]) -> Result<Vec<f64>> {
        Ok(d.to_vec())
    }

    #[test]
    fn cg_identity_interior() {
        let r = cg_steihaug(identity_hv, &[-1.0, 0.0, 0.0], 10.0, 1e-10, 10).unwrap();
        assert_eq!(r.step, vec![1.0, 0.0, 0.0]);
        assert_eq!(r.status, CgStatus::Converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn cg_identity_clipped() {
        let r = cg_steihaug(identity_hv, &[-10.0, 0.0], 1.0, 1e-10, 10).unwrap();
        assert!((r.step[0] - 1.0).abs() < 1e-15 && r.step[1] == 0.0);
        assert_eq!(r.status, CgStatus::Boundary);
    }

    #[test]
    fn cg_negative_curvature_goes_to_boundary() {
        let r = cg_steihaug(|d: &[f64]| Ok(d.iter().map(|v| -v).collect()), &[-1.0, 0.0], 2.0, 1e-10, 10).unwrap();
        assert_eq!(r.status, CgStatus::NegCurvature);
        assert!((norm(&r.step) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cg_rejects_bad_radius() {
        assert!(cg_steihaug(identity_hv, &[1.0], 0.0, 0.1, 5).is_err());
    }

    #[test]
    fn zero_gradient_returns_immediately() {
        let mut q = Quadratic { a: vec![vec![2.0, 0.0], vec![0.0, 1.0]], b: vec![2.0, 1.0], fg: 0, hd: 0 };
        let (x, trace) = minimize(&mut q, &[1.0, 1.0], &TronConfig::default()).unwrap();
        assert_eq!(x, vec![1.0, 1.0]);
        assert!(trace.records.is_empty());
        assert_eq!(q.hd, 0);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let mut q = Quadratic { a: vec![vec![1.0]], b: vec![f64::NAN], fg: 0, hd: 0 };
        assert!(matches!(minimize(&mut q, &[0.0], &TronConfig::default()), Err(Error::Numerical { .. })));
    }

    #[test]
    fn dimension_mismatch() {
        let mut q = Quadratic { a: vec![vec![1.0]], b: vec![1.0], fg: 0, hd: 0 };
        assert!(matches!(minimize(&mut q, &[0.0, 1.0], &TronConfig::default()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TronConfig { eta1: 0.9, eta2: 0.5, ..TronConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trace_counts_match_oracle() {
        let mut q = Quadratic {
            a: vec![vec![4.0, 1.0, 0.0], vec![1.0, 3.0, 0.5], vec![0.0, 0.5, 2.0]],
            b: vec![1.0, -2.0, 3.0],
            fg: 0,
            hd: 0,
        };
        let (_, trace) = minimize(&mut q, &[10.0, 10.0, -10.0], &TronConfig::default()).unwrap();
        assert_eq!(trace.fun_grad_calls, q.fg);
        assert_eq!(trace.hess_vec_calls, q.hd);
        assert_eq!(trace.fun_grad_calls as usize, trace.records.len() + 1);
        let csv = trace.to_csv();
        assert!(csv.starts_with("iter,f,gnorm,delta,cg_steps,accepted\n"));
        assert_eq!(csv.lines().count(), trace.records.len() + 1);
    }

    fn random_spd(m: usize, seed: u64) -> Vec<Vec<f64>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<Vec<f64>> = (0..m).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        (0..m)
            .map(|i| (0..m).map(|j| (0..m).map(|k| b[i][k] * b[j][k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 }).collect())
            .collect()
    }

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let m = b.len();
        let am = nalgebra::DMatrix::from_fn(m, m, |i, j| a[i][j]);
        am.lu().solve(&nalgebra::DVector::from_column_slice(b)).unwrap().iter().copied().collect()
    }

    #[test]
    fn cg_matches_dense_solve() {
        let a = random_spd(6, 11);
        let g = vec![0.3, -1.0, 2.0, 0.5, -0.7, 1.1];
        let r = cg_steihaug(|d: &[f64]| Ok(a.iter().map(|row| dot(row, d)).collect()), &g, 1e6, 1e-14, 50).unwrap();
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let want = dense_solve(&a, &neg_g);
        let err: f64 = r.step.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / norm(&want);
        assert!(err <= 1e-8, "relative error {err}");
        assert_eq!(r.status, CgStatus::Converged);
    }

    #[test]
    fn quadratic_converges_to_linear_solve() {
        let a = random_spd(5, 12);
        let b = vec![1.0, -2.0, 0.5, 3.0, -1.5];
        let want = dense_solve(&a, &b);
        let mut q = Quadratic { a, b, fg: 0, hd: 0 };
        let cfg = TronConfig { eps_rel: 1e-8, cg_tol: 1e-12, ..TronConfig::default() };
        let (x, trace) = minimize(&mut q, &[0.0; 5], &cfg).unwrap();
        assert!(trace.records.len() <= 5 + 2, "{} iterations", trace.records.len());
        assert!(trace.final_gnorm() <= 1e-8 * trace.initial_gnorm);
        for (a, b) in x.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-7 * b.abs().max(1.0));
        }
    }

    #[test]
    fn identical_inputs_give_identical_traces() {
        let run = || {
            let mut q = Quadratic { a: random_spd(8, 13), b: vec![1.0; 8], fg: 0, hd: 0 };
            minimize(&mut q, &[2.0; 8], &TronConfig::default()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn matches_preconditioned_gradient_descent_on_a_kernel_problem() {
        use crate::data::{shard_random, SparseExample, SparseVec};
        use crate::kernel::{build_kernel_block, BasisSet, BasisSource, HyperParams};
        use crate::objective::{BlockOracle, Loss};
        use rand::{Rng, SeedableRng};

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let examples: Vec<SparseExample> = (0..200)
            .map(|_| {
                let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                let label = if x[0] * x[1] > 0.0 { 1.0 } else { -1.0 };
                SparseExample { features: SparseVec::from_dense(&x), label }
            })
            .collect();
        let params = HyperParams::new(0.1, 0.5).unwrap();
        let shard = shard_random(&examples, 1, 0).unwrap().remove(0);
        let basis = BasisSet {
            points: examples[..20].iter().map(|e| e.features.clone()).collect(),
            source: BasisSource::Random,
            sigma: 0.5,
        };
        let blocks = [build_kernel_block(&shard, &basis, &params, 0..20).unwrap()];
        let mut oracle = BlockOracle::new(&blocks, params.lambda, Loss::SquaredHinge).unwrap();
        let (_, trace) = minimize(&mut oracle, &[0.0; 20], &TronConfig { eps_rel: 1e-8, ..TronConfig::default() }).unwrap();

        // Oracle: gradient descent scaled by diag(lambda W + C'C), with
        // Armijo backtracking, run far past convergence.
        let c = &blocks[0].c_block;
        let w = &blocks[0].w_rows;
        let diag: Vec<f64> =
            (0..20).map(|k| params.lambda * w[(k, k)] + (0..200).map(|i| c[(i, k)] * c[(i, k)]).sum::<f64>()).collect();
        let mut gd = BlockOracle::new(&blocks, params.lambda, Loss::SquaredHinge).unwrap();
        let mut x = vec![0.0; 20];
        let (mut f, mut g) = gd.fun_grad(&x).unwrap();
        let g0 = norm(&g);
        for _ in 0..20_000 {
            if norm(&g) <= 1e-10 * g0 {
                break;
            }
            let dir: Vec<f64> = g.iter().zip(&diag).map(|(g, d)| -g / d).collect();
            let slope = dot(&g, &dir);
            let mut step = 1.0;
            loop {
                let trial: Vec<f64> = x.iter().zip(&dir).map(|(x, d)| x + step * d).collect();
                let (ft, gt) = gd.fun_grad(&trial).unwrap();
                if ft <= f + 1e-4 * step * slope {
                    x = trial;
                    f = ft;
                    g = gt;
                    break;
                }
                step *= 0.5;
                if step < 1e-20 {
                    break;
                }
            }
            if step < 1e-20 {
                break;
            }
        }
        assert!(((trace.final_f() - f) / f).abs() <= 1e-6, "tron {} vs gd {f}", trace.final_f());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn accepted_iterates_strictly_decrease(seed in 0u64..10_000, m in 2usize..9) {
            let mut q = Quadratic { a: random_spd(m, seed), b: vec![1.0; m], fg: 0, hd: 0 };
            let (_, trace) = minimize(&mut q, &vec![3.0; m], &TronConfig::default()).unwrap();
            let mut prev = trace.initial_f;
            for r in trace.records.iter().filter(|r| r.accepted) {
                proptest::prop_assert!(r.f < prev);
                prev = r.f;
            }
            proptest::prop_assert_eq!(trace.fun_grad_calls, q.fg);
            proptest::prop_assert_eq!(trace.hess_vec_calls, q.hd);
        }
    }
}
