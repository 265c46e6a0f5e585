//! Value, gradient and Hessian-vector products of
//!
//! ```text
//! f(beta) = lambda/2 * beta' W beta + sum_i l(c_i beta, y_i)
//! ```
//!
//! split into per-worker partial sums. Each worker owns rows of C (its
//! examples) and a set of rows of W; summing the partials over all workers
//! gives the global quantities.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::allreduce::pinned_sum;
use crate::data::parse_features;
use crate::error::{check_dim, Error, Result};
use crate::kernel::{BasisSet, BasisSource, HyperParams, KernelBlock};
use crate::linalg::dot;
use crate::tron::Oracle;

/// Per-example loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `1/2 max(1 - y o, 0)^2`
    #[default]
    SquaredHinge,
    /// `1/2 (o - y)^2` (kernel ridge regression)
    SquaredError,
}

impl Loss {
    pub fn as_str(self) -> &'static str {
        match self {
            Loss::SquaredHinge => "squared_hinge",
            Loss::SquaredError => "squared_error",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "squared_hinge" => Ok(Loss::SquaredHinge),
            "squared_error" => Ok(Loss::SquaredError),
            other => Err(Error::Format(format!("unknown loss `{other}`"))),
        }
    }

    /// Whether example with output `o` and label `y` contributes curvature.
    fn active(self, o: f64, y: f64) -> bool {
        match self {
            Loss::SquaredHinge => 1.0 - y * o > 0.0,
            Loss::SquaredError => true,
        }
    }
}

/// Outputs `o = C_j beta` of a worker's rows and the active set D.
#[derive(Debug, Clone, PartialEq)]
pub struct LossState {
    pub outputs: Vec<f64>,
    pub active_mask: Vec<bool>,
}

/// A worker's contribution to `f`: `reg` is its share of `beta' W beta`, `loss`
/// the loss summed over its rows.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveParts {
    pub reg: f64,
    pub loss: f64,
}

impl ObjectiveParts {
    /// `lambda/2 * reg + loss`, for already reduced parts.
    pub fn total(&self, lambda: f64) -> f64 {
        0.5 * lambda * self.reg + self.loss
    }
}

pub fn local_outputs(block: &KernelBlock, beta: &[f64], loss: Loss) -> Result<LossState> {
    check_dim(block.m(), beta.len())?;
    let outputs = block.c_block.matvec(beta);
    let active_mask = outputs
        .iter()
        .zip(&block.labels)
        .map(|(&o, &y)| loss.active(o, y))
        .collect();
    Ok(LossState { outputs, active_mask })
}

fn check_state(block: &KernelBlock, state: &LossState) -> Result<()> {
    check_dim(block.n(), state.outputs.len())?;
    check_dim(block.n(), state.active_mask.len())
}

/// `(W beta)_r` for the block's W rows.
fn w_rows_times(block: &KernelBlock, v: &[f64]) -> Vec<f64> {
    block.w_rows.matvec(v)
}

fn reg_part(block: &KernelBlock, beta: &[f64], w_beta: &[f64]) -> f64 {
    block.w_row_ids.iter().zip(w_beta).map(|(&r, wb)| beta[r] * wb).sum()
}

fn loss_part(block: &KernelBlock, state: &LossState) -> f64 {
    let mut acc = 0.0;
    for ((&o, &y), &on) in state.outputs.iter().zip(&block.labels).zip(&state.active_mask) {
        if on {
            let r = o - y;
            acc += 0.5 * r * r;
        }
    }
    acc
}

/// `lambda * scatter(w_part) + C_j' z`
fn assemble(block: &KernelBlock, lambda: f64, w_part: &[f64], z: &[f64]) -> Vec<f64> {
    let mut out = block.c_block.t_matvec(z);
    for (&r, wv) in block.w_row_ids.iter().zip(w_part) {
        out[r] += lambda * wv;
    }
    out
}

fn residuals(block: &KernelBlock, state: &LossState) -> Vec<f64> {
    state
        .outputs
        .iter()
        .zip(&block.labels)
        .zip(&state.active_mask)
        .map(|((&o, &y), &on)| if on { o - y } else { 0.0 })
        .collect()
}

pub fn local_objective(
    block: &KernelBlock,
    state: &LossState,
    beta: &[f64],
) -> Result<ObjectiveParts> {
    check_dim(block.m(), beta.len())?;
    check_state(block, state)?;
    let w_beta = w_rows_times(block, beta);
    Ok(ObjectiveParts { reg: reg_part(block, beta, &w_beta), loss: loss_part(block, state) })
}

/// `lambda (W beta)_j + C_j' (D_j (C_j beta - y_j))`, scattered into a
/// length-m vector.
pub fn local_gradient(
    block: &KernelBlock,
    state: &LossState,
    beta: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    check_dim(block.m(), beta.len())?;
    check_state(block, state)?;
    let w_beta = w_rows_times(block, beta);
    Ok(assemble(block, lambda, &w_beta, &residuals(block, state)))
}

/// `lambda (W d)_j + C_j' (D_j C_j d)` with D frozen in `state`.
pub fn local_hessian_vec(
    block: &KernelBlock,
    state: &LossState,
    d: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    check_dim(block.m(), d.len())?;
    check_state(block, state)?;
    let w_d = w_rows_times(block, d);
    let mut cd = block.c_block.matvec(d);
    for (v, &on) in cd.iter_mut().zip(&state.active_mask) {
        if !on {
            *v = 0.0;
        }
    }
    Ok(assemble(block, lambda, &w_d, &cd))
}

/// Outputs, objective parts and gradient part in one pass over the block.
pub fn local_fun_grad(
    block: &KernelBlock,
    beta: &[f64],
    lambda: f64,
    loss: Loss,
) -> Result<(LossState, ObjectiveParts, Vec<f64>)> {
    let state = local_outputs(block, beta, loss)?;
    let w_beta = w_rows_times(block, beta);
    let parts = ObjectiveParts { reg: reg_part(block, beta, &w_beta), loss: loss_part(block, &state) };
    let grad = assemble(block, lambda, &w_beta, &residuals(block, &state));
    Ok((state, parts, grad))
}

/// Call counts seen from the oracle side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OracleCounters {
    pub fun_grad: u64,
    pub hess_vec: u64,
}

/// Single-process oracle over one or more blocks, combined in block order
/// exactly like the tree reduction combines workers.
#[derive(Debug)]
pub struct BlockOracle<'a> {
    blocks: &'a [KernelBlock],
    lambda: f64,
    loss: Loss,
    current: Option<Vec<LossState>>,
    trial: Option<Vec<LossState>>,
    pub counters: OracleCounters,
}

impl<'a> BlockOracle<'a> {
    pub fn new(blocks: &'a [KernelBlock], lambda: f64, loss: Loss) -> Result<Self> {
        let m = blocks.first().map(KernelBlock::m).ok_or_else(|| Error::Config("no kernel blocks".into()))?;
        for b in blocks {
            check_dim(m, b.m())?;
        }
        Ok(BlockOracle { blocks, lambda, loss, current: None, trial: None, counters: OracleCounters::default() })
    }

    /// `f(beta)` without touching the oracle state or counters.
    pub fn objective(&self, beta: &[f64]) -> Result<f64> {
        let mut parts = Vec::with_capacity(self.blocks.len());
        for b in self.blocks {
            let state = local_outputs(b, beta, self.loss)?;
            let p = local_objective(b, &state, beta)?;
            parts.push([p.reg, p.loss]);
        }
        let sum = pinned_sum(parts.iter().map(|p| &p[..]));
        Ok(ObjectiveParts { reg: sum[0], loss: sum[1] }.total(self.lambda))
    }

    /// States at the last accepted point.
    pub fn current_states(&self) -> Option<&[LossState]> {
        self.current.as_deref()
    }
}

impl Oracle for BlockOracle<'_> {
    fn dim(&self) -> usize {
        self.blocks[0].m()
    }

    fn fun_grad(&mut self, beta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.counters.fun_grad += 1;
        let mut states = Vec::with_capacity(self.blocks.len());
        let mut parts = Vec::with_capacity(self.blocks.len());
        let mut grads = Vec::with_capacity(self.blocks.len());
        for b in self.blocks {
            let (s, p, g) = local_fun_grad(b, beta, self.lambda, self.loss)?;
            states.push(s);
            parts.push([p.reg, p.loss]);
            grads.push(g);
        }
        self.trial = Some(states);
        let f = pinned_sum(parts.iter().map(|p| &p[..]));
        let g = pinned_sum(grads.iter().map(Vec::as_slice));
        Ok((ObjectiveParts { reg: f[0], loss: f[1] }.total(self.lambda), g))
    }

    fn accept(&mut self, accepted: bool) {
        if accepted {
            self.current = self.trial.take();
        } else {
            self.trial = None;
        }
    }

    fn hess_vec(&mut self, d: &[f64]) -> Result<Vec<f64>> {
        self.counters.hess_vec += 1;
        let states = self
            .current
            .as_ref()
            .ok_or_else(|| Error::Protocol("Hd requested before any accepted point".into()))?;
        let parts = self
            .blocks
            .iter()
            .zip(states)
            .map(|(b, s)| local_hessian_vec(b, s, d, self.lambda))
            .collect::<Result<Vec<_>>>()?;
        Ok(pinned_sum(parts.iter().map(Vec::as_slice)))
    }
}

/// A trained model: coefficients over a basis set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub beta: Vec<f64>,
    pub basis: BasisSet,
    pub params: HyperParams,
    pub loss: Loss,
    /// Feature dimension of the training data.
    pub dim: usize,
}

impl ModelState {
    pub fn new(beta: Vec<f64>, basis: BasisSet, params: HyperParams, loss: Loss, dim: usize) -> Result<Self> {
        check_dim(basis.m(), beta.len())?;
        Ok(ModelState { beta, basis, params, loss, dim })
    }

    pub fn m(&self) -> usize {
        self.beta.len()
    }

    /// Checkpoint layout: a text header line, one sparse feature line per
    /// basis point, a `#beta` marker line, then `m` little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let _ = writeln!(
            out,
            "#model m={} d={} sigma={:?} lambda={:?} loss={} source={} kernel=gaussian",
            self.m(),
            self.dim,
            self.params.sigma,
            self.params.lambda,
            self.loss.as_str(),
            self.basis.source.as_str()
        );
        for p in &self.basis.points {
            let _ = writeln!(out, "{}", p.to_libsvm_features());
        }
        out.extend_from_slice(b"#beta\n");
        for b in &self.beta {
            out.extend_from_slice(&b.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let mut next_line = |lineno: usize| -> Result<&str> {
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format(format!("model file truncated at line {lineno}")))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| Error::Format(format!("line {lineno} is not UTF-8")))?;
            rest = &rest[end + 1..];
            Ok(line)
        };
        let header = next_line(1)?;
        let fields = header_fields(header, "#model")?;
        let get = |key: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Format(format!("model header lacks `{key}`")))
        };
        let num = |key: &str| -> Result<f64> {
            get(key)?.parse().map_err(|_| Error::Format(format!("bad `{key}` in model header")))
        };
        let m = num("m")? as usize;
        let dim = num("d")? as usize;
        let params = HyperParams::new(num("lambda")?, num("sigma")?)?;
        let loss = Loss::parse(get("loss")?)?;
        let source = BasisSource::parse(get("source")?)?;
        let mut points = Vec::with_capacity(m);
        for k in 0..m {
            let line = next_line(k + 2)?;
            points.push(parse_features(line.split_whitespace(), k + 2)?);
        }
        if next_line(m + 2)? != "#beta" {
            return Err(Error::Format("missing `#beta` marker".into()));
        }
        if rest.len() != 8 * m {
            return Err(Error::Format(format!("expected {} bytes of beta, found {}", 8 * m, rest.len())));
        }
        let beta = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let basis = BasisSet { points, source, sigma: params.sigma };
        ModelState::new(beta, basis, params, loss, dim)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Decision value `sum_k beta_k k(x, xbar_k)`.
    pub fn decision(&self, x: &crate::data::SparseVec) -> f64 {
        let sigma = self.params.sigma;
        let kx: Vec<f64> = self.basis.points.iter().map(|p| crate::kernel::gaussian(x, p, sigma)).collect();
        dot(&kx, &self.beta)
    }
}

/// Splits `#tag k=v k=v ...` into pairs.
pub(crate) fn header_fields<'a>(line: &'a str, tag: &str) -> Result<Vec<(&'a str, &'a str)>> {
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some(tag) {
        return Err(Error::Format(format!("expected a `{tag}` header line")));
    }
    tokens
        .map(|t| t.split_once('=').ok_or_else(|| Error::Format(format!("bad header field `{t}`"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::tron::Oracle;

    fn block(c: Vec<f64>, n: usize, m: usize, w_ids: Vec<usize>, w: Vec<f64>, labels: Vec<f64>) -> KernelBlock {
        let rows = w_ids.len();
        KernelBlock {
            c_block: Matrix::from_vec(n, m, c),
            w_row_ids: w_ids,
            w_rows: Matrix::from_vec(rows, m, w),
            labels,
            c_evals: 0,
            w_evals: 0,
        }
    }

    #[test]
    fn zero_model_is_fully_active() {
        let b = block(vec![0.5, 0.2, 0.1, 0.9], 2, 2, vec![0, 1], vec![1.0, 0.3, 0.3, 1.0], vec![1.0, -1.0]);
        let s = local_outputs(&b, &[0.0, 0.0], Loss::SquaredHinge).unwrap();
        assert_eq!(s.outputs, vec![0.0, 0.0]);
        assert_eq!(s.active_mask, vec![true, true]);
        let f = local_objective(&b, &s, &[0.0, 0.0]).unwrap();
        assert_eq!(f.total(1.0), 1.0); // n/2
        // beta = 0: gradient is -C'y
        let g = local_gradient(&b, &s, &[0.0, 0.0], 1.0).unwrap();
        assert_eq!(g, vec![-(0.5 - 0.1), -(0.2 - 0.9)]);
    }

    #[test]
    fn margin_exactly_one_is_inactive() {
        let b = block(vec![1.0], 1, 1, vec![0], vec![1.0], vec![1.0]);
        let s = local_outputs(&b, &[1.0], Loss::SquaredHinge).unwrap();
        assert_eq!(s.outputs, vec![1.0]);
        assert_eq!(s.active_mask, vec![false]);
        // lambda = 2, beta = 1: f = (2/2) * 1 + 0
        let f = local_objective(&b, &s, &[1.0]).unwrap();
        assert_eq!(f.total(2.0), 1.0);
    }

    #[test]
    fn inactive_loss_leaves_only_regularizer() {
        let w = vec![1.0, 0.4, 0.4, 1.0];
        let b = block(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0, 1], w.clone(), vec![1.0, -1.0]);
        let beta = [3.0, -3.0];
        let s = local_outputs(&b, &beta, Loss::SquaredHinge).unwrap();
        assert!(s.active_mask.iter().all(|a| !a));
        let lambda = 0.7;
        let g = local_gradient(&b, &s, &beta, lambda).unwrap();
        let wm = Matrix::from_vec(2, 2, w);
        let expect: Vec<f64> = wm.matvec(&beta).iter().map(|v| lambda * v).collect();
        assert_eq!(g, expect);
        let d = [0.3, 1.1];
        let hd = local_hessian_vec(&b, &s, &d, lambda).unwrap();
        let expect: Vec<f64> = wm.matvec(&d).iter().map(|v| lambda * v).collect();
        assert_eq!(hd, expect);
        assert_eq!(local_hessian_vec(&b, &s, &[0.0, 0.0], lambda).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let b = block(vec![1.0], 1, 1, vec![0], vec![1.0], vec![1.0]);
        assert!(matches!(local_outputs(&b, &[1.0, 2.0], Loss::SquaredHinge), Err(Error::Dimension { .. })));
    }

    #[test]
    fn squared_error_is_always_active() {
        let b = block(vec![1.0], 1, 1, vec![0], vec![1.0], vec![1.0]);
        let s = local_outputs(&b, &[5.0], Loss::SquaredError).unwrap();
        assert_eq!(s.active_mask, vec![true]);
        assert_eq!(local_objective(&b, &s, &[5.0]).unwrap().loss, 8.0);
    }

    #[test]
    fn hd_requires_an_accepted_point() {
        let blocks = [block(vec![1.0], 1, 1, vec![0], vec![1.0], vec![1.0])];
        let mut o = BlockOracle::new(&blocks, 1.0, Loss::SquaredHinge).unwrap();
        assert!(o.hess_vec(&[1.0]).is_err());
        o.fun_grad(&[0.0]).unwrap();
        o.accept(true);
        assert_eq!(o.hess_vec(&[1.0]).unwrap(), vec![2.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        use crate::data::SparseVec;
        let basis = BasisSet {
            points: vec![SparseVec::new([(0, 0.1), (3, -2.5)]).unwrap(), SparseVec::default()],
            source: BasisSource::KMeans,
            sigma: 0.09,
        };
        let model = ModelState::new(
            vec![1.0 / 3.0, -7e-12],
            basis,
            HyperParams::new(0.005, 0.09).unwrap(),
            Loss::SquaredHinge,
            54,
        )
        .unwrap();
        let back = ModelState::from_bytes(&model.to_bytes()).unwrap();
        assert_eq!(back, model);
        let mut truncated = model.to_bytes();
        truncated.pop();
        assert!(ModelState::from_bytes(&truncated).is_err());
    }
}
