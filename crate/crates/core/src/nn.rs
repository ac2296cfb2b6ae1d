//! Small differentiable building blocks with hand-written gradients.
//!
//! Matrices are row-major `Vec<f64>`; a dense layer stores `out × in`
//! weights so that `y = W·x + b`. Batched variants take `batch × in` inputs.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::Serialize;

use crate::error::{Error, Result};

/// Lower/upper clamp on probabilities before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// `c = alpha · op(a)·op(b) + beta · c` for contiguous row-major operands,
/// where `op(a)` is `m × k` and `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    gemm_strided(
        m,
        k,
        n,
        alpha,
        (a, rsa, csa),
        (b, rsb, csb),
        beta,
        (c, n, 1),
    );
}

fn max_offset(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// General strided product on sub-matrices of larger buffers. Each operand is
/// `(slice, row_stride, col_stride)`; `a` is `m × k`, `b` is `k × n` and `c`
/// is `m × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: (&mut [f64], usize, usize),
) {
    let (a, rsa, csa) = a;
    let (b, rsb, csb) = b;
    let (c, rsc, csc) = c;
    assert!(a.len() >= max_offset(m, k, rsa, csa), "gemm: lhs out of bounds");
    assert!(b.len() >= max_offset(k, n, rsb, csb), "gemm: rhs out of bounds");
    assert!(c.len() >= max_offset(m, n, rsc, csc), "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `y = W·x` for an `out × in` row-major `w`.
pub fn matvec(w: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let cols = x.len();
    debug_assert_eq!(w.len(), out * cols);
    w.chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `y = Wᵀ·x` for an `out × in` row-major `w` and `x` of length `out`.
pub fn matvec_t(w: &[f64], x: &[f64], cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; cols];
    for (row, &xi) in w.chunks_exact(cols).zip(x) {
        if xi != 0.0 {
            for (yj, &wj) in y.iter_mut().zip(row) {
                *yj += xi * wj;
            }
        }
    }
    y
}

/// `W += a ⊗ b`.
pub fn add_outer(w: &mut [f64], a: &[f64], b: &[f64]) {
    debug_assert_eq!(w.len(), a.len() * b.len());
    for (row, &ai) in w.chunks_exact_mut(b.len()).zip(a) {
        if ai != 0.0 {
            for (wj, &bj) in row.iter_mut().zip(b) {
                *wj += ai * bj;
            }
        }
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_in_place(x: &mut [f64]) {
    for v in x {
        *v = v.max(0.0);
    }
}

/// Logistic function evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one prediction, with `r_hat` clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(r_hat: f64, r: f64) -> f64 {
    let p = r_hat.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(r * p.ln() + (1.0 - r) * (1.0 - p).ln())
}

/// Summed binary cross-entropy over a minibatch.
pub fn bce_loss_sum(r_hat: &[f64], r: &[f64]) -> f64 {
    r_hat.iter().zip(r).map(|(&p, &y)| bce_loss(p, y)).sum()
}

/// Cross-entropy of `sigmoid(logit)` against `r`, computed in the
/// numerically stable form `softplus(logit) - r·logit`. Its derivative with
/// respect to the logit is exactly `sigmoid(logit) - r`.
pub fn bce_with_logit(logit: f64, r: f64) -> f64 {
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    softplus - r * logit
}

/// Row-wise softmax, shifted by the max logit.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `θ ← θ - lr·g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} parameters vs {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs × inputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    pub fn from_parts(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::Shape(format!(
                "dense layer {outputs}x{inputs} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bound");
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// `Y = X·Wᵀ + b` for `batch` rows of `X`.
    pub fn forward_batch(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(batch * self.outputs);
        for _ in 0..batch {
            y.extend_from_slice(&self.bias);
        }
        gemm(
            batch,
            self.inputs,
            self.outputs,
            1.0,
            x,
            false,
            &self.weights,
            true,
            1.0,
            &mut y,
        );
        y
    }

    /// Accumulates `dW += dYᵀ·X` and `db += Σ dY` into `grad`.
    pub fn accumulate_grad(&self, x: &[f64], dy: &[f64], batch: usize, grad: &mut DenseLayer) {
        gemm(
            self.outputs,
            batch,
            self.inputs,
            1.0,
            dy,
            true,
            x,
            false,
            1.0,
            &mut grad.weights,
        );
        for row in dy.chunks_exact(self.outputs) {
            for (g, d) in grad.bias.iter_mut().zip(row) {
                *g += d;
            }
        }
    }

    /// As [`Self::accumulate_grad`], also returning `dX`.
    pub fn backward_batch(&self, x: &[f64], dy: &[f64], batch: usize, grad: &mut DenseLayer) -> Vec<f64> {
        self.accumulate_grad(x, dy, batch, grad);
        let mut dx = vec![0.0; batch * self.inputs];
        gemm(
            batch,
            self.outputs,
            self.inputs,
            1.0,
            dy,
            false,
            &self.weights,
            false,
            0.0,
            &mut dx,
        );
        dx
    }

    pub fn sgd_step(&mut self, grad: &DenseLayer, lr: f64) -> Result<()> {
        sgd_step(&mut self.weights, &grad.weights, lr)?;
        sgd_step(&mut self.bias, &grad.bias, lr)
    }
}

/// `y = W·x + b`.
pub fn dense_forward(layer: &DenseLayer, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.inputs {
        return Err(Error::Shape(format!(
            "dense layer expects {} inputs, got {}",
            layer.inputs,
            x.len()
        )));
    }
    let mut y = matvec(&layer.weights, x, layer.outputs);
    for (yi, b) in y.iter_mut().zip(&layer.bias) {
        *yi += b;
    }
    Ok(y)
}

/// A named contiguous range of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because the one-sided differences disagree, i.e.
    /// the perturbation crosses a ReLU kink.
    pub kinks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst_block(&self) -> Option<&BlockCheck> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn kinks(&self) -> usize {
        self.blocks.iter().map(|b| b.kinks).sum()
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    /// Passes when every checked coordinate is within tolerance and kinks
    /// make up less than 5% of coordinates.
    pub fn passed(&self) -> bool {
        let total = self.checked() + self.kinks();
        self.max_rel_error() <= self.tol && (self.kinks() as f64) < 0.05 * total.max(1) as f64
    }
}

/// Absolute floor of the relative-error denominator.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `loss` at `params`.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn finite_diff_check<F>(
    params: &[f64],
    analytic: &[f64],
    blocks: &[ParamBlock],
    h: f64,
    tol: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters vs {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut probe = params.to_vec();
    let base = loss(&probe);
    let mut reports = Vec::with_capacity(blocks.len());
    for block in blocks {
        let mut report = BlockCheck {
            name: block.name.clone(),
            max_rel_error: 0.0,
            worst_index: None,
            checked: 0,
            kinks: 0,
        };
        for i in block.range.clone() {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = loss(&probe);
            probe[i] = orig - h;
            let minus = loss(&probe);
            probe[i] = orig;

            let forward = (plus - base) / h;
            let backward = (base - minus) / h;
            // smooth curvature moves the one-sided slopes apart by about h * f'',
            // a ReLU crossing by a finite jump
            let scale = forward.abs().max(backward.abs()).max(1.0);
            if (forward - backward).abs() > 1e-2 * scale {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if report.worst_index.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = Some(i);
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        h,
        tol,
        blocks: reports,
    })
}
