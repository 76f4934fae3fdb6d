//! Minimal reverse-mode autodiff over 2-D f64 arrays.
//!
//! A [`Graph`] is a single-use tape: forward values are computed eagerly as
//! ops are recorded, and [`Graph::backward`] walks the tape once in reverse.
//! Only the op set required by the segmenter and the temporal head exists.
//! Attention masks and the Hungarian assignment enter the tape as constants,
//! so thresholding and matching stay outside the gradient path.

use std::rc::Rc;

use ndarray::{Array2, Axis};
use once_cell::sync::Lazy;

use crate::error::{Error, Result};

/// Additive attention-mask magnitude: blocked logits are shifted by -LARGE.
/// Chosen at startup as the smallest magnitude whose exponential underflows
/// to exactly 0.0 in f64, plus slack for the logit spread, so blocked
/// softmax weights are exactly zero.
pub static NEG_LARGE: Lazy<f64> = Lazy::new(|| {
    let mut lo = 700.0f64;
    let mut hi = 800.0f64;
    debug_assert!((-lo).exp() > 0.0 && (-hi).exp() == 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (-mid).exp() == 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi + 1e4
});

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Bilinear interpolation plan mapping a coarse grid row (length `src_len`)
/// to a fine row (length `dst_len`); each output entry mixes up to four
/// source entries.
#[derive(Debug)]
pub struct UpsamplePlan {
    pub src_len: usize,
    pub dst_len: usize,
    /// Per output entry: (source index, weight) pairs.
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl UpsamplePlan {
    /// Plan for upsampling a `gh x gw` grid to `(gh*patch) x (gw*patch)`
    /// pixels, both flattened row-major, with grid values anchored at cell
    /// centers and edge clamping.
    pub fn bilinear(gh: usize, gw: usize, patch: usize) -> Self {
        let (ih, iw) = (gh * patch, gw * patch);
        let mut taps = Vec::with_capacity(ih * iw);
        for y in 0..ih {
            let gy = ((y as f64 + 0.5) / patch as f64 - 0.5).clamp(0.0, (gh - 1) as f64);
            let y0 = gy.floor() as usize;
            let y1 = (y0 + 1).min(gh - 1);
            let fy = gy - y0 as f64;
            for x in 0..iw {
                let gx = ((x as f64 + 0.5) / patch as f64 - 0.5).clamp(0.0, (gw - 1) as f64);
                let x0 = gx.floor() as usize;
                let x1 = (x0 + 1).min(gw - 1);
                let fx = gx - x0 as f64;
                let mut entry: Vec<(usize, f64)> = Vec::with_capacity(4);
                let mut push = |gy: usize, gx: usize, w: f64| {
                    if w != 0.0 {
                        entry.push((gy * gw + gx, w));
                    }
                };
                push(y0, x0, (1.0 - fy) * (1.0 - fx));
                push(y0, x1, (1.0 - fy) * fx);
                push(y1, x0, fy * (1.0 - fx));
                push(y1, x1, fy * fx);
                taps.push(entry);
            }
        }
        Self { src_len: gh * gw, dst_len: ih * iw, taps }
    }

    pub fn apply_row(&self, src: &[f64], dst: &mut [f64]) {
        for (out, taps) in dst.iter_mut().zip(&self.taps) {
            *out = taps.iter().map(|&(i, w)| src[i] * w).sum();
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    /// N x D plus a 1 x D row broadcast over rows.
    AddRow(Var, Var),
    BroadcastRows(Var, usize),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    /// Row softmax of (x + mask); the mask is a constant.
    SoftmaxRows(Var, Option<Rc<Array2<f64>>>),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Upsample(Var, Rc<UpsamplePlan>),
    /// Weighted mean of -log softmax(target); `weights` follow targets.
    CeRows { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
    /// scale * sum(softplus-form BCE of logits vs targets).
    BceLogits { logits: Var, targets: Rc<Array2<f64>>, scale: f64 },
    /// Mean over rows of the smoothed Dice loss of sigmoid(logits) vs targets.
    DiceLogits { logits: Var, targets: Rc<Array2<f64>> },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Single-use autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((rows, src.ncols()));
        for mut r in value.rows_mut() {
            r.assign(&src.row(0));
        }
        self.push(value, Op::BroadcastRows(a, rows))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let value =
            ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).expect("row counts must match");
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let src = self.value(a);
        let mut value = Array2::zeros((indices.len(), src.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            value.row_mut(i).assign(&src.row(idx));
        }
        self.push(value, Op::GatherRows(a, indices))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = src.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise softmax of `(x + additive_mask)`. Mask entries of `-LARGE`
    /// produce weights that are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, additive_mask: Option<Rc<Array2<f64>>>) -> Var {
        let logits = self.value(x);
        let mut shifted = match &additive_mask {
            Some(m) => logits + m.as_ref(),
            None => logits.clone(),
        };
        softmax_rows_in_place(&mut shifted);
        self.push(shifted, Op::SoftmaxRows(x, additive_mask))
    }

    /// Row-wise layer normalization with learnable 1 x D gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let src = self.value(x);
        let g = self.value(gamma).row(0).to_owned();
        let b = self.value(beta).row(0).to_owned();
        let mut value = src.clone();
        for mut row in value.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let inv_std = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * g[j] + b[j];
            }
        }
        self.push(value, Op::LayerNorm { x, gamma, beta })
    }

    /// Apply a row-wise bilinear upsample plan (each row is one flattened
    /// grid). The plan is linear, so gradients scatter with the same taps.
    pub fn upsample(&mut self, x: Var, plan: Rc<UpsamplePlan>) -> Var {
        let src = self.value(x);
        let mut value = Array2::zeros((src.nrows(), plan.dst_len));
        for (src_row, mut dst_row) in src.rows().into_iter().zip(value.rows_mut()) {
            plan.apply_row(src_row.as_slice().unwrap(), dst_row.as_slice_mut().unwrap());
        }
        self.push(value, Op::Upsample(x, plan))
    }

    /// Weighted-mean cross entropy of row logits toward target indices.
    /// The scalar is `sum_i w_i * (logsumexp_i - logit_i[t_i]) / sum_i w_i`.
    pub fn ce_rows(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        assert_eq!(targets.len(), self.value(logits).nrows());
        assert_eq!(targets.len(), weights.len());
        let src = self.value(logits);
        let mut sum = 0.0;
        for ((row, &t), &w) in src.rows().into_iter().zip(&targets).zip(&weights) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            sum += w * (lse - row[t]);
        }
        let norm: f64 = weights.iter().sum();
        let value = Array2::from_elem((1, 1), if norm > 0.0 { sum / norm } else { 0.0 });
        self.push(value, Op::CeRows { logits, targets, weights })
    }

    /// `scale * sum(max(l,0) - l*t + ln(1 + exp(-|l|)))`, the stable form of
    /// binary cross entropy with logits.
    pub fn bce_logits(&mut self, logits: Var, targets: Rc<Array2<f64>>, scale: f64) -> Var {
        let src = self.value(logits);
        let mut sum = 0.0;
        for (&l, &t) in src.iter().zip(targets.iter()) {
            sum += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
        }
        let value = Array2::from_elem((1, 1), scale * sum);
        self.push(value, Op::BceLogits { logits, targets, scale })
    }

    /// Mean over rows of `1 - (2*sum(p*t) + 1) / (sum(p) + sum(t) + 1)` with
    /// `p = sigmoid(logits)`.
    pub fn dice_logits(&mut self, logits: Var, targets: Rc<Array2<f64>>) -> Var {
        let src = self.value(logits);
        let rows = src.nrows() as f64;
        let mut sum = 0.0;
        for (row, trow) in src.rows().into_iter().zip(targets.rows()) {
            let (mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0);
            for (&l, &t) in row.iter().zip(trow.iter()) {
                let p = sigmoid(l);
                inter += p * t;
                psum += p;
                tsum += t;
            }
            sum += 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
        }
        let value = Array2::from_elem((1, 1), sum / rows);
        self.push(value, Op::DiceLogits { logits, targets })
    }

    /// Accumulate gradients of `root` (a 1x1 scalar) with respect to every
    /// node; returns one gradient array per node.
    pub fn backward(&self, root: Var) -> Vec<Array2<f64>> {
        let mut grads: Vec<Array2<f64>> =
            self.nodes.iter().map(|n| Array2::zeros(n.value.dim())).collect();
        grads[root.0][(0, 0)] = 1.0;

        for idx in (0..=root.0).rev() {
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = grads[idx].clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = grad.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&grad);
                    grads[a.0] += &da;
                    grads[b.0] += &db;
                }
                Op::Transpose(a) => {
                    grads[a.0] += &grad.t();
                }
                Op::Add(a, b) => {
                    grads[a.0] += &grad;
                    grads[b.0] += &grad;
                }
                Op::Sub(a, b) => {
                    grads[a.0] += &grad;
                    grads[b.0] -= &grad;
                }
                Op::MulElem(a, b) => {
                    let da = &grad * &self.nodes[b.0].value;
                    let db = &grad * &self.nodes[a.0].value;
                    grads[a.0] += &da;
                    grads[b.0] += &db;
                }
                Op::Scale(a, c) => {
                    grads[a.0] += &(&grad * *c);
                }
                Op::AddRow(a, row) => {
                    grads[a.0] += &grad;
                    let summed = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[row.0] += &summed;
                }
                Op::BroadcastRows(a, _) => {
                    let summed = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[a.0] += &summed;
                }
                Op::ConcatCols(a, b) => {
                    let na = self.nodes[a.0].value.ncols();
                    let ga = grad.slice(ndarray::s![.., ..na]).to_owned();
                    let gb = grad.slice(ndarray::s![.., na..]).to_owned();
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::GatherRows(a, indices) => {
                    for (i, &src_row) in indices.iter().enumerate() {
                        let g = grad.row(i).to_owned();
                        let mut target = grads[a.0].row_mut(src_row);
                        target += &g;
                    }
                }
                Op::MeanRows(a) => {
                    let n = self.nodes[a.0].value.nrows() as f64;
                    let per_row = grad.row(0).mapv(|g| g / n);
                    for mut r in grads[a.0].rows_mut() {
                        r += &per_row;
                    }
                }
                Op::SumAll(a) => {
                    let g = grad[(0, 0)];
                    grads[a.0] += g;
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let da = &grad * &y.mapv(|y| 1.0 - y * y);
                    grads[a.0] += &da;
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let da = &grad * &y.mapv(|y| y * (1.0 - y));
                    grads[a.0] += &da;
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = &grad * &x.mapv(gelu_derivative);
                    grads[a.0] += &da;
                }
                Op::SoftmaxRows(x, _) => {
                    let y = &self.nodes[idx].value;
                    let mut dx = Array2::zeros(y.dim());
                    for ((yrow, grow), mut drow) in
                        y.rows().into_iter().zip(grad.rows()).zip(dx.rows_mut())
                    {
                        let dot: f64 = yrow.iter().zip(grow.iter()).map(|(&y, &g)| y * g).sum();
                        for ((&y, &g), d) in yrow.iter().zip(grow.iter()).zip(drow.iter_mut()) {
                            *d = y * (g - dot);
                        }
                    }
                    grads[x.0] += &dx;
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let src = &self.nodes[x.0].value;
                    let g = self.nodes[gamma.0].value.row(0).to_owned();
                    let d = src.ncols() as f64;
                    let mut dx = Array2::zeros(src.dim());
                    let mut dgamma = Array2::zeros((1, src.ncols()));
                    let mut dbeta = Array2::zeros((1, src.ncols()));
                    for ((srow, grow), mut drow) in
                        src.rows().into_iter().zip(grad.rows()).zip(dx.rows_mut())
                    {
                        let mean = srow.mean().unwrap();
                        let var = srow.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                        let inv_std = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = srow.iter().map(|&v| (v - mean) * inv_std).collect();
                        let dy_g: Vec<f64> = grow.iter().zip(&g).map(|(&gr, &ga)| gr * ga).collect();
                        let mean_dy: f64 = dy_g.iter().sum::<f64>() / d;
                        let mean_dy_xhat: f64 =
                            dy_g.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / d;
                        for j in 0..src.ncols() {
                            drow[j] = inv_std * (dy_g[j] - mean_dy - xhat[j] * mean_dy_xhat);
                            dgamma[(0, j)] += grow[j] * xhat[j];
                            dbeta[(0, j)] += grow[j];
                        }
                    }
                    grads[x.0] += &dx;
                    grads[gamma.0] += &dgamma;
                    grads[beta.0] += &dbeta;
                }
                Op::Upsample(x, plan) => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    for (grow, mut drow) in grad.rows().into_iter().zip(dx.rows_mut()) {
                        for (out_idx, taps) in plan.taps.iter().enumerate() {
                            let g = grow[out_idx];
                            if g != 0.0 {
                                for &(src_idx, w) in taps {
                                    drow[src_idx] += g * w;
                                }
                            }
                        }
                    }
                    grads[x.0] += &dx;
                }
                Op::CeRows { logits, targets, weights } => {
                    let src = &self.nodes[logits.0].value;
                    let norm: f64 = weights.iter().sum();
                    if norm > 0.0 {
                        let gscale = grad[(0, 0)] / norm;
                        let mut dl = Array2::zeros(src.dim());
                        for ((srow, mut drow), (&t, &w)) in src
                            .rows()
                            .into_iter()
                            .zip(dl.rows_mut())
                            .zip(targets.iter().zip(weights.iter()))
                        {
                            let max = srow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = srow.iter().map(|&v| (v - max).exp()).collect();
                            let z: f64 = exps.iter().sum();
                            for (j, d) in drow.iter_mut().enumerate() {
                                let softmax = exps[j] / z;
                                let onehot = (j == t) as usize as f64;
                                *d = gscale * w * (softmax - onehot);
                            }
                        }
                        grads[logits.0] += &dl;
                    }
                }
                Op::BceLogits { logits, targets, scale } => {
                    let src = &self.nodes[logits.0].value;
                    let g = grad[(0, 0)] * scale;
                    let mut dl = Array2::zeros(src.dim());
                    for ((&l, &t), d) in src.iter().zip(targets.iter()).zip(dl.iter_mut()) {
                        *d = g * (sigmoid(l) - t);
                    }
                    grads[logits.0] += &dl;
                }
                Op::DiceLogits { logits, targets } => {
                    let src = &self.nodes[logits.0].value;
                    let g = grad[(0, 0)] / src.nrows() as f64;
                    let mut dl = Array2::zeros(src.dim());
                    for ((srow, trow), mut drow) in
                        src.rows().into_iter().zip(targets.rows()).zip(dl.rows_mut())
                    {
                        let probs: Vec<f64> = srow.iter().map(|&l| sigmoid(l)).collect();
                        let inter: f64 = probs.iter().zip(trow.iter()).map(|(&p, &t)| p * t).sum();
                        let psum: f64 = probs.iter().sum();
                        let tsum: f64 = trow.sum();
                        let numer = 2.0 * inter + 1.0;
                        let denom = psum + tsum + 1.0;
                        for (j, d) in drow.iter_mut().enumerate() {
                            let p = probs[j];
                            let t = trow[j];
                            // d(1 - n/d)/dp = -(2t*d - n) / d^2, chained with p'.
                            let dp = -(2.0 * t * denom - numer) / (denom * denom);
                            *d = g * dp * p * (1.0 - p);
                        }
                    }
                    grads[logits.0] += &dl;
                }
            }
        }
        grads
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU; the derivative below differentiates this exact
/// approximation, not the erf form.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place row softmax with max subtraction.
pub fn softmax_rows_in_place(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Validate that an array is finite, for input checking at module edges.
pub fn ensure_finite(m: &Array2<f64>, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput(what.to_string()));
    }
    Ok(())
}
