//! Pre-norm transformer blocks shared by the target and draft networks.
//!
//! A block computes
//!
//! ```text
//! x2 = x  + Attn(RMSNorm(x)  ⊙ g1) · Wo
//! y  = x2 + SiLU(RMSNorm(x2) ⊙ g2 · W1) · W2
//! ```
//!
//! with multi-head scaled dot-product attention under an explicit visibility
//! mask. The masked path keeps everything needed for the hand-derived
//! backward pass; the cached path appends keys/values for incremental
//! decoding. Both paths visit keys in ascending position order, so a row's
//! output is bit-identical whichever path computed it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, SeededRng};

const NORM_EPS: f64 = 1e-6;

/// Sinusoidal position code of width `d` for absolute position `pos`.
pub fn sinusoidal(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Adds position codes for `positions[r]` to row `r`.
pub fn add_positions(x: &mut Matrix, positions: &[usize]) {
    let d = x.cols();
    for (r, &p) in positions.iter().enumerate() {
        for (v, pe) in x.row_mut(r).iter_mut().zip(sinusoidal(p, d)) {
            *v += pe;
        }
    }
}

/// Per-query lists of visible key rows, each sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    visible: Vec<Vec<usize>>,
}

impl AttentionMask {
    pub fn causal(len: usize) -> Self {
        Self {
            visible: (0..len).map(|i| (0..=i).collect()).collect(),
        }
    }

    pub fn from_lists(mut visible: Vec<Vec<usize>>) -> Result<Self> {
        for (i, keys) in visible.iter_mut().enumerate() {
            keys.sort_unstable();
            keys.dedup();
            if keys.is_empty() {
                return Err(Error::InvalidConfig(format!("query row {i} sees no keys")));
            }
        }
        Ok(Self { visible })
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn visible(&self, row: usize) -> &[usize] {
        &self.visible[row]
    }

    pub fn can_see(&self, row: usize, key: usize) -> bool {
        self.visible[row].binary_search(&key).is_ok()
    }
}

/// RMS normalization: returns `(n ⊙ gain, n, 1/rms)`.
pub fn rms_norm(x: &Matrix, gain: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let d = x.cols();
    let mut normed = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + NORM_EPS).sqrt();
        inv.push(s);
        for c in 0..d {
            let n = row[c] * s;
            normed.set(r, c, n);
            out.set(r, c, n * gain[c]);
        }
    }
    (out, normed, inv)
}

/// Backward of [`rms_norm`]: returns `(dx, dgain)`.
pub fn rms_norm_backward(
    dout: &Matrix,
    normed: &Matrix,
    inv: &[f64],
    gain: &[f64],
) -> (Matrix, Vec<f64>) {
    let d = dout.cols();
    let mut dx = Matrix::zeros(dout.rows(), d);
    let mut dgain = vec![0.0; d];
    for r in 0..dout.rows() {
        let dy = dout.row(r);
        let n = normed.row(r);
        let dn: Vec<f64> = dy.iter().zip(gain).map(|(a, g)| a * g).collect();
        for c in 0..d {
            dgain[c] += dy[c] * n[c];
        }
        let proj = dot(&dn, n) / d as f64;
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = inv[r] * (dn[c] - n[c] * proj);
        }
    }
    (dx, dgain)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Cached keys and values of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    pub keys: Matrix,
    pub values: Matrix,
}

impl LayerKv {
    pub fn new(d: usize) -> Self {
        Self {
            keys: Matrix::zeros(0, d),
            values: Matrix::zeros(0, d),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn truncate(&mut self, len: usize) {
        self.keys.truncate_rows(len);
        self.values.truncate_rows(len);
    }
}

/// Attention for one query row over `keys[visible]`. Writes the context
/// vector into `out` and, if given, the per-head weights into `weights`
/// (head-major, `n_heads × visible.len()`).
fn attend_row(
    q: &[f64],
    keys: &Matrix,
    values: &Matrix,
    visible: &[usize],
    n_heads: usize,
    out: &mut [f64],
    mut weights: Option<&mut Vec<f64>>,
) {
    let d = q.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = vec![0.0; visible.len()];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = &q[cols.clone()];
        for (s, &j) in scores.iter_mut().zip(visible) {
            *s = dot(qh, &keys.row(j)[cols.clone()]) * scale;
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in scores.iter_mut() {
            *s /= total;
        }
        let oh = &mut out[cols.clone()];
        oh.iter_mut().for_each(|v| *v = 0.0);
        for (&w, &j) in scores.iter().zip(visible) {
            for (o, v) in oh.iter_mut().zip(&values.row(j)[cols.clone()]) {
                *o += w * v;
            }
        }
        if let Some(ws) = weights.as_deref_mut() {
            ws.extend_from_slice(&scores);
        }
    }
}

/// One pre-norm transformer block. Also used as its own gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub n_heads: usize,
    pub norm1: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub norm2: Vec<f64>,
    pub w1: Matrix,
    pub w2: Matrix,
}

/// Activations retained by [`Block::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    mask: AttentionMask,
    normed1: Matrix,
    inv1: Vec<f64>,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Vec<Vec<f64>>,
    ctx: Matrix,
    normed2: Matrix,
    inv2: Vec<f64>,
    h2: Matrix,
    pre_act: Matrix,
    act: Matrix,
}

impl Block {
    /// Scaled-normal initialization: input projections use `1/√fan_in`,
    /// residual-branch outputs are further scaled by `residual_scale`.
    pub fn init(d: usize, d_ff: usize, n_heads: usize, residual_scale: f64, rng: &mut SeededRng) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {d} not divisible by n_heads {n_heads}"
            )));
        }
        let mut normal = |rows: usize, cols: usize, std: f64| {
            Matrix::from_fn(rows, cols, |_, _| rng.normal(0.0, std))
        };
        let sd = 1.0 / (d as f64).sqrt();
        let sff = 1.0 / (d_ff as f64).sqrt();
        Ok(Self {
            n_heads,
            norm1: vec![1.0; d],
            wq: normal(d, d, sd),
            wk: normal(d, d, sd),
            wv: normal(d, d, sd),
            wo: normal(d, d, sd * residual_scale),
            norm2: vec![1.0; d],
            w1: normal(d, d_ff, sd),
            w2: normal(d_ff, d, sff * residual_scale),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            n_heads: self.n_heads,
            norm1: vec![0.0; self.norm1.len()],
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            norm2: vec![0.0; self.norm2.len()],
            w1: z(&self.w1),
            w2: z(&self.w2),
        }
    }

    pub fn d_model(&self) -> usize {
        self.norm1.len()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.cols()
    }

    /// Named parameter slices in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("norm1", &self.norm1[..]),
            ("wq", self.wq.data()),
            ("wk", self.wk.data()),
            ("wv", self.wv.data()),
            ("wo", self.wo.data()),
            ("norm2", &self.norm2[..]),
            ("w1", self.w1.data()),
            ("w2", self.w2.data()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("norm1", &mut self.norm1[..]),
            ("wq", self.wq.data_mut()),
            ("wk", self.wk.data_mut()),
            ("wv", self.wv.data_mut()),
            ("wo", self.wo.data_mut()),
            ("norm2", &mut self.norm2[..]),
            ("w1", self.w1.data_mut()),
            ("w2", self.w2.data_mut()),
        ]
    }

    fn mlp(&self, x2: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>, Matrix, Matrix, Matrix)> {
        let (h2, normed2, inv2) = rms_norm(x2, &self.norm2);
        let pre_act = h2.matmul(&self.w1)?;
        let act = Matrix::from_fn(pre_act.rows(), pre_act.cols(), |r, c| silu(pre_act.get(r, c)));
        let out = x2.add(&act.matmul(&self.w2)?)?;
        Ok((out, normed2, inv2, h2, pre_act, act))
    }

    /// Full forward over `x` under `mask`, retaining activations.
    pub fn forward(&self, x: &Matrix, mask: &AttentionMask) -> Result<(Matrix, BlockTrace)> {
        if mask.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "Block::forward mask",
                left: x.shape(),
                right: (mask.len(), mask.len()),
            });
        }
        let (h1, normed1, inv1) = rms_norm(x, &self.norm1);
        let q = h1.matmul(&self.wq)?;
        let k = h1.matmul(&self.wk)?;
        let v = h1.matmul(&self.wv)?;
        let mut ctx = Matrix::zeros(x.rows(), x.cols());
        let mut weights = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let mut w = Vec::new();
            attend_row(
                q.row(i),
                &k,
                &v,
                mask.visible(i),
                self.n_heads,
                ctx.row_mut(i),
                Some(&mut w),
            );
            weights.push(w);
        }
        let x2 = x.add(&ctx.matmul(&self.wo)?)?;
        let (out, normed2, inv2, h2, pre_act, act) = self.mlp(&x2)?;
        let trace = BlockTrace {
            mask: mask.clone(),
            normed1,
            inv1,
            h1,
            q,
            k,
            v,
            weights,
            ctx,
            normed2,
            inv2,
            h2,
            pre_act,
            act,
        };
        Ok((out, trace))
    }

    /// Forward for rows appended after the cached prefix. Row `i` of `x_new`
    /// attends to every cached row and to new rows `0..=i`.
    pub fn forward_cached(&self, x_new: &Matrix, kv: &mut LayerKv) -> Result<Matrix> {
        let (h1, _, _) = rms_norm(x_new, &self.norm1);
        let q = h1.matmul(&self.wq)?;
        let k = h1.matmul(&self.wk)?;
        let v = h1.matmul(&self.wv)?;
        let base = kv.len();
        for r in 0..x_new.rows() {
            kv.keys.push_row(k.row(r))?;
            kv.values.push_row(v.row(r))?;
        }
        let mut ctx = Matrix::zeros(x_new.rows(), x_new.cols());
        let mut visible: Vec<usize> = (0..base).collect();
        for i in 0..x_new.rows() {
            visible.push(base + i);
            attend_row(
                q.row(i),
                &kv.keys,
                &kv.values,
                &visible,
                self.n_heads,
                ctx.row_mut(i),
                None,
            );
        }
        let x2 = x_new.add(&ctx.matmul(&self.wo)?)?;
        Ok(self.mlp(&x2)?.0)
    }

    /// Backward through [`Block::forward`]: returns `(dx, parameter grads)`.
    pub fn backward(&self, trace: &BlockTrace, dout: &Matrix) -> Result<(Matrix, Block)> {
        let n_heads = self.n_heads;
        let d = self.d_model();
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut grads = self.zeros_like();

        // MLP branch.
        grads.w2 = trace.act.t_matmul(dout)?;
        let dact = dout.matmul_t(&self.w2)?;
        let dpre = Matrix::from_fn(dact.rows(), dact.cols(), |r, c| {
            dact.get(r, c) * silu_grad(trace.pre_act.get(r, c))
        });
        grads.w1 = trace.h2.t_matmul(&dpre)?;
        let dh2 = dpre.matmul_t(&self.w1)?;
        let (dx2_norm, dg2) = rms_norm_backward(&dh2, &trace.normed2, &trace.inv2, &self.norm2);
        grads.norm2 = dg2;
        let dx2 = dout.add(&dx2_norm)?;

        // Attention branch.
        grads.wo = trace.ctx.t_matmul(&dx2)?;
        let dctx = dx2.matmul_t(&self.wo)?;
        let rows = dout.rows();
        let mut dq = Matrix::zeros(rows, d);
        let mut dk = Matrix::zeros(rows, d);
        let mut dv = Matrix::zeros(rows, d);
        for i in 0..rows {
            let visible = trace.mask.visible(i);
            let w_all = &trace.weights[i];
            for h in 0..n_heads {
                let cols = h * dh..(h + 1) * dh;
                let w = &w_all[h * visible.len()..(h + 1) * visible.len()];
                let dci = &dctx.row(i)[cols.clone()];
                // dL/dweight_j = dctx_i · v_j
                let dw: Vec<f64> = visible
                    .iter()
                    .map(|&j| dot(dci, &trace.v.row(j)[cols.clone()]))
                    .collect();
                let inner: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                for (idx, &j) in visible.iter().enumerate() {
                    let ds = w[idx] * (dw[idx] - inner) * scale;
                    {
                        let dvj = &mut dv.row_mut(j)[cols.clone()];
                        for (o, g) in dvj.iter_mut().zip(dci) {
                            *o += w[idx] * g;
                        }
                    }
                    if ds != 0.0 {
                        let kj = trace.k.row(j)[cols.clone()].to_vec();
                        let qi = trace.q.row(i)[cols.clone()].to_vec();
                        for (o, kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&kj) {
                            *o += ds * kv;
                        }
                        for (o, qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&qi) {
                            *o += ds * qv;
                        }
                    }
                }
            }
        }
        grads.wq = trace.h1.t_matmul(&dq)?;
        grads.wk = trace.h1.t_matmul(&dk)?;
        grads.wv = trace.h1.t_matmul(&dv)?;
        let mut dh1 = dq.matmul_t(&self.wq)?;
        dh1.add_assign(&dk.matmul_t(&self.wk)?)?;
        dh1.add_assign(&dv.matmul_t(&self.wv)?)?;
        let (dx1_norm, dg1) = rms_norm_backward(&dh1, &trace.normed1, &trace.inv1, &self.norm1);
        grads.norm1 = dg1;
        let dx = dx2.add(&dx1_norm)?;
        Ok((dx, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;

    fn block(seed: u64) -> Block {
        let mut rng = SeededRng::new(seed);
        let mut b = Block::init(8, 16, 2, 1.0, &mut rng).unwrap();
        for g in b.norm1.iter_mut().chain(b.norm2.iter_mut()) {
            *g = 1.0 + rng.normal(0.0, 0.2);
        }
        b
    }

    fn input(rows: usize, seed: u64) -> Matrix {
        let mut rng = SeededRng::new(seed);
        Matrix::from_fn(rows, 8, |_, _| rng.normal(0.0, 1.0))
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = SeededRng::new(0);
        assert!(Block::init(6, 8, 4, 1.0, &mut rng).is_err());
    }

    #[test]
    fn cached_matches_masked_bit_for_bit() {
        let b = block(1);
        let x = input(6, 2);
        let (full, _) = b.forward(&x, &AttentionMask::causal(6)).unwrap();
        let mut kv = LayerKv::new(8);
        let first = b.forward_cached(&x.slice_rows(0, 4), &mut kv).unwrap();
        let rest = b.forward_cached(&x.slice_rows(4, 6), &mut kv).unwrap();
        assert_eq!(first.vstack(&rest).unwrap(), full);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let b = block(3);
        let x = input(5, 4);
        let mask = AttentionMask::from_lists(vec![
            vec![0],
            vec![0, 1],
            vec![0, 2],
            vec![0, 1, 2, 3],
            vec![1, 4],
        ])
        .unwrap();
        let seed_out = input(5, 5);
        let loss = |blk: &Block, x: &Matrix| -> f64 {
            let (y, _) = blk.forward(x, &mask).unwrap();
            y.data().iter().zip(seed_out.data()).map(|(a, b)| a * b).sum()
        };
        let (_, trace) = b.forward(&x, &mask).unwrap();
        let (dx, grads) = b.backward(&trace, &seed_out).unwrap();

        let fd_x = finite_diff_grad(
            |v| loss(&b, &Matrix::new(5, 8, v.to_vec()).unwrap()),
            x.data(),
            1e-5,
        )
        .unwrap();
        for (a, n) in dx.data().iter().zip(&fd_x) {
            assert!((a - n).abs() < 1e-7 * (1.0 + n.abs()), "dx {a} vs {n}");
        }

        let names: Vec<&str> = b.tensors().iter().map(|(n, _)| *n).collect();
        for (t, name) in names.iter().enumerate() {
            let base: Vec<f64> = b.tensors()[t].1.to_vec();
            let fd = finite_diff_grad(
                |v| {
                    let mut probe = b.clone();
                    probe.tensors_mut()[t].1.copy_from_slice(v);
                    loss(&probe, &x)
                },
                &base,
                1e-5,
            )
            .unwrap();
            let analytic = grads.tensors()[t].1;
            for (a, n) in analytic.iter().zip(&fd) {
                assert!((a - n).abs() < 1e-7 * (1.0 + n.abs()), "{name}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn positions_are_bounded() {
        for p in [0, 1, 17, 511] {
            assert!(sinusoidal(p, 8).iter().all(|v| v.abs() <= 1.0));
        }
        assert_eq!(sinusoidal(0, 4), vec![0.0, 1.0, 0.0, 1.0]);
    }
}
