//! One forward/backward over a batch of windows from the same trace.
//!
//! Windows of one trace share their visual and text rows, so the packed
//! sequence holds those rows once, causally masked, followed by every
//! placeholder group of every window. A group sees the visual block, the
//! text rows committed before it, and the earlier placeholders of its own
//! group. The loss is a sum over windows and no window can see another's
//! placeholders, so the packed gradient equals the sum of per-window ones.

use super::{TrainTrace, WindowLoss};
use crate::draft::{compression_weights, DraftModel, DraftParams};
use crate::error::{Error, Result};
use crate::layers::{add_positions, AttentionMask};
use crate::numerics::{cross_entropy, dot, huber_grad, smooth_l1_slices, softmax, Matrix};
use crate::target::TargetModel;

/// Loss and gradient of the window at offset `s`.
pub fn window_gradient(
    draft: &DraftModel,
    target: &TargetModel,
    trace: &TrainTrace,
    s: usize,
    alpha: f64,
) -> Result<(WindowLoss, DraftParams)> {
    let (losses, grads) = packed_gradient(draft, target, trace, &[s], alpha, 1.0)?;
    Ok((losses[0], grads))
}

/// Losses of `windows` (offsets into the trace's generated tokens) and the
/// gradient of `scale · Σ_w L_w`.
pub fn packed_gradient(
    draft: &DraftModel,
    target: &TargetModel,
    trace: &TrainTrace,
    windows: &[usize],
    alpha: f64,
    scale: f64,
) -> Result<(Vec<WindowLoss>, DraftParams)> {
    let cfg = draft.config();
    let params = draft.params();
    let (k, kp, d) = (cfg.draft_len, cfg.group_size, cfg.d_model);
    let n = trace.prompt.visual_len();
    let m0 = trace.prompt.len();
    let generated = trace.target_tokens.len();
    if windows.is_empty() {
        return Err(Error::EmptyInput);
    }
    for &s in windows {
        if s + k > generated {
            return Err(Error::WindowOverflow {
                position: s,
                draft_len: k,
                len: generated,
            });
        }
    }
    let feats = &trace.target_features;
    let tokens = trace.text_tokens();

    let f_v = feats.slice_rows(0, n);
    let (visual, pool) = if n == 0 {
        (Matrix::zeros(0, d), None)
    } else if !cfg.compress {
        (f_v.clone(), None)
    } else {
        let w = compression_weights(&params.queries, &f_v, cfg.compress_temperature)?;
        (w.matmul(&f_v)?, Some(w))
    };
    let cv = visual.rows();

    let text_end = windows.iter().map(|&s| m0 + s + k - kp).max().unwrap_or(m0);
    let fuse_in = feats
        .slice_rows(n, text_end)
        .hstack(&target.embed_tokens(&tokens[1..=text_end - n])?)?;
    let mut text = fuse_in.matmul(&params.fuse_w)?;
    text.add_row_broadcast(&params.fuse_b)?;

    let mut x = visual.vstack(&text)?;
    let shared = x.rows();
    let mut positions: Vec<usize> = (0..shared).collect();
    let mut visible: Vec<Vec<usize>> = (0..shared).map(|i| (0..=i).collect()).collect();
    // (window index, slot) per placeholder row.
    let mut slots = Vec::new();
    for (wi, &s) in windows.iter().enumerate() {
        let m = m0 + s;
        for g in 0..k / kp {
            let committed = cv + (m + g * kp - n);
            let group_start = x.rows();
            for r in 0..kp {
                let slot = g * kp + r;
                x.push_row(params.placeholders.row(slot))?;
                positions.push(cv + (m - n) + slot);
                visible.push((0..committed).chain(group_start..=group_start + r).collect());
                slots.push((wi, slot));
            }
        }
    }
    let mask = AttentionMask::from_lists(visible)?;
    add_positions(&mut x, &positions);

    let mut traces = Vec::with_capacity(params.blocks.len());
    let mut h = x;
    for b in &params.blocks {
        let (out, tr) = b.forward(&h, &mask)?;
        traces.push(tr);
        h = out;
    }

    let head = target.lm_head();
    let f_pred = h.slice_rows(shared, h.rows());
    let logits = head.logits(&f_pred)?;
    let mut losses = vec![WindowLoss::default(); windows.len()];
    let mut d_feat = Matrix::zeros(f_pred.rows(), d);
    let mut d_logits = Matrix::zeros(f_pred.rows(), logits.cols());
    for (r, &(wi, slot)) in slots.iter().enumerate() {
        let pos = m0 + windows[wi] + slot;
        let f_true = feats.row(pos);
        let p_true = &trace.target_dists[pos];
        let p_pred = softmax(logits.row(r), 1.0)?;
        let reg = smooth_l1_slices(f_pred.row(r), f_true)?;
        let cls = cross_entropy(&p_pred, p_true)?;
        let l = &mut losses[wi];
        l.reg += reg;
        l.cls += cls;
        for (c, (a, b)) in f_pred.row(r).iter().zip(f_true).enumerate() {
            d_feat.set(r, c, scale * huber_grad(a - b) / d as f64);
        }
        for (c, (a, b)) in p_pred.probs().iter().zip(p_true.probs()).enumerate() {
            d_logits.set(r, c, scale * alpha * (a - b));
        }
    }
    for l in &mut losses {
        l.total = l.reg + alpha * l.cls;
    }
    d_feat.add_assign(&head.backward(&f_pred, &d_logits)?)?;

    let mut grads = params.zeros_like();
    let mut dout = Matrix::zeros(shared, d);
    for r in 0..d_feat.rows() {
        dout.push_row(d_feat.row(r))?;
    }
    for (i, b) in params.blocks.iter().enumerate().rev() {
        let (dx, g) = b.backward(&traces[i], &dout)?;
        grads.blocks[i] = g;
        dout = dx;
    }

    for (r, &(_, slot)) in slots.iter().enumerate() {
        for (g, v) in grads.placeholders.row_mut(slot).iter_mut().zip(dout.row(shared + r)) {
            *g += v;
        }
    }
    let d_text = dout.slice_rows(cv, shared);
    grads.fuse_w = fuse_in.t_matmul(&d_text)?;
    grads.fuse_b = d_text.column_sums();
    if let Some(w) = pool {
        // out = W·F_V, W = softmax(Q·F_Vᵀ / t) row-wise.
        let d_vis = dout.slice_rows(0, cv);
        let dw = d_vis.matmul_t(&f_v)?;
        let t = cfg.compress_temperature;
        let inner: Vec<f64> = (0..w.rows()).map(|i| dot(w.row(i), dw.row(i))).collect();
        let ds = Matrix::from_fn(w.rows(), w.cols(), |i, j| {
            w.get(i, j) * (dw.get(i, j) - inner[i]) / t
        });
        grads.queries = ds.matmul(&f_v)?;
    }
    Ok((losses, grads))
}
