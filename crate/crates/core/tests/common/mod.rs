//! Plain-loop reference implementations used as test oracles. Nothing here
//! calls into the library's forward code; only the weights are shared.

#![allow(dead_code)]

use mmspec::draft::DraftModel;
use mmspec::layers::Block;
use mmspec::numerics::{Matrix, SeededRng};
use mmspec::target::{MultimodalPrompt, TargetConfig, TargetModel, TokenId};

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn matvec(x: &[f64], w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, xi) in x.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += xi * w.get(i, j);
        }
    }
    out
}

fn rmsnorm(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(g).map(|(v, g)| v * s * g).collect()
}

fn position_code(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| {
            let freq = 10_000f64.powf(-((c - c % 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            if c % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

pub fn naive_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// One causal block over all rows.
pub fn naive_block(b: &Block, x: &Rows) -> Rows {
    let d = b.norm1.len();
    let heads = b.n_heads;
    let dh = d / heads;
    let h: Rows = x.iter().map(|r| rmsnorm(r, &b.norm1)).collect();
    let q: Rows = h.iter().map(|r| matvec(r, &b.wq)).collect();
    let k: Rows = h.iter().map(|r| matvec(r, &b.wk)).collect();
    let v: Rows = h.iter().map(|r| matvec(r, &b.wv)).collect();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut ctx = vec![0.0; d];
        for hd in 0..heads {
            let lo = hd * dh;
            let scores: Vec<f64> = (0..=i)
                .map(|j| (lo..lo + dh).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = naive_softmax(&scores);
            for (j, wj) in w.iter().enumerate() {
                for c in lo..lo + dh {
                    ctx[c] += wj * v[j][c];
                }
            }
        }
        let attn = matvec(&ctx, &b.wo);
        let x2: Vec<f64> = x[i].iter().zip(&attn).map(|(a, b)| a + b).collect();
        let pre = matvec(&rmsnorm(&x2, &b.norm2), &b.w1);
        let act: Vec<f64> = pre.iter().map(|z| z / (1.0 + (-z).exp())).collect();
        let mlp = matvec(&act, &b.w2);
        out.push(x2.iter().zip(&mlp).map(|(a, b)| a + b).collect());
    }
    out
}

fn stack(blocks: &[Block], mut x: Rows) -> Rows {
    let d = x.first().map_or(0, |r| r.len());
    for (p, row) in x.iter_mut().enumerate() {
        for (v, pe) in row.iter_mut().zip(position_code(p, d)) {
            *v += pe;
        }
    }
    for b in blocks {
        x = naive_block(b, &x);
    }
    x
}

/// Logits of the frozen head for one feature row.
pub fn naive_logits(t: &TargetModel, f: &[f64]) -> Vec<f64> {
    let h = rmsnorm(f, t.final_norm());
    matvec(&h, t.unembedding())
        .into_iter()
        .map(|z| z * t.config().logit_scale)
        .collect()
}

/// Full uncached forward over the prompt followed by `extra` tokens.
/// Returns per-position features and logits.
pub fn naive_target(t: &TargetModel, prompt: &MultimodalPrompt, extra: &[TokenId]) -> (Rows, Rows) {
    let mut x: Rows = (0..prompt.visual_len())
        .map(|r| matvec(prompt.patches.row(r), t.patch_projection()))
        .collect();
    for &tok in prompt.text_tokens.iter().chain(extra) {
        x.push(t.embedding().row(tok).to_vec());
    }
    let f = stack(t.blocks(), x);
    let logits = f.iter().map(|r| naive_logits(t, r)).collect();
    (f, logits)
}

pub fn naive_dist(logits: &[f64], tau: f64) -> Vec<f64> {
    if tau == 0.0 {
        let mut best = 0;
        for (i, v) in logits.iter().enumerate() {
            if *v > logits[best] {
                best = i;
            }
        }
        let mut p = vec![0.0; logits.len()];
        p[best] = 1.0;
        return p;
    }
    naive_softmax(&logits.iter().map(|z| z / tau).collect::<Vec<_>>())
}

fn fuse_row(d: &DraftModel, t: &TargetModel, f: &[f64], next: TokenId) -> Vec<f64> {
    let mut cat = f.to_vec();
    cat.extend_from_slice(t.embedding().row(next));
    matvec(&cat, &d.params().fuse_w)
        .iter()
        .zip(&d.params().fuse_b)
        .map(|(a, b)| a + b)
        .collect()
}

/// Pooled visual rows `softmax(Q·F_Vᵀ/τc)·F_V`.
pub fn naive_compress(queries: &Matrix, f_v: &Rows, tau_c: f64) -> Rows {
    (0..queries.rows())
        .map(|c| {
            let s: Vec<f64> = f_v
                .iter()
                .map(|fv| fv.iter().zip(queries.row(c)).map(|(a, b)| a * b).sum::<f64>() / tau_c)
                .collect();
            let w = naive_softmax(&s);
            let mut out = vec![0.0; f_v[0].len()];
            for (wj, fv) in w.iter().zip(f_v) {
                for (o, v) in out.iter_mut().zip(fv) {
                    *o += wj * v;
                }
            }
            out
        })
        .collect()
}

/// Drafts one token at a time: every step recomputes the whole head input
/// from scratch, with the previous drafted tokens fused back in. `tokens`
/// are the tokens the draft actually chose, so sampled runs can be replayed.
/// Returns the draft law at each step.
pub fn sequential_draft_oracle(
    d: &DraftModel,
    t: &TargetModel,
    features: &Rows,
    n: usize,
    text: &[TokenId],
    tokens: &[TokenId],
    tau: f64,
) -> Vec<Vec<f64>> {
    let cfg = d.config();
    let mut rows: Rows = if n == 0 {
        vec![]
    } else if !cfg.compress {
        features[..n].to_vec()
    } else {
        naive_compress(&d.params().queries, &features[..n].to_vec(), cfg.compress_temperature)
    };
    for p in n..features.len() {
        rows.push(fuse_row(d, t, &features[p], text[p - n + 1]));
    }
    let mut laws = Vec::new();
    for (j, &tok) in tokens.iter().enumerate() {
        let mut x = rows.clone();
        x.push(d.params().placeholders.row(j).to_vec());
        let out = stack(&d.params().blocks, x);
        let f = out.last().unwrap().clone();
        laws.push(naive_dist(&naive_logits(t, &f), tau));
        rows.push(fuse_row(d, t, &f, tok));
    }
    laws
}

pub fn tiny_target(vocab: usize, d: usize, seed: u64) -> TargetModel {
    TargetModel::new(TargetConfig {
        vocab_size: vocab,
        d_model: d,
        n_heads: 2,
        n_layers: 2,
        d_ff: 2 * d,
        d_patch: 4,
        max_seq: 96,
        logit_scale: 3.0,
        rng_seed: seed,
    })
    .unwrap()
}

pub fn random_prompt(n: usize, text: usize, vocab: usize, d_patch: usize, seed: u64) -> MultimodalPrompt {
    let mut rng = SeededRng::new(seed);
    let patches = Matrix::from_fn(n, d_patch, |_, _| rng.normal(0.0, 1.0));
    let toks = (0..text).map(|_| rng.below(vocab)).collect();
    MultimodalPrompt::new(patches, toks)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
