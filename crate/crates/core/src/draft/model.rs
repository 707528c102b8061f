use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DraftConfig;
use crate::error::{Error, Result};
use crate::layers::{add_positions, Block, LayerKv};
use crate::numerics::{sample_categorical, softmax, softmax_rows, Matrix, ProbVector, SeededRng};
use crate::streams;
use crate::target::{MultimodalPrompt, TargetModel, TokenId};

/// `softmax(Q·F_Vᵀ / temperature)`, one row of pooling weights per query.
pub fn compression_weights(queries: &Matrix, f_v: &Matrix, temperature: f64) -> Result<Matrix> {
    if f_v.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if queries.cols() != f_v.cols() {
        return Err(Error::ShapeMismatch {
            op: "compression_weights",
            left: queries.shape(),
            right: f_v.shape(),
        });
    }
    if queries.rows() == 0 {
        return Ok(Matrix::zeros(0, f_v.rows()));
    }
    softmax_rows(&queries.matmul_t(f_v)?, temperature)
}

/// Pools `N` visual feature rows into `queries.rows()` rows.
pub fn compress_visual(queries: &Matrix, f_v: &Matrix, temperature: f64) -> Result<Matrix> {
    compression_weights(queries, f_v, temperature)?.matmul(f_v)
}

/// `[features ‖ next_embeddings]·W + b`, row by row.
pub fn fuse_textual(
    weight: &Matrix,
    bias: &[f64],
    features: &Matrix,
    next_embeddings: &Matrix,
) -> Result<Matrix> {
    let mut out = features.hstack(next_embeddings)?.matmul(weight)?;
    out.add_row_broadcast(bias)?;
    Ok(out)
}

/// Trainable draft tensors. The same shape doubles as a gradient buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DraftParams {
    /// `C × d` pooling queries.
    pub queries: Matrix,
    /// `2d × d` fusion weight.
    pub fuse_w: Matrix,
    pub fuse_b: Vec<f64>,
    /// `K × d`; row `j` stands in for the `j`-th drafted position.
    pub placeholders: Matrix,
    pub blocks: Vec<Block>,
}

impl DraftParams {
    pub fn init(cfg: &DraftConfig) -> Result<Self> {
        let mut rng = SeededRng::with_stream(cfg.rng_seed, streams::DRAFT_INIT);
        let d = cfg.d_model;
        let sd = 1.0 / (d as f64).sqrt();
        let queries = Matrix::from_fn(cfg.compressed_tokens, d, |_, _| rng.normal(0.0, sd));
        let fuse_w = Matrix::from_fn(2 * d, d, |_, _| rng.normal(0.0, 1.0 / (2.0 * d as f64).sqrt()));
        let placeholders = Matrix::from_fn(cfg.draft_len, d, |_, _| rng.normal(0.0, 1.0));
        let residual = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let blocks = (0..cfg.n_layers)
            .map(|_| Block::init(d, cfg.d_ff, cfg.n_heads, residual, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            queries,
            fuse_w,
            fuse_b: vec![0.0; d],
            placeholders,
            blocks,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            queries: z(&self.queries),
            fuse_w: z(&self.fuse_w),
            fuse_b: vec![0.0; self.fuse_b.len()],
            placeholders: z(&self.placeholders),
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("queries".into(), self.queries.data()),
            ("fuse_w".into(), self.fuse_w.data()),
            ("fuse_b".into(), &self.fuse_b[..]),
            ("placeholders".into(), self.placeholders.data()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("queries".into(), self.queries.data_mut()),
            ("fuse_w".into(), self.fuse_w.data_mut()),
            ("fuse_b".into(), &mut self.fuse_b[..]),
            ("placeholders".into(), self.placeholders.data_mut()),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in b.tensors_mut() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                op: "assign_flat",
                left: (values.len(), 1),
                right: (self.num_params(), 1),
            });
        }
        let mut at = 0;
        for (_, t) in self.tensors_mut() {
            t.copy_from_slice(&values[at..at + t.len()]);
            at += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// The draft network: config plus trainable tensors. Token embeddings and
/// the LM head are borrowed from the target at call time.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftModel {
    cfg: DraftConfig,
    params: DraftParams,
}

/// Draft-side state carried across rounds of one decode.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftSession {
    visual_rows: usize,
    text_rows: usize,
    layers: Vec<LayerKv>,
}

impl DraftSession {
    /// Rows held in the draft cache: visual block plus committed text rows.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visual_rows(&self) -> usize {
        self.visual_rows
    }

    pub fn text_rows(&self) -> usize {
        self.text_rows
    }

    fn truncate(&mut self, len: usize) {
        for l in &mut self.layers {
            l.truncate(len);
        }
    }
}

/// What the draft sees of the decode at the start of a round.
#[derive(Clone, Copy, Debug)]
pub struct DraftContext<'a> {
    pub prompt: &'a MultimodalPrompt,
    /// Target features of every committed position, `m × d`.
    pub features: &'a Matrix,
    /// Tokens at positions `N..=m`; the last is the pending token.
    pub text_tokens: &'a [TokenId],
}

impl DraftContext<'_> {
    /// `N`.
    pub fn visual_len(&self) -> usize {
        self.prompt.visual_len()
    }

    /// `m`, the number of committed positions.
    pub fn committed(&self) -> usize {
        self.features.rows()
    }

    fn check(&self) -> Result<()> {
        let m = self.committed();
        if m <= self.visual_len() || self.text_tokens.len() != m - self.visual_len() + 1 {
            return Err(Error::ShapeMismatch {
                op: "draft context tokens",
                left: (self.text_tokens.len(), 1),
                right: ((m + 1).saturating_sub(self.visual_len()), 1),
            });
        }
        Ok(())
    }
}

/// One round of drafting.
#[derive(Clone, Debug)]
pub struct DraftProposal {
    /// `T'_1..T'_K`.
    pub tokens: Vec<TokenId>,
    /// `P'_1..P'_K` at the decode temperature.
    pub dists: Vec<ProbVector>,
    /// Predicted features `F'`, `K × d`.
    pub features: Matrix,
    pub forward_passes: usize,
    pub flops: u64,
    /// Rows visible to the last placeholder of the round.
    pub sequence_len: usize,
}

impl DraftModel {
    pub fn new(cfg: DraftConfig, target: &TargetModel) -> Result<Self> {
        cfg.validate(target.config())?;
        let params = DraftParams::init(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: DraftConfig, params: DraftParams, target: &TargetModel) -> Result<Self> {
        cfg.validate(target.config())?;
        let d = cfg.d_model;
        let ok = params.queries.shape() == (cfg.compressed_tokens, d)
            && params.fuse_w.shape() == (2 * d, d)
            && params.fuse_b.len() == d
            && params.placeholders.shape() == (cfg.draft_len, d)
            && params.blocks.len() == cfg.n_layers
            && params
                .blocks
                .iter()
                .all(|b| b.d_model() == d && b.d_ff() == cfg.d_ff && b.n_heads == cfg.n_heads);
        if !ok {
            return Err(Error::Format("draft tensors do not match config".into()));
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &DraftConfig {
        &self.cfg
    }

    pub fn params(&self) -> &DraftParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DraftParams {
        &mut self.params
    }

    pub fn weights_checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in self.params.tensors() {
            for x in t {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Visual rows fed to the head: pooled, raw, or none.
    pub fn visual_block(&self, f_v: &Matrix) -> Result<Matrix> {
        if f_v.rows() == 0 {
            return Ok(Matrix::zeros(0, self.cfg.d_model));
        }
        if !self.cfg.compress {
            return Ok(f_v.clone());
        }
        compress_visual(&self.params.queries, f_v, self.cfg.compress_temperature)
    }

    /// Fused rows `FC([F_p ‖ E(next_p)])`.
    pub fn fuse(&self, target: &TargetModel, features: &Matrix, next: &[TokenId]) -> Result<Matrix> {
        let emb = target.embed_tokens(next)?;
        fuse_textual(&self.params.fuse_w, &self.params.fuse_b, features, &emb)
    }

    fn run_cached(&self, x: &Matrix, first_pos: usize, layers: &mut [LayerKv]) -> Result<Matrix> {
        let positions: Vec<usize> = (first_pos..first_pos + x.rows()).collect();
        let mut x = x.clone();
        add_positions(&mut x, &positions);
        for (b, kv) in self.params.blocks.iter().zip(layers.iter_mut()) {
            x = b.forward_cached(&x, kv)?;
        }
        Ok(x)
    }

    /// Starts a decode: runs the visual block through the head and caches it.
    pub fn begin(&self, ctx: &DraftContext) -> Result<DraftSession> {
        ctx.check()?;
        let visual = self.visual_block(&ctx.features.slice_rows(0, ctx.visual_len()))?;
        let mut session = DraftSession {
            visual_rows: visual.rows(),
            text_rows: 0,
            layers: (0..self.cfg.n_layers)
                .map(|_| LayerKv::new(self.cfg.d_model))
                .collect(),
        };
        if visual.rows() > 0 {
            self.run_cached(&visual, 0, &mut session.layers)?;
        }
        Ok(session)
    }

    /// Fuses committed rows the session has not cached yet. Returns them with
    /// the draft position of the first; the session's row count is advanced
    /// but the rows themselves enter the cache on the next pass.
    fn sync(
        &self,
        target: &TargetModel,
        session: &mut DraftSession,
        ctx: &DraftContext,
    ) -> Result<(Matrix, usize)> {
        ctx.check()?;
        let n = ctx.visual_len();
        let m = ctx.committed();
        let text_len = m - n;
        if session.text_rows > text_len {
            session.text_rows = text_len;
            session.truncate(session.visual_rows + text_len);
        }
        let first_new = session.text_rows;
        let rows = self.fuse(
            target,
            &ctx.features.slice_rows(n + first_new, m),
            &ctx.text_tokens[first_new + 1..],
        )?;
        session.text_rows = text_len;
        Ok((rows, session.visual_rows + first_new))
    }

    /// Features of placeholder rows `slots` placed directly after the
    /// committed context, with nothing fed back between them. The
    /// placeholders are dropped from the session afterwards.
    pub fn placeholder_features(
        &self,
        target: &TargetModel,
        session: &mut DraftSession,
        ctx: &DraftContext,
        slots: Range<usize>,
    ) -> Result<Matrix> {
        if slots.is_empty() || slots.end > self.cfg.draft_len {
            return Err(Error::InvalidConfig(format!(
                "placeholder slots {slots:?} outside 0..{}",
                self.cfg.draft_len
            )));
        }
        let (pending, pos) = self.sync(target, session, ctx)?;
        let x = pending.vstack(&self.params.placeholders.slice_rows(slots.start, slots.end))?;
        let out = self.run_cached(&x, pos, &mut session.layers)?;
        session.truncate(pos + pending.rows());
        Ok(out.slice_rows(pending.rows(), out.rows()))
    }

    /// Drafts `K` tokens in `K / k'` passes.
    pub fn propose(
        &self,
        target: &TargetModel,
        session: &mut DraftSession,
        ctx: &DraftContext,
        temperature: f64,
        rng: &mut SeededRng,
    ) -> Result<DraftProposal> {
        let (mut pending, mut pending_pos) = self.sync(target, session, ctx)?;
        let head = target.lm_head();
        let vocab = head.vocab_size();
        let kp = self.cfg.group_size;
        let k = self.cfg.draft_len;
        let base = session.visual_rows + (ctx.committed() - ctx.visual_len());

        let mut tokens = Vec::with_capacity(k);
        let mut dists = Vec::with_capacity(k);
        let mut features = Matrix::zeros(0, self.cfg.d_model);
        let mut flops = 0;
        let mut passes = 0;
        let mut sequence_len = 0;
        for g in 0..self.cfg.passes_per_round() {
            let slots = g * kp..(g + 1) * kp;
            let x = pending.vstack(&self.params.placeholders.slice_rows(slots.start, slots.end))?;
            let prefix = session.len();
            flops += self.cfg.pass_flops(vocab, prefix, pending.rows(), kp);
            let out = self.run_cached(&x, pending_pos, &mut session.layers)?;
            passes += 1;
            sequence_len = session.len();
            session.truncate(prefix + pending.rows());

            let f_group = out.slice_rows(pending.rows(), out.rows());
            let logits = head.logits(&f_group)?;
            let mut group_tokens = Vec::with_capacity(kp);
            for r in 0..kp {
                let p = softmax(logits.row(r), temperature)?;
                let t = sample_categorical(&p, rng)?;
                group_tokens.push(t);
                tokens.push(t);
                dists.push(p);
            }
            features = features.vstack(&f_group)?;
            if g + 1 < self.cfg.passes_per_round() {
                pending = self.fuse(target, &f_group, &group_tokens)?;
                pending_pos = base + slots.start;
            }
        }
        session.truncate(base);
        Ok(DraftProposal {
            tokens,
            dists,
            features,
            forward_passes: passes,
            flops,
            sequence_len,
        })
    }
}
