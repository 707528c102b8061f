//! The draft network.
//!
//! The draft consumes the target's features rather than raw inputs:
//!
//! 1. visual features `F_V` (`N` rows) are pooled into `C` rows by learned
//!    queries, `softmax(Q·F_Vᵀ)·F_V`;
//! 2. each committed text position `p` becomes one row
//!    `FC([F_p ‖ E(token_{p+1})])`, pairing a feature with the embedding of
//!    the token that follows it (the last pairs with the pending token);
//! 3. a small transformer head reads `[pooled visual ‖ fused text]` followed by
//!    learned placeholder rows, one per future offset, and emits predicted
//!    features `F'` at the placeholders. The target's frozen LM head turns
//!    `F'` into draft distributions.
//!
//! The `K` drafted positions are produced in groups of `k'` per forward pass.
//! After each group the sampled tokens are fed back as fused rows
//! `FC([F'_j ‖ E(T'_j)])` at the positions their placeholders occupied.
//! `k' = K` drafts everything in one pass; `k' = 1` is plain autoregressive
//! drafting. Placeholders attend causally to everything before them,
//! including earlier placeholders of their own group.

mod model;

pub use model::{
    compress_visual, compression_weights, fuse_textual, DraftContext, DraftModel, DraftParams,
    DraftProposal, DraftSession,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::{block_flops, head_flops};
use crate::target::TargetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DraftConfig {
    /// `C`, pooled visual rows. `0` drops the visual input.
    pub compressed_tokens: usize,
    /// When false the head reads all `N` visual feature rows unpooled.
    pub compress: bool,
    /// `K`, tokens drafted per round.
    pub draft_len: usize,
    /// `k'`, tokens drafted per forward pass.
    pub group_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Softmax temperature of the visual pooling scores.
    pub compress_temperature: f64,
    pub rng_seed: u64,
}

impl Default for DraftConfig {
    fn default() -> Self {
        Self {
            compressed_tokens: 2,
            compress: true,
            draft_len: 4,
            group_size: 4,
            d_model: 32,
            n_heads: 4,
            n_layers: 1,
            d_ff: 64,
            compress_temperature: 1.0,
            rng_seed: 0,
        }
    }
}

impl DraftConfig {
    /// Draft shaped to sit on `target`, with the given `C`, `K` and `k'`.
    pub fn for_target(target: &TargetConfig, compressed: usize, k: usize, k_prime: usize) -> Self {
        Self {
            compressed_tokens: compressed,
            draft_len: k,
            group_size: k_prime,
            d_model: target.d_model,
            n_heads: target.n_heads,
            d_ff: target.d_ff,
            ..Self::default()
        }
    }

    pub fn validate(&self, target: &TargetConfig) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.draft_len == 0 || self.group_size == 0 || self.group_size > self.draft_len {
            return fail(format!(
                "need 1 <= k' <= K, got k'={} K={}",
                self.group_size, self.draft_len
            ));
        }
        if !self.draft_len.is_multiple_of(self.group_size) {
            return fail(format!(
                "K={} not a multiple of k'={}",
                self.draft_len, self.group_size
            ));
        }
        if self.d_model != target.d_model {
            return fail(format!(
                "draft d_model {} must equal target d_model {}",
                self.d_model, target.d_model
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return fail("draft needs at least one block and d_ff > 0".into());
        }
        if !(self.compress_temperature > 0.0) {
            return fail(format!("compress_temperature {}", self.compress_temperature));
        }
        Ok(())
    }

    /// Forward passes per round, `K / k'`.
    pub fn passes_per_round(&self) -> usize {
        self.draft_len / self.group_size
    }

    /// Rows the head sees for `visual_tokens` visual positions.
    pub fn visual_rows(&self, visual_tokens: usize) -> usize {
        if visual_tokens == 0 {
            0
        } else if self.compress {
            self.compressed_tokens
        } else {
            visual_tokens
        }
    }

    /// FLOPs of one head pass that fuses `fused_rows` new rows and appends
    /// `placeholder_rows` placeholders after `prefix_len` cached rows.
    pub fn pass_flops(
        &self,
        vocab: usize,
        prefix_len: usize,
        fused_rows: usize,
        placeholder_rows: usize,
    ) -> u64 {
        let d = self.d_model as u64;
        let fuse = 2 * (2 * d) * d * fused_rows as u64;
        let blocks = self.n_layers as u64
            * block_flops(self.d_model, self.d_ff, prefix_len, fused_rows + placeholder_rows);
        fuse + blocks + head_flops(self.d_model, vocab, placeholder_rows)
    }

    /// One-time cost of pooling `visual_tokens` rows into `C`.
    pub fn compression_flops(&self, visual_tokens: usize) -> u64 {
        if !self.compress || visual_tokens == 0 {
            return 0;
        }
        4 * (self.compressed_tokens * visual_tokens * self.d_model) as u64
    }
}

/// Analytic draft FLOPs of one steady-state round for a context of
/// `visual_tokens` visual and `text_len` committed text positions, assuming
/// one newly committed row enters the first pass. The visual block is `C`
/// rows with compression and `N` rows without.
pub fn draft_flops(
    cfg: &DraftConfig,
    vocab: usize,
    visual_tokens: usize,
    text_len: usize,
    with_compression: bool,
) -> u64 {
    let visual = if visual_tokens == 0 {
        0
    } else if with_compression {
        cfg.compressed_tokens
    } else {
        visual_tokens
    };
    let kp = cfg.group_size;
    let committed = visual + text_len;
    let mut total = cfg.pass_flops(vocab, committed.saturating_sub(1), 1, kp);
    for g in 1..cfg.passes_per_round() {
        total += cfg.pass_flops(vocab, committed + (g - 1) * kp, kp, kp);
    }
    total
}
