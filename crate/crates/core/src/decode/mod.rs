//! Speculative decoding: the draft proposes `K` tokens, the target scores
//! all of them in one forward pass, and a ratio test accepts a prefix.
//!
//! A decode keeps `m` committed positions in the target cache plus one
//! pending token (sampled but not yet fed). A round verifies
//! `[pending, T'_1..T'_K]`, so the target law for `T'_j` is the one after
//! the `j`-th verified input. The first rejected candidate is replaced by a
//! residual sample; if all `K` pass, a bonus token is drawn from the law
//! after `T'_K`. Either way the round emits `i + 1` tokens and the last of
//! them becomes the new pending token.
//!
//! The accept/residual rule leaves the target law intact at every
//! temperature. At `τ = 0` both laws are one-hot, so the rule reduces to
//! "accept iff the argmaxes agree" and decoding reproduces greedy output.

mod accept;
mod drafter;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use accept::{
    accept_or_reject, acceptance_probability, residual_distribution, residual_sample, RESIDUAL_EPS,
};
pub use drafter::{Drafter, ScriptedDrafter, SelfDrafter};

use crate::draft::DraftContext;
use crate::error::{Error, Result};
use crate::numerics::{sample_categorical, SeededRng};
use crate::streams;
use crate::target::{flops_of_forward, KvCache, MultimodalPrompt, TargetModel, TokenId};

/// Result of verifying one round of candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    /// `i`, accepted candidates.
    pub accepted: usize,
    /// The `i` accepted candidates, then the correction or bonus token.
    pub emitted: Vec<TokenId>,
    /// Acceptance probability of each candidate that was tested.
    pub accept_probs: Vec<f64>,
    /// 1-based index of the rejected candidate.
    pub rejected_at: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    pub outcome: VerificationOutcome,
    pub target_flops: u64,
    pub draft_flops: u64,
    pub draft_passes: usize,
    pub draft_time: Duration,
    pub verify_time: Duration,
}

/// Modeled speed-up `i·M_T / (M_T + (K/k')·M_D)`.
pub fn modeled_speedup(
    tokens_per_round: f64,
    target_pass_cost: f64,
    draft_pass_cost: f64,
    draft_len: usize,
    group_size: usize,
) -> f64 {
    let passes = draft_len as f64 / group_size as f64;
    tokens_per_round * target_pass_cost / (target_pass_cost + passes * draft_pass_cost)
}

/// One prompt being decoded speculatively.
pub struct SpecSession<'a, D: Drafter> {
    target: &'a TargetModel,
    drafter: &'a D,
    prompt: &'a MultimodalPrompt,
    cache: KvCache,
    /// Tokens at positions `N..=m`; the last is pending.
    text: Vec<TokenId>,
    draft_state: D::Session,
    output: Vec<TokenId>,
}

impl<'a, D: Drafter> SpecSession<'a, D> {
    /// Prefills the target, samples the first output token from its law and
    /// sets up the drafter.
    pub fn new(
        target: &'a TargetModel,
        drafter: &'a D,
        prompt: &'a MultimodalPrompt,
        temperature: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let (_, dist, cache) = target.encode_prompt(prompt, temperature)?;
        let first = sample_categorical(&dist, rng)?;
        let mut text = prompt.text_tokens.clone();
        text.push(first);
        let ctx = DraftContext {
            prompt,
            features: cache.features(),
            text_tokens: &text,
        };
        let draft_state = drafter.begin(target, &ctx)?;
        Ok(Self {
            target,
            drafter,
            prompt,
            cache,
            text,
            draft_state,
            output: vec![first],
        })
    }

    /// Tokens generated so far, the pending one included.
    pub fn output(&self) -> &[TokenId] {
        &self.output
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn round(&mut self, temperature: f64, rng: &mut SeededRng) -> Result<RoundReport> {
        let k = self.drafter.draft_len();
        let m = self.cache.len();
        let max = self.target.config().max_seq;
        if m + k + 1 > max {
            return Err(Error::ExceedsMaxSeq {
                len: m + k + 1,
                max,
            });
        }
        let t0 = Instant::now();
        let ctx = DraftContext {
            prompt: self.prompt,
            features: self.cache.features(),
            text_tokens: &self.text,
        };
        let prop = self
            .drafter
            .propose(self.target, &mut self.draft_state, &ctx, temperature, rng)?;
        let draft_time = t0.elapsed();
        if prop.tokens.len() != k || prop.dists.len() != k {
            return Err(Error::InvalidConfig(format!(
                "drafter returned {} tokens, expected {k}",
                prop.tokens.len()
            )));
        }

        let t1 = Instant::now();
        let pending = *self.text.last().ok_or(Error::EmptyInput)?;
        let mut inputs = Vec::with_capacity(k + 1);
        inputs.push(pending);
        inputs.extend_from_slice(&prop.tokens);
        let target_flops = flops_of_forward(self.target.config(), m, k + 1);
        let ver = self.target.verify_forward(&mut self.cache, &inputs, temperature)?;

        let mut emitted = Vec::with_capacity(k + 1);
        let mut accept_probs = Vec::with_capacity(k);
        let mut rejected_at = None;
        for (j, (&tok, p_draft)) in prop.tokens.iter().zip(&prop.dists).enumerate() {
            let p_target = &ver.dists[j + 1];
            let (ok, a) = accept_or_reject(p_target, p_draft, tok, rng)?;
            accept_probs.push(a);
            if ok {
                emitted.push(tok);
            } else {
                emitted.push(residual_sample(p_target, p_draft, rng)?);
                rejected_at = Some(j + 1);
                break;
            }
        }
        let accepted = rejected_at.map_or(k, |j| j - 1);
        if rejected_at.is_none() {
            emitted.push(sample_categorical(&ver.dists[k + 1], rng)?);
        }
        // Keep the pending token and the accepted candidates.
        self.cache.truncate(m + 1 + accepted);
        self.text.extend_from_slice(&emitted);
        self.output.extend_from_slice(&emitted);
        let verify_time = t1.elapsed();
        Ok(RoundReport {
            outcome: VerificationOutcome {
                accepted,
                emitted,
                accept_probs,
                rejected_at,
            },
            target_flops,
            draft_flops: prop.flops,
            draft_passes: prop.forward_passes,
            draft_time,
            verify_time,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub max_tokens: usize,
    pub temperature: f64,
    /// Also time a plain target decode of the same length for measured ℛ.
    pub measure_baseline: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeMetrics {
    pub rounds: usize,
    pub total_emitted: usize,
    pub accepted: usize,
    /// `𝒜`: accepted candidates per round, bonus and corrections excluded.
    pub avg_accept: f64,
    pub target_flops: u64,
    pub draft_flops: u64,
    pub draft_passes: usize,
    /// Mean FLOPs of a single-token target step over the same output.
    pub target_step_flops: f64,
    /// Modeled ℛ with `i` = tokens emitted per round.
    pub speedup_modeled: f64,
    pub speedup_measured: Option<f64>,
    pub wall_time_baseline: Option<f64>,
    pub wall_time_spec: f64,
}

/// Decodes `opts.max_tokens` tokens speculatively. Timings cover the decode
/// phase only; the target prefill and the drafter's per-prompt setup are
/// excluded from both sides of the measured ratio.
pub fn decode<D: Drafter>(
    target: &TargetModel,
    drafter: &D,
    prompt: &MultimodalPrompt,
    opts: &DecodeOptions,
    rng: &mut SeededRng,
) -> Result<(Vec<TokenId>, DecodeMetrics)> {
    if opts.max_tokens == 0 {
        return Err(Error::InvalidCount);
    }
    let k = drafter.draft_len();
    let need = prompt.len() + opts.max_tokens + k - 1;
    if need > target.config().max_seq {
        return Err(Error::ExceedsMaxSeq {
            len: need,
            max: target.config().max_seq,
        });
    }
    let mut session = SpecSession::new(target, drafter, prompt, opts.temperature, rng)?;
    let mut rounds = 0;
    let mut accepted = 0;
    let mut target_flops = 0;
    let mut draft_flops = 0;
    let mut draft_passes = 0;
    let t0 = Instant::now();
    while session.output().len() < opts.max_tokens {
        let r = session.round(opts.temperature, rng)?;
        rounds += 1;
        accepted += r.outcome.accepted;
        target_flops += r.target_flops;
        draft_flops += r.draft_flops;
        draft_passes += r.draft_passes;
    }
    let wall_time_spec = t0.elapsed().as_secs_f64();
    let mut tokens = session.output().to_vec();
    tokens.truncate(opts.max_tokens);

    let steps = opts.max_tokens - 1;
    let target_step_flops = if steps == 0 {
        flops_of_forward(target.config(), prompt.len(), 1) as f64
    } else {
        (0..steps)
            .map(|s| flops_of_forward(target.config(), prompt.len() + s, 1) as f64)
            .sum::<f64>()
            / steps as f64
    };
    let speedup_modeled = if rounds == 0 {
        1.0
    } else {
        let per_round = (session.output().len() - 1) as f64 / rounds as f64;
        let per_pass = draft_flops as f64 / draft_passes.max(1) as f64;
        let passes = drafter.passes_per_round();
        modeled_speedup(per_round, target_step_flops, per_pass, k, k / passes)
    };

    let wall_time_baseline = if opts.measure_baseline && steps > 0 {
        let mut brng = SeededRng::with_stream(rng.seed(), streams::DECODE);
        let (_, dist, mut cache) = target.encode_prompt(prompt, opts.temperature)?;
        let t = Instant::now();
        target.continue_decoding(&mut cache, dist, opts.max_tokens, opts.temperature, &mut brng)?;
        Some(t.elapsed().as_secs_f64())
    } else {
        None
    };
    let speedup_measured = wall_time_baseline
        .filter(|_| wall_time_spec > 0.0)
        .map(|b| b / wall_time_spec);

    let metrics = DecodeMetrics {
        rounds,
        total_emitted: tokens.len(),
        accepted,
        avg_accept: if rounds == 0 {
            0.0
        } else {
            accepted as f64 / rounds as f64
        },
        target_flops,
        draft_flops,
        draft_passes,
        target_step_flops,
        speedup_modeled,
        speedup_measured,
        wall_time_baseline,
        wall_time_spec,
    };
    Ok((tokens, metrics))
}
