//! Draft training against the frozen target.
//!
//! Traces are target continuations of synthetic prompts with the feature and
//! next-token law (at temperature 1) of every position. A window at offset
//! `s` commits the prompt plus `s` generated tokens (`m = M + s` positions)
//! and asks the draft for positions `m..m+K`. Its loss is
//!
//! ```text
//! L = Σ_j smooth_l1(F'_j, F_{m+j-1}) + α · Σ_j CE(P'_j, P_{m+j-1})
//! ```
//!
//! with `P'_j = softmax(LMHead(F'_j))`. Training is teacher-forced: between
//! groups of `k'` the draft is fed the trace's own features and tokens, so
//! every group of a window is a placeholder pass over ground-truth context.

mod packed;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::draft::{DraftContext, DraftModel, DraftParams};
use crate::error::{Error, Result};
use crate::numerics::{cross_entropy, smooth_l1, softmax, Matrix, ProbVector, SeededRng};
use crate::target::{MultimodalPrompt, TargetModel, TokenId};

pub use packed::{packed_gradient, window_gradient};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the classification term.
    pub alpha: f64,
    pub learning_rate: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Trace length cap, prompt included.
    pub max_seq_len: usize,
    pub optimizer: OptimizerKind,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            learning_rate: 2e-3,
            batch_size: 8,
            epochs: 30,
            max_seq_len: 96,
            optimizer: OptimizerKind::Adam,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig(format!("alpha {} < 0", self.alpha)));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A target continuation with per-position supervision. Row `i` of
/// `target_features` and `target_dists[i]` belong to absolute position `i`;
/// generated token `s` sits at position `M + s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub prompt: MultimodalPrompt,
    pub target_tokens: Vec<TokenId>,
    pub target_features: Matrix,
    /// Next-token law after each position, at temperature 1.
    pub target_dists: Vec<ProbVector>,
}

impl TrainTrace {
    /// Total positions, prompt included.
    pub fn len(&self) -> usize {
        self.prompt.len() + self.target_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokens at positions `N..len()`.
    pub fn text_tokens(&self) -> Vec<TokenId> {
        let mut t = self.prompt.text_tokens.clone();
        t.extend_from_slice(&self.target_tokens);
        t
    }

    /// Number of windows for draft length `k`.
    pub fn num_windows(&self, k: usize) -> usize {
        (self.target_tokens.len() + 1).saturating_sub(k)
    }
}

/// Runs the target over each prompt until `max_seq_len` positions, sampling
/// at `temperature`.
pub fn collect_traces(
    target: &TargetModel,
    prompts: &[MultimodalPrompt],
    temperature: f64,
    max_seq_len: usize,
    rng: &mut SeededRng,
) -> Result<Vec<TrainTrace>> {
    if prompts.is_empty() {
        return Err(Error::InvalidCount);
    }
    let cap = max_seq_len.min(target.config().max_seq);
    prompts
        .iter()
        .map(|prompt| {
            if prompt.len() >= cap {
                return Err(Error::InvalidConfig(format!(
                    "prompt of length {} leaves no room under max_seq_len {cap}",
                    prompt.len()
                )));
            }
            let (_, _, mut cache) = target.encode_prompt(prompt, 1.0)?;
            let mut tokens = Vec::with_capacity(cap - prompt.len());
            while cache.len() < cap {
                let logits = cache.last_logits().ok_or(Error::EmptyInput)?;
                let tok = crate::numerics::sample_categorical(&softmax(logits, temperature)?, rng)?;
                tokens.push(tok);
                target.step(&mut cache, tok, 1.0)?;
            }
            let dists = (0..cache.len())
                .map(|r| softmax(cache.logits().row(r), 1.0))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainTrace {
                prompt: prompt.clone(),
                target_tokens: tokens,
                target_features: cache.features().clone(),
                target_dists: dists,
            })
        })
        .collect()
}

/// Per-window loss terms. `reg` and `cls` are sums over the `K` positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowLoss {
    pub reg: f64,
    pub cls: f64,
    pub total: f64,
}

/// Teacher-forced draft features for the window at offset `s`, `K × d`.
pub fn teacher_forced_features(
    draft: &DraftModel,
    target: &TargetModel,
    trace: &TrainTrace,
    s: usize,
) -> Result<Matrix> {
    let cfg = draft.config();
    let (k, kp) = (cfg.draft_len, cfg.group_size);
    if s + k > trace.target_tokens.len() {
        return Err(Error::WindowOverflow {
            position: s,
            draft_len: k,
            len: trace.target_tokens.len(),
        });
    }
    let n = trace.prompt.visual_len();
    let m = trace.prompt.len() + s;
    let tokens = trace.text_tokens();
    let mut out = Matrix::zeros(0, cfg.d_model);
    let mut session = None;
    for g in 0..cfg.passes_per_round() {
        let committed = m + g * kp;
        let feats = trace.target_features.slice_rows(0, committed);
        let ctx = DraftContext {
            prompt: &trace.prompt,
            features: &feats,
            text_tokens: &tokens[..committed - n + 1],
        };
        let sess = match session.as_mut() {
            Some(sess) => sess,
            None => session.insert(draft.begin(&ctx)?),
        };
        out = out.vstack(&draft.placeholder_features(target, sess, &ctx, g * kp..(g + 1) * kp)?)?;
    }
    Ok(out)
}

/// Loss of the window at offset `s`, via the incremental inference path.
pub fn loss_on_window(
    draft: &DraftModel,
    target: &TargetModel,
    trace: &TrainTrace,
    s: usize,
    cfg: &TrainConfig,
) -> Result<WindowLoss> {
    let f_pred = teacher_forced_features(draft, target, trace, s)?;
    let m = trace.prompt.len() + s;
    let logits = target.lm_head().logits(&f_pred)?;
    let mut loss = WindowLoss::default();
    for j in 0..f_pred.rows() {
        let pos = m + j;
        loss.reg += smooth_l1(
            &f_pred.slice_rows(j, j + 1),
            &trace.target_features.slice_rows(pos, pos + 1),
        )?;
        loss.cls += cross_entropy(&softmax(logits.row(j), 1.0)?, &trace.target_dists[pos])?;
    }
    loss.total = loss.reg + cfg.alpha * loss.cls;
    Ok(loss)
}

/// Adam with `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`, or plain SGD.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn apply(&mut self, params: &mut DraftParams, grads: &DraftParams) -> Result<()> {
        let g = grads.flatten();
        let mut p = params.flatten();
        if g.len() != self.m.len() || p.len() != g.len() {
            return Err(Error::ShapeMismatch {
                op: "optimizer",
                left: (p.len(), 1),
                right: (self.m.len(), 1),
            });
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in p.iter_mut().zip(&g) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - Self::BETA1.powi(t);
                let c2 = 1.0 - Self::BETA2.powi(t);
                for i in 0..p.len() {
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    p[i] -= self.lr * mh / (vh.sqrt() + Self::EPS);
                }
            }
        }
        params.assign_flat(&p)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub reg_loss: f64,
    pub cls_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean window loss over the epoch, measured before each update.
    pub mean_loss: f64,
    pub mean_reg: f64,
    pub mean_cls: f64,
    pub windows: usize,
    pub steps: Vec<StepRecord>,
}

/// Optimizer state carried across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    optimizer: Optimizer,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, draft: &DraftModel) -> Result<Self> {
        cfg.validate()?;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, draft.params().num_params());
        Ok(Self {
            cfg,
            optimizer,
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One pass over every window of every trace. Batches are runs of
    /// consecutive windows within a trace, visited in shuffled order.
    pub fn train_epoch(
        &mut self,
        draft: &mut DraftModel,
        target: &TargetModel,
        traces: &[TrainTrace],
        rng: &mut SeededRng,
    ) -> Result<EpochStats> {
        if traces.is_empty() {
            return Err(Error::EmptyInput);
        }
        let k = draft.config().draft_len;
        let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
        for (ti, tr) in traces.iter().enumerate() {
            let windows: Vec<usize> = (0..tr.num_windows(k)).collect();
            for chunk in windows.chunks(self.cfg.batch_size) {
                batches.push((ti, chunk.to_vec()));
            }
        }
        if batches.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "no trace is long enough for K={k}"
            )));
        }
        rng.shuffle(&mut batches);

        let epoch = self.epoch;
        let mut sum = WindowLoss::default();
        let mut windows = 0;
        let mut steps = Vec::with_capacity(batches.len());
        for (step, (ti, chunk)) in batches.iter().enumerate() {
            let scale = 1.0 / chunk.len() as f64;
            let (losses, grads) =
                packed::packed_gradient(draft, target, &traces[*ti], chunk, self.cfg.alpha, scale)?;
            let mut batch = WindowLoss::default();
            for l in &losses {
                batch.reg += l.reg * scale;
                batch.cls += l.cls * scale;
                batch.total += l.total * scale;
            }
            if !batch.total.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} step {step}: loss {}",
                    batch.total
                )));
            }
            self.optimizer.apply(draft.params_mut(), &grads)?;
            if !draft.params().is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch} step {step}: non-finite parameters"
                )));
            }
            for l in &losses {
                sum.reg += l.reg;
                sum.cls += l.cls;
                sum.total += l.total;
            }
            windows += losses.len();
            steps.push(StepRecord {
                epoch,
                step,
                reg_loss: batch.reg,
                cls_loss: batch.cls,
                total: batch.total,
            });
        }
        self.epoch += 1;
        let w = windows as f64;
        Ok(EpochStats {
            epoch,
            mean_loss: sum.total / w,
            mean_reg: sum.reg / w,
            mean_cls: sum.cls / w,
            windows,
            steps,
        })
    }
}

/// Trains for `cfg.epochs` epochs, writing one JSON line per step to `log`.
pub fn train(
    draft: &mut DraftModel,
    target: &TargetModel,
    traces: &[TrainTrace],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochStats>> {
    let mut trainer = Trainer::new(cfg.clone(), draft)?;
    let mut out = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let stats = trainer.train_epoch(draft, target, traces, rng)?;
        if let Some(w) = log.as_deref_mut() {
            for rec in &stats.steps {
                serde_json::to_writer(&mut *w, rec)?;
                w.write_all(b"\n")?;
            }
        }
        out.push(stats);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
