//! Experiment driver: synthetic prompts, train-then-decode runs, ablation
//! sweeps and result tables.
//!
//! Every random draw of a run derives from one root seed per entry of
//! `seeds`, split along the streams in [`crate::streams`]. Two runs of the
//! same config therefore emit identical bytes unless wall-clock measurement
//! is switched on.

mod run;
mod table;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use run::{ablate, run_experiment, AblationAxis, Pipeline};
pub use table::{emit_report, parse_report, ReportFormat, ResultRow, ResultTable, RowStatus};

use crate::draft::DraftConfig;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::target::{MultimodalPrompt, TargetConfig};
use crate::training::TrainConfig;

/// Synthetic stand-ins for the two workload shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Many visual tokens, short text (captioning-like).
    Vc,
    /// Few visual tokens, longer text (instruction-like).
    Vit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptShape {
    pub visual_tokens: usize,
    pub text_tokens: usize,
}

impl TaskKind {
    pub fn default_shape(self) -> PromptShape {
        match self {
            TaskKind::Vc => PromptShape {
                visual_tokens: 64,
                text_tokens: 4,
            },
            TaskKind::Vit => PromptShape {
                visual_tokens: 16,
                text_tokens: 12,
            },
        }
    }
}

/// Number of prototype vectors each synthetic image is built from.
pub const PATCH_PROTOTYPES: usize = 4;
/// Per-entry standard deviation of patch noise around its prototype.
pub const PATCH_NOISE: f64 = 0.1;

/// Draws `count` prompts. Each prompt picks [`PATCH_PROTOTYPES`] prototype
/// vectors from `N(0, I)`; every patch is a uniformly chosen prototype plus
/// `N(0, PATCH_NOISE² I)` noise, so neighbouring patches are redundant the
/// way real image tokens are. Text tokens are uniform over the vocabulary.
pub fn gen_prompts(
    shape: PromptShape,
    target: &TargetConfig,
    count: usize,
    rng: &mut SeededRng,
) -> Result<Vec<MultimodalPrompt>> {
    if count == 0 {
        return Err(Error::InvalidCount);
    }
    if shape.text_tokens == 0 {
        return Err(Error::InvalidConfig("prompts need at least one text token".into()));
    }
    let dp = target.d_patch;
    Ok((0..count)
        .map(|_| {
            let protos = Matrix::from_fn(PATCH_PROTOTYPES, dp, |_, _| rng.normal(0.0, 1.0));
            let mut patches = Matrix::zeros(0, dp);
            for _ in 0..shape.visual_tokens {
                let p = rng.below(PATCH_PROTOTYPES);
                let row: Vec<f64> = protos
                    .row(p)
                    .iter()
                    .map(|v| v + rng.normal(0.0, PATCH_NOISE))
                    .collect();
                patches.push_row(&row).expect("patch width");
            }
            let text = (0..shape.text_tokens)
                .map(|_| rng.below(target.vocab_size))
                .collect();
            MultimodalPrompt::new(patches, text)
        })
        .collect())
}

/// Which drafter a run evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrafterKind {
    /// Train the draft, then decode with it.
    Trained,
    /// Decode with the freshly initialized draft.
    Untrained,
    /// The target drafts for itself (`K` single-token passes).
    SelfDraft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub label: String,
    pub task: TaskKind,
    /// Overrides the task's default visual token count.
    pub visual_tokens: Option<usize>,
    /// Overrides the task's default text length.
    pub text_tokens: Option<usize>,
    pub drafter: DrafterKind,
    /// Also report rows for the untrained draft alongside trained ones.
    pub include_untrained: bool,
    pub target: TargetConfig,
    pub draft: DraftConfig,
    pub train: TrainConfig,
    pub temperatures: Vec<f64>,
    pub num_train_prompts: usize,
    pub num_eval_prompts: usize,
    /// Tokens generated per evaluation prompt.
    pub max_new_tokens: usize,
    /// Sampling temperature of the target when collecting traces.
    pub trace_temperature: f64,
    pub seeds: Vec<u64>,
    /// Time a plain target decode next to each speculative one. Makes the
    /// measured-ℛ column nondeterministic.
    pub measure_wall_clock: bool,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            label: "experiment".into(),
            task: TaskKind::Vc,
            visual_tokens: None,
            text_tokens: None,
            drafter: DrafterKind::Trained,
            include_untrained: false,
            target: TargetConfig::default(),
            draft: DraftConfig::default(),
            train: TrainConfig::default(),
            temperatures: vec![0.0, 1.0],
            num_train_prompts: 16,
            num_eval_prompts: 8,
            max_new_tokens: 32,
            trace_temperature: 1.0,
            seeds: vec![0],
            measure_wall_clock: false,
            output: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn shape(&self) -> PromptShape {
        let d = self.task.default_shape();
        PromptShape {
            visual_tokens: self.visual_tokens.unwrap_or(d.visual_tokens),
            text_tokens: self.text_tokens.unwrap_or(d.text_tokens),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        self.target.validate()?;
        self.draft.validate(&self.target)?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return fail("seeds must be nonempty".into());
        }
        if self.temperatures.is_empty() || self.temperatures.iter().any(|t| !(*t >= 0.0)) {
            return fail("temperatures must be nonempty and >= 0".into());
        }
        if self.num_train_prompts == 0 || self.num_eval_prompts == 0 || self.max_new_tokens == 0 {
            return Err(Error::InvalidCount);
        }
        let shape = self.shape();
        if shape.text_tokens == 0 {
            return fail("text_tokens must be positive".into());
        }
        let m = shape.visual_tokens + shape.text_tokens;
        let need = m + self.max_new_tokens + self.draft.draft_len - 1;
        if need > self.target.max_seq {
            return fail(format!(
                "prompt {m} + {} new tokens + K needs max_seq >= {need}, have {}",
                self.max_new_tokens, self.target.max_seq
            ));
        }
        if self.drafter == DrafterKind::Trained
            && self.train.max_seq_len.min(self.target.max_seq) < m + self.draft.draft_len
        {
            return fail(format!(
                "train.max_seq_len {} leaves no window after a prompt of {m}",
                self.train.max_seq_len
            ));
        }
        Ok(())
    }

    /// The config with every sub-seed set to `seed`.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.target.rng_seed = seed;
        c.draft.rng_seed = seed;
        c.train.rng_seed = seed;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts_are_seeded_and_shaped() {
        let t = TargetConfig::default();
        let vc = TaskKind::Vc.default_shape();
        let vit = TaskKind::Vit.default_shape();
        assert!(vc.visual_tokens > vit.visual_tokens);
        assert!(vc.text_tokens < vit.text_tokens);
        let a = gen_prompts(vc, &t, 3, &mut SeededRng::new(1)).unwrap();
        let b = gen_prompts(vc, &t, 3, &mut SeededRng::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].visual_len(), 64);
        assert!(a.iter().all(|p| p.validate(&t).is_ok()));
        assert!(matches!(
            gen_prompts(vc, &t, 0, &mut SeededRng::new(1)),
            Err(Error::InvalidCount)
        ));
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            label = "x"
            task = "vit"
            seeds = [1, 2]
            [draft]
            draft_len = 2
            group_size = 1
            "#,
        )
        .unwrap();
        assert_eq!(cfg.task, TaskKind::Vit);
        assert_eq!(cfg.draft.draft_len, 2);
        assert_eq!(cfg.train, TrainConfig::default());
        assert!(cfg.validate().is_ok());
        assert!(ExperimentConfig::from_toml("seeds = 3").is_err());
        let mut bad = cfg.clone();
        bad.seeds.clear();
        assert!(bad.validate().is_err());
    }
}
