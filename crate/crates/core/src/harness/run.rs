use std::io::Write;

use serde::{Deserialize, Serialize};

use super::table::{round6, ResultRow, ResultTable, RowStatus};
use super::{gen_prompts, DrafterKind, ExperimentConfig};
use crate::decode::{decode, modeled_speedup, DecodeOptions, Drafter, SelfDrafter};
use crate::draft::{draft_flops, DraftModel};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::streams;
use crate::target::{flops_of_forward, MultimodalPrompt, TargetModel};
use crate::training::{collect_traces, train, EpochStats, TrainTrace};

/// Everything one seed of an experiment needs, built deterministically from
/// the config.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub target: TargetModel,
    pub train_prompts: Vec<MultimodalPrompt>,
    pub eval_prompts: Vec<MultimodalPrompt>,
}

/// Decode statistics summed over the evaluation prompts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rounds: usize,
    pub accepted: usize,
    pub wall_time_baseline: Option<f64>,
    pub wall_time_spec: f64,
}

impl EvalSummary {
    /// `𝒜`, accepted candidates per round.
    pub fn avg_accept(&self) -> f64 {
        if self.rounds == 0 {
            0.0
        } else {
            self.accepted as f64 / self.rounds as f64
        }
    }
}

impl Pipeline {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.for_seed(seed);
        let target = TargetModel::new(cfg.target.clone())?;
        let shape = cfg.shape();
        let train_prompts = gen_prompts(
            shape,
            &cfg.target,
            cfg.num_train_prompts,
            &mut SeededRng::with_stream(seed, streams::TRAIN_PROMPTS),
        )?;
        let eval_prompts = gen_prompts(
            shape,
            &cfg.target,
            cfg.num_eval_prompts,
            &mut SeededRng::with_stream(seed, streams::EVAL_PROMPTS),
        )?;
        Ok(Self {
            cfg,
            seed,
            target,
            train_prompts,
            eval_prompts,
        })
    }

    pub fn traces(&self) -> Result<Vec<TrainTrace>> {
        collect_traces(
            &self.target,
            &self.train_prompts,
            self.cfg.trace_temperature,
            self.cfg.train.max_seq_len,
            &mut SeededRng::with_stream(self.seed, streams::TRACES),
        )
    }

    pub fn fresh_draft(&self) -> Result<DraftModel> {
        DraftModel::new(self.cfg.draft.clone(), &self.target)
    }

    pub fn train_draft(
        &self,
        traces: &[TrainTrace],
        log: Option<&mut dyn Write>,
    ) -> Result<(DraftModel, Vec<EpochStats>)> {
        let mut draft = self.fresh_draft()?;
        let stats = train(
            &mut draft,
            &self.target,
            traces,
            &self.cfg.train,
            &mut SeededRng::with_stream(self.seed, streams::TRAINING),
            log,
        )?;
        Ok((draft, stats))
    }

    /// Decodes every evaluation prompt at `temperature`.
    pub fn evaluate<D: Drafter>(&self, drafter: &D, temperature: f64) -> Result<EvalSummary> {
        let opts = DecodeOptions {
            max_tokens: self.cfg.max_new_tokens,
            temperature,
            measure_baseline: self.cfg.measure_wall_clock,
        };
        let mut rng = SeededRng::with_stream(self.seed, streams::DECODE);
        let mut s = EvalSummary::default();
        for p in &self.eval_prompts {
            let (_, m) = decode(&self.target, drafter, p, &opts, &mut rng)?;
            s.rounds += m.rounds;
            s.accepted += m.accepted;
            s.wall_time_spec += m.wall_time_spec;
            if let Some(b) = m.wall_time_baseline {
                *s.wall_time_baseline.get_or_insert(0.0) += b;
            }
        }
        Ok(s)
    }

    /// Analytic per-round costs at the prompt shape: target FLOPs, draft
    /// FLOPs and draft passes.
    pub fn round_costs(&self, kind: DrafterKind) -> (f64, f64, f64) {
        let shape = self.cfg.shape();
        let m = shape.visual_tokens + shape.text_tokens;
        let k = self.cfg.draft.draft_len;
        let tcfg = &self.cfg.target;
        let target = flops_of_forward(tcfg, m, k + 1) as f64;
        match kind {
            DrafterKind::SelfDraft => {
                let draft: u64 = (0..k).map(|j| flops_of_forward(tcfg, m + j, 1)).sum();
                (target, draft as f64, k as f64)
            }
            _ => {
                let d = &self.cfg.draft;
                let draft = draft_flops(
                    d,
                    tcfg.vocab_size,
                    shape.visual_tokens,
                    shape.text_tokens,
                    d.compress,
                );
                (target, draft as f64, d.passes_per_round() as f64)
            }
        }
    }

    fn row(&self, label: &str, kind: DrafterKind, tau: f64, s: &EvalSummary) -> ResultRow {
        let shape = self.cfg.shape();
        let m = shape.visual_tokens + shape.text_tokens;
        let (target_round, draft_round, passes) = self.round_costs(kind);
        let step = flops_of_forward(&self.cfg.target, m, 1) as f64;
        let a = s.avg_accept();
        let k = self.cfg.draft.draft_len;
        let kp = (k as f64 / passes).round() as usize;
        let r_modeled = modeled_speedup(a + 1.0, step, draft_round / passes, k, kp);
        let r_measured = s
            .wall_time_baseline
            .filter(|_| s.wall_time_spec > 0.0)
            .map(|b| b / s.wall_time_spec);
        ResultRow {
            label: label.into(),
            stat: format!("seed={}", self.seed),
            tau,
            accept_a: a,
            r_measured,
            r_modeled,
            target_flops_per_round: target_round,
            draft_flops_per_round: draft_round,
            draft_passes_per_round: passes,
            status: RowStatus::Ok,
        }
        .rounded()
    }
}

/// Rows of one `(label, τ)` cell across seeds.
struct Cell {
    label: String,
    tau: f64,
    rows: Vec<ResultRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(cell: &Cell) -> [ResultRow; 2] {
    let ok: Vec<&ResultRow> = cell.rows.iter().filter(|r| r.status == RowStatus::Ok).collect();
    if ok.is_empty() {
        let status = cell.rows.first().map_or(RowStatus::Skipped, |r| r.status);
        return [
            ResultRow::empty(&cell.label, "mean", cell.tau, status),
            ResultRow::empty(&cell.label, "std", cell.tau, status),
        ];
    }
    let col = |f: &dyn Fn(&ResultRow) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
    let a = col(&|r| r.accept_a);
    let rm = col(&|r| r.r_modeled);
    let tf = col(&|r| r.target_flops_per_round);
    let df = col(&|r| r.draft_flops_per_round);
    let dp = col(&|r| r.draft_passes_per_round);
    let meas: Option<Vec<f64>> = ok.iter().map(|r| r.r_measured).collect();
    let meas = meas.map(|v| mean_std(&v));
    let make = |stat: &str, pick: fn((f64, f64)) -> f64| {
        ResultRow {
            label: cell.label.clone(),
            stat: stat.into(),
            tau: cell.tau,
            accept_a: pick(a),
            r_measured: meas.map(pick),
            r_modeled: pick(rm),
            target_flops_per_round: pick(tf),
            draft_flops_per_round: pick(df),
            draft_passes_per_round: pick(dp),
            status: RowStatus::Ok,
        }
        .rounded()
    };
    [make("mean", |p| p.0), make("std", |p| p.1)]
}

/// Trains (if the drafter needs it) and evaluates every seed and
/// temperature. Each `(label, τ)` cell gets one row per seed, then a mean
/// and a standard-deviation row. A seed whose training diverges yields
/// `diverged` rows instead of aborting the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    cfg.validate()?;
    let mut labels: Vec<(String, DrafterKind)> = Vec::new();
    match cfg.drafter {
        DrafterKind::Trained => {
            labels.push((cfg.label.clone(), DrafterKind::Trained));
            if cfg.include_untrained {
                labels.push((format!("{}/untrained", cfg.label), DrafterKind::Untrained));
            }
        }
        kind => labels.push((cfg.label.clone(), kind)),
    }
    let mut cells: Vec<Cell> = labels
        .iter()
        .flat_map(|(l, _)| {
            cfg.temperatures.iter().map(move |&tau| Cell {
                label: l.clone(),
                tau: round6(tau),
                rows: Vec::new(),
            })
        })
        .collect();
    let nt = cfg.temperatures.len();

    for &seed in &cfg.seeds {
        let pipe = Pipeline::new(cfg, seed)?;
        for (li, (label, kind)) in labels.iter().enumerate() {
            for (ti, &tau) in cfg.temperatures.iter().enumerate() {
                let cell = &mut cells[li * nt + ti];
                let row = match kind {
                    DrafterKind::SelfDraft => {
                        let d = SelfDrafter {
                            draft_len: cfg.draft.draft_len,
                        };
                        pipe.row(label, *kind, tau, &pipe.evaluate(&d, tau)?)
                    }
                    DrafterKind::Untrained => {
                        let d = pipe.fresh_draft()?;
                        pipe.row(label, *kind, tau, &pipe.evaluate(&d, tau)?)
                    }
                    DrafterKind::Trained => continue,
                };
                cell.rows.push(row);
            }
        }
        if let Some(li) = labels.iter().position(|(_, k)| *k == DrafterKind::Trained) {
            let label = &labels[li].0;
            let traces = pipe.traces()?;
            match pipe.train_draft(&traces, None) {
                Ok((draft, _)) => {
                    for (ti, &tau) in cfg.temperatures.iter().enumerate() {
                        let s = pipe.evaluate(&draft, tau)?;
                        cells[li * nt + ti]
                            .rows
                            .push(pipe.row(label, DrafterKind::Trained, tau, &s));
                    }
                }
                Err(Error::Diverged(msg)) => {
                    log::warn!("{label} seed {seed}: {msg}");
                    for (ti, &tau) in cfg.temperatures.iter().enumerate() {
                        cells[li * nt + ti].rows.push(ResultRow::empty(
                            label,
                            &format!("seed={seed}"),
                            tau,
                            RowStatus::Diverged,
                        ));
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }

    let mut table = ResultTable::default();
    for cell in &cells {
        table.rows.extend(cell.rows.iter().cloned());
        table.rows.extend(aggregate(cell));
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    /// Draft length `K`, drafted in a single pass (`k' = K`).
    #[value(name = "k")]
    #[serde(rename = "k")]
    DraftLen,
    /// `C / N`. `1` bypasses compression, `0` drops the visual input.
    #[value(name = "compression_ratio")]
    CompressionRatio,
    /// Tokens per pass `k'` at the configured `K`.
    #[value(name = "k_prime")]
    #[serde(rename = "k_prime")]
    GroupSize,
    /// Number of head layers.
    #[value(name = "draft_scale")]
    DraftScale,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::DraftLen => "k",
            AblationAxis::CompressionRatio => "compression_ratio",
            AblationAxis::GroupSize => "k_prime",
            AblationAxis::DraftScale => "draft_scale",
        }
    }

    /// `cfg` with the axis set to `value`, or why that value is invalid.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> std::result::Result<ExperimentConfig, String> {
        let mut c = cfg.clone();
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(format!("{} must be a positive integer, got {value}", self.name()))
            }
        };
        match self {
            AblationAxis::DraftLen => {
                let k = count()?;
                c.draft.draft_len = k;
                c.draft.group_size = k;
            }
            AblationAxis::GroupSize => c.draft.group_size = count()?,
            AblationAxis::DraftScale => c.draft.n_layers = count()?,
            AblationAxis::CompressionRatio => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(format!("compression_ratio must lie in [0, 1], got {value}"));
                }
                let n = cfg.shape().visual_tokens;
                if value == 1.0 {
                    c.draft.compress = false;
                    c.draft.compressed_tokens = n;
                } else {
                    c.draft.compress = true;
                    c.draft.compressed_tokens = if value == 0.0 {
                        0
                    } else {
                        ((value * n as f64).round() as usize).max(1)
                    };
                }
            }
        }
        c.label = format!("{}={}", self.name(), round6(value));
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }
}

/// Runs the experiment once per value of `axis`. Invalid values become
/// `skipped` rows labelled like the others.
pub fn ablate(cfg: &ExperimentConfig, axis: AblationAxis, values: &[f64]) -> Result<ResultTable> {
    if values.is_empty() {
        return Err(Error::InvalidCount);
    }
    let mut table = ResultTable::default();
    for &v in values {
        match axis.apply(cfg, v) {
            Ok(c) => table.rows.extend(run_experiment(&c)?.rows),
            Err(why) => {
                let label = format!("{}={}", axis.name(), round6(v));
                log::warn!("skipping {label}: {why}");
                for &tau in &cfg.temperatures {
                    table
                        .rows
                        .push(ResultRow::empty(&label, "all", tau, RowStatus::Skipped));
                }
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draft::DraftConfig;
    use crate::target::TargetConfig;
    use crate::training::TrainConfig;

    fn tiny() -> ExperimentConfig {
        let target = TargetConfig {
            vocab_size: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            d_patch: 4,
            max_seq: 48,
            ..TargetConfig::default()
        };
        ExperimentConfig {
            visual_tokens: Some(8),
            text_tokens: Some(3),
            draft: DraftConfig::for_target(&target, 2, 2, 2),
            train: TrainConfig {
                epochs: 2,
                max_seq_len: 24,
                ..TrainConfig::default()
            },
            target,
            num_train_prompts: 2,
            num_eval_prompts: 2,
            max_new_tokens: 8,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn experiment_is_deterministic() {
        let mut cfg = tiny();
        cfg.seeds = vec![0, 1];
        cfg.include_untrained = true;
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        // 2 labels × 2 temperatures × (2 seeds + mean + std)
        assert_eq!(a.rows.len(), 16);
        assert!(a.rows.iter().all(|r| r.status == RowStatus::Ok));
        assert!(a.rows.iter().all(|r| r.r_measured.is_none()));
        assert_eq!(a.rows[2].stat, "mean");
        let m = (a.rows[0].accept_a + a.rows[1].accept_a) / 2.0;
        assert!((a.rows[2].accept_a - m).abs() < 2e-6);
    }

    #[test]
    fn self_draft_rows_accept_everything() {
        let mut cfg = tiny();
        cfg.drafter = DrafterKind::SelfDraft;
        let t = run_experiment(&cfg).unwrap();
        for r in &t.rows {
            if r.stat != "std" {
                assert_eq!(r.accept_a, 2.0);
                assert_eq!(r.draft_passes_per_round, 2.0);
            }
        }
    }

    #[test]
    fn ablation_skips_invalid_values() {
        let cfg = tiny();
        let t = ablate(&cfg, AblationAxis::GroupSize, &[2.0, 3.0, 0.5]).unwrap();
        let skipped: Vec<_> = t
            .rows
            .iter()
            .filter(|r| r.status == RowStatus::Skipped)
            .map(|r| r.label.as_str())
            .collect();
        assert_eq!(skipped, ["k_prime=3", "k_prime=3", "k_prime=0.5", "k_prime=0.5"]);
        assert!(t.rows.iter().any(|r| r.label == "k_prime=2" && r.status == RowStatus::Ok));
    }

    #[test]
    fn compression_axis_maps_ratios() {
        let cfg = tiny();
        let bypass = AblationAxis::CompressionRatio.apply(&cfg, 1.0).unwrap();
        assert!(!bypass.draft.compress);
        let quarter = AblationAxis::CompressionRatio.apply(&cfg, 0.25).unwrap();
        assert_eq!(quarter.draft.compressed_tokens, 2);
        let none = AblationAxis::CompressionRatio.apply(&cfg, 0.0).unwrap();
        assert_eq!(none.draft.compressed_tokens, 0);
        assert!(AblationAxis::CompressionRatio.apply(&cfg, 1.5).is_err());
    }
}
