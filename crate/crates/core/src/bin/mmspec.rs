use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mmspec::decode::{decode, DecodeOptions};
use mmspec::harness::{
    ablate, emit_report, parse_report, run_experiment, AblationAxis, ExperimentConfig, Pipeline,
    ReportFormat, ResultTable,
};
use mmspec::numerics::SeededRng;
use mmspec::snapshot;
use mmspec::streams;
use mmspec::target::TokenId;

#[derive(Parser)]
#[command(name = "mmspec", about = "Speculative decoding for toy multimodal models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the target and write it with training traces and eval prompts.
    GenData(Common),
    /// Train the draft and write its snapshot and training log.
    TrainDraft(Common),
    /// Decode the eval prompts with a trained (or loaded) draft.
    Decode {
        #[command(flatten)]
        common: Common,
        /// Draft snapshot to use instead of training one.
        #[arg(long)]
        draft: Option<PathBuf>,
        /// Sampling temperature; defaults to the first configured one.
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Full train-and-evaluate run; writes the result table.
    Bench(Common),
    /// Sweep one config axis; writes one block of rows per value.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AblationAxis,
        /// Comma-separated values, e.g. `1,0.25,0`.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Re-emit an existing result table, optionally in another format.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: ReportFormat,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output.clone());
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok((cfg, out))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn write_table(table: &ResultTable, out: &Path, stem: &str, format: ReportFormat) -> Result<()> {
    let path = out.join(format!("{stem}.{}", format.extension()));
    emit_report(table, &path, format)?;
    println!("{}", path.display());
    Ok(())
}

fn gen_data(common: &Common) -> Result<()> {
    let (cfg, out) = load(common)?;
    for &seed in &cfg.seeds {
        let pipe = Pipeline::new(&cfg, seed)?;
        let dir = out.join(format!("seed{seed}"));
        std::fs::create_dir_all(&dir)?;
        snapshot::save_target(&dir.join("target.bin"), &pipe.target)?;
        write_jsonl(&dir.join("traces.jsonl"), &pipe.traces()?)?;
        write_jsonl(&dir.join("eval_prompts.jsonl"), &pipe.eval_prompts)?;
        println!("{}", dir.display());
    }
    Ok(())
}

fn train_draft(common: &Common) -> Result<()> {
    let (cfg, out) = load(common)?;
    for &seed in &cfg.seeds {
        let pipe = Pipeline::new(&cfg, seed)?;
        let dir = out.join(format!("seed{seed}"));
        std::fs::create_dir_all(&dir)?;
        let mut log = BufWriter::new(File::create(dir.join("train_log.jsonl"))?);
        let (draft, stats) = pipe.train_draft(&pipe.traces()?, Some(&mut log))?;
        log.flush()?;
        snapshot::save_target(&dir.join("target.bin"), &pipe.target)?;
        snapshot::save_draft(&dir.join("draft.bin"), &draft)?;
        if let (Some(first), Some(last)) = (stats.first(), stats.last()) {
            log::info!(
                "seed {seed}: loss {:.6} -> {:.6} over {} epochs",
                first.mean_loss,
                last.mean_loss,
                stats.len()
            );
        }
        println!("{}", dir.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct DecodeRecord {
    seed: u64,
    prompt: usize,
    tokens: Vec<TokenId>,
    metrics: mmspec::decode::DecodeMetrics,
}

fn run_decode(common: &Common, draft_path: Option<&Path>, temperature: Option<f64>) -> Result<()> {
    let (cfg, out) = load(common)?;
    let tau = temperature.unwrap_or(cfg.temperatures[0]);
    if !(tau >= 0.0) {
        bail!("temperature must be >= 0");
    }
    let mut records = Vec::new();
    for &seed in &cfg.seeds {
        let pipe = Pipeline::new(&cfg, seed)?;
        let draft = match draft_path {
            Some(p) => snapshot::load_draft(p, &pipe.target)
                .with_context(|| format!("loading {}", p.display()))?,
            None => pipe.train_draft(&pipe.traces()?, None)?.0,
        };
        let opts = DecodeOptions {
            max_tokens: cfg.max_new_tokens,
            temperature: tau,
            measure_baseline: cfg.measure_wall_clock,
        };
        let mut rng = SeededRng::with_stream(seed, streams::DECODE);
        for (i, p) in pipe.eval_prompts.iter().enumerate() {
            let (tokens, metrics) = decode(&pipe.target, &draft, p, &opts, &mut rng)?;
            records.push(DecodeRecord {
                seed,
                prompt: i,
                tokens,
                metrics,
            });
        }
    }
    let path = out.join("decode.jsonl");
    write_jsonl(&path, &records)?;
    println!("{}", path.display());
    Ok(())
}

fn report(input: &Path, out: Option<&Path>, format: ReportFormat) -> Result<()> {
    let Some(in_fmt) = ReportFormat::from_path(input) else {
        bail!("cannot tell the format of {} from its extension", input.display());
    };
    let table = parse_report(input, in_fmt)?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
            write_table(&table, dir, stem, format)
        }
        None => {
            print!("{}", table.to_string(format)?);
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::GenData(c) => gen_data(&c),
        Cmd::TrainDraft(c) => train_draft(&c),
        Cmd::Decode {
            common,
            draft,
            temperature,
        } => run_decode(&common, draft.as_deref(), temperature),
        Cmd::Bench(c) => {
            let (cfg, out) = load(&c)?;
            write_table(&run_experiment(&cfg)?, &out, "results", c.format)
        }
        Cmd::Ablate {
            common,
            axis,
            values,
        } => {
            let (cfg, out) = load(&common)?;
            let table = ablate(&cfg, axis, &values)?;
            write_table(&table, &out, &format!("ablate_{}", axis.name()), common.format)
        }
        Cmd::Report { input, out, format } => report(&input, out.as_deref(), format),
    }
}
