//! Command-line front end: corpus generation, training, evaluation, sweeps,
//! the distribution probe and the gradient self-check.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ipalab::augment::{AugmentConfig, SpecPolicy};
use ipalab::data::{gen_corpus, make_batch, Corpus, CorpusConfig};
use ipalab::probe::probe_distribution;
use ipalab::trainer::{self, gradcheck, Checkpoint, EvalOptions, TrainConfig};
use ipalab::{Error, Result};

#[derive(Parser)]
#[command(name = "ipalab", version, about = "Interpolation augmentation lab for toy speech-to-text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/dev/test corpus
    GenData(Common),
    /// Train a model; writes log.jsonl, report.json and best.ckpt under --out
    Train(Common),
    /// Score a checkpoint on a manifest
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest to score (defaults to the dev manifest the checkpoint was trained with)
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train one model per (alpha, gamma) cell; writes sweep.csv under --out
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,1.0,2.0")]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        gammas: Vec<f64>,
    },
    /// Measure original/interpolated separation per encoder layer
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Encoder layers (0 = projected input); defaults to all
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        rows: usize,
        #[arg(long, default_value_t = 0.2)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Fix every mixing weight instead of sampling
        #[arg(long)]
        lambda: Option<f64>,
        /// Apply the default SpecAugment policy before mixing
        #[arg(long)]
        spec_augment: bool,
    },
    /// Finite-difference check of the full objective on a tiny model
    GradCheck(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn train_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => {
            let cfg: CorpusConfig = match &c.config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str(&text)?
                }
                None => CorpusConfig::default(),
            };
            let dir = out_dir(&c)?;
            let manifests = gen_corpus(&cfg, c.seed.unwrap_or(0), &dir)?;
            for m in &manifests {
                println!("{} utterances -> {}", m.records.len(), m.root.display());
            }
            Ok(())
        }
        Command::Train(c) => {
            let cfg = train_config(&c)?;
            let dir = out_dir(&c)?;
            let log_path = dir.join("log.jsonl");
            let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
            let mut write_err = None;
            let (report, ck) = trainer::train(&cfg, &mut |ev| {
                if let Err(e) = writeln!(log, "{ev}") {
                    write_err.get_or_insert(e);
                }
                if ev["event"] == "eval" {
                    eprintln!("step {:>5}  dev WER {:.4}", ev["step"], ev["wer"].as_f64().unwrap_or(f64::NAN));
                }
            })?;
            if let Some(e) = write_err {
                return Err(Error::io(&log_path, e));
            }
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            ck.save(&dir.join("best.ckpt"))?;
            let summary = json!({
                "best_wer": report.best_wer,
                "best_step": report.best_step,
                "steps": report.steps.len(),
                "stop": report.stop,
                "wall_clock_secs": report.wall_clock_secs,
            });
            write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&summary)?)?;
            println!("{summary}");
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = ck.train_config.clone().unwrap_or_default();
            let manifest = manifest.unwrap_or_else(|| cfg.dev_manifest.clone());
            let corpus = Corpus::load(&manifest, cfg.cmvn)?;
            let ev = trainer::evaluate(&ck, &corpus, &EvalOptions::from_config(&cfg))?;
            let result = json!({
                "manifest": manifest,
                "wer": ev.wer(),
                "edits": ev.counts.edits,
                "ref_tokens": ev.counts.ref_tokens,
                "utterances": ev.counts.utterances,
                "mean_loss": ev.mean_loss,
            });
            if common.out.is_some() {
                let dir = out_dir(&common)?;
                write_text(&dir.join("eval.json"), &serde_json::to_string_pretty(&result)?)?;
            }
            println!("{result}");
            Ok(())
        }
        Command::Sweep { common, alphas, gammas } => {
            let cfg = train_config(&common)?;
            let dir = out_dir(&common)?;
            let (tr, dev) = trainer::load_corpora(&cfg)?;
            let rows = trainer::sweep(&cfg, &alphas, &gammas, &tr, &dev)?;
            let csv = trainer::sweep_csv(&rows);
            write_text(&dir.join("sweep.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::Probe {
            common,
            checkpoint,
            manifest,
            layers,
            rows,
            alpha,
            gamma,
            lambda,
            spec_augment,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = ck.train_config.clone().unwrap_or_default();
            let manifest = manifest.unwrap_or_else(|| cfg.dev_manifest.clone());
            let corpus = Corpus::load(&manifest, cfg.cmvn)?;
            let ids: Vec<&str> = corpus.ids().into_iter().take(rows).collect();
            let batch = make_batch(&corpus, &ids)?;
            let aug = AugmentConfig {
                alpha,
                gamma,
                lambda_override: lambda,
                spec_policy: spec_augment.then(SpecPolicy::default),
                ..AugmentConfig::default()
            };
            let layers = if layers.is_empty() {
                (0..=ck.params.config().enc_layers).collect()
            } else {
                layers
            };
            let report = probe_distribution(&ck.params, &batch, &aug, &layers, common.seed.unwrap_or(cfg.seed))?;
            let csv = report.to_csv();
            if common.out.is_some() {
                let dir = out_dir(&common)?;
                write_text(&dir.join("probe.csv"), &csv)?;
            }
            print!("{csv}");
            Ok(())
        }
        Command::GradCheck(c) => {
            let seed = c.seed.unwrap_or(0);
            let model = gradcheck::tiny_model_config();
            let mb = gradcheck::tiny_mix_batch(seed)?;
            let mut worst: f64 = 0.0;
            for (name, obj) in gradcheck::objective_variants() {
                let err = gradcheck::check_objective(&model, &mb, &obj, seed)?;
                println!("{name:<16} max relative error {err:.3e}");
                worst = worst.max(err);
            }
            if worst > 1e-4 {
                return Err(Error::Aborted {
                    step: 0,
                    reason: format!("gradient check failed: {worst:.3e} > 1e-4"),
                });
            }
            Ok(())
        }
    }
}
