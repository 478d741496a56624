//! Command-line front end. Every command reads and writes files only.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;

use crate::audio::{fix_length, parse_protocol, read_wav, TrialRecord};
use crate::config::{keys_help, PipelineConfig, Resolved};
use crate::error::{Error, Result};
use crate::features::{read_cache, write_cache, FeatureMap, LfbExtractor};
use crate::fusion::{align, fit_svm_with_info, FusionModel};
use crate::metrics::{per_attack_report, read_scores, write_scores, ScoreSet};
use crate::model::Model;
use crate::synth::{generate, write_corpus, AttackFamily, SynthSpec};
use crate::training::{train, Dataset};

#[derive(Debug, Parser)]
#[command(name = "gatspoof", version, about = "Graph-attention spoofing countermeasure pipeline")]
pub struct Cli {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides `run.workers`.
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    /// Overrides `model.system`.
    #[arg(long, global = true, value_name = "SYSTEM")]
    pub system: Option<String>,
    /// Set any config key, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute LFB features for every trial of a protocol.
    Extract {
        #[arg(long)]
        protocol: PathBuf,
        /// Directory holding `<utt_id>.wav`.
        #[arg(long)]
        audio_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on `paths.train_*`, select on `paths.dev_*`.
    Train,
    /// Score a protocol's trials from a feature cache.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pooled and per-attack EER and min t-DCF of a score file.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        protocol: PathBuf,
        /// Also write the key/value report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write the comma-separated table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fit or apply SVM score fusion.
    #[command(subcommand)]
    Fuse(FuseCommand),
    /// Write a synthetic labelled corpus.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        bonafide: usize,
        #[arg(long, default_value_t = 16)]
        spoof: usize,
        /// Comma-separated families: white-noise, band-noise, clipped-harmonic.
        #[arg(long, default_value = "white-noise,band-noise,clipped-harmonic")]
        attacks: String,
    },
    /// Print the effective configuration.
    Config,
}

#[derive(Debug, Subcommand)]
pub enum FuseCommand {
    /// Learn fusion weights from development scores.
    Fit(FuseArgs),
    /// Fuse score files with a saved model.
    Apply(FuseArgs),
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub protocol: PathBuf,
    /// Fusion model file (written by `fit`, read by `apply`).
    #[arg(long)]
    pub model: PathBuf,
    /// Fused score file (`apply` only).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score files as `name=path`, one per system.
    #[arg(required = true, num_args = 1.., value_name = "NAME=PATH")]
    pub systems: Vec<String>,
}

/// clap command with the config key table appended to the help text.
pub fn command() -> clap::Command {
    Cli::command().after_help(keys_help())
}

/// Parse `args` (including the program name) and run.
pub fn run<I, T>(args: I, env: impl IntoIterator<Item = (String, String)>, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args).map_err(|e| Error::Config(e.to_string()))?;
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Error::Config(e.to_string()))?;
    execute(&cli, env, out)
}

/// Layer defaults, config file, environment and flags.
pub fn load_layers(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(p) = &cli.config {
        cfg.merge_file(p)?;
    }
    cfg.merge_env(env)?;
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = cli.seed {
        cfg.set("run.seed", &s.to_string())?;
    }
    if let Some(w) = cli.workers {
        cfg.set("run.workers", &w.to_string())?;
    }
    if let Some(s) = &cli.system {
        cfg.set("model.system", s)?;
    }
    Ok(cfg)
}

/// [`load_layers`], then parse and validate.
pub fn load_config(cli: &Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<Resolved> {
    load_layers(cli, env)?.resolve()
}

fn say(out: &mut dyn Write, msg: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(msg).and_then(|_| out.write_all(b"\n")).map_err(|e| Error::io("<stdout>", e))
}

pub fn execute(cli: &Cli, env: impl IntoIterator<Item = (String, String)>, out: &mut dyn Write) -> Result<()> {
    let layers = load_layers(cli, env)?;
    let cfg = layers.resolve()?;
    match &cli.command {
        Command::Extract { protocol, audio_dir, out: cache } => cmd_extract(&cfg, protocol, audio_dir, cache, out),
        Command::Train => cmd_train(&cfg, out),
        Command::Score {
            checkpoint,
            protocol,
            features,
            out: scores,
        } => cmd_score(&cfg, checkpoint, protocol, features, scores, out),
        Command::Evaluate {
            scores,
            protocol,
            report,
            csv,
        } => cmd_evaluate(&cfg, scores, protocol, report.as_deref(), csv.as_deref(), out),
        Command::Fuse(FuseCommand::Fit(a)) => cmd_fuse_fit(&cfg, a, out),
        Command::Fuse(FuseCommand::Apply(a)) => cmd_fuse_apply(a, out),
        Command::Synth {
            out_dir,
            bonafide,
            spoof,
            attacks,
        } => cmd_synth(&cfg, out_dir, *bonafide, *spoof, attacks, out),
        Command::Config => out.write_all(layers.to_text().as_bytes()).map_err(|e| Error::io("<stdout>", e)),
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

pub fn cmd_extract(cfg: &Resolved, protocol: &Path, audio_dir: &Path, cache: &Path, out: &mut dyn Write) -> Result<()> {
    let records = parse_protocol(protocol)?;
    let extractor = LfbExtractor::new(cfg.features.clone(), crate::audio::PIPELINE_SAMPLE_RATE)?;
    let one = |r: &TrialRecord| -> Result<FeatureMap> {
        let w = read_wav(&audio_dir.join(format!("{}.wav", r.utt_id)))?;
        w.require_pipeline_rate()?;
        extractor.extract(&fix_length(&w, cfg.target_len)?)
    };
    let results: Vec<Result<FeatureMap>> = pool(cfg.workers)?.install(|| records.par_iter().map(one).collect());
    let mut features = Vec::with_capacity(records.len());
    let mut failures = Vec::new();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(f) => features.push((r.utt_id.clone(), f)),
            Err(e) => failures.push(format!("{}: {e}", r.utt_id)),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Format(format!(
            "{} of {} utterances failed:\n  {}",
            failures.len(),
            records.len(),
            failures.join("\n  ")
        )));
    }
    write_cache(cache, &features)?;
    say(out, format_args!("extracted {} utterances to {}", features.len(), cache.display()))
}

fn load_set(protocol: &Path, cache: &Path) -> Result<(Vec<TrialRecord>, Dataset)> {
    let records = parse_protocol(protocol)?;
    let data = Dataset::from_records(&records, read_cache(cache)?)?;
    Ok((records, data))
}

pub fn cmd_train(cfg: &Resolved, out: &mut dyn Write) -> Result<()> {
    let p = &cfg.paths;
    let (_, train_set) = load_set(&p.train_protocol, &p.train_features)?;
    let (_, dev_set) = load_set(&p.dev_protocol, &p.dev_features)?;
    let (b, s) = train_set.class_counts();
    say(out, format_args!("training {} on {} bona fide / {} spoof trials", cfg.model.system, b, s))?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let summary = train(model, cfg.train.clone(), &train_set, &dev_set, &cfg.tdcf, &p.checkpoint, &p.log)?;
    let best = &summary.epochs[summary.best_epoch - 1];
    say(
        out,
        format_args!(
            "best epoch {} (dev EER {}, dev min t-DCF {}) saved to {}",
            best.epoch,
            best.dev_eer,
            best.dev_min_tdcf,
            summary.checkpoint.display()
        ),
    )
}

/// Eval-mode scores in protocol order; fixed-size chunks make the result
/// independent of the worker count.
pub fn score_dataset(model: &Model, data: &Dataset, chunk: usize, workers: usize) -> Result<Vec<(String, f64)>> {
    let chunks: Vec<&[crate::training::Example]> = data.items.chunks(chunk.max(1)).collect();
    let scored: Vec<Result<Vec<f64>>> = pool(workers)?.install(|| {
        chunks
            .par_iter()
            .map(|c| model.score(&c.iter().map(|e| &e.features).collect::<Vec<_>>()))
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for (c, s) in chunks.iter().zip(scored) {
        out.extend(c.iter().map(|e| e.utt_id.clone()).zip(s?));
    }
    Ok(out)
}

pub fn cmd_score(cfg: &Resolved, checkpoint: &Path, protocol: &Path, features: &Path, scores: &Path, out: &mut dyn Write) -> Result<()> {
    let (_, data) = load_set(protocol, features)?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    model.load(checkpoint)?;
    let result = score_dataset(&model, &data, cfg.train.batch_size, cfg.workers)?;
    write_scores(scores, &result)?;
    say(out, format_args!("scored {} trials to {}", result.len(), scores.display()))
}

pub fn cmd_evaluate(
    cfg: &Resolved,
    scores: &Path,
    protocol: &Path,
    report: Option<&Path>,
    csv: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let set = ScoreSet::from_scores(&read_scores(scores)?, &parse_protocol(protocol)?)?;
    let r = per_attack_report(&set, &cfg.tdcf)?;
    let text = r.to_text();
    if let Some(p) = report {
        std::fs::write(p, &text).map_err(|e| Error::io(p, e))?;
    }
    if let Some(p) = csv {
        std::fs::write(p, r.to_csv()).map_err(|e| Error::io(p, e))?;
    }
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn read_systems(specs: &[String]) -> Result<Vec<(String, Vec<(String, f64)>)>> {
    let mut systems = Vec::with_capacity(specs.len());
    for s in specs {
        let (name, path) = s.split_once('=').ok_or_else(|| Error::Config(format!("expected NAME=PATH, got `{s}`")))?;
        if systems.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("system `{name}` given twice")));
        }
        systems.push((name.to_string(), read_scores(Path::new(path))?));
    }
    Ok(systems)
}

pub fn cmd_fuse_fit(cfg: &Resolved, a: &FuseArgs, out: &mut dyn Write) -> Result<()> {
    let data = align(&read_systems(&a.systems)?, &parse_protocol(&a.protocol)?)?;
    if data.n_systems() < 2 {
        return Err(Error::Config("fusion needs at least two systems".into()));
    }
    if data.n_trials() <= data.n_systems() {
        say(out, format_args!("warning: {} trials for {} systems", data.n_trials(), data.n_systems()))?;
    }
    let (model, info) = fit_svm_with_info(&data, &cfg.svm)?;
    if !info.converged {
        say(out, format_args!("warning: SVM stopped after {} iterations, violation {}", info.iterations, info.violation))?;
    }
    model.save(&a.model)?;
    let eer = model.fuse_set(&data)?.eer()?;
    say(out, format_args!("fusion weights {:?}, bias {}; training EER {}", model.weights, model.bias, eer))
}

pub fn cmd_fuse_apply(a: &FuseArgs, out: &mut dyn Write) -> Result<()> {
    let model = FusionModel::load(&a.model)?;
    let systems = read_systems(&a.systems)?;
    let names: Vec<&str> = systems.iter().map(|(n, _)| n.as_str()).collect();
    if names != model.systems.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Config(format!("fusion model expects systems {:?}, got {names:?}", model.systems)));
    }
    let scores = a.out.as_ref().ok_or_else(|| Error::Config("`fuse apply` needs --out".into()))?;
    let data = align(&systems, &parse_protocol(&a.protocol)?)?;
    let fused = model.fuse(&data)?;
    write_scores(scores, &fused)?;
    say(out, format_args!("fused {} trials to {}", fused.len(), scores.display()))
}

pub fn cmd_synth(cfg: &Resolved, out_dir: &Path, bonafide: usize, spoof: usize, attacks: &str, out: &mut dyn Write) -> Result<()> {
    let attacks = attacks.split(',').map(|a| a.trim().parse()).collect::<Result<Vec<AttackFamily>>>()?;
    let spec = SynthSpec {
        n_bonafide: bonafide,
        n_spoof: spoof,
        attacks,
        seed: cfg.seed,
        len: cfg.target_len,
    };
    let corpus = generate(&spec)?;
    let protocol = out_dir.join("protocol.txt");
    write_corpus(&corpus, &out_dir.join("wav"), &protocol)?;
    say(out, format_args!("wrote {} utterances and {}", corpus.len(), protocol.display()))
}

/// Entry point for the binary: exit status 0 on success, 1 on failure,
/// 2 on usage errors.
pub fn main_entry() -> i32 {
    let matches = match command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = Cli::from_arg_matches(&matches)
        .map_err(|e| Error::Config(e.to_string()))
        .and_then(|cli| execute(&cli, std::env::vars(), &mut std::io::stdout().lock()));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
