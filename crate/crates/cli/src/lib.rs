//! Batch entry points behind the `intentrank` binary.
//!
//! Each subcommand is a `cmd_*` function so tests and scripts can call it
//! without spawning a process. The functions only load, dispatch to the core
//! library, and write files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use intentrank_core::data::{
    group_detections, load_bundle, load_bundle_dir, load_queries, read_json, read_jsonl, write_jsonl, Detection,
    DistractorCheck, GroundTruth, MiningConfig, MiningReport, Query,
};
use intentrank_core::intent::{Feedback, FeedbackRecord, InitMode};
use intentrank_core::metrics::{evaluate_turn_protocol, pair_dataset, score_trace, EvalReport, ScoreTrace};
use intentrank_core::ranking::Aggregation;
use intentrank_core::session::{
    rejection_trace_session, scripted_session, Memory, OracleConfig, RankerVariant, SessionConfig,
};
use intentrank_core::synth::{generate, write_dataset, DatasetLayout, SynthParams};
use intentrank_core::theory::{run_trials, TrialSummary};
use intentrank_service::{ConfigOverrides, ServiceConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "intentrank", version, about = "Interactive region retrieval over precomputed embeddings")]
pub struct Cli {
    /// Repeat for more log output on stderr (RUST_LOG overrides).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the simulated-user turn protocol and report AP per turn.
    Eval(EvalArgs),
    /// Build the ambiguous subset from ground truth and probe detections.
    Mine(MineArgs),
    /// Check the single-distractor resolution bound on random instances.
    VerifyTheory(TheoryArgs),
    /// Record every region's score across a feedback script as CSV.
    Trace(TraceArgs),
    /// Generate a seeded synthetic dataset of ambiguous scenes.
    Synth(SynthArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
}

fn kebab<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

/// Session overrides; anything left unset keeps the library default.
#[derive(Debug, Clone, Default, Args)]
pub struct SessionArgs {
    /// Feedback rounds per session.
    #[arg(long)]
    pub k: Option<u32>,
    /// Text weight when fusing text and reference-image prompts.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Weight of the negative penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// max | mean
    #[arg(long, value_parser = kebab::<Aggregation>)]
    pub aggregation: Option<Aggregation>,
    #[arg(long)]
    pub present_k: Option<usize>,
    #[arg(long, value_name = "BOOL")]
    pub exclude_rejected_from_presentation: Option<bool>,
    /// fused | separate
    #[arg(long, value_parser = kebab::<InitMode>)]
    pub init_mode: Option<InitMode>,
    /// full | stateless
    #[arg(long, value_parser = kebab::<Memory>)]
    pub memory: Option<Memory>,
    /// contrastive | sinkhorn
    #[arg(long, value_parser = kebab::<RankerVariant>)]
    pub variant: Option<RankerVariant>,
    /// Sinkhorn entropic regularization.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
}

impl SessionArgs {
    pub fn config(&self) -> Result<SessionConfig> {
        let overrides = ConfigOverrides {
            k: self.k,
            alpha: self.alpha,
            lambda: self.lambda,
            aggregation: self.aggregation,
            present_k: self.present_k,
            exclude_rejected_from_presentation: self.exclude_rejected_from_presentation,
            init_mode: self.init_mode,
            memory: self.memory,
            variant: self.variant,
            epsilon: self.epsilon,
            max_iters: self.max_iters,
            tol: self.tol,
        };
        let cfg = overrides.apply(SessionConfig::default());
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Dataset directory as written by `synth`.
    #[arg(long, conflicts_with_all = ["bundles", "queries"], required_unless_present = "bundles")]
    pub dataset: Option<PathBuf>,
    /// Directory of bundle manifests.
    #[arg(long, requires = "queries")]
    pub bundles: Option<PathBuf>,
    /// Queries, one JSON object per line.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// JSON object mapping category to split label.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// Write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the AP table here as well as to stdout.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Overlap the simulated user needs to confirm a region.
    #[arg(long, default_value_t = OracleConfig::default().iou_threshold)]
    pub iou_threshold: f64,
    #[command(flatten)]
    pub session: SessionArgs,
}

#[derive(Debug, Clone, Args)]
pub struct MineArgs {
    /// Annotated objects, JSONL.
    #[arg(long)]
    pub gt: PathBuf,
    /// Probe detections, JSONL.
    #[arg(long)]
    pub detections: PathBuf,
    /// Output JSONL of ambiguous samples.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = MiningConfig::default().iou_low)]
    pub iou_low: f64,
    /// Also require each distractor to cover another annotated instance.
    #[arg(long)]
    pub verify_against_gt: bool,
    #[arg(long, default_value_t = MiningConfig::default().gt_match_iou)]
    pub gt_match_iou: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TheoryArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = intentrank_core::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print the summary as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TraceArgs {
    /// Bundle manifest.
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Needed when several queries target the bundle's image.
    #[arg(long)]
    pub query_id: Option<String>,
    /// Feedback events, JSONL, applied in order. Sets k to the script length.
    #[arg(long, conflicts_with = "auto_reject")]
    pub script: Option<PathBuf>,
    /// Instead of a script, reject the best incorrect region N times.
    #[arg(long, value_name = "N")]
    pub auto_reject: Option<u32>,
    /// Keep raw scores instead of min-max normalizing each step.
    #[arg(long)]
    pub raw: bool,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = OracleConfig::default().iou_threshold)]
    pub iou_threshold: f64,
    #[command(flatten)]
    pub session: SessionArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory; must be empty or absent.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Candidate regions per scene.
    #[arg(long)]
    pub regions: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub distractors_min: Option<usize>,
    #[arg(long)]
    pub distractors_max: Option<usize>,
    #[arg(long)]
    pub max_clusters: Option<usize>,
    #[arg(long)]
    pub cluster_offset_deg: Option<f64>,
    /// Angular spread of distractors around their cluster center.
    #[arg(long)]
    pub spread_deg: Option<f64>,
    #[arg(long)]
    pub target_offset_deg: Option<f64>,
    #[arg(long)]
    pub target_azimuth_deg: Option<f64>,
    #[arg(long)]
    pub background_min_deg: Option<f64>,
    #[arg(long)]
    pub background_max_deg: Option<f64>,
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub image_size: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthArgs {
    pub fn params(&self) -> SynthParams {
        let mut p = SynthParams::default();
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { p.$f = v; })* };
        }
        set!(
            scenes, regions, dim, distractors_min, distractors_max, max_clusters, cluster_offset_deg, spread_deg,
            target_offset_deg, target_azimuth_deg, background_min_deg, background_max_deg, categories, image_size, seed
        );
        p
    }
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Append per-session event logs here.
    #[arg(long)]
    pub persist_dir: Option<PathBuf>,
    /// Defaults for new sessions.
    #[command(flatten)]
    pub session: SessionArgs,
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let (bundles_dir, queries_path, splits_path) = match &args.dataset {
        Some(root) => {
            let layout = DatasetLayout::new(root);
            let splits = args.splits.clone().or_else(|| Some(layout.splits()).filter(|p| p.exists()));
            (layout.bundles(), layout.queries(), splits)
        }
        None => (
            args.bundles.clone().context("--bundles is required")?,
            args.queries.clone().context("--queries is required")?,
            args.splits.clone(),
        ),
    };
    let s_cfg = args.session.config()?;
    let o_cfg = OracleConfig {
        iou_threshold: args.iou_threshold,
    };
    o_cfg.validate()?;

    let bundles = load_bundle_dir(&bundles_dir)?;
    let queries = load_queries(&queries_path)?;
    let splits: Option<BTreeMap<String, String>> = splits_path.map(read_json).transpose()?;
    let dataset = pair_dataset(&bundles, &queries)?;
    let report = evaluate_turn_protocol(&dataset, &s_cfg, &o_cfg, splits.as_ref())?;

    if let Some(out) = &args.out {
        write_json_pretty(out, &report)?;
    }
    if let Some(table) = &args.table {
        fs::write(table, report.table()).with_context(|| format!("writing {}", table.display()))?;
    }
    Ok(report)
}

pub fn cmd_mine(args: &MineArgs) -> Result<MiningReport> {
    let gt: Vec<GroundTruth> = read_jsonl(&args.gt)?;
    let detections: Vec<Detection> = read_jsonl(&args.detections)?;
    let cfg = MiningConfig {
        iou_low: args.iou_low,
        check: if args.verify_against_gt {
            DistractorCheck::VerifyAgainstGt
        } else {
            DistractorCheck::CategoryField
        },
        gt_match_iou: args.gt_match_iou,
    };
    let report = intentrank_core::data::mine_ambiguous(&gt, &group_detections(detections), &cfg)?;
    write_jsonl(&args.out, &report.samples)?;
    Ok(report)
}

pub fn cmd_verify_theory(args: &TheoryArgs) -> Result<TrialSummary> {
    Ok(run_trials(args.trials, args.dim, args.seed)?)
}

fn select_query(queries: Vec<Query>, image_id: &str, query_id: Option<&str>) -> Result<Query> {
    let mut matching: Vec<Query> = queries
        .into_iter()
        .filter(|q| q.image_id == image_id && query_id.map_or(true, |id| q.query_id == id))
        .collect();
    match matching.len() {
        1 => Ok(matching.remove(0)),
        0 => bail!("no query targets image {image_id}"),
        n => bail!("{n} queries target image {image_id}; pick one with --query-id"),
    }
}

pub fn cmd_trace(args: &TraceArgs) -> Result<ScoreTrace> {
    let bundle = load_bundle(&args.bundle)?;
    let query = select_query(load_queries(&args.queries)?, bundle.image_id(), args.query_id.as_deref())?;
    let mut cfg = args.session.config()?;
    let transcript = match args.auto_reject {
        Some(steps) => {
            let o_cfg = OracleConfig {
                iou_threshold: args.iou_threshold,
            };
            rejection_trace_session(&bundle, &query, steps, &cfg, &o_cfg)?
        }
        None => {
            let script = match &args.script {
                Some(path) => read_jsonl::<FeedbackRecord>(path)?
                    .into_iter()
                    .map(Feedback::try_from)
                    .collect::<Result<Vec<_>, _>>()?,
                None => Vec::new(),
            };
            cfg.k = (script.len() as u32).max(1);
            scripted_session(&bundle, &query, &script, &cfg)?
        }
    };
    let trace = score_trace(&transcript, !args.raw)?;
    match &args.out {
        Some(path) => {
            let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            trace.write_csv(BufWriter::new(f))?;
        }
        None => trace.write_csv(std::io::stdout().lock())?,
    }
    Ok(trace)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<DatasetLayout> {
    if args.out.exists() && fs::read_dir(&args.out)?.next().is_some() {
        bail!("{} is not empty", args.out.display());
    }
    let ds = generate(&args.params())?;
    Ok(write_dataset(&ds, &args.out)?)
}

pub fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        defaults: args.session.config()?,
        persist_dir: args.persist_dir.clone(),
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(intentrank_service::serve(args.addr, config))?;
    Ok(())
}

/// Runs one parsed command, printing its summary to `out`.
pub fn run(cli: &Cli, out: &mut impl Write) -> Result<()> {
    match &cli.command {
        Command::Eval(a) => {
            let report = cmd_eval(a)?;
            write!(out, "{}", report.table())?;
        }
        Command::Mine(a) => {
            let report = cmd_mine(a)?;
            writeln!(
                out,
                "{} ambiguous samples written to {} ({} objects skipped)",
                report.samples.len(),
                a.out.display(),
                report.skipped.len()
            )?;
        }
        Command::VerifyTheory(a) => {
            let s = cmd_verify_theory(a)?;
            if a.json {
                writeln!(out, "{}", serde_json::to_string(&s)?)?;
            } else {
                writeln!(out, "trials {} dim {} seed {}", s.trials, s.dim, s.seed)?;
                writeln!(out, "passed {} failed {} resampled {}", s.passed, s.failed, s.resampled)?;
                writeln!(out, "max lambda_min {}", s.max_lambda_min)?;
            }
            if !s.all_passed() {
                bail!("{} of {} trials failed", s.failed, s.trials);
            }
        }
        Command::Trace(a) => {
            let trace = cmd_trace(a)?;
            if let Some(path) = &a.out {
                writeln!(
                    out,
                    "{} regions x {} steps written to {}",
                    trace.region_ids.len(),
                    trace.steps(),
                    path.display()
                )?;
            }
        }
        Command::Synth(a) => {
            let layout = cmd_synth(a)?;
            writeln!(out, "dataset written to {}", layout.root.display())?;
        }
        Command::Serve(a) => cmd_serve(a)?,
    }
    Ok(())
}
