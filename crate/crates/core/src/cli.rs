//! Command-line front end. Commands talk to each other through files only.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchorlab::{
    coverage_csv, coverage_sweep, input_size_grid, lesion_population, AnchorConfig, FpnConfig, Matcher,
    AREA_LOG_SIGMA,
};
use crate::annotations::{
    apply_crop_transform, count_by_category, load_dataset, save_dataset, CategoryCounts, CropWindow, DatasetFormat,
    DatasetSnapshot, Split,
};
use crate::detector::{DetectorHandle, ExternalDetector, SyntheticModel};
use crate::error::{Error, Result};
use crate::evaluation::{sensitivity, EvalProtocol};
use crate::orchestrator::{
    round_dir, run_rounds, threshold_study, RoundConfig, RoundState, RunOutcome, StopReason,
};
use crate::par;
use crate::report;
use crate::scenario::{generate, ScenarioConfig};
use crate::selection::{decile_grid, read_detections, sweep_thresholds, SelectionCriterion};

#[derive(Debug, Parser)]
#[command(name = "pseudolab", version, about = "Iterative pseudo-labeling for lesion detection datasets")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Also write hidden truth into dataset files (simulation debugging only).
    #[arg(long, global = true)]
    pub include_hidden: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Native,
    Coco,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert an annotation file to the native format, optionally cropping.
    Ingest {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "native")]
        format: FormatArg,
        /// Crop window `left,top,width,height`.
        #[arg(long, conflicts_with = "center_crop")]
        crop: Option<String>,
        /// Centered crop `WIDTHxHEIGHT`, e.g. `2136x2136`.
        #[arg(long)]
        center_crop: Option<String>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Generate a partially labeled dataset and run the rounds with the
    /// synthetic detector.
    Simulate,
    /// Run the rounds on dataset files with the configured detector.
    Round {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Per-category sensitivity of detections against a dataset.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        detections: PathBuf,
    },
    /// Pseudo-label counts over a threshold grid.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Comma-separated thresholds; defaults to 0, 0.1, ..., 0.9.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Anchor coverage of synthetic lesion populations.
    Coverage {
        /// Comma-separated input sizes; defaults to 800..2000 step 200.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<u32>,
        #[arg(long, default_value_t = 2000)]
        per_category: usize,
        #[arg(long, default_value_t = AREA_LOG_SIGMA)]
        sigma: f64,
        /// `cf` or `iou<t>`, comma-separated.
        #[arg(long, value_delimiter = ',', default_value = "cf")]
        matcher: Vec<String>,
    },
    /// Re-render the report of a finished run directory.
    Report {
        run: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKindConfig {
    #[default]
    Synthetic,
    External,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: DetectorKindConfig,
    /// Program and leading arguments of an external detector.
    pub command: Option<Vec<String>>,
    pub synthetic_params: Option<SyntheticModel>,
    pub timeout_secs: Option<u64>,
    pub workdir: Option<PathBuf>,
    pub env_allowlist: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Run configuration file. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub p_initial: f64,
    pub p_step: f64,
    pub m_stop: usize,
    pub max_rounds: u32,
    pub criterion: SelectionCriterion,
    pub evaluate: bool,
    pub protocol: EvalProtocol,
    pub detector: DetectorConfig,
    pub paths: PathsConfig,
    pub scenario: ScenarioConfig,
    /// Thresholds for a one-off second-round comparison; empty skips it.
    pub study_thresholds: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = RoundConfig::default();
        Self {
            p_initial: r.p_initial,
            p_step: r.p_step,
            m_stop: r.m_stop,
            max_rounds: r.max_rounds,
            criterion: r.criterion,
            evaluate: r.evaluate,
            protocol: r.protocol,
            detector: DetectorConfig::default(),
            paths: PathsConfig::default(),
            scenario: ScenarioConfig::default(),
            study_thresholds: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            p_initial: self.p_initial,
            p_step: self.p_step,
            m_stop: self.m_stop,
            max_rounds: self.max_rounds,
            criterion: self.criterion,
            evaluate: self.evaluate,
            protocol: self.protocol,
        }
    }

    fn apply_seed(&mut self, seed: u64) {
        self.scenario.seed = seed;
        self.detector.synthetic_params.get_or_insert_with(SyntheticModel::default).seed = seed;
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.paths.train,
            &mut self.paths.val,
            &mut self.paths.out,
            &mut self.detector.workdir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    fn seeds(&self) -> serde_json::Value {
        serde_json::json!({
            "scenario": self.scenario.seed,
            "detector": self.detector.synthetic_params.as_ref().map_or(SyntheticModel::default().seed, |m| m.seed),
        })
    }
}

/// Provenance record written once into every output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the effective configuration as JSON.
    pub config_digest: String,
    pub seeds: serde_json::Value,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

struct Context {
    config: RunConfig,
    seeds: serde_json::Value,
    out: Option<PathBuf>,
    include_hidden: bool,
    started: u64,
    command: &'static str,
}

impl Context {
    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} needs an output directory (--out)", self.command)))
    }

    fn write_manifest(&self, dir: &Path) -> Result<()> {
        let digest = hex::encode(Sha256::digest(to_json(&self.config).as_bytes()));
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_digest: digest,
            seeds: self.seeds.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        write_text(&dir.join("manifest.json"), &to_json(&manifest))
    }

    /// Writes `name` under the output directory, or prints it when no
    /// directory was given.
    fn emit(&self, name: &str, text: &str) -> Result<()> {
        match &self.out {
            Some(dir) => write_text(&dir.join(name), text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn finish(&self) -> Result<()> {
        match &self.out {
            Some(dir) => self.write_manifest(dir),
            None => Ok(()),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

fn parse_crop(spec: &str) -> Result<CropWindow> {
    let parts: Vec<u32> = spec
        .split(',')
        .map(|p| p.trim().parse::<u32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("crop {spec:?} is not left,top,width,height")))?;
    match parts[..] {
        [left, top, width, height] if width > 0 && height > 0 => Ok(CropWindow { left, top, width, height }),
        _ => Err(Error::Config(format!("crop {spec:?} is not left,top,width,height"))),
    }
}

fn parse_size(spec: &str) -> Result<(u32, u32)> {
    let bad = || Error::Config(format!("size {spec:?} is not WIDTHxHEIGHT"));
    let (w, h) = spec.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

fn cmd_ingest(
    ctx: &Context,
    input: &Path,
    format: FormatArg,
    crop: Option<&str>,
    center_crop: Option<&str>,
    split: SplitArg,
) -> Result<()> {
    let format = match format {
        FormatArg::Native => DatasetFormat::NativeJson,
        FormatArg::Coco => DatasetFormat::CocoLikeJson,
    };
    let (mut snapshot, load) = load_dataset(input, format)?;
    if format == DatasetFormat::CocoLikeJson {
        let split = match split {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
        };
        snapshot = snapshot.with_split(split);
    }
    let mut crop_report = None;
    let window = match (crop, center_crop) {
        (Some(c), _) => Some(parse_crop(c)?),
        (None, Some(s)) => {
            let (w, h) = parse_size(s)?;
            let first = snapshot
                .images()
                .first()
                .ok_or_else(|| Error::InvalidInput("dataset has no images to crop".into()))?;
            Some(CropWindow::centered(first.width, first.height, w, h)?)
        }
        _ => None,
    };
    if let Some(window) = window {
        let (cropped, r) = apply_crop_transform(&snapshot, window)?;
        snapshot = cropped;
        crop_report = Some(r);
    }
    let summary = serde_json::json!({
        "images": snapshot.images().len(),
        "load": load,
        "crop": crop_report,
        "counts": count_by_category(&snapshot, None),
    });
    let dir = ctx.out_dir()?;
    save_dataset(&snapshot, &dir.join("dataset.json"), ctx.include_hidden)?;
    write_text(&dir.join("load_report.json"), &to_json(&summary))?;
    println!("{}", to_json(&summary).trim_end());
    ctx.finish()
}

fn build_detector(cfg: &DetectorConfig, out: &Path) -> Result<DetectorHandle> {
    match cfg.kind {
        DetectorKindConfig::Synthetic => DetectorHandle::synthetic(cfg.synthetic_params.clone().unwrap_or_default()),
        DetectorKindConfig::External => {
            let command = cfg
                .command
                .clone()
                .filter(|c| !c.is_empty())
                .ok_or_else(|| Error::Config("external detector needs a command".into()))?;
            let workdir = cfg.workdir.clone().unwrap_or_else(|| out.join("detector"));
            let mut ext = ExternalDetector::new(command, workdir);
            if let Some(secs) = cfg.timeout_secs {
                ext = ext.with_timeout(Duration::from_secs(secs));
            }
            if let Some(env) = &cfg.env_allowlist {
                ext = ext.with_env_allowlist(env.clone());
            }
            DetectorHandle::external(ext)
        }
    }
}

/// Writes the tables of a finished run into `dir`.
pub fn write_run_report(dir: &Path, rounds: &[RoundState], stop: Option<StopReason>) -> Result<()> {
    write_text(&dir.join("rounds.csv"), &report::rounds_csv(rounds))?;
    write_text(&dir.join("rounds.md"), &report::rounds_markdown(rounds, stop))?;
    if let Some(last) = rounds.last() {
        write_text(&dir.join("ugt_final.csv"), &report::ugt_counts_csv(&[("final", last.dstar_pseudo_counts)]))?;
    }
    let sens: Vec<(String, [Option<f64>; 4])> = rounds
        .iter()
        .filter_map(|r| r.eval_summary.as_ref().map(|t| (format!("round{}", r.round_index), t.sensitivities())))
        .collect();
    if !sens.is_empty() {
        write_text(&dir.join("sensitivity.csv"), &report::sensitivity_csv(&sens))?;
    }
    Ok(())
}

fn finish_run(ctx: &Context, out: &Path, outcome: &RunOutcome) -> Result<()> {
    let summary = serde_json::json!({
        "stop_reason": outcome.stop_reason,
        "rounds": outcome.rounds.len(),
        "final_counts": count_by_category(&outcome.final_dataset, None),
        "final_pseudo_counts": outcome.rounds.last().map(|r| r.dstar_pseudo_counts),
    });
    write_text(&out.join("summary.json"), &to_json(&summary))?;
    save_dataset(&outcome.final_dataset, &out.join("final_dataset.json"), ctx.include_hidden)?;
    write_run_report(&out.join("report"), &outcome.rounds, Some(outcome.stop_reason))?;
    print!("{}", report::rounds_markdown(&outcome.rounds, Some(outcome.stop_reason)));
    ctx.write_manifest(out)
}

fn cmd_simulate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let out = ctx.out_dir()?;
    let (train, val) = generate(&cfg.scenario)?;
    save_dataset(&train, &out.join("scenario").join("train.json"), ctx.include_hidden)?;
    save_dataset(&val, &out.join("scenario").join("val.json"), ctx.include_hidden)?;
    let detector = build_detector(&cfg.detector, out)?;
    let rounds = cfg.round_config();
    let outcome = run_rounds(&train, Some(&val), &detector, &rounds, Some(out))?;
    if !cfg.study_thresholds.is_empty() {
        let rows = threshold_study(
            &train,
            &val,
            &detector,
            &cfg.criterion,
            &cfg.study_thresholds,
            &cfg.protocol,
        )?;
        write_text(&out.join("report").join("threshold_study.csv"), &report::threshold_study_csv(&rows))?;
    }
    finish_run(ctx, out, &outcome)
}

fn load_native(path: &Path) -> Result<DatasetSnapshot> {
    let (snapshot, report) = load_dataset(path, DatasetFormat::NativeJson)?;
    if report.rejected() > 0 {
        log::warn!("{}: rejected {} annotations", path.display(), report.rejected());
    }
    Ok(snapshot)
}

fn cmd_round(ctx: &Context, train: Option<&Path>, val: Option<&Path>) -> Result<()> {
    let cfg = &ctx.config;
    let out = ctx.out_dir()?;
    let train_path = train
        .or(cfg.paths.train.as_deref())
        .ok_or_else(|| Error::Config("round needs a training dataset (--train or paths.train)".into()))?;
    let train = load_native(train_path)?;
    let val = match val.or(cfg.paths.val.as_deref()) {
        Some(p) => Some(load_native(p)?),
        None => None,
    };
    let mut rounds = cfg.round_config();
    rounds.evaluate &= val.is_some();
    let detector = build_detector(&cfg.detector, out)?;
    let outcome = run_rounds(&train, val.as_ref(), &detector, &rounds, Some(out))?;
    finish_run(ctx, out, &outcome)
}

fn cmd_evaluate(ctx: &Context, dataset: &Path, detections: &Path) -> Result<()> {
    let snapshot = load_native(dataset)?;
    let dets = read_detections(detections)?;
    let table = sensitivity(&dets, &snapshot, &ctx.config.protocol)?;
    let rows = vec![("sensitivity".to_string(), table.sensitivities())];
    if let Some(dir) = &ctx.out {
        write_text(&dir.join("sensitivity.json"), &to_json(&table))?;
    }
    ctx.emit("sensitivity.csv", &report::sensitivity_csv(&rows))?;
    ctx.finish()
}

fn cmd_sweep(ctx: &Context, dataset: &Path, detections: &Path, grid: &[f64]) -> Result<()> {
    let snapshot = load_native(dataset)?;
    let dets = read_detections(detections)?;
    let grid = if grid.is_empty() { decile_grid() } else { grid.to_vec() };
    let table = sweep_thresholds(&dets, &snapshot, &ctx.config.criterion, &grid)?;
    if let Some(dir) = &ctx.out {
        write_text(&dir.join("sweep.md"), &report::sweep_markdown(&table))?;
    }
    ctx.emit("sweep.csv", &table.to_csv())?;
    ctx.finish()
}

fn cmd_coverage(ctx: &Context, sizes: &[u32], per_category: usize, sigma: f64, matchers: &[String]) -> Result<()> {
    let sizes = if sizes.is_empty() { input_size_grid() } else { sizes.to_vec() };
    let matchers = matchers.iter().map(|m| Matcher::parse(m)).collect::<Result<Vec<_>>>()?;
    let population = lesion_population(&CategoryCounts([per_category; 4]), ctx.config.scenario.seed, sigma)?;
    let pyramids = [
        ("standard".to_string(), FpnConfig::standard()),
        ("deeper".to_string(), FpnConfig::deeper()),
    ];
    let rows = coverage_sweep(&population, &sizes, &pyramids, &AnchorConfig::default(), &matchers)?;
    ctx.emit("coverage.csv", &coverage_csv(&rows))?;
    ctx.finish()
}

fn read_round_states(run: &Path) -> Result<Vec<RoundState>> {
    let mut states = Vec::new();
    for k in 1.. {
        let path = round_dir(run, k).join("state.json");
        if !path.exists() {
            break;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        states.push(serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e))?);
    }
    if states.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no round states", run.display())));
    }
    Ok(states)
}

fn cmd_report(ctx: &Context, run: &Path) -> Result<()> {
    let states = read_round_states(run)?;
    let stop = std::fs::read_to_string(run.join("summary.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| serde_json::from_value::<StopReason>(v["stop_reason"].clone()).ok());
    match &ctx.out {
        Some(dir) => {
            write_run_report(dir, &states, stop)?;
            ctx.write_manifest(dir)
        }
        None => {
            print!("{}", report::rounds_markdown(&states, stop));
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.apply_seed(seed);
    }
    let out = cli.out.clone().or_else(|| config.paths.out.clone());
    let command = match &cli.command {
        Command::Ingest { .. } => "ingest",
        Command::Simulate => "simulate",
        Command::Round { .. } => "round",
        Command::Evaluate { .. } => "evaluate",
        Command::Sweep { .. } => "sweep",
        Command::Coverage { .. } => "coverage",
        Command::Report { .. } => "report",
    };
    let ctx = Context {
        seeds: config.seeds(),
        config,
        out,
        include_hidden: cli.include_hidden,
        started: unix_now(),
        command,
    };
    par::with_threads(cli.threads, || match &cli.command {
        Command::Ingest { input, format, crop, center_crop, split } => {
            cmd_ingest(&ctx, input, *format, crop.as_deref(), center_crop.as_deref(), *split)
        }
        Command::Simulate => cmd_simulate(&ctx),
        Command::Round { train, val } => cmd_round(&ctx, train.as_deref(), val.as_deref()),
        Command::Evaluate { dataset, detections } => cmd_evaluate(&ctx, dataset, detections),
        Command::Sweep { dataset, detections, grid } => cmd_sweep(&ctx, dataset, detections, grid),
        Command::Coverage { sizes, per_category, sigma, matcher } => {
            cmd_coverage(&ctx, sizes, *per_category, *sigma, matcher)
        }
        Command::Report { run } => cmd_report(&ctx, run),
    })
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
