//! Command-line surface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lgcap_core::forgetting::{average_forgetting, emit_report, MetricMatrix, ReportStyle, ResultsFile, TABLE_METRICS};
use lgcap_core::generator::{GenerateOptions, PixelNorm, MAX_TOKENS};
use lgcap_core::split::{build_contcap_split, build_ratt_split, parse_task_defs, Manifest, SplitMode, SplitSpec};
use lgcap_core::synthetic;
use serde::Serialize;

use crate::checkpoint;
use crate::coco::load_split_dir;
use crate::config::{RunConfig, CONFIG_KEYS, DATA_ROOT_ENV};
use crate::error::{AppError, AppResult};
use crate::images::{load_stream, preprocess_image};
use crate::io::{read_json, read_text, to_json_bytes, write_bytes};
use crate::manifest::{read_manifest, write_manifest};
use crate::pipeline;
use crate::results::{read_results, Prediction};
use crate::svg::forgetting_chart;

#[derive(Debug, Parser)]
#[command(name = "lgcap", version, about = "Continual image captioning with language-guided auxiliary losses")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a task-stream manifest.
    Split(SplitArgs),
    /// Train on every task of a manifest in order.
    #[command(after_help = config_help())]
    Train(TrainArgs),
    /// Score a predictions file against one task's test split.
    Eval(EvalArgs),
    /// Forgetting and result tables from results files.
    Forgetting(ForgettingArgs),
    /// Caption a single image.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Synthetic,
    Ratt,
    Contcap,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Directory holding `captions_{train,val}2014.json` and `instances_{train,val}2014.json`.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Task definition file (`name: id id ...`) replacing the bundled one.
    #[arg(long)]
    pub task_defs: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub tasks: usize,
    #[arg(long, default_value_t = 64)]
    pub per_task: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the log, checkpoints and results.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Caption loss only: the baseline without continual-learning terms.
    #[arg(long)]
    pub no_lgcl: bool,
    /// Loss weights as `ce,nouns,clip,lgcl`.
    #[arg(long, value_name = "CE,NOUNS,CLIP,LGCL")]
    pub weights: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic_eval: Option<bool>,
    /// Continue from a checkpoint written by an earlier run into `--out`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Image-loading threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Also write a table of this style next to the results.
    #[arg(long, value_name = "STYLE")]
    pub report: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// JSON list of `{image_id, caption}`.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub task: usize,
    /// Checkpoint used for CLIPScore; omitted when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForgettingArgs {
    /// Results file; repeat once per method.
    #[arg(long, required = true)]
    pub results: Vec<PathBuf>,
    /// contcap_table | ratt_table | forgetting_table
    #[arg(long, default_value = "forgetting_table")]
    pub style: String,
    /// Writes `<out>.txt` and `<out>.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-task forgetting chart of the first results file.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value_t = MAX_TOKENS)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write `{caption, tokens, nll}` here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn config_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (config file or --set):\n");
    for (k, d) in CONFIG_KEYS {
        s.push_str(&format!("  {k:width$}  {d}\n"));
    }
    s.push_str(&format!("\nImage paths resolve against --data-root, the data_root key, then ${DATA_ROOT_ENV}."));
    s
}

/// Runs one command, writing user-facing output to `out` and warnings to
/// `err`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> AppResult<()> {
    match cli.command {
        Command::Split(a) => cmd_split(a, out),
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Forgetting(a) => cmd_forgetting(a, out),
        Command::Generate(a) => cmd_generate(a, out),
    }
}

fn say(out: &mut dyn std::io::Write, text: &str) -> AppResult<()> {
    out.write_all(text.as_bytes()).map_err(|e| AppError::io(Path::new("<stdout>"), e))
}

fn cmd_split(a: SplitArgs, out: &mut dyn std::io::Write) -> AppResult<()> {
    let manifest = match a.mode {
        ModeArg::Synthetic => synthetic::build_synthetic_stream(a.tasks, a.per_task, a.seed)?,
        ModeArg::Ratt | ModeArg::Contcap => {
            let dir = a.annotations.as_ref().ok_or_else(|| AppError::Usage("--annotations is required for ratt and contcap".into()))?;
            let mode = if matches!(a.mode, ModeArg::Ratt) { SplitMode::Ratt } else { SplitMode::Contcap };
            let spec = match (&a.task_defs, mode) {
                (Some(p), _) => SplitSpec::with_defs(mode, parse_task_defs(&read_text(p)?)?, a.seed),
                (None, SplitMode::Ratt) => SplitSpec::ratt(a.seed),
                (None, _) => SplitSpec::contcap(a.seed),
            };
            let train = load_split_dir(dir, "train2014")?;
            let val = load_split_dir(dir, "val2014")?;
            if mode == SplitMode::Ratt { build_ratt_split(&train, &val, &spec)? } else { build_contcap_split(&train, &val, &spec)? }
        }
    };
    let digest = write_manifest(&a.out, &manifest)?;
    say(out, &counts_table(&manifest))?;
    say(out, &format!("manifest {} sha256 {digest}\n", a.out.display()))
}

/// `name train/val/test`, one task per line.
pub fn counts_table(m: &Manifest) -> String {
    let width = m.tasks.iter().map(|t| t.name.len()).max().unwrap_or(0);
    m.counts().iter().map(|(n, tr, va, te)| format!("{n:width$} {tr}/{va}/{te}\n")).collect()
}

fn parse_weights(s: &str, cfg: &mut RunConfig) -> AppResult<()> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(AppError::Usage(format!("--weights expects 4 comma-separated values, got `{s}`")));
    }
    for (k, v) in ["weight_ce", "weight_nouns", "weight_clip", "weight_lgcl"].iter().zip(parts) {
        cfg.set(k, v)?;
    }
    Ok(())
}

/// Config file, then `--set`, then dedicated flags.
pub fn resolve_config(a: &TrainArgs) -> AppResult<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for pair in &a.set {
        cfg.assign(pair)?;
    }
    if let Some(w) = &a.weights {
        parse_weights(w, &mut cfg)?;
    }
    if a.no_lgcl {
        cfg.train.loss.use_lgcl = false;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = a.deterministic_eval {
        cfg.train.deterministic_eval = d;
    }
    if let Some(r) = &a.data_root {
        cfg.data_root = Some(r.clone());
    }
    Ok(cfg)
}

fn data_root(cfg: &RunConfig, manifest_path: &Path) -> PathBuf {
    cfg.resolve_data_root()
        .unwrap_or_else(|| manifest_path.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn cmd_train(a: TrainArgs, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> AppResult<()> {
    let cfg = resolve_config(&a)?;
    let style = a.report.as_deref().map(parse_style).transpose()?;
    if style.is_some() && !cfg.train.deterministic_eval {
        say(err, "warning: tables from sampled (non-deterministic) evaluation are not reproducible\n")?;
    }
    let manifest = read_manifest(&a.manifest)?;
    let resume = a.resume.as_deref().map(checkpoint::load).transpose()?;
    let problems = cfg.problems();
    if resume.is_none() && !problems.is_empty() {
        return Err(AppError::Usage(format!("invalid configuration:\n  {}", problems.join("\n  "))));
    }
    let size = resume.as_ref().map_or(cfg.model.image_size, |c| c.model.config.image_size);
    let stream = load_stream(&manifest, &data_root(&cfg, &a.manifest), size, a.workers)?;
    let outcome = pipeline::train(&cfg, &manifest, &stream, &a.out, resume)?;
    for (run, name) in outcome.results.runs.iter().zip(&outcome.results.task_names) {
        let cells: Vec<String> = run
            .scores
            .iter()
            .map(|(t, s)| format!("t{t} bleu1={:.2} meteor_lite={:.2}", s.bleu1, s.meteor_lite))
            .collect();
        say(out, &format!("after {name}: {}\n", cells.join("  ")))?;
    }
    say(out, &format!("results {}\n", outcome.results_path.display()))?;
    if let Some(style) = style {
        write_report(&[outcome.results], style, &a.out.join("report"))?;
    }
    Ok(())
}

fn parse_style(s: &str) -> AppResult<ReportStyle> {
    ReportStyle::parse(s).ok_or_else(|| AppError::Usage(format!("unknown style `{s}` (contcap_table | ratt_table | forgetting_table)")))
}

fn write_report(results: &[ResultsFile], style: ReportStyle, prefix: &Path) -> AppResult<String> {
    let report = emit_report(results, style)?;
    write_bytes(&prefix.with_extension("txt"), report.text.as_bytes())?;
    write_bytes(&prefix.with_extension("csv"), report.csv.as_bytes())?;
    Ok(report.text)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn std::io::Write) -> AppResult<()> {
    let preds: Vec<Prediction> = read_json(&a.pred)?;
    let manifest = read_manifest(&a.manifest)?;
    let scores = match &a.checkpoint {
        None => pipeline::eval_predictions(&preds, &manifest, a.task, None)?,
        Some(p) => {
            let ck = checkpoint::load(p)?;
            let mut cfg = RunConfig::default();
            cfg.data_root = a.data_root.clone();
            let stream = load_stream(&manifest, &data_root(&cfg, &a.manifest), ck.model.config.image_size, 1)?;
            pipeline::eval_predictions(&preds, &manifest, a.task, Some((&ck, &stream)))?
        }
    };
    let bytes = to_json_bytes(&scores);
    if let Some(p) = &a.out {
        write_bytes(p, &bytes)?;
    }
    say(out, std::str::from_utf8(&bytes).expect("json is utf-8"))
}

fn cmd_forgetting(a: ForgettingArgs, out: &mut dyn std::io::Write) -> AppResult<()> {
    let style = parse_style(&a.style)?;
    let results = a.results.iter().map(|p| read_results(p)).collect::<AppResult<Vec<_>>>()?;
    let text = match &a.out {
        Some(prefix) => write_report(&results, style, prefix)?,
        None => emit_report(&results, style)?.text,
    };
    say(out, &text)?;
    if let Some(svg) = &a.svg {
        let m = MetricMatrix::from_results(&results[0])?;
        let summaries = TABLE_METRICS
            .iter()
            .filter_map(|(k, _)| average_forgetting(&m, k).ok())
            .collect::<Vec<_>>();
        write_bytes(svg, forgetting_chart(&results[0].task_names, &summaries).as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GenerateJson<'a> {
    caption: &'a str,
    tokens: &'a [u32],
    nll: f64,
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn std::io::Write) -> AppResult<()> {
    if !a.deterministic && !(a.temperature > 0.0) {
        return Err(AppError::Usage(format!("--temperature must be positive when sampling, got {}", a.temperature)));
    }
    let ck = checkpoint::load(&a.checkpoint)?;
    let img = preprocess_image(&a.image, ck.model.config.image_size, &PixelNorm::REFERENCE)?;
    let opts = GenerateOptions { temperature: a.temperature, deterministic: a.deterministic, max_tokens: a.max_tokens };
    let g = pipeline::generate_caption(&ck, &img, &opts, a.seed)?;
    if let Some(p) = &a.json {
        write_bytes(p, &to_json_bytes(&GenerateJson { caption: &g.caption, tokens: &g.tokens, nll: g.nll }))?;
    }
    say(out, &format!("{}\n", g.caption))
}
