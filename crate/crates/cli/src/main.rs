//! `vscat`: scene generation, synthetic truth, sampling, reconstruction,
//! evaluation and seeded sweeps over plain files.
//!
//! Exit codes: 0 success, 2 input error, 3 numeric failure, 4 partial sweep
//! failure.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use vscat::baselines::{reconstruct, to_db, Method, PipelineConfig};
use vscat::estimation::FitReport;
use vscat::io::{self, Layout};
use vscat::metrics::{aggregate, aggregates_csv, map_nmse, parse_results, results_csv, run_experiment, ExperimentSpec, RunRow};
use vscat::synth::{generate_scene, generate_truth, sample_measurements, SamplingSpec, SceneSpec, Selection, TruthSpec};
use vscat::{par, seed, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "vscat", version, about = "Channel gain map reconstruction from sparse measurements")]
struct Cli {
    /// Root seed; every stage derives its own sub-seed from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Settings file (TOML or JSON, chosen by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long, global = true, env = "VSCAT_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Random non-overlapping boxes with the transmitter at the region center.
    GenScene(GenScene),
    /// Synthetic ground-truth model and map for a scene.
    GenTruth(GenTruth),
    /// Draw measurements from a truth map.
    Sample(Sample),
    /// Rebuild a map from measurements with one method.
    Reconstruct(Reconstruct),
    /// NMSE of estimated maps against a truth map.
    Evaluate(Evaluate),
    /// Seeded Monte Carlo sweep over L, selection and method.
    Sweep(Sweep),
}

#[derive(Args, Debug)]
struct GenScene {
    /// Side of the square region in meters.
    #[arg(long)]
    region: Option<f64>,
    #[arg(long)]
    n_scatterers: Option<usize>,
    /// Transmitter height in meters.
    #[arg(long)]
    tx_height: Option<f64>,
    /// Grid columns.
    #[arg(long)]
    nx: Option<usize>,
    /// Grid rows.
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long, default_value = "scene.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenTruth {
    #[arg(long)]
    scene: PathBuf,
    /// Number of true scatterers.
    #[arg(long)]
    n_true: Option<usize>,
    /// Output stem: writes `<stem>.model.json`, `<stem>.map.csv` and `<stem>.meta.json`.
    #[arg(long, default_value = "truth")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Sample {
    #[arg(long)]
    scene: PathBuf,
    /// Truth map CSV.
    #[arg(long)]
    truth: PathBuf,
    /// Number of measured grids.
    #[arg(long = "L")]
    l: usize,
    #[arg(long, default_value = "type2")]
    selection: Selection,
    /// Relative noise standard deviation (defaults to the configured truth noise).
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value = "measurements.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Reconstruct {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    measurements: PathBuf,
    #[arg(long)]
    method: Method,
    /// Output stem: writes `<stem>.map.csv` and `<stem>.report.json` (default: the method name).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Evaluate {
    #[arg(long)]
    scene: PathBuf,
    /// Truth map CSV.
    #[arg(long)]
    truth: PathBuf,
    /// Estimated map CSV (repeatable).
    #[arg(long, required = true)]
    estimate: Vec<PathBuf>,
    #[arg(long, default_value = "evaluation.csv")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Sweep {
    /// Experiment spec (TOML or JSON, chosen by extension).
    #[arg(long)]
    spec: PathBuf,
    /// Fixed scene shared by every seed instead of one random scene per seed.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Keep successful rows already present in the results file.
    #[arg(long)]
    resume: bool,
    /// Worker threads.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    #[arg(long, default_value = "results.csv")]
    results: PathBuf,
    #[arg(long, default_value = "aggregates.csv")]
    aggregates: PathBuf,
}

/// Settings read from `--config`; every section is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    scene: SceneSpec,
    layout: Layout,
    truth: TruthSpec,
    pipeline: PipelineConfig,
}

#[derive(Serialize)]
struct TruthMeta<'a> {
    root_seed: u64,
    truth_seed: u64,
    truth: &'a TruthSpec,
    layout: &'a Layout,
    grids: usize,
}

#[derive(Serialize)]
struct ErrorReport {
    code: &'static str,
    message: String,
}

#[derive(Serialize)]
struct ReconstructionReport {
    method: &'static str,
    status: &'static str,
    measurements: usize,
    grids: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<ErrorReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fit: Option<FitReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<serde_json::Value>,
    notes: Vec<String>,
}

struct Ctx {
    seed: u64,
    config: Config,
    out_dir: PathBuf,
    quiet: bool,
}

impl Ctx {
    /// Resolves an output name inside the output directory.
    fn output(&self, name: &Path) -> Result<PathBuf> {
        if name.as_os_str().is_empty() || name.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
            bail!("output {} must be a relative path inside --out-dir", name.display());
        }
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(path)
    }

    fn stem(&self, stem: &Path, suffix: &str) -> Result<PathBuf> {
        let mut name = stem.as_os_str().to_owned();
        name.push(suffix);
        self.output(Path::new(&name))
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

fn parse_by_extension<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("toml") => toml::from_str(&text).map_err(|e| anyhow!("{}: {e}", path.display())),
        Some("json") => serde_json::from_str(&text).map_err(|e| anyhow!("{}: {e}", path.display())),
        _ => bail!("{}: expected a .toml or .json file", path.display()),
    }
}

fn gen_scene(ctx: &Ctx, args: &GenScene) -> Result<ExitCode> {
    let mut spec = ctx.config.scene.clone();
    if let Some(r) = args.region {
        spec.region = r;
    }
    if let Some(n) = args.n_scatterers {
        spec.n_scatterers = n;
    }
    if let Some(h) = args.tx_height {
        spec.tx_height = h;
    }
    let mut layout = ctx.config.layout;
    if let Some(nx) = args.nx {
        layout.nx = nx;
    }
    if let Some(ny) = args.ny {
        layout.ny = ny;
    }
    layout.sectors()?;
    let out = ctx.output(&args.out)?;
    let scene = generate_scene(&spec, ctx.seed)?;
    let grid = layout.grid(&scene)?;
    io::write_scene(&out, &scene, &layout)?;
    ctx.say(format!(
        "scene: {} scatterers, {} of {} grids valid -> {}",
        scene.scatterers().len(),
        grid.len(),
        grid.total_cells(),
        out.display()
    ));
    Ok(ExitCode::SUCCESS)
}

fn gen_truth(ctx: &Ctx, args: &GenTruth) -> Result<ExitCode> {
    let (scene, layout) = io::read_scene(&args.scene)?;
    let grid = layout.grid(&scene)?;
    let sectors = layout.sectors()?;
    let mut spec = ctx.config.truth.clone();
    spec.seed = seed::derive(ctx.seed, &["truth"]);
    if let Some(n) = args.n_true {
        spec.n_true = n;
    }
    spec.validate()?;
    let (model_path, map_path, meta_path) =
        (ctx.stem(&args.out, ".model.json")?, ctx.stem(&args.out, ".map.csv")?, ctx.stem(&args.out, ".meta.json")?);
    let (model, map) = generate_truth(&scene, &grid, sectors, &spec)?;
    io::write_model(&model_path, &model, &[], &[])?;
    io::write_cgm_file(&map_path, &grid, &map)?;
    let meta = TruthMeta { root_seed: ctx.seed, truth_seed: spec.seed, truth: &spec, layout: &layout, grids: grid.len() };
    io::write_json(&meta_path, &meta)?;
    ctx.say(format!("truth: {} scatterers over {} grids -> {}", model.len(), grid.len(), map_path.display()));
    Ok(ExitCode::SUCCESS)
}

fn sample(ctx: &Ctx, args: &Sample) -> Result<ExitCode> {
    let (scene, layout) = io::read_scene(&args.scene)?;
    let grid = layout.grid(&scene)?;
    let truth = io::read_cgm_file(&args.truth, &grid)?;
    let spec = SamplingSpec {
        count: args.l,
        selection: args.selection,
        noise_std_rel: args.noise.unwrap_or(ctx.config.truth.noise_std_rel),
        seed: seed::derive(ctx.seed, &["measure", &args.l.to_string(), args.selection.name()]),
    };
    let out = ctx.output(&args.out)?;
    let ms = sample_measurements(&truth, &grid, &scene, layout.sectors()?, &spec)?;
    io::write_measurements_file(&out, &ms)?;
    ctx.say(format!("sample: {} {} measurements -> {}", ms.len(), args.selection.name(), out.display()));
    Ok(ExitCode::SUCCESS)
}

fn reconstruct_cmd(ctx: &Ctx, args: &Reconstruct) -> Result<ExitCode> {
    let (scene, layout) = io::read_scene(&args.scene)?;
    let grid = layout.grid(&scene)?;
    let sectors = layout.sectors()?;
    let ms = io::read_measurements_file(&args.measurements)?;
    ms.validate_against(&grid).with_context(|| format!("{}", args.measurements.display()))?;
    ctx.config.pipeline.validate()?;
    let stem = args.out.clone().unwrap_or_else(|| PathBuf::from(args.method.name()));
    let (map_path, report_path) = (ctx.stem(&stem, ".map.csv")?, ctx.stem(&stem, ".report.json")?);
    let mut report = ReconstructionReport {
        method: args.method.name(),
        status: "ok",
        measurements: ms.len(),
        grids: grid.len(),
        error: None,
        fit: None,
        model: None,
        notes: Vec::new(),
    };
    match reconstruct(args.method, &scene, &grid, sectors, &ms, &ctx.config.pipeline) {
        Ok(rec) => {
            io::write_cgm_file(&map_path, &grid, &rec.map)?;
            report.fit = rec.report;
            report.model = Some(serde_json::from_str(&io::model_to_json(&rec.model, &rec.gpr, &[])?)?);
            report.notes = rec.notes;
            io::write_json(&report_path, &report)?;
            ctx.say(format!("reconstruct: {} -> {}", args.method.name(), map_path.display()));
            Ok(ExitCode::SUCCESS)
        }
        Err(e) if e.kind() == ErrorKind::Numeric => {
            report.status = "failed";
            report.error = Some(ErrorReport { code: e.code(), message: e.to_string() });
            io::write_json(&report_path, &report)?;
            Err(anyhow::Error::new(e).context(format!("diagnostic report written to {}", report_path.display())))
        }
        Err(e) => Err(e.into()),
    }
}

fn estimate_label(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    for suffix in [".map.csv", ".csv"] {
        if let Some(base) = name.strip_suffix(suffix) {
            return base.to_string();
        }
    }
    name
}

fn evaluate(ctx: &Ctx, args: &Evaluate) -> Result<ExitCode> {
    let (scene, layout) = io::read_scene(&args.scene)?;
    let grid = layout.grid(&scene)?;
    let truth = io::read_cgm_file(&args.truth, &grid)?;
    let estimates = args.estimate.iter().map(|p| Ok((estimate_label(p), io::read_cgm_file(p, &grid)?))).collect::<Result<Vec<_>>>()?;
    let out = ctx.output(&args.out)?;
    let mut text = String::from("estimate,nmse\n");
    for (label, map) in &estimates {
        let nmse = map_nmse(&truth, map)?;
        text.push_str(&format!("{label},{nmse}\n"));
        ctx.say(format!("{label:>12}  NMSE {nmse:.4e}  ({:.2} dB)", to_db(nmse)));
    }
    std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn sweep(ctx: &Ctx, args: &Sweep) -> Result<ExitCode> {
    let spec: ExperimentSpec = parse_by_extension(&args.spec)?;
    spec.validate()?;
    let fixed = args.scene.as_deref().map(io::read_scene).transpose()?.map(|(s, _)| s);
    let (results_path, aggregates_path) = (ctx.output(&args.results)?, ctx.output(&args.aggregates)?);
    let previous = if args.resume && results_path.exists() {
        let text = std::fs::read_to_string(&results_path)?;
        parse_results(&text)?
    } else {
        Vec::new()
    };
    let mut file = if args.resume && results_path.exists() {
        OpenOptions::new().append(true).open(&results_path)?
    } else {
        let mut f = File::create(&results_path)?;
        f.write_all(results_csv(&[])?.as_bytes())?;
        f
    };
    file.flush()?;
    let appender = Mutex::new(file);
    let total = spec.keys().len();
    let reused = spec.keys().iter().filter(|k| previous.iter().any(|r| r.ok() && r.key == **k)).count();
    let counter = AtomicUsize::new(reused);
    if reused > 0 {
        log::info!("resuming: {reused} of {total} runs already done");
    }
    let progress = |row: &RunRow| {
        let line = results_csv(std::slice::from_ref(row)).unwrap_or_default();
        let body = line.split_once('\n').map_or("", |(_, rest)| rest);
        if let Ok(mut f) = appender.lock() {
            if let Err(e) = f.write_all(body.as_bytes()).and_then(|_| f.flush()) {
                log::error!("appending to {}: {e}", results_path.display());
            }
        }
        let done = counter.fetch_add(1, Ordering::SeqCst) + 1;
        log::info!(
            "[{done}/{total}] seed={} L={} {} {}: {}",
            row.key.seed,
            row.key.l,
            row.key.selection.name(),
            row.key.method.name(),
            row.nmse.map_or(row.status.clone(), |v| format!("nmse {v:.4e}"))
        );
    };
    let rows = par::with_threads(args.jobs as usize, || run_experiment(&spec, fixed.as_ref(), &previous, &progress))?;
    drop(appender);
    std::fs::write(&results_path, results_csv(&rows)?)?;
    std::fs::write(&aggregates_path, aggregates_csv(&aggregate(&spec, &rows))?)?;
    let failed = rows.iter().filter(|r| !r.ok()).count();
    ctx.say(format!("sweep: {} runs, {failed} failed -> {}, {}", rows.len(), results_path.display(), aggregates_path.display()));
    Ok(if failed > 0 { ExitCode::from(4) } else { ExitCode::SUCCESS })
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = match &cli.config {
        Some(path) => parse_by_extension(path)?,
        None => Config::default(),
    };
    std::fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    let ctx = Ctx { seed: cli.seed, config, out_dir: cli.out_dir, quiet: cli.quiet };
    match &cli.command {
        Command::GenScene(a) => gen_scene(&ctx, a),
        Command::GenTruth(a) => gen_truth(&ctx, a),
        Command::Sample(a) => sample(&ctx, a),
        Command::Reconstruct(a) => reconstruct_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().find_map(|e| e.downcast_ref::<vscat::Error>()).is_some_and(|e| e.kind() == ErrorKind::Numeric);
    if numeric {
        3
    } else {
        2
    }
}

/// The error chain joined by ": ", skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
