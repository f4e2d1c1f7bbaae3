//! Map error metrics and the seeded experiment sweep.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::baselines::{reconstruct, Method, PipelineConfig};
use crate::channel::Cgm;
use crate::error::{invalid, Error, Result};
use crate::geometry::{AodSectorization, GridMap, Scene};
use crate::io::Layout;
use crate::par;
use crate::seed;
use crate::synth::{generate_scene, generate_truth, sample_measurements, SamplingSpec, SceneSpec, Selection, TruthSpec};

/// `Σ (q − q̂)² / Σ q²` over every valid grid.
pub fn map_nmse(truth: &Cgm, estimate: &Cgm) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(invalid(format!("maps have {} and {} grids", truth.len(), estimate.len())));
    }
    let energy: f64 = truth.values().iter().map(|q| q * q).sum();
    if energy == 0.0 {
        return Err(invalid("NMSE is undefined for an all-zero truth map"));
    }
    let err: f64 = truth.values().iter().zip(estimate.values()).map(|(q, e)| (q - e) * (q - e)).sum();
    Ok(err / energy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Random scene generated per seed (ignored when a fixed scene is given).
    pub scene: SceneSpec,
    pub layout: Layout,
    /// Truth settings; the seed field is replaced by one derived per run seed.
    pub truth: TruthSpec,
    #[serde(rename = "L")]
    pub l_values: Vec<usize>,
    pub selections: Vec<Selection>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub pipeline: PipelineConfig,
    /// Count failed runs as NMSE 1 in the aggregates.
    pub score_failures_as_one: bool,
    /// Fill the runtime column (makes results differ between runs).
    pub record_runtime: bool,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            scene: SceneSpec::default(),
            layout: Layout::default(),
            truth: TruthSpec::default(),
            l_values: vec![20],
            selections: vec![Selection::Type2],
            methods: vec![Method::Proposed],
            seeds: vec![0],
            pipeline: PipelineConfig::default(),
            score_failures_as_one: false,
            record_runtime: false,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.l_values.is_empty() || self.selections.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(invalid("L, selections, methods and seeds must all be non-empty"));
        }
        if self.l_values.contains(&0) {
            return Err(invalid("L values must be positive"));
        }
        self.layout.sectors()?;
        self.truth.validate()?;
        self.pipeline.validate()
    }

    /// Run keys in output order: seed, then L, selection, method.
    pub fn keys(&self) -> Vec<RunKey> {
        let mut keys = Vec::new();
        for &seed in &self.seeds {
            for &l in &self.l_values {
                for &selection in &self.selections {
                    for &method in &self.methods {
                        keys.push(RunKey { seed, l, selection, method });
                    }
                }
            }
        }
        keys
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RunKey {
    pub seed: u64,
    pub l: usize,
    pub selection: Selection,
    pub method: Method,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub key: RunKey,
    pub nmse: Option<f64>,
    pub runtime_ms: Option<f64>,
    /// `ok` or an error code.
    pub status: String,
}

impl RunRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub l: usize,
    pub selection: Selection,
    pub method: Method,
    pub mean_nmse: Option<f64>,
    pub std_nmse: Option<f64>,
    pub n_ok: usize,
}

/// Per-seed scene, grid and truth.
struct SeedContext {
    scene: Scene,
    grid: GridMap,
    sectors: AodSectorization,
    truth: Cgm,
}

fn seed_context(spec: &ExperimentSpec, fixed: Option<&Scene>, seed: u64) -> Result<SeedContext> {
    let scene = match fixed {
        Some(s) => s.clone(),
        None => generate_scene(&spec.scene, seed)?,
    };
    let grid = spec.layout.grid(&scene)?;
    let sectors = spec.layout.sectors()?;
    let truth_spec = TruthSpec { seed: seed::derive(seed, &["truth"]), ..spec.truth.clone() };
    let (_, truth) = generate_truth(&scene, &grid, sectors, &truth_spec)?;
    Ok(SeedContext { scene, grid, sectors, truth })
}

fn run_one(spec: &ExperimentSpec, ctx: &SeedContext, key: RunKey) -> Result<f64> {
    let sampling = SamplingSpec {
        count: key.l,
        selection: key.selection,
        noise_std_rel: spec.truth.noise_std_rel,
        seed: seed::derive(key.seed, &["measure", &key.l.to_string(), key.selection.name()]),
    };
    let ms = sample_measurements(&ctx.truth, &ctx.grid, &ctx.scene, ctx.sectors, &sampling)?;
    let rec = reconstruct(key.method, &ctx.scene, &ctx.grid, ctx.sectors, &ms, &spec.pipeline)?;
    map_nmse(&ctx.truth, &rec.map)
}

/// Runs every key of `spec` not already present as a successful row in
/// `previous`, returning rows in spec order. Failures are recorded per row.
pub fn run_experiment(
    spec: &ExperimentSpec,
    fixed_scene: Option<&Scene>,
    previous: &[RunRow],
    progress: &(dyn Fn(&RunRow) + Sync),
) -> Result<Vec<RunRow>> {
    spec.validate()?;
    let done: BTreeMap<RunKey, &RunRow> = previous.iter().filter(|r| r.ok()).map(|r| (r.key, r)).collect();
    let keys = spec.keys();
    let needed: Vec<u64> = {
        let mut s: Vec<u64> = keys.iter().filter(|k| !done.contains_key(k)).map(|k| k.seed).collect();
        s.dedup();
        s
    };
    let contexts: BTreeMap<u64, Result<SeedContext>> =
        needed.iter().copied().zip(par::map_slice(&needed, |&seed| seed_context(spec, fixed_scene, seed))).collect();
    let rows = par::map_slice(&keys, |&key| {
        if let Some(row) = done.get(&key) {
            return (*row).clone();
        }
        let started = Instant::now();
        let result = match &contexts[&key.seed] {
            Ok(ctx) => run_one(spec, ctx, key).map_err(|e| (e.code(), e.to_string())),
            Err(e) => Err((e.code(), format!("seed setup failed: {e}"))),
        };
        let runtime = spec.record_runtime.then(|| started.elapsed().as_secs_f64() * 1e3);
        let row = match result {
            Ok(nmse) => RunRow { key, nmse: Some(nmse), runtime_ms: runtime, status: "ok".into() },
            Err((code, msg)) => {
                log::warn!("run seed={} L={} {} {} failed: {msg}", key.seed, key.l, key.selection.name(), key.method.name());
                RunRow { key, nmse: None, runtime_ms: runtime, status: code.into() }
            }
        };
        progress(&row);
        row
    });
    Ok(rows)
}

/// Mean and sample standard deviation per `(L, selection, method)` in spec
/// order, recomputed from `rows`.
pub fn aggregate(spec: &ExperimentSpec, rows: &[RunRow]) -> Vec<AggregateRow> {
    let mut out = Vec::new();
    for &l in &spec.l_values {
        for &selection in &spec.selections {
            for &method in &spec.methods {
                let group: Vec<&RunRow> =
                    rows.iter().filter(|r| r.key.l == l && r.key.selection == selection && r.key.method == method).collect();
                let n_ok = group.iter().filter(|r| r.ok()).count();
                let values: Vec<f64> = group
                    .iter()
                    .filter_map(|r| match (r.ok(), r.nmse) {
                        (true, Some(v)) => Some(v),
                        (false, _) if spec.score_failures_as_one => Some(1.0),
                        _ => None,
                    })
                    .collect();
                let (mean, std) = mean_std(&values);
                out.push(AggregateRow { l, selection, method, mean_nmse: mean, std_nmse: std, n_ok });
            }
        }
    }
    out
}

/// Mean and sample (n − 1) standard deviation.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

pub const RESULTS_HEADER: [&str; 7] = ["seed", "L", "selection", "method", "nmse", "runtime_ms", "status"];
pub const AGGREGATES_HEADER: [&str; 6] = ["L", "selection", "method", "mean_nmse", "std_nmse", "n_ok"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn results_csv(rows: &[RunRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULTS_HEADER)?;
    for r in rows {
        w.write_record([
            r.key.seed.to_string(),
            r.key.l.to_string(),
            r.key.selection.name().to_string(),
            r.key.method.name().to_string(),
            opt(r.nmse),
            opt(r.runtime_ms),
            r.status.clone(),
        ])?;
    }
    finish(w)
}

pub fn aggregates_csv(rows: &[AggregateRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(AGGREGATES_HEADER)?;
    for a in rows {
        w.write_record([
            a.l.to_string(),
            a.selection.name().to_string(),
            a.method.name().to_string(),
            opt(a.mean_nmse),
            opt(a.std_nmse),
            a.n_ok.to_string(),
        ])?;
    }
    finish(w)
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Parses a results file written by [`results_csv`].
pub fn parse_results(text: &str) -> Result<Vec<RunRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    if reader.headers()?.iter().ne(RESULTS_HEADER) {
        return Err(Error::Format(format!("results line 1: expected header {}", RESULTS_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |k: usize| record.get(k).unwrap_or("").trim();
        let bad = |name: &str| Error::Format(format!("results line {line}: invalid {name}"));
        let num = |k: usize, name: &str| -> Result<Option<f64>> {
            match field(k) {
                "" => Ok(None),
                s => s.parse().map(Some).map_err(|_| bad(name)),
            }
        };
        rows.push(RunRow {
            key: RunKey {
                seed: field(0).parse().map_err(|_| bad("seed"))?,
                l: field(1).parse().map_err(|_| bad("L"))?,
                selection: field(2).parse().map_err(|_| bad("selection"))?,
                method: field(3).parse().map_err(|_| bad("method"))?,
            },
            nmse: num(4, "nmse")?,
            runtime_ms: num(5, "runtime_ms")?,
            status: field(6).to_string(),
        });
    }
    Ok(rows)
}
