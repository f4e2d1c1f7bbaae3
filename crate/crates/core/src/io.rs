//! File formats: scene JSON, map and measurement CSV, model JSON.
//!
//! All gains are stored linear; the `gain_db` map column is informational.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::to_db;
use crate::channel::{Cgm, VirtualScatterer, VirtualScattererSet};
use crate::error::{Error, Result};
use crate::geometry::{partition_region, Aabb, AodSectorization, GridMap, PhysicalScatterer, Scene, Vec3};
use crate::gpr::ScattererGpr;
use crate::synth::MeasurementSet;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Prefixes an I/O error with the offending path.
fn at(path: &Path) -> impl Fn(std::io::Error) -> std::io::Error + '_ {
    move |e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(at(path))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path).map_err(at(path))?);
    serde_json::from_reader(r).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

/// Grid partition and sectorization shared by every stage of a pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Layout {
    pub nx: usize,
    pub ny: usize,
    pub plane_height: f64,
    pub azimuth_bins: usize,
    pub elevation_bins: usize,
}

impl Default for Layout {
    fn default() -> Self {
        Layout { nx: 30, ny: 30, plane_height: 1.5, azimuth_bins: 8, elevation_bins: 1 }
    }
}

impl Layout {
    pub fn sectors(&self) -> Result<AodSectorization> {
        AodSectorization::new(self.azimuth_bins, self.elevation_bins)
    }

    pub fn grid(&self, scene: &Scene) -> Result<GridMap> {
        partition_region(scene, self.nx, self.ny, self.plane_height)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxFile {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScattererFile {
    id: u32,
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    region: BoxFile,
    tx: [f64; 3],
    beta0: f64,
    alpha: f64,
    wavelength: f64,
    #[serde(default)]
    layout: Layout,
    scatterers: Vec<ScattererFile>,
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

pub fn scene_to_json(scene: &Scene, layout: &Layout) -> Result<String> {
    let file = SceneFile {
        region: BoxFile { min: arr(&scene.region().min), max: arr(&scene.region().max) },
        tx: arr(&scene.tx()),
        beta0: scene.beta0(),
        alpha: scene.alpha(),
        wavelength: scene.wavelength(),
        layout: *layout,
        scatterers: scene
            .scatterers()
            .iter()
            .map(|p| ScattererFile { id: p.id, min: arr(&p.bounds.min), max: arr(&p.bounds.max) })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

pub fn scene_from_json(text: &str) -> Result<(Scene, Layout)> {
    let file: SceneFile = serde_json::from_str(text).map_err(|e| format_err(format!("scene: {e}")))?;
    let scene = Scene::new(
        Aabb::new(v3(file.region.min), v3(file.region.max)),
        v3(file.tx),
        file.scatterers.into_iter().map(|s| PhysicalScatterer { id: s.id, bounds: Aabb::new(v3(s.min), v3(s.max)) }).collect(),
        file.beta0,
        file.alpha,
        file.wavelength,
    )?;
    file.layout.sectors()?;
    Ok((scene, file.layout))
}

pub fn write_scene(path: &Path, scene: &Scene, layout: &Layout) -> Result<()> {
    std::fs::write(path, scene_to_json(scene, layout)?).map_err(at(path))?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<(Scene, Layout)> {
    let text = std::fs::read_to_string(path).map_err(at(path))?;
    scene_from_json(&text).map_err(|e| match e {
        Error::Format(m) => format_err(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub const CGM_HEADER: [&str; 6] = ["ix", "iy", "x", "y", "gain_linear", "gain_db"];
pub const MEASUREMENT_HEADER: [&str; 2] = ["grid_index", "gain_linear"];

/// One row per cell of the full partition in flat-index order; occupied
/// cells leave both gain fields empty. Negative gains are written as 0.
pub fn write_cgm<W: Write>(out: W, grid: &GridMap, map: &Cgm) -> Result<()> {
    if map.len() != grid.len() {
        return Err(format_err(format!("map has {} values for {} grids", map.len(), grid.len())));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CGM_HEADER)?;
    let clamped = map.clamped();
    for index in 0..grid.total_cells() {
        let (ix, iy) = (index % grid.nx(), index / grid.nx());
        let c = grid.cell_center(ix, iy);
        let (lin, db) = match grid.position_of(index) {
            Some(pos) => (clamped[pos].to_string(), to_db(clamped[pos]).to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([ix.to_string(), iy.to_string(), c.x.to_string(), c.y.to_string(), lin, db])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cgm_file(path: &Path, grid: &GridMap, map: &Cgm) -> Result<()> {
    write_cgm(BufWriter::new(File::create(path).map_err(at(path))?), grid, map)
}

fn check_header(reader: &mut csv::Reader<impl std::io::Read>, expected: &[&str], what: &str) -> Result<()> {
    let header = reader.headers()?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(format_err(format!(
            "{what} line 1: expected header {:?}, found {:?}",
            expected.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(record: &csv::StringRecord, k: usize, name: &str, what: &str) -> Result<T> {
    let line = record.position().map_or(0, |p| p.line());
    let raw = record.get(k).ok_or_else(|| format_err(format!("{what} line {line}: missing field {name}")))?;
    raw.trim().parse().map_err(|_| format_err(format!("{what} line {line}: field {name} has invalid value {raw:?}")))
}

/// Reads a map written by [`write_cgm`] back onto `grid`.
pub fn read_cgm<R: std::io::Read>(input: R, grid: &GridMap) -> Result<Cgm> {
    let mut reader = csv::Reader::from_reader(input);
    check_header(&mut reader, &CGM_HEADER, "map")?;
    let mut values = vec![f64::NAN; grid.len()];
    let mut seen = vec![false; grid.total_cells()];
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let ix: usize = parse_field(&record, 0, "ix", "map")?;
        let iy: usize = parse_field(&record, 1, "iy", "map")?;
        if ix >= grid.nx() || iy >= grid.ny() {
            return Err(format_err(format!("map line {line}: cell ({ix}, {iy}) is outside the {}x{} grid", grid.nx(), grid.ny())));
        }
        let index = iy * grid.nx() + ix;
        if std::mem::replace(&mut seen[index], true) {
            return Err(format_err(format!("map line {line}: cell ({ix}, {iy}) appears twice")));
        }
        match grid.position_of(index) {
            Some(pos) => {
                let g: f64 = parse_field(&record, 4, "gain_linear", "map")?;
                if !g.is_finite() {
                    return Err(format_err(format!("map line {line}: gain_linear must be finite")));
                }
                values[pos] = g;
            }
            None => {
                if record.get(4).is_some_and(|s| !s.trim().is_empty()) {
                    return Err(format_err(format!("map line {line}: occupied cell ({ix}, {iy}) must have an empty gain")));
                }
            }
        }
    }
    if let Some(pos) = values.iter().position(|v| v.is_nan()) {
        let c = &grid.cells()[pos];
        return Err(format_err(format!("map: no value for valid cell ({}, {})", c.ix, c.iy)));
    }
    Ok(Cgm::new(values))
}

pub fn read_cgm_file(path: &Path, grid: &GridMap) -> Result<Cgm> {
    read_cgm(BufReader::new(File::open(path).map_err(at(path))?), grid).map_err(|e| prefix(path, e))
}

fn prefix(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(m) => format_err(format!("{}: {m}", path.display())),
        other => other,
    }
}

pub fn write_measurements<W: Write>(out: W, ms: &MeasurementSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MEASUREMENT_HEADER)?;
    for (i, g) in ms.indices().iter().zip(ms.gains()) {
        w.write_record([i.to_string(), g.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_measurements_file(path: &Path, ms: &MeasurementSet) -> Result<()> {
    write_measurements(BufWriter::new(File::create(path).map_err(at(path))?), ms)
}

pub fn read_measurements<R: std::io::Read>(input: R) -> Result<MeasurementSet> {
    let mut reader = csv::Reader::from_reader(input);
    check_header(&mut reader, &MEASUREMENT_HEADER, "measurements")?;
    let mut indices = Vec::new();
    let mut gains = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        indices.push(parse_field::<usize>(&record, 0, "grid_index", "measurements")?);
        let g: f64 = parse_field(&record, 1, "gain_linear", "measurements")?;
        if !(g.is_finite() && g >= 0.0) {
            return Err(format_err(format!("measurements line {line}: gain_linear must be finite and non-negative")));
        }
        gains.push(g);
    }
    MeasurementSet::new(indices, gains).map_err(|e| format_err(format!("measurements: {e}")))
}

pub fn read_measurements_file(path: &Path) -> Result<MeasurementSet> {
    read_measurements(BufReader::new(File::open(path).map_err(at(path))?)).map_err(|e| prefix(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SectorsFile {
    azimuth_bins: usize,
    elevation_bins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelScatterer {
    position: [f64; 3],
    anchor: u32,
    srcs: Vec<Option<f64>>,
    #[serde(default)]
    gpr: Option<ScattererGpr>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    sectors: SectorsFile,
    scatterers: Vec<ModelScatterer>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    notes: Vec<String>,
}

/// Serializes a model; undefined SRCs become `null`. `gpr` may be empty or
/// hold one entry per scatterer.
pub fn model_to_json(vs: &VirtualScattererSet, gpr: &[Option<ScattererGpr>], notes: &[String]) -> Result<String> {
    let sectors = vs.sectors();
    let file = ModelFile {
        sectors: SectorsFile { azimuth_bins: sectors.azimuth_bins(), elevation_bins: sectors.elevation_bins() },
        scatterers: (0..vs.len())
            .map(|n| ModelScatterer {
                position: arr(&vs.scatterer(n).position),
                anchor: vs.scatterer(n).anchor,
                srcs: vs.srcs(n).to_vec(),
                gpr: gpr.get(n).copied().flatten(),
            })
            .collect(),
        notes: notes.to_vec(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

pub fn model_from_json(text: &str) -> Result<(VirtualScattererSet, Vec<Option<ScattererGpr>>)> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| format_err(format!("model: {e}")))?;
    let sectors = AodSectorization::new(file.sectors.azimuth_bins, file.sectors.elevation_bins)?;
    let mut vs = VirtualScattererSet::new(sectors);
    let mut gpr = Vec::with_capacity(file.scatterers.len());
    for s in file.scatterers {
        vs.push_with_srcs(VirtualScatterer { position: v3(s.position), anchor: s.anchor }, s.srcs)?;
        gpr.push(s.gpr);
    }
    Ok((vs, gpr))
}

pub fn write_model(path: &Path, vs: &VirtualScattererSet, gpr: &[Option<ScattererGpr>], notes: &[String]) -> Result<()> {
    std::fs::write(path, model_to_json(vs, gpr, notes)?).map_err(at(path))?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<(VirtualScattererSet, Vec<Option<ScattererGpr>>)> {
    model_from_json(&std::fs::read_to_string(path).map_err(at(path))?).map_err(|e| prefix(path, e))
}
