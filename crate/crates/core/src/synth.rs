//! Synthetic ground truth, measurement sampling and random scenes.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DVector;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel::{path_gain, predict_map, Cgm, VirtualScatterer, VirtualScattererSet};
use crate::error::{invalid, Error, Result};
use crate::geometry::{aod_of, los_visible, Aabb, AodSectorization, GridMap, PhysicalScatterer, Scene, Vec3, TX_ID};
use crate::gpr::{kernel_matrix, JITTER};
use crate::seed;

/// Measured grids and their gains, kept in ascending grid-index order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    indices: Vec<usize>,
    gains: Vec<f64>,
    #[serde(default)]
    pub selection: Option<Selection>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl MeasurementSet {
    pub fn new(indices: Vec<usize>, gains: Vec<f64>) -> Result<Self> {
        if indices.len() != gains.len() {
            return Err(invalid(format!("{} indices but {} gains", indices.len(), gains.len())));
        }
        if let Some(g) = gains.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
            return Err(invalid(format!("measured gains must be finite and non-negative, got {g}")));
        }
        let mut pairs: Vec<(usize, f64)> = indices.into_iter().zip(gains).collect();
        pairs.sort_by_key(|p| p.0);
        if let Some(w) = pairs.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(invalid(format!("grid index {} is measured twice", w[0].0)));
        }
        let (indices, gains) = pairs.into_iter().unzip();
        Ok(MeasurementSet { indices, gains, selection: None, seed: None })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Checks every index against the valid grids of `grid` and `L < I`.
    pub fn validate_against(&self, grid: &GridMap) -> Result<()> {
        if let Some(i) = self.indices.iter().find(|&&i| grid.position_of(i).is_none()) {
            return Err(invalid(format!("measurement grid {i} is not a valid grid of this scene")));
        }
        if self.len() >= grid.len() {
            return Err(invalid(format!("{} measurements for {} valid grids; need L < I", self.len(), grid.len())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Nearest grids per scatterer and departure sector.
    Type1,
    /// Uniform random grids.
    Type2,
}

impl Selection {
    pub fn name(self) -> &'static str {
        match self {
            Selection::Type1 => "type1",
            Selection::Type2 => "type2",
        }
    }
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "type1" => Ok(Selection::Type1),
            "type2" => Ok(Selection::Type2),
            other => Err(invalid(format!("unknown selection {other:?}; expected type1 or type2"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    #[default]
    ModelConsistent,
    SingleBounce,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrcPrior {
    pub v: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthSpec {
    pub seed: u64,
    pub n_true: usize,
    pub srcs_gp: SrcPrior,
    pub src_mean: f64,
    pub noise_std_rel: f64,
    pub generator: Generator,
    /// Per-axis displacement from the box center as a fraction of the half extent.
    pub jitter: f64,
    /// Linear power loss of a specular reflection (single-bounce generator).
    pub reflection_loss: f64,
}

impl Default for TruthSpec {
    fn default() -> Self {
        TruthSpec {
            seed: 0,
            n_true: 2,
            srcs_gp: SrcPrior { v: 0.05, rho: 0.8 },
            src_mean: 0.05,
            noise_std_rel: 0.0,
            generator: Generator::ModelConsistent,
            jitter: 0.5,
            reflection_loss: 0.3,
        }
    }
}

impl TruthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.srcs_gp.v > 0.0 && self.srcs_gp.rho > 0.0) {
            return Err(invalid("SRC prior needs v > 0 and rho > 0"));
        }
        if !(self.noise_std_rel >= 0.0 && self.noise_std_rel.is_finite()) {
            return Err(invalid("noise_std_rel must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(invalid("jitter must lie in [0, 1]"));
        }
        if !(self.reflection_loss >= 0.0 && self.reflection_loss.is_finite()) {
            return Err(invalid("reflection_loss must be finite and non-negative"));
        }
        if !self.src_mean.is_finite() {
            return Err(invalid("src_mean must be finite"));
        }
        Ok(())
    }
}

/// One draw of the SRC process at every sector center, before truncation.
pub fn sample_src_vector<R: Rng + ?Sized>(sectors: AodSectorization, prior: SrcPrior, mean: f64, rng: &mut R) -> Result<Vec<f64>> {
    let centers = sectors.centers();
    let mut k = kernel_matrix(&centers, prior.v, prior.rho);
    // sector grids can make the kernel numerically singular: add jitter and retry
    let mut jitter = JITTER * prior.v * prior.v;
    let chol = loop {
        if let Some(c) = k.clone().cholesky() {
            break c;
        }
        if jitter > 1e-2 * prior.v * prior.v {
            return Err(Error::Numeric("SRC prior covariance could not be factored".into()));
        }
        for i in 0..centers.len() {
            k[(i, i)] += jitter;
        }
        jitter *= 10.0;
    };
    let z = DVector::from_iterator(centers.len(), (0..centers.len()).map(|_| StandardNormal.sample(rng)));
    let draw = chol.l() * z;
    Ok(draw.iter().map(|x| mean + x).collect())
}

/// Builds the true model and its exact map. With the single-bounce
/// generator the returned set is empty and the map comes from specular
/// reflections off the vertical box faces.
pub fn generate_truth(scene: &Scene, grid: &GridMap, sectors: AodSectorization, spec: &TruthSpec) -> Result<(VirtualScattererSet, Cgm)> {
    spec.validate()?;
    match spec.generator {
        Generator::ModelConsistent => {
            let boxes = scene.scatterers_by_size();
            if spec.n_true > boxes.len() {
                return Err(invalid(format!("n_true = {} exceeds the {} physical scatterers", spec.n_true, boxes.len())));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &["truth"]));
            let mut vs = VirtualScattererSet::new(sectors);
            for b in boxes.into_iter().take(spec.n_true) {
                let half = 0.5 * b.bounds.extent();
                let offset = Vec3::from_fn(|k, _| spec.jitter * half[k] * rng.random_range(-1.0..=1.0));
                let srcs = sample_src_vector(sectors, spec.srcs_gp, spec.src_mean, &mut rng)?;
                vs.push_with_srcs(
                    VirtualScatterer { position: b.bounds.center() + offset, anchor: b.id },
                    srcs.into_iter().map(|t| Some(t.max(0.0))).collect(),
                )?;
            }
            let map = predict_map(&vs, grid, scene)?;
            Ok((vs, map))
        }
        Generator::SingleBounce => {
            let vs = VirtualScattererSet::new(sectors);
            let values =
                crate::par::map_slice(grid.cells(), |cell| single_bounce_gain(scene, &cell.center, spec.reflection_loss, cell.sees(TX_ID)));
            Ok((vs, Cgm::new(values.into_iter().collect::<Result<Vec<_>>>()?)))
        }
    }
}

fn single_bounce_gain(scene: &Scene, c: &Vec3, loss: f64, direct: bool) -> Result<f64> {
    let tx = scene.tx();
    let mut q = if direct { path_gain(&tx, c, scene.beta0(), scene.alpha())? } else { 0.0 };
    for b in scene.scatterers() {
        for (axis, plane, outward) in faces(&b.bounds) {
            let side = |p: &Vec3| outward * (p[axis] - plane);
            if side(&tx) <= 0.0 || side(c) <= 0.0 {
                continue;
            }
            let mut image = tx;
            image[axis] = 2.0 * plane - tx[axis];
            let t = (plane - image[axis]) / (c[axis] - image[axis]);
            let hit = image + t * (c - image);
            let on_face = (0..3).filter(|&k| k != axis).all(|k| hit[k] >= b.bounds.min[k] && hit[k] <= b.bounds.max[k]);
            if !on_face {
                continue;
            }
            if !los_visible(&tx, &hit, scene, Some(b.id)) || !los_visible(&hit, c, scene, Some(b.id)) {
                continue;
            }
            let unfolded = (hit - tx).norm() + (c - hit).norm();
            q += loss * scene.beta0() / unfolded.powf(scene.alpha());
        }
    }
    Ok(q)
}

/// The four vertical faces as `(axis, coordinate, outward sign)`.
fn faces(b: &Aabb) -> [(usize, f64, f64); 4] {
    [(0, b.min.x, -1.0), (0, b.max.x, 1.0), (1, b.min.y, -1.0), (1, b.max.y, 1.0)]
}

/// Measurement sampling settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingSpec {
    pub count: usize,
    pub selection: Selection,
    pub noise_std_rel: f64,
    pub seed: u64,
}

/// Picks `count` distinct valid grids and reads noisy gains off `truth`.
pub fn sample_measurements(
    truth: &Cgm,
    grid: &GridMap,
    scene: &Scene,
    sectors: AodSectorization,
    spec: &SamplingSpec,
) -> Result<MeasurementSet> {
    if truth.len() != grid.len() {
        return Err(invalid(format!("truth has {} values for {} grids", truth.len(), grid.len())));
    }
    if spec.count >= grid.len() {
        return Err(invalid(format!("L = {} must be smaller than the {} valid grids", spec.count, grid.len())));
    }
    if !(spec.noise_std_rel >= 0.0 && spec.noise_std_rel.is_finite()) {
        return Err(invalid("noise_std_rel must be finite and non-negative"));
    }
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &["select"]));
    let positions = match spec.selection {
        Selection::Type2 => index::sample(&mut pick_rng, grid.len(), spec.count).into_vec(),
        Selection::Type1 => type1_positions(grid, scene, sectors, spec.count, &mut pick_rng)?,
    };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, &["noise"]));
    let noise = Normal::new(0.0, spec.noise_std_rel).map_err(|e| invalid(e.to_string()))?;
    let mut sorted = positions;
    sorted.sort_unstable();
    let mut indices = Vec::with_capacity(sorted.len());
    let mut gains = Vec::with_capacity(sorted.len());
    for pos in sorted {
        let eps: f64 = noise.sample(&mut noise_rng);
        indices.push(grid.cells()[pos].index);
        gains.push((truth.get(pos).max(0.0) * (1.0 + eps)).max(0.0));
    }
    let mut ms = MeasurementSet::new(indices, gains)?;
    ms.selection = Some(spec.selection);
    ms.seed = Some(spec.seed);
    Ok(ms)
}

/// Greedy per-scatterer round robin over occupied sectors, nearest grid
/// first; if every queue runs dry the rest is drawn uniformly.
fn type1_positions(grid: &GridMap, scene: &Scene, sectors: AodSectorization, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    struct Queue {
        sectors: Vec<Vec<usize>>,
        cursor: Vec<usize>,
        next: usize,
    }
    let mut queues = Vec::new();
    for b in scene.scatterers_by_size() {
        let center = b.bounds.center();
        let mut groups: BTreeMap<usize, Vec<(f64, usize, usize)>> = BTreeMap::new();
        for (pos, cell) in grid.cells().iter().enumerate() {
            if !cell.sees(b.id) {
                continue;
            }
            let m = sectors.index_of(aod_of(&center, &cell.center)?);
            groups.entry(m).or_default().push(((cell.center - center).norm(), cell.index, pos));
        }
        let lists: Vec<Vec<usize>> = groups
            .into_values()
            .map(|mut g| {
                g.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                g.into_iter().map(|e| e.2).collect()
            })
            .collect();
        let n = lists.len();
        queues.push(Queue { sectors: lists, cursor: vec![0; n], next: 0 });
    }

    let mut chosen = BTreeSet::new();
    let mut order = Vec::with_capacity(count);
    'outer: while order.len() < count {
        let mut progress = false;
        for q in queues.iter_mut() {
            for _ in 0..q.sectors.len() {
                let s = q.next;
                q.next = (q.next + 1) % q.sectors.len();
                let list = &q.sectors[s];
                while q.cursor[s] < list.len() && chosen.contains(&list[q.cursor[s]]) {
                    q.cursor[s] += 1;
                }
                if let Some(&pos) = list.get(q.cursor[s]) {
                    chosen.insert(pos);
                    order.push(pos);
                    progress = true;
                    break;
                }
            }
            if order.len() == count {
                break 'outer;
            }
        }
        if !progress {
            break;
        }
    }
    if order.len() < count {
        let rest: Vec<usize> = (0..grid.len()).filter(|p| !chosen.contains(p)).collect();
        let extra = index::sample(rng, rest.len(), count - order.len());
        order.extend(extra.into_iter().map(|k| rest[k]));
    }
    Ok(order)
}

/// Random scene layout settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Side of the square region in meters.
    pub region: f64,
    pub region_height: f64,
    pub n_scatterers: usize,
    pub tx_height: f64,
    pub wavelength: f64,
    pub alpha: f64,
    /// `None` uses `(λ / 4π)²`.
    pub beta0: Option<f64>,
    /// Footprint side range as fractions of the region side.
    pub min_side_frac: f64,
    pub max_side_frac: f64,
    pub min_height: f64,
    pub max_height: f64,
    /// Minimum horizontal gap between boxes and around the transmitter.
    pub gap: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            region: 300.0,
            region_height: 60.0,
            n_scatterers: 30,
            tx_height: 9.0,
            wavelength: 0.1,
            alpha: 2.0,
            beta0: None,
            min_side_frac: 0.03,
            max_side_frac: 0.08,
            min_height: 8.0,
            max_height: 40.0,
            gap: 2.0,
        }
    }
}

/// Maximum placement attempts per box.
pub const PLACEMENT_ATTEMPTS: usize = 1000;

/// Random non-overlapping boxes standing on the ground, ids from 1, with the
/// transmitter at the region center.
pub fn generate_scene(spec: &SceneSpec, root_seed: u64) -> Result<Scene> {
    if !(spec.region > 0.0 && spec.region_height > 0.0 && spec.wavelength > 0.0 && spec.alpha > 0.0) {
        return Err(invalid("region, region_height, wavelength and alpha must be positive"));
    }
    if !(spec.tx_height > 0.0 && spec.tx_height < spec.region_height) {
        return Err(invalid("tx_height must lie inside the region"));
    }
    if !(0.0 < spec.min_side_frac && spec.min_side_frac <= spec.max_side_frac && spec.max_side_frac < 1.0) {
        return Err(invalid("need 0 < min_side_frac <= max_side_frac < 1"));
    }
    if !(0.0 < spec.min_height && spec.min_height <= spec.max_height) || spec.gap < 0.0 {
        return Err(invalid("need 0 < min_height <= max_height and gap >= 0"));
    }
    let beta0 = spec.beta0.unwrap_or_else(|| (spec.wavelength / (4.0 * std::f64::consts::PI)).powi(2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(root_seed, &["scene"]));
    let r = spec.region;
    let tx = Vec3::new(0.5 * r, 0.5 * r, spec.tx_height);
    let max_h = spec.max_height.min(spec.region_height);
    let min_h = spec.min_height.min(max_h);
    let keep_out = Aabb::new(tx, tx).dilated(spec.gap);
    let mut boxes: Vec<PhysicalScatterer> = Vec::with_capacity(spec.n_scatterers);
    for k in 0..spec.n_scatterers {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let sx = r * rng.random_range(spec.min_side_frac..=spec.max_side_frac);
            let sy = r * rng.random_range(spec.min_side_frac..=spec.max_side_frac);
            let h = rng.random_range(min_h..=max_h);
            let x0 = rng.random_range(0.0..=(r - sx));
            let y0 = rng.random_range(0.0..=(r - sy));
            let b = Aabb::new(Vec3::new(x0, y0, 0.0), Vec3::new(x0 + sx, y0 + sy, h));
            let grown = b.dilated(spec.gap);
            if grown.footprint_overlaps(&keep_out) || boxes.iter().any(|o| grown.footprint_overlaps(&o.bounds)) {
                continue;
            }
            placed = Some(b);
            break;
        }
        let bounds = placed.ok_or_else(|| {
            invalid(format!(
                "could not place box {} of {} after {PLACEMENT_ATTEMPTS} attempts; use fewer or smaller boxes",
                k + 1,
                spec.n_scatterers
            ))
        })?;
        boxes.push(PhysicalScatterer { id: k as u32 + 1, bounds });
    }
    let region = Aabb::new(Vec3::zeros(), Vec3::new(r, r, spec.region_height));
    Scene::new(region, tx, boxes, beta0, spec.alpha, spec.wavelength)
}
