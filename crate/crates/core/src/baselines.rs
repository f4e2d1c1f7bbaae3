//! Comparison methods sharing the reconstruction interface: fixed-position
//! scatterers with GP completion, fixed-position scatterers with independent
//! per-sector coefficients, and ordinary kriging of dB gains.

use nalgebra::{DMatrix, DVector, LU};
use serde::{Deserialize, Serialize};

use crate::channel::{predict_map, Cgm, VirtualScatterer, VirtualScattererSet};
use crate::error::{invalid, Error, Result};
use crate::estimation::{progressive_estimate, write_back, EstimatorConfig, Problem};
use crate::geometry::{AodSectorization, GridMap, Scene};
use crate::gpr::{complete_model, reconstruct_cgm, GprConfig, Reconstruction};
use crate::par;
use crate::synth::MeasurementSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Proposed,
    Kpsm,
    Issm,
    Kriging,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Proposed, Method::Kpsm, Method::Issm, Method::Kriging];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::Kpsm => "kpsm",
            Method::Issm => "issm",
            Method::Kriging => "kriging",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}; expected proposed, kpsm, issm or kriging")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariogramFamily {
    #[default]
    Gaussian,
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Sectorization used by the uncorrelated-coefficient method; `None`
    /// reuses the reconstruction sectors.
    pub issm_sectors: Option<[usize; 2]>,
    pub kriging_variogram: VariogramFamily,
    pub kriging_nugget: f64,
    /// Let the fixed-position method refine positions (one progressive
    /// iteration with every physical scatterer).
    pub kpsm_refine_positions: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            issm_sectors: None,
            kriging_variogram: VariogramFamily::Gaussian,
            kriging_nugget: 0.0,
            kpsm_refine_positions: false,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kriging_nugget >= 0.0 && self.kriging_nugget.is_finite()) {
            return Err(invalid("kriging_nugget must be finite and non-negative"));
        }
        if let Some([a, e]) = self.issm_sectors {
            AodSectorization::new(a, e)?;
        }
        Ok(())
    }
}

/// Every setting a reconstruction method may need.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub estimator: EstimatorConfig,
    pub gpr: GprConfig,
    pub baselines: BaselineConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        self.baselines.validate()
    }
}

/// Runs `method` end to end.
pub fn reconstruct(
    method: Method,
    scene: &Scene,
    grid: &GridMap,
    sectors: AodSectorization,
    measurements: &MeasurementSet,
    config: &PipelineConfig,
) -> Result<Reconstruction> {
    config.validate()?;
    match method {
        Method::Proposed => reconstruct_cgm(scene, grid, sectors, measurements, &config.estimator, &config.gpr),
        Method::Kpsm => kpsm_reconstruct(scene, grid, sectors, measurements, config),
        Method::Issm => issm_reconstruct(scene, grid, sectors, measurements, config),
        Method::Kriging => {
            let map = kriging_reconstruct(grid, measurements, &config.baselines)?;
            Ok(Reconstruction { map, model: VirtualScattererSet::new(sectors), gpr: Vec::new(), report: None, notes: Vec::new() })
        }
    }
}

fn at_centers(scene: &Scene, sectors: AodSectorization) -> VirtualScattererSet {
    let mut vs = VirtualScattererSet::new(sectors);
    for p in scene.scatterers_by_size() {
        vs.push(VirtualScatterer { position: p.bounds.center(), anchor: p.id });
    }
    vs
}

/// One virtual scatterer fixed at the center of every physical scatterer,
/// LS coefficients, GP completion and forward prediction.
pub fn kpsm_reconstruct(
    scene: &Scene,
    grid: &GridMap,
    sectors: AodSectorization,
    measurements: &MeasurementSet,
    config: &PipelineConfig,
) -> Result<Reconstruction> {
    let (estimated, report) = if config.baselines.kpsm_refine_positions {
        let est = EstimatorConfig { step_rho: scene.scatterers().len().max(1), max_progressive_iters: 1, ..config.estimator.clone() };
        let (vs, report) = progressive_estimate(scene, grid, sectors, measurements, &est)?;
        (vs, Some(report))
    } else {
        let problem = Problem::new(scene, grid, measurements, config.estimator.objective)?;
        let mut vs = at_centers(scene, sectors);
        let fit = problem.solve(&vs, config.estimator.ridge_lambda)?;
        write_back(&mut vs, &fit);
        (vs, None)
    };
    let (model, gpr) = complete_model(&estimated, &config.gpr)?;
    let map = predict_map(&model, grid, scene)?;
    Ok(Reconstruction { map, model, gpr, report, notes: Vec::new() })
}

/// Fixed centers with independent per-sector coefficients; sectors without
/// a covering measurement get coefficient 0.
pub fn issm_reconstruct(
    scene: &Scene,
    grid: &GridMap,
    sectors: AodSectorization,
    measurements: &MeasurementSet,
    config: &PipelineConfig,
) -> Result<Reconstruction> {
    let sectors = match config.baselines.issm_sectors {
        Some([a, e]) => AodSectorization::new(a, e)?,
        None => sectors,
    };
    let problem = Problem::new(scene, grid, measurements, config.estimator.objective)?;
    let mut vs = at_centers(scene, sectors);
    let fit = problem.solve(&vs, config.estimator.ridge_lambda)?;
    write_back(&mut vs, &fit);
    let mut zero_filled = 0;
    for n in 0..vs.len() {
        for m in 0..sectors.count() {
            if vs.src(n, m).is_none() {
                vs.set_src(n, m, Some(0.0));
                zero_filled += 1;
            }
        }
    }
    let map = predict_map(&vs, grid, scene)?;
    let notes = vec![format!("{zero_filled} uncovered (scatterer, sector) coefficients set to 0")];
    Ok(Reconstruction { map, model: vs, gpr: vec![None; scene.scatterers().len()], report: None, notes })
}

/// Gains below this are floored before conversion to dB.
pub const DB_FLOOR: f64 = 1e-20;

/// Nugget added when the kriging system turns out singular.
pub const NUGGET_BUMP: f64 = 1e-8;

pub fn to_db(g: f64) -> f64 {
    10.0 * g.max(DB_FLOOR).log10()
}

pub fn from_db(z: f64) -> f64 {
    10f64.powf(z / 10.0)
}

/// Isotropic variogram `γ(h) = nugget + sill · f(h / range)` for `h > 0`,
/// `γ(0) = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variogram {
    pub family: VariogramFamily,
    pub nugget: f64,
    pub sill: f64,
    pub range: f64,
}

impl Variogram {
    fn shape(family: VariogramFamily, h: f64, range: f64) -> f64 {
        match family {
            VariogramFamily::Gaussian => 1.0 - (-(h * h) / (range * range)).exp(),
            VariogramFamily::Exponential => 1.0 - (-h / range).exp(),
        }
    }

    pub fn eval(&self, h: f64) -> f64 {
        if h == 0.0 {
            0.0
        } else {
            self.nugget + self.sill * Self::shape(self.family, h, self.range)
        }
    }
}

/// Binned semivariance: `(mean lag, mean ½(z_i − z_j)², pair count)` for
/// each non-empty bin of `bins` equal-width bins up to the largest lag.
pub fn empirical_variogram(points: &[[f64; 2]], values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    let mut pairs = Vec::new();
    for i in 0..points.len() {
        for j in 0..i {
            pairs.push((dist(points[i], points[j]), 0.5 * (values[i] - values[j]).powi(2)));
        }
    }
    let h_max = pairs.iter().fold(0.0f64, |m, p| m.max(p.0));
    if h_max == 0.0 || bins == 0 {
        return Vec::new();
    }
    let mut acc = vec![(0.0, 0.0, 0usize); bins];
    for (h, g) in pairs {
        let b = ((h / h_max * bins as f64) as usize).min(bins - 1);
        acc[b].0 += h;
        acc[b].1 += g;
        acc[b].2 += 1;
    }
    acc.into_iter().filter(|a| a.2 > 0).map(|(h, g, n)| (h / n as f64, g / n as f64, n)).collect()
}

/// Count-weighted least-squares fit of sill and range for a fixed nugget:
/// log-spaced grid search over the range with the sill in closed form.
pub fn fit_variogram(points: &[[f64; 2]], values: &[f64], family: VariogramFamily, nugget: f64) -> Variogram {
    let bins = empirical_variogram(points, values, 10);
    let h_max = bins.iter().fold(0.0f64, |m, b| m.max(b.0)).max(1e-9);
    let mut best = Variogram { family, nugget, sill: 1e-12, range: h_max };
    let mut best_err = f64::INFINITY;
    for k in 0..60 {
        let range = h_max * 10f64.powf(-2.0 + 2.5 * k as f64 / 59.0);
        let (mut num, mut den) = (0.0, 0.0);
        for &(h, g, n) in &bins {
            let f = Variogram::shape(family, h, range);
            num += n as f64 * f * (g - nugget);
            den += n as f64 * f * f;
        }
        let sill = if den > 0.0 { (num / den).max(1e-12) } else { 1e-12 };
        let err: f64 = bins.iter().map(|&(h, g, n)| n as f64 * (g - nugget - sill * Variogram::shape(family, h, range)).powi(2)).sum();
        if err < best_err {
            best_err = err;
            best = Variogram { family, nugget, sill, range };
        }
    }
    best
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Ordinary kriging predictor with a factored system.
#[derive(Clone, Debug)]
pub struct Kriging {
    points: Vec<[f64; 2]>,
    values: Vec<f64>,
    variogram: Variogram,
    /// Zero nugget requested: coincident targets return their measurement.
    exact: bool,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

/// Smallest accepted `|u_kk| / max |u_kk|` of the factored system.
const PIVOT_TOL: f64 = 1e-15;

impl Kriging {
    /// Factors `[Γ 1; 1ᵀ 0]`, bumping the nugget while it stays singular.
    pub fn new(points: Vec<[f64; 2]>, values: Vec<f64>, variogram: Variogram) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("kriging requires ≥ 2 measurements"));
        }
        if points.len() != values.len() {
            return Err(invalid("kriging needs one value per point"));
        }
        let exact = variogram.nugget == 0.0;
        let mut variogram = variogram;
        for _ in 0..8 {
            let lu = Self::system(&points, &variogram).lu();
            let diag = lu.u().diagonal().abs();
            if diag.iter().all(|d| d.is_finite()) && diag.min() > PIVOT_TOL * diag.max() {
                return Ok(Kriging { points, values, variogram, exact, lu });
            }
            log::warn!("kriging system is singular; raising the nugget by {NUGGET_BUMP}");
            variogram.nugget += NUGGET_BUMP;
        }
        Err(Error::Numeric("kriging system stays singular after nugget bumps".into()))
    }

    fn system(points: &[[f64; 2]], v: &Variogram) -> DMatrix<f64> {
        let n = points.len();
        let mut a = DMatrix::zeros(n + 1, n + 1);
        for i in 0..n {
            for j in 0..i {
                // distinct samples at one location still differ by the nugget
                let g = v.nugget + v.sill * Variogram::shape(v.family, dist(points[i], points[j]), v.range);
                a[(i, j)] = g;
                a[(j, i)] = g;
            }
            a[(i, n)] = 1.0;
            a[(n, i)] = 1.0;
        }
        a
    }

    pub fn variogram(&self) -> Variogram {
        self.variogram
    }

    /// Kriging weights for `target` (without the Lagrange multiplier).
    pub fn weights(&self, target: [f64; 2]) -> DVector<f64> {
        let n = self.points.len();
        let mut rhs = DVector::from_element(n + 1, 1.0);
        for i in 0..n {
            rhs[i] = self.variogram.eval(dist(self.points[i], target));
        }
        let sol = self.lu.solve(&rhs).expect("system was checked to be invertible");
        sol.rows(0, n).into_owned()
    }

    pub fn predict(&self, target: [f64; 2]) -> f64 {
        // a coincident target with zero nugget reproduces its measurement exactly
        if self.exact {
            if let Some(i) = self.points.iter().position(|&p| p == target) {
                return self.values[i];
            }
        }
        self.weights(target).iter().zip(&self.values).map(|(w, z)| w * z).sum()
    }
}

/// Ordinary kriging of dB gains over grid-center coordinates.
pub fn kriging_reconstruct(grid: &GridMap, measurements: &MeasurementSet, config: &BaselineConfig) -> Result<Cgm> {
    if measurements.len() < 2 {
        return Err(invalid("kriging requires ≥ 2 measurements"));
    }
    config.validate()?;
    let xy = |pos: usize| {
        let c = grid.cells()[pos].center;
        [c.x, c.y]
    };
    let mut points = Vec::with_capacity(measurements.len());
    for &i in measurements.indices() {
        let pos = grid.position_of(i).ok_or_else(|| invalid(format!("measurement grid {i} is not a valid grid")))?;
        points.push(xy(pos));
    }
    let values: Vec<f64> = measurements.gains().iter().map(|&g| to_db(g)).collect();
    let variogram = fit_variogram(&points, &values, config.kriging_variogram, config.kriging_nugget);
    let model = Kriging::new(points, values, variogram)?;
    let db = par::map_range(grid.len(), |pos| model.predict(xy(pos)));
    Ok(Cgm::new(db.into_iter().map(from_db).collect()))
}
