//! Gaussian-process completion of scatterer response coefficients.
//!
//! Each scatterer's estimated SRCs are treated as noisy samples of a
//! Gaussian process over departure angle with covariance
//! `v² exp(−d²/(2ρ²))`. Hyperparameters `(v, ρ, σ)` maximize the log-marginal
//! likelihood of the estimates; unestimated sectors receive the posterior
//! mean at their center angle.
//!
//! Angular distance: `d² = (2 sin(Δaz/2))² + Δel²`. The chordal azimuth term
//! has no seam at ±π and keeps every kernel matrix positive definite, which
//! the plain wrapped difference does not.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::channel::{predict_map, Cgm, VirtualScattererSet};
use crate::error::{invalid, Error, Result};
use crate::estimation::{progressive_estimate, EstimatorConfig, FitReport};
use crate::geometry::{Aod, AodSectorization, GridMap, Scene};
use crate::par;
use crate::synth::MeasurementSet;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal jitter (relative to `v²`) tried once when `A` fails to factor.
pub const JITTER: f64 = 1e-10;

/// Squared angular distance between two departure directions.
pub fn angular_distance_sq(a: Aod, b: Aod) -> f64 {
    let chord = 2.0 * (0.5 * (a.azimuth - b.azimuth)).sin();
    let del = a.elevation - b.elevation;
    chord * chord + del * del
}

/// `v² exp(−d²(a, b) / (2ρ²))`.
pub fn kernel(a: Aod, b: Aod, v: f64, rho: f64) -> f64 {
    v * v * (-angular_distance_sq(a, b) / (2.0 * rho * rho)).exp()
}

pub fn kernel_matrix(angles: &[Aod], v: f64, rho: f64) -> DMatrix<f64> {
    let n = angles.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = v * v;
        for j in 0..i {
            let c = kernel(angles[i], angles[j], v, rho);
            k[(i, j)] = c;
            k[(j, i)] = c;
        }
    }
    k
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub v: f64,
    pub rho: f64,
    pub sigma: f64,
}

impl Hyperparams {
    fn to_log(self) -> [f64; 3] {
        [self.v.ln(), self.rho.ln(), self.sigma.ln()]
    }

    fn from_log(p: [f64; 3]) -> Self {
        Hyperparams { v: p[0].exp(), rho: p[1].exp(), sigma: p[2].exp() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GprConfig {
    /// Use the mean of the estimates as a constant prior mean instead of 0.
    pub constant_mean: bool,
    /// Gradient-ascent iterations per multi-start point.
    pub max_ascent_iters: usize,
    /// Fewer estimates than this skip the likelihood fit.
    pub min_fit_points: usize,
}

impl Default for GprConfig {
    fn default() -> Self {
        GprConfig { constant_mean: false, max_ascent_iters: 100, min_fit_points: 3 }
    }
}

/// A fitted per-scatterer Gaussian process.
#[derive(Clone, Debug)]
pub struct GprModel {
    angles: Vec<Aod>,
    targets: DVector<f64>,
    mean: f64,
    hyper: Hyperparams,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
}

impl GprModel {
    /// Factors `A = V + σ²I` for the given data and hyperparameters.
    pub fn new(angles: Vec<Aod>, srcs: &[f64], hyper: Hyperparams, mean: f64) -> Result<Self> {
        if angles.is_empty() || angles.len() != srcs.len() {
            return Err(invalid("GP needs matching, non-empty angle and SRC lists"));
        }
        if !(hyper.v > 0.0 && hyper.rho > 0.0 && hyper.sigma >= 0.0) {
            return Err(invalid(format!("invalid hyperparameters {hyper:?}")));
        }
        let mut a = kernel_matrix(&angles, hyper.v, hyper.rho);
        for i in 0..angles.len() {
            a[(i, i)] += hyper.sigma * hyper.sigma;
        }
        let chol = match Cholesky::new(a.clone()) {
            Some(c) => c,
            None => {
                for i in 0..angles.len() {
                    a[(i, i)] += JITTER * hyper.v * hyper.v;
                }
                Cholesky::new(a).ok_or_else(|| Error::Numeric(format!("GP covariance is not positive definite for {hyper:?}")))?
            }
        };
        let targets = DVector::from_column_slice(srcs);
        let weights = chol.solve(&targets.add_scalar(-mean));
        Ok(GprModel { angles, targets, mean, hyper, chol, weights })
    }

    pub fn hyperparams(&self) -> Hyperparams {
        self.hyper
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    /// `−½ τᵀA⁻¹τ − ½ log|A| − (M/2) log 2π` of the centered estimates.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let centered = self.targets.add_scalar(-self.mean);
        let log_det: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * centered.dot(&self.weights) - 0.5 * log_det - 0.5 * self.angles.len() as f64 * LOG_2PI
    }

    /// Posterior mean `kᵀA⁻¹τ` at `target`.
    pub fn predict(&self, target: Aod) -> f64 {
        let cross: f64 =
            self.angles.iter().zip(self.weights.iter()).map(|(&a, w)| kernel(target, a, self.hyper.v, self.hyper.rho) * w).sum();
        self.mean + cross
    }

    /// Likelihood and its gradient with respect to `(ln v, ln ρ, ln σ)`.
    fn likelihood_and_gradient(&self) -> (f64, [f64; 3]) {
        let n = self.angles.len();
        let a_inv = self.chol.inverse();
        let w = &self.weights;
        // ∂L/∂θ = ½ tr((wwᵀ − A⁻¹) ∂A/∂θ)
        let mut g = [0.0; 3];
        let (v, rho, sigma) = (self.hyper.v, self.hyper.rho, self.hyper.sigma);
        for i in 0..n {
            for j in 0..n {
                let b = w[i] * w[j] - a_inv[(i, j)];
                let k = kernel(self.angles[i], self.angles[j], v, rho);
                g[0] += b * 2.0 * k;
                g[1] += b * k * angular_distance_sq(self.angles[i], self.angles[j]) / (rho * rho);
            }
            g[2] += (w[i] * w[i] - a_inv[(i, i)]) * 2.0 * sigma * sigma;
        }
        (self.log_marginal_likelihood(), [0.5 * g[0], 0.5 * g[1], 0.5 * g[2]])
    }
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|t| t * t).sum::<f64>() / values.len().max(1) as f64).sqrt()
}

/// `1e-6 · max(max|τ̂|, 1)`.
pub fn sigma_floor(srcs: &[f64]) -> f64 {
    1e-6 * srcs.iter().fold(1.0f64, |m, t| m.max(t.abs()))
}

fn prior_mean(srcs: &[f64], config: &GprConfig) -> f64 {
    if config.constant_mean && !srcs.is_empty() {
        srcs.iter().sum::<f64>() / srcs.len() as f64
    } else {
        0.0
    }
}

/// Result of [`fit_hyperparams`].
#[derive(Clone, Debug, PartialEq)]
pub struct HyperFit {
    pub hyper: Hyperparams,
    pub log_likelihood: f64,
    /// Likelihood at each multi-start point (empty when the fit was skipped).
    pub start_likelihoods: Vec<f64>,
    pub fitted: bool,
}

/// Maximizes the log-marginal likelihood over `(v, ρ, σ)` by gradient ascent
/// in log space from 8 corner starts; with fewer than
/// `config.min_fit_points` estimates returns prior defaults.
pub fn fit_hyperparams(angles: &[Aod], srcs: &[f64], sectors: AodSectorization, config: &GprConfig) -> Result<HyperFit> {
    if angles.is_empty() || angles.len() != srcs.len() {
        return Err(invalid("GP fit needs matching, non-empty angle and SRC lists"));
    }
    let mean = prior_mean(srcs, config);
    let centered: Vec<f64> = srcs.iter().map(|t| t - mean).collect();
    let floor = sigma_floor(srcs);
    let scale = rms(&centered).max(floor);
    let width = sectors.sector_width();
    let evaluate = |h: Hyperparams| GprModel::new(angles.to_vec(), srcs, h, mean).ok();

    if srcs.len() < config.min_fit_points.max(1) {
        let hyper = Hyperparams { v: scale, rho: width, sigma: floor };
        let log_likelihood = evaluate(hyper).map_or(f64::NEG_INFINITY, |m| m.log_marginal_likelihood());
        return Ok(HyperFit { hyper, log_likelihood, start_likelihoods: Vec::new(), fitted: false });
    }

    let ln_floor = floor.ln();
    // box constraints in log space keep the ascent away from degenerate kernels
    let lo = [(scale * 1e-4).ln(), (width * 1e-2).ln(), ln_floor];
    let hi = [(scale * 1e4).ln(), (width * 1e2).ln(), (scale * 10.0).max(floor).ln()];
    let clamp = |p: [f64; 3]| [p[0].clamp(lo[0], hi[0]), p[1].clamp(lo[1], hi[1]), p[2].clamp(lo[2], hi[2])];

    let mut starts = Vec::with_capacity(8);
    for vf in [0.5, 2.0] {
        for rf in [0.5, 2.0] {
            for sf in [1e-4, 1e-2] {
                starts.push(Hyperparams { v: vf * scale, rho: rf * width, sigma: (sf * scale).max(floor) });
            }
        }
    }

    let mut best: Option<(Hyperparams, f64)> = None;
    let mut start_likelihoods = Vec::with_capacity(starts.len());
    for start in starts {
        let mut p = clamp(start.to_log());
        let Some(mut model) = evaluate(Hyperparams::from_log(p)) else {
            start_likelihoods.push(f64::NEG_INFINITY);
            continue;
        };
        let (mut value, mut grad) = model.likelihood_and_gradient();
        start_likelihoods.push(value);
        let mut step = 0.5;
        for _ in 0..config.max_ascent_iters {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !(norm > 1e-9) {
                break;
            }
            let mut improved = false;
            while step > 1e-8 {
                let trial = clamp([p[0] + step * grad[0] / norm, p[1] + step * grad[1] / norm, p[2] + step * grad[2] / norm]);
                if let Some(m) = evaluate(Hyperparams::from_log(trial)) {
                    let lv = m.log_marginal_likelihood();
                    if lv > value {
                        p = trial;
                        model = m;
                        value = lv;
                        improved = true;
                        step = (step * 2.0).min(2.0);
                        break;
                    }
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
            grad = model.likelihood_and_gradient().1;
        }
        if best.as_ref().is_none_or(|b| value > b.1) {
            best = Some((Hyperparams::from_log(p), value));
        }
    }
    let (hyper, log_likelihood) = best.ok_or_else(|| Error::Numeric("no GP start point could be evaluated".into()))?;
    Ok(HyperFit { hyper, log_likelihood, start_likelihoods, fitted: true })
}

/// Hyperparameters fitted for one scatterer during completion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScattererGpr {
    pub v: f64,
    pub rho: f64,
    pub sigma: f64,
    pub m_trained: usize,
}

/// Fills every undefined SRC with the GP posterior mean at its sector
/// center. Defined entries are left as they are. A scatterer without any
/// estimate is filled with zeros and reported as `None`.
pub fn complete_model(vs: &VirtualScattererSet, config: &GprConfig) -> Result<(VirtualScattererSet, Vec<Option<ScattererGpr>>)> {
    let sectors = vs.sectors();
    let centers = sectors.centers();
    let fitted = par::map_range(vs.len(), |n| -> Result<Option<(Vec<Option<f64>>, ScattererGpr)>> {
        let row = vs.srcs(n);
        let (angles, srcs): (Vec<Aod>, Vec<f64>) = row.iter().enumerate().filter_map(|(m, t)| t.map(|t| (centers[m], t))).unzip();
        if srcs.is_empty() {
            return Ok(None);
        }
        let fit = fit_hyperparams(&angles, &srcs, sectors, config)?;
        let model = GprModel::new(angles, &srcs, fit.hyper, prior_mean(&srcs, config))?;
        let filled = row.iter().enumerate().map(|(m, t)| Some(t.unwrap_or_else(|| model.predict(centers[m])))).collect();
        let h = model.hyperparams();
        Ok(Some((filled, ScattererGpr { v: h.v, rho: h.rho, sigma: h.sigma, m_trained: srcs.len() })))
    });
    let mut out = VirtualScattererSet::new(sectors);
    let mut info = Vec::with_capacity(vs.len());
    for (n, result) in fitted.into_iter().enumerate() {
        match result? {
            Some((filled, gpr)) => {
                out.push_with_srcs(*vs.scatterer(n), filled)?;
                info.push(Some(gpr));
            }
            None => {
                log::warn!("virtual scatterer {n} has no estimated SRC; filling with zeros");
                out.push_with_srcs(*vs.scatterer(n), vec![Some(0.0); sectors.count()])?;
                info.push(None);
            }
        }
    }
    Ok((out, info))
}

/// Output of a full map reconstruction.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub map: Cgm,
    /// Completed model (every SRC defined).
    pub model: VirtualScattererSet,
    pub gpr: Vec<Option<ScattererGpr>>,
    pub report: Option<FitReport>,
    /// Method-specific remarks recorded in output metadata.
    pub notes: Vec<String>,
}

/// Progressive estimation, GP completion and forward prediction.
pub fn reconstruct_cgm(
    scene: &Scene,
    grid: &GridMap,
    sectors: AodSectorization,
    measurements: &MeasurementSet,
    est_config: &EstimatorConfig,
    gpr_config: &GprConfig,
) -> Result<Reconstruction> {
    let (estimated, report) = progressive_estimate(scene, grid, sectors, measurements, est_config)?;
    let (model, gpr) = complete_model(&estimated, gpr_config)?;
    let map = predict_map(&model, grid, scene)?;
    Ok(Reconstruction { map, model, gpr, report: Some(report), notes: Vec::new() })
}
