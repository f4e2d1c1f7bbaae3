//! Scatterer parameter estimation from channel-power measurements.
//!
//! For fixed scatterer positions the predicted gains are linear in the
//! SRCs, so the coefficients follow from a ridge least-squares solve
//! ([`ls_estimate_srcs`]). Positions are refined one scatterer at a time by
//! projected gradient descent with Armijo backtracking
//! ([`refine_position`]), re-solving the SRCs at every trial point. The
//! progressive loop ([`progressive_estimate`]) grows the scatterer count by
//! `step_rho` per iteration, warm-starting from the previous refined
//! positions, and stops once the training objective `ζ_t` stalls.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use crate::channel::{path_gain, path_gain_gradient, ConstraintRegion, VirtualScatterer, VirtualScattererSet};
use crate::error::{invalid, Error, Result};
use crate::geometry::{aod_of, Aabb, AodSectorization, GridMap, Scene, Vec3, TX_ID};
use crate::linalg::{default_ridge, ridge_solve};
use crate::synth::MeasurementSet;

/// Guards the relative-improvement ratio when `ζ` reaches zero.
pub const EPS_DEN: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mse,
    #[default]
    Nmse,
}

/// How the feasible region of each virtual scatterer is derived.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintMode {
    /// The anchor's box grown by `margin` meters, cut to the scene region.
    AnchorDilated { margin: f64 },
    /// The whole scene region.
    Scene,
    /// One explicit box shared by all scatterers.
    Fixed { min: [f64; 3], max: [f64; 3] },
}

impl Default for ConstraintMode {
    fn default() -> Self {
        ConstraintMode::AnchorDilated { margin: 20.0 }
    }
}

impl ConstraintMode {
    pub fn region_for(&self, anchor: u32, scene: &Scene) -> Result<ConstraintRegion> {
        let bounds = match self {
            ConstraintMode::AnchorDilated { margin } => {
                if !(*margin >= 0.0) {
                    return Err(invalid("constraint margin must be non-negative"));
                }
                let bx = scene.scatterer(anchor).ok_or_else(|| invalid(format!("unknown anchor scatterer {anchor}")))?.bounds;
                bx.dilated(*margin).intersection(scene.region()).ok_or_else(|| invalid("constraint region is empty"))?
            }
            ConstraintMode::Scene => *scene.region(),
            ConstraintMode::Fixed { min, max } => Aabb::new(Vec3::from(*min), Vec3::from(*max)),
        };
        ConstraintRegion::new(bounds, scene)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Scatterers added per progressive iteration (ϱ).
    pub step_rho: usize,
    pub max_progressive_iters: usize,
    pub objective: Objective,
    /// Absolute ridge weight; `None` selects `1e-8 · trace(ΦᵀΦ) / cols`.
    pub ridge_lambda: Option<f64>,
    pub gd_max_iters: usize,
    /// Initial trial step length in meters.
    pub gd_step_init: f64,
    pub gd_armijo_c: f64,
    pub gd_shrink: f64,
    /// Backtracking gives up below this step length (meters).
    pub gd_min_step: f64,
    /// Cap on coordinate sweeps over all scatterers per progressive iteration.
    pub max_sweeps: usize,
    pub zeta_rel_tol: f64,
    /// Absolute floor on `ζ_{t−1} − ζ_t` (in normalized objective units)
    /// below which the loop stops even if the relative ratio is large.
    pub zeta_abs_tol: f64,
    pub constraint: ConstraintMode,
    /// Scale the gradient step by the Gauss–Newton curvature first.
    pub gauss_newton: bool,
    /// Follow each sweep with a joint Gauss–Newton pass over all positions.
    pub joint_refine: bool,
    /// Fall back to an axis-aligned search when gradient steps stall.
    pub compass_fallback: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            step_rho: 2,
            max_progressive_iters: 5,
            objective: Objective::Nmse,
            ridge_lambda: None,
            gd_max_iters: 50,
            gd_step_init: 5.0,
            gd_armijo_c: 1e-4,
            gd_shrink: 0.5,
            gd_min_step: 1e-3,
            max_sweeps: 10,
            zeta_rel_tol: 1e-3,
            zeta_abs_tol: 1e-12,
            gauss_newton: true,
            joint_refine: true,
            compass_fallback: true,
            constraint: ConstraintMode::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_rho == 0 {
            return Err(invalid("step_rho must be at least 1"));
        }
        if self.max_progressive_iters == 0 {
            return Err(invalid("max_progressive_iters must be at least 1"));
        }
        if let Some(l) = self.ridge_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(invalid("ridge_lambda must be finite and non-negative"));
            }
        }
        if !(self.zeta_rel_tol > 0.0) || !(self.zeta_abs_tol >= 0.0) {
            return Err(invalid("zeta_rel_tol must be positive and zeta_abs_tol non-negative"));
        }
        if !(self.gd_step_init > 0.0 && self.gd_min_step > 0.0) {
            return Err(invalid("gradient step lengths must be positive"));
        }
        if !(self.gd_shrink > 0.0 && self.gd_shrink < 1.0) {
            return Err(invalid("gd_shrink must lie in (0, 1)"));
        }
        if !(self.gd_armijo_c > 0.0 && self.gd_armijo_c < 1.0) {
            return Err(invalid("gd_armijo_c must lie in (0, 1)"));
        }
        if self.max_sweeps == 0 {
            return Err(invalid("max_sweeps must be at least 1"));
        }
        Ok(())
    }
}

/// `U` averaged over the measured grids.
pub fn objective_value(measured: &[f64], predicted: &[f64], objective: Objective) -> Result<f64> {
    if measured.len() != predicted.len() {
        return Err(invalid("measurement and prediction lengths differ"));
    }
    if measured.is_empty() {
        return Err(invalid("objective needs at least one measurement"));
    }
    let sse: f64 = measured.iter().zip(predicted).map(|(q, p)| (q - p).powi(2)).sum();
    match objective {
        Objective::Mse => Ok(sse / measured.len() as f64),
        Objective::Nmse => {
            let energy: f64 = measured.iter().map(|q| q * q).sum();
            if energy == 0.0 {
                return Err(invalid("NMSE is undefined for all-zero measurements"));
            }
            Ok(sse / energy)
        }
    }
}

/// The linear system behind the SRC estimate: one row per measured grid,
/// one column per `(scatterer, sector)` pair seen by some measured grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    /// Flat grid index of each row.
    pub rows: Vec<usize>,
    /// `(scatterer, sector)` of each column, sorted.
    pub columns: Vec<(usize, usize)>,
    pub phi: DMatrix<f64>,
    /// Direct transmitter gain per row (0 when the Tx is not visible).
    pub offset: DVector<f64>,
    /// Nonzero entries as `(row, scatterer, column)`.
    pub entries: Vec<(usize, usize, usize)>,
}

/// Solution of the SRC least-squares problem at fixed positions.
#[derive(Clone, Debug)]
pub struct LsFit {
    pub design: DesignMatrix,
    pub srcs: DVector<f64>,
    pub predicted: DVector<f64>,
    pub objective: f64,
}

/// Measurements bound to a scene and grid, ready for repeated model fits.
pub struct Problem<'a> {
    scene: &'a Scene,
    grid: &'a GridMap,
    rows: Vec<usize>,
    measured: DVector<f64>,
    objective: Objective,
    denominator: f64,
}

impl<'a> Problem<'a> {
    pub fn new(scene: &'a Scene, grid: &'a GridMap, measurements: &MeasurementSet, objective: Objective) -> Result<Self> {
        if measurements.is_empty() {
            return Err(invalid("estimation needs at least one measurement"));
        }
        let mut rows = Vec::with_capacity(measurements.len());
        for &index in measurements.indices() {
            rows.push(grid.position_of(index).ok_or_else(|| invalid(format!("measurement grid {index} is not a valid grid")))?);
        }
        let measured = DVector::from_column_slice(measurements.gains());
        let denominator = match objective {
            Objective::Mse => measured.len() as f64,
            Objective::Nmse => {
                let e = measured.norm_squared();
                if e == 0.0 {
                    return Err(invalid("NMSE is undefined for all-zero measurements"));
                }
                e
            }
        };
        Ok(Problem { scene, grid, rows, measured, objective, denominator })
    }

    pub fn scene(&self) -> &Scene {
        self.scene
    }

    pub fn grid(&self) -> &GridMap {
        self.grid
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn measured(&self) -> &DVector<f64> {
        &self.measured
    }

    /// Objective scale: 1 for NMSE, mean squared measurement for MSE.
    fn scale(&self) -> f64 {
        match self.objective {
            Objective::Nmse => 1.0,
            Objective::Mse => self.measured.norm_squared() / self.measured.len() as f64,
        }
    }

    pub fn design(&self, vs: &VirtualScattererSet) -> Result<DesignMatrix> {
        let beta0 = self.scene.beta0();
        let alpha = self.scene.alpha();
        let tx = self.scene.tx();
        let sectors = vs.sectors();
        let mut offset = DVector::zeros(self.rows.len());
        let mut raw = Vec::new();
        for (r, &pos) in self.rows.iter().enumerate() {
            let cell = &self.grid.cells()[pos];
            if cell.sees(TX_ID) {
                offset[r] = path_gain(&tx, &cell.center, beta0, alpha)?;
            }
            for (n, sc) in vs.scatterers().iter().enumerate() {
                if !cell.sees(sc.anchor) {
                    continue;
                }
                let m = sectors.index_of(aod_of(&sc.position, &cell.center)?);
                raw.push((r, n, m, path_gain(&sc.position, &cell.center, beta0, alpha)?));
            }
        }
        let mut col_of = BTreeMap::new();
        for &(_, n, m, _) in &raw {
            col_of.entry((n, m)).or_insert(0usize);
        }
        for (k, v) in col_of.values_mut().enumerate() {
            *v = k;
        }
        if col_of.is_empty() && offset.iter().all(|&b| b == 0.0) {
            return Err(Error::DegenerateSystem("no measured grid sees the transmitter or any scatterer".into()));
        }
        let mut phi = DMatrix::zeros(self.rows.len(), col_of.len());
        let mut entries = Vec::with_capacity(raw.len());
        for (r, n, m, g) in raw {
            let c = col_of[&(n, m)];
            phi[(r, c)] = g;
            entries.push((r, n, c));
        }
        Ok(DesignMatrix {
            rows: self.rows.iter().map(|&p| self.grid.cells()[p].index).collect(),
            columns: col_of.into_keys().collect(),
            phi,
            offset,
            entries,
        })
    }

    /// Builds the design for `vs` and solves for the SRCs.
    pub fn solve(&self, vs: &VirtualScattererSet, ridge_lambda: Option<f64>) -> Result<LsFit> {
        let design = self.design(vs)?;
        let lambda = ridge_lambda.unwrap_or_else(|| default_ridge(&design.phi));
        let srcs = ls_estimate_srcs(&design, self.measured.as_slice(), lambda)?;
        let predicted = &design.offset + &design.phi * &srcs;
        let residual = &self.measured - &predicted;
        let objective = residual.norm_squared() / self.denominator;
        if !objective.is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        Ok(LsFit { design, srcs, predicted, objective })
    }

    /// Gradient of the objective with respect to the position of scatterer
    /// `n`, holding the SRCs of `fit` and all sector assignments fixed.
    pub fn position_gradient(&self, vs: &VirtualScattererSet, n: usize, fit: &LsFit) -> Vec3 {
        let s = vs.scatterer(n).position;
        let residual = &self.measured - &fit.predicted;
        let mut grad = Vec3::zeros();
        for &(r, m, c) in &fit.design.entries {
            if m != n || residual[r] == 0.0 {
                continue;
            }
            let center = self.grid.cells()[self.rows[r]].center;
            let dg = path_gain_gradient(&s, &center, self.scene.beta0(), self.scene.alpha());
            grad -= 2.0 * residual[r] * fit.srcs[c] * dg;
        }
        grad / self.denominator
    }

    /// Gradient and Gauss–Newton curvature of the re-solved objective with
    /// respect to the positions of `which`, stacked three coordinates per
    /// scatterer. The curvature uses the position Jacobian with its
    /// component in the span of the design projected out, since the SRCs
    /// are re-fitted after every move.
    pub fn gauss_newton_system(
        &self,
        vs: &VirtualScattererSet,
        which: &[usize],
        fit: &LsFit,
        ridge_lambda: Option<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let residual = &self.measured - &fit.predicted;
        let mut slot = vec![usize::MAX; vs.len()];
        for (k, &n) in which.iter().enumerate() {
            slot[n] = k;
        }
        let mut jac = DMatrix::zeros(residual.len(), 3 * which.len());
        for &(r, n, c) in &fit.design.entries {
            if slot[n] == usize::MAX {
                continue;
            }
            let center = self.grid.cells()[self.rows[r]].center;
            let dg = path_gain_gradient(&vs.scatterer(n).position, &center, self.scene.beta0(), self.scene.alpha());
            for k in 0..3 {
                jac[(r, 3 * slot[n] + k)] += fit.srcs[c] * dg[k];
            }
        }
        let grad = jac.tr_mul(&residual) * (-2.0 / self.denominator);
        let phi = &fit.design.phi;
        let projected = if phi.ncols() == 0 {
            jac
        } else {
            let lambda = ridge_lambda.unwrap_or_else(|| default_ridge(phi));
            let mut normal = phi.tr_mul(phi);
            for k in 0..normal.nrows() {
                normal[(k, k)] += lambda;
            }
            let chol = normal.cholesky().ok_or_else(|| Error::Numeric("normal matrix is not positive definite".into()))?;
            let coef = chol.solve(&phi.tr_mul(&jac));
            &jac - phi * coef
        };
        let curvature = projected.tr_mul(&projected) * (2.0 / self.denominator);
        Ok((grad, curvature))
    }
}

/// Writes the LS solution into the SRC slots of `vs`; all other entries
/// become undefined.
pub fn write_back(vs: &mut VirtualScattererSet, fit: &LsFit) {
    vs.clear_srcs();
    for (&(n, m), &tau) in fit.design.columns.iter().zip(fit.srcs.iter()) {
        vs.set_src(n, m, Some(tau));
    }
}

pub fn build_design(vs: &VirtualScattererSet, grid: &GridMap, scene: &Scene, measurements: &MeasurementSet) -> Result<DesignMatrix> {
    Problem::new(scene, grid, measurements, Objective::Mse)?.design(vs)
}

/// Ridge least-squares SRC estimate for `q̄ − b ≈ Φτ`.
pub fn ls_estimate_srcs(design: &DesignMatrix, measured: &[f64], ridge_lambda: f64) -> Result<DVector<f64>> {
    if measured.len() != design.phi.nrows() {
        return Err(invalid("measurement count does not match design rows"));
    }
    let y = DVector::from_column_slice(measured) - &design.offset;
    ridge_solve(&design.phi, &y, ridge_lambda)
}

pub fn position_gradient(
    vs: &VirtualScattererSet,
    n: usize,
    grid: &GridMap,
    scene: &Scene,
    measurements: &MeasurementSet,
    objective: Objective,
    ridge_lambda: Option<f64>,
) -> Result<Vec3> {
    let problem = Problem::new(scene, grid, measurements, objective)?;
    let fit = problem.solve(vs, ridge_lambda)?;
    Ok(problem.position_gradient(vs, n, &fit))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub position: Vec3,
    pub initial_objective: f64,
    pub objective: f64,
    pub iterations: usize,
    pub accepted_steps: usize,
}

/// Zeroes direction components that push against an active bound.
fn project_direction(dir: Vec3, s: &Vec3, bounds: &Aabb) -> Vec3 {
    let mut d = dir;
    for k in 0..3 {
        if (s[k] <= bounds.min[k] && d[k] < 0.0) || (s[k] >= bounds.max[k] && d[k] > 0.0) {
            d[k] = 0.0;
        }
    }
    d
}

/// Backtracks along the unit direction `dir` from length `start` until the
/// Armijo condition holds on the re-solved objective. Returns whether a
/// step was taken.
#[allow(clippy::too_many_arguments)]
fn armijo_search(
    vs: &mut VirtualScattererSet,
    n: usize,
    problem: &Problem,
    config: &EstimatorConfig,
    region: &ConstraintRegion,
    s: &mut Vec3,
    fit: &mut LsFit,
    grad: &Vec3,
    dir: Vec3,
    start: f64,
    min_step: f64,
) -> Result<Option<f64>> {
    let mut step = start;
    while step >= min_step {
        let candidate = region.project(&(*s + dir * step));
        let delta = candidate - *s;
        if delta.norm() > 0.0 {
            vs.set_position(n, candidate);
            if let Ok(trial) = problem.solve(vs, config.ridge_lambda) {
                let sufficient = fit.objective + config.gd_armijo_c * grad.dot(&delta);
                if trial.objective < fit.objective && trial.objective <= sufficient {
                    *s = candidate;
                    *fit = trial;
                    return Ok(Some(step));
                }
            }
            vs.set_position(n, *s);
        }
        step *= config.gd_shrink;
    }
    Ok(None)
}

/// Axis probes of decreasing length; any strict decrease is taken.
fn compass_search(
    vs: &mut VirtualScattererSet,
    n: usize,
    problem: &Problem,
    config: &EstimatorConfig,
    region: &ConstraintRegion,
    s: &mut Vec3,
    fit: &mut LsFit,
) -> Option<f64> {
    let mut step = config.gd_step_init;
    while step >= config.gd_min_step {
        for k in 0..6 {
            let mut e = Vec3::zeros();
            e[k / 2] = if k % 2 == 0 { step } else { -step };
            let candidate = region.project(&(*s + e));
            if candidate == *s {
                continue;
            }
            vs.set_position(n, candidate);
            if let Ok(trial) = problem.solve(vs, config.ridge_lambda) {
                if trial.objective < fit.objective {
                    *s = candidate;
                    *fit = trial;
                    return Some(step);
                }
            }
            vs.set_position(n, *s);
        }
        step *= config.gd_shrink;
    }
    None
}

/// Refines the position of scatterer `n` with the others held fixed.
///
/// Each iteration tries, in order, a Gauss–Newton-scaled gradient step, a
/// normalized steepest-descent step and (optionally) axis probes. Gradient
/// steps must satisfy the Armijo condition on the re-solved objective and
/// probes must strictly decrease it, so the objective never increases. On
/// return `vs` holds the refined position and the matching LS SRCs.
pub fn refine_position(vs: &mut VirtualScattererSet, n: usize, problem: &Problem, config: &EstimatorConfig) -> Result<RefineOutcome> {
    let region = config.constraint.region_for(vs.scatterer(n).anchor, problem.scene())?;
    let mut s = region.project(&vs.scatterer(n).position);
    vs.set_position(n, s);
    let mut fit = problem.solve(vs, config.ridge_lambda)?;
    let initial_objective = fit.objective;
    let mut iterations = 0;
    let mut accepted_steps = 0;
    let mut trial_step = config.gd_step_init;

    let floor = ROUNDOFF_FLOOR * problem.scale();
    while iterations < config.gd_max_iters && fit.objective > floor {
        iterations += 1;
        let (g, h) = problem.gauss_newton_system(vs, &[n], &fit, config.ridge_lambda)?;
        let grad = Vec3::new(g[0], g[1], g[2]);
        let curvature = Matrix3::from_fn(|a, b| h[(a, b)]);
        if !grad.iter().all(|g| g.is_finite()) {
            break;
        }
        let before = fit.objective;
        let mut moved = false;
        if config.gauss_newton {
            if let Some(d) = gauss_newton_direction(&grad, &curvature, &s, region.bounds()) {
                let len = d.norm();
                if len > 0.0 && len.is_finite() && grad.dot(&d) < 0.0 {
                    let start = len.min(config.gd_step_init);
                    moved =
                        armijo_search(vs, n, problem, config, &region, &mut s, &mut fit, &grad, d / len, start, start * GN_MIN_FRACTION)?
                            .is_some();
                }
            }
        }
        if !moved {
            let dir = project_direction(-grad, &s, region.bounds());
            let norm = dir.norm();
            if norm > 0.0 && norm.is_finite() {
                if let Some(step) =
                    armijo_search(vs, n, problem, config, &region, &mut s, &mut fit, &grad, dir / norm, trial_step, config.gd_min_step)?
                {
                    // next search starts just above the accepted length
                    trial_step = (step / config.gd_shrink).min(config.gd_step_init);
                    moved = true;
                }
            }
        }
        let stalled = !moved || before - fit.objective < STALL_REL * before;
        if stalled && config.compass_fallback {
            // sector reassignments make the objective piecewise smooth; when
            // gradient steps stall at a kink, probe the axes for a decrease
            if let Some(step) = compass_search(vs, n, problem, config, &region, &mut s, &mut fit) {
                trial_step = step;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        accepted_steps += 1;
    }
    write_back(vs, &fit);
    Ok(RefineOutcome { position: s, initial_objective, objective: fit.objective, iterations, accepted_steps })
}

/// Objective level, relative to the measurement scale, treated as an exact fit.
const ROUNDOFF_FLOOR: f64 = 1e-30;

/// Relative decrease below which a gradient step counts as stalled.
const STALL_REL: f64 = 1e-3;

/// Smallest Gauss–Newton trial length relative to the full step.
const GN_MIN_FRACTION: f64 = 1e-10;

/// `−(H + μI)⁻¹ g` over the coordinates not held at a bound by the
/// gradient, with a small relative damping `μ`.
fn gauss_newton_direction(grad: &Vec3, h: &Matrix3<f64>, s: &Vec3, bounds: &Aabb) -> Option<Vec3> {
    let free: Vec<usize> =
        (0..3).filter(|&k| !((s[k] <= bounds.min[k] && grad[k] > 0.0) || (s[k] >= bounds.max[k] && grad[k] < 0.0))).collect();
    if free.is_empty() {
        return None;
    }
    let k = free.len();
    let mut reduced = DMatrix::from_fn(k, k, |a, b| h[(free[a], free[b])]);
    let mu = 1e-10 * reduced.trace().max(0.0) + f64::MIN_POSITIVE;
    for a in 0..k {
        reduced[(a, a)] += mu;
    }
    let rhs = DVector::from_fn(k, |a, _| -grad[free[a]]);
    let step = reduced.cholesky()?.solve(&rhs);
    let mut d = Vec3::zeros();
    for (a, &c) in free.iter().enumerate() {
        d[c] = step[a];
    }
    Some(d)
}

/// Joint Gauss–Newton refinement of all positions at once.
///
/// Complements the per-scatterer sweep: where one scatterer sits on a sector
/// boundary, a coordinated move of several can still descend. Every step is
/// gated by the Armijo condition on the re-solved objective. Returns the
/// number of accepted steps and the final objective.
pub fn refine_joint(vs: &mut VirtualScattererSet, problem: &Problem, config: &EstimatorConfig) -> Result<(usize, f64)> {
    let n_vs = vs.len();
    let regions = (0..n_vs).map(|n| config.constraint.region_for(vs.scatterer(n).anchor, problem.scene())).collect::<Result<Vec<_>>>()?;
    let mut fit = problem.solve(vs, config.ridge_lambda)?;
    let mut accepted = 0;
    for _ in 0..config.gd_max_iters {
        if fit.objective <= ROUNDOFF_FLOOR * problem.scale() {
            break;
        }
        let positions: Vec<Vec3> = (0..n_vs).map(|n| vs.scatterer(n).position).collect();
        let all: Vec<usize> = (0..n_vs).collect();
        let (grad, curvature) = problem.gauss_newton_system(vs, &all, &fit, config.ridge_lambda)?;
        let free: Vec<usize> = (0..3 * n_vs)
            .filter(|&v| {
                let (n, k) = (v / 3, v % 3);
                let b = regions[n].bounds();
                !((positions[n][k] <= b.min[k] && grad[v] > 0.0) || (positions[n][k] >= b.max[k] && grad[v] < 0.0))
            })
            .filter(|&v| curvature[(v, v)] > 0.0)
            .collect();
        if free.is_empty() {
            break;
        }
        let mut h = curvature.select_rows(&free).select_columns(&free);
        let mu = 1e-10 * h.trace().max(0.0) + f64::MIN_POSITIVE;
        for a in 0..free.len() {
            h[(a, a)] += mu;
        }
        let rhs = DVector::from_fn(free.len(), |a, _| -grad[free[a]]);
        let Some(chol) = h.cholesky() else { break };
        let step = chol.solve(&rhs);
        let mut dir = DVector::zeros(3 * n_vs);
        for (a, &v) in free.iter().enumerate() {
            dir[v] = step[a];
        }
        let longest = (0..n_vs).map(|n| dir.fixed_rows::<3>(3 * n).norm()).fold(0.0, f64::max);
        if !(longest > 0.0 && longest.is_finite()) {
            break;
        }
        let mut t = (config.gd_step_init / longest).min(1.0);
        let floor = t * GN_MIN_FRACTION;
        let mut moved = false;
        while t >= floor {
            let candidate: Vec<Vec3> = (0..n_vs).map(|n| regions[n].project(&(positions[n] + dir.fixed_rows::<3>(3 * n) * t))).collect();
            let decrease: f64 = (0..n_vs).map(|n| grad.fixed_rows::<3>(3 * n).dot(&(candidate[n] - positions[n]))).sum();
            if candidate != positions {
                for (n, p) in candidate.iter().enumerate() {
                    vs.set_position(n, *p);
                }
                if let Ok(trial) = problem.solve(vs, config.ridge_lambda) {
                    if trial.objective < fit.objective && trial.objective <= fit.objective + config.gd_armijo_c * decrease {
                        fit = trial;
                        moved = true;
                        break;
                    }
                }
                for (n, p) in positions.iter().enumerate() {
                    vs.set_position(n, *p);
                }
            }
            t *= config.gd_shrink;
        }
        if !moved {
            break;
        }
        accepted += 1;
    }
    write_back(vs, &fit);
    Ok((accepted, fit.objective))
}

/// Initial model of progressive iteration `t` (1-based): the first
/// `step_rho·(t−1)` scatterers copy `previous`, the rest sit at the centers
/// of the physical scatterers taken in size order, wrapping around.
pub fn init_positions(
    t: usize,
    previous: Option<&VirtualScattererSet>,
    scene: &Scene,
    sectors: AodSectorization,
    step_rho: usize,
) -> Result<VirtualScattererSet> {
    if t == 0 || step_rho == 0 {
        return Err(invalid("iteration and step_rho start at 1"));
    }
    let sorted = scene.scatterers_by_size();
    let mut vs = VirtualScattererSet::new(sectors);
    if sorted.is_empty() {
        return Ok(vs);
    }
    let kept = step_rho * (t - 1);
    if kept > 0 {
        let prev = previous.ok_or_else(|| invalid("iterations after the first need the previous model"))?;
        if prev.len() < kept {
            return Err(invalid(format!("previous model has {} scatterers, need {kept}", prev.len())));
        }
        for sc in &prev.scatterers()[..kept] {
            vs.push(*sc);
        }
    }
    for n in kept..step_rho * t {
        let p = sorted[n % sorted.len()];
        vs.push(VirtualScatterer { position: p.bounds.center(), anchor: p.id });
    }
    Ok(vs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub n_scatterers: usize,
    pub zeta: f64,
    pub sweeps: usize,
    /// Gradient iterations spent on each scatterer, summed over sweeps.
    pub gd_iterations: Vec<usize>,
    pub wall_ms: f64,
    /// The refit did not beat `ζ_{t−1}`; the previous model was kept.
    pub kept_previous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub chosen_iteration: usize,
    pub chosen_n: usize,
    pub final_objective: f64,
}

impl FitReport {
    pub fn zetas(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.zeta).collect()
    }
}

/// Progressive estimation of scatterer number, positions and SRCs.
///
/// Returns the model of the iteration with the lowest `ζ`; gains below
/// `zeta_abs_tol` count as ties and keep the smaller model.
pub fn progressive_estimate(
    scene: &Scene,
    grid: &GridMap,
    sectors: AodSectorization,
    measurements: &MeasurementSet,
    config: &EstimatorConfig,
) -> Result<(VirtualScattererSet, FitReport)> {
    config.validate()?;
    let problem = Problem::new(scene, grid, measurements, config.objective)?;
    let scale = problem.scale();
    let with_t = |t: usize| move |e: Error| Error::Iteration { iteration: t, source: Box::new(e) };

    let mut records: Vec<IterationRecord> = Vec::new();
    let mut previous: Option<(VirtualScattererSet, f64)> = None;
    let mut best: Option<(usize, VirtualScattererSet, f64)> = None;
    let mut converged = false;

    for t in 1..=config.max_progressive_iters {
        let started = Instant::now();
        let mut vs = init_positions(t, previous.as_ref().map(|p| &p.0), scene, sectors, config.step_rho)?;
        let mut fit = problem.solve(&vs, config.ridge_lambda).map_err(with_t(t))?;
        let mut gd_iterations = vec![0; vs.len()];
        let mut sweeps = 0;
        if !vs.is_empty() {
            let mut current = fit.objective;
            while sweeps < config.max_sweeps {
                sweeps += 1;
                let before = current;
                for (n, iters) in gd_iterations.iter_mut().enumerate() {
                    let out = refine_position(&mut vs, n, &problem, config).map_err(with_t(t))?;
                    *iters += out.iterations;
                    current = out.objective;
                }
                if config.joint_refine {
                    current = refine_joint(&mut vs, &problem, config).map_err(with_t(t))?.1;
                }
                if current == 0.0 || (before - current) / before.max(EPS_DEN) < config.zeta_rel_tol {
                    break;
                }
            }
            fit = problem.solve(&vs, config.ridge_lambda).map_err(with_t(t))?;
        }
        write_back(&mut vs, &fit);
        let mut zeta = fit.objective;
        let mut kept_previous = false;
        let mut stop = t == config.max_progressive_iters || scene.scatterers().is_empty();
        if let Some((prev_vs, prev_zeta)) = &previous {
            if zeta > *prev_zeta {
                zeta = *prev_zeta;
                vs = prev_vs.clone();
                kept_previous = true;
            }
            let gain = prev_zeta - zeta;
            if gain / prev_zeta.max(EPS_DEN) < config.zeta_rel_tol || gain <= config.zeta_abs_tol * scale {
                stop = true;
                converged = true;
            }
        }
        log::debug!("progressive iteration {t}: N = {}, zeta = {zeta:.6e}", vs.len());
        records.push(IterationRecord {
            t,
            n_scatterers: vs.len(),
            zeta,
            sweeps,
            gd_iterations,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            kept_previous,
        });
        if best.as_ref().is_none_or(|b| zeta < b.2 - config.zeta_abs_tol * scale) {
            best = Some((t, vs.clone(), zeta));
        }
        previous = Some((vs, zeta));
        if stop {
            if scene.scatterers().is_empty() {
                converged = true;
            }
            break;
        }
    }

    let (chosen_iteration, vs, final_objective) = best.expect("at least one progressive iteration runs");
    let report = FitReport { iterations: records, converged, chosen_iteration, chosen_n: vs.len(), final_objective };
    Ok((vs, report))
}
