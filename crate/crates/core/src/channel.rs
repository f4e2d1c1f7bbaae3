//! Virtual-scatterer channel model.
//!
//! The average power gain of grid `i` is the sum over every source with an
//! LoS path to it (the transmitter and each visible virtual scatterer) of
//! `τ · β0 / d^α`, where `τ` is the scatterer response coefficient (SRC) of
//! the AoD sector containing the departure direction. The transmitter is
//! source [`PathSource::Tx`] with `τ ≡ 1`.

use crate::error::{invalid, Error, Result};
use crate::geometry::{aod_of, Aabb, AodSectorization, GridCell, GridMap, Scene, Vec3, TX_ID};
use crate::par;

/// Point-model scatterer whose visibility is inherited from the physical
/// scatterer `anchor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VirtualScatterer {
    pub position: Vec3,
    pub anchor: u32,
}

/// The estimable model: scatterer positions plus one SRC per AoD sector.
/// `None` marks a coefficient that has not been estimated yet.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualScattererSet {
    sectors: AodSectorization,
    scatterers: Vec<VirtualScatterer>,
    srcs: Vec<Vec<Option<f64>>>,
}

impl VirtualScattererSet {
    pub fn new(sectors: AodSectorization) -> Self {
        VirtualScattererSet { sectors, scatterers: Vec::new(), srcs: Vec::new() }
    }

    /// Adds a scatterer with every SRC undefined and returns its index.
    pub fn push(&mut self, scatterer: VirtualScatterer) -> usize {
        self.scatterers.push(scatterer);
        self.srcs.push(vec![None; self.sectors.count()]);
        self.scatterers.len() - 1
    }

    pub fn push_with_srcs(&mut self, scatterer: VirtualScatterer, srcs: Vec<Option<f64>>) -> Result<usize> {
        if srcs.len() != self.sectors.count() {
            return Err(invalid(format!("expected {} SRCs, got {}", self.sectors.count(), srcs.len())));
        }
        if srcs.iter().flatten().any(|t| !t.is_finite()) {
            return Err(invalid("SRC values must be finite"));
        }
        self.scatterers.push(scatterer);
        self.srcs.push(srcs);
        Ok(self.scatterers.len() - 1)
    }

    pub fn sectors(&self) -> AodSectorization {
        self.sectors
    }

    pub fn len(&self) -> usize {
        self.scatterers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scatterers.is_empty()
    }

    pub fn scatterers(&self) -> &[VirtualScatterer] {
        &self.scatterers
    }

    pub fn scatterer(&self, n: usize) -> &VirtualScatterer {
        &self.scatterers[n]
    }

    pub fn set_position(&mut self, n: usize, position: Vec3) {
        self.scatterers[n].position = position;
    }

    pub fn srcs(&self, n: usize) -> &[Option<f64>] {
        &self.srcs[n]
    }

    pub fn src(&self, n: usize, m: usize) -> Option<f64> {
        self.srcs[n][m]
    }

    pub fn set_src(&mut self, n: usize, m: usize, value: Option<f64>) {
        self.srcs[n][m] = value;
    }

    pub fn clear_srcs(&mut self) {
        for row in &mut self.srcs {
            row.iter_mut().for_each(|t| *t = None);
        }
    }

    /// Multiplies every defined SRC by `k`.
    pub fn scale_srcs(&mut self, k: f64) {
        for t in self.srcs.iter_mut().flatten().flatten() {
            *t *= k;
        }
    }

    pub fn defined_count(&self) -> usize {
        self.srcs.iter().flatten().filter(|t| t.is_some()).count()
    }
}

/// Axis-aligned region that confines a virtual scatterer's position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstraintRegion {
    bounds: Aabb,
}

impl ConstraintRegion {
    pub fn new(bounds: Aabb, scene: &Scene) -> Result<Self> {
        if !bounds.has_positive_extent() {
            return Err(invalid("constraint region needs positive volume"));
        }
        if !scene.region().contains_box(&bounds) {
            return Err(invalid("constraint region must lie inside the scene region"));
        }
        Ok(ConstraintRegion { bounds })
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.bounds.contains(p)
    }

    pub fn project(&self, p: &Vec3) -> Vec3 {
        self.bounds.clamp(p)
    }
}

/// A channel gain map: one linear gain per valid grid, in the order of
/// [`GridMap::cells`].
#[derive(Clone, Debug, PartialEq)]
pub struct Cgm {
    values: Vec<f64>,
}

impl Cgm {
    pub fn new(values: Vec<f64>) -> Self {
        Cgm { values }
    }

    pub fn zeros(len: usize) -> Self {
        Cgm { values: vec![0.0; len] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, pos: usize) -> f64 {
        self.values[pos]
    }

    /// Gain of flat grid index `index`, if that grid is valid.
    pub fn at_index(&self, grid: &GridMap, index: usize) -> Option<f64> {
        grid.position_of(index).map(|p| self.values[p])
    }

    /// Values with negatives clamped to zero, as written on export.
    pub fn clamped(&self) -> Vec<f64> {
        self.values.iter().map(|&g| g.max(0.0)).collect()
    }
}

/// Emitter of a last-hop LoS path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathSource {
    Tx,
    /// Index into the [`VirtualScattererSet`].
    Scatterer(usize),
}

/// Free-space-like propagation gain `β0 / ||s − c||^α`.
pub fn path_gain(s: &Vec3, c: &Vec3, beta0: f64, alpha: f64) -> Result<f64> {
    let d = (s - c).norm();
    if d == 0.0 {
        return Err(invalid("path gain of coincident points is undefined"));
    }
    Ok(beta0 / d.powf(alpha))
}

/// Gradient of [`path_gain`] with respect to `s`:
/// `−α β0 (s − c) / ||s − c||^(α+2)`.
pub fn path_gain_gradient(s: &Vec3, c: &Vec3, beta0: f64, alpha: f64) -> Vec3 {
    let diff = s - c;
    let d2 = diff.norm_squared();
    -alpha * beta0 * diff / d2.powf(0.5 * alpha + 1.0)
}

/// Whether virtual scatterer `n` has an LoS path to `cell`.
pub fn scatterer_visible(vs: &VirtualScattererSet, n: usize, cell: &GridCell) -> bool {
    cell.sees(vs.scatterers[n].anchor)
}

/// Power of the path from `source` to valid grid `pos`; zero when the source
/// is not visible from that grid.
pub fn path_power(vs: &VirtualScattererSet, source: PathSource, grid: &GridMap, pos: usize, scene: &Scene) -> Result<f64> {
    let cell = &grid.cells()[pos];
    match source {
        PathSource::Tx => {
            if !cell.sees(TX_ID) {
                return Ok(0.0);
            }
            path_gain(&scene.tx(), &cell.center, scene.beta0(), scene.alpha())
        }
        PathSource::Scatterer(n) => {
            if !scatterer_visible(vs, n, cell) {
                return Ok(0.0);
            }
            let s = vs.scatterers[n].position;
            let m = vs.sectors.index_of(aod_of(&s, &cell.center)?);
            let tau = vs.srcs[n][m].ok_or(Error::MissingCoefficient { scatterer: n, sector: m })?;
            if tau == 0.0 {
                return Ok(0.0);
            }
            Ok(tau * path_gain(&s, &cell.center, scene.beta0(), scene.alpha())?)
        }
    }
}

/// Predicted gain `q̂_i` of valid grid `pos`. A grid that sees nothing gets 0.
pub fn predict_gain(vs: &VirtualScattererSet, grid: &GridMap, pos: usize, scene: &Scene) -> Result<f64> {
    let mut q = path_power(vs, PathSource::Tx, grid, pos, scene)?;
    for n in 0..vs.len() {
        q += path_power(vs, PathSource::Scatterer(n), grid, pos, scene)?;
    }
    Ok(q)
}

/// Applies [`predict_gain`] to every valid grid, collecting all missing
/// coefficients as `(flat grid index, scatterer, sector)`.
pub fn predict_map(vs: &VirtualScattererSet, grid: &GridMap, scene: &Scene) -> Result<Cgm> {
    let results = par::map_range(grid.len(), |pos| predict_gain(vs, grid, pos, scene));
    let mut values = Vec::with_capacity(results.len());
    let mut missing = Vec::new();
    for (pos, r) in results.into_iter().enumerate() {
        match r {
            Ok(q) => values.push(q),
            Err(Error::MissingCoefficient { scatterer, sector }) => {
                missing.push((grid.cells()[pos].index, scatterer, sector));
                values.push(f64::NAN);
            }
            Err(e) => return Err(e),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingCoefficients(missing));
    }
    Ok(Cgm::new(values))
}
