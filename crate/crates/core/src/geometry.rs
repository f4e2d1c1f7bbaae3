//! Scene geometry: axis-aligned scatterer boxes, the grid partition of the
//! map plane, line-of-sight visibility and AoD sectorization.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{invalid, Result};
use crate::par;

pub type Vec3 = nalgebra::Vector3<f64>;

/// Reserved visibility id of the transmitter.
pub const TX_ID: u32 = 0;

/// Relative tolerance for footprint overlap, so boxes that merely share an
/// edge with a grid cell do not occupy it.
const FOOTPRINT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn has_positive_extent(&self) -> bool {
        (0..3).all(|k| self.max[k] > self.min[k])
    }

    /// Closed containment.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Strict containment in the open interior.
    pub fn contains_interior(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] > self.min[k] && p[k] < self.max[k])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        self.contains(&other.min) && self.contains(&other.max)
    }

    pub fn dilated(&self, margin: f64) -> Aabb {
        let m = Vec3::repeat(margin);
        Aabb::new(self.min - m, self.max + m)
    }

    /// Intersection, or `None` when the boxes are disjoint.
    pub fn intersection(&self, other: &Aabb) -> Option<Aabb> {
        let min = self.min.sup(&other.min);
        let max = self.max.inf(&other.max);
        (0..3).all(|k| min[k] <= max[k]).then(|| Aabb::new(min, max))
    }

    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        p.sup(&self.min).inf(&self.max)
    }

    /// True when the xy footprints overlap with positive area.
    pub fn footprint_overlaps(&self, other: &Aabb) -> bool {
        (0..2).all(|k| {
            let lo = self.min[k].max(other.min[k]);
            let hi = self.max[k].min(other.max[k]);
            let scale = 1.0f64.max(self.max[k].abs()).max(other.max[k].abs());
            hi - lo > FOOTPRINT_EPS * scale
        })
    }

    /// Slab test: does the open segment `(a, b)` pass through the open
    /// interior of the box? Grazing a face, edge or corner does not count.
    pub fn blocks_segment(&self, a: &Vec3, b: &Vec3) -> bool {
        let d = b - a;
        let mut t_lo = 0.0f64;
        let mut t_hi = 1.0f64;
        for k in 0..3 {
            if d[k] == 0.0 {
                if a[k] <= self.min[k] || a[k] >= self.max[k] {
                    return false;
                }
            } else {
                let inv = 1.0 / d[k];
                let t1 = (self.min[k] - a[k]) * inv;
                let t2 = (self.max[k] - a[k]) * inv;
                t_lo = t_lo.max(t1.min(t2));
                t_hi = t_hi.min(t1.max(t2));
                if t_lo >= t_hi {
                    return false;
                }
            }
        }
        t_lo < t_hi
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhysicalScatterer {
    pub id: u32,
    pub bounds: Aabb,
}

/// A 3D propagation scene. Lengths in meters, gains linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    region: Aabb,
    tx: Vec3,
    scatterers: Vec<PhysicalScatterer>,
    beta0: f64,
    alpha: f64,
    wavelength: f64,
}

impl Scene {
    pub fn new(region: Aabb, tx: Vec3, scatterers: Vec<PhysicalScatterer>, beta0: f64, alpha: f64, wavelength: f64) -> Result<Self> {
        if !region.has_positive_extent() {
            return Err(invalid("region must have positive extent on every axis"));
        }
        if !region.contains(&tx) {
            return Err(invalid("transmitter lies outside the region"));
        }
        for (name, v) in [("beta0", beta0), ("alpha", alpha), ("wavelength", wavelength)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &scatterers {
            if s.id == TX_ID {
                return Err(invalid("scatterer id 0 is reserved for the transmitter"));
            }
            if !seen.insert(s.id) {
                return Err(invalid(format!("duplicate scatterer id {}", s.id)));
            }
            if !s.bounds.has_positive_extent() {
                return Err(invalid(format!("scatterer {} has a degenerate box", s.id)));
            }
            if !region.contains_box(&s.bounds) {
                return Err(invalid(format!("scatterer {} extends outside the region", s.id)));
            }
            if s.bounds.contains(&tx) {
                return Err(invalid(format!("scatterer {} contains the transmitter", s.id)));
            }
        }
        Ok(Scene { region, tx, scatterers, beta0, alpha, wavelength })
    }

    pub fn region(&self) -> &Aabb {
        &self.region
    }

    pub fn tx(&self) -> Vec3 {
        self.tx
    }

    pub fn scatterers(&self) -> &[PhysicalScatterer] {
        &self.scatterers
    }

    pub fn scatterer(&self, id: u32) -> Option<&PhysicalScatterer> {
        self.scatterers.iter().find(|s| s.id == id)
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    /// Physical scatterers by descending box volume, ties by ascending id.
    pub fn scatterers_by_size(&self) -> Vec<&PhysicalScatterer> {
        let mut sorted: Vec<_> = self.scatterers.iter().collect();
        sorted.sort_by(|a, b| b.bounds.volume().total_cmp(&a.bounds.volume()).then(a.id.cmp(&b.id)));
        sorted
    }

    /// Same scene without the scatterer `id`.
    pub fn without_scatterer(&self, id: u32) -> Scene {
        let mut s = self.clone();
        s.scatterers.retain(|p| p.id != id);
        s
    }
}

/// True iff the open segment `(source, target)` crosses no scatterer
/// interior, skipping the scatterer `ignore` (so a box does not shadow paths
/// leaving its own center).
pub fn los_visible(source: &Vec3, target: &Vec3, scene: &Scene, ignore: Option<u32>) -> bool {
    scene.scatterers.iter().filter(|s| Some(s.id) != ignore).all(|s| !s.bounds.blocks_segment(source, target))
}

/// Azimuth in `[-π, π)` and elevation in `[-π/2, π/2]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aod {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Aod {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Aod { azimuth, elevation }
    }
}

/// Departure direction of `target - source`. Straight up or down gets
/// azimuth 0.
pub fn aod_of(source: &Vec3, target: &Vec3) -> Result<Aod> {
    let d = target - source;
    if d.x == 0.0 && d.y == 0.0 && d.z == 0.0 {
        return Err(invalid("AoD of coincident points is undefined"));
    }
    let horizontal = d.x.hypot(d.y);
    let mut azimuth = if horizontal == 0.0 { 0.0 } else { d.y.atan2(d.x) };
    if azimuth >= PI {
        azimuth = -PI;
    }
    let elevation = d.z.atan2(horizontal);
    Ok(Aod { azimuth, elevation })
}

/// Uniform azimuth × elevation binning of departure directions.
///
/// Sector indices are 0-based: `m = elevation_bin * azimuth_bins + azimuth_bin`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AodSectorization {
    azimuth_bins: usize,
    elevation_bins: usize,
}

impl AodSectorization {
    pub fn new(azimuth_bins: usize, elevation_bins: usize) -> Result<Self> {
        if azimuth_bins == 0 || elevation_bins == 0 {
            return Err(invalid("sectorization needs at least one bin per axis"));
        }
        Ok(AodSectorization { azimuth_bins, elevation_bins })
    }

    pub fn azimuth_bins(&self) -> usize {
        self.azimuth_bins
    }

    pub fn elevation_bins(&self) -> usize {
        self.elevation_bins
    }

    /// Total sector count `M`.
    pub fn count(&self) -> usize {
        self.azimuth_bins * self.elevation_bins
    }

    pub fn azimuth_width(&self) -> f64 {
        TAU / self.azimuth_bins as f64
    }

    pub fn elevation_width(&self) -> f64 {
        PI / self.elevation_bins as f64
    }

    /// Representative angular width of one sector: the azimuth width when
    /// azimuth is binned, the elevation width otherwise.
    pub fn sector_width(&self) -> f64 {
        if self.azimuth_bins > 1 || self.elevation_bins == 1 {
            self.azimuth_width()
        } else {
            self.elevation_width()
        }
    }

    /// Right-open bins; elevation `+π/2` falls into the top bin.
    pub fn index_of(&self, aod: Aod) -> usize {
        let az = ((aod.azimuth + PI) / self.azimuth_width()).floor();
        let el = ((aod.elevation + FRAC_PI_2) / self.elevation_width()).floor();
        let az = (az.max(0.0) as usize).min(self.azimuth_bins - 1);
        let el = (el.max(0.0) as usize).min(self.elevation_bins - 1);
        el * self.azimuth_bins + az
    }

    /// Centroid angle of sector `m`.
    pub fn center(&self, m: usize) -> Result<Aod> {
        if m >= self.count() {
            return Err(invalid(format!("sector {m} out of range 0..{}", self.count())));
        }
        let az = m % self.azimuth_bins;
        let el = m / self.azimuth_bins;
        Ok(Aod {
            azimuth: -PI + (az as f64 + 0.5) * self.azimuth_width(),
            elevation: -FRAC_PI_2 + (el as f64 + 0.5) * self.elevation_width(),
        })
    }

    pub fn centers(&self) -> Vec<Aod> {
        (0..self.count()).map(|m| self.center(m).unwrap()).collect()
    }
}

/// One unoccupied grid cell of the map plane.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    /// Flat cell index `iy * nx + ix` over the full partition.
    pub index: usize,
    pub ix: usize,
    pub iy: usize,
    pub center: Vec3,
    /// Sorted ids with an LoS path to the center; `TX_ID` for the transmitter.
    pub visible: Vec<u32>,
}

impl GridCell {
    pub fn sees(&self, id: u32) -> bool {
        self.visible.binary_search(&id).is_ok()
    }
}

/// Partition of the map plane into equal cells, keeping only cells free of
/// the transmitter and of every scatterer footprint.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    nx: usize,
    ny: usize,
    cell_size: (f64, f64),
    origin: (f64, f64),
    plane_height: f64,
    cells: Vec<GridCell>,
    lookup: Vec<Option<usize>>,
}

impl GridMap {
    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    /// Cell side along x (equal to y on square partitions).
    pub fn grid_side(&self) -> f64 {
        self.cell_size.0
    }

    pub fn cell_size(&self) -> (f64, f64) {
        self.cell_size
    }

    pub fn plane_height(&self) -> f64 {
        self.plane_height
    }

    /// Valid cells in ascending flat-index order.
    pub fn cells(&self) -> &[GridCell] {
        &self.cells
    }

    /// Number of valid cells `I`.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Position in [`cells`](Self::cells) of flat index `index`, if valid.
    pub fn position_of(&self, index: usize) -> Option<usize> {
        self.lookup.get(index).copied().flatten()
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.index).collect()
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Vec3 {
        Vec3::new(
            self.origin.0 + (ix as f64 + 0.5) * self.cell_size.0,
            self.origin.1 + (iy as f64 + 0.5) * self.cell_size.1,
            self.plane_height,
        )
    }

    pub fn footprint(&self, ix: usize, iy: usize) -> Aabb {
        let x0 = self.origin.0 + ix as f64 * self.cell_size.0;
        let y0 = self.origin.1 + iy as f64 * self.cell_size.1;
        Aabb::new(Vec3::new(x0, y0, self.plane_height), Vec3::new(x0 + self.cell_size.0, y0 + self.cell_size.1, self.plane_height))
    }
}

/// Splits the scene's horizontal extent into `nx × ny` cells at
/// `plane_height`, drops occupied cells and fills per-cell visibility sets.
pub fn partition_region(scene: &Scene, nx: usize, ny: usize, plane_height: f64) -> Result<GridMap> {
    if nx == 0 || ny == 0 {
        return Err(invalid("grid counts must be at least 1"));
    }
    let region = scene.region();
    if !(plane_height >= region.min.z && plane_height <= region.max.z) {
        return Err(invalid(format!("plane height {plane_height} outside region [{}, {}]", region.min.z, region.max.z)));
    }
    let cell_size = ((region.max.x - region.min.x) / nx as f64, (region.max.y - region.min.y) / ny as f64);
    if cell_size.0 < scene.wavelength() || cell_size.1 < scene.wavelength() {
        return Err(invalid(format!(
            "region too small: {nx}x{ny} cells of {:.4}x{:.4} m are below one wavelength ({} m)",
            cell_size.0,
            cell_size.1,
            scene.wavelength()
        )));
    }
    let origin = (region.min.x, region.min.y);
    let tx = scene.tx();
    let tx_ix = (((tx.x - origin.0) / cell_size.0).floor().max(0.0) as usize).min(nx - 1);
    let tx_iy = (((tx.y - origin.1) / cell_size.1).floor().max(0.0) as usize).min(ny - 1);

    let mut grid = GridMap { nx, ny, cell_size, origin, plane_height, cells: Vec::new(), lookup: vec![None; nx * ny] };

    let mut free = Vec::new();
    for iy in 0..ny {
        for ix in 0..nx {
            if ix == tx_ix && iy == tx_iy {
                continue;
            }
            let fp = grid.footprint(ix, iy);
            if scene.scatterers().iter().any(|s| s.bounds.footprint_overlaps(&fp)) {
                continue;
            }
            free.push((ix, iy));
        }
    }

    let cells = par::map_slice(&free, |&(ix, iy)| {
        let center = grid.cell_center(ix, iy);
        let mut visible = Vec::new();
        if los_visible(&tx, &center, scene, None) {
            visible.push(TX_ID);
        }
        for s in scene.scatterers() {
            if los_visible(&s.bounds.center(), &center, scene, Some(s.id)) {
                visible.push(s.id);
            }
        }
        visible.sort_unstable();
        GridCell { index: iy * nx + ix, ix, iy, center, visible }
    });
    for (pos, cell) in cells.iter().enumerate() {
        grid.lookup[cell.index] = Some(pos);
    }
    grid.cells = cells;
    Ok(grid)
}
