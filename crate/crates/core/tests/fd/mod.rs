//! Finite-difference oracle for position gradients with frozen coefficients.
#![allow(dead_code)]

use super::common::{departure, dist, sector, Lcg};
use super::support::{self, Instance};
use vscat::channel::VirtualScattererSet;
use vscat::estimation::{write_back, Objective, Problem};
use vscat::geometry::Vec3;

fn p3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

pub fn rel_err(x: &[f64], y: &[f64]) -> f64 {
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = y.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den
}

/// Per measured grid: the gain from every path except scatterer `moved`,
/// and the gain of `moved` placed at `at`, by explicit path enumeration.
fn split_prediction(
    inst: &Instance,
    vs: &VirtualScattererSet,
    moved: usize,
    at: [f64; 3],
    expect_sector: &[usize],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let (n_az, n_el) = (inst.sectors.azimuth_bins(), inst.sectors.elevation_bins());
    let (beta0, alpha) = (inst.scene.beta0(), inst.scene.alpha());
    let mut others = Vec::new();
    let mut own = Vec::new();
    for (k, &g) in inst.measurements.indices().iter().enumerate() {
        let cell = &inst.grid.cells()[inst.grid.position_of(g).unwrap()];
        let c = p3(&cell.center);
        let (mut o, mut m_gain) = (0.0, 0.0);
        if cell.visible.contains(&0) {
            o += beta0 / dist(p3(&inst.scene.tx()), c).powf(alpha);
        }
        for n in 0..vs.len() {
            let s = vs.scatterer(n);
            if !cell.visible.contains(&s.anchor) {
                continue;
            }
            let pos = if n == moved { at } else { p3(&s.position) };
            let (az, el) = departure(pos, c);
            let m = sector(az, el, n_az, n_el);
            if n == moved {
                if m != expect_sector[k] {
                    return None;
                }
                m_gain += vs.src(n, m)? * beta0 / dist(pos, c).powf(alpha);
            } else {
                o += vs.src(n, m)? * beta0 / dist(pos, c).powf(alpha);
            }
        }
        others.push(o);
        own.push(m_gain);
    }
    Some((others, own))
}

/// `ζ(a) − ζ(b)` with frozen SRCs, expanded as a difference of squares.
fn frozen_difference(inst: &Instance, vs: &VirtualScattererSet, n: usize, a: [f64; 3], b: [f64; 3], expect: &[usize]) -> Option<f64> {
    let (others, ma) = split_prediction(inst, vs, n, a, expect)?;
    let (_, mb) = split_prediction(inst, vs, n, b, expect)?;
    let q = inst.measurements.gains();
    let energy: f64 = q.iter().map(|x| x * x).sum();
    let diff: f64 = (0..q.len()).map(|i| (mb[i] - ma[i]) * (2.0 * (q[i] - others[i]) - ma[i] - mb[i])).sum();
    Some(diff / energy)
}

fn sectors_seen(inst: &Instance, at: [f64; 3]) -> Vec<usize> {
    let (n_az, n_el) = (inst.sectors.azimuth_bins(), inst.sectors.elevation_bins());
    inst.measurements
        .indices()
        .iter()
        .map(|&g| {
            let (az, el) = departure(at, p3(&inst.grid.cells()[inst.grid.position_of(g).unwrap()].center));
            sector(az, el, n_az, n_el)
        })
        .collect()
}

/// Perturbs the truth positions of `support::noisy(seed, 200)`, refits the
/// coefficients and returns `(scatterer, relative error)` of the analytic
/// gradient against central differences for every scatterer whose sector
/// assignments stay fixed across the stencil.
pub fn gradient_errors(seed: u64, rng: &mut Lcg) -> Vec<(usize, f64)> {
    let inst = support::noisy(seed, 200);
    let problem = Problem::new(&inst.scene, &inst.grid, &inst.measurements, Objective::Nmse).unwrap();
    let mut vs = inst.truth_model.clone();
    for n in 0..vs.len() {
        let p = vs.scatterer(n).position + Vec3::new(rng.range(-2.0, 2.0), rng.range(-2.0, 2.0), rng.range(-2.0, 2.0));
        vs.set_position(n, p);
    }
    vs.clear_srcs();
    let fit = problem.solve(&vs, None).unwrap();
    write_back(&mut vs, &fit);
    let mut out = Vec::new();
    for n in 0..vs.len() {
        let s = p3(&vs.scatterer(n).position);
        let base = sectors_seen(&inst, s);
        let h = 1e-4;
        let mut fd = [0.0; 3];
        let mut smooth = true;
        for k in 0..3 {
            let (mut a, mut b) = (s, s);
            a[k] += h;
            b[k] -= h;
            match frozen_difference(&inst, &vs, n, a, b, &base) {
                Some(d) => fd[k] = d / (2.0 * h),
                None => smooth = false,
            }
        }
        if !smooth || fd.iter().all(|&x| x == 0.0) {
            continue;
        }
        let g = problem.position_gradient(&vs, n, &fit);
        out.push((n, rel_err(&[g.x, g.y, g.z], &fd)));
    }
    out
}
