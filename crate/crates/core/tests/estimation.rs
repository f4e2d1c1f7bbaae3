mod common;
mod fd;
mod support;

use common::{departure, dist, qr_ridge, sector, Lcg, Mat};
use fd::rel_err;
use nalgebra::{DMatrix, DVector};
use vscat::channel::{VirtualScatterer, VirtualScattererSet};
use vscat::estimation::*;
use vscat::geometry::{Aabb, AodSectorization, Vec3};
use vscat::synth::{generate_truth, sample_measurements, MeasurementSet, SamplingSpec, Selection, TruthSpec};

fn p3(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn random_matrix(rng: &mut Lcg, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.range(-1.0, 1.0)).collect()).collect()
}

fn design_of(a: &Mat, offset: Vec<f64>) -> DesignMatrix {
    let (rows, cols) = (a.len(), a[0].len());
    DesignMatrix {
        rows: (0..rows).collect(),
        columns: (0..cols).map(|k| (k, 0)).collect(),
        phi: DMatrix::from_fn(rows, cols, |i, j| a[i][j]),
        offset: DVector::from_vec(offset),
        entries: Vec::new(),
    }
}

#[test]
fn objective_examples() {
    assert_eq!(objective_value(&[1.0, 2.0], &[1.0, 2.0], Objective::Nmse).unwrap(), 0.0);
    assert_eq!(objective_value(&[1.0, 1.0], &[0.0, 0.0], Objective::Nmse).unwrap(), 1.0);
    assert_eq!(objective_value(&[2.0], &[0.0], Objective::Mse).unwrap(), 4.0);
    assert_eq!(objective_value(&[0.0, 0.0], &[1.0, 0.0], Objective::Nmse).unwrap_err().code(), "invalid_argument");
}

#[test]
fn identity_design_returns_measurements() {
    let eye: Mat = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let q = [0.3, 1.5, -2.0, 7.0];
    let tau = ls_estimate_srcs(&design_of(&eye, vec![0.0; 4]), &q, 0.0).unwrap();
    assert_eq!(tau.as_slice(), &q);
}

#[test]
fn square_system_is_solved_exactly() {
    let mut rng = Lcg(17);
    for n in [3, 8, 15] {
        let a = random_matrix(&mut rng, n, n);
        let truth: Vec<f64> = (0..n).map(|_| rng.range(0.1, 2.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.range(0.0, 0.1)).collect();
        let q: Vec<f64> = common::matvec(&a, &truth).iter().zip(&b).map(|(x, y)| x + y).collect();
        let tau = ls_estimate_srcs(&design_of(&a, b), &q, 0.0).unwrap();
        assert!(rel_err(tau.as_slice(), &truth) < 1e-10);
    }
}

#[test]
fn singular_system_without_ridge_is_rejected() {
    let a: Mat = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
    let err = ls_estimate_srcs(&design_of(&a, vec![0.0; 3]), &[1.0, 2.0, 3.0], 0.0).unwrap_err();
    assert_eq!(err.code(), "rank_deficient");
    assert!(ls_estimate_srcs(&design_of(&a, vec![0.0; 3]), &[1.0, 2.0, 3.0], 1e-6).is_ok());
}

#[test]
fn ridge_solution_matches_qr_oracle() {
    let mut rng = Lcg(23);
    let a = random_matrix(&mut rng, 50, 10);
    let q: Vec<f64> = (0..50).map(|_| rng.range(-1.0, 1.0)).collect();
    let tau = ls_estimate_srcs(&design_of(&a, vec![0.0; 50]), &q, 1e-6).unwrap();
    assert!(rel_err(tau.as_slice(), &qr_ridge(&a, &q, 1e-6)) < 1e-8);
}

#[test]
fn ridge_solutions_match_qr_oracle_on_many_systems() {
    let mut rng = Lcg(29);
    for _ in 0..100 {
        let cols = 1 + (rng.next_f64() * 100.0) as usize;
        let rows = cols + (rng.next_f64() * (200 - cols) as f64) as usize;
        let a = random_matrix(&mut rng, rows, cols);
        let q: Vec<f64> = (0..rows).map(|_| rng.range(-1.0, 1.0)).collect();
        let lambda = 1e-6;
        let tau = ls_estimate_srcs(&design_of(&a, vec![0.0; rows]), &q, lambda).unwrap();
        let err = rel_err(tau.as_slice(), &qr_ridge(&a, &q, lambda));
        assert!(err < 1e-8, "{rows}x{cols}: {err:e}");
    }
}

#[test]
fn design_matches_recomputation() {
    for seed in 0..3 {
        let inst = support::noisy(seed, 40);
        let problem = Problem::new(&inst.scene, &inst.grid, &inst.measurements, Objective::Nmse).unwrap();
        let vs = &inst.truth_model;
        let d = problem.design(vs).unwrap();
        let (n_az, n_el) = (inst.sectors.azimuth_bins(), inst.sectors.elevation_bins());
        let mut expected: Vec<Vec<(usize, usize, f64)>> = Vec::new();
        let mut cols = std::collections::BTreeSet::new();
        for &g in inst.measurements.indices() {
            let cell = &inst.grid.cells()[inst.grid.position_of(g).unwrap()];
            let mut row = Vec::new();
            for n in 0..vs.len() {
                let s = vs.scatterer(n);
                if cell.visible.contains(&s.anchor) {
                    let (az, el) = departure(p3(&s.position), p3(&cell.center));
                    let m = sector(az, el, n_az, n_el);
                    row.push((n, m, inst.scene.beta0() / dist(p3(&s.position), p3(&cell.center)).powf(inst.scene.alpha())));
                    cols.insert((n, m));
                }
            }
            expected.push(row);
        }
        let cols: Vec<(usize, usize)> = cols.into_iter().collect();
        assert_eq!(d.columns, cols);
        assert_eq!(d.rows, inst.measurements.indices().to_vec());
        for (i, row) in expected.iter().enumerate() {
            let mut dense = vec![0.0; cols.len()];
            for &(n, m, g) in row {
                dense[cols.binary_search(&(n, m)).unwrap()] += g;
            }
            for (j, &e) in dense.iter().enumerate() {
                assert_eq!(d.phi[(i, j)] != 0.0, e != 0.0);
                assert!((d.phi[(i, j)] - e).abs() <= 1e-12 * e.abs());
            }
            let cell = &inst.grid.cells()[inst.grid.position_of(d.rows[i]).unwrap()];
            let b = if cell.visible.contains(&0) {
                inst.scene.beta0() / dist(p3(&inst.scene.tx()), p3(&cell.center)).powf(inst.scene.alpha())
            } else {
                0.0
            };
            assert!((d.offset[i] - b).abs() <= 1e-12 * b);
        }
        for j in 0..cols.len() {
            assert!(d.phi.column(j).iter().any(|&x| x != 0.0));
        }
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = Lcg(31);
    let mut checked = 0;
    for seed in 0..10 {
        for (n, err) in fd::gradient_errors(seed, &mut rng) {
            assert!(err < 1e-5, "seed {seed} scatterer {n}: {err:e}");
            checked += 1;
        }
    }
    assert!(checked >= 50, "only {checked} smooth instances");
}

#[test]
fn zero_residual_gives_zero_gradient() {
    let inst = support::in_class(1).unwrap();
    let problem = Problem::new(&inst.scene, &inst.grid, &inst.measurements, Objective::Nmse).unwrap();
    let mut vs = inst.truth_model.clone();
    vs.clear_srcs();
    let fit = problem.solve(&vs, Some(0.0)).unwrap();
    assert!(fit.objective < 1e-20);
    for n in 0..vs.len() {
        assert!(problem.position_gradient(&vs, n, &fit).norm() < 1e-8);
    }
}

#[test]
fn symmetric_pair_gives_no_axial_gradient() {
    use vscat::geometry::{partition_region, PhysicalScatterer, Scene};
    let scene = Scene::new(
        Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(40.0, 40.0, 30.0)),
        Vec3::new(20.0, 5.0, 20.0),
        vec![PhysicalScatterer { id: 1, bounds: Aabb::new(Vec3::new(18.0, 30.0, 0.0), Vec3::new(22.0, 34.0, 10.0)) }],
        1e-3,
        2.0,
        0.1,
    )
    .unwrap();
    let grid = partition_region(&scene, 10, 10, 1.5).unwrap();
    // cells (4, 2) and (5, 2) are mirror images about x = 20
    let (a, b) = (2 * 10 + 4, 2 * 10 + 5);
    let ms = MeasurementSet::new(vec![a, b], vec![2e-5, 2e-5]).unwrap();
    let mut vs = VirtualScattererSet::new(AodSectorization::new(1, 1).unwrap());
    vs.push(VirtualScatterer { position: Vec3::new(20.0, 25.0, 5.0), anchor: 1 });
    let problem = Problem::new(&scene, &grid, &ms, Objective::Nmse).unwrap();
    let fit = problem.solve(&vs, None).unwrap();
    let g = problem.position_gradient(&vs, 0, &fit);
    assert!(g.x.abs() <= 1e-12 * g.norm().max(1e-300));
}

fn single_scatterer(seed: u64) -> support::Instance {
    let scene = vscat::synth::generate_scene(&support::scene_spec(), seed).unwrap();
    let grid = vscat::io::Layout::default().grid(&scene).unwrap();
    let sectors = AodSectorization::new(1, 1).unwrap();
    let (truth_model, truth) = generate_truth(&scene, &grid, sectors, &TruthSpec { seed, n_true: 1, ..Default::default() }).unwrap();
    let spec = SamplingSpec { count: 10, selection: Selection::Type2, noise_std_rel: 0.0, seed };
    let measurements = sample_measurements(&truth, &grid, &scene, sectors, &spec).unwrap();
    support::Instance { scene, grid, sectors, truth_model, truth, measurements }
}

#[test]
fn refinement_descends_from_offset_start() {
    let mut improved = 0;
    for seed in 0..5 {
        let inst = single_scatterer(seed);
        let problem = Problem::new(&inst.scene, &inst.grid, &inst.measurements, Objective::Nmse).unwrap();
        let mut vs = inst.truth_model.clone();
        vs.clear_srcs();
        let truth = vs.scatterer(0).position;
        vs.set_position(0, truth + Vec3::new(3.0, 4.0, 0.0));
        let out = refine_position(&mut vs, 0, &problem, &EstimatorConfig::default()).unwrap();
        assert!(out.objective <= out.initial_objective);
        if out.initial_objective > 0.0 {
            assert!(out.objective < out.initial_objective, "seed {seed}");
            improved += 1;
        }
        let region = EstimatorConfig::default().constraint.region_for(vs.scatterer(0).anchor, &inst.scene).unwrap();
        assert!(region.contains(&out.position));
    }
    assert!(improved >= 4);
}

#[test]
fn refinement_on_a_line_reaches_the_sampled_optimum() {
    for seed in 0..5 {
        let inst = single_scatterer(seed);
        let problem = Problem::new(&inst.scene, &inst.grid, &inst.measurements, Objective::Nmse).unwrap();
        let truth = inst.truth_model.scatterer(0).position;
        let region = inst.scene.region();
        let thin = 1e-9;
        let lo = (truth.x - 20.0).max(region.min.x);
        let hi = (truth.x + 20.0).min(region.max.x);
        let min = [lo, truth.y - thin, truth.z - thin];
        let max = [hi, truth.y + thin, truth.z + thin];
        let config = EstimatorConfig { constraint: ConstraintMode::Fixed { min, max }, ..Default::default() };
        let mut vs = inst.truth_model.clone();
        vs.clear_srcs();
        let objective_at = |vs: &mut VirtualScattererSet, x: f64| {
            vs.set_position(0, Vec3::new(x, truth.y, truth.z));
            problem.solve(vs, None).unwrap().objective
        };
        let mut probe = vs.clone();
        let best = (0..1000).map(|k| objective_at(&mut probe, lo + (hi - lo) * (k as f64 + 0.5) / 1000.0)).fold(f64::INFINITY, f64::min);
        vs.set_position(0, Vec3::new(0.5 * (lo + hi) + 7.0, truth.y, truth.z));
        let out = refine_position(&mut vs, 0, &problem, &config).unwrap();
        assert!(out.objective <= best * 1.05 + 1e-15, "seed {seed}: {:e} vs {:e}", out.objective, best);
    }
}

#[test]
fn ls_solution_is_first_order_optimal() {
    for seed in 0..3 {
        let inst = support::noisy(seed, 30);
        let problem = Problem::new(&inst.scene, &inst.grid, &inst.measurements, Objective::Nmse).unwrap();
        let d = problem.design(&inst.truth_model).unwrap();
        let lambda = vscat::linalg::default_ridge(&d.phi);
        let tau = ls_estimate_srcs(&d, inst.measurements.gains(), lambda).unwrap();
        let y: Vec<f64> = inst.measurements.gains().iter().zip(d.offset.iter()).map(|(q, b)| q - b).collect();
        let r: Vec<f64> = (0..y.len()).map(|i| y[i] - (0..tau.len()).map(|j| d.phi[(i, j)] * tau[j]).sum::<f64>()).collect();
        let delta = 1e-6;
        for k in 0..tau.len() {
            let col: Vec<f64> = (0..y.len()).map(|i| d.phi[(i, k)]).collect();
            let phi_r = common::dot(&col, &r);
            let phi_phi = common::dot(&col, &col);
            for sgn in [1.0, -1.0] {
                let e = sgn * delta;
                // J(τ + e·u_k) − J(τ) expanded exactly
                let change = -2.0 * e * phi_r + e * e * phi_phi + 2.0 * lambda * e * tau[k] + lambda * e * e;
                let first_order = (2.0 * e * (lambda * tau[k] - phi_r)).abs();
                assert!(change >= -1e-9 * first_order.max(e * e * (phi_phi + lambda)), "seed {seed} column {k}");
            }
        }
    }
}

#[test]
fn init_positions_example_and_warm_start() {
    use vscat::geometry::{PhysicalScatterer, Scene};
    let b = |x: f64, side: f64, h: f64| Aabb::new(Vec3::new(x, 10.0, 0.0), Vec3::new(x + side, 10.0 + side, h));
    let scene = Scene::new(
        Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(100.0, 100.0, 30.0)),
        Vec3::new(50.0, 80.0, 9.0),
        vec![
            PhysicalScatterer { id: 1, bounds: b(20.0, 2.0, 2.0) },
            PhysicalScatterer { id: 2, bounds: b(40.0, 1.0, 1.0) },
            PhysicalScatterer { id: 3, bounds: b(60.0, 3.0, 1.0) },
        ],
        1e-3,
        2.0,
        0.1,
    )
    .unwrap();
    let sectors = AodSectorization::new(8, 1).unwrap();
    let first = init_positions(1, None, &scene, sectors, 2).unwrap();
    assert_eq!(first.scatterer(0).position, scene.scatterer(3).unwrap().bounds.center());
    assert_eq!(first.scatterer(1).position, scene.scatterer(1).unwrap().bounds.center());
    let mut refined = first.clone();
    refined.set_position(0, Vec3::new(61.25, 9.5, 0.75));
    let second = init_positions(2, Some(&refined), &scene, sectors, 2).unwrap();
    assert_eq!(second.scatterer(0).position, Vec3::new(61.25, 9.5, 0.75));
    assert_eq!(second.scatterer(1).position, first.scatterer(1).position);
    assert_eq!(second.scatterer(2).anchor, 2);
    assert_eq!(second.scatterer(3).anchor, 3);
    // more scatterers than boxes wrap around
    let wide = init_positions(1, None, &scene, sectors, 5).unwrap();
    let anchors: Vec<u32> = wide.scatterers().iter().map(|s| s.anchor).collect();
    assert_eq!(anchors, vec![3, 1, 2, 3, 1]);
}

#[test]
fn in_class_recovery_example() {
    let inst = support::in_class(1).unwrap();
    let config = EstimatorConfig::default();
    let (vs, report) = progressive_estimate(&inst.scene, &inst.grid, inst.sectors, &inst.measurements, &config).unwrap();
    let z = report.zetas();
    assert!(z[0] < 1e-6, "{z:?}");
    assert_eq!(z.len(), 2, "{z:?}");
    assert!(report.converged);
    assert_eq!(report.chosen_iteration, 1);
    assert_eq!(vs.len(), 2);
}

#[test]
fn zeta_is_monotone_and_positions_are_feasible() {
    let config = EstimatorConfig::default();
    for seed in 0..6 {
        let inst = support::noisy(seed, 20);
        let (vs, report) = progressive_estimate(&inst.scene, &inst.grid, inst.sectors, &inst.measurements, &config).unwrap();
        let z = report.zetas();
        assert!(z.windows(2).all(|w| w[1] <= w[0]), "seed {seed}: {z:?}");
        assert!(report.iterations.len() <= config.max_progressive_iters);
        assert_eq!(report.final_objective, z[report.chosen_iteration - 1]);
        for s in vs.scatterers() {
            assert!(config.constraint.region_for(s.anchor, &inst.scene).unwrap().contains(&s.position));
        }
    }
}

#[test]
fn estimation_is_deterministic() {
    let inst = support::noisy(4, 20);
    let config = EstimatorConfig::default();
    let run = || progressive_estimate(&inst.scene, &inst.grid, inst.sectors, &inst.measurements, &config).unwrap();
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra.zetas(), rb.zetas());
    assert_eq!(ra.chosen_iteration, rb.chosen_iteration);
}

#[test]
fn empty_measurements_are_rejected() {
    let inst = support::noisy(0, 20);
    let empty = MeasurementSet::new(vec![], vec![]);
    let err = match empty {
        Err(e) => e,
        Ok(ms) => progressive_estimate(&inst.scene, &inst.grid, inst.sectors, &ms, &EstimatorConfig::default()).unwrap_err(),
    };
    assert_eq!(err.code(), "invalid_argument");
}
