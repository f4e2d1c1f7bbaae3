//! Independent reference implementations used as test oracles.
//!
//! Nothing here calls into the library's numeric code: dense linear algebra
//! is hand-written on `Vec<Vec<f64>>` and geometry works on `[f64; 3]`.
#![allow(dead_code, clippy::needless_range_loop)]

use std::f64::consts::PI;

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least squares `min ||Ax − b||² + λ||x||²` via Householder QR of the
/// stacked system `[A; √λ I]`.
pub fn qr_ridge(a: &Mat, b: &[f64], lambda: f64) -> Vec<f64> {
    let m = a.len();
    let n = a.first().map_or(0, |r| r.len());
    let rows = m + if lambda > 0.0 { n } else { 0 };
    let mut r = zeros(rows, n);
    let mut y = vec![0.0; rows];
    for i in 0..m {
        r[i].copy_from_slice(&a[i]);
        y[i] = b[i];
    }
    if lambda > 0.0 {
        for k in 0..n {
            r[m + k][k] = lambda.sqrt();
        }
    }
    for k in 0..n {
        let norm: f64 = (k..rows).map(|i| r[i][k] * r[i][k]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..rows).map(|i| r[i][k]).collect();
        v[0] -= alpha;
        let vv = dot(&v, &v);
        if vv == 0.0 {
            continue;
        }
        for j in k..n {
            let s = 2.0 * (k..rows).map(|i| v[i - k] * r[i][j]).sum::<f64>() / vv;
            for i in k..rows {
                r[i][j] -= s * v[i - k];
            }
        }
        let s = 2.0 * (k..rows).map(|i| v[i - k] * y[i]).sum::<f64>() / vv;
        for i in k..rows {
            y[i] -= s * v[i - k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| r[k][j] * x[j]).sum();
        x[k] = (y[k] - s) / r[k][k];
    }
    x
}

/// Gauss–Jordan inverse with partial pivoting, plus `ln |det|`.
pub fn inverse_and_logdet(a: &Mat) -> (Mat, f64) {
    let n = a.len();
    let mut m: Mat = a.to_vec();
    let mut inv = zeros(n, n);
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let mut logdet = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        inv.swap(c, p);
        let d = m[c][c];
        logdet += d.abs().ln();
        for j in 0..n {
            m[c][j] /= d;
            inv[c][j] /= d;
        }
        for i in 0..n {
            if i != c {
                let f = m[i][c];
                if f != 0.0 {
                    for j in 0..n {
                        m[i][j] -= f * m[c][j];
                        inv[i][j] -= f * inv[c][j];
                    }
                }
            }
        }
    }
    (inv, logdet)
}

/// Solves `Ax = b` by Gaussian elimination with partial pivoting.
pub fn dense_solve(a: &Mat, b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut m: Mat = a.iter().zip(b).map(|(r, &bi)| r.iter().copied().chain([bi]).collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        for i in c + 1..n {
            let f = m[i][c] / m[c][c];
            for j in c..=n {
                m[i][j] -= f * m[c][j];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    x
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(a: &Mat) -> Vec<f64> {
    let n = a.len();
    let mut m: Mat = a.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i][j] * m[i][j]).sum();
        let scale: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

pub type P3 = [f64; 3];

/// Strict interior membership.
pub fn inside_open(p: P3, lo: P3, hi: P3) -> bool {
    (0..3).all(|k| p[k] > lo[k] && p[k] < hi[k])
}

/// Does the open segment `(a, b)` enter the open box? Dense sampling.
pub fn segment_hits_box_sampled(a: P3, b: P3, lo: P3, hi: P3, samples: usize) -> bool {
    (1..samples).any(|k| {
        let t = k as f64 / samples as f64;
        inside_open([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])], lo, hi)
    })
}

/// Azimuth in `[-π, π)`, elevation in `[-π/2, π/2]`.
pub fn departure(s: P3, c: P3) -> (f64, f64) {
    let d = [c[0] - s[0], c[1] - s[1], c[2] - s[2]];
    let h = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let mut az = if h == 0.0 { 0.0 } else { d[1].atan2(d[0]) };
    if az >= PI {
        az -= 2.0 * PI;
    }
    (az, d[2].atan2(h))
}

pub fn sector(az: f64, el: f64, n_az: usize, n_el: usize) -> usize {
    let a = (((az + PI) / (2.0 * PI / n_az as f64)).floor() as usize).min(n_az - 1);
    let e = (((el + PI / 2.0) / (PI / n_el as f64)).floor().max(0.0) as usize).min(n_el - 1);
    e * n_az + a
}

pub fn dist(a: P3, b: P3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Squared-exponential angular kernel with chordal azimuth distance.
pub fn kernel(a: (f64, f64), b: (f64, f64), v: f64, rho: f64) -> f64 {
    let chord = 2.0 * ((a.0 - b.0) / 2.0).sin();
    v * v * (-(chord * chord + (a.1 - b.1).powi(2)) / (2.0 * rho * rho)).exp()
}

/// `−½ τᵀA⁻¹τ − ½ ln|A| − (M/2) ln 2π` with `A = K + σ²I`.
pub fn gp_log_likelihood(angles: &[(f64, f64)], tau: &[f64], v: f64, rho: f64, sigma: f64) -> f64 {
    let n = angles.len();
    let mut a = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[i][j] = kernel(angles[i], angles[j], v, rho) + if i == j { sigma * sigma } else { 0.0 };
        }
    }
    let (inv, logdet) = inverse_and_logdet(&a);
    -0.5 * dot(tau, &matvec(&inv, tau)) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * PI).ln()
}

/// Simple deterministic generator for oracle-side randomness.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_f64(&mut self) -> f64 {
        self.0 = self.0.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Mat) -> Mat {
    let n = a.len();
    let mut l = zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][i] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

impl Lcg {
    /// Standard normal draw by the Box–Muller transform.
    pub fn normal(&mut self) -> f64 {
        let u = 1.0 - self.next_f64();
        let v = self.next_f64();
        (-2.0 * u.ln()).sqrt() * (2.0 * PI * v).cos()
    }
}
