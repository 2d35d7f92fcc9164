//! Minimal three-point absolute pose (Grunert's quartic).

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use super::PnPError;
use crate::geometry::{Intrinsics, Pose, BEHIND_CAMERA_EPS};

/// Reprojection error (px) a candidate must meet on all three points.
pub const P3P_TOLERANCE_PX: f64 = 1e-6;

/// Real roots of `c[0] x^n + ... + c[n]`, found as companion-matrix eigenvalues
/// and polished with Newton steps. Leading coefficients that vanish relative to
/// the rest lower the degree.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let first = coeffs
        .iter()
        .position(|c| c.abs() > 1e-12 * scale)
        .unwrap_or(coeffs.len());
    let c = &coeffs[first..];
    let n = c.len().saturating_sub(1);
    if n == 0 {
        return Vec::new();
    }
    let mut companion = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        companion[(0, j)] = -c[j + 1] / c[0];
    }
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    let eval = |x: f64| -> (f64, f64) {
        let mut p = 0.0;
        let mut dp = 0.0;
        for &ci in c {
            dp = dp * x + p;
            p = p * x + ci;
        }
        (p, dp)
    };
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-4 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..8 {
                let (p, dp) = eval(x);
                if dp == 0.0 || p == 0.0 {
                    break;
                }
                x -= p / dp;
            }
            x
        })
        .collect()
}

/// Rigid transform `(R, t)` minimizing `Σ |R a_i + t - b_i|²`.
pub(crate) fn kabsch(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in a.iter().zip(b) {
        h += (q - cb) * (p - ca).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v");
    let d = (u * v_t).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t;
    (r, cb - r * ca)
}

/// Gauss-Newton on the three depths so that camera-frame distances match the
/// world distances.
fn refine_depths(s: &mut Vector3<f64>, f: &[Vector3<f64>; 3], d2: &[f64; 3]) {
    const PAIRS: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];
    for _ in 0..10 {
        let mut r = Vector3::zeros();
        let mut j = Matrix3::zeros();
        for (row, &(a, b)) in PAIRS.iter().enumerate() {
            let diff = s[a] * f[a] - s[b] * f[b];
            r[row] = diff.norm_squared() - d2[row];
            j[(row, a)] = 2.0 * diff.dot(&f[a]);
            j[(row, b)] = -2.0 * diff.dot(&f[b]);
        }
        match j.lu().solve(&r) {
            Some(step) if step.iter().all(|v| v.is_finite()) => {
                *s -= step;
                if step.norm() <= 1e-15 * s.norm() {
                    break;
                }
            }
            _ => break,
        }
    }
}

/// All poses (world-to-camera) that project the three world points onto the
/// three pixels. At most four are returned.
pub fn p3p(world: &[Vector3<f64>; 3], pixels: &[Vector2<f64>; 3], k: &Intrinsics) -> Result<Vec<Pose>, PnPError> {
    let area = (world[1] - world[0]).cross(&(world[2] - world[0])).norm();
    let span = (world[1] - world[0])
        .norm()
        .max((world[2] - world[0]).norm())
        .max((world[2] - world[1]).norm());
    if !(area > 1e-10 * span * span) {
        return Err(PnPError::Degenerate);
    }
    let f: [Vector3<f64>; 3] = std::array::from_fn(|i| k.unproject(&pixels[i]).normalize());
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    let cos_a = f[1].dot(&f[2]);
    let cos_b = f[0].dot(&f[2]);
    let cos_g = f[0].dot(&f[1]);

    // s2 = u s1, s3 = v s1; eliminate u to get a quartic in v
    let p = (a2 - c2) / b2;
    let q = (a2 + c2) / b2;
    let a4 = (p - 1.0).powi(2) - 4.0 * c2 / b2 * cos_a * cos_a;
    let a3 = 4.0
        * (p * (1.0 - p) * cos_b - (1.0 - q) * cos_a * cos_g + 2.0 * c2 / b2 * cos_a * cos_a * cos_b);
    let a2c = 2.0
        * (p * p - 1.0 + 2.0 * p * p * cos_b * cos_b + 2.0 * (b2 - c2) / b2 * cos_a * cos_a
            - 4.0 * q * cos_a * cos_b * cos_g
            + 2.0 * (b2 - a2) / b2 * cos_g * cos_g);
    let a1 = 4.0 * (-p * (1.0 + p) * cos_b + 2.0 * a2 / b2 * cos_g * cos_g * cos_b - (1.0 - q) * cos_a * cos_g);
    let a0 = (1.0 + p).powi(2) - 4.0 * a2 / b2 * cos_g * cos_g;

    let d2 = [a2, b2, c2];
    let mut poses: Vec<Pose> = Vec::new();
    for v in real_roots(&[a4, a3, a2c, a1, a0]) {
        if !(v > 0.0) {
            continue;
        }
        let den = 2.0 * (cos_g - v * cos_a);
        if den.abs() < 1e-14 {
            continue;
        }
        let u = ((p - 1.0) * v * v - 2.0 * p * cos_b * v + 1.0 + p) / den;
        if !(u > 0.0) {
            continue;
        }
        let s1_sq = c2 / (1.0 + u * u - 2.0 * u * cos_g);
        if !(s1_sq > 0.0) {
            continue;
        }
        let s1 = s1_sq.sqrt();
        let mut s = Vector3::new(s1, u * s1, v * s1);
        refine_depths(&mut s, &f, &d2);
        if s.iter().any(|d| !(*d > BEHIND_CAMERA_EPS)) {
            continue;
        }
        let cam: Vec<Vector3<f64>> = (0..3).map(|i| s[i] * f[i]).collect();
        let (r, t) = kabsch(world, &cam);
        let Ok(pose) = Pose::new(r, t) else {
            continue;
        };
        if max_reprojection(&pose, world, pixels, k) >= P3P_TOLERANCE_PX {
            continue;
        }
        let duplicate = poses.iter().any(|q| {
            (q.rotation() - pose.rotation()).norm() < 1e-9
                && (q.translation() - pose.translation()).norm() < 1e-9 * (1.0 + t.norm())
        });
        if !duplicate && poses.len() < 4 {
            poses.push(pose);
        }
    }
    Ok(poses)
}

fn max_reprojection(pose: &Pose, world: &[Vector3<f64>; 3], pixels: &[Vector2<f64>; 3], k: &Intrinsics) -> f64 {
    world
        .iter()
        .zip(pixels)
        .map(|(x, u)| {
            let pc = pose.transform(x);
            if pc.z <= BEHIND_CAMERA_EPS {
                return f64::INFINITY;
            }
            let proj = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
            (proj - u).norm()
        })
        .fold(0.0, f64::max)
}
