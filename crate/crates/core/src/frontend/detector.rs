//! Classical corner detector and patch descriptor.
//!
//! Shi-Tomasi minimum-eigenvalue response over a 3x3 structure-tensor window,
//! 3x3 non-maximum suppression, parabolic sub-pixel refinement, and an 11x11
//! mean-subtracted, L2-normalized intensity patch as descriptor.

use nalgebra::Vector2;

use super::features::FrameFeatures;
use super::pgm::GrayImage;

/// Side length of the descriptor patch.
pub const PATCH_SIZE: usize = 11;
/// Descriptor dimension of the built-in frontend.
pub const DESCRIPTOR_DIM: usize = PATCH_SIZE * PATCH_SIZE;
/// Default cap on keypoints per frame.
pub const DEFAULT_MAX_POINTS: usize = 500;

/// Keypoints are only reported this many pixels away from the image border.
pub const BORDER: usize = 2;

/// Responses below this fraction of the strongest response are discarded.
const QUALITY_LEVEL: f64 = 0.01;
/// Absolute response floor; a constant image stays below it.
const MIN_RESPONSE: f64 = 1e-10;

struct Candidate {
    x: usize,
    y: usize,
    response: f64,
}

fn to_float(img: &GrayImage) -> Vec<f64> {
    img.data.iter().map(|&v| v as f64 / 255.0).collect()
}

/// Minimum eigenvalue of the structure tensor at every pixel, with replicated borders.
fn shi_tomasi_response(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        img[yc * w + xc]
    };
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            // Sobel
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            let i = y as usize * w + x as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let sum3 = |buf: &[f64], x: usize, y: usize| -> f64 {
        let mut s = 0.0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let xc = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let yc = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                s += buf[yc * w + xc];
            }
        }
        s
    };
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let a = sum3(&ixx, x, y);
            let c = sum3(&iyy, x, y);
            let b = sum3(&ixy, x, y);
            let half_tr = 0.5 * (a + c);
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            out[y * w + x] = (half_tr - disc).max(0.0);
        }
    }
    out
}

/// Peak offset of a parabola through three equally spaced samples, clamped to ±0.5.
fn parabola_peak(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom.abs() < 1e-300 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

fn describe(img: &[f64], w: usize, h: usize, cx: usize, cy: usize) -> Option<Vec<f64>> {
    let r = (PATCH_SIZE / 2) as isize;
    let mut patch = Vec::with_capacity(DESCRIPTOR_DIM);
    for dy in -r..=r {
        for dx in -r..=r {
            let x = cx as isize + dx;
            let y = cy as isize + dy;
            let v = if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                0.0
            } else {
                img[y as usize * w + x as usize]
            };
            patch.push(v);
        }
    }
    let mean = patch.iter().sum::<f64>() / patch.len() as f64;
    patch.iter_mut().for_each(|v| *v -= mean);
    let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return None;
    }
    patch.iter_mut().for_each(|v| *v /= norm);
    Some(patch)
}

/// Detects up to `max_points` corners and describes each with an intensity patch.
///
/// Output is ordered by decreasing score; equal scores are ordered by `(y, x)`.
/// Scores are responses normalized by the strongest response in the image.
pub fn detect_and_describe(image: &GrayImage, max_points: usize, frame_index: usize) -> FrameFeatures {
    let mut out = FrameFeatures::empty(frame_index, DESCRIPTOR_DIM);
    let (w, h) = (image.width, image.height);
    if w <= 2 * BORDER || h <= 2 * BORDER || max_points == 0 {
        return out;
    }
    let img = to_float(image);
    let resp = shi_tomasi_response(&img, w, h);
    let max_resp = resp.iter().cloned().fold(0.0, f64::max);
    if max_resp < MIN_RESPONSE {
        return out;
    }
    let threshold = (QUALITY_LEVEL * max_resp).max(MIN_RESPONSE);

    let mut candidates = Vec::new();
    for y in BORDER..h - BORDER {
        for x in BORDER..w - BORDER {
            let i = y * w + x;
            let r = resp[i];
            if r < threshold {
                continue;
            }
            // Plateau ties go to the lowest row-major index.
            let is_max = (-1isize..=1).all(|dy| {
                (-1isize..=1).all(|dx| {
                    if dx == 0 && dy == 0 {
                        return true;
                    }
                    let j = (y as isize + dy) as usize * w + (x as isize + dx) as usize;
                    r > resp[j] || (r == resp[j] && i < j)
                })
            });
            if is_max {
                candidates.push(Candidate { x, y, response: r });
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });

    for c in candidates {
        if out.len() >= max_points {
            break;
        }
        let Some(descriptor) = describe(&img, w, h, c.x, c.y) else {
            continue;
        };
        let i = c.y * w + c.x;
        let ox = parabola_peak(resp[i - 1], resp[i], resp[i + 1]);
        let oy = parabola_peak(resp[i - w], resp[i], resp[i + w]);
        out.push(
            Vector2::new(c.x as f64 + ox, c.y as f64 + oy),
            descriptor,
            c.response / max_resp,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn checkerboard(w: usize, h: usize, square: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| if (x / square + y / square) % 2 == 0 { 40 } else { 220 })
    }

    #[test]
    fn constant_image_has_no_keypoints() {
        let img = GrayImage::from_fn(64, 48, |_, _| 128);
        assert!(detect_and_describe(&img, 500, 0).is_empty());
    }

    #[test]
    fn checkerboard_corners_near_grid_intersections() {
        let square = 16;
        let img = checkerboard(160, 128, square);
        let f = detect_and_describe(&img, 500, 0);
        // interior intersections sit between pixels k*square-1 and k*square
        let nx = 160 / square - 1;
        let ny = 128 / square - 1;
        assert_eq!(f.len(), nx * ny);
        for p in &f.keypoints {
            let gx = ((p.x + 0.5) / square as f64).round() * square as f64 - 0.5;
            let gy = ((p.y + 0.5) / square as f64).round() * square as f64 - 0.5;
            assert!((p.x - gx).abs() <= 1.0 && (p.y - gy).abs() <= 1.0, "{p:?}");
        }
        f.validate(None).unwrap();
    }

    #[test]
    fn caps_at_max_points_with_non_increasing_scores() {
        let img = checkerboard(640, 480, 8);
        let f = detect_and_describe(&img, DEFAULT_MAX_POINTS, 0);
        assert_eq!(f.len(), 500);
        assert!(f.scores.windows(2).all(|s| s[0] >= s[1]));
    }

    #[test]
    fn deterministic_and_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = GrayImage::from_fn(96, 80, |_, _| rng.random::<u8>());
        let a = detect_and_describe(&img, 200, 4);
        let b = detect_and_describe(&img, 200, 4);
        assert_eq!(a, b);
        for p in &a.keypoints {
            assert!(p.x > 0.0 && p.y > 0.0 && p.x < 95.0 && p.y < 79.0);
        }
        a.validate(None).unwrap();
    }

    fn blob_scene(rng: &mut ChaCha8Rng, w: usize, h: usize, pad: usize) -> Vec<(usize, usize, usize, usize, u8)> {
        (0..25)
            .map(|_| {
                let x0 = rng.random_range(pad..w - pad - 12);
                let y0 = rng.random_range(pad..h - pad - 12);
                let rw = rng.random_range(4..12);
                let rh = rng.random_range(4..12);
                (x0, y0, rw, rh, rng.random_range(60..250))
            })
            .collect()
    }

    fn render(rects: &[(usize, usize, usize, usize, u8)], w: usize, h: usize, dx: usize, dy: usize) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| {
            let mut v = 20u8;
            for &(x0, y0, rw, rh, c) in rects {
                if x >= x0 + dx && x < x0 + dx + rw && y >= y0 + dy && y < y0 + dy + rh {
                    v = c;
                }
            }
            v
        })
    }

    #[test]
    fn integer_translation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, h) = (200, 160);
        let rects = blob_scene(&mut rng, w, h, 20);
        let (dx, dy) = (7, 4);
        let a = detect_and_describe(&render(&rects, w, h, 0, 0), 1000, 0);
        let b = detect_and_describe(&render(&rects, w, h, dx, dy), 1000, 0);
        let r = (PATCH_SIZE / 2) as f64;
        let inner: Vec<_> = a
            .keypoints
            .iter()
            .filter(|p| p.x >= r && p.y >= r && p.x + dx as f64 <= (w as f64 - r) && p.y + dy as f64 <= (h as f64 - r))
            .collect();
        assert!(inner.len() > 20);
        let matched = inner
            .iter()
            .filter(|p| {
                let q = Vector2::new(p.x + dx as f64, p.y + dy as f64);
                b.keypoints.iter().any(|k| (k - q).norm() < 1e-9)
            })
            .count();
        assert!(matched as f64 >= 0.95 * inner.len() as f64, "{matched}/{}", inner.len());
    }
}
