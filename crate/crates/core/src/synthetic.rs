//! Procedural H&E-like tissue textures.
//!
//! Used as stand-in source material for tests, demos and CPU-scale
//! experiments: a pink stroma background with smooth low-frequency
//! variation, fine grain, and dark purple elliptical nuclei.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::image::{gaussian_blur_plane, ImagePatch, Plane};

const STROMA_DARK: [f64; 3] = [0.82, 0.55, 0.72];
const STROMA_LIGHT: [f64; 3] = [0.96, 0.82, 0.90];
const NUCLEUS: [f64; 3] = [0.32, 0.18, 0.52];

fn value_noise(size: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = size / cell + 2;
    let grid: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let gy = y as f64 / cell as f64;
        let (y0, ty) = (gy.floor() as usize, gy.fract());
        let ty = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..size {
            let gx = x as f64 / cell as f64;
            let (x0, tx) = (gx.floor() as usize, gx.fract());
            let tx = tx * tx * (3.0 - 2.0 * tx);
            let a = grid[y0 * g + x0];
            let b = grid[y0 * g + x0 + 1];
            let c = grid[(y0 + 1) * g + x0];
            let d = grid[(y0 + 1) * g + x0 + 1];
            out[y * size + x] = (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty;
        }
    }
    out
}

/// A `size × size × 3` tissue-like patch, deterministic in `seed`.
pub fn tissue_patch(size: usize, seed: u64) -> ImagePatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;
    let field = value_noise(size, 12, &mut rng);
    let fibres = {
        let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let blurred = gaussian_blur_plane(&Plane::new(size, size, raw).unwrap(), 1.0);
        blurred.data
    };

    let mut planes: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            (0..n)
                .map(|i| {
                    let t = (field[i] + 0.35 * fibres[i]).clamp(0.0, 1.0);
                    STROMA_DARK[c] * (1.0 - t) + STROMA_LIGHT[c] * t
                })
                .collect()
        })
        .collect();

    let nuclei = (n as f64 / 110.0).round() as usize;
    for _ in 0..nuclei {
        let cy = rng.random::<f64>() * size as f64;
        let cx = rng.random::<f64>() * size as f64;
        let ry: f64 = rng.random_range(1.5..4.5);
        let rx: f64 = rng.random_range(1.5..4.5);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let shade: f64 = rng.random_range(0.8..1.15);
        let (sin, cos) = angle.sin_cos();
        let reach = rx.max(ry) + 1.5;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(size);
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(size);
        for y in y0..y1 {
            for x in x0..x1 {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = (dx * cos + dy * sin) / rx;
                let v = (-dx * sin + dy * cos) / ry;
                let d = (u * u + v * v).sqrt();
                let alpha = ((1.0 - d) * 3.0).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for (c, plane) in planes.iter_mut().enumerate() {
                        let i = y * size + x;
                        let target = (NUCLEUS[c] * shade).min(1.0);
                        plane[i] = plane[i] * (1.0 - alpha) + target * alpha;
                    }
                }
            }
        }
    }

    let mut data = Vec::with_capacity(3 * n);
    for plane in planes {
        data.extend(plane);
    }
    for v in &mut data {
        let grain: f64 = rng.sample(StandardNormal);
        *v += 0.015 * grain;
    }
    ImagePatch::from_planar_clamped(size, size, 3, data).expect("finite synthetic texture")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_textured() {
        let a = tissue_patch(64, 4);
        assert_eq!(a, tissue_patch(64, 4));
        assert_ne!(a, tissue_patch(64, 5));
        let lum = a.luminance();
        let mean = lum.data.iter().sum::<f64>() / lum.data.len() as f64;
        let var = lum.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / lum.data.len() as f64;
        assert!(var > 1e-3, "texture variance {var}");
    }
}
