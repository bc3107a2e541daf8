//! Full-reference quality measures: RRMSE, multiscale mean SSIM and QILV.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{reflect_index, ImagePatch, Plane};
use crate::losses::{ssim_map, SsimConstants, SSIM_WINDOW};

pub const DEFAULT_MS_SCALES: usize = 5;
pub const QILV_WINDOW: usize = 5;
const QILV_STABILIZER: f64 = 1e-10;

/// `‖sr − hr‖_F / ‖hr‖_F`.
pub fn rrmse(sr: &ImagePatch, hr: &ImagePatch) -> Result<f64> {
    sr.ensure_same_shape(hr)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in sr.as_planar().iter().zip(hr.as_planar()) {
        num += (a - b) * (a - b);
        den += b * b;
    }
    if den == 0.0 {
        return Err(Error::DegenerateReference);
    }
    Ok((num / den).sqrt())
}

/// 2×2 box average followed by decimation; odd trailing rows/columns are dropped.
pub fn downsample2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let r0 = &plane[2 * y * w..];
        let r1 = &plane[(2 * y + 1) * w..];
        for x in 0..ow {
            out.push(0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]));
        }
    }
    (out, oh, ow)
}

/// Smallest side supporting `scales` dyadic levels of a 5×5 window.
pub fn min_side_for_scales(scales: usize) -> usize {
    SSIM_WINDOW << scales.saturating_sub(1)
}

/// Mean windowed SSIM of each scale, finest first.
pub fn mssim_per_scale(sr: &ImagePatch, hr: &ImagePatch, scales: usize) -> Result<Vec<f64>> {
    sr.ensure_same_shape(hr)?;
    if scales == 0 {
        return Err(Error::invalid("ms_mssim needs at least one scale"));
    }
    let need = min_side_for_scales(scales);
    let (h, w, channels) = sr.shape();
    if h < need || w < need {
        return Err(Error::shape(format!(
            "{h}x{w} input too small for {scales} scales (needs {need}x{need})"
        )));
    }
    let k = SsimConstants::default();
    let mut xs: Vec<Vec<f64>> = (0..channels).map(|c| sr.channel(c).to_vec()).collect();
    let mut ys: Vec<Vec<f64>> = (0..channels).map(|c| hr.channel(c).to_vec()).collect();
    let (mut ch, mut cw) = (h, w);
    let mut out = Vec::with_capacity(scales);
    for s in 0..scales {
        if s > 0 {
            let (mut nh, mut nw) = (0, 0);
            for plane in xs.iter_mut().chain(ys.iter_mut()) {
                let (d, dh, dw) = downsample2(plane, ch, cw);
                *plane = d;
                (nh, nw) = (dh, dw);
            }
            (ch, cw) = (nh, nw);
        }
        let mut total = 0.0;
        let mut count = 0usize;
        for c in 0..channels {
            let map = ssim_map(&xs[c], &ys[c], ch, cw, &k)?;
            total += map.iter().sum::<f64>();
            count += map.len();
        }
        out.push(total / count as f64);
    }
    Ok(out)
}

/// Arithmetic mean over `scales` dyadic levels of the mean 5×5 window SSIM.
pub fn ms_mssim(sr: &ImagePatch, hr: &ImagePatch, scales: usize) -> Result<f64> {
    let per = mssim_per_scale(sr, hr, scales)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Population variance over a centered `window × window` neighborhood, with
/// half-sample symmetric boundaries.
pub fn local_variance_map(x: &Plane, window: usize) -> Result<Plane> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(Error::invalid(format!("window {window} must be odd and >= 3")));
    }
    let (h, w) = (x.height, x.width);
    let r = (window / 2) as isize;
    let n = (window * window) as f64;
    let mut out = vec![0.0; h * w];
    let rows: Vec<usize> = (0..h as isize + 2 * r).map(|i| reflect_index(i - r, h)).collect();
    let cols: Vec<usize> = (0..w as isize + 2 * r).map(|i| reflect_index(i - r, w)).collect();
    for y in 0..h {
        for xx in 0..w {
            // shifting by the center value keeps flat neighborhoods exactly zero
            let center = x.data[y * w + xx];
            let mut s = 0.0;
            let mut s2 = 0.0;
            for &ry in &rows[y..y + window] {
                let row = &x.data[ry * w..(ry + 1) * w];
                for &rx in &cols[xx..xx + window] {
                    let v = row[rx] - center;
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / n;
            out[y * w + xx] = (s2 / n - mean * mean).max(0.0);
        }
    }
    Plane::new(h, w, out)
}

/// Quality index based on local variance of the channel-mean luminance.
pub fn qilv(sr: &ImagePatch, hr: &ImagePatch) -> Result<f64> {
    sr.ensure_same_shape(hr)?;
    let vs = local_variance_map(&sr.luminance(), QILV_WINDOW)?;
    let vh = local_variance_map(&hr.luminance(), QILV_WINDOW)?;
    qilv_from_maps(&vs.data, &vh.data)
}

/// Three-factor comparison of two local-variance maps.
pub fn qilv_from_maps(vs: &[f64], vh: &[f64]) -> Result<f64> {
    if vs.len() != vh.len() || vs.is_empty() {
        return Err(Error::shape("variance maps differ in size"));
    }
    let n = vs.len() as f64;
    let mu_s = vs.iter().sum::<f64>() / n;
    let mu_h = vh.iter().sum::<f64>() / n;
    let (mut var_s, mut var_h, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in vs.iter().zip(vh) {
        let (da, db) = (a - mu_s, b - mu_h);
        var_s += da * da;
        var_h += db * db;
        cov += da * db;
    }
    let (sd_s, sd_h, cov) = ((var_s / n).sqrt(), (var_h / n).sqrt(), cov / n);
    if sd_s == 0.0 && sd_h == 0.0 {
        return if vs == vh {
            Ok(1.0)
        } else {
            Err(Error::DegenerateVariance)
        };
    }
    let c = QILV_STABILIZER;
    let mean_term = (2.0 * mu_s * mu_h + c) / (mu_s * mu_s + mu_h * mu_h + c);
    let spread_term = (2.0 * sd_s * sd_h + c) / (sd_s * sd_s + sd_h * sd_h + c);
    let corr_term = (cov + c) / (sd_s * sd_h + c);
    Ok(mean_term * spread_term * corr_term)
}

/// Metrics of one SR/HR pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub pair_id: String,
    pub rrmse: f64,
    pub ms_mssim: f64,
    pub qilv: f64,
}

/// Per-image metrics and their arithmetic means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rrmse: f64,
    pub ms_mssim: f64,
    pub qilv: f64,
    pub ms_scales: usize,
    pub per_image: Vec<ImageMetrics>,
}

pub fn evaluate_pair(pair_id: &str, sr: &ImagePatch, hr: &ImagePatch, scales: usize) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        pair_id: pair_id.to_string(),
        rrmse: rrmse(sr, hr)?,
        ms_mssim: ms_mssim(sr, hr, scales)?,
        qilv: qilv(sr, hr)?,
    })
}

/// Scores `(pair_id, sr, hr)` triples in order and averages them.
pub fn evaluate_pairs<'a, I>(pairs: I, scales: usize) -> Result<MetricReport>
where
    I: IntoIterator<Item = (&'a str, &'a ImagePatch, &'a ImagePatch)>,
{
    let per_image = pairs
        .into_iter()
        .map(|(id, sr, hr)| evaluate_pair(id, sr, hr, scales))
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_images(per_image, scales)
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>, ms_scales: usize) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::invalid("no pairs to evaluate"));
        }
        let n = per_image.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            rrmse: mean(|m| m.rrmse),
            ms_mssim: mean(|m| m.ms_mssim),
            qilv: mean(|m| m.qilv),
            ms_scales,
            per_image,
        })
    }

    /// `pair_id,rrmse,ms_mssim,qilv` rows; floats use shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair_id,rrmse,ms_mssim,qilv\n");
        for m in &self.per_image {
            writeln!(s, "{},{:?},{:?},{:?}", m.pair_id, m.rrmse, m.ms_mssim, m.qilv).unwrap();
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "pairs": self.per_image.len(),
            "ms_scales": self.ms_scales,
            "mean": {
                "rrmse": self.rrmse,
                "ms_mssim": self.ms_mssim,
                "qilv": self.qilv,
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::tissue_patch;

    fn checkerboard(n: usize) -> Plane {
        Plane::new(n, n, (0..n * n).map(|i| ((i / n + i % n) % 2) as f64).collect()).unwrap()
    }

    /// Nested-loop local variance with explicit mirrored indices.
    fn variance_oracle(x: &Plane, window: usize) -> Vec<f64> {
        let r = (window / 2) as isize;
        let mirror = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - i - 1;
            }
            i as usize
        };
        let mut out = Vec::new();
        for y in 0..x.height as isize {
            for xx in 0..x.width as isize {
                let mut vals = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        vals.push(x.at(mirror(y + dy, x.height), mirror(xx + dx, x.width)));
                    }
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                out.push(vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64);
            }
        }
        out
    }

    #[test]
    fn rrmse_examples() {
        let hr = tissue_patch(32, 1);
        assert_eq!(rrmse(&hr, &hr).unwrap(), 0.0);
        let zero = ImagePatch::filled(32, 32, 3, 0.0).unwrap();
        assert_eq!(rrmse(&zero, &hr).unwrap(), 1.0);
        assert!(matches!(rrmse(&hr, &zero), Err(Error::DegenerateReference)));
    }

    #[test]
    fn ms_mssim_identity_and_size_check() {
        let hr = tissue_patch(80, 2);
        assert_eq!(ms_mssim(&hr, &hr, 5).unwrap(), 1.0);
        assert!(ms_mssim(&hr, &hr, 6).is_err());
        assert_eq!(min_side_for_scales(5), 80);
    }

    #[test]
    fn local_variance_examples() {
        let flat = Plane::filled(9, 9, 0.3);
        assert!(local_variance_map(&flat, 3)
            .unwrap()
            .data
            .iter()
            .all(|v| v.abs() < 1e-15));
        let cb = checkerboard(8);
        let got = local_variance_map(&cb, 3).unwrap();
        let want = variance_oracle(&cb, 3);
        for (a, b) in got.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
        // 5 ones and 4 zeros, or the reverse: 20/81
        assert!((got.at(3, 3) - 20.0 / 81.0).abs() < 1e-15);
        let lum = tissue_patch(16, 3).luminance();
        let got = local_variance_map(&lum, 5).unwrap();
        for (a, b) in got.data.iter().zip(variance_oracle(&lum, 5)) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(local_variance_map(&lum, 4).is_err());
    }

    #[test]
    fn qilv_identity_and_degenerate() {
        let hr = tissue_patch(32, 4);
        assert!((qilv(&hr, &hr).unwrap() - 1.0).abs() < 1e-9);
        let a = ImagePatch::filled(16, 16, 3, 0.2).unwrap();
        let b = ImagePatch::filled(16, 16, 3, 0.7).unwrap();
        assert_eq!(qilv(&a, &b).unwrap(), 1.0);
        assert!(matches!(
            qilv_from_maps(&[0.1; 4], &[0.2; 4]),
            Err(Error::DegenerateVariance)
        ));
    }

    #[test]
    fn report_means_and_csv() {
        let hr = tissue_patch(32, 5);
        let r = evaluate_pairs([("a", &hr, &hr)], 3).unwrap();
        assert_eq!((r.rrmse, r.ms_mssim), (0.0, 1.0));
        assert!((r.qilv - 1.0).abs() < 1e-9);
        assert_eq!(r.to_csv().lines().count(), 2);
        assert!(evaluate_pairs(std::iter::empty(), 3).is_err());
    }
}
