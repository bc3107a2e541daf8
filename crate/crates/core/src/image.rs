//! Image patches and the small set of filters shared by the pipeline,
//! the losses and the metrics.
//!
//! Patches are logically `height × width × channels` arrays of intensities
//! in `[0, 1]`. Storage is planar (one contiguous plane per channel) since
//! every consumer works channel by channel.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};

/// A single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "plane {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// An `H × W × C` patch of intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    channels: usize,
    /// Channel-planar storage: `data[c * H * W + y * W + x]`.
    data: Vec<f64>,
}

impl ImagePatch {
    /// Builds a patch from channel-planar data, validating the intensity range.
    pub fn from_planar(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("patch dimensions must be positive"));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "patch {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a patch from planar data, clamping every value into `[0, 1]`.
    /// Non-finite values are rejected.
    pub fn from_planar_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image patch"));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::from_planar(height, width, channels, data)
    }

    /// Builds a patch from interleaved `H × W × C` data.
    pub fn from_interleaved(height: usize, width: usize, channels: usize, data: &[f64]) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape("interleaved buffer has the wrong length"));
        }
        let plane = height * width;
        let mut planar = vec![0.0; data.len()];
        for (i, px) in data.chunks_exact(channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                planar[c * plane + i] = v;
            }
        }
        Self::from_planar(height, width, channels, planar)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::from_planar(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_planes(planes: &[Plane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::invalid("need at least one plane"))?;
        let mut data = Vec::with_capacity(first.data.len() * planes.len());
        for p in planes {
            if p.height != first.height || p.width != first.width {
                return Err(Error::shape("planes differ in size"));
            }
            data.extend_from_slice(&p.data);
        }
        Self::from_planar(first.height, first.width, planes.len(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channel-planar view of the intensities.
    pub fn as_planar(&self) -> &[f64] {
        &self.data
    }

    pub fn into_planar(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane(&self, c: usize) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.channel(c).to_vec(),
        }
    }

    /// Unweighted mean over channels.
    pub fn luminance(&self) -> Plane {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.channel(c)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.channels as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Plane {
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    /// Axis-aligned crop.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::invalid(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for c in 0..self.channels {
            let ch = self.channel(c);
            for y in top..top + height {
                data.extend_from_slice(&ch[y * self.width + left..y * self.width + left + width]);
            }
        }
        Ok(Self {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    pub fn same_shape(&self, other: &ImagePatch) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &ImagePatch) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!("{:?} vs {:?}", self.shape(), other.shape())))
        }
    }

    pub fn map_planes(&self, mut f: impl FnMut(&Plane) -> Plane) -> Result<Self> {
        let planes: Vec<Plane> = (0..self.channels).map(|c| f(&self.plane(c))).collect();
        Self::from_planes(&planes)
    }

    /// Loads an 8- or 16-bit PNG as an RGB patch.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let rgb = img.to_rgb16();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut data = vec![0.0; w * h * 3];
        let plane = w * h;
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px.0[c] as f64 / 65535.0;
            }
        }
        Self::from_planar(h, w, 3, data)
    }

    /// Writes a 16-bit RGB PNG. Single-channel patches are replicated to gray.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let plane = self.height * self.width;
        let mut buf: ImageBuffer<Rgb<u16>, Vec<u16>> = ImageBuffer::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            for c in 0..3 {
                let src = if self.channels == 1 { 0 } else { c };
                let v = self.data[src * plane + i];
                px.0[c] = (v * 65535.0).round() as u16;
            }
        }
        DynamicImage::ImageRgb16(buf).save(path)?;
        Ok(())
    }

    /// Quantizes to the 16-bit grid used by [`ImagePatch::save_png`], so that an
    /// in-memory patch equals what a save/load round trip returns.
    pub fn quantized(&self) -> Self {
        let data = self.data.iter().map(|v| (v * 65535.0).round() / 65535.0).collect();
        Self { data, ..self.clone() }
    }
}

/// Maps any integer index onto `[0, n)` by half-sample symmetric reflection
/// (`d c b a | a b c d | d c b a`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Normalized 1-D Gaussian kernel truncated at `4σ`, odd length.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let denom = 2.0 * sigma * sigma;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / denom).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution with a symmetric odd kernel, reflective boundaries.
pub fn convolve_separable(plane: &Plane, kernel: &[f64]) -> Plane {
    let (h, w) = (plane.height, plane.width);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane.data[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * row[reflect_index(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (k, kv) in kernel.iter().enumerate() {
            let sy = reflect_index(y as isize + k as isize - r, h);
            let src = &tmp[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    Plane {
        height: h,
        width: w,
        data: out,
    }
}

pub fn gaussian_blur_plane(plane: &Plane, sigma: f64) -> Plane {
    convolve_separable(plane, &gaussian_kernel(sigma))
}

/// Gaussian smoothing of every channel, result clamped to `[0, 1]`.
pub fn gaussian_blur(patch: &ImagePatch, sigma: f64) -> Result<ImagePatch> {
    let kernel = gaussian_kernel(sigma);
    let mut data = Vec::with_capacity(patch.len());
    for c in 0..patch.channels() {
        data.extend(convolve_separable(&patch.plane(c), &kernel).data);
    }
    ImagePatch::from_planar_clamped(patch.height(), patch.width(), patch.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_mirrors_with_edge_repeat() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        // kernels wider than the image keep reflecting
        assert_eq!(reflect_index(-9, 4), 0);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn gaussian_kernel_is_normalized_and_odd() {
        for sigma in [0.5, 1.2, 2.0, 3.0] {
            let k = gaussian_kernel(sigma);
            assert_eq!(k.len() % 2, 1);
            assert_eq!(k.len(), 2 * (4.0 * sigma).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let p = Plane::filled(9, 7, 0.3);
        let b = gaussian_blur_plane(&p, 2.0);
        assert!(b.data.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn out_of_range_intensity_rejected() {
        assert!(ImagePatch::from_planar(1, 1, 1, vec![1.5]).is_err());
        assert!(ImagePatch::from_planar(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(ImagePatch::from_planar_clamped(1, 1, 1, vec![1.5]).is_ok());
    }

    #[test]
    fn interleaved_and_planar_agree() {
        let inter = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let p = ImagePatch::from_interleaved(1, 2, 3, &inter).unwrap();
        assert_eq!(p.get(0, 1, 0), 0.4);
        assert_eq!(p.get(0, 0, 2), 0.3);
        assert_eq!(p.channel(1), &[0.2, 0.5]);
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_patch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        let data: Vec<f64> = (0..4 * 5 * 3).map(|i| (i as f64) / 59.0).collect();
        let p = ImagePatch::from_planar(4, 5, 3, data).unwrap().quantized();
        p.save_png(&path).unwrap();
        let back = ImagePatch::load_png(&path).unwrap();
        assert_eq!(back, p);
    }
}
