use crate::error::{Error, Result};
use crate::image::ImagePatch;

/// Dense `N × C × H × W` batch of activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::shape(format!(
                "tensor {n}x{c}x{h}x{w} needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn from_patch(patch: &ImagePatch) -> Self {
        let (h, w, c) = patch.shape();
        Self {
            n: 1,
            c,
            h,
            w,
            data: patch.as_planar().to_vec(),
        }
    }

    /// Stacks patches of identical shape into one batch.
    pub fn from_patches<'a>(patches: impl IntoIterator<Item = &'a ImagePatch>) -> Result<Self> {
        let mut iter = patches.into_iter().peekable();
        let first = iter.peek().ok_or_else(|| Error::invalid("empty batch"))?.shape();
        let (h, w, c) = first;
        let mut data = Vec::new();
        let mut n = 0;
        for p in iter {
            if p.shape() != first {
                return Err(Error::shape(format!("batch mixes {:?} and {:?}", first, p.shape())));
            }
            data.extend_from_slice(p.as_planar());
            n += 1;
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn plane(&self, i: usize, c: usize) -> &[f64] {
        let p = self.h * self.w;
        let start = (i * self.c + c) * p;
        &self.data[start..start + p]
    }

    /// Converts sample `i` back into an image patch, clamping into `[0, 1]`.
    pub fn to_patch(&self, i: usize) -> Result<ImagePatch> {
        ImagePatch::from_planar_clamped(self.h, self.w, self.c, self.sample(i).to_vec())
    }

    pub fn to_patches(&self) -> Result<Vec<ImagePatch>> {
        (0..self.n).map(|i| self.to_patch(i)).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
