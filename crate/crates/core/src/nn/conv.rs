//! 2-D convolution kernels (zero padding `k / 2`), lowered to GEMM on
//! bands of output rows so the im2col buffer stays bounded.

/// Upper bound on im2col buffer size in elements.
const MAX_COLS: usize = 1 << 20;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    fn k_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    /// Output columns `lo..hi` whose tap `kx` lands inside the input row.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p, ow) = (self.stride, self.pad(), self.out_w());
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = if self.w + p > kx {
            ((self.w + p - kx - 1) / s + 1).min(ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn band_rows(&self) -> usize {
        let per_row = self.k_rows() * self.out_w();
        (MAX_COLS / per_row.max(1)).clamp(1, self.out_h())
    }

    /// Writes the patches of output rows `oy0..oy1` into `cols`, one matrix
    /// row per (channel, ky, kx), starting at column `col0` of rows `ld` long.
    fn im2col(&self, input: &[f64], oy0: usize, oy1: usize, cols: &mut [f64], ld: usize, col0: usize) {
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let ow = self.out_w();
        let ncols = (oy1 - oy0) * ow;
        for ic in 0..self.c_in {
            let plane = &input[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ic * k + ky) * k + kx;
                    let dst = &mut cols[row * ld + col0..row * ld + col0 + ncols];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in oy0..oy1 {
                        let iy = (oy * s) as isize + ky as isize - p;
                        let d = &mut dst[(oy - oy0) * ow..(oy - oy0 + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            d.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        d[..lo].fill(0.0);
                        d[hi..].fill(0.0);
                        let ix0 = lo * s + kx - p as usize;
                        if s == 1 {
                            d[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                        } else {
                            for (j, v) in d[lo..hi].iter_mut().enumerate() {
                                *v = src[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`].
    fn col2im_add(&self, cols: &[f64], oy0: usize, oy1: usize, grad_in: &mut [f64], ld: usize, col0: usize) {
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        let ow = self.out_w();
        let ncols = (oy1 - oy0) * ow;
        for ic in 0..self.c_in {
            let plane = &mut grad_in[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ic * k + ky) * k + kx;
                    let src = &cols[row * ld + col0..row * ld + col0 + ncols];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in oy0..oy1 {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let srow = &src[(oy - oy0) * ow + lo..(oy - oy0) * ow + hi];
                        let ix0 = lo * s + kx - p as usize;
                        if s == 1 {
                            for (d, v) in dst[ix0..ix0 + hi - lo].iter_mut().zip(srow) {
                                *d += v;
                            }
                        } else {
                            for (j, v) in srow.iter().enumerate() {
                                dst[ix0 + j * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// `output = weight ⊛ input + bias` for one sample.
    pub fn forward(&self, weight: &[f64], bias: &[f64], input: &[f64], output: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let kr = self.k_rows();
        let band = self.band_rows();
        let mut cols = vec![0.0; kr * band * ow];
        let mut oy0 = 0;
        while oy0 < oh {
            let oy1 = (oy0 + band).min(oh);
            let ncols = (oy1 - oy0) * ow;
            self.im2col(input, oy0, oy1, &mut cols[..kr * ncols], ncols, 0);
            // SAFETY: all slices are sized for the declared strides.
            unsafe {
                matrixmultiply::dgemm(
                    self.c_out,
                    kr,
                    ncols,
                    1.0,
                    weight.as_ptr(),
                    kr as isize,
                    1,
                    cols.as_ptr(),
                    ncols as isize,
                    1,
                    0.0,
                    output.as_mut_ptr().add(oy0 * ow),
                    (oh * ow) as isize,
                    1,
                );
            }
            oy0 = oy1;
        }
        for (oc, b) in bias.iter().enumerate() {
            for v in &mut output[oc * oh * ow..(oc + 1) * oh * ow] {
                *v += b;
            }
        }
    }

    /// Accumulates weight/bias gradients and writes the input gradient for one sample.
    pub fn backward(
        &self,
        weight: &[f64],
        input: &[f64],
        grad_out: &[f64],
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        grad_in: &mut [f64],
    ) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let kr = self.k_rows();
        let band = self.band_rows();
        let mut cols = vec![0.0; kr * band * ow];
        let mut gcols = vec![0.0; kr * band * ow];
        grad_in.fill(0.0);
        for (oc, gb) in grad_bias.iter_mut().enumerate() {
            *gb += grad_out[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
        }
        let mut oy0 = 0;
        while oy0 < oh {
            let oy1 = (oy0 + band).min(oh);
            let ncols = (oy1 - oy0) * ow;
            self.im2col(input, oy0, oy1, &mut cols[..kr * ncols], ncols, 0);
            // SAFETY: all slices are sized for the declared strides.
            unsafe {
                // dW += G · colsᵀ
                matrixmultiply::dgemm(
                    self.c_out,
                    ncols,
                    kr,
                    1.0,
                    grad_out.as_ptr().add(oy0 * ow),
                    (oh * ow) as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    ncols as isize,
                    1.0,
                    grad_weight.as_mut_ptr(),
                    kr as isize,
                    1,
                );
                // dcols = Wᵀ · G
                matrixmultiply::dgemm(
                    kr,
                    self.c_out,
                    ncols,
                    1.0,
                    weight.as_ptr(),
                    1,
                    kr as isize,
                    grad_out.as_ptr().add(oy0 * ow),
                    (oh * ow) as isize,
                    1,
                    0.0,
                    gcols.as_mut_ptr(),
                    ncols as isize,
                    1,
                );
            }
            self.col2im_add(&gcols[..kr * ncols], oy0, oy1, grad_in, ncols, 0);
            oy0 = oy1;
        }
    }

    /// Samples per GEMM when whole samples fit the column budget, else `None`.
    fn batch_group(&self, n: usize) -> Option<usize> {
        let per = self.k_rows() * self.out_h() * self.out_w();
        (n > 1 && 2 * per <= MAX_COLS).then(|| (MAX_COLS / per).min(n))
    }

    /// Forward pass over `n` NCHW samples.
    pub fn forward_batch(&self, weight: &[f64], bias: &[f64], input: &[f64], n: usize, output: &mut [f64]) {
        let (in_len, plane) = (self.c_in * self.h * self.w, self.out_h() * self.out_w());
        let out_len = self.c_out * plane;
        let Some(group) = self.batch_group(n) else {
            for i in 0..n {
                self.forward(
                    weight,
                    bias,
                    &input[i * in_len..(i + 1) * in_len],
                    &mut output[i * out_len..(i + 1) * out_len],
                );
            }
            return;
        };
        let kr = self.k_rows();
        let mut cols = vec![0.0; kr * group * plane];
        let mut tmp = vec![0.0; self.c_out * group * plane];
        for start in (0..n).step_by(group) {
            let g = group.min(n - start);
            let ncols = g * plane;
            for s in 0..g {
                let x = &input[(start + s) * in_len..(start + s + 1) * in_len];
                self.im2col(x, 0, self.out_h(), &mut cols, ncols, s * plane);
            }
            // SAFETY: `cols` is kr × ncols and `tmp` is c_out × ncols, row-major.
            unsafe {
                matrixmultiply::dgemm(
                    self.c_out,
                    kr,
                    ncols,
                    1.0,
                    weight.as_ptr(),
                    kr as isize,
                    1,
                    cols.as_ptr(),
                    ncols as isize,
                    1,
                    0.0,
                    tmp.as_mut_ptr(),
                    ncols as isize,
                    1,
                );
            }
            for s in 0..g {
                let out = &mut output[(start + s) * out_len..(start + s + 1) * out_len];
                for oc in 0..self.c_out {
                    let src = &tmp[oc * ncols + s * plane..oc * ncols + (s + 1) * plane];
                    for (o, v) in out[oc * plane..(oc + 1) * plane].iter_mut().zip(src) {
                        *o = v + bias[oc];
                    }
                }
            }
        }
    }

    /// Backward pass over `n` samples: accumulates weight/bias gradients and
    /// writes the input gradient.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_batch(
        &self,
        weight: &[f64],
        input: &[f64],
        grad_out: &[f64],
        n: usize,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
        grad_in: &mut [f64],
    ) {
        let (in_len, plane) = (self.c_in * self.h * self.w, self.out_h() * self.out_w());
        let out_len = self.c_out * plane;
        let Some(group) = self.batch_group(n) else {
            for i in 0..n {
                self.backward(
                    weight,
                    &input[i * in_len..(i + 1) * in_len],
                    &grad_out[i * out_len..(i + 1) * out_len],
                    grad_weight,
                    grad_bias,
                    &mut grad_in[i * in_len..(i + 1) * in_len],
                );
            }
            return;
        };
        let kr = self.k_rows();
        let mut cols = vec![0.0; kr * group * plane];
        let mut gcols = vec![0.0; kr * group * plane];
        let mut g_mat = vec![0.0; self.c_out * group * plane];
        grad_in[..n * in_len].fill(0.0);
        for start in (0..n).step_by(group) {
            let g = group.min(n - start);
            let ncols = g * plane;
            for s in 0..g {
                let x = &input[(start + s) * in_len..(start + s + 1) * in_len];
                self.im2col(x, 0, self.out_h(), &mut cols, ncols, s * plane);
                let go = &grad_out[(start + s) * out_len..(start + s + 1) * out_len];
                for oc in 0..self.c_out {
                    let src = &go[oc * plane..(oc + 1) * plane];
                    g_mat[oc * ncols + s * plane..oc * ncols + (s + 1) * plane].copy_from_slice(src);
                    grad_bias[oc] += src.iter().sum::<f64>();
                }
            }
            // SAFETY: all matrices are row-major with the leading dimensions given.
            unsafe {
                // dW += G · colsᵀ
                matrixmultiply::dgemm(
                    self.c_out,
                    ncols,
                    kr,
                    1.0,
                    g_mat.as_ptr(),
                    ncols as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    ncols as isize,
                    1.0,
                    grad_weight.as_mut_ptr(),
                    kr as isize,
                    1,
                );
                // dcols = Wᵀ · G
                matrixmultiply::dgemm(
                    kr,
                    self.c_out,
                    ncols,
                    1.0,
                    weight.as_ptr(),
                    1,
                    kr as isize,
                    g_mat.as_ptr(),
                    ncols as isize,
                    1,
                    0.0,
                    gcols.as_mut_ptr(),
                    ncols as isize,
                    1,
                );
            }
            for s in 0..g {
                let gi = &mut grad_in[(start + s) * in_len..(start + s + 1) * in_len];
                self.col2im_add(&gcols, 0, self.out_h(), gi, ncols, s * plane);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn conv_oracle(g: &ConvGeom, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
        let (oh, ow, k, p) = (g.out_h(), g.out_w(), g.kernel, g.pad() as isize);
        let mut out = vec![0.0; g.c_out * oh * ow];
        for oc in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..g.c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * g.stride + ky) as isize - p;
                                let ix = (ox * g.stride + kx) as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += w[((oc * g.c_in + ic) * k + ky) * k + kx]
                                        * x[(ic * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, h, w) in [(3, 1, 7, 6), (3, 2, 8, 8), (9, 1, 5, 5), (1, 1, 4, 3), (3, 2, 7, 5)] {
            let g = ConvGeom {
                c_in: 2,
                c_out: 3,
                kernel: k,
                stride: s,
                h,
                w,
            };
            let wt = random(3 * 2 * k * k, &mut rng);
            let b = random(3, &mut rng);
            let x = random(2 * h * w, &mut rng);
            let mut out = vec![0.0; 3 * g.out_h() * g.out_w()];
            g.forward(&wt, &b, &x, &mut out);
            let expected = conv_oracle(&g, &wt, &b, &x);
            for (a, e) in out.iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_paths_match_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeom {
            c_in: 3,
            c_out: 4,
            kernel: 3,
            stride: 2,
            h: 9,
            w: 8,
        };
        let n = 5;
        let (in_len, out_len) = (3 * 9 * 8, 4 * g.out_h() * g.out_w());
        let wt = random(4 * 3 * 9, &mut rng);
        let b = random(4, &mut rng);
        let x = random(n * in_len, &mut rng);
        let go = random(n * out_len, &mut rng);
        let mut out = vec![0.0; n * out_len];
        g.forward_batch(&wt, &b, &x, n, &mut out);
        let (mut gw, mut gb, mut gx) = (vec![0.0; wt.len()], vec![0.0; 4], vec![0.0; x.len()]);
        g.backward_batch(&wt, &x, &go, n, &mut gw, &mut gb, &mut gx);
        let (mut gw1, mut gb1, mut gx1) = (vec![0.0; wt.len()], vec![0.0; 4], vec![0.0; x.len()]);
        for i in 0..n {
            let mut o = vec![0.0; out_len];
            g.forward(&wt, &b, &x[i * in_len..(i + 1) * in_len], &mut o);
            for (a, e) in out[i * out_len..(i + 1) * out_len].iter().zip(&o) {
                assert!((a - e).abs() < 1e-12);
            }
            g.backward(
                &wt,
                &x[i * in_len..(i + 1) * in_len],
                &go[i * out_len..(i + 1) * out_len],
                &mut gw1,
                &mut gb1,
                &mut gx1[i * in_len..(i + 1) * in_len],
            );
        }
        for (a, e) in gw.iter().chain(&gb).chain(&gx).zip(gw1.iter().chain(&gb1).chain(&gx1)) {
            assert!((a - e).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <G, conv(x)> is linear in x and w, so its gradients are exact.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeom {
            c_in: 2,
            c_out: 3,
            kernel: 3,
            stride: 2,
            h: 7,
            w: 6,
        };
        let wt = random(3 * 2 * 9, &mut rng);
        let b = vec![0.0; 3];
        let x = random(2 * 7 * 6, &mut rng);
        let go = random(3 * g.out_h() * g.out_w(), &mut rng);
        let mut gw = vec![0.0; wt.len()];
        let mut gb = vec![0.0; 3];
        let mut gx = vec![0.0; x.len()];
        g.backward(&wt, &x, &go, &mut gw, &mut gb, &mut gx);
        let objective = |wt: &[f64], x: &[f64]| {
            conv_oracle(&g, wt, &b, x)
                .iter()
                .zip(&go)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let base = objective(&wt, &x);
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1.0;
            assert!((objective(&wt, &xp) - base - gx[i]).abs() < 1e-10);
        }
        for i in 0..wt.len() {
            let mut wp = wt.clone();
            wp[i] += 1.0;
            assert!((objective(&wp, &x) - base - gw[i]).abs() < 1e-10);
        }
        let total: f64 = go.chunks(g.out_h() * g.out_w()).next().unwrap().iter().sum();
        assert!((gb[0] - total).abs() < 1e-12);
    }
}
