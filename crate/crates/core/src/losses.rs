//! Training losses and their gradients with respect to the SR image.
//!
//! * fidelity: ε-regularized `q`-quasi-norm (to the `q`-th power) of the
//!   pixel residual, `Σ (r² + ε)^{q/2}`;
//! * manifold: the same penalty on the difference of encoder outputs;
//! * perceptual: negative sum of uniform-window 5×5 SSIM over every
//!   overlapping window and channel;
//! * adversarial: discriminator gain `log(1 − D(sr)) + log D(hr)` and the
//!   non-saturating generator surrogate `−log D(sr)`.
//!
//! Batched losses are arithmetic means over the batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::nn::{Mode, Network, Tensor};

/// Parameters of the ε-regularized quasi-norm penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuasiNormSpec {
    pub q: f64,
    pub epsilon: f64,
}

pub const DEFAULT_EPSILON: f64 = 1e-3;

impl QuasiNormSpec {
    /// Validates `q ∈ (0, 2]`, `ε ≥ 0`, with `ε = 0` only for `q = 2`.
    pub fn new(q: f64, epsilon: f64) -> Result<Self> {
        let spec = Self { q, epsilon };
        spec.validate()?;
        if epsilon == 0.0 && q != 2.0 {
            return Err(Error::NonDifferentiable { q });
        }
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 2.0) {
            return Err(Error::invalid(format!("q = {} outside (0, 2]", self.q)));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("epsilon = {} must be >= 0", self.epsilon)));
        }
        Ok(())
    }
}

impl Default for QuasiNormSpec {
    fn default() -> Self {
        Self {
            q: 0.5,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Weights of the manifold, perceptual and adversarial terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(rename = "lambda_M")]
    pub manifold: f64,
    #[serde(rename = "lambda_S")]
    pub perceptual: f64,
    #[serde(rename = "lambda_D")]
    pub adversarial: f64,
}

impl LossWeights {
    pub fn new(manifold: f64, perceptual: f64, adversarial: f64) -> Result<Self> {
        let w = Self {
            manifold,
            perceptual,
            adversarial,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_M", self.manifold),
            ("lambda_S", self.perceptual),
            ("lambda_D", self.adversarial),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn zero() -> Self {
        Self {
            manifold: 0.0,
            perceptual: 0.0,
            adversarial: 0.0,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            manifold: 0.2,
            perceptual: 2.0,
            adversarial: 0.016,
        }
    }
}

fn check_finite(a: &[f64]) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("quasi-norm input"))
    }
}

#[inline]
fn penalty(r: f64, spec: &QuasiNormSpec) -> f64 {
    let s = r * r + spec.epsilon;
    if spec.q == 2.0 {
        s
    } else {
        s.powf(0.5 * spec.q)
    }
}

/// Per-residual influence `q·r·(r² + ε)^{q/2 − 1}`, the derivative of the penalty.
#[inline]
pub fn influence(r: f64, spec: &QuasiNormSpec) -> f64 {
    spec.q * r * (r * r + spec.epsilon).powf(0.5 * spec.q - 1.0)
}

/// `Σ_i (a_i² + ε)^{q/2}`.
pub fn quasi_norm_pow(a: &[f64], spec: &QuasiNormSpec) -> Result<f64> {
    spec.validate()?;
    check_finite(a)?;
    Ok(a.iter().map(|&r| penalty(r, spec)).sum())
}

/// Gradient of [`quasi_norm_pow`]; requires `ε > 0` unless `q = 2`.
pub fn quasi_norm_grad(a: &[f64], spec: &QuasiNormSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.epsilon == 0.0 && spec.q < 2.0 {
        return Err(Error::NonDifferentiable { q: spec.q });
    }
    check_finite(a)?;
    Ok(a.iter().map(|&r| influence(r, spec)).collect())
}

fn quasi_norm_residual(x: &[f64], y: &[f64], spec: &QuasiNormSpec, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let residual: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let value = quasi_norm_pow(&residual, spec)?;
    let grad = if want_grad {
        quasi_norm_grad(&residual, spec)?
    } else {
        Vec::new()
    };
    Ok((value, grad))
}

/// Robust pixel fidelity `‖sr − hr‖_{q,ε}^q`.
pub fn fidelity_loss(sr: &ImagePatch, hr: &ImagePatch, spec: &QuasiNormSpec) -> Result<f64> {
    sr.ensure_same_shape(hr)?;
    Ok(quasi_norm_residual(sr.as_planar(), hr.as_planar(), spec, false)?.0)
}

/// Fidelity loss and its gradient with respect to `sr` (planar layout).
pub fn fidelity_loss_grad(sr: &ImagePatch, hr: &ImagePatch, spec: &QuasiNormSpec) -> Result<(f64, Vec<f64>)> {
    sr.ensure_same_shape(hr)?;
    quasi_norm_residual(sr.as_planar(), hr.as_planar(), spec, true)
}

/// A differentiable map from images to a latent representation.
pub trait FeatureMap {
    /// Encodes a batch; the output holds one flattened representation per sample.
    fn encode(&self, x: &Tensor) -> Result<Tensor>;

    /// Vector-Jacobian product: pulls `grad_out` (shaped like `encode(x)`)
    /// back to the input.
    fn pullback(&self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor>;
}

impl FeatureMap for Network {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.ensure_usable_encoder()?;
        self.predict(x)
    }

    fn pullback(&self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        self.ensure_usable_encoder()?;
        let (_, tape) = self.forward(x, Mode::Eval)?;
        Ok(self.backward(&tape, grad_out)?.1)
    }
}

impl Network {
    fn ensure_usable_encoder(&self) -> Result<()> {
        if self.role == crate::nn::Role::Encoder && !self.pretrained {
            return Err(Error::invalid("encoder is untrained; pre-train the autoencoder first"));
        }
        Ok(())
    }
}

/// Robust manifold distance `‖E(sr) − E(hr)‖_{q,ε}^q`.
pub fn manifold_loss(sr: &ImagePatch, hr: &ImagePatch, encoder: &dyn FeatureMap, spec: &QuasiNormSpec) -> Result<f64> {
    sr.ensure_same_shape(hr)?;
    let (v, _) = manifold_loss_batch(&Tensor::from_patch(sr), &Tensor::from_patch(hr), encoder, spec, false)?;
    Ok(v)
}

/// Manifold loss and its gradient with respect to `sr` (planar layout).
pub fn manifold_loss_grad(
    sr: &ImagePatch,
    hr: &ImagePatch,
    encoder: &dyn FeatureMap,
    spec: &QuasiNormSpec,
) -> Result<(f64, Vec<f64>)> {
    sr.ensure_same_shape(hr)?;
    let (v, g) = manifold_loss_batch(&Tensor::from_patch(sr), &Tensor::from_patch(hr), encoder, spec, true)?;
    Ok((v, g.map(|t| t.data).unwrap_or_default()))
}

/// Batch-mean manifold loss; with `want_grad`, also the gradient with respect to `sr`.
pub fn manifold_loss_batch(
    sr: &Tensor,
    hr: &Tensor,
    encoder: &dyn FeatureMap,
    spec: &QuasiNormSpec,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    if sr.shape() != hr.shape() {
        return Err(Error::shape("sr and hr batches differ in shape"));
    }
    let e_sr = encoder.encode(sr)?;
    let e_hr = encoder.encode(hr)?;
    let n = sr.n as f64;
    let mut total = 0.0;
    let mut grad_latent = Tensor::zeros(e_sr.n, e_sr.c, e_sr.h, e_sr.w);
    for i in 0..sr.n {
        let (v, g) = quasi_norm_residual(e_sr.sample(i), e_hr.sample(i), spec, want_grad)?;
        total += v;
        if want_grad {
            for (d, s) in grad_latent.sample_mut(i).iter_mut().zip(&g) {
                *d = s / n;
            }
        }
    }
    let grad = if want_grad {
        Some(encoder.pullback(sr, &grad_latent)?)
    } else {
        None
    };
    Ok((total / n, grad))
}

/// SSIM stabilizing constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConstants {
    /// `(0.01·L)²` and `(0.03·L)²` with dynamic range `L = 1`.
    fn default() -> Self {
        Self {
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 5;

#[inline]
fn ssim_from_sums(sx: f64, sy: f64, sxx: f64, syy: f64, sxy: f64, n: f64, k: &SsimConstants) -> (f64, [f64; 6]) {
    let mx = sx / n;
    let my = sy / n;
    let vx = sxx / n - mx * mx;
    let vy = syy / n - my * my;
    let cxy = sxy / n - mx * my;
    let a1 = 2.0 * mx * my + k.c1;
    let a2 = 2.0 * cxy + k.c2;
    let b1 = mx * mx + my * my + k.c1;
    let b2 = vx + vy + k.c2;
    ((a1 * a2) / (b1 * b2), [mx, my, a1, a2, b1, b2])
}

/// SSIM of two equally sized windows with uniform weights.
pub fn ssim_window(x: &[f64], y: &[f64], c1: f64, c2: f64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape(format!(
            "ssim windows of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if !(c1 > 0.0 && c2 > 0.0) {
        return Err(Error::invalid("ssim constants must be positive"));
    }
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sx += a;
        sy += b;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    Ok(ssim_from_sums(sx, sy, sxx, syy, sxy, x.len() as f64, &SsimConstants { c1, c2 }).0)
}

/// Sums of `v` over every valid `SSIM_WINDOW²` window, `(h − 4) × (w − 4)` row-major.
fn window_sums(v: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &v[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = 0.0;
            for d in 0..k {
                acc += src[x + d];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for d in 0..k {
            let src = &rows[(y + d) * ow..(y + d + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += s;
            }
        }
    }
    out
}

/// Adjoint of [`window_sums`]: spreads each window value over its pixels.
fn window_spread(coeff: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for d in 0..k {
            let dst = &mut rows[(y + d) * ow..(y + d + 1) * ow];
            for (o, s) in dst.iter_mut().zip(&coeff[y * ow..(y + 1) * ow]) {
                *o += s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let src = &rows[y * ow..(y + 1) * ow];
        let dst = &mut out[y * w..(y + 1) * w];
        for (x, s) in src.iter().enumerate() {
            for d in 0..k {
                dst[x + d] += s;
            }
        }
    }
    out
}

/// SSIM of every overlapping 5×5 window of two planes, row-major.
pub fn ssim_map(x: &[f64], y: &[f64], h: usize, w: usize, k: &SsimConstants) -> Result<Vec<f64>> {
    Ok(ssim_plane(x, y, h, w, k, false)?.0)
}

fn ssim_plane(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    k: &SsimConstants,
    want_grad: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "{h}x{w} plane is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    if x.len() != h * w || y.len() != h * w {
        return Err(Error::shape("plane length does not match dimensions"));
    }
    let xx: Vec<f64> = x.iter().map(|a| a * a).collect();
    let yy: Vec<f64> = y.iter().map(|a| a * a).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (sx, sy) = (window_sums(x, h, w), window_sums(y, h, w));
    let (sxx, syy, sxy) = (window_sums(&xx, h, w), window_sums(&yy, h, w), window_sums(&xy, h, w));
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut map = Vec::with_capacity(sx.len());
    let (mut alpha, mut beta, mut gamma) = if want_grad {
        (vec![0.0; sx.len()], vec![0.0; sx.len()], vec![0.0; sx.len()])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..sx.len() {
        let (s, [mx, my, a1, a2, b1, b2]) = ssim_from_sums(sx[i], sy[i], sxx[i], syy[i], sxy[i], n, k);
        map.push(s);
        if want_grad {
            // ∂S/∂x_p = α + β·y_p + γ·x_p for every pixel p in the window
            let f = 2.0 * s / n;
            alpha[i] = f * (my / a1 - my / a2 - mx / b1 + mx / b2);
            beta[i] = f / a2;
            gamma[i] = -f / b2;
        }
    }
    if !want_grad {
        return Ok((map, Vec::new()));
    }
    let (ga, gb, gc) = (
        window_spread(&alpha, h, w),
        window_spread(&beta, h, w),
        window_spread(&gamma, h, w),
    );
    let grad = (0..h * w).map(|p| ga[p] + gb[p] * y[p] + gc[p] * x[p]).collect();
    Ok((map, grad))
}

/// Sum of 5×5 window SSIM over all windows and channels.
pub fn sssim(sr: &ImagePatch, hr: &ImagePatch) -> Result<f64> {
    sssim_with(sr, hr, &SsimConstants::default())
}

pub fn sssim_with(sr: &ImagePatch, hr: &ImagePatch, k: &SsimConstants) -> Result<f64> {
    sr.ensure_same_shape(hr)?;
    let mut total = 0.0;
    for c in 0..sr.channels() {
        let map = ssim_map(sr.channel(c), hr.channel(c), sr.height(), sr.width(), k)?;
        total += map.iter().sum::<f64>();
    }
    Ok(total)
}

/// sSSIM of one planar sample and its gradient with respect to `x`.
pub fn sssim_planar_grad(
    x: &[f64],
    y: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    k: &SsimConstants,
) -> Result<(f64, Vec<f64>)> {
    let plane = h * w;
    if x.len() != channels * plane || y.len() != channels * plane {
        return Err(Error::shape("planar sample length mismatch"));
    }
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(x.len());
    for c in 0..channels {
        let r = c * plane..(c + 1) * plane;
        let (map, g) = ssim_plane(&x[r.clone()], &y[r], h, w, k, true)?;
        total += map.iter().sum::<f64>();
        grad.extend(g);
    }
    Ok((total, grad))
}

/// Perceptual loss `−sSSIM(sr, hr)`.
pub fn perceptual_loss(sr: &ImagePatch, hr: &ImagePatch) -> Result<f64> {
    Ok(-sssim(sr, hr)?)
}

/// Perceptual loss and its gradient with respect to `sr` (planar layout).
pub fn perceptual_loss_grad(sr: &ImagePatch, hr: &ImagePatch) -> Result<(f64, Vec<f64>)> {
    sr.ensure_same_shape(hr)?;
    let (h, w, c) = sr.shape();
    let (s, g) = sssim_planar_grad(sr.as_planar(), hr.as_planar(), c, h, w, &SsimConstants::default())?;
    Ok((-s, g.into_iter().map(|v| -v).collect()))
}

/// Floor keeping discriminator probabilities away from {0, 1} before logs.
pub const PROBABILITY_FLOOR: f64 = 1e-7;

fn check_probability(p: f64, what: &str) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("{what} = {p} is not a probability")));
    }
    Ok(p.clamp(PROBABILITY_FLOOR, 1.0 - PROBABILITY_FLOOR))
}

/// Adversarial terms for one SR/HR pair of discriminator outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialTerms {
    /// Non-saturating generator loss `−log D(sr)`.
    pub gen_loss: f64,
    /// Discriminator gain `log(1 − D(sr)) + log D(hr)`.
    pub disc_gain: f64,
    /// `∂ gen_loss / ∂ D(sr)`
    pub d_gen_d_sr: f64,
    /// `∂ disc_gain / ∂ D(sr)`
    pub d_gain_d_sr: f64,
    /// `∂ disc_gain / ∂ D(hr)`
    pub d_gain_d_hr: f64,
}

pub fn adversarial_terms(d_sr: f64, d_hr: f64) -> Result<AdversarialTerms> {
    let ps = check_probability(d_sr, "D(sr)")?;
    let ph = check_probability(d_hr, "D(hr)")?;
    // derivatives vanish where the floor is active
    let live = |raw: f64, clamped: f64| raw == clamped;
    Ok(AdversarialTerms {
        gen_loss: -ps.ln(),
        disc_gain: (1.0 - ps).ln() + ph.ln(),
        d_gen_d_sr: if live(d_sr, ps) { -1.0 / ps } else { 0.0 },
        d_gain_d_sr: if live(d_sr, ps) { -1.0 / (1.0 - ps) } else { 0.0 },
        d_gain_d_hr: if live(d_hr, ph) { 1.0 / ph } else { 0.0 },
    })
}

/// Returns `(gen_loss, disc_gain)`.
pub fn adversarial_losses(d_sr: f64, d_hr: f64) -> Result<(f64, f64)> {
    let t = adversarial_terms(d_sr, d_hr)?;
    Ok((t.gen_loss, t.disc_gain))
}

/// Generator loss `−log D(sr)` alone and its derivative.
pub fn generator_adversarial(d_sr: f64) -> Result<(f64, f64)> {
    let t = adversarial_terms(d_sr, 0.5)?;
    Ok((t.gen_loss, t.d_gen_d_sr))
}

/// Per-component generator objective values (batch means).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneratorLosses {
    pub fidelity: f64,
    pub manifold: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
}

/// Everything the generator objective needs besides the generator itself.
pub struct ObjectiveContext<'a> {
    pub encoder: Option<&'a dyn FeatureMap>,
    pub discriminator: Option<&'a Network>,
    pub spec: QuasiNormSpec,
    pub weights: LossWeights,
    pub ssim: SsimConstants,
    /// Batch-norm mode of the discriminator.
    pub disc_mode: Mode,
}

impl<'a> ObjectiveContext<'a> {
    pub fn new(spec: QuasiNormSpec, weights: LossWeights) -> Self {
        Self {
            encoder: None,
            discriminator: None,
            spec,
            weights,
            ssim: SsimConstants::default(),
            disc_mode: Mode::Train,
        }
    }
}

/// Combined objective of a batch of SR outputs against HR targets and,
/// optionally, its gradient with respect to the SR batch.
pub fn objective_on_sr(
    sr: &Tensor,
    hr: &Tensor,
    ctx: &ObjectiveContext<'_>,
    want_grad: bool,
) -> Result<(GeneratorLosses, Option<Tensor>)> {
    if sr.shape() != hr.shape() {
        return Err(Error::shape(format!("sr {:?} vs hr {:?}", sr.shape(), hr.shape())));
    }
    if sr.n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let w = &ctx.weights;
    let n = sr.n as f64;
    let mut losses = GeneratorLosses::default();
    let mut grad = Tensor::zeros(sr.n, sr.c, sr.h, sr.w);

    for i in 0..sr.n {
        let (v, g) = quasi_norm_residual(sr.sample(i), hr.sample(i), &ctx.spec, want_grad)?;
        losses.fidelity += v / n;
        if want_grad {
            for (d, s) in grad.sample_mut(i).iter_mut().zip(&g) {
                *d += s / n;
            }
        }
    }

    if w.manifold > 0.0 {
        let encoder = ctx.encoder.ok_or(Error::EncoderRequired)?;
        let (v, g) = manifold_loss_batch(sr, hr, encoder, &ctx.spec, want_grad)?;
        losses.manifold = v;
        if let Some(g) = g {
            for (d, s) in grad.data.iter_mut().zip(&g.data) {
                *d += w.manifold * s;
            }
        }
    }

    if w.perceptual > 0.0 {
        for i in 0..sr.n {
            let (s, g) = sssim_planar_grad(sr.sample(i), hr.sample(i), sr.c, sr.h, sr.w, &ctx.ssim)?;
            losses.perceptual -= s / n;
            if want_grad {
                for (d, v) in grad.sample_mut(i).iter_mut().zip(&g) {
                    *d -= w.perceptual * v / n;
                }
            }
        }
    }

    if w.adversarial > 0.0 {
        let disc = ctx
            .discriminator
            .ok_or_else(|| Error::invalid("adversarial weight > 0 needs a discriminator"))?;
        let (probs, tape) = disc.forward(sr, ctx.disc_mode)?;
        let mut grad_probs = Tensor::zeros(probs.n, probs.c, probs.h, probs.w);
        for i in 0..sr.n {
            let (v, d) = generator_adversarial(probs.data[i])?;
            losses.adversarial += v / n;
            grad_probs.data[i] = w.adversarial * d / n;
        }
        if want_grad {
            let (_, g) = disc.backward(&tape, &grad_probs)?;
            for (d, s) in grad.data.iter_mut().zip(&g.data) {
                *d += s;
            }
        }
    }

    losses.total = losses.fidelity
        + w.manifold * losses.manifold
        + w.perceptual * losses.perceptual
        + w.adversarial * losses.adversarial;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite("generator objective"));
    }
    Ok((losses, want_grad.then_some(grad)))
}

/// Batch-mean generator objective
/// `L_F + λ_M·L_M + λ_S·L_S + λ_D·(−log D(G(lr)))`.
pub fn generator_objective(
    lr: &Tensor,
    hr: &Tensor,
    generator: &Network,
    gen_mode: Mode,
    ctx: &ObjectiveContext<'_>,
) -> Result<GeneratorLosses> {
    let (sr, _) = generator.forward(lr, gen_mode)?;
    Ok(objective_on_sr(&sr, hr, ctx, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(h: usize, w: usize, seed: u64) -> ImagePatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * 3).map(|_| rng.random_range(0.05..0.95)).collect();
        ImagePatch::from_planar(h, w, 3, data).unwrap()
    }

    fn spec(q: f64, eps: f64) -> QuasiNormSpec {
        QuasiNormSpec { q, epsilon: eps }
    }

    #[test]
    fn quasi_norm_examples() {
        assert_eq!(quasi_norm_pow(&[3.0, 4.0], &spec(2.0, 0.0)).unwrap(), 25.0);
        // scalar oracle: 3 · (1e-3)^(1/4)
        let expected = 3.0 * 1e-3f64.sqrt().sqrt();
        let got = quasi_norm_pow(&[0.0; 3], &spec(0.5, 1e-3)).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.5335).abs() < 1e-4);
        let near = quasi_norm_pow(&[1.0], &spec(0.5, 1e-300)).unwrap();
        assert!((near - 1.0).abs() < 1e-15);
        assert!(quasi_norm_pow(&[f64::NAN], &spec(0.5, 1e-3)).is_err());
        assert!(quasi_norm_pow(&[1.0], &spec(0.5, 1e-3)).unwrap() > 0.0);
    }

    #[test]
    fn quasi_norm_grad_examples() {
        assert_eq!(quasi_norm_grad(&[0.0; 4], &spec(0.5, 1e-3)).unwrap(), vec![0.0; 4]);
        assert_eq!(quasi_norm_grad(&[1.0], &spec(2.0, 1e-3)).unwrap(), vec![2.0]);
        let err = quasi_norm_grad(&[1.0], &spec(0.5, 0.0)).unwrap_err();
        assert!(err.to_string().contains("non-differentiable configuration"));
        assert!(QuasiNormSpec::new(0.5, 0.0).is_err());
        assert!(QuasiNormSpec::new(2.0, 0.0).is_ok());
        assert!(QuasiNormSpec::new(2.5, 1e-3).is_err());
        assert!(QuasiNormSpec::new(0.0, 1e-3).is_err());
    }

    #[test]
    fn quasi_norm_grad_matches_central_differences() {
        let s = spec(0.5, 1e-3);
        let a = [0.5, -0.25];
        let g = quasi_norm_grad(&a, &s).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let (mut p, mut m) = (a, a);
            p[i] += h;
            m[i] -= h;
            let fd = (quasi_norm_pow(&p, &s).unwrap() - quasi_norm_pow(&m, &s).unwrap()) / (2.0 * h);
            assert!(((fd - g[i]) / g[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn fidelity_examples() {
        let hr = random_patch(8, 8, 1);
        let s = spec(0.5, 1e-3);
        let floor = fidelity_loss(&hr, &hr, &s).unwrap();
        assert!((floor - 192.0 * 1e-3f64.powf(0.25)).abs() < 1e-12);

        let sr = random_patch(8, 8, 2);
        let sse: f64 = sr
            .as_planar()
            .iter()
            .zip(hr.as_planar())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let l2 = fidelity_loss(&sr, &hr, &spec(2.0, 0.0)).unwrap();
        assert!(((l2 - sse) / sse).abs() < 1e-12);

        // scalar-loop oracle
        let mut oracle = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let r = sr.get(y, x, c) - hr.get(y, x, c);
                    oracle += (r * r + 1e-3).powf(0.25);
                }
            }
        }
        assert!((fidelity_loss(&sr, &hr, &s).unwrap() - oracle).abs() < 1e-10);
        assert!(fidelity_loss(&sr, &random_patch(4, 8, 1), &s).is_err());
    }

    #[test]
    fn ssim_window_examples() {
        let k = SsimConstants::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
        assert_eq!(ssim_window(&x, &x, k.c1, k.c2).unwrap(), 1.0);

        let got = ssim_window(&[0.0; 25], &[1.0; 25], 1e-4, 9e-4).unwrap();
        assert!((got - 1e-4 / (1.0 + 1e-4)).abs() < 1e-15);

        let shifted: Vec<f64> = x.iter().map(|v| v + 0.1).collect();
        let got = ssim_window(&x, &shifted, k.c1, k.c2).unwrap();
        // direct formula evaluation
        let n = 25.0;
        let mx = x.iter().sum::<f64>() / n;
        let my = mx + 0.1;
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let expected = ((2.0 * mx * my + k.c1) * (2.0 * vx + k.c2)) / ((mx * mx + my * my + k.c1) * (2.0 * vx + k.c2));
        assert!(got < 1.0);
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(
            ssim_window(&x, &shifted, k.c1, k.c2).unwrap(),
            ssim_window(&shifted, &x, k.c1, k.c2).unwrap()
        );
        assert!(ssim_window(&x[..24], &x, k.c1, k.c2).is_err());
    }

    #[test]
    fn sssim_examples() {
        let p = random_patch(256, 256, 4);
        assert_eq!(sssim(&p, &p).unwrap(), 190512.0);
        assert_eq!(perceptual_loss(&p, &p).unwrap(), -190512.0);
        let small = random_patch(5, 5, 4);
        assert_eq!(sssim(&small, &small).unwrap(), 3.0);
        assert!(sssim(&random_patch(4, 4, 1), &random_patch(4, 4, 1)).is_err());
    }

    #[test]
    fn sssim_matches_nested_loop_oracle() {
        let a = random_patch(8, 8, 5);
        let b = random_patch(8, 8, 6);
        let k = SsimConstants::default();
        let mut oracle = 0.0;
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut wx = Vec::new();
                    let mut wy = Vec::new();
                    for dy in 0..5 {
                        for dx in 0..5 {
                            wx.push(a.get(i + dy, j + dx, c));
                            wy.push(b.get(i + dy, j + dx, c));
                        }
                    }
                    oracle += ssim_window(&wx, &wy, k.c1, k.c2).unwrap();
                }
            }
        }
        assert!((sssim(&a, &b).unwrap() - oracle).abs() < 1e-12);
        assert_eq!(perceptual_loss(&a, &b).unwrap(), perceptual_loss(&b, &a).unwrap());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn adversarial_examples() {
        let (g, d) = adversarial_losses(0.5, 0.5).unwrap();
        assert!((d - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((d + 1.3863).abs() < 1e-4);
        assert!((g - 0.6931).abs() < 1e-4);
        let (g, d) = adversarial_losses(0.0, 1.0).unwrap();
        assert!(d.abs() < 1e-6);
        assert!((g + PROBABILITY_FLOOR.ln()).abs() < 1e-12);
        let (g, _) = adversarial_losses(0.9, 0.5).unwrap();
        assert!((g + 0.9f64.ln()).abs() < 1e-15);
        assert!((g - 0.1054).abs() < 1e-4);
        assert!(adversarial_losses(1.2, 0.5).is_err());
        assert!(adversarial_losses(0.5, -0.1).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(0.2, 2.0, 0.016).is_ok());
        assert!(LossWeights::new(-1.0, 2.0, 0.016).is_err());
        assert!(LossWeights::new(0.0, f64::INFINITY, 0.0).is_err());
    }
}
