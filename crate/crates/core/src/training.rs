//! Autoencoder pre-training and alternating generator/discriminator training.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatchPair;
use crate::error::{Error, Result};
use crate::image::ImagePatch;
use crate::losses::{
    adversarial_terms, objective_on_sr, FeatureMap, GeneratorLosses, LossWeights, ObjectiveContext, QuasiNormSpec,
};
use crate::nn::{save_checkpoint, Mode, Network, Role, Tensor};
use crate::optim::{Adam, AdamParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub q: f64,
    pub epsilon: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_ae: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub seed: u64,
    pub disc_steps_per_gen_step: usize,
    pub ae_iterations: usize,
    pub ae_batch_size: usize,
    /// Zero disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            q: 0.5,
            epsilon: crate::losses::DEFAULT_EPSILON,
            weights: LossWeights::default(),
            batch_size: 16,
            iterations: 2000,
            lr_g: 1e-4,
            lr_d: 1e-4,
            lr_ae: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            seed: 0,
            disc_steps_per_gen_step: 1,
            ae_iterations: 300,
            ae_batch_size: 16,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        QuasiNormSpec::new(self.q, self.epsilon)?;
        self.weights.validate()?;
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("iterations", self.iterations),
            ("disc_steps_per_gen_step", self.disc_steps_per_gen_step),
            ("ae_batch_size", self.ae_batch_size),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("lr_G", self.lr_g),
            ("lr_D", self.lr_d),
            ("lr_AE", self.lr_ae),
            ("eps_adam", self.eps_adam),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} = {v} must be positive")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} = {v} must lie in [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> QuasiNormSpec {
        QuasiNormSpec {
            q: self.q,
            epsilon: self.epsilon,
        }
    }

    fn adam(&self, learning_rate: f64) -> AdamParams {
        AdamParams {
            learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_adam,
        }
    }
}

/// Seeded epoch-wise shuffled index batches; the last partial batch of an
/// epoch is topped up from the next epoch's order.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::invalid("batch sampler needs items and a positive batch size"));
        }
        let mut s = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..len).collect(),
            pos: 0,
            batch,
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// LR and HR tensors of one mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub lr: Tensor,
    pub hr: Tensor,
}

impl Batch {
    pub fn gather(pairs: &[PatchPair], indices: &[usize]) -> Result<Self> {
        Ok(Self {
            lr: Tensor::from_patches(indices.iter().map(|&i| &pairs[i].lr))?,
            hr: Tensor::from_patches(indices.iter().map(|&i| &pairs[i].hr))?,
        })
    }

    pub fn from_pairs(pairs: &[PatchPair]) -> Result<Self> {
        Self::gather(pairs, &(0..pairs.len()).collect::<Vec<_>>())
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Encoder and decoder parameter gradients.
type AeGrads = (Vec<f64>, Vec<f64>);

/// Mean squared reconstruction error of `decoder(encoder(x))` and its
/// gradients for both networks.
fn autoencoder_pass(
    encoder: &Network,
    decoder: &Network,
    x: &Tensor,
    want_grad: bool,
) -> Result<(f64, Option<AeGrads>)> {
    let (z, enc_tape) = encoder.forward(x, Mode::Train)?;
    let (y, dec_tape) = decoder.forward(&z, Mode::Train)?;
    let n = x.data.len() as f64;
    let mut grad = Tensor::zeros(y.n, y.c, y.h, y.w);
    let mut mse = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&y.data).zip(&x.data) {
        let r = a - b;
        mse += r * r;
        *g = 2.0 * r / n;
    }
    mse /= n;
    if !want_grad {
        return Ok((mse, None));
    }
    let (g_dec, g_z) = decoder.backward(&dec_tape, &grad)?;
    let (g_enc, _) = encoder.backward(&enc_tape, &g_z)?;
    Ok((mse, Some((g_enc, g_dec))))
}

/// Mean squared reconstruction error over `patches`.
pub fn reconstruction_mse(encoder: &Network, decoder: &Network, patches: &[ImagePatch]) -> Result<f64> {
    let x = Tensor::from_patches(patches)?;
    Ok(autoencoder_pass(encoder, decoder, &x, false)?.0)
}

#[derive(Debug, Clone)]
pub struct AutoencoderOutcome {
    pub encoder: Network,
    pub decoder: Network,
    /// Batch MSE before each update.
    pub loss_curve: Vec<f64>,
}

/// Trains `encoder` and `decoder` to reconstruct `train_hr` under MSE and
/// marks the encoder as pre-trained. Networks arrive initialized.
pub fn pretrain_autoencoder(
    train_hr: &[ImagePatch],
    mut encoder: Network,
    mut decoder: Network,
    cfg: &TrainConfig,
) -> Result<AutoencoderOutcome> {
    cfg.validate()?;
    if train_hr.is_empty() {
        return Err(Error::invalid("autoencoder pre-training needs at least one patch"));
    }
    if encoder.role != Role::Encoder || decoder.role != Role::Decoder {
        return Err(Error::invalid("pretrain_autoencoder expects an encoder and a decoder"));
    }
    let mut sampler = BatchSampler::new(train_hr.len(), cfg.ae_batch_size.min(train_hr.len()), cfg.seed)?;
    let mut opt_e = Adam::new(encoder.param_count(), cfg.adam(cfg.lr_ae));
    let mut opt_d = Adam::new(decoder.param_count(), cfg.adam(cfg.lr_ae));
    let mut curve = Vec::with_capacity(cfg.ae_iterations);
    for it in 0..cfg.ae_iterations {
        let idx = sampler.next_batch();
        let x = Tensor::from_patches(idx.iter().map(|&i| &train_hr[i]))?;
        let (mse, grads) = autoencoder_pass(&encoder, &decoder, &x, true)?;
        let (g_enc, g_dec) = grads.expect("requested");
        if !mse.is_finite() || !g_enc.iter().chain(&g_dec).all(|g| g.is_finite()) {
            return Err(Error::Divergence {
                iteration: it + 1,
                detail: format!("autoencoder reconstruction loss {mse}"),
            });
        }
        curve.push(mse);
        opt_e.step(&mut encoder.params, &g_enc)?;
        opt_d.step(&mut decoder.params, &g_dec)?;
    }
    encoder.pretrained = true;
    decoder.pretrained = true;
    Ok(AutoencoderOutcome {
        encoder,
        decoder,
        loss_curve: curve,
    })
}

/// Mean discriminator gain over a batch of SR and HR images.
pub fn disc_gain(discriminator: &Network, sr: &Tensor, hr: &Tensor, mode: Mode) -> Result<f64> {
    let d_sr = discriminator.forward(sr, mode)?.0;
    let d_hr = discriminator.forward(hr, mode)?.0;
    let mut gain = 0.0;
    for (a, b) in d_sr.data.iter().zip(&d_hr.data) {
        gain += adversarial_terms(*a, *b)?.disc_gain;
    }
    Ok(gain / sr.n as f64)
}

/// Gradient of the negated mean gain with respect to the discriminator parameters.
pub fn disc_gain_grad(
    discriminator: &Network,
    sr: &Tensor,
    hr: &Tensor,
) -> Result<(f64, Vec<f64>, [crate::nn::Tape; 2])> {
    let (d_sr, tape_sr) = discriminator.forward(sr, Mode::Train)?;
    let (d_hr, tape_hr) = discriminator.forward(hr, Mode::Train)?;
    let n = sr.n as f64;
    let mut g_sr = Tensor::zeros(d_sr.n, 1, 1, 1);
    let mut g_hr = Tensor::zeros(d_hr.n, 1, 1, 1);
    let mut gain = 0.0;
    for i in 0..sr.n {
        let t = adversarial_terms(d_sr.data[i], d_hr.data[i])?;
        gain += t.disc_gain / n;
        g_sr.data[i] = -t.d_gain_d_sr / n;
        g_hr.data[i] = -t.d_gain_d_hr / n;
    }
    let (mut grad, _) = discriminator.backward(&tape_sr, &g_sr)?;
    let (g2, _) = discriminator.backward(&tape_hr, &g_hr)?;
    add_into(&mut grad, &g2);
    Ok((gain, grad, [tape_sr, tape_hr]))
}

/// One ascent step on the discriminator gain; the generator is only read.
/// Returns the gain measured before the update.
pub fn train_step_discriminator(
    batch: &Batch,
    generator: &Network,
    discriminator: &mut Network,
    opt: &mut Adam,
) -> Result<f64> {
    let (sr, _) = generator.forward(&batch.lr, Mode::Train)?;
    let (gain, grad, tapes) = disc_gain_grad(discriminator, &sr, &batch.hr)?;
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("discriminator gradient"));
    }
    opt.step(&mut discriminator.params, &grad)?;
    for tape in &tapes {
        discriminator.update_running_stats(tape);
    }
    Ok(gain)
}

/// One descent step on the generator objective; encoder and discriminator
/// are only read. Returns the component losses before the update.
pub fn train_step_generator(
    batch: &Batch,
    generator: &mut Network,
    encoder: Option<&Network>,
    discriminator: Option<&Network>,
    opt: &mut Adam,
    cfg: &TrainConfig,
) -> Result<GeneratorLosses> {
    let (sr, tape) = generator.forward(&batch.lr, Mode::Train)?;
    let ctx = objective_context(encoder, discriminator, cfg);
    let (losses, grad_sr) = objective_on_sr(&sr, &batch.hr, &ctx, true)?;
    let (grad, _) = generator.backward(&tape, &grad_sr.expect("requested"))?;
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("generator gradient"));
    }
    opt.step(&mut generator.params, &grad)?;
    generator.update_running_stats(&tape);
    Ok(losses)
}

/// Objective context matching what [`train_step_generator`] optimizes.
pub fn objective_context<'a>(
    encoder: Option<&'a Network>,
    discriminator: Option<&'a Network>,
    cfg: &TrainConfig,
) -> ObjectiveContext<'a> {
    let mut ctx = ObjectiveContext::new(cfg.spec(), cfg.weights);
    ctx.encoder = encoder.map(|e| e as &dyn FeatureMap);
    ctx.discriminator = discriminator;
    ctx.disc_mode = Mode::Train;
    ctx
}

/// Per-iteration loss record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub l_f: f64,
    pub l_m: f64,
    pub l_s: f64,
    pub l_d_gen: f64,
    /// Mean discriminator gain over this iteration's discriminator steps.
    pub l_d_disc: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "iter,L_F,L_M,L_S,L_D_gen,L_D_disc,total";

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.iter, r.l_f, r.l_m, r.l_s, r.l_d_gen, r.l_d_disc, r.total
        )
        .unwrap();
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub generator: Network,
    pub discriminator: Network,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

/// Alternating training: `disc_steps_per_gen_step` discriminator steps, then
/// one generator step, for `iterations` rounds. With `λ_D = 0` the
/// discriminator is left untouched. Networks arrive initialized.
pub fn train(
    pairs: &[PatchPair],
    mut generator: Network,
    mut discriminator: Network,
    encoder: Option<&Network>,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::invalid("training needs at least one pair"));
    }
    if cfg.weights.manifold > 0.0 {
        match encoder {
            None => return Err(Error::EncoderRequired),
            Some(e) if !e.pretrained => return Err(Error::EncoderRequired),
            Some(_) => {}
        }
    }
    let adversarial = cfg.weights.adversarial > 0.0;
    let mut sampler = BatchSampler::new(pairs.len(), cfg.batch_size.min(pairs.len()), cfg.seed)?;
    let mut opt_g = Adam::new(generator.param_count(), cfg.adam(cfg.lr_g));
    let mut opt_d = Adam::new(discriminator.param_count(), cfg.adam(cfg.lr_d));
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    let diverged = |iteration: usize, e: Error| match e {
        Error::NonFinite(what) => Error::Divergence {
            iteration,
            detail: format!("non-finite {what}"),
        },
        other => other,
    };

    for it in 1..=cfg.iterations {
        let mut gain = 0.0;
        if adversarial {
            for _ in 0..cfg.disc_steps_per_gen_step {
                let batch = Batch::gather(pairs, &sampler.next_batch())?;
                gain += train_step_discriminator(&batch, &generator, &mut discriminator, &mut opt_d)
                    .map_err(|e| diverged(it, e))?;
            }
            gain /= cfg.disc_steps_per_gen_step as f64;
        }
        let batch = Batch::gather(pairs, &sampler.next_batch())?;
        let d = adversarial.then_some(&discriminator);
        let l =
            train_step_generator(&batch, &mut generator, encoder, d, &mut opt_g, cfg).map_err(|e| diverged(it, e))?;
        let row = LogRow {
            iter: it,
            l_f: l.fidelity,
            l_m: l.manifold,
            l_s: l.perceptual,
            l_d_gen: l.adversarial,
            l_d_disc: gain,
            total: l.total,
        };
        if ![row.l_f, row.l_m, row.l_s, row.l_d_gen, row.l_d_disc, row.total]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Divergence {
                iteration: it,
                detail: format!("{row:?}"),
            });
        }
        log.push(row);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it != cfg.iterations {
                checkpoints.extend(write_checkpoints(dir, &generator, &discriminator, Some(it))?);
            }
        }
    }
    if let Some(dir) = out_dir {
        checkpoints.extend(write_checkpoints(dir, &generator, &discriminator, None)?);
        std::fs::write(dir.join("train_log.csv"), log_to_csv(&log))?;
    }
    Ok(TrainOutcome {
        generator,
        discriminator,
        log,
        checkpoints,
    })
}

fn write_checkpoints(
    dir: &Path,
    generator: &Network,
    discriminator: &Network,
    iteration: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let (g, d) = match iteration {
        Some(i) => (
            dir.join("checkpoints").join(format!("generator_{i:06}.ckpt")),
            dir.join("checkpoints").join(format!("discriminator_{i:06}.ckpt")),
        ),
        None => (dir.join("generator.ckpt"), dir.join("discriminator.ckpt")),
    };
    if let Some(parent) = g.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(generator, &g)?;
    save_checkpoint(discriminator, &d)?;
    Ok(vec![g, d])
}

/// Generator output for each LR patch, in eval mode, processed in chunks.
pub fn super_resolve_patches(generator: &Network, lr: &[ImagePatch], chunk: usize) -> Result<Vec<ImagePatch>> {
    let mut out = Vec::with_capacity(lr.len());
    for group in lr.chunks(chunk.max(1)) {
        let y = generator.predict(&Tensor::from_patches(group)?)?;
        out.extend(y.to_patches()?);
    }
    Ok(out)
}

/// Super-resolves an image of any size that is a whole number of generator
/// input tiles. Tiles do not overlap: LR tile `(i, j)` covering rows
/// `i·t..(i+1)·t` and columns `j·t..(j+1)·t` lands at rows
/// `4·i·t..4·(i+1)·t` and columns `4·j·t..4·(j+1)·t` of the output.
pub fn super_resolve_tiled(generator: &Network, lr: &ImagePatch) -> Result<ImagePatch> {
    let [c, t, tw] = generator.input_shape;
    let (h, w, channels) = lr.shape();
    if channels != c || t != tw {
        return Err(Error::shape(format!(
            "generator expects {c}-channel {t}x{tw} tiles, input has {channels} channels"
        )));
    }
    if h % t != 0 || w % t != 0 {
        return Err(Error::shape(format!(
            "input {h}x{w} is not a whole number of {t}x{t} tiles"
        )));
    }
    let [_, oh, ow] = generator.output_shape();
    let scale = oh / t;
    let mut tiles = Vec::new();
    for i in 0..h / t {
        for j in 0..w / t {
            tiles.push(lr.crop(i * t, j * t, t, t)?);
        }
    }
    let sr = super_resolve_patches(generator, &tiles, 16)?;
    let (big_h, big_w) = (h * scale, w * scale);
    let mut data = vec![0.0; c * big_h * big_w];
    for (k, tile) in sr.iter().enumerate() {
        let (i, j) = (k / (w / t), k % (w / t));
        for ch in 0..c {
            let src = tile.channel(ch);
            for y in 0..oh {
                let row = ch * big_h * big_w + (i * oh + y) * big_w + j * ow;
                data[row..row + ow].copy_from_slice(&src[y * ow..(y + 1) * ow]);
            }
        }
    }
    ImagePatch::from_planar(big_h, big_w, c, data)
}

/// Trailing moving average over `window` entries ending at each index.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}
