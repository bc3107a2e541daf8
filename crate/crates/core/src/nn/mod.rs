//! A small CPU neural-network engine: layer topologies stored as data, one
//! flat parameter vector per network, and hand-written backward passes.

mod builders;
mod checkpoint;
pub(crate) mod conv;
mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use builders::{
    build_decoder, build_discriminator, build_encoder, build_generator, generator_from, DiscriminatorConfig,
    EncoderConfig, GeneratorConfig,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use conv::ConvGeom;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Encoder,
    Decoder,
    Discriminator,
    Custom,
}

/// Batch-norm behaviour: batch statistics in `Train`, running statistics in `Eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One node of a network topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Zero-padded (`kernel / 2`) convolution.
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    /// Nearest-neighbour 2× upsampling.
    Upsample2x,
    Sigmoid,
    /// `0.5 + 0.5·tanh(2x)`: a smooth map onto `(0, 1)`.
    SmoothClamp,
    /// Fully connected layer over the flattened sample.
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// `x + body(x)`.
    Residual {
        body: Vec<LayerSpec>,
    },
}

impl LayerSpec {
    pub fn conv(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv {
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv {
                c_in, c_out, kernel, ..
            } => c_out * c_in * kernel * kernel + c_out,
            LayerSpec::BatchNorm { channels } => 2 * channels,
            LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
            LayerSpec::Residual { body } => body.iter().map(LayerSpec::param_count).sum(),
            _ => 0,
        }
    }

    pub fn buffer_count(&self) -> usize {
        match self {
            LayerSpec::BatchNorm { channels } => 2 * channels,
            LayerSpec::Residual { body } => body.iter().map(LayerSpec::buffer_count).sum(),
            _ => 0,
        }
    }

    /// Output `[C, H, W]` for an input of shape `shape`.
    pub fn output_shape(&self, shape: [usize; 3]) -> Result<[usize; 3]> {
        let [c, h, w] = shape;
        match *self {
            LayerSpec::Conv {
                c_in,
                c_out,
                kernel,
                stride,
            } => {
                if kernel % 2 == 0 || kernel == 0 {
                    return Err(Error::invalid(format!("conv kernel {kernel} must be odd")));
                }
                if !(stride == 1 || stride == 2) {
                    return Err(Error::invalid(format!("conv stride {stride} must be 1 or 2")));
                }
                if c != c_in {
                    return Err(Error::shape(format!("conv expects {c_in} channels, got {c}")));
                }
                let g = ConvGeom {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    h,
                    w,
                };
                Ok([c_out, g.out_h(), g.out_w()])
            }
            LayerSpec::BatchNorm { channels } => {
                if c != channels {
                    return Err(Error::shape(format!("bn expects {channels} channels, got {c}")));
                }
                Ok(shape)
            }
            LayerSpec::Upsample2x => Ok([c, 2 * h, 2 * w]),
            LayerSpec::Dense { inputs, outputs } => {
                if c * h * w != inputs {
                    return Err(Error::shape(format!(
                        "dense expects {inputs} inputs, got {}",
                        c * h * w
                    )));
                }
                Ok([outputs, 1, 1])
            }
            LayerSpec::Residual { ref body } => {
                let out = chain_shape(body, shape)?;
                if out != shape {
                    return Err(Error::shape(format!("residual body maps {shape:?} to {out:?}")));
                }
                Ok(shape)
            }
            LayerSpec::Relu | LayerSpec::LeakyRelu { .. } | LayerSpec::Sigmoid | LayerSpec::SmoothClamp => Ok(shape),
        }
    }
}

pub fn chain_shape(layers: &[LayerSpec], mut shape: [usize; 3]) -> Result<[usize; 3]> {
    for layer in layers {
        shape = layer.output_shape(shape)?;
    }
    Ok(shape)
}

/// Topology plus trainable parameters (`params`) and batch-norm running
/// statistics (`running`, mean then variance per layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub role: Role,
    /// `[C, H, W]` of one input sample.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub params: Vec<f64>,
    pub running: Vec<f64>,
    /// Set once an encoder has been fitted as part of an autoencoder.
    pub pretrained: bool,
}

enum Cache {
    Conv {
        offset: usize,
        geom: ConvGeom,
        input: Tensor,
    },
    BatchNorm {
        offset: usize,
        buffer: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch: Option<(Vec<f64>, Vec<f64>)>,
    },
    Relu {
        input: Tensor,
    },
    LeakyRelu {
        slope: f64,
        input: Tensor,
    },
    Upsample,
    Sigmoid {
        output: Tensor,
    },
    SmoothClamp {
        output: Tensor,
    },
    Dense {
        offset: usize,
        inputs: usize,
        outputs: usize,
        input: Tensor,
    },
    Residual {
        caches: Vec<Cache>,
    },
}

/// Intermediate values recorded by a forward pass, consumed by [`Network::backward`].
pub struct Tape {
    caches: Vec<Cache>,
    output_shape: [usize; 4],
    input_shape: [usize; 4],
}

#[derive(Default)]
struct Cursor {
    param: usize,
    buffer: usize,
}

impl Network {
    /// Builds a network with validated topology and zeroed parameters.
    pub fn new(role: Role, input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Result<Self> {
        chain_shape(&layers, input_shape)?;
        let params = vec![0.0; layers.iter().map(LayerSpec::param_count).sum()];
        let mut running = Vec::new();
        for layer in &layers {
            push_running_init(layer, &mut running);
        }
        Ok(Self {
            role,
            input_shape,
            layers,
            params,
            running,
            pretrained: false,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn output_shape(&self) -> [usize; 3] {
        chain_shape(&self.layers, self.input_shape).expect("validated at construction")
    }

    /// Fan-in scaled uniform weights, zero biases, unit BN scale. The last
    /// convolution inside every residual body starts at zero so each
    /// residual block is the identity at initialization.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cursor = 0;
        init_layers(&self.layers, &mut self.params, &mut cursor, &mut rng, false);
        self.running.clear();
        for layer in &self.layers {
            push_running_init(layer, &mut self.running);
        }
    }

    /// Randomizes every parameter (including zero-initialized ones and BN
    /// affine terms) uniformly in `[-scale, scale]`; used by gradient checks.
    pub fn randomize(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            *p = rng.random_range(-scale..scale);
        }
    }

    pub fn same_topology(&self, other: &Network) -> bool {
        self.role == other.role && self.input_shape == other.input_shape && self.layers == other.layers
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        if x.sample_shape() != self.input_shape {
            return Err(Error::shape(format!(
                "{:?} network expects input {:?}, got {:?}",
                self.role,
                self.input_shape,
                x.sample_shape()
            )));
        }
        if x.n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let mut caches = Vec::new();
        let mut cursor = Cursor::default();
        let out = forward_layers(
            &self.layers,
            &self.params,
            &self.running,
            &mut cursor,
            x.clone(),
            mode,
            &mut caches,
        )?;
        let tape = Tape {
            caches,
            output_shape: out.shape(),
            input_shape: x.shape(),
        };
        Ok((out, tape))
    }

    /// Eval-mode forward pass without keeping the tape.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }

    /// Back-propagates `grad_out`; returns (parameter gradient, input gradient).
    pub fn backward(&self, tape: &Tape, grad_out: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        if grad_out.shape() != tape.output_shape {
            return Err(Error::shape(format!(
                "gradient {:?} does not match output {:?}",
                grad_out.shape(),
                tape.output_shape
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let grad_in = backward_layers(&self.params, &tape.caches, grad_out.clone(), &mut grads);
        debug_assert_eq!(grad_in.shape(), tape.input_shape);
        Ok((grads, grad_in))
    }

    /// Folds the batch statistics of a train-mode tape into the running statistics.
    pub fn update_running_stats(&mut self, tape: &Tape) {
        update_running(&tape.caches, &mut self.running);
    }
}

fn push_running_init(layer: &LayerSpec, running: &mut Vec<f64>) {
    match layer {
        LayerSpec::BatchNorm { channels } => {
            running.extend(std::iter::repeat_n(0.0, *channels));
            running.extend(std::iter::repeat_n(1.0, *channels));
        }
        LayerSpec::Residual { body } => body.iter().for_each(|l| push_running_init(l, running)),
        _ => {}
    }
}

fn init_layers(
    layers: &[LayerSpec],
    params: &mut [f64],
    cursor: &mut usize,
    rng: &mut ChaCha8Rng,
    zero_last_conv: bool,
) {
    let last_conv = if zero_last_conv {
        layers.iter().rposition(|l| matches!(l, LayerSpec::Conv { .. }))
    } else {
        None
    };
    for (i, layer) in layers.iter().enumerate() {
        let n = layer.param_count();
        let slice = &mut params[*cursor..*cursor + n];
        match layer {
            LayerSpec::Conv {
                c_in, c_out, kernel, ..
            } => {
                let nw = c_out * c_in * kernel * kernel;
                if Some(i) == last_conv {
                    slice.fill(0.0);
                } else {
                    let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
                    for w in &mut slice[..nw] {
                        *w = rng.random_range(-bound..bound);
                    }
                    slice[nw..].fill(0.0);
                }
            }
            LayerSpec::BatchNorm { channels } => {
                slice[..*channels].fill(1.0);
                slice[*channels..].fill(0.0);
            }
            LayerSpec::Dense { inputs, outputs } => {
                let bound = 1.0 / (*inputs as f64).sqrt();
                for w in &mut slice[..inputs * outputs] {
                    *w = rng.random_range(-bound..bound);
                }
                slice[inputs * outputs..].fill(0.0);
            }
            LayerSpec::Residual { body } => {
                let mut inner = *cursor;
                init_layers(body, params, &mut inner, rng, true);
            }
            _ => {}
        }
        *cursor += n;
    }
}

fn forward_layers(
    layers: &[LayerSpec],
    params: &[f64],
    running: &[f64],
    cursor: &mut Cursor,
    mut x: Tensor,
    mode: Mode,
    caches: &mut Vec<Cache>,
) -> Result<Tensor> {
    for layer in layers {
        x = match *layer {
            LayerSpec::Conv {
                c_in,
                c_out,
                kernel,
                stride,
            } => {
                let geom = ConvGeom {
                    c_in,
                    c_out,
                    kernel,
                    stride,
                    h: x.h,
                    w: x.w,
                };
                let offset = cursor.param;
                let nw = c_out * c_in * kernel * kernel;
                let (wt, bias) = (&params[offset..offset + nw], &params[offset + nw..offset + nw + c_out]);
                let mut out = Tensor::zeros(x.n, c_out, geom.out_h(), geom.out_w());
                geom.forward_batch(wt, bias, &x.data, x.n, &mut out.data);
                cursor.param += layer.param_count();
                caches.push(Cache::Conv { offset, geom, input: x });
                out
            }
            LayerSpec::BatchNorm { channels } => {
                let offset = cursor.param;
                let buffer = cursor.buffer;
                let gamma = &params[offset..offset + channels];
                let beta = &params[offset + channels..offset + 2 * channels];
                let plane = x.h * x.w;
                let m = (x.n * plane) as f64;
                let (mean, var, batch) = match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0; channels];
                        let mut var = vec![0.0; channels];
                        for c in 0..channels {
                            let mut s = 0.0;
                            for i in 0..x.n {
                                s += x.plane(i, c).iter().sum::<f64>();
                            }
                            let mu = s / m;
                            let mut ss = 0.0;
                            for i in 0..x.n {
                                ss += x.plane(i, c).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                            }
                            mean[c] = mu;
                            var[c] = ss / m;
                        }
                        (mean.clone(), var.clone(), Some((mean, var)))
                    }
                    Mode::Eval => (
                        running[buffer..buffer + channels].to_vec(),
                        running[buffer + channels..buffer + 2 * channels].to_vec(),
                        None,
                    ),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = x;
                let mut out = Tensor::zeros(xhat.n, xhat.c, xhat.h, xhat.w);
                for i in 0..xhat.n {
                    for c in 0..channels {
                        let start = (i * channels + c) * plane;
                        let xs = &mut xhat.data[start..start + plane];
                        let os = &mut out.data[start..start + plane];
                        for (xv, ov) in xs.iter_mut().zip(os.iter_mut()) {
                            *xv = (*xv - mean[c]) * inv_std[c];
                            *ov = gamma[c] * *xv + beta[c];
                        }
                    }
                }
                cursor.param += 2 * channels;
                cursor.buffer += 2 * channels;
                caches.push(Cache::BatchNorm {
                    offset,
                    buffer,
                    xhat,
                    inv_std,
                    batch,
                });
                out
            }
            LayerSpec::Relu => {
                let mut out = x.clone();
                out.data.iter_mut().for_each(|v| *v = v.max(0.0));
                caches.push(Cache::Relu { input: x });
                out
            }
            LayerSpec::LeakyRelu { slope } => {
                let mut out = x.clone();
                out.data
                    .iter_mut()
                    .for_each(|v| *v = if *v > 0.0 { *v } else { slope * *v });
                caches.push(Cache::LeakyRelu { slope, input: x });
                out
            }
            LayerSpec::Upsample2x => {
                let (h, w) = (x.h, x.w);
                let mut out = Tensor::zeros(x.n, x.c, 2 * h, 2 * w);
                for p in 0..x.n * x.c {
                    let src = &x.data[p * h * w..(p + 1) * h * w];
                    let dst = &mut out.data[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
                        let drow = &mut dst[y * 2 * w..(y + 1) * 2 * w];
                        for (x2, d) in drow.iter_mut().enumerate() {
                            *d = srow[x2 / 2];
                        }
                    }
                }
                caches.push(Cache::Upsample);
                out
            }
            LayerSpec::Sigmoid => {
                let mut out = x;
                out.data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
                caches.push(Cache::Sigmoid { output: out.clone() });
                out
            }
            LayerSpec::SmoothClamp => {
                let mut out = x;
                out.data.iter_mut().for_each(|v| *v = 0.5 + 0.5 * (2.0 * *v).tanh());
                caches.push(Cache::SmoothClamp { output: out.clone() });
                out
            }
            LayerSpec::Dense { inputs, outputs } => {
                let offset = cursor.param;
                let wt = &params[offset..offset + inputs * outputs];
                let bias = &params[offset + inputs * outputs..offset + inputs * outputs + outputs];
                let mut out = Tensor::zeros(x.n, outputs, 1, 1);
                for i in 0..x.n {
                    let xi = x.sample(i);
                    let oi = out.sample_mut(i);
                    for (o, ov) in oi.iter_mut().enumerate() {
                        let row = &wt[o * inputs..(o + 1) * inputs];
                        *ov = bias[o] + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                cursor.param += layer.param_count();
                caches.push(Cache::Dense {
                    offset,
                    inputs,
                    outputs,
                    input: x,
                });
                out
            }
            LayerSpec::Residual { ref body } => {
                let mut inner = Vec::new();
                let mut y = forward_layers(body, params, running, cursor, x.clone(), mode, &mut inner)?;
                for (a, b) in y.data.iter_mut().zip(&x.data) {
                    *a += b;
                }
                caches.push(Cache::Residual { caches: inner });
                y
            }
        };
    }
    Ok(x)
}

fn backward_layers(params: &[f64], caches: &[Cache], mut grad: Tensor, grads: &mut [f64]) -> Tensor {
    for cache in caches.iter().rev() {
        grad = match cache {
            Cache::Conv { offset, geom, input } => {
                let nw = geom.c_out * geom.c_in * geom.kernel * geom.kernel;
                let wt = &params[*offset..*offset + nw];
                let mut gin = Tensor::zeros(input.n, input.c, input.h, input.w);
                let (gw, gb) = grads[*offset..*offset + nw + geom.c_out].split_at_mut(nw);
                geom.backward_batch(wt, &input.data, &grad.data, input.n, gw, gb, &mut gin.data);
                gin
            }
            Cache::BatchNorm {
                offset,
                xhat,
                inv_std,
                batch,
                ..
            } => {
                let channels = inv_std.len();
                let gamma = &params[*offset..*offset + channels];
                let plane = xhat.h * xhat.w;
                let m = (xhat.n * plane) as f64;
                let mut gin = Tensor::zeros(xhat.n, xhat.c, xhat.h, xhat.w);
                for c in 0..channels {
                    let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                    for i in 0..xhat.n {
                        let start = (i * channels + c) * plane;
                        for (g, xh) in grad.data[start..start + plane]
                            .iter()
                            .zip(&xhat.data[start..start + plane])
                        {
                            sum_g += g;
                            sum_gx += g * xh;
                        }
                    }
                    grads[*offset + c] += sum_gx;
                    grads[*offset + channels + c] += sum_g;
                    let k = gamma[c] * inv_std[c];
                    for i in 0..xhat.n {
                        let start = (i * channels + c) * plane;
                        let gs = &grad.data[start..start + plane];
                        let xs = &xhat.data[start..start + plane];
                        let os = &mut gin.data[start..start + plane];
                        if batch.is_some() {
                            for ((o, g), xh) in os.iter_mut().zip(gs).zip(xs) {
                                *o = k * (g - sum_g / m - xh * sum_gx / m);
                            }
                        } else {
                            for (o, g) in os.iter_mut().zip(gs) {
                                *o = k * g;
                            }
                        }
                    }
                }
                gin
            }
            Cache::Relu { input } => {
                for (g, x) in grad.data.iter_mut().zip(&input.data) {
                    if *x <= 0.0 {
                        *g = 0.0;
                    }
                }
                grad
            }
            Cache::LeakyRelu { slope, input } => {
                for (g, x) in grad.data.iter_mut().zip(&input.data) {
                    if *x <= 0.0 {
                        *g *= slope;
                    }
                }
                grad
            }
            Cache::Upsample => {
                let (h, w) = (grad.h / 2, grad.w / 2);
                let mut gin = Tensor::zeros(grad.n, grad.c, h, w);
                for p in 0..grad.n * grad.c {
                    let src = &grad.data[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gin.data[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                        }
                    }
                }
                gin
            }
            Cache::Sigmoid { output } => {
                for (g, s) in grad.data.iter_mut().zip(&output.data) {
                    *g *= s * (1.0 - s);
                }
                grad
            }
            Cache::SmoothClamp { output } => {
                for (g, y) in grad.data.iter_mut().zip(&output.data) {
                    let t = 2.0 * y - 1.0;
                    *g *= 1.0 - t * t;
                }
                grad
            }
            Cache::Dense {
                offset,
                inputs,
                outputs,
                input,
            } => {
                let (inputs, outputs) = (*inputs, *outputs);
                let wt = &params[*offset..*offset + inputs * outputs];
                let mut gin = Tensor::zeros(input.n, input.c, input.h, input.w);
                for i in 0..input.n {
                    let xi = input.sample(i);
                    let gi = grad.sample(i);
                    let gx = gin.sample_mut(i);
                    for o in 0..outputs {
                        let g = gi[o];
                        grads[*offset + inputs * outputs + o] += g;
                        let gw = &mut grads[*offset + o * inputs..*offset + (o + 1) * inputs];
                        for (w, x) in gw.iter_mut().zip(xi) {
                            *w += g * x;
                        }
                        for (gxv, w) in gx.iter_mut().zip(&wt[o * inputs..(o + 1) * inputs]) {
                            *gxv += g * w;
                        }
                    }
                }
                gin
            }
            Cache::Residual { caches } => {
                let mut body = backward_layers(params, caches, grad.clone(), grads);
                for (a, b) in body.data.iter_mut().zip(&grad.data) {
                    *a += b;
                }
                body
            }
        };
    }
    grad
}

fn update_running(caches: &[Cache], running: &mut [f64]) {
    for cache in caches {
        match cache {
            Cache::BatchNorm {
                buffer,
                batch: Some((mean, var)),
                xhat,
                ..
            } => {
                let channels = mean.len();
                let m = (xhat.n * xhat.h * xhat.w) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                for c in 0..channels {
                    let rm = &mut running[buffer + c];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[c];
                    let rv = &mut running[buffer + channels + c];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[c] * unbias;
                }
            }
            Cache::Residual { caches } => update_running(caches, running),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    #[test]
    fn topology_validation() {
        assert!(Network::new(Role::Custom, [3, 8, 8], vec![LayerSpec::conv(3, 4, 2, 1)]).is_err());
        assert!(Network::new(Role::Custom, [3, 8, 8], vec![LayerSpec::conv(3, 4, 3, 3)]).is_err());
        assert!(Network::new(Role::Custom, [3, 8, 8], vec![LayerSpec::conv(2, 4, 3, 1)]).is_err());
        let bad_residual = LayerSpec::Residual {
            body: vec![LayerSpec::conv(3, 4, 3, 1)],
        };
        assert!(Network::new(Role::Custom, [3, 8, 8], vec![bad_residual]).is_err());
    }

    #[test]
    fn batchnorm_train_mode_centers_channels() {
        let mut net = Network::new(Role::Custom, [2, 4, 4], vec![LayerSpec::BatchNorm { channels: 2 }]).unwrap();
        net.init(0);
        let one = random_tensor(1, 2, 4, 4, 3);
        let mut batch = Tensor::zeros(3, 2, 4, 4);
        for i in 0..3 {
            batch.sample_mut(i).copy_from_slice(one.sample(0));
        }
        let (out, tape) = net.forward(&batch, Mode::Train).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..3).map(|i| out.plane(i, c).iter().sum::<f64>()).sum::<f64>() / 48.0;
            assert!(mean.abs() < 1e-12);
        }
        let before = net.running.clone();
        net.update_running_stats(&tape);
        assert_ne!(before, net.running);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut net = build_discriminator(&DiscriminatorConfig {
            base_channels: 8,
            stages: 2,
            input_size: 16,
            channel_cap: 32,
        })
        .unwrap();
        net.init(4);
        let x = random_tensor(2, 3, 16, 16, 1);
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let net = build_generator(1, 8).unwrap();
        let x = Tensor::zeros(1, 3, 32, 32);
        assert!(net.forward(&x, Mode::Eval).is_err());
    }

    #[test]
    fn residual_block_is_identity_at_init() {
        let layers = vec![LayerSpec::Residual {
            body: vec![
                LayerSpec::conv(4, 4, 3, 1),
                LayerSpec::BatchNorm { channels: 4 },
                LayerSpec::Relu,
                LayerSpec::conv(4, 4, 3, 1),
                LayerSpec::BatchNorm { channels: 4 },
            ],
        }];
        let mut net = Network::new(Role::Custom, [4, 6, 6], layers).unwrap();
        net.init(9);
        let x = random_tensor(2, 4, 6, 6, 5);
        for mode in [Mode::Train, Mode::Eval] {
            let (y, _) = net.forward(&x, mode).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn single_conv_matches_direct_oracle() {
        let mut net = Network::new(Role::Custom, [2, 5, 5], vec![LayerSpec::conv(2, 1, 3, 1)]).unwrap();
        net.randomize(3, 1.0);
        let x = random_tensor(1, 2, 5, 5, 8);
        let y = net.predict(&x).unwrap();
        for oy in 0..5 {
            for ox in 0..5 {
                let mut acc = net.params[18];
                for ic in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                acc += net.params[(ic * 3 + ky) * 3 + kx]
                                    * x.data[(ic * 5 + iy as usize) * 5 + ix as usize];
                            }
                        }
                    }
                }
                assert!((y.data[oy * 5 + ox] - acc).abs() < 1e-12);
            }
        }
    }
}
