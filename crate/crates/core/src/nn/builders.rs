use serde::{Deserialize, Serialize};

use super::{LayerSpec, Network, Role};
use crate::data::{HR_SIZE, LR_SIZE, SCALE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub res_blocks: usize,
    pub base_channels: usize,
    /// Kernel of the head and tail convolutions.
    pub outer_kernel: usize,
    pub lr_size: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            res_blocks: 8,
            base_channels: 64,
            outer_kernel: 9,
            lr_size: LR_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub base_channels: usize,
    pub downsamples: usize,
    pub input_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            downsamples: 2,
            input_size: HR_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub stages: usize,
    pub input_size: usize,
    pub channel_cap: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            stages: 5,
            input_size: HR_SIZE,
            channel_cap: 256,
        }
    }
}

fn residual_block(channels: usize, with_bn: bool) -> LayerSpec {
    let mut body = vec![LayerSpec::conv(channels, channels, 3, 1)];
    if with_bn {
        body.push(LayerSpec::BatchNorm { channels });
    }
    body.push(LayerSpec::Relu);
    body.push(LayerSpec::conv(channels, channels, 3, 1));
    if with_bn {
        body.push(LayerSpec::BatchNorm { channels });
    }
    LayerSpec::Residual { body }
}

/// LR → HR generator with 4× upscaling.
///
/// head conv + relu, a long skip around `res_blocks` residual blocks and a
/// conv + bn, two (upsample, conv, relu) stages, tail conv, smooth clamp.
pub fn generator_from(cfg: &GeneratorConfig) -> Result<Network> {
    if cfg.res_blocks < 1 || cfg.base_channels < 1 || cfg.lr_size == 0 {
        return Err(Error::invalid(format!("invalid generator config {cfg:?}")));
    }
    let b = cfg.base_channels;
    let mut trunk: Vec<LayerSpec> = (0..cfg.res_blocks).map(|_| residual_block(b, true)).collect();
    trunk.push(LayerSpec::conv(b, b, 3, 1));
    trunk.push(LayerSpec::BatchNorm { channels: b });
    let mut layers = vec![
        LayerSpec::conv(3, b, cfg.outer_kernel, 1),
        LayerSpec::Relu,
        LayerSpec::Residual { body: trunk },
    ];
    for _ in 0..SCALE.trailing_zeros() {
        layers.push(LayerSpec::Upsample2x);
        layers.push(LayerSpec::conv(b, b, 3, 1));
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::conv(b, 3, cfg.outer_kernel, 1));
    layers.push(LayerSpec::SmoothClamp);
    Network::new(Role::Generator, [3, cfg.lr_size, cfg.lr_size], layers)
}

/// Generator for 64×64 LR input. Requires `res_blocks ≥ 1`, `base_channels ≥ 8`.
pub fn build_generator(res_blocks: usize, base_channels: usize) -> Result<Network> {
    if base_channels < 8 {
        return Err(Error::invalid("generator base_channels must be >= 8"));
    }
    generator_from(&GeneratorConfig {
        res_blocks,
        base_channels,
        ..GeneratorConfig::default()
    })
}

fn encoder_channels(base: usize, level: usize) -> usize {
    base << level
}

/// Head conv + relu, then per level a stride-2 conv + relu + residual block.
/// The flattened output feature map is the manifold representation.
pub fn build_encoder(cfg: &EncoderConfig) -> Result<Network> {
    if cfg.downsamples < 1 || cfg.base_channels < 1 {
        return Err(Error::invalid(format!("invalid encoder config {cfg:?}")));
    }
    if !cfg.input_size.is_multiple_of(1 << cfg.downsamples) {
        return Err(Error::invalid(format!(
            "encoder input {} not divisible by 2^{}",
            cfg.input_size, cfg.downsamples
        )));
    }
    let b = cfg.base_channels;
    let mut layers = vec![LayerSpec::conv(3, b, 3, 1), LayerSpec::Relu];
    let mut c_prev = b;
    for level in 0..cfg.downsamples {
        let c = encoder_channels(b, level);
        layers.push(LayerSpec::conv(c_prev, c, 3, 2));
        layers.push(LayerSpec::Relu);
        layers.push(residual_block(c, false));
        c_prev = c;
    }
    Network::new(Role::Encoder, [3, cfg.input_size, cfg.input_size], layers)
}

/// Mirror of an encoder: per level (deepest first) an upsample + conv + relu
/// + residual block, then a conv to 3 channels and the smooth clamp.
pub fn build_decoder(encoder: &Network) -> Result<Network> {
    if encoder.role != Role::Encoder {
        return Err(Error::invalid(format!(
            "decoder must mirror an encoder, got {:?}",
            encoder.role
        )));
    }
    let mut levels = Vec::new();
    let mut head_channels = None;
    for layer in &encoder.layers {
        if let LayerSpec::Conv {
            c_in, c_out, stride, ..
        } = *layer
        {
            if stride == 2 {
                levels.push((c_in, c_out));
            } else if head_channels.is_none() {
                head_channels = Some(c_out);
            }
        }
    }
    let head = head_channels.ok_or_else(|| Error::invalid("encoder has no head conv"))?;
    if levels.is_empty() {
        return Err(Error::invalid("encoder has no downsampling levels"));
    }
    let [c, h, w] = encoder.output_shape();
    let mut layers = Vec::new();
    for &(c_in, c_out) in levels.iter().rev() {
        layers.push(LayerSpec::Upsample2x);
        layers.push(LayerSpec::conv(c_out, c_in, 3, 1));
        layers.push(LayerSpec::Relu);
        layers.push(residual_block(c_in, false));
    }
    layers.push(LayerSpec::conv(head, 3, 3, 1));
    layers.push(LayerSpec::SmoothClamp);
    Network::new(Role::Decoder, [c, h, w], layers)
}

/// Stride-2 conv + bn + leaky-relu stages, dense to one logit, sigmoid.
pub fn build_discriminator(cfg: &DiscriminatorConfig) -> Result<Network> {
    if cfg.base_channels < 1 || cfg.stages < 1 || cfg.channel_cap < cfg.base_channels {
        return Err(Error::invalid(format!("invalid discriminator config {cfg:?}")));
    }
    if !cfg.input_size.is_multiple_of(1 << cfg.stages) {
        return Err(Error::invalid(format!(
            "discriminator input {} not divisible by 2^{}",
            cfg.input_size, cfg.stages
        )));
    }
    let mut layers = Vec::new();
    let mut c_prev = 3;
    for stage in 0..cfg.stages {
        let c = (cfg.base_channels << stage).min(cfg.channel_cap);
        layers.push(LayerSpec::conv(c_prev, c, 3, 2));
        layers.push(LayerSpec::BatchNorm { channels: c });
        layers.push(LayerSpec::LeakyRelu { slope: 0.2 });
        c_prev = c;
    }
    let side = cfg.input_size >> cfg.stages;
    layers.push(LayerSpec::Dense {
        inputs: c_prev * side * side,
        outputs: 1,
    });
    layers.push(LayerSpec::Sigmoid);
    Network::new(Role::Discriminator, [3, cfg.input_size, cfg.input_size], layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mode, Tensor};

    fn conv_params(k: usize, c_in: usize, c_out: usize) -> usize {
        k * k * c_in * c_out + c_out
    }

    #[test]
    fn generator_parameter_count_closed_form() {
        let g = build_generator(1, 8).unwrap();
        let b = 8;
        let expected = conv_params(9, 3, b)
            + 2 * conv_params(3, b, b) + 2 * 2 * b // residual block
            + conv_params(3, b, b) + 2 * b // long-skip conv + bn
            + 2 * conv_params(3, b, b) // upsampling convs
            + conv_params(9, b, 3);
        assert_eq!(expected, 6867);
        assert_eq!(g.param_count(), expected);
    }

    #[test]
    fn generator_maps_lr_to_hr() {
        let g = build_generator(1, 8).unwrap();
        assert_eq!(g.input_shape, [3, 64, 64]);
        assert_eq!(g.output_shape(), [3, 256, 256]);
        // zero parameters: constant output
        let x = Tensor::from_vec(1, 3, 64, 64, (0..3 * 64 * 64).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let y = g.predict(&x).unwrap();
        assert_eq!(y.shape(), [1, 3, 256, 256]);
        assert!(y.data.iter().all(|v| *v == y.data[0]));
        assert!(build_generator(0, 8).is_err());
        assert!(build_generator(1, 4).is_err());
    }

    #[test]
    fn encoder_shape_chain() {
        let e = build_encoder(&EncoderConfig::default()).unwrap();
        assert_eq!(e.output_shape(), [64, 64, 64]);
        let e3 = build_encoder(&EncoderConfig {
            base_channels: 8,
            downsamples: 3,
            input_size: 64,
        })
        .unwrap();
        assert_eq!(e3.output_shape(), [32, 8, 8]);
        assert!(build_encoder(&EncoderConfig {
            base_channels: 8,
            downsamples: 0,
            input_size: 64
        })
        .is_err());
    }

    #[test]
    fn decoder_mirrors_encoder() {
        let e = build_encoder(&EncoderConfig {
            base_channels: 4,
            downsamples: 2,
            input_size: 16,
        })
        .unwrap();
        let d = build_decoder(&e).unwrap();
        assert_eq!(d.input_shape, e.output_shape());
        assert_eq!(d.output_shape(), e.input_shape);
        // each upsample stands in for one stride-2 conv; everything else pairs up
        let downs = e
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { stride: 2, .. }))
            .count();
        let ups = d.layers.iter().filter(|l| matches!(l, LayerSpec::Upsample2x)).count();
        assert_eq!(downs, ups);
        assert_eq!(d.layers.len() - ups, e.layers.len());
        assert!(build_decoder(&d).is_err());
    }

    #[test]
    fn discriminator_reaches_eight_by_eight() {
        let d = build_discriminator(&DiscriminatorConfig::default()).unwrap();
        let mut shape = d.input_shape;
        for l in &d.layers {
            if matches!(l, LayerSpec::Dense { .. }) {
                break;
            }
            shape = l.output_shape(shape).unwrap();
        }
        assert_eq!(&shape[1..], &[8, 8]);
        assert_eq!(d.output_shape(), [1, 1, 1]);
    }

    #[test]
    fn discriminator_outputs_probability() {
        let mut d = build_discriminator(&DiscriminatorConfig {
            base_channels: 8,
            stages: 5,
            input_size: 256,
            channel_cap: 16,
        })
        .unwrap();
        d.init(1);
        let x = Tensor::from_vec(1, 3, 256, 256, vec![0.3; 3 * 256 * 256]).unwrap();
        let p = d.forward(&x, Mode::Eval).unwrap().0.data[0];
        assert!(p > 0.0 && p < 1.0);
    }
}
