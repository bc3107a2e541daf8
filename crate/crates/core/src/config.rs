//! Run configuration: TOML sections merged over a preset, with command-line
//! overrides taking precedence over the file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{default_corruption_menu, CorruptionTarget, Geometry, ManifestOptions};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::{DiscriminatorConfig, EncoderConfig, GeneratorConfig};
use crate::training::TrainConfig;

/// Environment variable naming a config file used when none is given.
pub const CONFIG_ENV: &str = "ROBUSTSR_CONFIG";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
/// Largest seed a TOML integer can hold.
pub const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub hr_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub corrupted_fraction: f64,
    pub lr_blur_sigma: f64,
    pub corruption_target: CorruptionTarget,
    /// Seeds the train/test split and the corruption draws.
    pub seed: u64,
    pub patch_stride: usize,
    /// Zero keeps every patch of a source image.
    pub patches_per_source: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub gen_res_blocks: usize,
    pub gen_base_channels: usize,
    pub gen_outer_kernel: usize,
    pub enc_base_channels: usize,
    pub enc_downsamples: usize,
    pub disc_base_channels: usize,
    pub disc_stages: usize,
    pub disc_channel_cap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub q: f64,
    pub epsilon: f64,
    #[serde(rename = "lambda_M")]
    pub lambda_m: f64,
    #[serde(rename = "lambda_S")]
    pub lambda_s: f64,
    #[serde(rename = "lambda_D")]
    pub lambda_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(rename = "lr_G")]
    pub lr_g: f64,
    #[serde(rename = "lr_D")]
    pub lr_d: f64,
    #[serde(rename = "lr_AE")]
    pub lr_ae: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub batch_size: usize,
    pub iterations: usize,
    pub ae_iterations: usize,
    pub ae_batch_size: usize,
    pub disc_steps_per_gen_step: usize,
    pub checkpoint_every: usize,
    /// Seeds network initialization and batching.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    CorruptionFraction,
    Q,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::CorruptionFraction => "corruption_fraction",
            SweepAxis::Q => "q",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "corruption_fraction" | "corruption" | "fraction" => Ok(SweepAxis::CorruptionFraction),
            "q" => Ok(SweepAxis::Q),
            other => Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected `corruption_fraction` or `q`)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub methods: Vec<String>,
    /// Corrupted fraction held fixed on the `q` axis.
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub ms_scales: usize,
}

/// Every tunable of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub optimizer: OptimizerSection,
    pub schedule: ScheduleSection,
    pub sweep: SweepSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    /// Full-size settings: 256×256 HR patches, 2000/2000 split.
    fn default() -> Self {
        let train = TrainConfig::default();
        let weights = LossWeights::default();
        let g = GeneratorConfig::default();
        let e = EncoderConfig::default();
        let d = DiscriminatorConfig::default();
        Self {
            data: DataSection {
                hr_size: crate::data::HR_SIZE,
                train_count: 2000,
                test_count: 2000,
                corrupted_fraction: 0.0,
                lr_blur_sigma: crate::data::DEFAULT_LR_BLUR_SIGMA,
                corruption_target: CorruptionTarget::Hr,
                seed: 0,
                patch_stride: crate::data::HR_SIZE,
                patches_per_source: 0,
            },
            model: ModelSection {
                gen_res_blocks: g.res_blocks,
                gen_base_channels: g.base_channels,
                gen_outer_kernel: g.outer_kernel,
                enc_base_channels: e.base_channels,
                enc_downsamples: e.downsamples,
                disc_base_channels: d.base_channels,
                disc_stages: d.stages,
                disc_channel_cap: d.channel_cap,
            },
            loss: LossSection {
                q: train.q,
                epsilon: train.epsilon,
                lambda_m: weights.manifold,
                lambda_s: weights.perceptual,
                lambda_d: weights.adversarial,
            },
            optimizer: OptimizerSection {
                lr_g: train.lr_g,
                lr_d: train.lr_d,
                lr_ae: train.lr_ae,
                beta1: train.beta1,
                beta2: train.beta2,
                eps_adam: train.eps_adam,
            },
            schedule: ScheduleSection {
                batch_size: train.batch_size,
                iterations: train.iterations,
                ae_iterations: train.ae_iterations,
                ae_batch_size: train.ae_batch_size,
                disc_steps_per_gen_step: train.disc_steps_per_gen_step,
                checkpoint_every: train.checkpoint_every,
                seed: train.seed,
            },
            sweep: SweepSection {
                axis: SweepAxis::CorruptionFraction,
                values: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
                methods: vec!["SRGAN_E".into(), "SRGAN_QE".into(), "SRGAN_SQE".into()],
                fraction: 0.3,
            },
            metrics: MetricsSection {
                ms_scales: crate::metrics::DEFAULT_MS_SCALES,
            },
        }
    }
}

impl RunConfig {
    /// CPU-sized settings: 32×32 HR patches, 64/16 split, small networks,
    /// three metric scales.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.data.hr_size = 32;
        c.data.train_count = 64;
        c.data.test_count = 16;
        c.data.patch_stride = 32;
        c.model = ModelSection {
            gen_res_blocks: 2,
            gen_base_channels: 16,
            gen_outer_kernel: 5,
            enc_base_channels: 8,
            enc_downsamples: 2,
            disc_base_channels: 8,
            disc_stages: 3,
            disc_channel_cap: 32,
        };
        c.optimizer.lr_g = 1e-3;
        c.optimizer.lr_d = 1e-4;
        c.schedule.iterations = 200;
        c.schedule.ae_iterations = 300;
        c.schedule.checkpoint_every = 100;
        c.metrics.ms_scales = 3;
        c
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.data.hr_size)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            manifold: self.loss.lambda_m,
            perceptual: self.loss.lambda_s,
            adversarial: self.loss.lambda_d,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            q: self.loss.q,
            epsilon: self.loss.epsilon,
            weights: self.weights(),
            batch_size: self.schedule.batch_size,
            iterations: self.schedule.iterations,
            lr_g: self.optimizer.lr_g,
            lr_d: self.optimizer.lr_d,
            lr_ae: self.optimizer.lr_ae,
            beta1: self.optimizer.beta1,
            beta2: self.optimizer.beta2,
            eps_adam: self.optimizer.eps_adam,
            seed: self.schedule.seed,
            disc_steps_per_gen_step: self.schedule.disc_steps_per_gen_step,
            ae_iterations: self.schedule.ae_iterations,
            ae_batch_size: self.schedule.ae_batch_size,
            checkpoint_every: self.schedule.checkpoint_every,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            res_blocks: self.model.gen_res_blocks,
            base_channels: self.model.gen_base_channels,
            outer_kernel: self.model.gen_outer_kernel,
            lr_size: self.data.hr_size / crate::data::SCALE,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            base_channels: self.model.enc_base_channels,
            downsamples: self.model.enc_downsamples,
            input_size: self.data.hr_size,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: self.model.disc_base_channels,
            stages: self.model.disc_stages,
            input_size: self.data.hr_size,
            channel_cap: self.model.disc_channel_cap,
        }
    }

    pub fn manifest_options(&self) -> Result<ManifestOptions> {
        Ok(ManifestOptions {
            corrupted_fraction: self.data.corrupted_fraction,
            corruption_menu: default_corruption_menu(),
            train_count: self.data.train_count,
            test_count: self.data.test_count,
            seed: self.data.seed,
            geometry: self.geometry()?,
            lr_blur_sigma: self.data.lr_blur_sigma,
            corruption_target: self.data.corruption_target,
        })
    }

    /// Range checks that the type system does not express.
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.geometry().map_err(wrap)?;
        self.train_config().validate().map_err(wrap)?;
        if !(0.0..=1.0).contains(&self.data.corrupted_fraction) {
            return Err(Error::Config(format!(
                "data.corrupted_fraction = {} outside [0, 1]",
                self.data.corrupted_fraction
            )));
        }
        for (name, seed) in [("data.seed", self.data.seed), ("schedule.seed", self.schedule.seed)] {
            if seed > MAX_SEED {
                return Err(Error::Config(format!("{name} = {seed} exceeds {MAX_SEED}")));
            }
        }
        if self.metrics.ms_scales == 0 {
            return Err(Error::Config("metrics.ms_scales must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Where an effective value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Cli,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Cli => "cli",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    /// `section.key` → origin of its value.
    pub provenance: BTreeMap<String, Source>,
}

impl ResolvedConfig {
    /// TOML with a provenance comment block; parses back to the same config.
    pub fn to_toml(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        for (key, src) in &self.provenance {
            if *src != Source::Default {
                s.push_str(&format!("# {key}: {}\n", src.as_str()));
            }
        }
        s.push('\n');
        s.push_str(&self.config.to_toml());
        s
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(RESOLVED_CONFIG_FILE), self.to_toml())?;
        Ok(())
    }
}

fn table_of(cfg: &RunConfig) -> toml::Table {
    toml::Table::try_from(cfg).expect("config serializes to a table")
}

/// `(section, key)` pairs of every valid setting.
pub fn valid_keys() -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (section, value) in table_of(&RunConfig::default()) {
        if let toml::Value::Table(t) = value {
            for key in t.keys() {
                out.push((section.clone(), key.clone()));
            }
        }
    }
    out
}

fn nearest<'a>(needle: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    candidates
        .into_iter()
        .map(|c| (strsim::levenshtein(needle, c), c))
        .min()
        .map(|(_, c)| c)
}

fn unknown_key(section: &str, key: &str, defaults: &toml::Table) -> Error {
    let keys: Vec<&str> = defaults
        .get(section)
        .and_then(|v| v.as_table())
        .map(|t| t.keys().map(String::as_str).collect())
        .unwrap_or_default();
    let hint = nearest(key, keys.iter().copied())
        .map(|k| format!("; did you mean `{k}`?"))
        .unwrap_or_default();
    Error::Config(format!(
        "unknown key `{key}` in [{section}]{hint} valid keys: {}",
        keys.join(", ")
    ))
}

fn unknown_section(section: &str, defaults: &toml::Table) -> Error {
    let hint = nearest(section, defaults.keys().map(String::as_str))
        .map(|k| format!("; did you mean [{k}]?"))
        .unwrap_or_default();
    Error::Config(format!(
        "unknown section [{section}]{hint} valid sections: {}",
        defaults.keys().cloned().collect::<Vec<_>>().join(", ")
    ))
}

fn overlay(
    merged: &mut toml::Table,
    layer: toml::Table,
    defaults: &toml::Table,
    source: Source,
    provenance: &mut BTreeMap<String, Source>,
) -> Result<()> {
    for (section, value) in layer {
        let Some(target) = merged.get_mut(&section).and_then(|v| v.as_table_mut()) else {
            return Err(unknown_section(&section, defaults));
        };
        let toml::Value::Table(entries) = value else {
            return Err(Error::Config(format!("`{section}` must be a [section]")));
        };
        for (key, v) in entries {
            if !target.contains_key(&key) {
                return Err(unknown_key(&section, &key, defaults));
            }
            // integer literals are accepted for real-valued settings
            let v = match (&target[&key], v) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                (toml::Value::Array(d), toml::Value::Array(items)) if d.first().is_some_and(toml::Value::is_float) => {
                    toml::Value::Array(
                        items
                            .into_iter()
                            .map(|x| match x {
                                toml::Value::Integer(i) => toml::Value::Float(i as f64),
                                other => other,
                            })
                            .collect(),
                    )
                }
                (_, v) => v,
            };
            provenance.insert(format!("{section}.{key}"), source);
            target.insert(key, v);
        }
    }
    Ok(())
}

/// Parses a `key=value` override. `key` is `section.key` or a bare key that
/// names exactly one setting; `value` is a TOML literal, or a bare string.
pub fn parse_override(text: &str) -> Result<(String, String, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (section, key) = match key.split_once('.') {
        Some((s, k)) => (s.to_string(), k.to_string()),
        None => {
            let keys = valid_keys();
            let owners: Vec<_> = keys.iter().filter(|(_, k)| k == key).collect();
            match owners.as_slice() {
                [(s, _)] => (s.clone(), key.to_string()),
                [] => {
                    let hint = nearest(key, keys.iter().map(|(_, k)| k.as_str()))
                        .map(|k| format!("; did you mean `{k}`?"))
                        .unwrap_or_default();
                    return Err(Error::Config(format!("unknown key `{key}`{hint}")));
                }
                _ => {
                    return Err(Error::Config(format!(
                        "key `{key}` is ambiguous; qualify it with its section"
                    )))
                }
            }
        }
    };
    Ok((section, key, value))
}

/// Merges `base` ← file text ← overrides, in increasing precedence.
pub fn resolve_config_text(
    base: &RunConfig,
    file_text: Option<&str>,
    overrides: &[(String, String, toml::Value)],
) -> Result<ResolvedConfig> {
    let defaults = table_of(base);
    let mut merged = defaults.clone();
    let mut provenance: BTreeMap<String, Source> = valid_keys()
        .into_iter()
        .map(|(s, k)| (format!("{s}.{k}"), Source::Default))
        .collect();
    if let Some(text) = file_text {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        overlay(&mut merged, file, &defaults, Source::File, &mut provenance)?;
    }
    let mut cli = toml::Table::new();
    for (section, key, value) in overrides {
        cli.entry(section.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{section}` is not a section")))?
            .insert(key.clone(), value.clone());
    }
    overlay(&mut merged, cli, &defaults, Source::Cli, &mut provenance)?;
    let config: RunConfig = toml::Value::Table(merged)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("type mismatch: {}", e.message())))?;
    config.validate()?;
    Ok(ResolvedConfig { config, provenance })
}

/// Reads `file` (or the file named by `ROBUSTSR_CONFIG`) and merges it with
/// `overrides` over `base`.
pub fn resolve_config(
    base: &RunConfig,
    file: Option<&Path>,
    overrides: &[(String, String, toml::Value)],
) -> Result<ResolvedConfig> {
    let env_path = std::env::var_os(CONFIG_ENV).map(std::path::PathBuf::from);
    let path = file.map(Path::to_path_buf).or(env_path);
    let text = match &path {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        ),
        None => None,
    };
    resolve_config_text(base, text.as_deref(), overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(items: &[&str]) -> Vec<(String, String, toml::Value)> {
        items.iter().map(|s| parse_override(s).unwrap()).collect()
    }

    #[test]
    fn empty_file_yields_defaults() {
        let r = resolve_config_text(&RunConfig::default(), Some(""), &[]).unwrap();
        assert_eq!(r.config, RunConfig::default());
        assert!(r.provenance.values().all(|s| *s == Source::Default));
    }

    #[test]
    fn cli_beats_file() {
        let r = resolve_config_text(&RunConfig::default(), Some("[loss]\nq = 0.8\n"), &ov(&["loss.q=0.5"])).unwrap();
        assert_eq!(r.config.loss.q, 0.5);
        assert_eq!(r.provenance["loss.q"], Source::Cli);
        let r = resolve_config_text(&RunConfig::default(), Some("[loss]\nq = 0.8\n"), &[]).unwrap();
        assert_eq!(r.config.loss.q, 0.8);
        assert_eq!(r.provenance["loss.q"], Source::File);
    }

    #[test]
    fn unknown_key_names_nearest() {
        let err = resolve_config_text(&RunConfig::default(), Some("[loss]\nlamda_S = 1.0\n"), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("did you mean `lambda_S`"), "{msg}");
        assert!(err.is_config_error());
        let err = parse_override("lamda_M=1").unwrap_err();
        assert!(err.to_string().contains("lambda_M"));
        let err = resolve_config_text(&RunConfig::default(), Some("[los]\nq = 1.0\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("[loss]"));
    }

    #[test]
    fn type_mismatch_is_config_error() {
        let err = resolve_config_text(&RunConfig::default(), Some("[loss]\nq = \"high\"\n"), &[]).unwrap_err();
        assert!(err.is_config_error());
        let err = resolve_config_text(&RunConfig::default(), None, &ov(&["q=3.0"])).unwrap_err();
        assert!(err.is_config_error());
    }

    #[test]
    fn bare_keys_and_strings() {
        let r = resolve_config_text(
            &RunConfig::default(),
            None,
            &ov(&["q=1", "axis=q", "methods=[\"SRGAN_E\"]"]),
        )
        .unwrap();
        assert_eq!(r.config.loss.q, 1.0);
        assert_eq!(r.config.sweep.axis, SweepAxis::Q);
        assert_eq!(r.config.sweep.methods, vec!["SRGAN_E"]);
    }

    #[test]
    fn resolved_toml_round_trips() {
        let r = resolve_config_text(&RunConfig::desk(), None, &ov(&["loss.q=0.3"])).unwrap();
        let text = r.to_toml();
        let back = resolve_config_text(&RunConfig::default(), Some(&text), &[]).unwrap();
        assert_eq!(back.config, r.config);
    }
}
