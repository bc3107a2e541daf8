//! `robustsr`: extract → corrupt → pretrain-ae → train → evaluate → sweep.
//!
//! Every command resolves its settings from preset defaults, an optional
//! TOML file (`--config` or `$ROBUSTSR_CONFIG`) and `--set key=value`
//! overrides, in increasing precedence, and writes the resolved settings
//! next to its outputs. Exit status is 0 on success, 2 for configuration or
//! usage errors and 1 for runtime failures.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use robustsr::config::{parse_override, resolve_config, ResolvedConfig, RunConfig, RESOLVED_CONFIG_FILE};
use robustsr::data::{build_manifest, extract_patches, hr_dir, list_patch_ids, load_clean_hr, lr_dir, DatasetManifest};
use robustsr::experiments::{component_seed, emit_plots, run_sweep, PatchPool, SweepSpec};
use robustsr::image::ImagePatch;
use robustsr::metrics::{evaluate_pairs, MetricReport};
use robustsr::nn::{
    build_decoder, build_discriminator, build_encoder, generator_from, load_checkpoint, save_checkpoint, Network,
};
use robustsr::training::{pretrain_autoencoder, super_resolve_patches, super_resolve_tiled, train};
use robustsr::{Error, Result};

use output::{sidecar_path, write_file, OutputDir};

#[derive(Parser, Debug)]
#[command(name = "robustsr", version, about = "Corruption-robust 4x super-resolution pipeline")]
#[command(after_help = "Examples:
  robustsr synth --out data --count 80
  robustsr corrupt --data data --manifest data/manifest.txt --fraction 0.3 --seed 7
  robustsr pretrain-ae --manifest data/manifest.txt --out ae.ckpt
  robustsr train --manifest data/manifest.txt --encoder ae.ckpt --out run
  robustsr super-resolve --input data/lr --checkpoint run/generator.ckpt --out sr
  robustsr evaluate --sr sr --manifest data/manifest.txt --out eval
  robustsr sweep --axis q --values 0.3,0.5,1,2 --fraction 0.3 --out sweep_q")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML settings file; defaults to $ROBUSTSR_CONFIG when set
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one setting, e.g. `--set loss.q=0.8` or `--set iterations=50`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Default settings the file and overrides are applied to
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,

    /// Shorthand for `--preset paper`
    #[arg(long, global = true)]
    paper_scale: bool,

    /// Print a machine-readable JSON summary on stdout
    #[arg(long, global = true)]
    json: bool,

    /// Replace existing outputs
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// 32×32 HR patches, 64/16 split, small networks
    Desk,
    /// 256×256 HR patches, 2000/2000 split, full-size networks
    Paper,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write procedural tissue patches as a dataset (hr/ and lr/ PNGs)
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 80)]
        count: usize,
        /// HR patch side (data.hr_size)
        #[arg(long)]
        size: Option<usize>,
    },
    /// Cut HR patches from source PNGs and synthesize their LR inputs
    Extract {
        #[arg(long, value_name = "DIR")]
        src: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// HR patch side (data.hr_size)
        #[arg(long)]
        patch: Option<usize>,
        /// Grid stride (data.patch_stride)
        #[arg(long)]
        stride: Option<usize>,
        /// Total patch budget across all sources
        #[arg(long, default_value_t = 4000)]
        limit: usize,
    },
    /// Split a dataset into train/test and choose the corrupted training pairs
    Corrupt {
        /// Dataset root holding hr/
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Manifest file to write
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Corrupted fraction of the training split (data.corrupted_fraction)
        #[arg(long)]
        fraction: Option<f64>,
        /// Split and corruption seed (data.seed)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train the feature autoencoder on a manifest's training HR patches
    PretrainAe {
        #[command(flatten)]
        input: ManifestInput,
        /// Encoder checkpoint to write
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train the generator and discriminator
    Train {
        #[command(flatten)]
        input: ManifestInput,
        /// Pre-trained encoder checkpoint; required when lambda_M > 0
        #[arg(long, value_name = "FILE")]
        encoder: Option<PathBuf>,
        /// Run directory to write
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Score SR images against HR references
    Evaluate {
        /// Directory of SR PNGs named like their references
        #[arg(long, value_name = "DIR")]
        sr: PathBuf,
        /// Directory of HR reference PNGs
        #[arg(
            long,
            value_name = "DIR",
            conflicts_with = "manifest",
            required_unless_present = "manifest"
        )]
        hr: Option<PathBuf>,
        /// Score the manifest's test split against its clean HR patches
        #[arg(long, value_name = "FILE")]
        manifest: Option<PathBuf>,
        /// Dataset root for --manifest; defaults to the manifest's directory
        #[arg(long, value_name = "DIR", requires = "manifest")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Upscale a PNG, or every PNG in a directory, with a trained generator
    SuperResolve {
        #[arg(long, value_name = "PNG|DIR")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PNG|DIR")]
        out: PathBuf,
    },
    /// Train and score every method at every value of one axis
    Sweep {
        /// `corruption` (corrupted fraction) or `q`
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated axis values
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        /// Comma-separated methods: SRGAN_E, SRGAN_QE, SRGAN_SQE
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Corrupted fraction held fixed on the q axis
        #[arg(long)]
        fraction: Option<f64>,
        /// Dataset root holding hr/; procedural patches are used otherwise
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ManifestInput {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Dataset root holding hr/; defaults to the manifest's directory
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

impl ManifestInput {
    fn load(&self, cfg: &RunConfig) -> Result<robustsr::data::Dataset> {
        let manifest = DatasetManifest::load(&self.manifest)?;
        check_hr_size(&manifest, cfg)?;
        let root = data_root(self.data.as_deref(), &self.manifest);
        manifest.materialize(&load_clean_hr(&root, &manifest)?)
    }
}

fn data_root(data: Option<&Path>, manifest: &Path) -> PathBuf {
    match data {
        Some(d) => d.to_path_buf(),
        None => match manifest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        },
    }
}

fn check_hr_size(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<()> {
    if manifest.hr_size != cfg.data.hr_size {
        return Err(Error::Config(format!(
            "manifest holds {0}x{0} patches but data.hr_size = {1}",
            manifest.hr_size, cfg.data.hr_size
        )));
    }
    Ok(())
}

/// Settings plus the text written next to outputs.
struct Settings {
    resolved: ResolvedConfig,
    record: String,
}

impl Settings {
    fn cfg(&self) -> &RunConfig {
        &self.resolved.config
    }

    fn write_into(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(RESOLVED_CONFIG_FILE), &self.record)?;
        Ok(())
    }

    fn write_beside(&self, file: &Path) -> Result<()> {
        write_file(&sidecar_path(file), true, |p| Ok(std::fs::write(p, &self.record)?))
    }
}

/// Resolves settings; `flags` are command options expressed as overrides
/// and take precedence over `--set`.
fn resolve(global: &Global, flags: Vec<String>) -> Result<Settings> {
    let base = match (global.preset, global.paper_scale) {
        (Preset::Paper, _) | (_, true) => RunConfig::default(),
        (Preset::Desk, false) => RunConfig::desk(),
    };
    let overrides = global
        .overrides
        .iter()
        .chain(&flags)
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>>>()?;
    let resolved = resolve_config(&base, global.config.as_deref(), &overrides)?;
    let invocation: Vec<String> = std::env::args().collect();
    let record = format!("# {}\n{}", invocation.join(" "), resolved.to_toml());
    Ok(Settings { resolved, record })
}

fn flag<T: std::fmt::Display>(key: &str, value: Option<T>) -> Option<String> {
    value.map(|v| format!("{key}={v}"))
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes `hr/<id>.png` and `lr/<id>.png` for every patch.
fn write_dataset(dir: &Path, patches: &[(String, ImagePatch)], cfg: &RunConfig) -> Result<()> {
    let geometry = cfg.geometry()?;
    std::fs::create_dir_all(hr_dir(dir))?;
    std::fs::create_dir_all(lr_dir(dir))?;
    for (id, hr) in patches {
        let hr = hr.quantized();
        hr.save_png(&hr_dir(dir).join(format!("{id}.png")))?;
        let lr = geometry.synthesize_lr(&hr, cfg.data.lr_blur_sigma)?;
        lr.save_png(&lr_dir(dir).join(format!("{id}.png")))?;
    }
    Ok(())
}

fn report_summary(report: &MetricReport) -> String {
    format!(
        "{} pairs: rrmse {:.6}  ms_mssim {:.6}  qilv {:.6}",
        report.per_image.len(),
        report.rrmse,
        report.ms_mssim,
        report.qilv
    )
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    std::fs::write(dir.join("report.csv"), report.to_csv())?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report.summary_json()).expect("json"),
    )?;
    Ok(())
}

fn init_network(mut net: Network, seed: u64, component: &str) -> Network {
    net.init(component_seed(seed, component));
    net
}

/// Human-readable line plus its JSON counterpart.
struct Outcome {
    text: String,
    json: serde_json::Value,
}

fn run(cli: Cli) -> Result<Outcome> {
    let g = &cli.global;
    match cli.command {
        Command::Synth { out, count, size } => {
            let s = resolve(g, flag("data.hr_size", size).into_iter().collect())?;
            let cfg = s.cfg();
            let dir = OutputDir::create(&out, g.force)?;
            let pool = PatchPool::synthetic(count, cfg.data.hr_size, cfg.data.seed);
            let patches: Vec<_> = pool.ids.iter().map(|id| (id.clone(), pool.hr[id].clone())).collect();
            write_dataset(dir.path(), &patches, cfg)?;
            s.write_into(dir.path())?;
            let out = dir.commit()?;
            Ok(Outcome {
                text: format!("wrote {count} patches to {}", out.display()),
                json: json!({"command": "synth", "out": out, "patches": count}),
            })
        }
        Command::Extract {
            src,
            out,
            patch,
            stride,
            limit,
        } => {
            let flags = [flag("data.hr_size", patch), flag("data.patch_stride", stride)];
            let s = resolve(g, flags.into_iter().flatten().collect())?;
            let cfg = s.cfg();
            let sources = png_stems(&src)?;
            if sources.is_empty() {
                return Err(Error::InvalidArgument(format!("no PNG files in {}", src.display())));
            }
            let per_source = match cfg.data.patches_per_source {
                0 => usize::MAX,
                n => n,
            };
            let mut patches = Vec::new();
            for (stem, path) in &sources {
                if patches.len() >= limit {
                    break;
                }
                let image = ImagePatch::load_png(path)?;
                let budget = per_source.min(limit - patches.len());
                let cut = extract_patches(&image, cfg.data.hr_size, cfg.data.patch_stride, budget)?;
                patches.extend(cut.into_iter().enumerate().map(|(k, p)| (format!("{stem}_{k:04}"), p)));
            }
            let dir = OutputDir::create(&out, g.force)?;
            write_dataset(dir.path(), &patches, cfg)?;
            s.write_into(dir.path())?;
            let out = dir.commit()?;
            Ok(Outcome {
                text: format!(
                    "wrote {} patches from {} sources to {}",
                    patches.len(),
                    sources.len(),
                    out.display()
                ),
                json: json!({"command": "extract", "out": out, "patches": patches.len(), "sources": sources.len()}),
            })
        }
        Command::Corrupt {
            data,
            manifest,
            fraction,
            seed,
        } => {
            let flags = [flag("data.corrupted_fraction", fraction), flag("data.seed", seed)];
            let s = resolve(g, flags.into_iter().flatten().collect())?;
            let cfg = s.cfg();
            let ids = list_patch_ids(&data)?;
            let m = build_manifest(&ids, &cfg.manifest_options()?)?;
            write_file(&manifest, g.force, |p| m.save(p))?;
            s.write_beside(&manifest)?;
            let corrupted = m.train_entries().filter(|e| e.corruption.is_some()).count();
            Ok(Outcome {
                text: format!(
                    "wrote {}: {} train ({} corrupted), {} test",
                    manifest.display(),
                    cfg.data.train_count,
                    corrupted,
                    cfg.data.test_count
                ),
                json: json!({
                    "command": "corrupt",
                    "manifest": manifest,
                    "train": cfg.data.train_count,
                    "test": cfg.data.test_count,
                    "corrupted": corrupted,
                }),
            })
        }
        Command::PretrainAe { input, out } => {
            let s = resolve(g, Vec::new())?;
            let cfg = s.cfg();
            let dataset = input.load(cfg)?;
            let tc = cfg.train_config();
            let enc = init_network(build_encoder(&cfg.encoder_config())?, tc.seed, "encoder");
            let dec = init_network(build_decoder(&enc)?, tc.seed, "decoder");
            let train_hr: Vec<ImagePatch> = dataset.train.iter().map(|p| p.hr.clone()).collect();
            let ae = pretrain_autoencoder(&train_hr, enc, dec, &tc)?;
            write_file(&out, g.force, |p| save_checkpoint(&ae.encoder, p))?;
            s.write_beside(&out)?;
            let first = ae.loss_curve.first().copied().unwrap_or(f64::NAN);
            let last = ae.loss_curve.last().copied().unwrap_or(f64::NAN);
            Ok(Outcome {
                text: format!("wrote {}: reconstruction MSE {first:.6} -> {last:.6}", out.display()),
                json: json!({"command": "pretrain-ae", "out": out, "initial_mse": first, "final_mse": last}),
            })
        }
        Command::Train { input, encoder, out } => {
            let s = resolve(g, Vec::new())?;
            let cfg = s.cfg();
            let dataset = input.load(cfg)?;
            let tc = cfg.train_config();
            let encoder = match &encoder {
                Some(path) => {
                    let expected = build_encoder(&cfg.encoder_config())?;
                    Some(load_checkpoint(path, Some(&expected))?)
                }
                None => None,
            };
            let gen = init_network(generator_from(&cfg.generator_config())?, tc.seed, "generator");
            let disc = init_network(
                build_discriminator(&cfg.discriminator_config())?,
                tc.seed,
                "discriminator",
            );
            let dir = OutputDir::create(&out, g.force)?;
            s.write_into(dir.path())?;
            let outcome = train(&dataset.train, gen, disc, encoder.as_ref(), &tc, Some(dir.path()))?;
            let lr: Vec<ImagePatch> = dataset.test.iter().map(|p| p.lr.clone()).collect();
            let sr = super_resolve_patches(&outcome.generator, &lr, 16)?;
            let report = evaluate_pairs(
                dataset
                    .test
                    .iter()
                    .zip(&sr)
                    .map(|(p, s)| (p.source_id.as_str(), s, &p.hr)),
                cfg.metrics.ms_scales,
            )?;
            write_report(dir.path(), &report)?;
            let out = dir.commit()?;
            let last = outcome.log.last().map(|r| r.total).unwrap_or(f64::NAN);
            Ok(Outcome {
                text: format!(
                    "wrote {} after {} iterations (final objective {last:.6}); test {}",
                    out.display(),
                    outcome.log.len(),
                    report_summary(&report)
                ),
                json: json!({
                    "command": "train",
                    "out": out,
                    "iterations": outcome.log.len(),
                    "final_objective": last,
                    "test": report.summary_json(),
                }),
            })
        }
        Command::Evaluate {
            sr,
            hr,
            manifest,
            data,
            out,
        } => {
            let s = resolve(g, Vec::new())?;
            let cfg = s.cfg();
            let references: Vec<(String, ImagePatch)> = match (&hr, &manifest) {
                (Some(hr), _) => png_stems(hr)?
                    .into_iter()
                    .map(|(id, path)| Ok((id, ImagePatch::load_png(&path)?)))
                    .collect::<Result<_>>()?,
                (None, Some(mpath)) => {
                    let m = DatasetManifest::load(mpath)?;
                    let root = data_root(data.as_deref(), mpath);
                    let clean = load_clean_hr(&root, &m)?;
                    m.test_entries()
                        .map(|e| (e.pair_id.clone(), clean[&e.pair_id].clone()))
                        .collect()
                }
                (None, None) => unreachable!("clap requires --hr or --manifest"),
            };
            if references.is_empty() {
                return Err(Error::InvalidArgument("no reference images to evaluate".into()));
            }
            let missing: Vec<String> = references
                .iter()
                .filter(|(id, _)| !sr.join(format!("{id}.png")).is_file())
                .map(|(id, _)| id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(Error::MissingPairs(missing));
            }
            let outputs = references
                .iter()
                .map(|(id, _)| ImagePatch::load_png(&sr.join(format!("{id}.png"))))
                .collect::<Result<Vec<_>>>()?;
            let report = evaluate_pairs(
                references.iter().zip(&outputs).map(|((id, h), s)| (id.as_str(), s, h)),
                cfg.metrics.ms_scales,
            )?;
            let dir = OutputDir::create(&out, g.force)?;
            write_report(dir.path(), &report)?;
            s.write_into(dir.path())?;
            let out = dir.commit()?;
            Ok(Outcome {
                text: format!("wrote {}: {}", out.display(), report_summary(&report)),
                json: json!({"command": "evaluate", "out": out, "summary": report.summary_json()}),
            })
        }
        Command::SuperResolve { input, checkpoint, out } => {
            let s = resolve(g, Vec::new())?;
            let expected = generator_from(&s.cfg().generator_config())?;
            let gen = load_checkpoint(&checkpoint, Some(&expected))?;
            if input.is_dir() {
                let dir = OutputDir::create(&out, g.force)?;
                let files = png_stems(&input)?;
                for (stem, path) in &files {
                    let sr = super_resolve_tiled(&gen, &ImagePatch::load_png(path)?)?;
                    sr.save_png(&dir.path().join(format!("{stem}.png")))?;
                }
                s.write_into(dir.path())?;
                let out = dir.commit()?;
                Ok(Outcome {
                    text: format!("wrote {} images to {}", files.len(), out.display()),
                    json: json!({"command": "super-resolve", "out": out, "images": files.len()}),
                })
            } else {
                let lr = ImagePatch::load_png(&input)?;
                let sr = super_resolve_tiled(&gen, &lr)?;
                write_file(&out, g.force, |p| sr.save_png(p))?;
                s.write_beside(&out)?;
                Ok(Outcome {
                    text: format!(
                        "wrote {} ({}x{} -> {}x{})",
                        out.display(),
                        lr.width(),
                        lr.height(),
                        sr.width(),
                        sr.height()
                    ),
                    json: json!({"command": "super-resolve", "out": out, "width": sr.width(), "height": sr.height()}),
                })
            }
        }
        Command::Sweep {
            axis,
            values,
            methods,
            fraction,
            data,
            out,
        } => {
            let mut flags: Vec<String> = [flag("sweep.fraction", fraction)].into_iter().flatten().collect();
            if let Some(axis) = axis {
                let axis = robustsr::config::SweepAxis::parse(&axis)?;
                flags.push(format!("sweep.axis=\"{}\"", axis.as_str()));
            }
            if !values.is_empty() {
                let v: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
                flags.push(format!("sweep.values=[{}]", v.join(",")));
            }
            if !methods.is_empty() {
                let m: Vec<String> = methods.iter().map(|m| format!("\"{}\"", m.trim())).collect();
                flags.push(format!("sweep.methods=[{}]", m.join(",")));
            }
            let s = resolve(g, flags)?;
            let cfg = s.cfg();
            let spec = SweepSpec::from_config(cfg)?;
            let pool = match &data {
                Some(root) => {
                    let ids = list_patch_ids(root)?;
                    let patches = ids
                        .into_iter()
                        .map(|id| {
                            let p = ImagePatch::load_png(&hr_dir(root).join(format!("{id}.png")))?;
                            Ok((id, p))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    PatchPool::new(patches)
                }
                None => PatchPool::synthetic(
                    cfg.data.train_count + cfg.data.test_count,
                    cfg.data.hr_size,
                    cfg.data.seed,
                ),
            };
            let dir = OutputDir::create(&out, g.force)?;
            s.write_into(dir.path())?;
            let result = run_sweep(&spec, &pool, Some(dir.path()))?;
            emit_plots(&result, dir.path())?;
            let out = dir.commit()?;
            let failed = result
                .cells
                .iter()
                .filter(|c| matches!(c.outcome, robustsr::experiments::CellOutcome::Failed { .. }))
                .count();
            Ok(Outcome {
                text: format!(
                    "wrote {}: {} cells, {} failed",
                    out.display(),
                    result.cells.len(),
                    failed
                ),
                json: json!({"command": "sweep", "out": out, "result": result}),
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.global.json;
    match run(cli) {
        Ok(outcome) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&outcome.json).expect("json"));
            } else {
                println!("{}", outcome.text);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
