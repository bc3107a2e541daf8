//! Dataset construction: patch extraction, LR synthesis, corruption
//! injection, and the train/test manifest.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{gaussian_blur, gaussian_kernel, reflect_index, ImagePatch};

/// Spatial upscaling factor between LR and HR patches.
pub const SCALE: usize = 4;
pub const HR_SIZE: usize = 256;
pub const LR_SIZE: usize = HR_SIZE / SCALE;
pub const DEFAULT_LR_BLUR_SIGMA: f64 = 1.2;

/// Patch geometry. Production datasets use 256×256 HR patches; smaller HR
/// sizes (any multiple of 4) are used for CPU-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub hr_size: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { hr_size: HR_SIZE }
    }
}

impl Geometry {
    pub fn new(hr_size: usize) -> Result<Self> {
        if hr_size == 0 || !hr_size.is_multiple_of(SCALE) {
            return Err(Error::invalid(format!(
                "HR size {hr_size} must be a positive multiple of {SCALE}"
            )));
        }
        Ok(Self { hr_size })
    }

    pub fn lr_size(&self) -> usize {
        self.hr_size / SCALE
    }

    /// Gaussian-smooths `hr` and keeps every fourth pixel along both axes.
    pub fn synthesize_lr(&self, hr: &ImagePatch, blur_sigma: f64) -> Result<ImagePatch> {
        if hr.height() != self.hr_size || hr.width() != self.hr_size {
            return Err(Error::UnexpectedHrSize {
                expected: self.hr_size,
                height: hr.height(),
                width: hr.width(),
            });
        }
        if !(blur_sigma > 0.0) || !blur_sigma.is_finite() {
            return Err(Error::invalid("blur_sigma must be positive"));
        }
        let kernel = gaussian_kernel(blur_sigma);
        let r = (kernel.len() / 2) as isize;
        let n = self.hr_size;
        let m = self.lr_size();
        let mut data = Vec::with_capacity(m * m * hr.channels());
        for c in 0..hr.channels() {
            let ch = hr.channel(c);
            // Horizontal pass only at the sampled columns.
            let mut rows = vec![0.0; n * m];
            for y in 0..n {
                for j in 0..m {
                    let x = (j * SCALE) as isize;
                    let mut acc = 0.0;
                    for (k, kv) in kernel.iter().enumerate() {
                        acc += kv * ch[y * n + reflect_index(x + k as isize - r, n)];
                    }
                    rows[y * m + j] = acc;
                }
            }
            for i in 0..m {
                let y = (i * SCALE) as isize;
                for j in 0..m {
                    let mut acc = 0.0;
                    for (k, kv) in kernel.iter().enumerate() {
                        acc += kv * rows[reflect_index(y + k as isize - r, n) * m + j];
                    }
                    data.push(acc);
                }
            }
        }
        ImagePatch::from_planar_clamped(m, m, hr.channels(), data)
    }
}

/// Synthesizes a 64×64 LR patch from a 256×256 HR patch.
pub fn synthesize_lr(hr: &ImagePatch, blur_sigma: f64) -> Result<ImagePatch> {
    Geometry::default().synthesize_lr(hr, blur_sigma)
}

fn grid_offsets(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut offsets = Vec::new();
    let mut o = 0;
    while o + patch <= extent {
        offsets.push(o);
        o += stride;
    }
    // clamp a final window to the far edge when the grid leaves a remainder
    if let Some(&last) = offsets.last() {
        if last + patch < extent {
            offsets.push(extent - patch);
        }
    }
    offsets
}

/// Crops square patches on a row-major grid. The last row/column of windows
/// is clamped to the image edge so the whole source is covered.
pub fn extract_patches(
    source: &ImagePatch,
    patch_size: usize,
    stride: usize,
    count_limit: usize,
) -> Result<Vec<ImagePatch>> {
    if patch_size == 0 {
        return Err(Error::invalid("patch_size must be positive"));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    if source.height() < patch_size || source.width() < patch_size {
        return Err(Error::SourceTooSmall {
            height: source.height(),
            width: source.width(),
            patch: patch_size,
        });
    }
    let rows = grid_offsets(source.height(), patch_size, stride);
    let cols = grid_offsets(source.width(), patch_size, stride);
    let mut out = Vec::new();
    'outer: for &top in &rows {
        for &left in &cols {
            if out.len() >= count_limit {
                break 'outer;
            }
            out.push(source.crop(top, left, patch_size, patch_size)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionKind {
    Noise,
    Blur,
    Contrast,
}

impl CorruptionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptionKind::Noise => "noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Contrast => "contrast",
        }
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(CorruptionKind::Noise),
            "blur" => Ok(CorruptionKind::Blur),
            "contrast" => Ok(CorruptionKind::Contrast),
            other => Err(Error::invalid(format!("unknown corruption kind `{other}`"))),
        }
    }
}

/// A degradation applied to a patch.
///
/// `level` is kind-specific: the noise standard deviation in intensity units,
/// the blur sigma in pixels, or the contrast scale factor about mid-gray.
/// A level of zero means "not corrupted" for every kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub level: f64,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, level: f64) -> Result<Self> {
        if !(level >= 0.0) || !level.is_finite() {
            return Err(Error::invalid(format!("corruption level {level} must be >= 0")));
        }
        Ok(Self { kind, level })
    }
}

/// Default corruption menu: noise σ ∈ [0.05, 0.2], blur σ ∈ [1, 3],
/// contrast factor ∈ [0.4, 0.7].
pub fn default_corruption_menu() -> Vec<CorruptionSpec> {
    let mut menu = Vec::new();
    for level in [0.05, 0.1, 0.15, 0.2] {
        menu.push(CorruptionSpec {
            kind: CorruptionKind::Noise,
            level,
        });
    }
    for level in [1.0, 2.0, 3.0] {
        menu.push(CorruptionSpec {
            kind: CorruptionKind::Blur,
            level,
        });
    }
    for level in [0.4, 0.55, 0.7] {
        menu.push(CorruptionSpec {
            kind: CorruptionKind::Contrast,
            level,
        });
    }
    menu
}

/// Applies a corruption. Noise is i.i.d. `N(0, level²)` drawn in planar
/// order from a ChaCha8 stream seeded with `seed`; every result is clamped.
pub fn apply_corruption(patch: &ImagePatch, spec: &CorruptionSpec, seed: u64) -> Result<ImagePatch> {
    if !(spec.level >= 0.0) || !spec.level.is_finite() {
        return Err(Error::invalid(format!("corruption level {} must be >= 0", spec.level)));
    }
    if spec.level == 0.0 {
        return Ok(patch.clone());
    }
    let (h, w, c) = patch.shape();
    match spec.kind {
        CorruptionKind::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = patch
                .as_planar()
                .iter()
                .map(|&v| {
                    let z: f64 = rng.sample(StandardNormal);
                    v + spec.level * z
                })
                .collect();
            ImagePatch::from_planar_clamped(h, w, c, data)
        }
        CorruptionKind::Blur => gaussian_blur(patch, spec.level),
        CorruptionKind::Contrast => {
            let data = patch
                .as_planar()
                .iter()
                .map(|&v| 0.5 + spec.level * (v - 0.5))
                .collect();
            ImagePatch::from_planar_clamped(h, w, c, data)
        }
    }
}

/// An aligned LR/HR example.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub lr: ImagePatch,
    pub hr: ImagePatch,
    pub source_id: String,
    pub corruption: Option<CorruptionSpec>,
}

impl PatchPair {
    pub fn new(
        lr: ImagePatch,
        hr: ImagePatch,
        source_id: impl Into<String>,
        corruption: Option<CorruptionSpec>,
    ) -> Result<Self> {
        if lr.height() * SCALE != hr.height() || lr.width() * SCALE != hr.width() {
            return Err(Error::shape(format!(
                "LR {:?} is not HR {:?} / {SCALE}",
                lr.shape(),
                hr.shape()
            )));
        }
        if lr.channels() != hr.channels() {
            return Err(Error::shape("LR and HR channel counts differ"));
        }
        Ok(Self {
            lr,
            hr,
            source_id: source_id.into(),
            corruption,
        })
    }

    /// Builds a clean pair from an HR patch.
    pub fn from_hr(hr: ImagePatch, source_id: impl Into<String>, geometry: Geometry, blur_sigma: f64) -> Result<Self> {
        let lr = geometry.synthesize_lr(&hr, blur_sigma)?;
        Self::new(lr, hr, source_id, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Which member of a training pair a curation error corrupts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionTarget {
    /// Corrupt the HR ground truth and regenerate LR from it.
    #[default]
    Hr,
    /// Corrupt only the LR input.
    Lr,
}

impl CorruptionTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            CorruptionTarget::Hr => "hr",
            CorruptionTarget::Lr => "lr",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub split: Split,
    pub corruption: Option<CorruptionSpec>,
    pub seed: u64,
}

/// Train/test assignment plus the corruption applied to each training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub corrupted_fraction: f64,
    pub seed: u64,
    pub hr_size: usize,
    pub lr_blur_sigma: f64,
    pub corruption_target: CorruptionTarget,
}

/// Inputs to [`build_manifest`] other than the pair ids.
#[derive(Debug, Clone)]
pub struct ManifestOptions {
    pub corrupted_fraction: f64,
    pub corruption_menu: Vec<CorruptionSpec>,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    pub geometry: Geometry,
    pub lr_blur_sigma: f64,
    pub corruption_target: CorruptionTarget,
}

impl ManifestOptions {
    pub fn new(train_count: usize, test_count: usize, corrupted_fraction: f64, seed: u64) -> Self {
        Self {
            corrupted_fraction,
            corruption_menu: default_corruption_menu(),
            train_count,
            test_count,
            seed,
            geometry: Geometry::default(),
            lr_blur_sigma: DEFAULT_LR_BLUR_SIGMA,
            corruption_target: CorruptionTarget::Hr,
        }
    }
}

const SPLIT_STREAM: u64 = 0x0053_504c_4954;
const CORRUPT_STREAM: u64 = 0x434f_5252;

/// Splits pairs into train/test and marks exactly
/// `round(fraction · train_count)` training entries as corrupted.
///
/// The split depends only on the pair ids and the seed, so manifests built
/// with different fractions share an identical test split.
pub fn build_manifest(pair_ids: &[String], opts: &ManifestOptions) -> Result<DatasetManifest> {
    let needed = opts.train_count + opts.test_count;
    if pair_ids.len() < needed {
        return Err(Error::InsufficientPairs {
            needed,
            available: pair_ids.len(),
        });
    }
    if !(0.0..=1.0).contains(&opts.corrupted_fraction) {
        return Err(Error::invalid(format!(
            "corrupted_fraction {} outside [0, 1]",
            opts.corrupted_fraction
        )));
    }
    let n_corrupt = (opts.corrupted_fraction * opts.train_count as f64).round() as usize;
    if n_corrupt > 0 && opts.corruption_menu.is_empty() {
        return Err(Error::invalid("corruption menu is empty"));
    }
    for spec in &opts.corruption_menu {
        CorruptionSpec::new(spec.kind, spec.level)?;
    }

    let mut split_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    split_rng.set_stream(SPLIT_STREAM);
    let mut order: Vec<usize> = (0..pair_ids.len()).collect();
    order.shuffle(&mut split_rng);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(CORRUPT_STREAM);
    let mut corrupt_slots: Vec<usize> = (0..opts.train_count).collect();
    corrupt_slots.shuffle(&mut rng);
    let mut chosen = vec![None; opts.train_count];
    for &slot in corrupt_slots.iter().take(n_corrupt) {
        let spec = opts.corruption_menu[rng.random_range(0..opts.corruption_menu.len())];
        chosen[slot] = Some(spec);
    }

    let mut entries = Vec::with_capacity(needed);
    for (i, &idx) in order.iter().take(opts.train_count).enumerate() {
        entries.push(ManifestEntry {
            pair_id: pair_ids[idx].clone(),
            split: Split::Train,
            corruption: chosen[i],
            seed: rng.random::<u32>() as u64,
        });
    }
    for &idx in order.iter().skip(opts.train_count).take(opts.test_count) {
        entries.push(ManifestEntry {
            pair_id: pair_ids[idx].clone(),
            split: Split::Test,
            corruption: None,
            seed: 0,
        });
    }
    Ok(DatasetManifest {
        entries,
        corrupted_fraction: opts.corrupted_fraction,
        seed: opts.seed,
        hr_size: opts.geometry.hr_size,
        lr_blur_sigma: opts.lr_blur_sigma,
        corruption_target: opts.corruption_target,
    })
}

/// Materialized training and test pairs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<PatchPair>,
    pub test: Vec<PatchPair>,
}

impl DatasetManifest {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.hr_size)
    }

    pub fn train_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn test_entries(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Split::Test)
    }

    /// Observed fraction of corrupted training entries.
    pub fn observed_fraction(&self) -> f64 {
        let (mut total, mut corrupted) = (0usize, 0usize);
        for e in self.train_entries() {
            total += 1;
            if e.corruption.is_some() {
                corrupted += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            corrupted as f64 / total as f64
        }
    }

    /// Builds the pairs described by the manifest from clean HR patches.
    pub fn materialize(&self, clean_hr: &HashMap<String, ImagePatch>) -> Result<Dataset> {
        let geometry = self.geometry()?;
        let mut missing = Vec::new();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for e in &self.entries {
            let Some(hr) = clean_hr.get(&e.pair_id) else {
                missing.push(e.pair_id.clone());
                continue;
            };
            let pair = self.materialize_entry(e, hr, geometry)?;
            match e.split {
                Split::Train => train.push(pair),
                Split::Test => test.push(pair),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingPairs(missing));
        }
        Ok(Dataset { train, test })
    }

    fn materialize_entry(&self, entry: &ManifestEntry, hr: &ImagePatch, geometry: Geometry) -> Result<PatchPair> {
        let Some(spec) = entry.corruption else {
            return PatchPair::from_hr(hr.clone(), &entry.pair_id, geometry, self.lr_blur_sigma);
        };
        match self.corruption_target {
            CorruptionTarget::Hr => {
                let bad_hr = apply_corruption(hr, &spec, entry.seed)?;
                let lr = geometry.synthesize_lr(&bad_hr, self.lr_blur_sigma)?;
                PatchPair::new(lr, bad_hr, &entry.pair_id, Some(spec))
            }
            CorruptionTarget::Lr => {
                let lr = geometry.synthesize_lr(hr, self.lr_blur_sigma)?;
                let bad_lr = apply_corruption(&lr, &spec, entry.seed)?;
                PatchPair::new(bad_lr, hr.clone(), &entry.pair_id, Some(spec))
            }
        }
    }

    /// Writes the line-oriented manifest format.
    pub fn to_text(&self) -> String {
        use fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "# robustsr manifest v1");
        let _ = writeln!(s, "# seed {}", self.seed);
        let _ = writeln!(s, "# corrupted_fraction {}", self.corrupted_fraction);
        let _ = writeln!(s, "# hr_size {}", self.hr_size);
        let _ = writeln!(s, "# lr_blur_sigma {}", self.lr_blur_sigma);
        let _ = writeln!(s, "# corruption_target {}", self.corruption_target.as_str());
        for e in &self.entries {
            let (kind, level) = match e.corruption {
                Some(c) => (c.kind.as_str(), c.level),
                None => ("none", 0.0),
            };
            let _ = writeln!(s, "{} {} {} {} {}", e.pair_id, e.split.as_str(), kind, level, e.seed);
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Parse {
            path: origin.to_path_buf(),
            detail: format!("line {line}: {detail}"),
        };
        let mut seed = None;
        let mut fraction = None;
        let mut hr_size = HR_SIZE;
        let mut sigma = DEFAULT_LR_BLUR_SIGMA;
        let mut target = CorruptionTarget::Hr;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(header) = line.strip_prefix('#') {
                let mut it = header.split_whitespace();
                let (Some(key), Some(value)) = (it.next(), it.next()) else {
                    continue;
                };
                let bad = |e: &dyn fmt::Display| err(lineno, format!("bad `{key}`: {e}"));
                match key {
                    "seed" => seed = Some(value.parse::<u64>().map_err(|e| bad(&e))?),
                    "corrupted_fraction" => fraction = Some(value.parse::<f64>().map_err(|e| bad(&e))?),
                    "hr_size" => hr_size = value.parse().map_err(|e| bad(&e))?,
                    "lr_blur_sigma" => sigma = value.parse().map_err(|e| bad(&e))?,
                    "corruption_target" => {
                        target = match value {
                            "hr" => CorruptionTarget::Hr,
                            "lr" => CorruptionTarget::Lr,
                            other => return Err(err(lineno, format!("unknown target `{other}`"))),
                        }
                    }
                    _ => {}
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(err(lineno, format!("expected 5 fields, got {}", fields.len())));
            }
            let split = match fields[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(err(lineno, format!("unknown split `{other}`"))),
            };
            let level: f64 = fields[3].parse().map_err(|e| err(lineno, format!("bad level: {e}")))?;
            let corruption = match fields[2] {
                "none" => None,
                kind => Some(
                    CorruptionSpec::new(kind.parse().map_err(|e: Error| err(lineno, e.to_string()))?, level)
                        .map_err(|e| err(lineno, e.to_string()))?,
                ),
            };
            if split == Split::Test && corruption.is_some() {
                return Err(err(lineno, "test entries cannot be corrupted".into()));
            }
            let entry_seed = fields[4].parse().map_err(|e| err(lineno, format!("bad seed: {e}")))?;
            entries.push(ManifestEntry {
                pair_id: fields[0].to_string(),
                split,
                corruption,
                seed: entry_seed,
            });
        }
        Ok(Self {
            entries,
            corrupted_fraction: fraction.ok_or_else(|| err(0, "missing corrupted_fraction header".into()))?,
            seed: seed.ok_or_else(|| err(0, "missing seed header".into()))?,
            hr_size,
            lr_blur_sigma: sigma,
            corruption_target: target,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }
}

/// Directory holding the clean HR patches that manifest ids refer to.
pub fn hr_dir(root: &Path) -> PathBuf {
    root.join("hr")
}

pub fn lr_dir(root: &Path) -> PathBuf {
    root.join("lr")
}

/// Sorted stems of the `.png` files under `root/hr`.
pub fn list_patch_ids(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(hr_dir(root))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads the clean HR patch for every id in the manifest from `root/hr/<id>.png`.
pub fn load_clean_hr(root: &Path, manifest: &DatasetManifest) -> Result<HashMap<String, ImagePatch>> {
    let dir = hr_dir(root);
    let mut out = HashMap::new();
    let mut missing = Vec::new();
    for e in &manifest.entries {
        let path = dir.join(format!("{}.png", e.pair_id));
        if !path.exists() {
            missing.push(e.pair_id.clone());
            continue;
        }
        out.insert(e.pair_id.clone(), ImagePatch::load_png(&path)?);
    }
    if !missing.is_empty() {
        return Err(Error::MissingPairs(missing));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::tissue_patch;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:05}")).collect()
    }

    #[test]
    fn extract_identity_case() {
        let src = tissue_patch(256, 1);
        let patches = extract_patches(&src, 256, 256, 4000).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0], src);
    }

    #[test]
    fn extract_grid_and_limit() {
        let src = tissue_patch(512, 2);
        let patches = extract_patches(&src, 256, 256, 4000).unwrap();
        assert_eq!(patches.len(), 4);
        assert_eq!(patches[3], src.crop(256, 256, 256, 256).unwrap());
        assert_eq!(extract_patches(&src, 256, 256, 3).unwrap().len(), 3);
    }

    #[test]
    fn extract_clamps_last_window() {
        // brute force: every offset o with o + 256 <= 300 reachable by the
        // stride grid, plus the clamped edge window
        let mut expected = Vec::new();
        for o in (0..=300 - 256).step_by(64) {
            expected.push(o);
        }
        if *expected.last().unwrap() + 256 < 300 {
            expected.push(300 - 256);
        }
        assert_eq!(expected, vec![0, 44]);
        assert_eq!(grid_offsets(300, 256, 64), expected);

        let src = tissue_patch(300, 3);
        let patches = extract_patches(&src, 256, 64, 100).unwrap();
        assert_eq!(patches.len(), 4);
        assert_eq!(patches[1], src.crop(0, 44, 256, 256).unwrap());
        assert_eq!(patches[2], src.crop(44, 0, 256, 256).unwrap());
    }

    #[test]
    fn extract_rejects_small_source() {
        let src = tissue_patch(100, 3);
        let err = extract_patches(&src, 256, 64, 10).unwrap_err();
        assert!(err.to_string().contains("source too small"));
        assert!(extract_patches(&tissue_patch(256, 1), 256, 0, 1).is_err());
    }

    #[test]
    fn synthesize_lr_constants() {
        for v in [0.5, 1.0, 0.0] {
            let hr = ImagePatch::filled(256, 256, 3, v).unwrap();
            let lr = synthesize_lr(&hr, 1.2).unwrap();
            assert_eq!(lr.shape(), (64, 64, 3));
            assert!(lr.as_planar().iter().all(|x| (x - v).abs() < 1e-12));
        }
        let bad = ImagePatch::filled(128, 128, 3, 0.5).unwrap();
        let err = synthesize_lr(&bad, 1.2).unwrap_err();
        assert!(err.to_string().contains("unexpected HR size"));
        let hr = ImagePatch::filled(256, 256, 3, 0.5).unwrap();
        assert!(synthesize_lr(&hr, 0.0).is_err());
    }

    #[test]
    fn synthesize_lr_matches_dense_convolution() {
        // oracle: full 2-D Gaussian convolution at every HR pixel, then stride-4 sampling
        let mut data = vec![0.0; 256 * 256 * 3];
        data[130 * 256 + 121] = 1.0;
        data[256 * 256 + 2 * 256 + 1] = 1.0;
        let hr = ImagePatch::from_planar(256, 256, 3, data).unwrap();
        let sigma: f64 = 1.2;
        let radius = (4.0 * sigma).ceil() as isize;
        let weight = |d: isize| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp();
        let norm: f64 = (-radius..=radius).map(weight).sum();
        let lr = synthesize_lr(&hr, sigma).unwrap();
        for c in 0..3 {
            for i in 0..64 {
                for j in 0..64 {
                    let mut acc = 0.0;
                    for dy in -radius..=radius {
                        for dx in -radius..=radius {
                            let y = reflect_index((i * 4) as isize + dy, 256);
                            let x = reflect_index((j * 4) as isize + dx, 256);
                            acc += weight(dy) * weight(dx) / (norm * norm) * hr.get(y, x, c);
                        }
                    }
                    assert!((lr.get(i, j, c) - acc).abs() < 1e-14, "{c} {i} {j}");
                }
            }
        }
        assert!(lr.get(32, 30, 0) > 0.0);
    }

    #[test]
    fn corruption_level_zero_is_identity() {
        let p = tissue_patch(32, 5);
        for kind in [CorruptionKind::Noise, CorruptionKind::Blur, CorruptionKind::Contrast] {
            let out = apply_corruption(&p, &CorruptionSpec { kind, level: 0.0 }, 9).unwrap();
            assert_eq!(out, p);
        }
    }

    #[test]
    fn contrast_fixed_point_and_formula() {
        let gray = ImagePatch::filled(8, 8, 3, 0.5).unwrap();
        let spec = CorruptionSpec::new(CorruptionKind::Contrast, 2.0).unwrap();
        assert_eq!(apply_corruption(&gray, &spec, 0).unwrap(), gray);

        let p = tissue_patch(16, 5);
        let spec = CorruptionSpec::new(CorruptionKind::Contrast, 0.4).unwrap();
        let out = apply_corruption(&p, &spec, 0).unwrap();
        for (o, v) in out.as_planar().iter().zip(p.as_planar()) {
            assert_eq!(*o, 0.5 + 0.4 * (v - 0.5));
        }
    }

    #[test]
    fn noise_matches_reference_sampler() {
        use rand_distr::{Distribution, Normal};
        let p = tissue_patch(16, 11);
        let spec = CorruptionSpec::new(CorruptionKind::Noise, 0.1).unwrap();
        let out = apply_corruption(&p, &spec, 7).unwrap();
        let normal = Normal::new(0.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (o, v) in out.as_planar().iter().zip(p.as_planar()) {
            let expected = (v + normal.sample(&mut rng)).clamp(0.0, 1.0);
            assert!((o - expected).abs() < 1e-15);
        }
        assert_eq!(apply_corruption(&p, &spec, 7).unwrap(), out);
        assert_ne!(apply_corruption(&p, &spec, 8).unwrap(), out);
    }

    #[test]
    fn unknown_kind_is_an_error() {
        assert!("haze".parse::<CorruptionKind>().is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Blur, -1.0).is_err());
    }

    #[test]
    fn manifest_counts_and_clean_test_split() {
        let pair_ids = ids(4000);
        let clean = build_manifest(&pair_ids, &ManifestOptions::new(2000, 2000, 0.0, 3)).unwrap();
        assert_eq!(clean.entries.iter().filter(|e| e.corruption.is_some()).count(), 0);

        let m = build_manifest(&pair_ids, &ManifestOptions::new(2000, 2000, 0.3, 3)).unwrap();
        assert_eq!(m.train_entries().count(), 2000);
        assert_eq!(m.test_entries().count(), 2000);
        assert_eq!(m.train_entries().filter(|e| e.corruption.is_some()).count(), 600);
        assert!(m.test_entries().all(|e| e.corruption.is_none()));
        let clean_test: Vec<_> = clean.test_entries().collect();
        let test: Vec<_> = m.test_entries().collect();
        assert_eq!(clean_test, test);
    }

    #[test]
    fn manifest_is_deterministic_and_round_trips() {
        let pair_ids = ids(40);
        let opts = ManifestOptions::new(20, 10, 0.25, 99);
        let a = build_manifest(&pair_ids, &opts).unwrap();
        let b = build_manifest(&pair_ids, &opts).unwrap();
        assert_eq!(a, b);
        let parsed = DatasetManifest::parse(&a.to_text(), Path::new("m.txt")).unwrap();
        assert_eq!(parsed, a);
        assert!(build_manifest(&ids(10), &opts).is_err());
    }

    #[test]
    fn materialize_applies_annotated_corruption() {
        let geometry = Geometry::new(32).unwrap();
        let pair_ids = ids(12);
        let clean: HashMap<String, ImagePatch> = pair_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), tissue_patch(32, i as u64)))
            .collect();
        let mut opts = ManifestOptions::new(8, 4, 0.5, 1);
        opts.geometry = geometry;
        let m = build_manifest(&pair_ids, &opts).unwrap();
        let ds = m.materialize(&clean).unwrap();
        assert_eq!(ds.train.len(), 8);
        assert_eq!(ds.train.iter().filter(|p| p.corruption.is_some()).count(), 4);
        for (pair, entry) in ds.train.iter().zip(m.train_entries()) {
            assert_eq!(pair.corruption, entry.corruption);
            let hr = &clean[&entry.pair_id];
            let expected = match entry.corruption {
                Some(spec) => apply_corruption(hr, &spec, entry.seed).unwrap(),
                None => hr.clone(),
            };
            assert_eq!(pair.hr, expected);
            assert_eq!(pair.lr, geometry.synthesize_lr(&expected, 1.2).unwrap());
        }
        for pair in &ds.test {
            assert_eq!(pair.hr, clean[&pair.source_id]);
        }
    }
}
