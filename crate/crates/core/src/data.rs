//! Synthetic variable-length volumes, their on-disk format, center-biased
//! slice subsampling and augmentation.
//!
//! The synthetic task has four classes: two lesion templates (one or two
//! Gaussian blobs) placed at relative depth 0.3 or 0.7. Classes sharing a
//! template differ only in where along the slice axis the lesion sits, so
//! any order-agnostic aggregator is capped at chance within each pair.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{fnv1a, RngStream, Tensor};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LesionPattern {
    SingleBlob,
    DoubleBlob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Relative lesion depths; index 0 and 1 of each template pair.
    #[serde(default = "default_depths")]
    pub depths: [f64; 2],
    /// Half-width of the lesion window as a fraction of the slice count.
    #[serde(default = "default_lesion_width")]
    pub lesion_width: f64,
    /// Std of the smoothed background noise.
    #[serde(default = "default_noise")]
    pub noise_level: f64,
    #[serde(default = "default_intensity")]
    pub lesion_intensity: f64,
    #[serde(default = "default_background")]
    pub background: f64,
    /// Max blob displacement in pixels, per volume.
    #[serde(default = "default_jitter")]
    pub jitter: usize,
}

fn default_classes() -> usize {
    4
}
fn default_depths() -> [f64; 2] {
    [0.3, 0.7]
}
fn default_lesion_width() -> f64 {
    0.08
}
fn default_noise() -> f64 {
    0.05
}
fn default_intensity() -> f64 {
    0.6
}
fn default_background() -> f64 {
    0.2
}
fn default_jitter() -> usize {
    2
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            height: 32,
            width: 32,
            n_min: 24,
            n_max: 64,
            depths: default_depths(),
            lesion_width: default_lesion_width(),
            noise_level: default_noise(),
            lesion_intensity: default_intensity(),
            background: default_background(),
            jitter: default_jitter(),
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 4 {
            return Err(Error::Config(format!(
                "the synthetic task has exactly 4 classes, got {}",
                self.num_classes
            )));
        }
        if self.n_min < 2 || self.n_max < self.n_min {
            return Err(Error::Config(format!(
                "slice range [{}, {}] must satisfy 2 <= n_min <= n_max",
                self.n_min, self.n_max
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("slices must be at least 8x8".into()));
        }
        if self.depths.iter().any(|d| !(0.0..=1.0).contains(d)) || self.depths[0] == self.depths[1] {
            return Err(Error::Config("depths must be two distinct values in [0, 1]".into()));
        }
        if !(self.lesion_width > 0.0) || self.noise_level < 0.0 {
            return Err(Error::Config("lesion_width must be > 0 and noise_level >= 0".into()));
        }
        Ok(())
    }

    /// (template, depth index) of a class.
    pub fn class_layout(class: usize) -> (LesionPattern, usize) {
        let pattern = if class < 2 {
            LesionPattern::SingleBlob
        } else {
            LesionPattern::DoubleBlob
        };
        (pattern, class % 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub id: String,
    /// (N, H, W), values in [0, 1].
    pub slices: Tensor,
    pub label: usize,
    pub split: Split,
}

impl Volume {
    pub fn n_slices(&self) -> usize {
        self.slices.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub file: String,
    pub n_slices: usize,
    pub height: usize,
    pub width: usize,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub task: SyntheticTaskSpec,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Json {
            context: format!("manifest {}", path.display()),
            source: e,
        })?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported manifest format version {}",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            context: "manifest".into(),
            source: e,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

// 3x3 box blur with edge clamping.
fn box_blur(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for dr in [-1i64, 0, 1] {
                for dc in [-1i64, 0, 1] {
                    let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                    let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
                    s += src[rr * w + cc];
                }
            }
            out[r * w + c] = s / 9.0;
        }
    }
    out
}

/// Deterministic volume for one sample; the stream is keyed by the id.
pub fn generate_volume(spec: &SyntheticTaskSpec, id: &str, label: usize, split: Split, seed: u64) -> Result<Volume> {
    spec.validate()?;
    if label >= spec.num_classes {
        return Err(Error::InvalidInput(format!("label {label} out of range")));
    }
    let mut rng = RngStream::new(seed, fnv1a(id.as_bytes()));
    let (h, w) = (spec.height, spec.width);
    let n = spec.n_min + rng.below(spec.n_max - spec.n_min + 1);
    let (pattern, depth_idx) = SyntheticTaskSpec::class_layout(label);
    let center = spec.depths[depth_idx] * (n - 1) as f64;
    let half = spec.lesion_width * n as f64;
    let j = spec.jitter as i64;
    let mut jit = || (rng.below(2 * spec.jitter + 1) as i64 - j) as f64;
    let (dy, dx) = (jit(), jit());
    let cy = h as f64 / 2.0 + dy;
    let blobs: Vec<(f64, f64)> = match pattern {
        LesionPattern::SingleBlob => vec![(cy, w as f64 / 2.0 + dx)],
        LesionPattern::DoubleBlob => vec![(cy, w as f64 / 4.0 + dx), (cy, 3.0 * w as f64 / 4.0 + dx)],
    };
    let sigma = h as f64 / 10.0;
    // blurring a unit-variance field over 3x3 divides its std by 3
    let noise_gain = 3.0 * spec.noise_level;
    let mut data = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let mut slice: Vec<f64> = if spec.noise_level > 0.0 {
            let raw: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
            box_blur(&raw, h, w)
                .into_iter()
                .map(|v| spec.background + noise_gain * v)
                .collect()
        } else {
            vec![spec.background; h * w]
        };
        let dist = (i as f64 - center).abs();
        if dist <= half {
            let amp = spec.lesion_intensity * (1.0 - 0.5 * dist / half);
            for r in 0..h {
                for c in 0..w {
                    let v: f64 = blobs
                        .iter()
                        .map(|&(by, bx)| {
                            let d2 = (r as f64 - by).powi(2) + (c as f64 - bx).powi(2);
                            (-d2 / (2.0 * sigma * sigma)).exp()
                        })
                        .sum();
                    slice[r * w + c] += amp * v;
                }
            }
        }
        // stored precision is f32
        data.extend(slice.into_iter().map(|v| v.clamp(0.0, 1.0) as f32 as f64));
    }
    Ok(Volume {
        id: id.to_string(),
        slices: Tensor::new(&[n, h, w], data)?,
        label,
        split,
    })
}

/// Balanced dataset: `counts` samples per class in each split.
pub fn generate_synthetic_dataset(spec: &SyntheticTaskSpec, counts: &SplitCounts, seed: u64) -> Result<Vec<Volume>> {
    spec.validate()?;
    let mut out = Vec::new();
    for split in Split::ALL {
        let per_class = counts.get(split);
        if per_class == 0 {
            return Err(Error::Config(format!(
                "split {} needs at least one sample per class",
                split.name()
            )));
        }
        let mut idx = 0;
        for _ in 0..per_class {
            for label in 0..spec.num_classes {
                let id = format!("{}-{idx:05}", split.name());
                out.push(generate_volume(spec, &id, label, split, seed)?);
                idx += 1;
            }
        }
    }
    Ok(out)
}

/// Raw little-endian f32, C order (slice, row, column), no header.
pub fn write_volume_file(path: &Path, slices: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(slices.numel() * 4);
    for &v in slices.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes every volume plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, spec: &SyntheticTaskSpec, volumes: &[Volume]) -> Result<Manifest> {
    let vol_dir = dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut entries = Vec::with_capacity(volumes.len());
    for v in volumes {
        let file = format!("volumes/{}.f32", v.id);
        write_volume_file(&dir.join(&file), &v.slices)?;
        let s = v.slices.shape();
        entries.push(ManifestEntry {
            id: v.id.clone(),
            file,
            n_slices: s[0],
            height: s[1],
            width: s[2],
            label: v.label,
            split: v.split,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        task: spec.clone(),
        entries,
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn load_volume(manifest_dir: &Path, entry: &ManifestEntry) -> Result<Volume> {
    let path: PathBuf = manifest_dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let n = entry.n_slices * entry.height * entry.width;
    if bytes.len() != n * 4 {
        return Err(Error::CorruptFile {
            path,
            expected: (n * 4) as u64,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Volume {
        id: entry.id.clone(),
        slices: Tensor::new(&[entry.n_slices, entry.height, entry.width], data)?,
        label: entry.label,
        split: entry.split,
    })
}

/// Loads every volume of `split` in manifest order.
pub fn load_split(manifest_path: &Path, manifest: &Manifest, split: Split) -> Result<Vec<Volume>> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    manifest.split(split).map(|e| load_volume(dir, e)).collect()
}

/// `n` distinct indices in `0..total`, drawn from a normal centered on the
/// middle slice (std total/4) rounded to the nearest index, rejecting
/// out-of-range and repeated draws; returned ascending.
pub fn subsample_indices(total: usize, n: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::InvalidInput(format!(
            "cannot pick {n} slices from a volume of {total}"
        )));
    }
    if n == total {
        return Ok((0..total).collect());
    }
    let mean = (total - 1) as f64 / 2.0;
    let std = total as f64 / 4.0;
    let mut taken = vec![false; total];
    let mut count = 0;
    while count < n {
        let x = (mean + std * rng.normal()).round();
        if x < 0.0 || x > (total - 1) as f64 {
            continue;
        }
        let i = x as usize;
        if !taken[i] {
            taken[i] = true;
            count += 1;
        }
    }
    Ok((0..total).filter(|&i| taken[i]).collect())
}

/// Center-biased subsample of an (N, H, W) stack.
pub fn subsample_slices(slices: &Tensor, n: usize, rng: &mut RngStream) -> Result<(Tensor, Vec<usize>)> {
    let s = slices.shape();
    if s.len() != 3 {
        return Err(Error::InvalidInput(format!("expected (N, H, W), got {s:?}")));
    }
    let idx = subsample_indices(s[0], n, rng)?;
    let per = s[1] * s[2];
    let mut data = Vec::with_capacity(n * per);
    for &i in &idx {
        data.extend_from_slice(&slices.data()[i * per..(i + 1) * per]);
    }
    Ok((Tensor::new(&[n, s[1], s[2]], data)?, idx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_brightness: f64,
    pub p_salt_pepper: f64,
    pub p_erasing: f64,
    #[serde(default = "default_brightness")]
    pub brightness_range: (f64, f64),
    #[serde(default = "default_sp_rate")]
    pub max_salt_pepper_rate: f64,
    #[serde(default = "default_erase_area")]
    pub max_erase_area: f64,
}

fn default_brightness() -> (f64, f64) {
    (0.8, 1.25)
}
fn default_sp_rate() -> f64 {
    0.02
}
fn default_erase_area() -> f64 {
    0.2
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_brightness: 0.5,
            p_salt_pepper: 0.5,
            p_erasing: 0.5,
            brightness_range: default_brightness(),
            max_salt_pepper_rate: default_sp_rate(),
            max_erase_area: default_erase_area(),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            p_brightness: 0.0,
            p_salt_pepper: 0.0,
            p_erasing: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.top..self.top + self.height).contains(&r) && (self.left..self.left + self.width).contains(&c)
    }
}

/// What an [`augment`] call applied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentRecord {
    pub brightness: Option<f64>,
    pub salt_pepper_rate: Option<f64>,
    pub erased: Option<Rect>,
}

fn sample_rect(h: usize, w: usize, max_area: f64, rng: &mut RngStream) -> Rect {
    let area = rng.uniform_range(0.02, max_area.max(0.02)) * (h * w) as f64;
    let aspect = rng.uniform_range(0.5f64.ln(), 2f64.ln()).exp();
    let rh = ((area * aspect).sqrt().floor() as usize).clamp(1, h);
    let mut rw = ((area / aspect).sqrt().floor() as usize).clamp(1, w);
    while rw > 1 && (rh * rw) as f64 > max_area * (h * w) as f64 {
        rw -= 1;
    }
    Rect {
        top: rng.below(h - rh + 1),
        left: rng.below(w - rw + 1),
        height: rh,
        width: rw,
    }
}

/// Per-volume brightness scaling, salt/pepper flips and one erased
/// rectangle (filled with 0.5, same place on every slice), each applied
/// with its own probability. Output stays in [0, 1].
pub fn augment(slices: &Tensor, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<(Tensor, AugmentRecord)> {
    let s = slices.shape();
    if s.len() != 3 {
        return Err(Error::InvalidInput(format!("expected (n, H, W), got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = slices.clone();
    let mut rec = AugmentRecord::default();
    if rng.bernoulli(cfg.p_brightness) {
        let (lo, hi) = cfg.brightness_range;
        let f = rng.uniform_range(lo, hi);
        out.data_mut().iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
        rec.brightness = Some(f);
    }
    if rng.bernoulli(cfg.p_salt_pepper) {
        let rate = rng.uniform() * cfg.max_salt_pepper_rate;
        for v in out.data_mut() {
            if rng.uniform() < rate {
                *v = if rng.uniform() < 0.5 { 0.0 } else { 1.0 };
            }
        }
        rec.salt_pepper_rate = Some(rate);
    }
    if rng.bernoulli(cfg.p_erasing) {
        let rect = sample_rect(h, w, cfg.max_erase_area, rng);
        let per = h * w;
        for chunk in out.data_mut().chunks_mut(per) {
            for r in rect.top..rect.top + rect.height {
                chunk[r * w + rect.left..r * w + rect.left + rect.width].fill(0.5);
            }
        }
        rec.erased = Some(rect);
    }
    Ok((out, rec))
}
