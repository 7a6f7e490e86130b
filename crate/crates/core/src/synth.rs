//! Labeled training patches from clean image + depth pairs.
//!
//! Per source image: draw one `(beta, A)`, normalize depth, synthesize the
//! hazy image, cut overlapping patches, drop smooth patches and patches with
//! too much missing depth, and label survivors with their mean transmittance
//! and the image's airlight.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::haze::{synthesize_haze, transmittance_from_depth, Airlight, ScatteringCoefficient, TransmittanceMap};
use crate::image::{read_gray, read_image, GrayMap, RgbImage};
use crate::patch::{axis_origins, PatchLabel, PatchSample, DEFAULT_PATCH_SIZE, DEFAULT_STRIDE, DEFAULT_VARIANCE_THRESHOLD};

pub const DEFAULT_MAX_MISSING_DEPTH: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthItem {
    pub image: RgbImage,
    pub depth: GrayMap,
    /// 1 where depth is known, 0 where it is missing.
    pub valid: GrayMap,
}

impl DepthItem {
    pub fn new(image: RgbImage, depth: GrayMap, valid: Option<GrayMap>) -> Result<Self> {
        image.ensure_same_dims(depth.dims())?;
        let valid = match valid {
            Some(v) => {
                image.ensure_same_dims(v.dims())?;
                v
            }
            None => GrayMap::filled(depth.height(), depth.width(), 1.0),
        };
        if valid.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("validity mask must contain only 0 and 1"));
        }
        for (d, v) in depth.data().iter().zip(valid.data()) {
            if *v == 1.0 && *d < 0.0 {
                return Err(Error::invalid(format!("negative depth {d} at a valid pixel")));
            }
        }
        Ok(DepthItem { image, depth, valid })
    }

    /// Depth divided by its largest valid value; missing pixels take the mean
    /// normalized valid depth.
    pub fn normalized_depth(&self) -> Result<GrayMap> {
        let valid: Vec<f64> = self
            .depth
            .data()
            .iter()
            .zip(self.valid.data())
            .filter(|(_, &v)| v == 1.0)
            .map(|(&d, _)| d)
            .collect();
        if valid.is_empty() {
            return Err(Error::Empty("depth item has no valid depth pixels".into()));
        }
        let max = valid.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        let fill = valid.iter().sum::<f64>() / valid.len() as f64 * scale;
        let data = self
            .depth
            .data()
            .iter()
            .zip(self.valid.data())
            .map(|(&d, &v)| if v == 1.0 { d * scale } else { fill })
            .collect();
        GrayMap::new(self.depth.height(), self.depth.width(), data)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthDataset {
    pub items: Vec<DepthItem>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub beta_range: (f64, f64),
    /// Per-channel range of the airlight draw.
    pub airlight_range: (f64, f64),
    pub patch_size: usize,
    pub stride: usize,
    pub variance_threshold: f64,
    pub max_missing_depth_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            beta_range: (0.5, 1.0),
            airlight_range: (0.7, 1.0),
            patch_size: DEFAULT_PATCH_SIZE,
            stride: DEFAULT_STRIDE,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            max_missing_depth_fraction: DEFAULT_MAX_MISSING_DEPTH,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (b0, b1) = self.beta_range;
        if !(b0.is_finite() && b1.is_finite() && 0.0 < b0 && b0 <= b1) {
            return Err(Error::invalid(format!("beta range ({b0}, {b1}) must satisfy 0 < low <= high")));
        }
        let (a0, a1) = self.airlight_range;
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::invalid(format!("airlight range ({a0}, {a1}) must lie in (0, 1]")));
        }
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::invalid("patch size and stride must be positive"));
        }
        if !(self.variance_threshold >= 0.0) {
            return Err(Error::invalid("variance threshold must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.max_missing_depth_fraction) {
            return Err(Error::invalid("missing-depth fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Draws `beta ~ U(beta_range)` and each airlight channel independently from
/// `U(airlight_range)`.
pub fn sample_haze_params(config: &SynthConfig, rng: &mut impl Rng) -> Result<(ScatteringCoefficient, Airlight)> {
    let (b0, b1) = config.beta_range;
    let (a0, a1) = config.airlight_range;
    let beta = ScatteringCoefficient::new(rng.gen_range(b0..=b1))?;
    let a = Airlight::new([rng.gen_range(a0..=a1), rng.gen_range(a0..=a1), rng.gen_range(a0..=a1)])?;
    Ok((beta, a))
}

/// Mean transmittance over the `size`×`size` footprint at `origin`.
pub fn label_patch(t_map: &TransmittanceMap, origin: (usize, usize), size: usize) -> Result<f64> {
    let (h, w) = t_map.dims();
    let (r, c) = origin;
    if size == 0 || r + size > h || c + size > w {
        return Err(Error::invalid(format!("{size}x{size} footprint at {origin:?} exceeds {h}x{w}")));
    }
    let mut sum = 0.0;
    for y in r..r + size {
        for x in c..c + size {
            sum += t_map.get(y, x);
        }
    }
    Ok(sum / (size * size) as f64)
}

/// Counts of what happened to the extracted patches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub extracted: usize,
    pub smooth: usize,
    pub missing_depth: usize,
    pub kept: usize,
}

impl std::ops::AddAssign for FilterStats {
    fn add_assign(&mut self, o: Self) {
        self.extracted += o.extracted;
        self.smooth += o.smooth;
        self.missing_depth += o.missing_depth;
        self.kept += o.kept;
    }
}

/// Patches of one item hazed with the given `(beta, A)`.
pub fn item_patches(
    item: &DepthItem,
    beta: ScatteringCoefficient,
    airlight: Airlight,
    config: &SynthConfig,
) -> Result<(Vec<PatchSample>, FilterStats)> {
    let t_map = transmittance_from_depth(&item.normalized_depth()?, beta)?;
    let hazy = synthesize_haze(&item.image, &t_map, airlight)?;
    let (h, w) = hazy.dims();
    let size = config.patch_size;
    if h < size || w < size {
        return Err(Error::ImageTooSmall { height: h, width: w, min: size });
    }
    let mut stats = FilterStats::default();
    let mut kept = Vec::new();
    let area = (size * size) as f64;
    for r in axis_origins(h, size, config.stride) {
        for c in axis_origins(w, size, config.stride) {
            stats.extracted += 1;
            let patch = PatchSample::crop(&hazy, (r, c), size)?;
            if patch.intensity_variance() <= config.variance_threshold {
                stats.smooth += 1;
                continue;
            }
            let missing = (r..r + size)
                .flat_map(|y| (c..c + size).map(move |x| (y, x)))
                .filter(|&(y, x)| item.valid.get(y, x) == 0.0)
                .count();
            if missing as f64 / area > config.max_missing_depth_fraction {
                stats.missing_depth += 1;
                continue;
            }
            let t = label_patch(&t_map, (r, c), size)?;
            kept.push(patch.with_label(PatchLabel { t, airlight }));
        }
    }
    stats.kept = kept.len();
    Ok((kept, stats))
}

fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Labeled patches for every item, in item order. Each item draws its haze
/// parameters from its own stream of the master seed.
pub fn build_training_set(dataset: &DepthDataset, config: &SynthConfig) -> Result<(Vec<PatchSample>, FilterStats)> {
    config.validate()?;
    if dataset.items.is_empty() {
        return Err(Error::Empty("depth dataset has no items".into()));
    }
    let per_item: Vec<Result<(Vec<PatchSample>, FilterStats)>> = dataset
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let (beta, a) = sample_haze_params(config, &mut item_rng(config.seed, i))?;
            item_patches(item, beta, a, config)
        })
        .collect();
    let mut patches = Vec::new();
    let mut stats = FilterStats::default();
    for r in per_item {
        let (p, s) = r?;
        patches.extend(p);
        stats += s;
    }
    Ok((patches, stats))
}

/// Reads a manifest: one `image depth [validity-mask]` triple per line,
/// paths relative to the manifest's directory. Blank lines and lines starting
/// with `#` are ignored. Mask pixels above one half count as valid depth.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DepthDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| Error::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &str| -> PathBuf { base.join(p) };
    let mut items = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                reason: format!("line {}: expected 2 or 3 paths, found {}", n + 1, fields.len()),
            });
        }
        let image = read_image(resolve(fields[0]))?;
        let depth = read_gray(resolve(fields[1]))?;
        let valid = fields
            .get(2)
            .map(|m| -> Result<GrayMap> {
                let m = read_gray(resolve(m))?;
                let data = m.data().iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
                GrayMap::new(m.height(), m.width(), data)
            })
            .transpose()?;
        items.push(DepthItem::new(image, depth, valid)?);
    }
    Ok(DepthDataset { items })
}

const SET_MAGIC: &[u8; 8] = b"HZPATCH1";

/// Training-set container, little-endian throughout:
///
/// ```text
/// [u8; 8] "HZPATCH1"
/// u64     patch count
/// u64     patch size
/// per patch: u64 row, u64 col, f64 t, f64 A[3], f64 pixels[size * size * 3] (HWC)
/// ```
pub fn write_training_set(patches: &[PatchSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let size = patches.first().map_or(DEFAULT_PATCH_SIZE, |p| p.size);
    let unwritable = |source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(unwritable)?;
    let mut out = BufWriter::new(file);
    let mut put = |bytes: &[u8]| out.write_all(bytes);
    let mut write = || -> std::io::Result<()> {
        put(SET_MAGIC)?;
        put(&(patches.len() as u64).to_le_bytes())?;
        put(&(size as u64).to_le_bytes())?;
        for p in patches {
            let label = p.label.ok_or_else(|| std::io::Error::other("unlabeled patch in training set"))?;
            if p.size != size {
                return Err(std::io::Error::other("mixed patch sizes in training set"));
            }
            put(&(p.origin.0 as u64).to_le_bytes())?;
            put(&(p.origin.1 as u64).to_le_bytes())?;
            put(&label.t.to_le_bytes())?;
            for a in label.airlight.rgb() {
                put(&a.to_le_bytes())?;
            }
            for v in &p.pixels {
                put(&v.to_le_bytes())?;
            }
        }
        Ok(())
    };
    write().map_err(unwritable)?;
    out.flush().map_err(unwritable)
}

pub fn read_training_set(path: impl AsRef<Path>) -> Result<Vec<PatchSample>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let corrupt = |reason: String| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    };
    if !bytes.starts_with(SET_MAGIC) {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "missing training-set signature".into(),
        });
    }
    let mut words = bytes[SET_MAGIC.len()..].chunks_exact(8);
    let mut next = |what: &str| -> Result<[u8; 8]> {
        words
            .next()
            .map(|c| c.try_into().expect("8 bytes"))
            .ok_or_else(|| corrupt(format!("truncated at {what}")))
    };
    let count = u64::from_le_bytes(next("count")?) as usize;
    let size = u64::from_le_bytes(next("patch size")?) as usize;
    let values = size * size * 3;
    let expected = SET_MAGIC.len() + 16 + count.saturating_mul((6 + values) * 8);
    if bytes.len() != expected {
        return Err(corrupt(format!("expected {expected} bytes for {count} patches, found {}", bytes.len())));
    }
    let mut patches = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("patch {i}");
        let row = u64::from_le_bytes(next(&what)?) as usize;
        let col = u64::from_le_bytes(next(&what)?) as usize;
        let t = f64::from_le_bytes(next(&what)?);
        let mut a = [0.0; 3];
        for v in &mut a {
            *v = f64::from_le_bytes(next(&what)?);
        }
        let pixels = (0..values)
            .map(|_| next(&what).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        if !(0.0..=1.0).contains(&t) {
            return Err(corrupt(format!("patch {i}: label t = {t} outside [0, 1]")));
        }
        let airlight = Airlight::new(a).map_err(|e| corrupt(format!("patch {i}: {e}")))?;
        patches.push(PatchSample {
            pixels,
            size,
            origin: (row, col),
            label: Some(PatchLabel { t, airlight }),
        });
    }
    Ok(patches)
}
