//! Overlapping patch decomposition, smooth-patch filtering and aggregation of
//! per-patch estimates into a sparse transmittance map and one airlight.

use crate::error::{Error, Result};
use crate::haze::Airlight;
use crate::image::{GrayMap, RgbImage};

pub const DEFAULT_PATCH_SIZE: usize = 15;
pub const DEFAULT_STRIDE: usize = 5;
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.002;

/// Per-channel values may exceed `[0, 1]` by this much before aggregation rejects them.
const T_SLACK: f64 = 1e-6;

/// Ground-truth `(t, A)` attached to a training patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchLabel {
    pub t: f64,
    pub airlight: Airlight,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    /// `size * size * 3` values, channels interleaved, row-major.
    pub pixels: Vec<f64>,
    pub size: usize,
    /// Top-left pixel `(row, col)` in the source image.
    pub origin: (usize, usize),
    pub label: Option<PatchLabel>,
}

impl PatchSample {
    /// Copies the `size`×`size` block at `origin` out of `image`.
    pub fn crop(image: &RgbImage, origin: (usize, usize), size: usize) -> Result<Self> {
        let (h, w) = image.dims();
        let (r, c) = origin;
        if r + size > h || c + size > w {
            return Err(Error::invalid(format!(
                "{size}x{size} patch at {origin:?} does not fit a {h}x{w} image"
            )));
        }
        let mut pixels = Vec::with_capacity(size * size * 3);
        let row_len = size * 3;
        for y in r..r + size {
            let start = (y * w + c) * 3;
            pixels.extend_from_slice(&image.data()[start..start + row_len]);
        }
        Ok(PatchSample {
            pixels,
            size,
            origin,
            label: None,
        })
    }

    pub fn with_label(mut self, label: PatchLabel) -> Self {
        self.label = Some(label);
        self
    }

    /// Population variance of the per-pixel channel mean.
    pub fn intensity_variance(&self) -> f64 {
        let n = (self.size * self.size) as f64;
        let gray: Vec<f64> = self
            .pixels
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect();
        // Shifted by the first value so constant patches give exactly zero.
        let shift = gray[0];
        let mean = gray.iter().map(|g| g - shift).sum::<f64>() / n;
        gray.iter().map(|g| (g - shift - mean).powi(2)).sum::<f64>() / n
    }
}

/// Regular origins `0, stride, 2 stride, ...` plus `len - size` when the grid
/// stops short of the far edge.
pub fn axis_origins(len: usize, size: usize, stride: usize) -> Vec<usize> {
    assert!(stride > 0 && size > 0 && len >= size);
    let last = len - size;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if *origins.last().expect("at least one origin") != last {
        origins.push(last);
    }
    origins
}

/// Overlapping `size`×`size` patches in row-major origin order; every pixel
/// is covered by at least one patch.
pub fn extract_patches(image: &RgbImage, size: usize, stride: usize) -> Result<Vec<PatchSample>> {
    if size == 0 || stride == 0 {
        return Err(Error::invalid("patch size and stride must be positive"));
    }
    let (h, w) = image.dims();
    if h < size || w < size {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: size,
        });
    }
    let rows = axis_origins(h, size, stride);
    let cols = axis_origins(w, size, stride);
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            patches.push(PatchSample::crop(image, (r, c), size)?);
        }
    }
    Ok(patches)
}

/// Keeps the patches whose intensity variance is strictly above `threshold`.
pub fn variance_filter(patches: Vec<PatchSample>, threshold: f64) -> Vec<PatchSample> {
    patches
        .into_iter()
        .filter(|p| p.intensity_variance() > threshold)
        .collect()
}

/// One patch's estimate, positioned by its origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchEstimate {
    pub origin: (usize, usize),
    pub t: f64,
    pub airlight: [f64; 3],
}

/// Aggregated transmittance anchors `t_tilde` on `mask == 1` and the mean airlight.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseEstimate {
    pub t_tilde: GrayMap,
    pub mask: GrayMap,
    pub airlight: Airlight,
}

impl SparseEstimate {
    pub fn coverage(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m != 0.0).count()
    }
}

/// Averages the `t` of every footprint covering each pixel and the airlight
/// over all estimates.
pub fn aggregate(estimates: &[PatchEstimate], size: usize, height: usize, width: usize) -> Result<SparseEstimate> {
    if estimates.is_empty() {
        return Err(Error::Empty("no patch estimates to aggregate".into()));
    }
    let mut sum = vec![0.0; height * width];
    let mut count = vec![0u32; height * width];
    let mut a_sum = [0.0; 3];
    for e in estimates {
        let (r, c) = e.origin;
        if r + size > height || c + size > width {
            return Err(Error::invalid(format!(
                "footprint at {:?} exceeds {height}x{width}",
                e.origin
            )));
        }
        if !(e.t.is_finite() && (-T_SLACK..=1.0 + T_SLACK).contains(&e.t)) {
            return Err(Error::invalid(format!("patch transmittance {} outside [0, 1]", e.t)));
        }
        let t = e.t.clamp(0.0, 1.0);
        for y in r..r + size {
            let row = y * width;
            for x in c..c + size {
                sum[row + x] += t;
                count[row + x] += 1;
            }
        }
        for (acc, v) in a_sum.iter_mut().zip(e.airlight) {
            *acc += v;
        }
    }
    let n = estimates.len() as f64;
    let t_tilde = sum
        .iter()
        .zip(&count)
        .map(|(&s, &k)| if k > 0 { s / k as f64 } else { 0.0 })
        .collect();
    let mask = count.iter().map(|&k| if k > 0 { 1.0 } else { 0.0 }).collect();
    Ok(SparseEstimate {
        t_tilde: GrayMap::new(height, width, t_tilde)?,
        mask: GrayMap::new(height, width, mask)?,
        airlight: Airlight::saturating(a_sum.map(|s| s / n)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn origins(patches: &[PatchSample]) -> Vec<(usize, usize)> {
        patches.iter().map(|p| p.origin).collect()
    }

    fn grid(axis: &[usize]) -> Vec<(usize, usize)> {
        axis.iter().flat_map(|&r| axis.iter().map(move |&c| (r, c))).collect()
    }

    #[test]
    fn extraction_examples() {
        let img = RgbImage::filled(15, 15, [0.5; 3]);
        assert_eq!(origins(&extract_patches(&img, 15, 5).unwrap()), vec![(0, 0)]);

        let img = RgbImage::filled(25, 25, [0.5; 3]);
        assert_eq!(origins(&extract_patches(&img, 15, 5).unwrap()), grid(&[0, 5, 10]));

        let img = RgbImage::filled(23, 23, [0.5; 3]);
        assert_eq!(origins(&extract_patches(&img, 15, 5).unwrap()), grid(&[0, 5, 8]));
    }

    #[test]
    fn extraction_rejects_small_images() {
        let img = RgbImage::filled(14, 40, [0.5; 3]);
        assert!(matches!(extract_patches(&img, 15, 5), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn crop_copies_pixels() {
        let img = RgbImage::from_fn(20, 20, |y, x| [y as f64 / 20.0, x as f64 / 20.0, 0.0]);
        let p = PatchSample::crop(&img, (3, 4), 15).unwrap();
        assert_eq!(&p.pixels[0..3], &img.pixel(3, 4));
        let last = (14 * 15 + 14) * 3;
        assert_eq!(&p.pixels[last..last + 3], &img.pixel(17, 18));
    }

    #[test]
    fn variance_filter_examples() {
        let flat = PatchSample::crop(&RgbImage::filled(15, 15, [0.3; 3]), (0, 0), 15).unwrap();
        assert!(variance_filter(vec![flat.clone()], 1e-9).is_empty());
        assert!(variance_filter(vec![flat], 0.0).is_empty());

        let img = RgbImage::from_fn(15, 15, |y, x| [((y * 15 + x) % 7) as f64 / 7.0; 3]);
        let textured = PatchSample::crop(&img, (0, 0), 15).unwrap();
        assert_eq!(variance_filter(vec![textured], 0.0).len(), 1);

        // 113 white and 112 black pixels: variance p(1 - p) with p = 113/225.
        let img = RgbImage::from_fn(15, 15, |y, x| if y * 15 + x < 113 { [1.0; 3] } else { [0.0; 3] });
        let half = PatchSample::crop(&img, (0, 0), 15).unwrap();
        let p = 113.0 / 225.0;
        assert!((half.intensity_variance() - p * (1.0 - p)).abs() < 1e-12);
        assert!((half.intensity_variance() - 0.25).abs() < 1e-4);
        assert_eq!(variance_filter(vec![half], DEFAULT_VARIANCE_THRESHOLD).len(), 1);
    }

    #[test]
    fn aggregate_examples() {
        let e = PatchEstimate {
            origin: (2, 3),
            t: 0.7,
            airlight: [0.9, 0.8, 0.7],
        };
        let s = aggregate(&[e], 15, 20, 20).unwrap();
        for y in 0..20 {
            for x in 0..20 {
                let inside = (2..17).contains(&y) && (3..18).contains(&x);
                assert_eq!(s.mask.get(y, x), if inside { 1.0 } else { 0.0 });
                if inside {
                    assert_eq!(s.t_tilde.get(y, x), 0.7);
                }
            }
        }
        assert_eq!(s.airlight.rgb(), [0.9, 0.8, 0.7]);

        let a = PatchEstimate { origin: (0, 0), t: 0.2, airlight: [1.0; 3] };
        let b = PatchEstimate { origin: (5, 5), t: 0.6, airlight: [0.5; 3] };
        let s = aggregate(&[a, b], 15, 20, 20).unwrap();
        assert!((s.t_tilde.get(10, 10) - 0.4).abs() < 1e-15);
        assert_eq!(s.t_tilde.get(0, 0), 0.2);
        assert_eq!(s.t_tilde.get(19, 19), 0.6);
        assert_eq!(s.mask.get(0, 19), 0.0);
        assert_eq!(s.airlight.rgb(), [0.75; 3]);
    }

    #[test]
    fn aggregate_errors_and_clamping() {
        assert!(matches!(aggregate(&[], 15, 20, 20), Err(Error::Empty(_))));
        let out = PatchEstimate { origin: (6, 0), t: 0.5, airlight: [1.0; 3] };
        assert!(aggregate(&[out], 15, 20, 20).is_err());
        let bad = PatchEstimate { origin: (0, 0), t: 1.1, airlight: [1.0; 3] };
        assert!(aggregate(&[bad], 15, 20, 20).is_err());
        let slight = PatchEstimate { origin: (0, 0), t: 1.0 + 5e-7, airlight: [1.5, 0.0, 0.5] };
        let s = aggregate(&[slight], 15, 20, 20).unwrap();
        assert_eq!(s.t_tilde.get(0, 0), 1.0);
        let a = s.airlight.rgb();
        assert!(a[0] == 1.0 && a[1] > 0.0 && a[2] == 0.5);
    }

    #[test]
    fn aggregate_matches_accumulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w, size) = (30, 34, 15);
        let estimates: Vec<PatchEstimate> = (0..10)
            .map(|_| PatchEstimate {
                origin: (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)),
                t: rng.gen(),
                airlight: [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)],
            })
            .collect();
        let s = aggregate(&estimates, size, h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                let covering: Vec<f64> = estimates
                    .iter()
                    .filter(|e| (e.origin.0..e.origin.0 + size).contains(&y) && (e.origin.1..e.origin.1 + size).contains(&x))
                    .map(|e| e.t)
                    .collect();
                if covering.is_empty() {
                    assert_eq!(s.mask.get(y, x), 0.0);
                } else {
                    let mean = covering.iter().sum::<f64>() / covering.len() as f64;
                    assert_eq!(s.mask.get(y, x), 1.0);
                    assert!((s.t_tilde.get(y, x) - mean).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn extraction_covers_every_pixel(h in 15usize..60, w in 15usize..60, stride in 1usize..16) {
            let img = RgbImage::filled(h, w, [0.5; 3]);
            let patches = extract_patches(&img, 15, stride).unwrap();
            let mut covered = vec![false; h * w];
            for p in &patches {
                for y in p.origin.0..p.origin.0 + 15 {
                    for x in p.origin.1..p.origin.1 + 15 {
                        covered[y * w + x] = true;
                    }
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
            let mut sorted = origins(&patches);
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(sorted, origins(&patches));
        }

        #[test]
        fn aggregate_is_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut estimates: Vec<PatchEstimate> = (0..8)
                .map(|_| PatchEstimate {
                    origin: (rng.gen_range(0..=10), rng.gen_range(0..=10)),
                    t: rng.gen(),
                    airlight: [rng.gen_range(0.1..1.0); 3],
                })
                .collect();
            let a = aggregate(&estimates, 15, 25, 25).unwrap();
            estimates.reverse();
            let b = aggregate(&estimates, 15, 25, 25).unwrap();
            prop_assert_eq!(&a.mask, &b.mask);
            for (x, y) in a.t_tilde.data().iter().zip(b.t_tilde.data()) {
                prop_assert!((x - y).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(x));
            }
            for (x, y) in a.airlight.rgb().iter().zip(b.airlight.rgb()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn zero_threshold_drops_only_constant_patches(values in proptest::collection::vec(0u8..3, 225)) {
            let img = RgbImage::from_fn(15, 15, |y, x| [values[y * 15 + x] as f64 / 2.0; 3]);
            let p = PatchSample::crop(&img, (0, 0), 15).unwrap();
            let constant = values.iter().all(|&v| v == values[0]);
            prop_assert_eq!(variance_filter(vec![p], 0.0).is_empty(), constant);
        }
    }
}
