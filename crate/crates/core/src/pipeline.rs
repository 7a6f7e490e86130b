//! End-to-end dehazing: patches, per-patch estimates, aggregation,
//! interpolation and radiance recovery.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::haze::{recover_radiance, Airlight, TransmittanceMap};
use crate::image::RgbImage;
use crate::interp::{solve_interpolation, InterpolationConfig};
use crate::nn::{forward, EstimatorOutput, NetworkParams};
use crate::patch::{
    aggregate, extract_patches, variance_filter, PatchEstimate, PatchSample, DEFAULT_PATCH_SIZE, DEFAULT_STRIDE,
    DEFAULT_VARIANCE_THRESHOLD,
};

/// Anything that maps a hazy patch to `(t, A)`.
pub trait PatchEstimator: Sync {
    fn estimate(&self, patch: &PatchSample) -> Result<EstimatorOutput>;
}

impl PatchEstimator for NetworkParams {
    fn estimate(&self, patch: &PatchSample) -> Result<EstimatorOutput> {
        forward(self, patch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DehazeConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub variance_threshold: f64,
    pub interpolation: InterpolationConfig,
}

impl Default for DehazeConfig {
    fn default() -> Self {
        DehazeConfig {
            patch_size: DEFAULT_PATCH_SIZE,
            stride: DEFAULT_STRIDE,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            interpolation: InterpolationConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dehazed {
    /// Recovered radiance, not yet clamped.
    pub radiance: RgbImage,
    pub transmittance: TransmittanceMap,
    pub airlight: Airlight,
    pub patches_used: usize,
    /// True when no patch passed the variance filter and all patches were used.
    pub fallback: bool,
}

pub fn dehaze(hazy: &RgbImage, estimator: &impl PatchEstimator, config: &DehazeConfig) -> Result<Dehazed> {
    config.interpolation.validate()?;
    if config.stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let (h, w) = hazy.dims();
    let all = extract_patches(hazy, config.patch_size, config.stride)?;
    let total = all.len();
    let mut patches = variance_filter(all.clone(), config.variance_threshold);
    let fallback = patches.is_empty();
    if fallback {
        log::warn!("no patch exceeds variance {}; estimating on all {total} patches", config.variance_threshold);
        patches = all;
    }
    log::info!("estimating {} of {total} patches", patches.len());
    let estimates = patches
        .par_iter()
        .map(|p| {
            let out = estimator.estimate(p)?.clamped();
            Ok(PatchEstimate {
                origin: p.origin,
                t: out.t,
                airlight: out.a,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sparse = aggregate(&estimates, config.patch_size, h, w)?;
    let transmittance = solve_interpolation(&sparse, hazy, &config.interpolation)?;
    let radiance = recover_radiance(hazy, &transmittance, sparse.airlight)?;
    Ok(Dehazed {
        radiance,
        transmittance,
        airlight: sparse.airlight,
        patches_used: estimates.len(),
        fallback,
    })
}
