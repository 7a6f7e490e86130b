//! Homogeneous atmospheric scattering: `I = J t + (1 - t) A` with
//! `t = exp(-beta d)`, and its inverse with a transmittance floor.

use crate::error::{Error, Result};
use crate::image::{GrayMap, RgbImage};

/// Lower bound on transmittance during radiance recovery.
pub const MIN_TRANSMITTANCE: f64 = 0.1;

/// Global environmental illumination, each channel in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Airlight([f64; 3]);

impl Airlight {
    pub fn new(rgb: [f64; 3]) -> Result<Self> {
        for v in rgb {
            if !(v.is_finite() && v > 0.0 && v <= 1.0) {
                return Err(Error::invalid(format!("airlight channel {v} outside (0, 1]")));
            }
        }
        Ok(Airlight(rgb))
    }

    pub fn gray(v: f64) -> Result<Self> {
        Self::new([v; 3])
    }

    /// Clamps each channel into `(0, 1]`; non-finite channels become 1.
    pub fn saturating(rgb: [f64; 3]) -> Self {
        Airlight(rgb.map(|v| if v.is_finite() { v.clamp(AIRLIGHT_FLOOR, 1.0) } else { 1.0 }))
    }

    pub fn rgb(&self) -> [f64; 3] {
        self.0
    }
}

/// Smallest airlight channel produced by clamping.
pub const AIRLIGHT_FLOOR: f64 = 1e-6;

/// Per-pixel transmittance, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransmittanceMap(GrayMap);

impl TransmittanceMap {
    pub fn new(map: GrayMap) -> Result<Self> {
        if let Some(v) = map.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("transmittance {v} outside [0, 1]")));
        }
        Ok(TransmittanceMap(map))
    }

    pub fn filled(height: usize, width: usize, t: f64) -> Result<Self> {
        Self::new(GrayMap::filled(height, width, t))
    }

    pub fn as_map(&self) -> &GrayMap {
        &self.0
    }

    pub fn into_map(self) -> GrayMap {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x)
    }
}

/// Scattering coefficient β, in inverse depth units.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ScatteringCoefficient(f64);

impl ScatteringCoefficient {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta >= 0.0) {
            return Err(Error::invalid(format!("scattering coefficient {beta} must be finite and >= 0")));
        }
        Ok(ScatteringCoefficient(beta))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn transmittance_from_depth(depth: &GrayMap, beta: ScatteringCoefficient) -> Result<TransmittanceMap> {
    if let Some(d) = depth.data().iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::invalid(format!("depth {d} must be finite and >= 0")));
    }
    let data = depth.data().iter().map(|d| (-beta.0 * d).exp()).collect();
    TransmittanceMap::new(GrayMap::new(depth.height(), depth.width(), data)?)
}

pub fn synthesize_haze(clear: &RgbImage, t: &TransmittanceMap, a: Airlight) -> Result<RgbImage> {
    clear.ensure_same_dims(t.dims())?;
    let (h, w) = clear.dims();
    let a = a.rgb();
    Ok(RgbImage::from_fn(h, w, |y, x| {
        let j = clear.pixel(y, x);
        let t = t.get(y, x);
        [0, 1, 2].map(|c| j[c] * t + (1.0 - t) * a[c])
    }))
}

/// Inverts the scattering model with `t` floored at [`MIN_TRANSMITTANCE`].
/// The result is not clamped; out-of-gamut values survive until written.
pub fn recover_radiance(hazy: &RgbImage, t: &TransmittanceMap, a: Airlight) -> Result<RgbImage> {
    hazy.ensure_same_dims(t.dims())?;
    let (h, w) = hazy.dims();
    let a = a.rgb();
    Ok(RgbImage::from_fn(h, w, |y, x| {
        let i = hazy.pixel(y, x);
        let t = t.get(y, x).max(MIN_TRANSMITTANCE);
        if t == 1.0 {
            // a + (i - a) does not round-trip exactly
            return i;
        }
        [0, 1, 2].map(|c| a[c] + (i[c] - a[c]) / t)
    }))
}
