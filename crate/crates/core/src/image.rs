//! Pixel containers, raster I/O and full-reference quality metrics.
//!
//! Intensities are stored as `f64` in a nominal `[0, 1]` range. Files are
//! 8-bit (or 16-bit on read) PNG and binary PNM; values outside the gamut
//! are kept in memory and clamped only when written.

use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageError, ImageFormat, ImageReader};

use crate::error::{Error, Result};

/// An H×W×3 image, channels interleaved in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be at least 1x1"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::ShapeMismatch {
                context: "rgb image data".into(),
                expected: height * width * 3,
                actual: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite pixel value {v}")));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    /// Uniform image with every pixel set to `rgb`.
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be at least 1x1");
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        RgbImage {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Copy with every channel clamped to `[0, 1]`.
    pub fn clamped(&self) -> RgbImage {
        RgbImage {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Rec. 601 luma, `0.299 R + 0.587 G + 0.114 B`.
    pub fn luminance(&self) -> GrayMap {
        let data = self
            .pixels()
            .map(|[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect();
        GrayMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn transpose(&self) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |y, x| self.pixel(x, y))
    }

    pub(crate) fn ensure_same_dims(&self, other: (usize, usize)) -> Result<()> {
        if self.dims() != other {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other,
            });
        }
        Ok(())
    }
}

/// A single-channel H×W field: depth, masks and transmittance carriers.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl GrayMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("map dimensions must be at least 1x1"));
        }
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                context: "gray map data".into(),
                expected: height * width,
                actual: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite map value {v}")));
        }
        Ok(GrayMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "map dimensions must be at least 1x1");
        GrayMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "map dimensions must be at least 1x1");
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        GrayMap {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn transpose(&self) -> GrayMap {
        GrayMap::from_fn(self.width, self.height, |y, x| self.get(x, y))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|source| Error::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|source| Error::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: match other {
                    Some(f) => format!("{f:?} rasters are not supported"),
                    None => "unrecognized file signature".into(),
                },
            })
        }
    }
    reader.decode().map_err(|e| match e {
        ImageError::Unsupported(u) => Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: u.to_string(),
        },
        ImageError::IoError(source) => Error::CorruptFile {
            path: path.to_path_buf(),
            reason: source.to_string(),
        },
        other => Error::CorruptFile {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Reads an 8- or 16-bit RGB PNG or a binary PPM, scaling channels to `[0, 1]`.
///
/// Grayscale rasters are accepted and replicated into all three channels.
pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageRgb8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageRgb16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        DynamicImage::ImageLuma8(buf) => buf
            .into_raw()
            .into_iter()
            .flat_map(|v| [v as f64 / 255.0; 3])
            .collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .flat_map(|v| [v as f64 / 65535.0; 3])
            .collect(),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("color type {:?} (alpha and float rasters are not supported)", other.color()),
            })
        }
    };
    RgbImage::new(height, width, data)
}

/// Reads a single-channel PGM or PNG (8 or 16 bit), scaled to `[0, 1]`.
pub fn read_gray(path: impl AsRef<Path>) -> Result<GrayMap> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
        other => {
            return Err(Error::UnsupportedFormat {
                path: path.to_path_buf(),
                reason: format!("expected a grayscale raster, found {:?}", other.color()),
            })
        }
    };
    GrayMap::new(height, width, data)
}

#[inline]
pub(crate) fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub(crate) fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

fn encode_png(path: &Path, img: DynamicImage) -> Result<()> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Unwritable {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })?;
    write_bytes(path, &out.into_inner())
}

/// Writes an 8-bit PNG (`.png`) or binary PPM (`.ppm`). Channels are clamped
/// to `[0, 1]` and quantized with `round(v * 255)`.
pub fn write_image(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = image.data.iter().map(|&v| quantize8(v)).collect();
    match extension(path).as_deref() {
        Some("png") => {
            let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, bytes)
                .expect("buffer length matches dimensions");
            encode_png(path, DynamicImage::ImageRgb8(buf))
        }
        Some("ppm") => {
            let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
            out.extend_from_slice(&bytes);
            write_bytes(path, &out)
        }
        _ => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "output extension must be .png or .ppm".into(),
        }),
    }
}

/// Writes a 16-bit grayscale PNG (`.png`) or PGM with maxval 65535 (`.pgm`).
pub fn write_gray(map: &GrayMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let words: Vec<u16> = map.data.iter().map(|&v| quantize16(v)).collect();
    match extension(path).as_deref() {
        Some("png") => {
            let buf = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(map.width as u32, map.height as u32, words)
                .expect("buffer length matches dimensions");
            encode_png(path, DynamicImage::ImageLuma16(buf))
        }
        Some("pgm") => {
            let mut out = format!("P5\n{} {}\n65535\n", map.width, map.height).into_bytes();
            for w in words {
                out.extend_from_slice(&w.to_be_bytes());
            }
            write_bytes(path, &out)
        }
        _ => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "output extension must be .png or .pgm".into(),
        }),
    }
}

/// Peak signal-to-noise ratio with peak 1.0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    /// The images are identical.
    Infinite,
}

impl Psnr {
    pub fn db(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => fmt::Display::fmt(v, f),
            Psnr::Infinite => f.write_str("inf"),
        }
    }
}

pub fn mse(reference: &RgbImage, test: &RgbImage) -> Result<f64> {
    reference.ensure_same_dims(test.dims())?;
    let sum: f64 = reference
        .data
        .iter()
        .zip(&test.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.data.len() as f64)
}

pub fn psnr(reference: &RgbImage, test: &RgbImage) -> Result<Psnr> {
    let mse = mse(reference, test)?;
    if mse == 0.0 {
        Ok(Psnr::Infinite)
    } else {
        Ok(Psnr::Finite(10.0 * (1.0 / mse).log10()))
    }
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

// Separable "valid" correlation with the SSIM kernel.
fn gaussian_valid(src: &[f64], height: usize, width: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; height * ow];
    for y in 0..height {
        let line = &src[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * rows[(y + j) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM of the luminance channels over every position of an 11×11
/// Gaussian window (σ = 1.5) that fits inside the image.
pub fn ssim(reference: &RgbImage, test: &RgbImage) -> Result<f64> {
    reference.ensure_same_dims(test.dims())?;
    let (h, w) = reference.dims();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let x = reference.luminance().into_data();
    let y = test.luminance().into_data();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let k = ssim_kernel();
    let mu_x = gaussian_valid(&x, h, w, &k);
    let mu_y = gaussian_valid(&y, h, w, &k);
    let e_xx = gaussian_valid(&xx, h, w, &k);
    let e_yy = gaussian_valid(&yy, h, w, &k);
    let e_xy = gaussian_valid(&xy, h, w, &k);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cxy = e_xy[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / n as f64)
}
