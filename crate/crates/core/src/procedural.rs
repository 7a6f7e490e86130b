//! Seeded procedural scenes: textured color images paired with smooth depth
//! fields, for training and testing without an external depth dataset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{GrayMap, RgbImage};

#[derive(Clone, Debug)]
pub struct Scene {
    pub image: RgbImage,
    /// Depth in `[0, 1]`, smooth and monotone along a random direction.
    pub depth: GrayMap,
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    // Saturated colors: one channel low, one high.
    let mut c = [rng.gen_range(0.0..0.3), rng.gen_range(0.5..1.0), rng.gen_range(0.0..1.0)];
    for i in (1..3).rev() {
        c.swap(i, rng.gen_range(0..=i));
    }
    c
}

#[derive(Clone, Copy)]
enum Texture {
    Stripes { freq: f64, angle: f64 },
    Checker { cell: f64 },
    Grain,
}

struct Region {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    ellipse: bool,
    color: [f64; 3],
    texture: Texture,
    contrast: f64,
}

impl Region {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = ((y - self.cy) / self.ry, (x - self.cx) / self.rx);
        if self.ellipse {
            dy * dy + dx * dx <= 1.0
        } else {
            dy.abs() <= 1.0 && dx.abs() <= 1.0
        }
    }
}

fn texture_value(t: Texture, y: f64, x: f64, grain: f64) -> f64 {
    match t {
        Texture::Stripes { freq, angle } => (freq * (x * angle.cos() + y * angle.sin())).sin(),
        Texture::Checker { cell } => {
            if ((y / cell).floor() + (x / cell).floor()) as i64 % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
        Texture::Grain => grain,
    }
}

/// A `height`×`width` scene determined entirely by `seed`.
pub fn scene(height: usize, width: usize, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (height as f64, width as f64);
    let scale = hf.min(wf);

    let base = random_color(&mut rng);
    let base_tex = Texture::Stripes {
        freq: rng.gen_range(0.3..1.2),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    };
    let regions: Vec<Region> = (0..rng.gen_range(6..14))
        .map(|_| Region {
            cy: rng.gen_range(0.0..hf),
            cx: rng.gen_range(0.0..wf),
            ry: rng.gen_range(0.08..0.3) * scale,
            rx: rng.gen_range(0.08..0.3) * scale,
            ellipse: rng.gen_bool(0.5),
            color: random_color(&mut rng),
            texture: match rng.gen_range(0..3) {
                0 => Texture::Stripes {
                    freq: rng.gen_range(0.3..1.5),
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                },
                1 => Texture::Checker {
                    cell: rng.gen_range(2.0..6.0),
                },
                _ => Texture::Grain,
            },
            contrast: rng.gen_range(0.25..0.6),
        })
        .collect();

    let grain: Vec<f64> = (0..height * width).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let image = RgbImage::from_fn(height, width, |y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let g = grain[y * width + x];
        let (color, tex, contrast) = regions
            .iter()
            .rev()
            .find(|r| r.contains(yf, xf))
            .map(|r| (r.color, r.texture, r.contrast))
            .unwrap_or((base, base_tex, 0.3));
        let shade = 1.0 + contrast * texture_value(tex, yf, xf, g) + 0.1 * g;
        color.map(|c| (c * shade).clamp(0.0, 1.0))
    });

    // Linear ramp along a random direction plus a gentle bump.
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let bump_y = rng.gen_range(0.0..hf);
    let bump_x = rng.gen_range(0.0..wf);
    let bump_r = rng.gen_range(0.3..0.6) * scale;
    let bump_h = rng.gen_range(-0.2..0.2);
    let raw = GrayMap::from_fn(height, width, |y, x| {
        let (yf, xf) = (y as f64 / scale, x as f64 / scale);
        let r2 = ((y as f64 - bump_y).powi(2) + (x as f64 - bump_x).powi(2)) / (bump_r * bump_r);
        yf * dy + xf * dx + bump_h * (-r2).exp()
    });
    let (lo, hi) = raw.min_max();
    let span = (hi - lo).max(f64::EPSILON);
    let near = rng.gen_range(0.0..0.3);
    let depth = GrayMap::from_fn(height, width, |y, x| near + (1.0 - near) * (raw.get(y, x) - lo) / span);
    Scene { image, depth }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_seeded_and_in_range() {
        let a = scene(40, 50, 3);
        let b = scene(40, 50, 3);
        assert_eq!(a.image, b.image);
        assert_eq!(a.depth, b.depth);
        assert_ne!(scene(40, 50, 4).image, a.image);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (lo, hi) = a.depth.min_max();
        assert!(lo >= 0.0 && (hi - 1.0).abs() < 1e-12);
    }
}
