//! Edge-aware completion of a sparse transmittance map.
//!
//! Minimizes
//!
//! ```text
//! psi(t) = sum_x s(x) (t(x) - t~(x))^2 + lambda sum_{x~y} w(x,y) (t(x) - t(y))^2
//! ```
//!
//! over 4-neighbor edges `x~y` with `w = 1 / (|I(x) - I(y)|^2 + eps_w)`. The
//! minimizer solves `(S + lambda L_w) t = S t~`, where `S` is the diagonal mask
//! and `L_w` the weighted graph Laplacian; that system is solved with
//! Jacobi-preconditioned conjugate gradients without assembling a matrix.

use crate::error::{Error, Result};
use crate::haze::TransmittanceMap;
use crate::image::{GrayMap, RgbImage};
use crate::patch::SparseEstimate;

pub const DEFAULT_LAMBDA: f64 = 1e-2;
pub const DEFAULT_EPS_W: f64 = 1e-4;
pub const DEFAULT_CG_TOL: f64 = 1e-8;
pub const DEFAULT_CG_MAX_ITERS: usize = 10_000;

/// One weight per undirected 4-neighbor edge.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessWeights {
    height: usize,
    width: usize,
    /// Edge `(y, x) - (y, x + 1)` at `y * (width - 1) + x`.
    right: Vec<f64>,
    /// Edge `(y, x) - (y + 1, x)` at `y * width + x`.
    down: Vec<f64>,
}

impl SmoothnessWeights {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn right(&self, y: usize, x: usize) -> f64 {
        self.right[y * (self.width - 1) + x]
    }

    #[inline]
    pub fn down(&self, y: usize, x: usize) -> f64 {
        self.down[y * self.width + x]
    }

    /// Every edge as `(pixel index, pixel index, weight)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let w = self.width;
        let horizontal = (0..self.height).flat_map(move |y| (0..w - 1).map(move |x| (y * w + x, y * w + x + 1, self.right(y, x))));
        let vertical = (0..self.height - 1).flat_map(move |y| (0..w).map(move |x| (y * w + x, (y + 1) * w + x, self.down(y, x))));
        horizontal.chain(vertical)
    }

    /// Sum of incident edge weights per pixel, the Laplacian's diagonal.
    pub fn degrees(&self) -> Vec<f64> {
        let mut deg = vec![0.0; self.height * self.width];
        for (a, b, wt) in self.edges() {
            deg[a] += wt;
            deg[b] += wt;
        }
        deg
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpolationConfig {
    pub lambda: f64,
    pub eps_w: f64,
    /// Relative residual `|b - A t| / |b|` at which CG stops.
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        InterpolationConfig {
            lambda: DEFAULT_LAMBDA,
            eps_w: DEFAULT_EPS_W,
            cg_tol: DEFAULT_CG_TOL,
            cg_max_iters: DEFAULT_CG_MAX_ITERS,
        }
    }
}

impl InterpolationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.lambda) {
            return Err(Error::invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !positive(self.eps_w) {
            return Err(Error::invalid(format!("eps_w must be positive, got {}", self.eps_w)));
        }
        if !(positive(self.cg_tol) && self.cg_tol < 1.0) {
            return Err(Error::invalid(format!("cg_tol must lie in (0, 1), got {}", self.cg_tol)));
        }
        if self.cg_max_iters == 0 {
            return Err(Error::invalid("cg_max_iters must be positive"));
        }
        Ok(())
    }
}

fn squared_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]) * (a[c] - b[c])).sum()
}

pub fn build_weights(image: &RgbImage, eps_w: f64) -> Result<SmoothnessWeights> {
    if !(eps_w.is_finite() && eps_w > 0.0) {
        return Err(Error::invalid(format!("eps_w must be positive, got {eps_w}")));
    }
    let (h, w) = image.dims();
    let mut right = Vec::with_capacity(h * w.saturating_sub(1));
    for y in 0..h {
        for x in 0..w - 1 {
            right.push(1.0 / (squared_distance(image.pixel(y, x), image.pixel(y, x + 1)) + eps_w));
        }
    }
    let mut down = Vec::with_capacity(h.saturating_sub(1) * w);
    for y in 0..h - 1 {
        for x in 0..w {
            down.push(1.0 / (squared_distance(image.pixel(y, x), image.pixel(y + 1, x)) + eps_w));
        }
    }
    Ok(SmoothnessWeights {
        height: h,
        width: w,
        right,
        down,
    })
}

// out = S t + lambda L_w t
fn apply_into(t: &[f64], mask: &[f64], weights: &SmoothnessWeights, lambda: f64, out: &mut [f64]) {
    let (h, w) = weights.dims();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let ti = t[i];
            let mut lap = 0.0;
            if x > 0 {
                lap += weights.right(y, x - 1) * (ti - t[i - 1]);
            }
            if x + 1 < w {
                lap += weights.right(y, x) * (ti - t[i + 1]);
            }
            if y > 0 {
                lap += weights.down(y - 1, x) * (ti - t[i - w]);
            }
            if y + 1 < h {
                lap += weights.down(y, x) * (ti - t[i + w]);
            }
            out[i] = mask[i] * ti + lambda * lap;
        }
    }
}

fn check_dims(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// `(S + lambda L_w) t`, computed matrix-free.
pub fn apply_system(t: &GrayMap, mask: &GrayMap, weights: &SmoothnessWeights, lambda: f64) -> Result<GrayMap> {
    check_dims(weights.dims(), t.dims())?;
    check_dims(weights.dims(), mask.dims())?;
    let mut out = vec![0.0; t.data().len()];
    apply_into(t.data(), mask.data(), weights, lambda, &mut out);
    GrayMap::new(t.height(), t.width(), out)
}

/// The objective `psi(t)` evaluated directly from its definition.
pub fn energy(t: &GrayMap, t_tilde: &GrayMap, mask: &GrayMap, weights: &SmoothnessWeights, lambda: f64) -> f64 {
    let data: f64 = t
        .data()
        .iter()
        .zip(t_tilde.data())
        .zip(mask.data())
        .map(|((a, b), s)| s * (a - b) * (a - b))
        .sum();
    let smooth: f64 = weights
        .edges()
        .map(|(i, j, wt)| wt * (t.data()[i] - t.data()[j]).powi(2))
        .sum();
    data + lambda * smooth
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unclamped CG solution together with its convergence record.
#[derive(Clone, Debug, PartialEq)]
pub struct CgSolution {
    pub t: GrayMap,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `(S + lambda L_w) t = S t~` from the masked mean of `t~`, without
/// clamping the result.
pub fn solve_system(sparse: &SparseEstimate, weights: &SmoothnessWeights, config: &InterpolationConfig) -> Result<CgSolution> {
    config.validate()?;
    let dims = weights.dims();
    check_dims(dims, sparse.t_tilde.dims())?;
    check_dims(dims, sparse.mask.dims())?;
    let mask = sparse.mask.data();
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid("mask values must be 0 or 1"));
    }
    let covered = mask.iter().filter(|&&m| m == 1.0).count();
    if covered == 0 {
        return Err(Error::Empty("interpolation mask has no anchored pixels".into()));
    }
    let t_tilde = sparse.t_tilde.data();
    let n = mask.len();
    let b: Vec<f64> = mask.iter().zip(t_tilde).map(|(s, t)| s * t).collect();
    let b_norm = dot(&b, &b).sqrt();
    // Shifted by the first anchor so a constant t~ yields its value exactly.
    let first = mask
        .iter()
        .zip(t_tilde)
        .find(|(&s, _)| s == 1.0)
        .map(|(_, &t)| t)
        .expect("mask is non-empty");
    let masked_mean = first
        + mask
            .iter()
            .zip(t_tilde)
            .filter(|(&s, _)| s == 1.0)
            .map(|(_, &t)| t - first)
            .sum::<f64>()
            / covered as f64;
    let mut x = vec![masked_mean; n];
    if b_norm == 0.0 {
        // t~ = 0 on every anchor; zero is the unique minimizer.
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgSolution {
            t: GrayMap::new(dims.0, dims.1, x)?,
            iterations: 0,
            relative_residual: 0.0,
        });
    }

    let lambda = config.lambda;
    let inv_diag: Vec<f64> = weights
        .degrees()
        .iter()
        .zip(mask)
        .map(|(d, s)| 1.0 / (s + lambda * d))
        .collect();
    let mut ax = vec![0.0; n];
    apply_into(&x, mask, weights, lambda, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut residual = dot(&r, &r).sqrt() / b_norm;
    let mut iterations = 0;
    while residual > config.cg_tol {
        if iterations == config.cg_max_iters {
            return Err(Error::NoConvergence {
                iterations,
                residual,
                tolerance: config.cg_tol,
            });
        }
        apply_into(&p, mask, weights, lambda, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
        residual = dot(&r, &r).sqrt() / b_norm;
    }
    Ok(CgSolution {
        t: GrayMap::new(dims.0, dims.1, x)?,
        iterations,
        relative_residual: residual,
    })
}

/// Fills the unanchored pixels of `sparse` guided by the edges of `image`;
/// the result is clamped to `[0, 1]`.
pub fn solve_interpolation(sparse: &SparseEstimate, image: &RgbImage, config: &InterpolationConfig) -> Result<TransmittanceMap> {
    config.validate()?;
    let weights = build_weights(image, config.eps_w)?;
    let solution = solve_system(sparse, &weights, config)?;
    log::debug!(
        "interpolation converged in {} iterations (relative residual {:.3e})",
        solution.iterations,
        solution.relative_residual
    );
    let (h, w) = solution.t.dims();
    let clamped = solution.t.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    TransmittanceMap::new(GrayMap::new(h, w, clamped)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haze::Airlight;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> RgbImage {
        RgbImage::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    fn sparse(t_tilde: GrayMap, mask: GrayMap) -> SparseEstimate {
        SparseEstimate {
            t_tilde,
            mask,
            airlight: Airlight::gray(1.0).unwrap(),
        }
    }

    // Dense assembly of S + lambda L_w by explicit edge stamping.
    fn dense_operator(mask: &GrayMap, weights: &SmoothnessWeights, lambda: f64) -> Vec<Vec<f64>> {
        let n = mask.data().len();
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = mask.data()[i];
        }
        for (i, j, w) in weights.edges() {
            a[i][i] += lambda * w;
            a[j][j] += lambda * w;
            a[i][j] -= lambda * w;
            a[j][i] -= lambda * w;
        }
        a
    }

    #[test]
    fn constant_image_weights() {
        let img = RgbImage::filled(4, 5, [0.3, 0.6, 0.9]);
        let w = build_weights(&img, 1e-4).unwrap();
        assert_eq!(w.edges().count(), 4 * 4 + 3 * 5);
        assert!(w.edges().all(|(_, _, v)| (v - 1e4).abs() < 1e-8));
    }

    #[test]
    fn unit_color_step_weight() {
        let img = RgbImage::new(1, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let w = build_weights(&img, 1e-4).unwrap();
        assert_eq!(w.right(0, 0), 1.0 / (3.0 + 1e-4));
        assert!(build_weights(&img, 0.0).is_err());
    }

    #[test]
    fn weights_follow_transposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(5, 7, &mut rng);
        let a = build_weights(&img, 1e-4).unwrap();
        let b = build_weights(&img.transpose(), 1e-4).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                assert_eq!(a.right(y, x), b.down(x, y));
            }
        }
        for y in 0..4 {
            for x in 0..7 {
                assert_eq!(a.down(y, x), b.right(x, y));
            }
        }
    }

    #[test]
    fn apply_system_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(6, 6, &mut rng);
        let w = build_weights(&img, 1e-4).unwrap();
        let full = GrayMap::filled(6, 6, 1.0);
        let c = GrayMap::filled(6, 6, 0.37);
        let out = apply_system(&c, &full, &w, 0.5).unwrap();
        for v in out.data() {
            assert!((v - 0.37).abs() < 1e-9);
        }

        let t = GrayMap::from_fn(6, 6, |_, _| rng.gen());
        let mask = GrayMap::from_fn(6, 6, |_, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
        let out = apply_system(&t, &mask, &w, 0.0).unwrap();
        for i in 0..36 {
            assert_eq!(out.data()[i], mask.data()[i] * t.data()[i]);
        }
    }

    #[test]
    fn apply_system_matches_dense_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(5, 5, &mut rng);
        let w = build_weights(&img, 1e-4).unwrap();
        let t = GrayMap::from_fn(5, 5, |_, _| rng.gen());
        let mask = GrayMap::from_fn(5, 5, |_, _| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
        let lambda = 0.3;
        let a = dense_operator(&mask, &w, lambda);
        let out = apply_system(&t, &mask, &w, lambda).unwrap();
        for i in 0..25 {
            let expected: f64 = (0..25).map(|j| a[i][j] * t.data()[j]).sum();
            assert!((out.data()[i] - expected).abs() < 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn apply_system_rejects_shape_mismatch() {
        let w = build_weights(&RgbImage::filled(3, 3, [0.5; 3]), 1e-4).unwrap();
        let t = GrayMap::filled(3, 4, 0.5);
        assert!(apply_system(&t, &GrayMap::filled(3, 4, 1.0), &w, 0.1).is_err());
    }

    #[test]
    fn tiny_lambda_reproduces_full_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(8, 9, &mut rng);
        let t_tilde = GrayMap::from_fn(8, 9, |_, _| rng.gen());
        let cfg = InterpolationConfig {
            lambda: 1e-12,
            ..Default::default()
        };
        let out = solve_interpolation(&sparse(t_tilde.clone(), GrayMap::filled(8, 9, 1.0)), &img, &cfg).unwrap();
        for (a, b) in out.as_map().data().iter().zip(t_tilde.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_anchor_is_reproduced_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(10, 12, &mut rng);
        let mask = GrayMap::from_fn(10, 12, |y, x| if (y + 2 * x) % 7 == 0 { 1.0 } else { 0.0 });
        let t_tilde = GrayMap::from_fn(10, 12, |y, x| if mask.get(y, x) == 1.0 { 0.63 } else { 0.0 });
        let out = solve_interpolation(&sparse(t_tilde, mask), &img, &InterpolationConfig::default()).unwrap();
        assert!(out.as_map().data().iter().all(|&v| v == 0.63));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let img = RgbImage::filled(5, 5, [0.5; 3]);
        let s = sparse(GrayMap::filled(5, 5, 0.5), GrayMap::filled(5, 5, 0.0));
        assert!(matches!(
            solve_interpolation(&s, &img, &InterpolationConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn iteration_cap_reports_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(20, 20, &mut rng);
        let mask = GrayMap::from_fn(20, 20, |y, x| if y < 3 && x < 3 { 1.0 } else { 0.0 });
        let t_tilde = GrayMap::from_fn(20, 20, |_, _| rng.gen());
        let cfg = InterpolationConfig {
            cg_max_iters: 2,
            ..Default::default()
        };
        match solve_interpolation(&sparse(t_tilde, mask), &img, &cfg) {
            Err(Error::NoConvergence { iterations, residual, .. }) => {
                assert_eq!(iterations, 2);
                assert!(residual > cfg.cg_tol);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(InterpolationConfig::default().validate().is_ok());
        for bad in [
            InterpolationConfig { lambda: 0.0, ..Default::default() },
            InterpolationConfig { eps_w: -1.0, ..Default::default() },
            InterpolationConfig { cg_tol: 1.0, ..Default::default() },
            InterpolationConfig { cg_max_iters: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn solution_beats_mean_extension_and_obeys_maximum_principle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let (h, w) = (rng.gen_range(4..14), rng.gen_range(4..14));
            let img = random_image(h, w, &mut rng);
            let mask = GrayMap::from_fn(h, w, |_, _| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
            if mask.data().iter().all(|&m| m == 0.0) {
                continue;
            }
            let t_tilde = GrayMap::from_fn(h, w, |y, x| if mask.get(y, x) == 1.0 { rng.gen_range(0.2..0.9) } else { 0.0 });
            let s = sparse(t_tilde.clone(), mask.clone());
            let cfg = InterpolationConfig::default();
            let weights = build_weights(&img, cfg.eps_w).unwrap();
            let sol = solve_system(&s, &weights, &cfg).unwrap();

            let anchors: Vec<f64> = (0..h * w).filter(|&i| mask.data()[i] == 1.0).map(|i| t_tilde.data()[i]).collect();
            let mean = anchors.iter().sum::<f64>() / anchors.len() as f64;
            let extended = GrayMap::from_fn(h, w, |y, x| if mask.get(y, x) == 1.0 { t_tilde.get(y, x) } else { mean });
            let e_sol = energy(&sol.t, &t_tilde, &mask, &weights, cfg.lambda);
            let e_ext = energy(&extended, &t_tilde, &mask, &weights, cfg.lambda);
            assert!(e_sol <= e_ext + 1e-12, "{e_sol} > {e_ext}");

            let lo = anchors.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = anchors.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in sol.t.data() {
                assert!(v >= lo - 1e-6 && v <= hi + 1e-6, "{v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn transposed_problem_gives_transposed_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(9, 13, &mut rng);
        let mask = GrayMap::from_fn(9, 13, |_, _| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
        let t_tilde = GrayMap::from_fn(9, 13, |_, _| rng.gen());
        let cfg = InterpolationConfig::default();
        let a = solve_interpolation(&sparse(t_tilde.clone(), mask.clone()), &img, &cfg).unwrap();
        let b = solve_interpolation(&sparse(t_tilde.transpose(), mask.transpose()), &img.transpose(), &cfg).unwrap();
        let bt = b.as_map().transpose();
        for (x, y) in a.as_map().data().iter().zip(bt.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
