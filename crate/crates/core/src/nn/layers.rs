//! Forward and backward kernels for the layer kinds of the estimator.
//!
//! Convolutions run on a zero-padded copy of each input plane. Output rows
//! are computed on the padded row pitch so that every kernel tap becomes one
//! contiguous `axpy` (forward, input gradient) or `dot` (weight gradient)
//! over the whole plane; the extra columns are discarded afterwards.

use crate::error::{Error, Result};

use super::tensor::Tensor;

const LANES: usize = 8;

/// Dot product with a fixed lane-wise summation order.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `acc[j] += w[0] src[j] + w[1] src[j + 1] + ...`, taps added in order.
#[inline]
fn row_taps_fixed<const K: usize>(w: &[f64], src: &[f64], acc: &mut [f64]) {
    let w: &[f64; K] = w.try_into().expect("kernel row width");
    let src = &src[..acc.len() + K - 1];
    for (a, win) in acc.iter_mut().zip(src.windows(K)) {
        let win: &[f64; K] = win.try_into().expect("window width");
        let mut s = *a;
        for kx in 0..K {
            s += w[kx] * win[kx];
        }
        *a = s;
    }
}

fn row_taps(w: &[f64], src: &[f64], acc: &mut [f64]) {
    match w.len() {
        1 => row_taps_fixed::<1>(w, src, acc),
        3 => row_taps_fixed::<3>(w, src, acc),
        5 => row_taps_fixed::<5>(w, src, acc),
        7 => row_taps_fixed::<7>(w, src, acc),
        k => {
            for (kx, &wk) in w.iter().enumerate() {
                axpy(wk, &src[kx..kx + acc.len()], acc);
            }
            debug_assert!(k > 0);
        }
    }
}

/// `out[kx] = dot(g, src[kx..kx + g.len()])` for every tap of a kernel row,
/// each with the lane order of [`dot`].
#[inline]
fn row_dots_fixed<const K: usize>(g: &[f64], src: &[f64], out: &mut [f64]) {
    let n = g.len();
    let src = &src[..n + K - 1];
    let mut acc = [[0.0; LANES]; K];
    let body = n - n % LANES;
    for base in (0..body).step_by(LANES) {
        let gc: &[f64; LANES] = g[base..base + LANES].try_into().expect("lane chunk");
        for kx in 0..K {
            let sc: &[f64; LANES] = src[base + kx..base + kx + LANES].try_into().expect("lane chunk");
            for l in 0..LANES {
                acc[kx][l] += gc[l] * sc[l];
            }
        }
    }
    for kx in 0..K {
        let tail: f64 = g[body..].iter().zip(&src[body + kx..n + kx]).map(|(x, y)| x * y).sum();
        out[kx] = acc[kx].iter().sum::<f64>() + tail;
    }
}

fn row_dots(g: &[f64], src: &[f64], out: &mut [f64]) {
    match out.len() {
        1 => row_dots_fixed::<1>(g, src, out),
        3 => row_dots_fixed::<3>(g, src, out),
        5 => row_dots_fixed::<5>(g, src, out),
        7 => row_dots_fixed::<7>(g, src, out),
        k => {
            for kx in 0..k {
                out[kx] = dot(g, &src[kx..kx + g.len()]);
            }
        }
    }
}

struct Padded {
    data: Vec<f64>,
    /// Distance between consecutive channel planes.
    plane: usize,
    /// Padded row pitch.
    pitch: usize,
    out_h: usize,
    out_w: usize,
}

impl Padded {
    fn new(input: &Tensor, kernel: usize, padding: usize) -> Result<Self> {
        let (c, h, w) = input.shape();
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        if hp < kernel || wp < kernel {
            return Err(Error::ShapeMismatch {
                context: format!("{kernel}x{kernel} convolution over padded input {hp}x{wp}"),
                expected: kernel,
                actual: hp.min(wp),
            });
        }
        // Tail room so the last (discarded) columns of the last row stay in bounds.
        let plane = hp * wp + kernel;
        let mut data = vec![0.0; c * plane];
        for ch in 0..c {
            let src = input.plane(ch);
            for y in 0..h {
                let dst = ch * plane + (y + padding) * wp + padding;
                data[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        Ok(Padded {
            data,
            plane,
            pitch: wp,
            out_h: hp - kernel + 1,
            out_w: wp - kernel + 1,
        })
    }

    #[inline]
    fn grid(&self) -> usize {
        self.out_h * self.pitch
    }

    /// Every tap of kernel row `ky`: `grid + kernel - 1` values.
    #[inline]
    fn kernel_row(&self, ch: usize, ky: usize, kernel: usize) -> &[f64] {
        let start = ch * self.plane + ky * self.pitch;
        &self.data[start..start + self.grid() + kernel - 1]
    }
}

fn check_conv_shapes(cin: usize, weights: &[f64], biases: &[f64], kernel: usize) -> Result<usize> {
    let cout = biases.len();
    let expected = cout * cin * kernel * kernel;
    if weights.len() != expected || cout == 0 || kernel == 0 {
        return Err(Error::ShapeMismatch {
            context: format!("{kernel}x{kernel} convolution weights for {cin} -> {cout} channels"),
            expected,
            actual: weights.len(),
        });
    }
    Ok(cout)
}

/// Stride-1 cross-correlation with zero padding. Weights are laid out as
/// `[out][in][ky][kx]`, one bias per output channel.
pub fn conv_forward(input: &Tensor, weights: &[f64], biases: &[f64], kernel: usize, padding: usize) -> Result<Tensor> {
    let cin = input.channels();
    let cout = check_conv_shapes(cin, weights, biases, kernel)?;
    let padded = Padded::new(input, kernel, padding)?;
    let grid = padded.grid();
    let kk = kernel * kernel;
    let (oh, ow, pitch) = (padded.out_h, padded.out_w, padded.pitch);
    let mut out = Vec::with_capacity(cout * oh * ow);
    let mut acc = vec![0.0; grid];
    for o in 0..cout {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..cin {
            let wk = &weights[(o * cin + i) * kk..(o * cin + i + 1) * kk];
            for ky in 0..kernel {
                row_taps(&wk[ky * kernel..(ky + 1) * kernel], padded.kernel_row(i, ky, kernel), &mut acc);
            }
        }
        let b = biases[o];
        for y in 0..oh {
            out.extend(acc[y * pitch..y * pitch + ow].iter().map(|v| v + b));
        }
    }
    Tensor::new(cout, oh, ow, out)
}

pub struct ConvGradients {
    /// `None` when the caller did not ask for the input gradient.
    pub input: Option<Tensor>,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradients of a convolution given the gradient of its (pre-activation) output.
pub fn conv_backward(
    input: &Tensor,
    grad_output: &Tensor,
    weights: &[f64],
    kernel: usize,
    padding: usize,
    want_input: bool,
) -> Result<ConvGradients> {
    let (cin, h, w) = input.shape();
    let cout = grad_output.channels();
    if weights.len() != cout * cin * kernel * kernel {
        return Err(Error::ShapeMismatch {
            context: "convolution backward weights".into(),
            expected: cout * cin * kernel * kernel,
            actual: weights.len(),
        });
    }
    let padded = Padded::new(input, kernel, padding)?;
    let (oh, ow, pitch) = (padded.out_h, padded.out_w, padded.pitch);
    if (grad_output.height(), grad_output.width()) != (oh, ow) {
        return Err(Error::ShapeMismatch {
            context: "convolution output gradient".into(),
            expected: oh * ow,
            actual: grad_output.height() * grad_output.width(),
        });
    }
    let grid = padded.grid();
    let kk = kernel * kernel;

    // Output gradient on the padded pitch, zero in the discarded columns.
    let mut g_grid = vec![0.0; cout * grid];
    for o in 0..cout {
        let src = grad_output.plane(o);
        for y in 0..oh {
            let dst = o * grid + y * pitch;
            g_grid[dst..dst + ow].copy_from_slice(&src[y * ow..(y + 1) * ow]);
        }
    }

    let biases = (0..cout).map(|o| grad_output.plane(o).iter().sum()).collect();
    let mut grad_w = vec![0.0; weights.len()];
    for o in 0..cout {
        let g = &g_grid[o * grid..(o + 1) * grid];
        for i in 0..cin {
            let dw = &mut grad_w[(o * cin + i) * kk..(o * cin + i + 1) * kk];
            for ky in 0..kernel {
                row_dots(g, padded.kernel_row(i, ky, kernel), &mut dw[ky * kernel..(ky + 1) * kernel]);
            }
        }
    }

    let input_grad = if want_input {
        // Transposed taps: the output gradient with `kernel - 1` zeros on both
        // sides, correlated with the mirrored kernel rows.
        let halo = kernel - 1;
        let mut g_halo = vec![0.0; cout * (grid + 2 * halo)];
        for o in 0..cout {
            let dst = o * (grid + 2 * halo) + halo;
            g_halo[dst..dst + grid].copy_from_slice(&g_grid[o * grid..(o + 1) * grid]);
        }
        let mut mirrored = vec![0.0; kernel];
        let mut din_pad = vec![0.0; cin * padded.plane];
        for i in 0..cin {
            for o in 0..cout {
                let g = &g_halo[o * (grid + 2 * halo)..(o + 1) * (grid + 2 * halo)];
                let wk = &weights[(o * cin + i) * kk..(o * cin + i + 1) * kk];
                for ky in 0..kernel {
                    for (m, &v) in mirrored.iter_mut().zip(wk[ky * kernel..(ky + 1) * kernel].iter().rev()) {
                        *m = v;
                    }
                    let start = i * padded.plane + ky * pitch;
                    row_taps(&mirrored, g, &mut din_pad[start..start + grid + halo]);
                }
            }
        }
        let mut din = Vec::with_capacity(cin * h * w);
        for i in 0..cin {
            for y in 0..h {
                let start = i * padded.plane + (y + padding) * pitch + padding;
                din.extend_from_slice(&din_pad[start..start + w]);
            }
        }
        Some(Tensor::new(cin, h, w, din)?)
    } else {
        None
    };

    Ok(ConvGradients {
        input: input_grad,
        weights: grad_w,
        biases,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_in_place(out.data_mut());
    out
}

pub(crate) fn relu_in_place(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the activation `output` was clipped.
pub(crate) fn relu_backward_in_place(output: &[f64], grad: &mut [f64]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// `W x + b` with `W` stored row-major as `[out][in]`.
pub fn dense_forward(input: &[f64], weights: &[f64], biases: &[f64]) -> Result<Vec<f64>> {
    let n_in = input.len();
    if weights.len() != biases.len() * n_in {
        return Err(Error::ShapeMismatch {
            context: format!("dense weights for {n_in} -> {} units", biases.len()),
            expected: biases.len() * n_in,
            actual: weights.len(),
        });
    }
    Ok(biases
        .iter()
        .enumerate()
        .map(|(o, b)| dot(&weights[o * n_in..(o + 1) * n_in], input) + b)
        .collect())
}

pub struct DenseGradients {
    pub input: Option<Vec<f64>>,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

pub fn dense_backward(input: &[f64], grad_output: &[f64], weights: &[f64], want_input: bool) -> Result<DenseGradients> {
    let n_in = input.len();
    if weights.len() != grad_output.len() * n_in {
        return Err(Error::ShapeMismatch {
            context: "dense backward weights".into(),
            expected: grad_output.len() * n_in,
            actual: weights.len(),
        });
    }
    let mut grad_w = vec![0.0; weights.len()];
    for (o, &g) in grad_output.iter().enumerate() {
        axpy(g, input, &mut grad_w[o * n_in..(o + 1) * n_in]);
    }
    let input_grad = want_input.then(|| {
        let mut din = vec![0.0; n_in];
        for (o, &g) in grad_output.iter().enumerate() {
            axpy(g, &weights[o * n_in..(o + 1) * n_in], &mut din);
        }
        din
    });
    Ok(DenseGradients {
        input: input_grad,
        weights: grad_w,
        biases: grad_output.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // Four nested loops, zero padding handled by bounds checks.
    fn naive_conv(input: &Tensor, w: &[f64], b: &[f64], k: usize, p: usize) -> Tensor {
        let (cin, h, wd) = input.shape();
        let cout = b.len();
        let (oh, ow) = (h + 2 * p + 1 - k, wd + 2 * p + 1 - k);
        let mut out = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = b[o];
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (y + ky, x + kx);
                                if iy < p || ix < p || iy - p >= h || ix - p >= wd {
                                    continue;
                                }
                                s += w[((o * cin + i) * k + ky) * k + kx]
                                    * input.data()[(i * h + iy - p) * wd + ix - p];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + x] = s;
                }
            }
        }
        Tensor::new(cout, oh, ow, out).unwrap()
    }

    #[test]
    fn identity_and_bias_only_convolutions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = Tensor::new(2, 4, 5, random_vec(40, &mut rng)).unwrap();
        let identity = [1.0, 0.0, 0.0, 1.0];
        let out = conv_forward(&input, &identity, &[0.0, 0.0], 1, 0).unwrap();
        assert_eq!(out, input);

        let out = conv_forward(&input, &[0.0; 2 * 3 * 9], &[0.5, -1.0, 2.0], 3, 1).unwrap();
        assert_eq!(out.shape(), (3, 4, 5));
        for c in 0..3 {
            assert!(out.plane(c).iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
        }
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Tensor::new(1, 5, 5, random_vec(25, &mut rng)).unwrap();
        let w = random_vec(9, &mut rng);
        let b = random_vec(1, &mut rng);
        let fast = conv_forward(&input, &w, &b, 3, 1).unwrap();
        let slow = naive_conv(&input, &w, &b, 3, 1);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        for (k, p, cin, cout) in [(5, 2, 3, 4), (7, 3, 2, 2), (3, 0, 2, 3), (5, 1, 1, 2)] {
            let input = Tensor::new(cin, 9, 8, random_vec(cin * 72, &mut rng)).unwrap();
            let w = random_vec(cout * cin * k * k, &mut rng);
            let b = random_vec(cout, &mut rng);
            let fast = conv_forward(&input, &w, &b, k, p).unwrap();
            let slow = naive_conv(&input, &w, &b, k, p);
            assert_eq!(fast.shape(), slow.shape());
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() < 1e-12, "k={k} p={p}");
            }
        }
    }

    #[test]
    fn same_padding_preserves_size() {
        let input = Tensor::zeros(3, 15, 15);
        for k in [1, 3, 5, 7] {
            let out = conv_forward(&input, &vec![0.0; 8 * 3 * k * k], &[0.0; 8], k, (k - 1) / 2).unwrap();
            assert_eq!(out.shape(), (8, 15, 15));
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let input = Tensor::zeros(3, 5, 5);
        assert!(conv_forward(&input, &[0.0; 10], &[0.0], 3, 1).is_err());
        assert!(conv_forward(&input, &vec![0.0; 3 * 49], &[0.0], 7, 0).is_err());
    }

    #[test]
    fn relu_examples() {
        let t = Tensor::flat(vec![-1.0, 0.0, 2.5]);
        assert_eq!(relu(&t).data(), &[0.0, 0.0, 2.5]);
        let neg = Tensor::flat(vec![-3.0, -0.1]);
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);
        let pos = Tensor::flat(vec![0.0, 4.0, 1e-9]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn dense_examples() {
        let x = [0.3, -0.2, 0.9, 1.5];
        let mut eye = [0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        assert_eq!(dense_forward(&x, &eye, &[0.0; 4]).unwrap(), x.to_vec());
        let b = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(dense_forward(&x, &[0.0; 16], &b).unwrap(), b.to_vec());
        assert!(dense_forward(&x, &[0.0; 15], &b).is_err());
    }

    #[test]
    fn dense_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_vec(8, &mut rng);
        let w = random_vec(32, &mut rng);
        let b = random_vec(4, &mut rng);
        let y = dense_forward(&x, &w, &b).unwrap();
        for o in 0..4 {
            let mut s = b[o];
            for i in 0..8 {
                s += w[o * 8 + i] * x[i];
            }
            assert!((y[o] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_remainders() {
        for n in [0, 1, 7, 8, 9, 17] {
            let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let expected: f64 = a.iter().map(|v| v * v).sum();
            assert_eq!(dot(&a, &a), expected);
        }
    }

    // Scalar objective sum(c * layer(x)) for a fixed random c; its gradient
    // wrt the output is c.
    fn fd_check(f: &mut dyn FnMut(&[f64]) -> f64, params: &[f64], analytic: &[f64]) {
        let h = 1e-4;
        let mut p = params.to_vec();
        for i in 0..params.len() {
            p[i] = params[i] + h;
            let up = f(&p);
            p[i] = params[i] - h;
            let down = f(&p);
            p[i] = params[i];
            let numeric = (up - down) / (2.0 * h);
            let scale = numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (numeric - analytic[i]).abs() / scale < 1e-4,
                "index {i}: numeric {numeric} analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (cin, cout, k, p) = (2, 3, 3, 1);
        let x = random_vec(cin * 6 * 5, &mut rng);
        let w = random_vec(cout * cin * k * k, &mut rng);
        let b = random_vec(cout, &mut rng);
        let c = random_vec(cout * 6 * 5, &mut rng);
        let input = Tensor::new(cin, 6, 5, x.clone()).unwrap();
        let g = Tensor::new(cout, 6, 5, c.clone()).unwrap();
        let grads = conv_backward(&input, &g, &w, k, p, true).unwrap();
        let objective = |x: &[f64], w: &[f64], b: &[f64]| {
            let out = conv_forward(&Tensor::new(cin, 6, 5, x.to_vec()).unwrap(), w, b, k, p).unwrap();
            dot(out.data(), &c)
        };
        fd_check(&mut |w| objective(&x, w, &b), &w, &grads.weights);
        fd_check(&mut |b| objective(&x, &w, b), &b, &grads.biases);
        fd_check(&mut |x| objective(x, &w, &b), &x, grads.input.as_ref().unwrap().data());
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_vec(7, &mut rng);
        let w = random_vec(21, &mut rng);
        let b = random_vec(3, &mut rng);
        let c = random_vec(3, &mut rng);
        let grads = dense_backward(&x, &c, &w, true).unwrap();
        let objective = |x: &[f64], w: &[f64], b: &[f64]| dot(&dense_forward(x, w, b).unwrap(), &c);
        fd_check(&mut |w| objective(&x, w, &b), &w, &grads.weights);
        fd_check(&mut |b| objective(&x, &w, b), &b, &grads.biases);
        fd_check(&mut |x| objective(x, &w, &b), &x, grads.input.as_ref().unwrap());
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        // Inputs kept away from the kink at zero.
        let x = [-0.7, 0.4, 1.3, -0.05, 0.2];
        let c = [0.3, -1.2, 0.8, 2.0, 0.5];
        let out = relu(&Tensor::flat(x.to_vec()));
        let mut g = c.to_vec();
        relu_backward_in_place(out.data(), &mut g);
        fd_check(&mut |x| dot(relu(&Tensor::flat(x.to_vec())).data(), &c), &x, &g);
    }
}
