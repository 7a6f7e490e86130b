//! The joint `(t, A)` estimator: three convolutional paths over a 15×15×3
//! patch, two channel concatenations, a 40-unit hidden layer and a linear
//! 4-unit output.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patch::PatchSample;

use super::layers::{conv_backward, conv_forward, dense_backward, dense_forward, relu_backward_in_place, relu_in_place};
use super::tensor::Tensor;

pub const PATCH_SIZE: usize = 15;
pub const INPUT_CHANNELS: usize = 3;
pub const OUTPUTS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { kernel: usize },
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerSpec {
    const fn conv(kernel: usize, inputs: usize, outputs: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv { kernel },
            inputs,
            outputs,
        }
    }

    const fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            inputs,
            outputs,
        }
    }

    pub fn weight_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv { kernel } => self.inputs * self.outputs * kernel * kernel,
            LayerKind::Dense => self.inputs * self.outputs,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.outputs
    }

    fn fans(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv { kernel } => (self.inputs * kernel * kernel, self.outputs * kernel * kernel),
            LayerKind::Dense => (self.inputs, self.outputs),
        }
    }
}

const FLAT: usize = 16 * PATCH_SIZE * PATCH_SIZE;

/// Layer list in evaluation and serialization order.
pub const ARCHITECTURE: [LayerSpec; 16] = [
    // bottom path
    LayerSpec::conv(1, 3, 8),
    LayerSpec::conv(5, 8, 8),
    LayerSpec::conv(3, 8, 8),
    LayerSpec::conv(3, 8, 8),
    LayerSpec::conv(3, 8, 8),
    LayerSpec::conv(3, 8, 8),
    // middle path
    LayerSpec::conv(1, 3, 8),
    LayerSpec::conv(7, 8, 8),
    LayerSpec::conv(5, 8, 16),
    // bottom ++ middle
    LayerSpec::conv(3, 24, 8),
    // top path
    LayerSpec::conv(1, 3, 8),
    LayerSpec::conv(7, 8, 8),
    LayerSpec::conv(5, 8, 16),
    LayerSpec::conv(3, 16, 8),
    // flatten(top ++ fusion)
    LayerSpec::dense(FLAT, 40),
    LayerSpec::dense(40, OUTPUTS),
];

const BOTTOM: [usize; 6] = [0, 1, 2, 3, 4, 5];
const MIDDLE: [usize; 3] = [6, 7, 8];
const FUSION: usize = 9;
const TOP: [usize; 4] = [10, 11, 12, 13];
const HIDDEN: usize = 14;
const OUTPUT: usize = 15;

pub fn parameter_count() -> usize {
    ARCHITECTURE.iter().map(LayerSpec::param_count).sum()
}

/// Weights and biases of one layer, or any buffer shaped like them.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTensors {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerTensors {
    fn zeros(spec: &LayerSpec) -> Self {
        LayerTensors {
            weights: vec![0.0; spec.weight_count()],
            biases: vec![0.0; spec.outputs],
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.biases)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(&mut self.biases)
    }
}

fn zero_layers() -> Vec<LayerTensors> {
    ARCHITECTURE.iter().map(LayerTensors::zeros).collect()
}

/// A parameter-shaped set of buffers: gradients, or optimizer accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerTensors>,
}

impl Gradients {
    pub fn zeros() -> Self {
        Gradients { layers: zero_layers() }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.values_mut().zip(b.values()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.values_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.values())
    }
}

/// Adadelta running averages of squared gradients and squared updates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub sq_grad: Gradients,
    pub sq_update: Gradients,
}

impl OptimizerState {
    pub fn fresh() -> Self {
        OptimizerState {
            sq_grad: Gradients::zeros(),
            sq_update: Gradients::zeros(),
        }
    }
}

/// All weights of the estimator plus its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    layers: Vec<LayerTensors>,
    pub optimizer: OptimizerState,
}

impl NetworkParams {
    pub fn zeros() -> Self {
        NetworkParams {
            layers: zero_layers(),
            optimizer: OptimizerState::fresh(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = ARCHITECTURE
            .iter()
            .map(|spec| {
                let (fan_in, fan_out) = spec.fans();
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                LayerTensors {
                    weights: (0..spec.weight_count()).map(|_| dist.sample(&mut rng)).collect(),
                    biases: vec![0.0; spec.outputs],
                }
            })
            .collect();
        NetworkParams {
            layers,
            optimizer: OptimizerState::fresh(),
        }
    }

    /// Builds parameters from explicit tensors, shape-checked against [`ARCHITECTURE`].
    pub fn from_parts(layers: Vec<LayerTensors>, optimizer: OptimizerState) -> Result<Self> {
        check_shapes(&layers)?;
        check_shapes(&optimizer.sq_grad.layers)?;
        check_shapes(&optimizer.sq_update.layers)?;
        if optimizer.sq_grad.values().chain(optimizer.sq_update.values()).any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("optimizer accumulators must be nonnegative"));
        }
        Ok(NetworkParams { layers, optimizer })
    }

    pub fn layers(&self) -> &[LayerTensors] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerTensors] {
        &mut self.layers
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.values())
    }

    pub(crate) fn split_mut(&mut self) -> (&mut [LayerTensors], &mut OptimizerState) {
        (&mut self.layers, &mut self.optimizer)
    }
}

fn check_shapes(layers: &[LayerTensors]) -> Result<()> {
    if layers.len() != ARCHITECTURE.len() {
        return Err(Error::LayerMismatch {
            layer: layers.len().min(ARCHITECTURE.len()),
            reason: format!("expected {} layers, found {}", ARCHITECTURE.len(), layers.len()),
        });
    }
    for (i, (l, spec)) in layers.iter().zip(&ARCHITECTURE).enumerate() {
        if l.weights.len() != spec.weight_count() || l.biases.len() != spec.outputs {
            return Err(Error::LayerMismatch {
                layer: i,
                reason: format!(
                    "expected {} weights and {} biases, found {} and {}",
                    spec.weight_count(),
                    spec.outputs,
                    l.weights.len(),
                    l.biases.len()
                ),
            });
        }
    }
    Ok(())
}

/// Raw network output split into transmittance and airlight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorOutput {
    pub t: f64,
    pub a: [f64; 3],
}

impl EstimatorOutput {
    pub fn from_raw(raw: [f64; OUTPUTS]) -> Self {
        EstimatorOutput {
            t: raw[0],
            a: [raw[1], raw[2], raw[3]],
        }
    }

    pub fn raw(&self) -> [f64; OUTPUTS] {
        [self.t, self.a[0], self.a[1], self.a[2]]
    }

    /// Inference-time clamping: `t` into `[0, 1]`, airlight into `(0, 1]`.
    pub fn clamped(&self) -> Self {
        let t = if self.t.is_finite() { self.t.clamp(0.0, 1.0) } else { 0.0 };
        EstimatorOutput {
            t,
            a: crate::haze::Airlight::saturating(self.a).rgb(),
        }
    }
}

/// Converts an interleaved 15×15×3 patch into a channel-major tensor.
pub fn patch_tensor(patch: &PatchSample) -> Result<Tensor> {
    if patch.size != PATCH_SIZE || patch.pixels.len() != PATCH_SIZE * PATCH_SIZE * INPUT_CHANNELS {
        return Err(Error::ShapeMismatch {
            context: "estimator input patch".into(),
            expected: PATCH_SIZE * PATCH_SIZE * INPUT_CHANNELS,
            actual: patch.pixels.len(),
        });
    }
    let n = PATCH_SIZE * PATCH_SIZE;
    let mut data = vec![0.0; n * INPUT_CHANNELS];
    for (i, px) in patch.pixels.chunks_exact(INPUT_CHANNELS).enumerate() {
        for (c, v) in px.iter().enumerate() {
            data[c * n + i] = *v;
        }
    }
    Tensor::new(INPUT_CHANNELS, PATCH_SIZE, PATCH_SIZE, data)
}

/// Every intermediate of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct Trace {
    pub input: Tensor,
    /// Output of each layer in [`ARCHITECTURE`] order, after its activation.
    pub activations: Vec<Tensor>,
    fusion_input: Tensor,
    flat: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> [f64; OUTPUTS] {
        let d = self.activations[OUTPUT].data();
        [d[0], d[1], d[2], d[3]]
    }

    fn layer_input(&self, layer: usize) -> &Tensor {
        match layer {
            0 | 6 | 10 => &self.input,
            FUSION => &self.fusion_input,
            l => &self.activations[l - 1],
        }
    }
}

fn conv_layer(params: &LayerTensors, spec: &LayerSpec, input: &Tensor) -> Result<Tensor> {
    let LayerKind::Conv { kernel } = spec.kind else {
        unreachable!("dense layer routed through conv_layer")
    };
    let mut out = conv_forward(input, &params.weights, &params.biases, kernel, (kernel - 1) / 2)?;
    relu_in_place(out.data_mut());
    Ok(out)
}

pub fn forward_trace(params: &NetworkParams, input: Tensor) -> Result<Trace> {
    if input.shape() != (INPUT_CHANNELS, PATCH_SIZE, PATCH_SIZE) {
        return Err(Error::ShapeMismatch {
            context: "estimator input tensor".into(),
            expected: INPUT_CHANNELS * PATCH_SIZE * PATCH_SIZE,
            actual: input.len(),
        });
    }
    let layers = &params.layers;
    let mut acts: Vec<Tensor> = Vec::with_capacity(ARCHITECTURE.len());
    for path in [&BOTTOM[..], &MIDDLE[..]] {
        let mut x = &input;
        for &l in path {
            let out = conv_layer(&layers[l], &ARCHITECTURE[l], x)?;
            acts.push(out);
            x = acts.last().expect("just pushed");
        }
    }
    let fusion_input = Tensor::concat_channels(&acts[BOTTOM[5]], &acts[MIDDLE[2]])?;
    acts.push(conv_layer(&layers[FUSION], &ARCHITECTURE[FUSION], &fusion_input)?);
    let mut x = &input;
    for &l in &TOP {
        let out = conv_layer(&layers[l], &ARCHITECTURE[l], x)?;
        acts.push(out);
        x = acts.last().expect("just pushed");
    }
    let flat = Tensor::concat_channels(&acts[TOP[3]], &acts[FUSION])?.into_data();
    let mut hidden = dense_forward(&flat, &layers[HIDDEN].weights, &layers[HIDDEN].biases)?;
    relu_in_place(&mut hidden);
    let out = dense_forward(&hidden, &layers[OUTPUT].weights, &layers[OUTPUT].biases)?;
    acts.push(Tensor::flat(hidden));
    acts.push(Tensor::flat(out));
    Ok(Trace {
        input,
        activations: acts,
        fusion_input,
        flat,
    })
}

/// Raw (unclamped) estimate for one patch.
pub fn forward(params: &NetworkParams, patch: &PatchSample) -> Result<EstimatorOutput> {
    let trace = forward_trace(params, patch_tensor(patch)?)?;
    Ok(EstimatorOutput::from_raw(trace.output()))
}

/// Mean of the squared component differences.
pub fn mse_loss(predicted: &[f64; OUTPUTS], target: &[f64; OUTPUTS]) -> f64 {
    predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / OUTPUTS as f64
}

/// Training target `(t, A_r, A_g, A_b)` of a labeled patch.
pub fn target_of(patch: &PatchSample) -> Result<[f64; OUTPUTS]> {
    let label = patch
        .label
        .ok_or_else(|| Error::invalid(format!("patch at {:?} has no label", patch.origin)))?;
    let a = label.airlight.rgb();
    Ok([label.t, a[0], a[1], a[2]])
}

fn conv_layer_backward(
    params: &NetworkParams,
    trace: &Trace,
    layer: usize,
    d_act: Tensor,
    want_input: bool,
) -> Result<(LayerTensors, Option<Tensor>)> {
    let LayerKind::Conv { kernel } = ARCHITECTURE[layer].kind else {
        unreachable!("dense layer in a convolutional path")
    };
    let mut d_pre = d_act;
    relu_backward_in_place(trace.activations[layer].data(), d_pre.data_mut());
    let g = conv_backward(
        trace.layer_input(layer),
        &d_pre,
        &params.layers[layer].weights,
        kernel,
        (kernel - 1) / 2,
        want_input,
    )?;
    Ok((
        LayerTensors {
            weights: g.weights,
            biases: g.biases,
        },
        g.input,
    ))
}

// The network input needs no gradient, so the first layer of a path skips it.
fn path_backward(
    params: &NetworkParams,
    trace: &Trace,
    path: &[usize],
    d_out: Tensor,
    grads: &mut [Option<LayerTensors>],
) -> Result<()> {
    let mut d = d_out;
    for (k, &l) in path.iter().enumerate().rev() {
        let (g, d_in) = conv_layer_backward(params, trace, l, d, k > 0)?;
        grads[l] = Some(g);
        match d_in {
            Some(next) => d = next,
            None => break,
        }
    }
    Ok(())
}

/// Loss and its gradient with respect to every weight and bias.
pub fn backward_trace(params: &NetworkParams, trace: &Trace, target: &[f64; OUTPUTS]) -> Result<(f64, Gradients)> {
    let layers = &params.layers;
    let predicted = trace.output();
    let loss = mse_loss(&predicted, target);
    let mut grads: Vec<Option<LayerTensors>> = vec![None; ARCHITECTURE.len()];

    let d_out: Vec<f64> = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| 2.0 * (p - t) / OUTPUTS as f64)
        .collect();
    let hidden = trace.activations[HIDDEN].data();
    let g = dense_backward(hidden, &d_out, &layers[OUTPUT].weights, true)?;
    grads[OUTPUT] = Some(LayerTensors {
        weights: g.weights,
        biases: g.biases,
    });
    let mut d_hidden = g.input.expect("requested");
    relu_backward_in_place(hidden, &mut d_hidden);
    let g = dense_backward(&trace.flat, &d_hidden, &layers[HIDDEN].weights, true)?;
    grads[HIDDEN] = Some(LayerTensors {
        weights: g.weights,
        biases: g.biases,
    });
    let d_flat = Tensor::new(16, PATCH_SIZE, PATCH_SIZE, g.input.expect("requested"))?;
    let (d_top, d_fusion) = d_flat.split_channels(ARCHITECTURE[TOP[3]].outputs);

    path_backward(params, trace, &TOP, d_top, &mut grads)?;
    let (g, d_fusion_in) = conv_layer_backward(params, trace, FUSION, d_fusion, true)?;
    grads[FUSION] = Some(g);
    let (d_bottom, d_middle) = d_fusion_in
        .expect("requested")
        .split_channels(ARCHITECTURE[BOTTOM[5]].outputs);
    path_backward(params, trace, &BOTTOM, d_bottom, &mut grads)?;
    path_backward(params, trace, &MIDDLE, d_middle, &mut grads)?;

    let layers = grads
        .into_iter()
        .map(|g| g.expect("every layer receives a gradient"))
        .collect();
    Ok((loss, Gradients { layers }))
}

/// Gradient of the MSE loss for one patch against `target`.
pub fn backward(params: &NetworkParams, patch: &PatchSample, target: &[f64; OUTPUTS]) -> Result<(f64, Gradients)> {
    let trace = forward_trace(params, patch_tensor(patch)?)?;
    backward_trace(params, &trace, target)
}
