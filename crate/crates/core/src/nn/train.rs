//! Mini-batch training with per-epoch shuffling.
//!
//! Per-sample gradients inside a batch are computed in parallel over fixed
//! chunks of the batch; chunk sums are then added in batch order, so results
//! do not depend on the number of worker threads.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::patch::PatchSample;

use super::adadelta::Adadelta;
use super::network::{backward_trace, forward_trace, patch_tensor, target_of, Gradients, NetworkParams, OUTPUTS};
use super::tensor::Tensor;

pub const DEFAULT_EPOCHS: usize = 90;
pub const DEFAULT_BATCH_SIZE: usize = 1000;

/// Samples per parallel work unit. Fixed so the reduction order is too.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Adadelta,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            optimizer: Adadelta::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch, measured before each batch's update.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

struct Example {
    input: Tensor,
    target: [f64; OUTPUTS],
}

fn batch_gradient(params: &NetworkParams, examples: &[Example], batch: &[usize]) -> Result<(f64, Gradients)> {
    let partials: Vec<Result<(f64, Gradients)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut sum = Gradients::zeros();
            let mut loss = 0.0;
            for &i in chunk {
                let ex = &examples[i];
                let trace = forward_trace(params, ex.input.clone())?;
                let (l, g) = backward_trace(params, &trace, &ex.target)?;
                loss += l;
                sum.add_assign(&g);
            }
            Ok((loss, sum))
        })
        .collect();
    let mut total = Gradients::zeros();
    let mut loss = 0.0;
    for p in partials {
        let (l, g) = p?;
        loss += l;
        total.add_assign(&g);
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((loss, total))
}

/// Trains `params` in place. Each epoch visits the dataset in a fresh
/// shuffled order drawn from a generator seeded once with `config.seed`.
pub fn train(params: &mut NetworkParams, dataset: &[PatchSample], config: &TrainConfig) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Empty("training set has no samples".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let examples = dataset
        .iter()
        .map(|p| {
            Ok(Example {
                target: target_of(p)?,
                input: patch_tensor(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = batch_gradient(params, &examples, batch)?;
            epoch_loss += loss;
            config.optimizer.step(params, &grads);
            report.steps += 1;
        }
        let mean = epoch_loss / examples.len() as f64;
        info!("epoch {}/{}: loss {mean:.6e}", epoch + 1, config.epochs);
        report.epoch_losses.push(mean);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haze::Airlight;
    use crate::image::RgbImage;
    use crate::patch::PatchLabel;
    use rand::Rng;

    fn labeled(seed: u64) -> PatchSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = RgbImage::from_fn(15, 15, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let label = PatchLabel {
            t: rng.gen_range(0.3..1.0),
            airlight: Airlight::new([rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0), rng.gen_range(0.7..1.0)]).unwrap(),
        };
        PatchSample::crop(&img, (0, 0), 15).unwrap().with_label(label)
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let mut params = NetworkParams::init(1);
        let before = params.clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let report = train(&mut params, &[labeled(1)], &cfg).unwrap();
        assert_eq!(params, before);
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn rejects_empty_and_unlabeled() {
        let mut params = NetworkParams::init(1);
        assert!(matches!(train(&mut params, &[], &TrainConfig::default()), Err(Error::Empty(_))));
        let mut unlabeled = labeled(2);
        unlabeled.label = None;
        assert!(train(&mut params, &[labeled(3), unlabeled], &TrainConfig::default()).is_err());
    }

    #[test]
    fn same_seed_is_bitwise_reproducible() {
        let data: Vec<_> = (0..20).map(labeled).collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 6,
            seed: 42,
            ..Default::default()
        };
        let mut a = NetworkParams::init(7);
        let mut b = a.clone();
        let ra = train(&mut a, &data, &cfg).unwrap();
        let rb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ra.epoch_losses.len(), 3);
        assert_eq!(ra.steps, 12);
        assert_eq!(ra, rb);
        assert!(a.values().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn batch_gradient_is_the_mean_of_sample_gradients() {
        let params = NetworkParams::init(3);
        let data: Vec<_> = (0..11).map(labeled).collect();
        let examples: Vec<Example> = data
            .iter()
            .map(|p| Example {
                input: patch_tensor(p).unwrap(),
                target: target_of(p).unwrap(),
            })
            .collect();
        let batch: Vec<usize> = (0..11).rev().collect();
        let (loss, g) = batch_gradient(&params, &examples, &batch).unwrap();
        let mut expected = Gradients::zeros();
        let mut expected_loss = 0.0;
        for p in &data {
            let (l, gi) = super::super::network::backward(&params, p, &target_of(p).unwrap()).unwrap();
            expected_loss += l;
            expected.add_assign(&gi);
        }
        expected.scale(1.0 / 11.0);
        assert!((loss - expected_loss).abs() < 1e-12);
        for (a, b) in g.values().zip(expected.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
