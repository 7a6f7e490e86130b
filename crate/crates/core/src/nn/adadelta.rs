use super::network::{Gradients, NetworkParams};

/// Adadelta with unit learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
}

impl Default for Adadelta {
    fn default() -> Self {
        Adadelta { rho: 0.95, eps: 1e-6 }
    }
}

impl Adadelta {
    /// Applies one update to `params` in place, advancing its accumulators.
    pub fn step(&self, params: &mut NetworkParams, grads: &Gradients) {
        let Adadelta { rho, eps } = *self;
        let (layers, state) = params.split_mut();
        for (l, g) in grads.layers.iter().enumerate() {
            let weights = layers[l].values_mut();
            let sq_g = state.sq_grad.layers[l].values_mut();
            let sq_u = state.sq_update.layers[l].values_mut();
            for (((w, eg), ed), g) in weights.zip(sq_g).zip(sq_u).zip(g.values()) {
                *eg = rho * *eg + (1.0 - rho) * g * g;
                let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
                *ed = rho * *ed + (1.0 - rho) * delta * delta;
                *w += delta;
            }
        }
    }
}
