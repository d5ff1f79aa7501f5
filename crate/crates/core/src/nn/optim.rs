use crate::error::{Error, Result};

use super::network::{GradientSet, Network};

/// Hyperparameters for minibatch momentum SGD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    /// Zero is accepted and leaves the network at its initialization.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One momentum SGD update on the trainable layers:
/// `v ← momentum·v − lr·g`, then `w ← w + v`.
/// Frozen layers are skipped entirely, velocity included.
pub fn sgd_step(
    net: &mut Network,
    grads: &GradientSet,
    cfg: &TrainConfig,
    velocity: &mut GradientSet,
) -> Result<()> {
    grads.check_aligned(net)?;
    velocity.check_aligned(net)?;
    let trainable = net.trainable_mask().to_vec();
    let layers = net.layers_mut().iter_mut();
    let per_layer = layers.zip(grads.layers()).zip(velocity.layers_mut());
    for ((layer, layer_grads), layer_velocity) in per_layer.zip(trainable).filter_map(|(x, t)| t.then_some(x)) {
        for ((param, g), v) in layer.params_mut().into_iter().zip(layer_grads).zip(layer_velocity) {
            for ((w, g), v) in param.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *w += *v;
            }
        }
    }
    Ok(())
}
