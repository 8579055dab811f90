//! Activation-restriction methods.
//!
//! * [`harden_ranger`]: thresholds are the profiled activation maxima, applied
//!   with a hard clip.
//! * [`search_ftclipact`]: per-layer grid search scored by fault injection.
//! * [`train_fitact`]: neuron-wise smooth thresholds on every layer, all
//!   trained jointly.
//! * [`train_proact`]: hybrid smooth thresholds trained one layer at a time,
//!   last hidden layer first, by distillation from the unclipped network.
//!
//! Network weights stay frozen in every method.

mod ftclipact;
mod kd;
mod profile;
mod trainer;

use serde::{Deserialize, Serialize};

pub use ftclipact::{search_ftclipact, CandidateRow, FtClipActConfig};
pub use kd::{kd_loss, KdLoss};
pub use profile::{profile_max, profile_max_with, ProfileReport};
pub use trainer::{
    is_hybrid, train_fitact, train_fitact_logged, train_proact, train_proact_logged,
    ThresholdTraining, TrainLogRow,
};

use crate::activation::{ActivationKind, Threshold, ThresholdSet, DEFAULT_SLOPE, MIN_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::optim::AdamConfig;

/// Threshold-training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Epochs for the neuron-wise final hidden layer (FitAct uses this for
    /// its single joint phase).
    pub epochs_last_layer: usize,
    pub epochs_other_layers: usize,
    pub learning_rate: f64,
    /// The learning rate halves every this many epochs within a block.
    pub lr_halving_every: usize,
    pub batch_size: usize,
    pub temperature: f64,
    /// Weight of the `sum(lambda^2)` penalty.
    pub gamma: f64,
    pub slope: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_last_layer: 50,
            epochs_other_layers: 20,
            learning_rate: 0.01,
            lr_halving_every: 10,
            batch_size: 128,
            temperature: 4.0,
            gamma: 1e-4,
            slope: DEFAULT_SLOPE,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("slope", self.slope),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Layer,
    Neuron,
}

/// Ranger: profiled maxima as hard-clip thresholds.
pub fn harden_ranger(
    net: &Network,
    report: &ProfileReport,
    granularity: Granularity,
) -> Result<ThresholdSet> {
    let mut set = ThresholdSet::new(ActivationKind::ClippedRelu, DEFAULT_SLOPE);
    for (layer, _) in net.activation_slots() {
        let threshold = match granularity {
            Granularity::Layer => Threshold::Layer(floor(report.layer_max(layer)?)),
            Granularity::Neuron => {
                let maxima = report.neuron_max.get(&layer).ok_or_else(|| {
                    Error::InvalidValue(format!(
                        "neuron-wise Ranger needs per-neuron maxima for layer {layer}; \
                         profile with all layers neuron-wise"
                    ))
                })?;
                Threshold::Neuron(maxima.iter().map(|&m| floor(m)).collect())
            }
        };
        set.bind(layer, threshold);
    }
    Ok(set)
}

/// Hybrid initialisation: layer-wise maxima on hidden layers, neuron-wise
/// maxima on the final hidden layer, smooth clip with slope `k`.
pub fn hybrid_init(net: &Network, report: &ProfileReport, k: f64) -> Result<ThresholdSet> {
    let last = net
        .final_hidden()
        .ok_or_else(|| Error::InvalidValue("network has no activation layers".into()))?;
    let mut set = ThresholdSet::new(ActivationKind::Hyrelu, k);
    for (layer, _) in net.activation_slots() {
        let threshold = if layer == last {
            let maxima = report.neuron_max.get(&layer).ok_or_else(|| {
                Error::InvalidValue(format!("no per-neuron maxima for layer {layer}"))
            })?;
            Threshold::Neuron(maxima.iter().map(|&m| floor(m)).collect())
        } else {
            Threshold::Layer(floor(report.layer_max(layer)?))
        };
        set.bind(layer, threshold);
    }
    Ok(set)
}

/// Neuron-wise initialisation on every layer for the FitAct reconstruction.
pub fn neuronwise_init(net: &Network, report: &ProfileReport, k: f64) -> Result<ThresholdSet> {
    let mut set = harden_ranger(net, report, Granularity::Neuron)?;
    set.kind = ActivationKind::FitactNeuronwise;
    set.k = k;
    Ok(set)
}

pub(crate) fn floor(v: f64) -> f64 {
    v.max(MIN_THRESHOLD)
}
