//! Gradient training of clipping thresholds with frozen weights.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use super::{floor, kd_loss, TrainConfig};
use crate::activation::{ActivationKind, Threshold, ThresholdSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Network, EVAL_CHUNK};
use crate::optim::{halving_schedule, Adam};
use crate::tensor::Tensor;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    /// Lowest activation layer trained in this block.
    pub layer_index: usize,
    pub loss: f64,
    pub kl_term: f64,
    pub ce_term: f64,
    pub reg_term: f64,
    pub mean_lambda: f64,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str =
        "epoch,layer_index,loss,kl_term,ce_term,reg_term,mean_lambda";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.layer_index,
            self.loss,
            self.kl_term,
            self.ce_term,
            self.reg_term,
            self.mean_lambda
        )
    }
}

/// Outcome of a threshold-training run.
#[derive(Debug, Clone)]
pub struct ThresholdTraining {
    pub thresholds: ThresholdSet,
    pub log: Vec<TrainLogRow>,
    /// Threshold state after each block, tagged with the block's layer.
    pub snapshots: Vec<(usize, ThresholdSet)>,
}

/// Progressive training: one block per activation layer, from the final
/// hidden layer down to the first, each updating only that layer's
/// thresholds with a fresh Adam state.
pub fn train_proact(
    net: &Network,
    teacher: &Network,
    data: &Dataset,
    init: &ThresholdSet,
    cfg: &TrainConfig,
) -> Result<ThresholdTraining> {
    train_proact_logged(net, teacher, data, init, cfg, &mut Vec::new())
}

/// [`train_proact`] that also appends every log row to `sink`, so the rows
/// written before a divergence survive the error.
pub fn train_proact_logged(
    net: &Network,
    teacher: &Network,
    data: &Dataset,
    init: &ThresholdSet,
    cfg: &TrainConfig,
    sink: &mut Vec<TrainLogRow>,
) -> Result<ThresholdTraining> {
    let trainer = Trainer::new(net, teacher, data, init, cfg)?;
    let last = net
        .final_hidden()
        .ok_or_else(|| Error::InvalidValue("network has no activation layers".into()))?;
    let mut thresholds = init.clone();
    let start = sink.len();
    let mut snapshots = Vec::new();
    for (block, (layer, _)) in net.activation_slots().into_iter().rev().enumerate() {
        let epochs = if layer == last {
            cfg.epochs_last_layer
        } else {
            cfg.epochs_other_layers
        };
        trainer.train_block(&mut thresholds, &[layer], epochs, block as u64, sink)?;
        snapshots.push((layer, thresholds.clone()));
    }
    Ok(ThresholdTraining {
        thresholds,
        log: sink[start..].to_vec(),
        snapshots,
    })
}

/// Joint training of every threshold (FitAct reconstruction) for
/// `cfg.epochs_last_layer` epochs.
pub fn train_fitact(
    net: &Network,
    teacher: &Network,
    data: &Dataset,
    init: &ThresholdSet,
    cfg: &TrainConfig,
) -> Result<ThresholdTraining> {
    train_fitact_logged(net, teacher, data, init, cfg, &mut Vec::new())
}

/// [`train_fitact`] with a log sink, as in [`train_proact_logged`].
pub fn train_fitact_logged(
    net: &Network,
    teacher: &Network,
    data: &Dataset,
    init: &ThresholdSet,
    cfg: &TrainConfig,
    sink: &mut Vec<TrainLogRow>,
) -> Result<ThresholdTraining> {
    let trainer = Trainer::new(net, teacher, data, init, cfg)?;
    let layers: Vec<usize> = net.activation_slots().iter().map(|&(l, _)| l).collect();
    let mut thresholds = init.clone();
    let start = sink.len();
    trainer.train_block(&mut thresholds, &layers, cfg.epochs_last_layer, 0, sink)?;
    let snapshots = vec![(layers[0], thresholds.clone())];
    Ok(ThresholdTraining {
        thresholds,
        log: sink[start..].to_vec(),
        snapshots,
    })
}

struct Trainer<'a> {
    net: &'a Network,
    data: &'a Dataset,
    teacher_logits: Tensor,
    cfg: &'a TrainConfig,
}

impl<'a> Trainer<'a> {
    fn new(
        net: &'a Network,
        teacher: &Network,
        data: &'a Dataset,
        init: &ThresholdSet,
        cfg: &'a TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if teacher.layers() != net.layers() || teacher.params_flat() != net.params_flat() {
            return Err(Error::Shape(
                "teacher/student structure mismatch: the student must reuse the teacher's layers and weights".into(),
            ));
        }
        if !init.kind.is_smooth() {
            return Err(Error::InvalidValue(format!(
                "threshold training needs a smooth activation, got {}",
                init.kind.as_str()
            )));
        }
        init.validate(&net.activation_slots())?;
        let teacher_logits = teacher.forward(None, &data.images)?;
        Ok(Self {
            net,
            data,
            teacher_logits,
            cfg,
        })
    }

    /// Inputs of layer `start` for every sample under the current thresholds.
    /// Layers below the lowest trainable one are fixed for a whole block.
    fn prefix_inputs(&self, start: usize, thresholds: &ThresholdSet) -> Result<Tensor> {
        let n = self.data.len();
        let mut parts = Vec::with_capacity(n.div_ceil(EVAL_CHUNK));
        for s in (0..n).step_by(EVAL_CHUNK) {
            let mut x = self.data.images.slice_batch(s, (s + EVAL_CHUNK).min(n));
            for i in 0..start {
                x = self.net.apply_layer(i, Some(thresholds), &x)?;
            }
            parts.push(x);
        }
        Tensor::concat(&parts)
    }

    fn train_block(
        &self,
        thresholds: &mut ThresholdSet,
        layers: &[usize],
        epochs: usize,
        block: u64,
        log: &mut Vec<TrainLogRow>,
    ) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        let start = *layers.iter().min().expect("at least one trainable layer");
        let inputs = self.prefix_inputs(start, thresholds)?;
        let mut values = trainable_values(thresholds, layers);
        let mut adam = Adam::new(values.len(), self.cfg.adam);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(
            self.cfg.seed ^ block.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        let mut grad = vec![0.0; values.len()];
        for epoch in 0..epochs {
            let lr = halving_schedule(self.cfg.learning_rate, epoch, self.cfg.lr_halving_every);
            order.shuffle(&mut rng);
            let mut acc = [0.0; 4];
            for batch in order.chunks(self.cfg.batch_size) {
                let x = inputs.select(batch);
                let labels: Vec<usize> = batch.iter().map(|&i| self.data.labels[i]).collect();
                let trace = self.net.trace_from(start, Some(thresholds), &x)?;
                let teacher = self.teacher_logits.select(batch);
                let kd = kd_loss(
                    trace.last().unwrap(),
                    &teacher,
                    &labels,
                    &values,
                    self.cfg.temperature,
                    self.cfg.gamma,
                )?;
                if !kd.loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        layer: Some(start),
                    });
                }
                let w = batch.len() as f64;
                for (a, v) in acc.iter_mut().zip([kd.loss, kd.kl, kd.ce, kd.reg]) {
                    *a += v * w;
                }
                let grads = self.net.backward(
                    start,
                    start,
                    Some(thresholds),
                    &trace,
                    kd.grad,
                    false,
                    layers,
                )?;
                let mut at = 0;
                for l in layers_sorted(layers) {
                    let g = &grads.thresholds[&l];
                    grad[at..at + g.len()].copy_from_slice(g);
                    at += g.len();
                }
                for (g, v) in grad.iter_mut().zip(&values) {
                    *g += 2.0 * self.cfg.gamma * v;
                }
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Divergence {
                        epoch,
                        layer: Some(start),
                    });
                }
                adam.step(&mut values, &grad, lr);
                values.iter_mut().for_each(|v| *v = floor(*v));
                write_trainable(thresholds, layers, &values);
            }
            let n = self.data.len() as f64;
            log.push(TrainLogRow {
                epoch,
                layer_index: start,
                loss: acc[0] / n,
                kl_term: acc[1] / n,
                ce_term: acc[2] / n,
                reg_term: acc[3] / n,
                mean_lambda: values.iter().sum::<f64>() / values.len() as f64,
            });
        }
        Ok(())
    }
}

fn layers_sorted(layers: &[usize]) -> Vec<usize> {
    let mut v = layers.to_vec();
    v.sort_unstable();
    v
}

fn trainable_values(set: &ThresholdSet, layers: &[usize]) -> Vec<f64> {
    layers_sorted(layers)
        .into_iter()
        .flat_map(|l| set.get(l).map(|t| t.values().to_vec()).unwrap_or_default())
        .collect()
}

fn write_trainable(set: &mut ThresholdSet, layers: &[usize], values: &[f64]) {
    let mut at = 0;
    for l in layers_sorted(layers) {
        if let Some(t) = set.get_mut(l) {
            let dst = t.values_mut();
            dst.copy_from_slice(&values[at..at + dst.len()]);
            at += dst.len();
        }
    }
}

/// Is this set's granularity hybrid for `net`: scalar thresholds on hidden
/// layers and per-neuron thresholds on the final hidden layer?
pub fn is_hybrid(net: &Network, set: &ThresholdSet) -> bool {
    let last = net.final_hidden();
    set.kind != ActivationKind::Relu
        && net
            .activation_slots()
            .iter()
            .all(|&(l, n)| match set.get(l) {
                Some(Threshold::Neuron(v)) => Some(l) == last && v.len() == n,
                Some(Threshold::Layer(_)) => Some(l) != last,
                None => false,
            })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hardening::{hybrid_init, neuronwise_init, profile_max, profile_max_with};
    use crate::layer::LayerSpec;
    use rand::Rng;

    fn small_net() -> Network {
        let mut net = Network::new(
            "small",
            vec![4],
            vec![
                LayerSpec::Dense {
                    inputs: 4,
                    outputs: 6,
                },
                LayerSpec::Activation,
                LayerSpec::Dense {
                    inputs: 6,
                    outputs: 5,
                },
                LayerSpec::Activation,
                LayerSpec::Dense {
                    inputs: 5,
                    outputs: 3,
                },
            ],
        )
        .unwrap();
        net.init_params(2);
        net
    }

    fn toy_data(n: usize) -> Dataset {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let x: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels = (0..n).map(|i| i % 3).collect();
        Dataset::new(Tensor::new(vec![n, 4], x).unwrap(), labels, 3).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs_last_layer: epochs,
            epochs_other_layers: epochs,
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_return_initialisation() {
        let net = small_net();
        let data = toy_data(40);
        let report = profile_max(&net, &data).unwrap();
        let init = hybrid_init(&net, &report, 10.0).unwrap();
        assert!(is_hybrid(&net, &init));
        let out = train_proact(&net, &net, &data, &init, &cfg(0)).unwrap();
        assert_eq!(out.thresholds, init);
        assert!(out.log.is_empty());

        let report = profile_max_with(&net, &data, true).unwrap();
        let init = neuronwise_init(&net, &report, 10.0).unwrap();
        let out = train_fitact(&net, &net, &data, &init, &cfg(0)).unwrap();
        assert_eq!(out.thresholds, init);
    }

    #[test]
    fn blocks_only_touch_their_layer() {
        let net = small_net();
        let data = toy_data(64);
        let report = profile_max(&net, &data).unwrap();
        let init = hybrid_init(&net, &report, 10.0).unwrap();
        let out = train_proact(&net, &net, &data, &init, &cfg(3)).unwrap();
        let order: Vec<usize> = out.snapshots.iter().map(|(l, _)| *l).collect();
        assert_eq!(order, vec![3, 1]);
        let mut before = init.clone();
        for (layer, after) in &out.snapshots {
            for (l, t) in after.iter() {
                if l != *layer {
                    assert_eq!(
                        Some(t),
                        before.get(l),
                        "layer {l} changed during block {layer}"
                    );
                }
            }
            assert_ne!(after.get(*layer), before.get(*layer));
            before = after.clone();
        }
        assert!(is_hybrid(&net, &out.thresholds));
        assert_eq!(out.thresholds.count(), 1 + 5);
    }

    #[test]
    fn structure_mismatch_is_rejected() {
        let net = small_net();
        let mut other = net.clone();
        other.init_params(99);
        let data = toy_data(8);
        let init = hybrid_init(&net, &profile_max(&net, &data).unwrap(), 10.0).unwrap();
        assert!(train_proact(&net, &other, &data, &init, &cfg(1)).is_err());
    }

    #[test]
    fn hard_clip_cannot_be_trained() {
        let net = small_net();
        let data = toy_data(8);
        let mut init = hybrid_init(&net, &profile_max(&net, &data).unwrap(), 10.0).unwrap();
        init.kind = ActivationKind::ClippedRelu;
        assert!(train_proact(&net, &net, &data, &init, &cfg(1)).is_err());
    }

    #[test]
    fn fitact_count_is_all_neurons() {
        let net = small_net();
        let data = toy_data(32);
        let report = profile_max_with(&net, &data, true).unwrap();
        let init = neuronwise_init(&net, &report, 10.0).unwrap();
        let out = train_fitact(&net, &net, &data, &init, &cfg(2)).unwrap();
        assert_eq!(out.thresholds.count(), 6 + 5);
        assert_eq!(out.log.len(), 2);
    }
}
