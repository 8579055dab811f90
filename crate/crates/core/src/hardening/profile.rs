use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Network, EVAL_CHUNK};

/// Running maxima of post-ReLU activations over a profiling set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    /// Per activation layer (network index).
    pub layer_max: BTreeMap<usize, f64>,
    /// Per neuron, for the final hidden layer or for every layer when
    /// requested.
    pub neuron_max: BTreeMap<usize, Vec<f64>>,
    pub samples: usize,
}

impl ProfileReport {
    pub fn layer_max(&self, layer: usize) -> Result<f64> {
        self.layer_max
            .get(&layer)
            .copied()
            .ok_or_else(|| Error::InvalidValue(format!("no profile for layer {layer}")))
    }
}

/// Layer maxima everywhere plus neuron maxima for the final hidden layer.
pub fn profile_max(net: &Network, data: &Dataset) -> Result<ProfileReport> {
    profile_max_with(net, data, false)
}

/// As [`profile_max`]; with `all_neurons` every layer is profiled neuron-wise.
pub fn profile_max_with(net: &Network, data: &Dataset, all_neurons: bool) -> Result<ProfileReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let slots = net.activation_slots();
    let last = net.final_hidden();
    let mut layer_max: BTreeMap<usize, f64> = slots.iter().map(|&(l, _)| (l, 0.0)).collect();
    let mut neuron_max: BTreeMap<usize, Vec<f64>> = slots
        .iter()
        .filter(|&&(l, _)| all_neurons || Some(l) == last)
        .map(|&(l, n)| (l, vec![0.0; n]))
        .collect();
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let x = data
            .images
            .slice_batch(start, (start + EVAL_CHUNK).min(data.len()));
        let trace = net.trace_from(0, None, &x)?;
        for &(layer, neurons) in &slots {
            // output of the activation layer
            let acts = &trace[layer + 1];
            let lm = layer_max.get_mut(&layer).unwrap();
            let mut nm = neuron_max.get_mut(&layer);
            for row in acts.data().chunks(neurons) {
                for (j, &v) in row.iter().enumerate() {
                    if v > *lm {
                        *lm = v;
                    }
                    if let Some(nm) = nm.as_deref_mut() {
                        if v > nm[j] {
                            nm[j] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(ProfileReport {
        layer_max,
        neuron_max,
        samples: data.len(),
    })
}
