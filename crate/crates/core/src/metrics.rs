//! Accuracy, memory overhead, activation distance and histograms.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activation::{ActivationKind, ThresholdSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::faultinject::{apply_faults, CampaignResult, FaultPlan};
use crate::model::{argmax_rows, Network, EVAL_CHUNK};
use crate::tensor::Tensor;

/// Fraction of samples whose highest logit is the label.
pub fn top1_accuracy(
    net: &Network,
    thresholds: Option<&ThresholdSet>,
    data: &Dataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let logits = net.forward(thresholds, &data.images)?;
    let correct = argmax_rows(&logits)
        .into_iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == *y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// `(#layers + #neurons in the last layer) / #parameters`.
pub fn memory_overhead_counts(
    layers: usize,
    last_layer_neurons: usize,
    params: usize,
) -> Result<f64> {
    if params == 0 {
        return Err(Error::InvalidValue(
            "memory overhead of a network without parameters".into(),
        ));
    }
    Ok((layers + last_layer_neurons) as f64 / params as f64)
}

/// Stored threshold values relative to the parameter count.
///
/// For a hybrid set this is `(#layer-wise thresholds + #neurons at L) /
/// #params`; for neuron-wise sets every stored neuron threshold counts.
pub fn memory_overhead(net: &Network, thresholds: &ThresholdSet) -> Result<f64> {
    let stored = if thresholds.kind == ActivationKind::Relu {
        0
    } else {
        thresholds.count()
    };
    let (neurons_last, layers) = match thresholds.last_layer() {
        Some((_, v)) if !thresholds.has_neuronwise_hidden() => (v.len(), stored - v.len()),
        _ => (0, stored),
    };
    memory_overhead_counts(layers, neurons_last, net.param_count())
}

/// Mean squared distance between activation outputs of the faulty and the
/// fault-free network: per sample, each activation layer's squared gap is
/// divided by its neuron count, layers are averaged, then samples are averaged.
pub fn l2_activation_distance(
    net: &Network,
    thresholds: Option<&ThresholdSet>,
    plan: &FaultPlan,
    data: &Dataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    net.check_thresholds(thresholds)?;
    let slots = net.activation_slots();
    if slots.is_empty() {
        return Ok(0.0);
    }
    let (faulty, faulty_thresholds) = apply_faults(net, thresholds, plan)?;
    let mut total = 0.0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let x = data
            .images
            .slice_batch(start, (start + EVAL_CHUNK).min(data.len()));
        let golden = net.trace_from(0, thresholds, &x)?;
        let bad = faulty.trace_from(0, faulty_thresholds.as_ref(), &x)?;
        for &(layer, neurons) in &slots {
            total += l2_layer(&bad[layer + 1], &golden[layer + 1], neurons) / slots.len() as f64;
        }
    }
    Ok(total / data.len() as f64)
}

/// Sum over samples of `sum |z - f|^2 / neurons`.
fn l2_layer(z: &Tensor, f: &Tensor, neurons: usize) -> f64 {
    assert_eq!(
        z.shape(),
        f.shape(),
        "faulty and fault-free activations differ in shape"
    );
    z.data()
        .iter()
        .zip(f.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / neurons as f64
}

/// Eq. 9 for a single sample given per-layer activation vectors.
pub fn l2_distance(faulty: &[Vec<f64>], golden: &[Vec<f64>]) -> f64 {
    assert_eq!(faulty.len(), golden.len());
    if faulty.is_empty() {
        return 0.0;
    }
    faulty
        .iter()
        .zip(golden)
        .map(|(z, f)| {
            assert_eq!(z.len(), f.len());
            z.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / z.len() as f64
        })
        .sum::<f64>()
        / faulty.len() as f64
}

/// Activation histogram of one layer, split into a low range `[0, split]`
/// and a high range `(split, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub layer: usize,
    /// `(bin_lo, bin_hi, count)`.
    pub bins: Vec<(f64, f64, u64)>,
}

impl LayerHistogram {
    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.2).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (lo, hi, c) in &self.bins {
            out.push_str(&format!("{lo},{hi},{c}\n"));
        }
        out
    }
}

/// Per-activation-layer histograms, optionally of the network under `plan`.
pub fn activation_histograms(
    net: &Network,
    thresholds: Option<&ThresholdSet>,
    plan: Option<&FaultPlan>,
    data: &Dataset,
    bins: usize,
    split: f64,
) -> Result<Vec<LayerHistogram>> {
    if bins == 0 {
        return Err(Error::InvalidValue(
            "histogram needs at least one bin".into(),
        ));
    }
    if !(split > 0.0 && split.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "range split must be positive, got {split}"
        )));
    }
    net.check_thresholds(thresholds)?;
    let (net, thresholds) = match plan {
        Some(p) => apply_faults(net, thresholds, p)?,
        None => (net.clone(), thresholds.cloned()),
    };
    let slots = net.activation_slots();
    let pass = |visit: &mut dyn FnMut(usize, &[f64])| -> Result<()> {
        for start in (0..data.len()).step_by(EVAL_CHUNK) {
            let x = data
                .images
                .slice_batch(start, (start + EVAL_CHUNK).min(data.len()));
            let trace = net.trace_from(0, thresholds.as_ref(), &x)?;
            for (s, &(layer, _)) in slots.iter().enumerate() {
                visit(s, trace[layer + 1].data());
            }
        }
        Ok(())
    };
    let mut maxima = vec![0.0f64; slots.len()];
    pass(&mut |s, v| {
        maxima[s] = v.iter().copied().fold(maxima[s], f64::max);
    })?;
    let mut hists: Vec<LayerHistogram> = slots
        .iter()
        .zip(&maxima)
        .map(|(&(layer, _), &max)| {
            let lo_w = split / bins as f64;
            let mut b: Vec<(f64, f64, u64)> = (0..bins)
                .map(|i| (i as f64 * lo_w, (i + 1) as f64 * lo_w, 0))
                .collect();
            b.last_mut().unwrap().1 = split;
            if max > split {
                let hi_w = (max - split) / bins as f64;
                b.extend(
                    (0..bins).map(|i| (split + i as f64 * hi_w, split + (i + 1) as f64 * hi_w, 0)),
                );
                b.last_mut().unwrap().1 = max;
            }
            LayerHistogram { layer, bins: b }
        })
        .collect();
    pass(&mut |s, v| {
        let max = maxima[s];
        let bins_here = &mut hists[s].bins;
        for &x in v {
            let i = if x <= split {
                ((x.max(0.0) / split * bins as f64) as usize).min(bins - 1)
            } else {
                let r = (x - split) / (max - split) * bins as f64;
                bins + (r.ceil() as usize).clamp(1, bins) - 1
            };
            bins_here[i].2 += 1;
        }
    })?;
    Ok(hists)
}

/// Writes `hist_layer{idx}.csv` per activation layer into `dir`.
#[allow(clippy::too_many_arguments)]
pub fn dump_activation_histogram(
    net: &Network,
    thresholds: Option<&ThresholdSet>,
    plan: Option<&FaultPlan>,
    data: &Dataset,
    bins: usize,
    split: f64,
    dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let hists = activation_histograms(net, thresholds, plan, data, bins, split)?;
    fs::create_dir_all(dir.as_ref())?;
    let mut paths = Vec::with_capacity(hists.len());
    for h in hists {
        let path = dir.as_ref().join(format!("hist_layer{}.csv", h.layer));
        fs::write(&path, h.to_csv())?;
        paths.push(path);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceRow {
    pub ber: f64,
    pub mean: f64,
    pub std: f64,
    pub ci95_lo: f64,
    pub ci95_hi: f64,
    pub drop: f64,
}

/// Campaign outcome of one method relative to its fault-free accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResilienceSummary {
    pub method: String,
    pub baseline_top1: f64,
    pub rows: Vec<ResilienceRow>,
}

impl ResilienceSummary {
    pub fn from_campaign(method: impl Into<String>, result: &CampaignResult) -> Self {
        Self::with_baseline(method, result, result.fault_free_top1)
    }

    pub fn with_baseline(
        method: impl Into<String>,
        result: &CampaignResult,
        baseline_top1: f64,
    ) -> Self {
        Self {
            method: method.into(),
            baseline_top1,
            rows: result
                .summaries
                .iter()
                .map(|s| ResilienceRow {
                    ber: s.ber,
                    mean: s.mean,
                    std: s.std,
                    ci95_lo: s.ci95_lo,
                    ci95_hi: s.ci95_hi,
                    drop: baseline_top1 - s.mean,
                })
                .collect(),
        }
    }
}
