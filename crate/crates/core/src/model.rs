//! Network container, reference architectures, the `.rrtm`/`.rrtb` model
//! format and baseline (teacher) training.
//!
//! Parameters are held as `f64` tensors whose values are always
//! representable in `f32`; the on-disk blob stores them as little-endian
//! `f32`, so save/load is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::activation::{
    activation_backward, activation_forward, ActivationKind, Threshold, ThresholdSet,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layer::LayerSpec;
use crate::optim::{halving_schedule, Adam, AdamConfig, Sgd};
use crate::tensor::{log_softmax_row, Tensor};

/// Samples per chunk when a whole dataset is pushed through a network.
pub const EVAL_CHUNK: usize = 256;

pub const CONTAINER_MAGIC: &[u8; 8] = b"RRTMODL1";
const FORMAT_TAG: &str = "rrtm/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub name: String,
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Tensor>>,
    /// `shapes[i]` is the per-sample input shape of layer `i`; the last
    /// entry is the output shape.
    shapes: Vec<Vec<usize>>,
}

/// Gradients produced by [`Network::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    /// Per layer `[dW, db]`; empty for layers that were not requested.
    pub params: Vec<Vec<Tensor>>,
    /// Threshold gradients keyed by activation layer index, in canonical
    /// value order of each binding.
    pub thresholds: BTreeMap<usize, Vec<f64>>,
}

impl Network {
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network without layers".into()));
        }
        let mut shapes = vec![input_shape.clone()];
        for layer in &layers {
            let next = layer.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out.len() != 1 {
            return Err(Error::Shape(format!(
                "network output must be a class vector, got {out:?}"
            )));
        }
        let classes = out[0];
        let params = layers
            .iter()
            .map(|l| l.param_shapes().into_iter().map(Tensor::zeros).collect())
            .collect();
        Ok(Self {
            name: name.into(),
            input_shape,
            classes,
            layers,
            params,
            shapes,
        })
    }

    /// LeNet-5 style network for 1x28x28 inputs.
    pub fn lenet5() -> Self {
        use LayerSpec::*;
        Self::new(
            "lenet5",
            vec![1, 28, 28],
            vec![
                Conv2d {
                    in_channels: 1,
                    out_channels: 6,
                    kernel: 5,
                    stride: 1,
                    padding: 2,
                },
                Activation,
                MaxPool2d {
                    kernel: 2,
                    stride: 2,
                },
                Conv2d {
                    in_channels: 6,
                    out_channels: 16,
                    kernel: 5,
                    stride: 1,
                    padding: 0,
                },
                Activation,
                MaxPool2d {
                    kernel: 2,
                    stride: 2,
                },
                Flatten,
                Dense {
                    inputs: 400,
                    outputs: 120,
                },
                Activation,
                Dense {
                    inputs: 120,
                    outputs: 84,
                },
                Activation,
                Dense {
                    inputs: 84,
                    outputs: 10,
                },
            ],
        )
        .expect("lenet5 shapes are consistent")
    }

    /// Three conv blocks and two dense layers for 3x32x32 inputs.
    pub fn minialex() -> Self {
        use LayerSpec::*;
        let conv = |i, o| Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let pool = MaxPool2d {
            kernel: 2,
            stride: 2,
        };
        Self::new(
            "minialex",
            vec![3, 32, 32],
            vec![
                conv(3, 32),
                Activation,
                pool,
                conv(32, 64),
                Activation,
                pool,
                conv(64, 128),
                Activation,
                pool,
                Flatten,
                Dense {
                    inputs: 2048,
                    outputs: 256,
                },
                Activation,
                Dense {
                    inputs: 256,
                    outputs: 10,
                },
            ],
        )
        .expect("minialex shapes are consistent")
    }

    /// Reference architecture by name, with seeded initial weights.
    pub fn from_builder(arch: &str, seed: u64) -> Result<Self> {
        let mut net = match arch {
            "lenet5" => Self::lenet5(),
            "minialex" => Self::minialex(),
            other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
        };
        net.init_params(seed);
        Ok(net)
    }

    /// He-uniform weights, zero biases.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        for (layer, params) in self.layers.iter().zip(&mut self.params) {
            let fan_in = match *layer {
                LayerSpec::Dense { inputs, .. } => inputs,
                LayerSpec::Conv2d {
                    in_channels,
                    kernel,
                    ..
                } => in_channels * kernel * kernel,
                _ => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in params[0].data_mut() {
                *v = round_f32(rng.gen_range(-bound..bound));
            }
            params[1].data_mut().fill(0.0);
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self, layer: usize) -> &[Tensor] {
        &self.params[layer]
    }

    /// Replaces the parameters of one layer; values are rounded to `f32`.
    pub fn set_params(&mut self, layer: usize, mut params: Vec<Tensor>) -> Result<()> {
        let spec = self.layers.get(layer).ok_or(Error::Index {
            index: layer,
            len: self.layers.len(),
        })?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len()
            || shapes
                .iter()
                .zip(&params)
                .any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::Shape(format!(
                "layer {layer} expects params {shapes:?}"
            )));
        }
        for p in &mut params {
            p.data_mut().iter_mut().for_each(|v| *v = round_f32(*v));
        }
        self.params[layer] = params;
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-sample input shape of layer `i` (or the output shape for `i == len`).
    pub fn shape_at(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// `(layer index, neurons)` for every activation slot, in order.
    pub fn activation_slots(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Activation))
            .map(|(i, _)| (i, self.shapes[i].iter().product()))
            .collect()
    }

    /// Index of the final hidden activation, the one preceding the classifier.
    pub fn final_hidden(&self) -> Option<usize> {
        self.activation_slots().last().map(|&(i, _)| i)
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }

    /// All parameters in canonical order: ascending layer, weight before bias.
    pub fn params_flat(&self) -> Vec<f64> {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Overwrites all parameters in canonical order, rounding to `f32`.
    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "network holds {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for t in self.params.iter_mut().flatten() {
            for v in t.data_mut() {
                *v = round_f32(*it.next().unwrap());
            }
        }
        Ok(())
    }

    /// Mutable access to the parameter at a canonical flat index.
    pub(crate) fn param_at_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for t in self.params.iter_mut().flatten() {
            if index < t.len() {
                return Some(&mut t.data_mut()[index]);
            }
            index -= t.len();
        }
        None
    }

    /// Checks that a threshold set covers every activation slot.
    pub fn check_thresholds(&self, thresholds: Option<&ThresholdSet>) -> Result<()> {
        let Some(set) = thresholds else { return Ok(()) };
        if set.kind == ActivationKind::Relu {
            return Ok(());
        }
        for (layer, neurons) in self.activation_slots() {
            match set.get(layer) {
                None => {
                    return Err(Error::MissingThresholds(format!(
                        "{} policy has no threshold for activation layer {layer}",
                        set.kind.as_str()
                    )))
                }
                Some(Threshold::Neuron(v)) if v.len() != neurons => {
                    return Err(Error::Shape(format!(
                        "layer {layer}: {neurons} neurons, {} thresholds",
                        v.len()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn policy<'a>(
        &self,
        layer: usize,
        thresholds: Option<&'a ThresholdSet>,
    ) -> Option<(&'a ThresholdSet, &'a Threshold)> {
        let set = thresholds.filter(|s| s.kind != ActivationKind::Relu)?;
        set.get(layer).map(|t| (set, t))
    }

    /// Runs a single layer. Activation slots use the bound policy.
    pub fn apply_layer(
        &self,
        i: usize,
        thresholds: Option<&ThresholdSet>,
        input: &Tensor,
    ) -> Result<Tensor> {
        match self.layers[i] {
            LayerSpec::Activation => {
                let expected = &self.shapes[i];
                if &input.shape()[1..] != expected.as_slice() {
                    return Err(Error::Shape(format!(
                        "activation {i} expects {expected:?}, got {:?}",
                        &input.shape()[1..]
                    )));
                }
                Ok(activation_forward(self.policy(i, thresholds), input))
            }
            ref layer => layer.forward(&self.params[i], input),
        }
    }

    fn check_input(&self, start: usize, input: &Tensor) -> Result<()> {
        if input.shape().len() < 2 || &input.shape()[1..] != self.shapes[start].as_slice() {
            return Err(Error::Shape(format!(
                "layer {start} expects batches of {:?}, got {:?}",
                self.shapes[start],
                input.shape()
            )));
        }
        Ok(())
    }

    /// Logits for a batch. `None` thresholds evaluate the plain ReLU network.
    pub fn forward(&self, thresholds: Option<&ThresholdSet>, batch: &Tensor) -> Result<Tensor> {
        self.check_thresholds(thresholds)?;
        self.check_input(0, batch)?;
        let n = batch.batch();
        if n <= EVAL_CHUNK {
            return self.forward_from(0, thresholds, batch);
        }
        let mut parts = Vec::with_capacity(n.div_ceil(EVAL_CHUNK));
        for start in (0..n).step_by(EVAL_CHUNK) {
            let chunk = batch.slice_batch(start, (start + EVAL_CHUNK).min(n));
            parts.push(self.forward_from(0, thresholds, &chunk)?);
        }
        Tensor::concat(&parts)
    }

    /// Runs layers `start..` on `input`, which must be the input of layer `start`.
    pub fn forward_from(
        &self,
        start: usize,
        thresholds: Option<&ThresholdSet>,
        input: &Tensor,
    ) -> Result<Tensor> {
        self.check_input(start, input)?;
        let mut x = self.apply_layer(start, thresholds, input)?;
        for i in start + 1..self.layers.len() {
            x = self.apply_layer(i, thresholds, &x)?;
        }
        Ok(x)
    }

    /// Like [`forward_from`](Self::forward_from) but keeps every intermediate:
    /// element `j` is the input of layer `start + j`, the last is the output.
    pub fn trace_from(
        &self,
        start: usize,
        thresholds: Option<&ThresholdSet>,
        input: &Tensor,
    ) -> Result<Vec<Tensor>> {
        self.check_input(start, input)?;
        let mut trace = Vec::with_capacity(self.layers.len() - start + 1);
        trace.push(input.clone());
        for i in start..self.layers.len() {
            let next = self.apply_layer(i, thresholds, trace.last().unwrap())?;
            trace.push(next);
        }
        Ok(trace)
    }

    /// Reverse pass over a trace from [`trace_from`](Self::trace_from).
    ///
    /// Walks from the output down to layer `stop` (inclusive, `stop >= start`),
    /// collecting parameter gradients when `param_grads` is set and threshold
    /// gradients for every activation layer listed in `threshold_layers`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        start: usize,
        stop: usize,
        thresholds: Option<&ThresholdSet>,
        trace: &[Tensor],
        grad_logits: Tensor,
        param_grads: bool,
        threshold_layers: &[usize],
    ) -> Result<Gradients> {
        if trace.len() != self.layers.len() - start + 1 || stop < start {
            return Err(Error::Shape("trace does not match network".into()));
        }
        let mut grads = Gradients {
            params: vec![Vec::new(); self.layers.len()],
            thresholds: BTreeMap::new(),
        };
        let mut g = grad_logits;
        for i in (stop..self.layers.len()).rev() {
            let input = &trace[i - start];
            let last = i == stop;
            match self.layers[i] {
                LayerSpec::Activation => {
                    let want = threshold_layers.contains(&i);
                    let (gi, gl) =
                        activation_backward(self.policy(i, thresholds), input, &g, want)?;
                    if let Some(gl) = gl {
                        grads.thresholds.insert(i, gl);
                    }
                    g = gi;
                }
                ref layer => {
                    // the input gradient of the bottom layer is never used
                    if last && !param_grads {
                        break;
                    }
                    let (gi, gp) = layer.backward(&self.params[i], input, &g, param_grads)?;
                    grads.params[i] = gp;
                    g = gi;
                }
            }
        }
        Ok(grads)
    }
}

#[inline]
pub(crate) fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Mean cross-entropy of `softmax(logits)` against `labels`, and its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let classes = *logits.shape().last().unwrap_or(&0);
    if logits.batch() != labels.len() || logits.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let mut logp = vec![0.0; classes];
    let mut loss = 0.0;
    for (s, (row, &y)) in logits.data().chunks(classes).zip(labels).enumerate() {
        log_softmax_row(row, 1.0, &mut logp);
        loss -= logp[y];
        let g = &mut grad.data_mut()[s * classes..(s + 1) * classes];
        for (gj, lp) in g.iter_mut().zip(&logp) {
            *gj = lp.exp() / n;
        }
        g[y] -= 1.0 / n;
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaselineOptimizer {
    Sgd { momentum: f64 },
    Adam(AdamConfig),
}

/// Settings for teacher training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Halve the learning rate every this many epochs (0 = never).
    pub lr_halving_every: usize,
    pub optimizer: BaselineOptimizer,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            learning_rate: 0.01,
            lr_halving_every: 10,
            optimizer: BaselineOptimizer::Sgd { momentum: 0.9 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

/// Trains all weights on cross-entropy with mini-batches.
pub fn train_baseline(
    net: &Network,
    data: &Dataset,
    cfg: &BaselineConfig,
) -> Result<(Network, Vec<EpochLog>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config(
            "batch size and learning rate must be positive".into(),
        ));
    }
    if data.sample_shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "dataset samples {:?} vs network input {:?}",
            data.sample_shape(),
            net.input_shape()
        )));
    }
    let mut net = net.clone();
    let mut weights = net.params_flat();
    let mut opt = match cfg.optimizer {
        BaselineOptimizer::Sgd { momentum } => Optimizer::Sgd(Sgd::new(weights.len(), momentum)),
        BaselineOptimizer::Adam(a) => Optimizer::Adam(Adam::new(weights.len(), a)),
    };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut flat_grad = vec![0.0; weights.len()];
    for epoch in 0..cfg.epochs {
        let lr = halving_schedule(cfg.learning_rate, epoch, cfg.lr_halving_every);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let x = data.images.select(batch);
            let y: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let trace = net.trace_from(0, None, &x)?;
            let logits = trace.last().unwrap();
            correct += argmax_rows(logits)
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            let (loss, grad) = cross_entropy(logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, layer: None });
            }
            loss_sum += loss * batch.len() as f64;
            let grads = net.backward(0, 0, None, &trace, grad, true, &[])?;
            let mut at = 0;
            for g in grads.params.iter().flatten() {
                flat_grad[at..at + g.len()].copy_from_slice(g.data());
                at += g.len();
            }
            match &mut opt {
                Optimizer::Sgd(o) => o.step(&mut weights, &flat_grad, lr),
                Optimizer::Adam(o) => o.step(&mut weights, &flat_grad, lr),
            }
            weights.iter_mut().for_each(|w| *w = round_f32(*w));
            net.set_params_flat(&weights)?;
        }
        log.push(EpochLog {
            epoch,
            learning_rate: lr,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((net, log))
}

/// Index of the largest entry per row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn manifest_and_blob(net: &Network, blob_file: Option<&str>) -> (Value, Vec<u8>) {
    let mut blob = Vec::with_capacity(net.param_count() * 4);
    let mut layers = Vec::new();
    for (i, (layer, params)) in net.layers.iter().zip(&net.params).enumerate() {
        let mut entry = layer.to_json();
        let mut tensors = Vec::new();
        for (name, t) in ["weight", "bias"].iter().zip(params) {
            let offset = blob.len();
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            tensors.push(json!({
                "name": format!("{i}.{name}"),
                "shape": t.shape(),
                "offset": offset,
                "length": blob.len() - offset,
            }));
        }
        if !tensors.is_empty() {
            entry["params"] = Value::Array(tensors);
        }
        layers.push(entry);
    }
    let manifest = json!({
        "format": FORMAT_TAG,
        "name": net.name,
        "input_shape": net.input_shape,
        "classes": net.classes,
        "layers": layers,
        "blob": {
            "file": blob_file,
            "length": blob.len(),
            "sha256": sha256_hex(&blob),
        },
    });
    (manifest, blob)
}

/// Path of the blob file paired with a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("rrtb")
}

/// Writes `<path>` (JSON manifest) and the sibling `.rrtb` blob.
pub fn save_model(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let blob_file = blob_path(path);
    let blob_name = blob_file
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidValue(format!("bad model path {}", path.display())))?
        .to_string();
    let (manifest, blob) = manifest_and_blob(net, Some(&blob_name));
    fs::write(&blob_file, &blob)?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Writes a single-file container: magic, manifest length (u64 LE),
/// manifest, blob.
pub fn save_container(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let (manifest, blob) = manifest_and_blob(net, None);
    let m = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + m.len() + blob.len());
    out.extend_from_slice(CONTAINER_MAGIC);
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    out.extend_from_slice(&m);
    out.extend_from_slice(&blob);
    fs::write(path, out)?;
    Ok(())
}

/// Loads either a manifest (with its `.rrtb` sibling) or a single-file container.
pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.starts_with(CONTAINER_MAGIC) {
        let len_bytes: [u8; 8] =
            bytes
                .get(8..16)
                .and_then(|b| b.try_into().ok())
                .ok_or(Error::Truncated {
                    expected: 16,
                    actual: bytes.len(),
                })?;
        let mlen = u64::from_le_bytes(len_bytes) as usize;
        let end = 16usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Truncated {
                expected: 16 + mlen,
                actual: bytes.len(),
            })?;
        let manifest: Value = serde_json::from_slice(&bytes[16..end])?;
        return from_manifest(&manifest, &bytes[end..]);
    }
    let manifest: Value = serde_json::from_slice(&bytes)?;
    let blob_name = manifest["blob"]["file"]
        .as_str()
        .ok_or_else(|| Error::Format("manifest does not name its blob file".into()))?;
    let blob_file = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(blob_name);
    let blob = fs::read(&blob_file)?;
    from_manifest(&manifest, &blob)
}

fn from_manifest(manifest: &Value, blob: &[u8]) -> Result<Network> {
    let bad = |m: String| Error::Format(format!("model manifest: {m}"));
    if manifest["format"].as_str() != Some(FORMAT_TAG) {
        return Err(bad(format!("unknown format tag {}", manifest["format"])));
    }
    let declared = manifest["blob"]["length"]
        .as_u64()
        .ok_or_else(|| bad("missing blob length".into()))? as usize;
    if declared != blob.len() {
        return Err(bad(format!(
            "blob length mismatch: manifest declares {declared} bytes, blob has {}",
            blob.len()
        )));
    }
    let input_shape: Vec<usize> = serde_json::from_value(manifest["input_shape"].clone())?;
    let entries = manifest["layers"]
        .as_array()
        .ok_or_else(|| bad("`layers` must be an array".into()))?;
    let layers = entries
        .iter()
        .map(LayerSpec::from_json)
        .collect::<Result<Vec<_>>>()?;
    let name = manifest["name"].as_str().unwrap_or("model").to_string();
    let mut net = Network::new(name, input_shape, layers)?;
    if manifest["classes"].as_u64() != Some(net.classes as u64) {
        return Err(bad("class count disagrees with layer shapes".into()));
    }
    for (i, entry) in entries.iter().enumerate() {
        let shapes = net.layers[i].param_shapes();
        let tensors = entry["params"].as_array().map(Vec::as_slice).unwrap_or(&[]);
        if tensors.len() != shapes.len() {
            return Err(bad(format!("layer {i}: expected {} tensors", shapes.len())));
        }
        let mut params = Vec::with_capacity(shapes.len());
        for (t, shape) in tensors.iter().zip(shapes) {
            let declared: Vec<usize> = serde_json::from_value(t["shape"].clone())?;
            if declared != shape {
                return Err(bad(format!(
                    "layer {i}: tensor shape {declared:?}, expected {shape:?}"
                )));
            }
            let offset = t["offset"]
                .as_u64()
                .ok_or_else(|| bad("tensor without offset".into()))?
                as usize;
            let length = t["length"]
                .as_u64()
                .ok_or_else(|| bad("tensor without length".into()))?
                as usize;
            let numel: usize = shape.iter().product();
            if length != numel * 4 || offset + length > blob.len() {
                return Err(bad(format!(
                    "layer {i}: tensor bytes {offset}+{length} invalid"
                )));
            }
            let data = blob[offset..offset + length]
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            params.push(Tensor::new(shape, data)?);
        }
        net.params[i] = params;
    }
    Ok(net)
}
