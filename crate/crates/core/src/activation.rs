//! ReLU, hard clipped ReLU, the sigmoid-smoothed clipped ReLU (HyReLU) and
//! the threshold container binding clipping parameters to network layers.
//!
//! The smooth form is `max(0, x * sigmoid(k * (lambda - x)))`: inputs well
//! below `lambda` pass almost unchanged, inputs above it are driven to 0.
//! Hybrid granularity means one scalar threshold per hidden activation
//! layer except the final one, which gets one threshold per neuron.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default transition slope of the smooth clip.
pub const DEFAULT_SLOPE: f64 = 10.0;

/// Lower bound applied to thresholds produced by profiling or training, so
/// dead neurons (maximum 0) still get a valid positive threshold.
pub const MIN_THRESHOLD: f64 = 1e-6;

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn clipped_relu(x: f64, lambda: f64) -> Result<f64> {
    check_threshold(lambda)?;
    Ok(clip_hard(x, lambda))
}

pub fn hyrelu(x: f64, lambda: f64, k: f64) -> Result<f64> {
    check_threshold(lambda)?;
    check_slope(k)?;
    Ok(clip_smooth(x, lambda, k))
}

/// Partials `(d/dx, d/dlambda)` of [`hyrelu`]. Both are 0 wherever the
/// outer `max` selects 0.
pub fn hyrelu_grad(x: f64, lambda: f64, k: f64) -> Result<(f64, f64)> {
    check_threshold(lambda)?;
    check_slope(k)?;
    Ok(clip_smooth_grad(x, lambda, k))
}

fn check_threshold(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidThreshold(lambda))
    }
}

fn check_slope(k: f64) -> Result<()> {
    if k > 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!(
            "slope k must be positive, got {k}"
        )))
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// The unchecked kernels below accept any threshold: fault injection can
// drive stored thresholds negative or very large.

#[inline]
pub(crate) fn clip_hard(x: f64, lambda: f64) -> f64 {
    if (0.0..=lambda).contains(&x) {
        x
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn clip_smooth(x: f64, lambda: f64, k: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    x * sigmoid(k * (lambda - x))
}

#[inline]
pub(crate) fn clip_smooth_grad(x: f64, lambda: f64, k: f64) -> (f64, f64) {
    if x <= 0.0 {
        return (0.0, 0.0);
    }
    let z = k * (lambda - x);
    let s = sigmoid(z);
    let ds = s * sigmoid(-z);
    if x * s <= 0.0 {
        return (0.0, 0.0);
    }
    (s - x * k * ds, x * k * ds)
}

/// Which non-linearity an activation slot applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    /// Hard clip: values above the threshold become 0.
    ClippedRelu,
    /// Smooth clip with hybrid granularity.
    Hyrelu,
    /// Smooth clip with per-neuron thresholds on every layer.
    FitactNeuronwise,
}

impl ActivationKind {
    pub fn is_smooth(self) -> bool {
        matches!(
            self,
            ActivationKind::Hyrelu | ActivationKind::FitactNeuronwise
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::ClippedRelu => "clipped_relu",
            ActivationKind::Hyrelu => "hyrelu",
            ActivationKind::FitactNeuronwise => "fitact_neuronwise",
        }
    }
}

/// Threshold bound to one activation slot.
#[derive(Debug, Clone, PartialEq)]
pub enum Threshold {
    Layer(f64),
    Neuron(Vec<f64>),
}

impl Threshold {
    pub fn len(&self) -> usize {
        match self {
            Threshold::Layer(_) => 1,
            Threshold::Neuron(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[f64] {
        match self {
            Threshold::Layer(v) => std::slice::from_ref(v),
            Threshold::Neuron(v) => v,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        match self {
            Threshold::Layer(v) => std::slice::from_mut(v),
            Threshold::Neuron(v) => v,
        }
    }

    #[inline]
    fn at(&self, neuron: usize) -> f64 {
        match self {
            Threshold::Layer(v) => *v,
            Threshold::Neuron(v) => v[neuron],
        }
    }
}

/// Clipping thresholds keyed by the network index of each activation slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSet {
    pub kind: ActivationKind,
    pub k: f64,
    bindings: BTreeMap<usize, Threshold>,
}

impl ThresholdSet {
    pub fn new(kind: ActivationKind, k: f64) -> Self {
        Self {
            kind,
            k,
            bindings: BTreeMap::new(),
        }
    }

    pub fn with(mut self, layer: usize, threshold: Threshold) -> Self {
        self.bindings.insert(layer, threshold);
        self
    }

    pub fn bind(&mut self, layer: usize, threshold: Threshold) {
        self.bindings.insert(layer, threshold);
    }

    pub fn get(&self, layer: usize) -> Option<&Threshold> {
        self.bindings.get(&layer)
    }

    pub fn get_mut(&mut self, layer: usize) -> Option<&mut Threshold> {
        self.bindings.get_mut(&layer)
    }

    /// Bindings in ascending layer order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Threshold)> {
        self.bindings.iter().map(|(&l, t)| (l, t))
    }

    pub fn layers(&self) -> Vec<usize> {
        self.bindings.keys().copied().collect()
    }

    /// Scalar thresholds of layer-wise slots.
    pub fn per_layer(&self) -> BTreeMap<usize, f64> {
        self.iter()
            .filter_map(|(l, t)| match t {
                Threshold::Layer(v) => Some((l, *v)),
                Threshold::Neuron(_) => None,
            })
            .collect()
    }

    /// Per-neuron thresholds of the highest bound slot, when it is neuron-wise.
    pub fn last_layer(&self) -> Option<(usize, &[f64])> {
        match self.bindings.iter().next_back() {
            Some((&l, Threshold::Neuron(v))) => Some((l, v)),
            _ => None,
        }
    }

    /// Total number of stored threshold values.
    pub fn count(&self) -> usize {
        self.bindings.values().map(Threshold::len).sum()
    }

    /// All stored values in canonical order: ascending layer, then neuron.
    pub fn values(&self) -> Vec<f64> {
        self.bindings
            .values()
            .flat_map(|t| t.values().iter().copied())
            .collect()
    }

    /// Overwrites all stored values in canonical order.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.count() {
            return Err(Error::Shape(format!(
                "threshold set holds {} values, got {}",
                self.count(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for t in self.bindings.values_mut() {
            for v in t.values_mut() {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Is neuron-wise granularity used anywhere below the last bound slot?
    pub fn has_neuronwise_hidden(&self) -> bool {
        let last = self.bindings.keys().next_back().copied();
        self.iter()
            .any(|(l, t)| matches!(t, Threshold::Neuron(_)) && Some(l) != last)
    }

    /// Checks the set against `(layer index, neuron count)` of every
    /// activation slot of a network.
    pub fn validate(&self, slots: &[(usize, usize)]) -> Result<()> {
        check_slope(self.k)?;
        if self.kind == ActivationKind::Relu {
            return Ok(());
        }
        for &(layer, neurons) in slots {
            let t = self.get(layer).ok_or_else(|| {
                Error::MissingThresholds(format!("no threshold bound to activation layer {layer}"))
            })?;
            if let Threshold::Neuron(v) = t {
                if v.len() != neurons {
                    return Err(Error::Shape(format!(
                        "layer {layer} has {neurons} neurons but {} thresholds",
                        v.len()
                    )));
                }
            }
            for &v in t.values() {
                check_threshold(v)?;
            }
        }
        if let Some(extra) = self
            .bindings
            .keys()
            .find(|l| !slots.iter().any(|(s, _)| s == *l))
        {
            return Err(Error::Shape(format!(
                "threshold bound to layer {extra}, which is not an activation layer"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let mut per_layer = Map::new();
        for (l, v) in self.per_layer() {
            per_layer.insert(l.to_string(), Value::from(v));
        }
        let mut doc = Map::new();
        doc.insert("kind".into(), Value::from(self.kind.as_str()));
        doc.insert("k".into(), Value::from(self.k));
        doc.insert("per_layer".into(), Value::Object(per_layer));
        let last = self.last_layer();
        doc.insert(
            "last_layer".into(),
            Value::from(last.map(|(_, v)| v.to_vec()).unwrap_or_default()),
        );
        if let Some((l, _)) = last {
            doc.insert("last_layer_index".into(), Value::from(l));
        }
        let mut hidden = Map::new();
        for (l, t) in self.iter() {
            if let Threshold::Neuron(v) = t {
                if Some(l) != last.map(|(i, _)| i) {
                    hidden.insert(l.to_string(), Value::from(v.clone()));
                }
            }
        }
        if !hidden.is_empty() {
            doc.insert("neuron_layers".into(), Value::Object(hidden));
        }
        Value::Object(doc)
    }

    pub fn from_json(doc: &Value) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("threshold document: {m}"));
        let kind: ActivationKind = match doc.get("kind") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => ActivationKind::Hyrelu,
        };
        let k = doc
            .get("k")
            .and_then(Value::as_f64)
            .ok_or_else(|| bad("missing numeric `k`"))?;
        let mut set = ThresholdSet::new(kind, k);
        let parse_index = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| bad(&format!("bad layer key `{s}`")))
        };
        let floats = |v: &Value| -> Result<Vec<f64>> {
            v.as_array()
                .ok_or_else(|| bad("expected an array"))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| bad("non-numeric threshold")))
                .collect()
        };
        if let Some(map) = doc.get("per_layer") {
            for (key, v) in map
                .as_object()
                .ok_or_else(|| bad("`per_layer` must be an object"))?
            {
                let v = v.as_f64().ok_or_else(|| bad("non-numeric threshold"))?;
                set.bind(parse_index(key)?, Threshold::Layer(v));
            }
        }
        if let Some(map) = doc.get("neuron_layers") {
            for (key, v) in map
                .as_object()
                .ok_or_else(|| bad("`neuron_layers` must be an object"))?
            {
                set.bind(parse_index(key)?, Threshold::Neuron(floats(v)?));
            }
        }
        let last = floats(doc.get("last_layer").unwrap_or(&Value::Array(Vec::new())))?;
        if !last.is_empty() {
            let idx = doc
                .get("last_layer_index")
                .and_then(Value::as_u64)
                .ok_or_else(|| bad("`last_layer` given without `last_layer_index`"))?;
            set.bind(idx as usize, Threshold::Neuron(last));
        }
        Ok(set)
    }
}

/// Applies an activation slot to a batched tensor. `None` means plain ReLU.
pub fn activation_forward(policy: Option<(&ThresholdSet, &Threshold)>, input: &Tensor) -> Tensor {
    let mut out = input.clone();
    let per_sample = input.sample_len().max(1);
    match policy {
        None => out.data_mut().iter_mut().for_each(|v| *v = relu(*v)),
        Some((set, thr)) => {
            let smooth = set.kind.is_smooth();
            for row in out.data_mut().chunks_mut(per_sample) {
                for (j, v) in row.iter_mut().enumerate() {
                    let lambda = thr.at(j);
                    *v = match set.kind {
                        ActivationKind::Relu => relu(*v),
                        _ if smooth => clip_smooth(*v, lambda, set.k),
                        _ => clip_hard(*v, lambda),
                    };
                }
            }
        }
    }
    out
}

/// Backward pass of an activation slot: `(dL/dinput, dL/dthreshold)`.
/// The threshold gradient has one entry per stored value of the binding
/// and is only computed when `threshold_grad` is set.
pub fn activation_backward(
    policy: Option<(&ThresholdSet, &Threshold)>,
    input: &Tensor,
    grad_out: &Tensor,
    threshold_grad: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "activation backward: input {:?} vs grad {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let per_sample = input.sample_len().max(1);
    let mut grad_in = Tensor::zeros(input.shape().to_vec());
    let Some((set, thr)) = policy else {
        for ((g, &x), &go) in grad_in
            .data_mut()
            .iter_mut()
            .zip(input.data())
            .zip(grad_out.data())
        {
            *g = if x > 0.0 { go } else { 0.0 };
        }
        return Ok((grad_in, None));
    };
    let mut glambda = threshold_grad.then(|| vec![0.0; thr.len()]);
    let neuronwise = matches!(thr, Threshold::Neuron(_));
    let gi = grad_in.data_mut();
    for (s, (xrow, grow)) in input
        .data()
        .chunks(per_sample)
        .zip(grad_out.data().chunks(per_sample))
        .enumerate()
    {
        let base = s * per_sample;
        for j in 0..per_sample {
            let (x, go) = (xrow[j], grow[j]);
            let lambda = thr.at(j);
            let (dx, dl) = match set.kind {
                ActivationKind::Relu => (if x > 0.0 { 1.0 } else { 0.0 }, 0.0),
                k if k.is_smooth() => clip_smooth_grad(x, lambda, set.k),
                _ => (
                    if (0.0..=lambda).contains(&x) {
                        1.0
                    } else {
                        0.0
                    },
                    0.0,
                ),
            };
            gi[base + j] = dx * go;
            if let Some(gl) = glambda.as_mut() {
                gl[if neuronwise { j } else { 0 }] += dl * go;
            }
        }
    }
    Ok((grad_in, glambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_examples() {
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(0.0), 0.0);
        assert_eq!(relu(7.5), 7.5);
    }

    #[test]
    fn clipped_relu_examples() {
        assert_eq!(clipped_relu(1.5, 2.0).unwrap(), 1.5);
        assert_eq!(clipped_relu(3.0, 2.0).unwrap(), 0.0);
        assert_eq!(clipped_relu(-1.0, 2.0).unwrap(), 0.0);
        assert_eq!(clipped_relu(2.0, 2.0).unwrap(), 2.0);
        assert!(matches!(
            clipped_relu(1.0, 0.0),
            Err(Error::InvalidThreshold(_))
        ));
        assert!(matches!(
            clipped_relu(1.0, -2.0),
            Err(Error::InvalidThreshold(_))
        ));
    }

    #[test]
    fn hyrelu_examples() {
        assert_eq!(hyrelu(2.0, 2.0, 10.0).unwrap(), 1.0);
        assert_eq!(hyrelu(0.0, 2.0, 10.0).unwrap(), 0.0);
        assert_eq!(hyrelu(0.0, 0.3, 1e4).unwrap(), 0.0);
        // 4 * sigmoid(-20), closed form
        let expected = 4.0 / (1.0 + 20f64.exp());
        let got = hyrelu(4.0, 2.0, 10.0).unwrap();
        assert!((got - expected).abs() < 1e-22);
        assert!((got - 8.2446e-9).abs() < 1e-12);
    }

    #[test]
    fn hyrelu_rejects_bad_parameters() {
        assert!(hyrelu(1.0, 0.0, 10.0).is_err());
        assert!(hyrelu(1.0, 1.0, 0.0).is_err());
        assert!(hyrelu(1.0, 1.0, -3.0).is_err());
        assert!(hyrelu_grad(1.0, -1.0, 10.0).is_err());
    }

    #[test]
    fn hyrelu_grad_examples() {
        let (_, dl) = hyrelu_grad(2.0, 2.0, 10.0).unwrap();
        assert_eq!(dl, 5.0);
        assert_eq!(hyrelu_grad(0.0, 2.0, 10.0).unwrap(), (0.0, 0.0));
        assert_eq!(hyrelu_grad(-1.0, 2.0, 10.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn hard_clip_limit() {
        let lambda = 2.0;
        for i in 0..2000 {
            let x = -10.0 + 20.0 * i as f64 / 1999.0;
            if (x - lambda).abs() < 0.05 {
                continue;
            }
            let gap = (hyrelu(x, lambda, 1e4).unwrap() - clipped_relu(x, lambda).unwrap()).abs();
            assert!(gap <= 1e-3, "x={x} gap={gap}");
        }
    }

    #[test]
    fn large_inputs_are_attenuated() {
        let (lambda, k) = (1.5, 10.0);
        for x in [lambda + 10.0 / k, 10.0, 1e3, 3.2e4] {
            let y = hyrelu(x, lambda, k).unwrap();
            assert!(y <= x * sigmoid(-10.0), "x={x}");
            assert!(y < 4.6e-5 * x);
        }
    }

    #[test]
    fn threshold_json_schema() {
        let set = ThresholdSet::new(ActivationKind::Hyrelu, 10.0)
            .with(1, Threshold::Layer(3.0))
            .with(4, Threshold::Layer(2.5))
            .with(7, Threshold::Neuron(vec![1.0, 0.5]));
        let doc = set.to_json();
        assert_eq!(doc["k"], 10.0);
        assert_eq!(doc["per_layer"]["1"], 3.0);
        assert_eq!(doc["per_layer"]["4"], 2.5);
        assert_eq!(doc["last_layer"], serde_json::json!([1.0, 0.5]));
        assert_eq!(doc["last_layer_index"], 7);
        assert!(doc.get("neuron_layers").is_none());
        assert_eq!(ThresholdSet::from_json(&doc).unwrap(), set);

        let nw = ThresholdSet::new(ActivationKind::FitactNeuronwise, 10.0)
            .with(1, Threshold::Neuron(vec![1.0, 2.0, 3.0]))
            .with(3, Threshold::Neuron(vec![0.25]));
        assert!(nw.has_neuronwise_hidden());
        assert!(!set.has_neuronwise_hidden());
        assert_eq!(ThresholdSet::from_json(&nw.to_json()).unwrap(), nw);
    }

    #[test]
    fn validate_checks_granularity_and_sign() {
        let slots = [(1, 4), (3, 2)];
        let ok = ThresholdSet::new(ActivationKind::Hyrelu, 10.0)
            .with(1, Threshold::Layer(1.0))
            .with(3, Threshold::Neuron(vec![1.0, 2.0]));
        ok.validate(&slots).unwrap();

        let short = ok.clone().with(3, Threshold::Neuron(vec![1.0]));
        assert!(short.validate(&slots).is_err());
        let negative = ok.clone().with(1, Threshold::Layer(-1.0));
        assert!(matches!(
            negative.validate(&slots),
            Err(Error::InvalidThreshold(_))
        ));
        let missing =
            ThresholdSet::new(ActivationKind::Hyrelu, 10.0).with(1, Threshold::Layer(1.0));
        assert!(matches!(
            missing.validate(&slots),
            Err(Error::MissingThresholds(_))
        ));
        let stray = ok.clone().with(2, Threshold::Layer(1.0));
        assert!(stray.validate(&slots).is_err());
    }

    #[test]
    fn canonical_value_order() {
        let mut set = ThresholdSet::new(ActivationKind::Hyrelu, 10.0)
            .with(5, Threshold::Neuron(vec![3.0, 4.0]))
            .with(2, Threshold::Layer(1.0));
        assert_eq!(set.values(), vec![1.0, 3.0, 4.0]);
        set.set_values(&[9.0, 8.0, 7.0]).unwrap();
        assert_eq!(set.get(2), Some(&Threshold::Layer(9.0)));
        assert_eq!(set.get(5), Some(&Threshold::Neuron(vec![8.0, 7.0])));
        assert!(set.set_values(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn json_text_round_trip_is_exact(
            layer in 1e-6f64..1e3,
            neurons in proptest::collection::vec(1e-6f64..1e3, 1..20),
        ) {
            let set = ThresholdSet::new(ActivationKind::Hyrelu, 10.0)
                .with(1, Threshold::Layer(layer))
                .with(3, Threshold::Neuron(neurons));
            let text = serde_json::to_string(&set.to_json()).unwrap();
            let back = ThresholdSet::from_json(&serde_json::from_str(&text).unwrap()).unwrap();
            prop_assert_eq!(back, set);
        }

        #[test]
        fn grad_matches_central_differences(
            x in -5.0f64..8.0,
            lambda in 0.1f64..6.0,
            k in 0.5f64..20.0,
        ) {
            let h = 1e-6;
            // stay away from the kink at x = 0
            prop_assume!(x.abs() > 1e-3);
            let (dx, dl) = hyrelu_grad(x, lambda, k).unwrap();
            let fx = (hyrelu(x + h, lambda, k).unwrap() - hyrelu(x - h, lambda, k).unwrap()) / (2.0 * h);
            let fl = (hyrelu(x, lambda + h, k).unwrap() - hyrelu(x, lambda - h, k).unwrap()) / (2.0 * h);
            prop_assert!((dx - fx).abs() <= 1e-6 * dx.abs().max(1.0), "dx {} vs {}", dx, fx);
            prop_assert!((dl - fl).abs() <= 1e-6 * dl.abs().max(1.0), "dl {} vs {}", dl, fl);
        }

        #[test]
        fn non_decreasing_in_threshold(
            x in 0.01f64..10.0,
            a in 0.01f64..10.0,
            b in 0.01f64..10.0,
            k in 0.5f64..50.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(hyrelu(x, lo, k).unwrap() <= hyrelu(x, hi, k).unwrap());
        }
    }
}
