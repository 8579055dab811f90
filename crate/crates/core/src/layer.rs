//! Layer kinds with batched forward and reverse-mode backward passes.
//!
//! Shapes passed to [`LayerSpec::output_shape`] are per-sample; tensors
//! handed to `forward`/`backward` carry the batch in their leading axis.
//! Convolutions are cross-correlations (no kernel flip).

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    /// Non-linearity slot. Plain ReLU here; clipping policies are bound
    /// by the network at evaluation time.
    Activation,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Activation => "activation",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// `[weight, bias]` shapes, empty for parameter-free layers.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(Error::Shape(format!(
                        "dense expects [{inputs}], got {input:?}"
                    )));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let (c, h, w) = chw(input, "conv2d")?;
                if c != in_channels {
                    return Err(Error::Shape(format!(
                        "conv2d expects {in_channels} channels, got {c}"
                    )));
                }
                let (oh, ow) = window_out(h, w, kernel, stride, padding)?;
                Ok(vec![out_channels, oh, ow])
            }
            LayerSpec::MaxPool2d { kernel, stride } | LayerSpec::AvgPool2d { kernel, stride } => {
                let (c, h, w) = chw(input, self.kind_name())?;
                let (oh, ow) = window_out(h, w, kernel, stride, 0)?;
                Ok(vec![c, oh, ow])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Activation => Ok(input.to_vec()),
        }
    }

    pub fn to_json(&self) -> Value {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                json!({"kind": "dense", "inputs": inputs, "outputs": outputs})
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => json!({
                "kind": "conv2d",
                "in_channels": in_channels,
                "out_channels": out_channels,
                "kernel": kernel,
                "stride": stride,
                "padding": padding,
            }),
            LayerSpec::MaxPool2d { kernel, stride } => {
                json!({"kind": "maxpool2d", "kernel": kernel, "stride": stride})
            }
            LayerSpec::AvgPool2d { kernel, stride } => {
                json!({"kind": "avgpool2d", "kernel": kernel, "stride": stride})
            }
            LayerSpec::Flatten => json!({"kind": "flatten"}),
            LayerSpec::Activation => json!({"kind": "activation"}),
        }
    }

    pub fn from_json(v: &Value) -> Result<Self> {
        let kind = v
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Format("layer entry without `kind`".into()))?;
        let field = |name: &str| -> Result<usize> {
            v.get(name)
                .and_then(Value::as_u64)
                .map(|x| x as usize)
                .filter(|&x| x > 0 || name == "padding")
                .ok_or_else(|| Error::Format(format!("{kind} layer: bad or missing `{name}`")))
        };
        Ok(match kind {
            "dense" => LayerSpec::Dense {
                inputs: field("inputs")?,
                outputs: field("outputs")?,
            },
            "conv2d" => LayerSpec::Conv2d {
                in_channels: field("in_channels")?,
                out_channels: field("out_channels")?,
                kernel: field("kernel")?,
                stride: field("stride")?,
                padding: field("padding")?,
            },
            "maxpool2d" => LayerSpec::MaxPool2d {
                kernel: field("kernel")?,
                stride: field("stride")?,
            },
            "avgpool2d" => LayerSpec::AvgPool2d {
                kernel: field("kernel")?,
                stride: field("stride")?,
            },
            "flatten" => LayerSpec::Flatten,
            "activation" => LayerSpec::Activation,
            other => return Err(Error::UnsupportedLayer(other.to_string())),
        })
    }

    fn check_params(&self, params: &[Tensor]) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len()
            || shapes
                .iter()
                .zip(params)
                .any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::Shape(format!(
                "{} expects params {shapes:?}, got {:?}",
                self.kind_name(),
                params
                    .iter()
                    .map(|p| p.shape().to_vec())
                    .collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    fn batched_output_shape(&self, input: &Tensor) -> Result<Vec<usize>> {
        if input.shape().len() < 2 {
            return Err(Error::Shape(format!(
                "{} needs a batched input, got {:?}",
                self.kind_name(),
                input.shape()
            )));
        }
        let mut out = vec![input.batch()];
        out.extend(self.output_shape(&input.shape()[1..])?);
        Ok(out)
    }

    pub fn forward(&self, params: &[Tensor], input: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        let out_shape = self.batched_output_shape(input)?;
        let n = input.batch();
        let mut out = Tensor::zeros(out_shape.clone());
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let (w, b) = (params[0].data(), params[1].data());
                let y = out.data_mut();
                for row in y.chunks_mut(outputs) {
                    row.copy_from_slice(b);
                }
                // Y (n x out) += X (n x in) * W^T
                gemm(
                    n,
                    inputs,
                    outputs,
                    input.data(),
                    (inputs, 1),
                    w,
                    (1, inputs),
                    y,
                    1.0,
                );
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let geo = ConvGeometry::new(input.shape(), &out_shape, kernel, stride, padding);
                let (w, b) = (params[0].data(), params[1].data());
                let ckk = in_channels * kernel * kernel;
                let ohw = geo.oh * geo.ow;
                let mut cols = vec![0.0; ckk * ohw];
                let in_len = input.sample_len();
                let out_len = out_channels * ohw;
                for s in 0..n {
                    geo.im2col(&input.data()[s * in_len..(s + 1) * in_len], &mut cols);
                    let y = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
                    for (oc, row) in y.chunks_mut(ohw).enumerate() {
                        row.fill(b[oc]);
                    }
                    gemm(out_channels, ckk, ohw, w, (ckk, 1), &cols, (ohw, 1), y, 1.0);
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let geo = ConvGeometry::new(input.shape(), &out_shape, kernel, stride, 0);
                geo.pool_forward(input.data(), out.data_mut(), true);
            }
            LayerSpec::AvgPool2d { kernel, stride } => {
                let geo = ConvGeometry::new(input.shape(), &out_shape, kernel, stride, 0);
                geo.pool_forward(input.data(), out.data_mut(), false);
            }
            LayerSpec::Flatten => {
                out.data_mut().copy_from_slice(input.data());
            }
            LayerSpec::Activation => {
                for (o, &x) in out.data_mut().iter_mut().zip(input.data()) {
                    *o = x.max(0.0);
                }
            }
        }
        Ok(out)
    }

    /// Returns `(dL/dinput, dL/dparams)`; parameter gradients are skipped
    /// (empty) when `param_grads` is false.
    pub fn backward(
        &self,
        params: &[Tensor],
        input: &Tensor,
        grad_out: &Tensor,
        param_grads: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_params(params)?;
        let out_shape = self.batched_output_shape(input)?;
        if grad_out.shape() != out_shape.as_slice() {
            return Err(Error::Shape(format!(
                "{} backward: grad_out {:?} vs output {:?}",
                self.kind_name(),
                grad_out.shape(),
                out_shape
            )));
        }
        let n = input.batch();
        let mut grad_in = Tensor::zeros(input.shape().to_vec());
        let mut grads = Vec::new();
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                let w = params[0].data();
                let gy = grad_out.data();
                // dX (n x in) = dY (n x out) * W (out x in)
                gemm(
                    n,
                    outputs,
                    inputs,
                    gy,
                    (outputs, 1),
                    w,
                    (inputs, 1),
                    grad_in.data_mut(),
                    0.0,
                );
                if param_grads {
                    let mut gw = Tensor::zeros(vec![outputs, inputs]);
                    // dW (out x in) = dY^T (out x n) * X (n x in)
                    gemm(
                        outputs,
                        n,
                        inputs,
                        gy,
                        (1, outputs),
                        input.data(),
                        (inputs, 1),
                        gw.data_mut(),
                        0.0,
                    );
                    let mut gb = Tensor::zeros(vec![outputs]);
                    for row in gy.chunks(outputs) {
                        for (g, v) in gb.data_mut().iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                    grads = vec![gw, gb];
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let geo = ConvGeometry::new(input.shape(), &out_shape, kernel, stride, padding);
                let w = params[0].data();
                let ckk = in_channels * kernel * kernel;
                let ohw = geo.oh * geo.ow;
                let in_len = input.sample_len();
                let out_len = out_channels * ohw;
                let mut cols = vec![0.0; ckk * ohw];
                let mut gcols = vec![0.0; ckk * ohw];
                let mut gw = Tensor::zeros(vec![out_channels, in_channels, kernel, kernel]);
                let mut gb = Tensor::zeros(vec![out_channels]);
                for s in 0..n {
                    let gy = &grad_out.data()[s * out_len..(s + 1) * out_len];
                    // dcols (ckk x ohw) = W^T (ckk x oc) * dY (oc x ohw)
                    gemm(
                        ckk,
                        out_channels,
                        ohw,
                        w,
                        (1, ckk),
                        gy,
                        (ohw, 1),
                        &mut gcols,
                        0.0,
                    );
                    geo.col2im(
                        &gcols,
                        &mut grad_in.data_mut()[s * in_len..(s + 1) * in_len],
                    );
                    if param_grads {
                        geo.im2col(&input.data()[s * in_len..(s + 1) * in_len], &mut cols);
                        // dW (oc x ckk) += dY (oc x ohw) * cols^T (ohw x ckk)
                        gemm(
                            out_channels,
                            ohw,
                            ckk,
                            gy,
                            (ohw, 1),
                            &cols,
                            (1, ohw),
                            gw.data_mut(),
                            1.0,
                        );
                        for (g, row) in gb.data_mut().iter_mut().zip(gy.chunks(ohw)) {
                            *g += row.iter().sum::<f64>();
                        }
                    }
                }
                if param_grads {
                    grads = vec![gw, gb];
                }
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let geo = ConvGeometry::new(input.shape(), &out_shape, kernel, stride, 0);
                geo.pool_backward(input.data(), grad_out.data(), grad_in.data_mut(), true);
            }
            LayerSpec::AvgPool2d { kernel, stride } => {
                let geo = ConvGeometry::new(input.shape(), &out_shape, kernel, stride, 0);
                geo.pool_backward(input.data(), grad_out.data(), grad_in.data_mut(), false);
            }
            LayerSpec::Flatten => {
                grad_in.data_mut().copy_from_slice(grad_out.data());
            }
            LayerSpec::Activation => {
                for ((g, &x), &go) in grad_in
                    .data_mut()
                    .iter_mut()
                    .zip(input.data())
                    .zip(grad_out.data())
                {
                    *g = if x > 0.0 { go } else { 0.0 };
                }
            }
        }
        Ok((grad_in, grads))
    }
}

/// Forward pass of a single layer; activation slots apply plain ReLU.
pub fn layer_forward(layer: &LayerSpec, params: &[Tensor], input: &Tensor) -> Result<Tensor> {
    layer.forward(params, input)
}

/// Input and parameter gradients of a single layer.
pub fn layer_backward(
    layer: &LayerSpec,
    params: &[Tensor],
    input: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    layer.backward(params, input, grad_out, true)
}

fn chw(input: &[usize], kind: &str) -> Result<(usize, usize, usize)> {
    match *input {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!(
            "{kind} expects [C, H, W], got {input:?}"
        ))),
    }
}

fn window_out(
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Shape("kernel and stride must be positive".into()));
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    if ph < kernel || pw < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {ph}x{pw}"
        )));
    }
    Ok(((ph - kernel) / stride + 1, (pw - kernel) / stride + 1))
}

/// Index bookkeeping for sliding-window layers.
struct ConvGeometry {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(
        in_shape: &[usize],
        out_shape: &[usize],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            batch: in_shape[0],
            channels: in_shape[1],
            h: in_shape[2],
            w: in_shape[3],
            oh: out_shape[2],
            ow: out_shape[3],
            kernel,
            stride,
            padding,
        }
    }

    /// Source coordinate for output position `o` and kernel offset `k`, or
    /// `None` when it falls into the padding.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.padding)?;
        (pos < extent).then_some(pos)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ohw = self.oh * self.ow;
        let kk = self.kernel * self.kernel;
        for c in 0..self.channels {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * kk + ki * self.kernel + kj) * ohw;
                    let dst = &mut cols[row..row + ohw];
                    for oy in 0..self.oh {
                        let sy = self.src(oy, ki, self.h);
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = match (sy, self.src(ox, kj, self.w)) {
                                (Some(y), Some(x_)) => plane[y * self.w + x_],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let ohw = self.oh * self.ow;
        let kk = self.kernel * self.kernel;
        for c in 0..self.channels {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * kk + ki * self.kernel + kj) * ohw;
                    let src = &cols[row..row + ohw];
                    for oy in 0..self.oh {
                        let Some(y) = self.src(oy, ki, self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(x_) = self.src(ox, kj, self.w) {
                                plane[y * self.w + x_] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn pool_forward(&self, x: &[f64], y: &mut [f64], max: bool) {
        let area = (self.kernel * self.kernel) as f64;
        for p in 0..self.batch * self.channels {
            let plane = &x[p * self.h * self.w..(p + 1) * self.h * self.w];
            let out = &mut y[p * self.oh * self.ow..(p + 1) * self.oh * self.ow];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                    for ki in 0..self.kernel {
                        let row = (oy * self.stride + ki) * self.w + ox * self.stride;
                        for &v in &plane[row..row + self.kernel] {
                            if max {
                                if v > acc {
                                    acc = v;
                                }
                            } else {
                                acc += v;
                            }
                        }
                    }
                    out[oy * self.ow + ox] = if max { acc } else { acc / area };
                }
            }
        }
    }

    fn pool_backward(&self, x: &[f64], gy: &[f64], gx: &mut [f64], max: bool) {
        let area = (self.kernel * self.kernel) as f64;
        for p in 0..self.batch * self.channels {
            let plane = &x[p * self.h * self.w..(p + 1) * self.h * self.w];
            let gplane = &mut gx[p * self.h * self.w..(p + 1) * self.h * self.w];
            let g = &gy[p * self.oh * self.ow..(p + 1) * self.oh * self.ow];
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let go = g[oy * self.ow + ox];
                    if max {
                        // first maximum wins, matching the forward scan
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for ki in 0..self.kernel {
                            let row = (oy * self.stride + ki) * self.w + ox * self.stride;
                            for kj in 0..self.kernel {
                                if plane[row + kj] > best {
                                    best = plane[row + kj];
                                    at = row + kj;
                                }
                            }
                        }
                        gplane[at] += go;
                    } else {
                        for ki in 0..self.kernel {
                            let row = (oy * self.stride + ki) * self.w + ox * self.stride;
                            for v in &mut gplane[row..row + self.kernel] {
                                *v += go / area;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `C (m x n, row-major) = A (m x k) * B (k x n) + beta * C`, with arbitrary
/// strides `(row, col)` on A and B.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: extents are checked above against the slice lengths; the
    // output is a dense row-major m x n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity() {
        let layer = LayerSpec::Dense {
            inputs: 2,
            outputs: 2,
        };
        let params = [t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), t(&[2], &[0.0, 0.0])];
        let y = layer.forward(&params, &t(&[1, 2], &[3.0, -2.0])).unwrap();
        assert_eq!(y.data(), &[3.0, -2.0]);

        let (gx, _) = layer
            .backward(
                &params,
                &t(&[1, 2], &[3.0, -2.0]),
                &t(&[1, 2], &[1.0, 1.0]),
                true,
            )
            .unwrap();
        assert_eq!(gx.data(), &[1.0, 1.0]);
    }

    #[test]
    fn conv_one_by_one_scales() {
        let layer = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let params = [t(&[1, 1, 1, 1], &[2.0]), t(&[1], &[0.0])];
        let y = layer
            .forward(&params, &t(&[1, 1, 3, 3], &[1.0; 9]))
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_padding_matches_direct_sum() {
        let layer = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let params = [t(&[1, 1, 3, 3], &[1.0; 9]), t(&[1], &[0.5])];
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let y = layer.forward(&params, &t(&[1, 1, 3, 3], &x)).unwrap();
        // centre sees every pixel, corner (0,0) sees 1+2+4+5
        assert_eq!(y.data()[4], 45.5);
        assert_eq!(y.data()[0], 12.5);
    }

    #[test]
    fn maxpool_picks_max() {
        let layer = LayerSpec::MaxPool2d {
            kernel: 2,
            stride: 2,
        };
        let y = layer
            .forward(&[], &t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn avgpool_gradient_is_uniform() {
        let layer = LayerSpec::AvgPool2d {
            kernel: 2,
            stride: 2,
        };
        let x = t(&[1, 1, 2, 2], &[0.3, -1.0, 7.0, 2.0]);
        let (gx, _) = layer
            .backward(&[], &x, &t(&[1, 1, 1, 1], &[1.0]), true)
            .unwrap();
        assert_eq!(gx.data(), &[0.25; 4]);
    }

    #[test]
    fn shape_errors() {
        let dense = LayerSpec::Dense {
            inputs: 3,
            outputs: 2,
        };
        let params = [Tensor::zeros(vec![2, 3]), Tensor::zeros(vec![2])];
        assert!(matches!(
            dense.forward(&params, &Tensor::zeros(vec![1, 4])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            dense.forward(&params[..1], &Tensor::zeros(vec![1, 3])),
            Err(Error::Shape(_))
        ));
        let y = dense.forward(&params, &Tensor::zeros(vec![1, 3])).unwrap();
        assert!(matches!(
            dense.backward(
                &params,
                &Tensor::zeros(vec![1, 3]),
                &Tensor::zeros(vec![1, 3]),
                true
            ),
            Err(Error::Shape(_))
        ));
        assert_eq!(y.shape(), &[1, 2]);
    }

    #[test]
    fn unknown_kind_is_unsupported() {
        let v = json!({"kind": "gru", "hidden": 8});
        assert!(matches!(LayerSpec::from_json(&v), Err(Error::UnsupportedLayer(k)) if k == "gru"));
    }

    #[test]
    fn json_round_trip() {
        let layers = [
            LayerSpec::Dense {
                inputs: 4,
                outputs: 2,
            },
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::MaxPool2d {
                kernel: 2,
                stride: 2,
            },
            LayerSpec::AvgPool2d {
                kernel: 2,
                stride: 1,
            },
            LayerSpec::Flatten,
            LayerSpec::Activation,
        ];
        for l in layers {
            assert_eq!(LayerSpec::from_json(&l.to_json()).unwrap(), l);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let layer = LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let params: Vec<Tensor> = layer
            .param_shapes()
            .into_iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let x = Tensor::new(
            vec![2, 2, 7, 7],
            (0..196).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let a = layer.forward(&params, &x).unwrap();
        let b = layer.forward(&params, &x).unwrap();
        assert_eq!(a, b);
    }
}
