use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// Batched tensors carry the sample count in the leading axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading-axis extent.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per sample along the leading axis.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the given samples of a batched tensor, in order.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Contiguous sample range `[start, end)`.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let n = self.sample_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Concatenates batched tensors with equal per-sample shape.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::len).sum());
        let mut batch = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::Shape(format!(
                    "concat of {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(Tensor { shape, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Temperature softmax over the last axis, `exp(z_i/T) / sum_j exp(z_j/T)`.
pub fn softmax_temperature(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidValue(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let classes = *logits.shape().last().unwrap_or(&0);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(classes.max(1)) {
        softmax_row(row, temperature);
    }
    Ok(out)
}

/// In-place stable softmax of one row at temperature `t`.
pub(crate) fn softmax_row(row: &mut [f64], t: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / t).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Stable `log softmax` of one row at temperature `t`, written into `out`.
pub(crate) fn log_softmax_row(row: &[f64], t: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| ((v - max) / t).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max) / t - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temperature(&Tensor::from_vec(vec![0.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);

        let p = softmax_temperature(&Tensor::from_vec(vec![2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);

        let p = softmax_temperature(&Tensor::from_vec(vec![5.0, 1.0]), 1e6).unwrap();
        assert!((p.data()[0] - 0.5).abs() < 1e-5);
        assert!((p.data()[1] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let z = Tensor::from_vec(vec![1.0, 2.0]);
        assert!(softmax_temperature(&z, 0.0).is_err());
        assert!(softmax_temperature(&z, -1.0).is_err());
        assert!(softmax_temperature(&z, f64::NAN).is_err());
    }

    #[test]
    fn softmax_is_row_wise() {
        let z = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1e3, 0.0]).unwrap();
        let p = softmax_temperature(&z, 1.0).unwrap();
        assert_eq!(&p.data()[..2], &[0.5, 0.5]);
        assert!((p.data()[2] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_ignores_shift(
            z in proptest::collection::vec(-50.0f64..50.0, 1..12),
            t in 0.2f64..20.0,
            c in -100.0f64..100.0,
        ) {
            let p = softmax_temperature(&Tensor::from_vec(z.clone()), t).unwrap();
            let s: f64 = p.data().iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.data().iter().all(|&v| v > 0.0 && v <= 1.0));
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let q = softmax_temperature(&Tensor::from_vec(shifted), t).unwrap();
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
