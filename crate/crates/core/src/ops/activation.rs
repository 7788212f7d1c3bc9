use crate::error::{Error, Result};
use crate::tensor::{sgemm, Bias, Tensor};

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub(crate) fn relu_in_place(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Elementwise sum (residual join).
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| x + y)
}

/// `N×F · F×K + bias → N×K`.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let (n, f) = input.dims2()?;
    let (f2, k) = weights.dims2()?;
    if f != f2 || bias.len() != k {
        return Err(Error::shape(format!(
            "fully-connected mismatch: input {:?}, weights {:?}, bias length {}",
            input.shape(),
            weights.shape(),
            bias.len()
        )));
    }
    let mut out = vec![0.0; n * k];
    sgemm(n, k, f, input.data(), weights.data(), &mut out, Bias::Col(bias));
    Tensor::new([n, k], out)
}

/// Max-subtracted softmax. Results are floored at the smallest normal `f32`
/// so every class keeps a strictly positive probability.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if logits.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument(format!("softmax input contains NaN: {logits:?}")));
    }
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps
        .iter()
        .map(|&e| ((e / total) as f32).max(f32::MIN_POSITIVE))
        .collect())
}

/// Row-wise softmax over an `N×K` tensor.
pub fn softmax_rows(input: &Tensor) -> Result<Tensor> {
    let (n, k) = input.dims2()?;
    let mut data = Vec::with_capacity(n * k);
    for row in input.data().chunks_exact(k) {
        data.extend(softmax(row)?);
    }
    Tensor::new([n, k], data)
}
