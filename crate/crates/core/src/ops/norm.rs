use super::conv::ConvParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inference-mode batch normalization statistics for `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    /// `gamma = 1, beta = 0, mean = 0, var = 1`.
    pub fn identity(channels: usize, eps: f32) -> Self {
        BatchNormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape(format!(
                "batch-norm vectors differ in length: gamma {}, beta {}, mean {}, var {}",
                c,
                self.beta.len(),
                self.running_mean.len(),
                self.running_var.len()
            )));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "batch-norm eps must be >= 0, got {}",
                self.eps
            )));
        }
        if let Some(v) = self.running_var.iter().find(|&&v| !(v >= 0.0) || v + self.eps <= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "batch-norm running_var must be >= 0 with var + eps > 0, found {v}"
            )));
        }
        Ok(())
    }

    /// Per-channel `gamma / sqrt(var + eps)`, in f64.
    fn scales(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.running_var)
            .map(|(&g, &v)| g as f64 / (v as f64 + self.eps as f64).sqrt())
            .collect()
    }
}

/// `y = gamma·(x − mean)/sqrt(var + eps) + beta` per channel.
pub fn batchnorm_infer(input: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    p.validate()?;
    let (_, c, h, w) = input.dims4()?;
    if c != p.channels() {
        return Err(Error::shape(format!(
            "batch-norm has {} channels, input is {:?}",
            p.channels(),
            input.shape()
        )));
    }
    let scales = p.scales();
    let mut out = input.clone();
    for (i, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let ch = i % c;
        let (mean, scale, beta) = (p.running_mean[ch], scales[ch] as f32, p.beta[ch]);
        for v in plane {
            *v = (*v - mean) * scale + beta;
        }
    }
    Ok(out)
}

/// Folds an inference batch-norm into the preceding convolution:
/// `w' = w·s`, `b' = (b − mean)·s + beta` with `s = gamma/sqrt(var + eps)`.
/// The input layer is left untouched.
pub fn fold_batchnorm(conv: &ConvParams, bn: &BatchNormParams) -> Result<ConvParams> {
    conv.validate()?;
    bn.validate()?;
    if bn.channels() != conv.out_channels {
        return Err(Error::shape(format!(
            "cannot fold a {}-channel batch-norm into a conv with {} output channels",
            bn.channels(),
            conv.out_channels
        )));
    }
    let scales = bn.scales();
    let per_out = conv.weights.len() / conv.out_channels;
    let mut weights = conv.weights.clone();
    for (filter, &s) in weights.data_mut().chunks_exact_mut(per_out).zip(&scales) {
        for w in filter {
            *w = (*w as f64 * s) as f32;
        }
    }
    let bias = (0..conv.out_channels)
        .map(|o| {
            let b = conv.bias.as_ref().map_or(0.0, |b| b[o] as f64);
            ((b - bn.running_mean[o] as f64) * scales[o] + bn.beta[o] as f64) as f32
        })
        .collect();
    ConvParams::new(
        conv.in_channels,
        conv.out_channels,
        conv.geometry,
        conv.groups,
        weights,
        Some(bias),
    )
}
