//! Transfer learning with a frozen backbone: features come from the model's
//! global-average-pool tap and only the final fully-connected layer is
//! trained, by minibatch SGD with momentum on softmax cross-entropy.
//!
//! All head arithmetic runs in `f64`; the head is narrowed to `f32` only
//! when it is attached to a model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetItem, DatasetStore};
use crate::error::{Error, Result};
use crate::graph::{default_labels, Model, Weights};
use crate::imaging::{augment, to_input_tensor, AugmentationPolicy, ImageRGB8};
use crate::tensor::Tensor;

/// Classifier head: `weights` is `K×F` row-major, `bias` has length `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub num_classes: usize,
    pub feature_width: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadWeights {
    pub fn zeros(num_classes: usize, feature_width: usize) -> Self {
        HeadWeights {
            num_classes,
            feature_width,
            weights: vec![0.0; num_classes * feature_width],
            bias: vec![0.0; num_classes],
        }
    }

    /// Reads the classifier currently held by `model`.
    pub fn from_model(model: &Model) -> Result<Self> {
        let (w, b) = model.classifier()?;
        let (f, k) = w.dims2()?;
        let t = w.transpose2()?;
        Ok(HeadWeights {
            num_classes: k,
            feature_width: f,
            weights: t.data().iter().map(|&v| v as f64).collect(),
            bias: b.iter().map(|&v| v as f64).collect(),
        })
    }

    fn check(&self) -> Result<()> {
        if self.weights.len() != self.num_classes * self.feature_width
            || self.bias.len() != self.num_classes
        {
            return Err(Error::shape(format!(
                "head buffers do not match {}x{}",
                self.num_classes, self.feature_width
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("head weights must be finite".into()));
        }
        Ok(())
    }

    /// `W·x + b` for one feature row.
    pub fn logits(&self, features: &[f32]) -> Vec<f64> {
        let f = self.feature_width;
        (0..self.num_classes)
            .map(|k| {
                let row = &self.weights[k * f..(k + 1) * f];
                self.bias[k]
                    + row
                        .iter()
                        .zip(features)
                        .map(|(&w, &x)| w * x as f64)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn squared_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }

    /// Classifier tensors as stored in a model file (`F×K` weight).
    pub fn to_tensors(&self) -> Result<(Tensor, Tensor)> {
        self.check()?;
        let (k, f) = (self.num_classes, self.feature_width);
        let mut w = vec![0.0f32; f * k];
        for c in 0..k {
            for j in 0..f {
                w[j * k + c] = self.weights[c * f + j] as f32;
            }
        }
        Ok((
            Tensor::new([f, k], w)?,
            Tensor::new([k], self.bias.iter().map(|&b| b as f32).collect())?,
        ))
    }

    /// Writes the head into `fc.weight` / `fc.bias` of a weight set.
    pub fn store_into(&self, weights: &mut Weights, fc_name: &str) -> Result<()> {
        let (w, b) = self.to_tensors()?;
        weights.insert(format!("{fc_name}.weight"), w);
        weights.insert(format!("{fc_name}.bias"), b);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 100,
            batch_size: 32,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.epochs >= 1
            && self.batch_size >= 1
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training config {self:?}")))
        }
    }
}

/// Mean loss and its gradient with respect to the head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub loss: f64,
}

/// `−log softmax(logits)[label]`, via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Analytic gradient of `mean CE + (λ/2)·‖W‖²`:
/// `dW = mean((softmax(z) − onehot) ⊗ x) + λW`, `db = mean(softmax(z) − onehot)`.
pub fn head_gradient(
    head: &HeadWeights,
    features: &Tensor,
    labels: &[usize],
    weight_decay: f64,
) -> Result<HeadGradient> {
    head.check()?;
    let (n, f) = features.dims2()?;
    if f != head.feature_width || labels.len() != n {
        return Err(Error::shape(format!(
            "features {:?} / {} labels do not fit a {}x{} head",
            features.shape(),
            labels.len(),
            head.num_classes,
            head.feature_width
        )));
    }
    let rows: Vec<usize> = (0..n).collect();
    gradient_over(head, features.data(), labels, &rows, weight_decay)
}

fn gradient_over(
    head: &HeadWeights,
    features: &[f32],
    labels: &[usize],
    rows: &[usize],
    weight_decay: f64,
) -> Result<HeadGradient> {
    let (k, f) = (head.num_classes, head.feature_width);
    let mut dw = vec![0.0f64; k * f];
    let mut db = vec![0.0f64; k];
    let mut loss = 0.0;
    for &r in rows {
        let label = labels[r];
        let x = &features[r * f..(r + 1) * f];
        let z = head.logits(x);
        loss += cross_entropy(&z, label)?;
        let lse = log_sum_exp(&z);
        for c in 0..k {
            let delta = (z[c] - lse).exp() - if c == label { 1.0 } else { 0.0 };
            db[c] += delta;
            for (g, &xv) in dw[c * f..(c + 1) * f].iter_mut().zip(x) {
                *g += delta * xv as f64;
            }
        }
    }
    let inv = 1.0 / rows.len() as f64;
    for (g, &w) in dw.iter_mut().zip(&head.weights) {
        *g = *g * inv + weight_decay * w;
    }
    db.iter_mut().for_each(|g| *g *= inv);
    loss = loss * inv + 0.5 * weight_decay * head.squared_norm();
    Ok(HeadGradient {
        weights: dw,
        bias: db,
        loss,
    })
}

/// Trains a zero-initialized head. Returns the head and the mean minibatch
/// loss of every epoch. Shuffling is seeded, so runs are bit-reproducible.
pub fn train_head(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    cfg: &TrainConfig,
) -> Result<(HeadWeights, Vec<f64>)> {
    cfg.validate()?;
    let (n, f) = features.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{n} feature rows but {} labels", labels.len())));
    }
    if num_classes < 2 || n < num_classes {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes and one sample per class, got {n} samples for {num_classes} classes"
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let names = default_labels(num_classes);
    let missing: Vec<&str> = (0..num_classes)
        .filter(|c| !labels.contains(c))
        .map(|c| names[c].as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing.join(", ")));
    }

    let mut head = HeadWeights::zeros(num_classes, f);
    let mut vel_w = vec![0.0f64; head.weights.len()];
    let mut vel_b = vec![0.0f64; num_classes];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let g = gradient_over(&head, features.data(), labels, batch, cfg.weight_decay)?;
            epoch_loss += g.loss * batch.len() as f64;
            for ((w, v), d) in head.weights.iter_mut().zip(&mut vel_w).zip(&g.weights) {
                *v = cfg.momentum * *v + d;
                *w -= cfg.learning_rate * *v;
            }
            for ((b, v), d) in head.bias.iter_mut().zip(&mut vel_b).zip(&g.bias) {
                *v = cfg.momentum * *v + d;
                *b -= cfg.learning_rate * *v;
            }
        }
        history.push(epoch_loss / n as f64);
    }
    Ok((head, history))
}

/// Fraction of rows whose argmax logit matches the label.
pub fn head_accuracy(head: &HeadWeights, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, f) = features.dims2()?;
    if f != head.feature_width || labels.len() != n {
        return Err(Error::shape("features do not fit the head"));
    }
    let correct = features
        .data()
        .chunks_exact(f)
        .zip(labels)
        .filter(|(x, &l)| {
            let z = head.logits(x);
            let best = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
            best == l
        })
        .count();
    Ok(correct as f64 / n as f64)
}

/// Copy of `model` whose classifier is `head`; `model` is not modified.
pub fn attach_head(model: &Model, head: &HeadWeights) -> Result<Model> {
    head.check()?;
    let width = model.feature_width();
    if head.feature_width != width {
        return Err(Error::shape(format!(
            "head expects {} features but the backbone produces {width}",
            head.feature_width
        )));
    }
    if head.num_classes != model.labels().len() {
        return Err(Error::shape(format!(
            "head has {} classes but the model has {} labels",
            head.num_classes,
            model.labels().len()
        )));
    }
    let (w, b) = head.to_tensors()?;
    model.with_classifier(w, b.into_data())
}

/// Backbone features for a list of images, `N×F`. Images are processed in
/// parallel; row order follows the input.
pub fn extract_image_features(model: &Model, images: &[ImageRGB8]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to extract features from".into()));
    }
    let spec = model.graph().input_spec();
    let rows: Vec<Tensor> = images
        .par_iter()
        .map(|img| model.features_batch(&to_input_tensor(img, spec)?))
        .collect::<Result<_>>()?;
    Tensor::stack_batch(&rows)
}

/// Features and class indices for dataset items, in item order.
pub fn extract_dataset_features(
    model: &Model,
    store: &DatasetStore,
    items: &[DatasetItem],
) -> Result<(Tensor, Vec<usize>)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no dataset items to extract features from".into()));
    }
    let spec = model.graph().input_spec();
    let rows: Vec<Tensor> = items
        .par_iter()
        .map(|item| {
            let run = || -> Result<Tensor> {
                let img = store.read_image(item)?;
                model.features_batch(&to_input_tensor(&img, spec)?)
            };
            run().map_err(|e| Error::Item {
                id: item.id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let labels = items.iter().map(|i| i.label.index()).collect();
    Ok((Tensor::stack_batch(&rows)?, labels))
}

/// Features for `copies` augmented draws of every item. Draw `j` of item
/// `i` uses augmentation index `i·copies + j`, so the result depends only on
/// the policy seed and item order. Rows are grouped by item.
pub fn extract_augmented_features(
    model: &Model,
    store: &DatasetStore,
    items: &[DatasetItem],
    policy: &AugmentationPolicy,
    copies: usize,
) -> Result<(Tensor, Vec<usize>)> {
    policy.validate()?;
    if items.is_empty() || copies == 0 {
        return Err(Error::InvalidArgument("need at least one item and one copy".into()));
    }
    let spec = model.graph().input_spec();
    let jobs: Vec<(usize, usize)> = (0..items.len())
        .flat_map(|i| (0..copies).map(move |j| (i, j)))
        .collect();
    let rows: Vec<Tensor> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let item = &items[i];
            let run = || -> Result<Tensor> {
                let img = store.read_image(item)?;
                let drawn = augment(&img, policy, (i * copies + j) as u64)?;
                model.features_batch(&to_input_tensor(&drawn, spec)?)
            };
            run().map_err(|e| Error::Item {
                id: item.id.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let labels = jobs.iter().map(|&(i, _)| items[i].label.index()).collect();
    Ok((Tensor::stack_batch(&rows)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_cases() {
        assert!((cross_entropy(&[0.0; 3], 1).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[100.0, 0.0, 0.0], 0).unwrap() < 1e-40);
        let ce = cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((ce - 0.40760596).abs() < 1e-4, "{ce}");
        assert!(cross_entropy(&[0.0; 3], 3).is_err());
    }

    #[test]
    fn zero_features_leave_decay_and_bias_terms() {
        let mut head = HeadWeights::zeros(3, 4);
        head.weights = (0..12).map(|i| i as f64 * 0.1).collect();
        head.bias = vec![0.5, -0.2, 0.1];
        let x = Tensor::zeros([2, 4]);
        let labels = [0, 2];
        let lambda = 0.3;
        let g = head_gradient(&head, &x, &labels, lambda).unwrap();
        for (d, w) in g.weights.iter().zip(&head.weights) {
            assert!((d - lambda * w).abs() < 1e-12);
        }
        let p = {
            let z = &head.bias;
            let lse = log_sum_exp(z);
            z.iter().map(|v| (v - lse).exp()).collect::<Vec<_>>()
        };
        for (c, (&gb, &pc)) in g.bias.iter().zip(&p).enumerate() {
            let onehot_mean = labels.iter().filter(|&&l| l == c).count() as f64 / 2.0;
            assert!((gb - (pc - onehot_mean)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_loss_is_mean_cross_entropy() {
        let head = HeadWeights {
            num_classes: 3,
            feature_width: 2,
            weights: vec![0.2, -0.1, 0.4, 0.3, -0.5, 0.05],
            bias: vec![0.0, 0.1, -0.1],
        };
        let x = Tensor::new([3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let labels = [0, 1, 2];
        let g = head_gradient(&head, &x, &labels, 0.0).unwrap();
        let mean: f64 = (0..3)
            .map(|i| cross_entropy(&head.logits(&x.data()[i * 2..i * 2 + 2]), labels[i]).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((g.loss - mean).abs() < 1e-12);
    }

    #[test]
    fn missing_class_is_reported() {
        let x = Tensor::zeros([4, 2]);
        let err = train_head(&x, &[0, 0, 2, 2], 3, &TrainConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::MissingClasses(m) if m == "recycle"), "{err}");
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let x = Tensor::from_fn([6, 3], |i| (i as f32).sin());
        let labels = [0, 1, 2, 0, 1, 2];
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 5,
            ..TrainConfig::default()
        };
        let (head, history) = train_head(&x, &labels, 3, &cfg).unwrap();
        assert_eq!(head, HeadWeights::zeros(3, 3));
        assert_eq!(history.len(), 5);
        assert!(history.iter().all(|&l| (l - 3f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
