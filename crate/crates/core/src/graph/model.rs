use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelGraph, ModelManifest, Node, OpKind, Weights};
use crate::error::{Error, Result};
use crate::ops::{self, BatchNormParams, ConvParams, PoolMode};
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Debug)]
enum Layer {
    Input,
    Conv(ConvParams),
    Depthwise(ConvParams),
    BatchNorm(BatchNormParams),
    Relu,
    Pool(PoolMode, ConvGeometry),
    GlobalAvgPool,
    FullyConnected { weights: Tensor, bias: Vec<f32> },
    Softmax,
    Add,
}

/// A graph bound to its weights, ready to execute. Immutable once built, so
/// one instance can serve concurrent forwards.
#[derive(Clone, Debug)]
pub struct Model {
    graph: ModelGraph,
    layers: Vec<Layer>,
    manifest: ModelManifest,
    id: String,
    bn_folded: bool,
}

/// Class distribution for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: Vec<String>,
    pub confidences: Vec<f32>,
    pub index: usize,
    pub label: String,
    pub latency_ms: f64,
}

impl Model {
    /// Binds weights to a graph. With `fold_bn`, every conv whose only
    /// consumer is a batch-norm absorbs it and the batch-norm node is removed.
    pub fn from_parts(graph: ModelGraph, weights: &Weights, fold_bn: bool) -> Result<Model> {
        weights.check_against(&graph)?;
        let manifest = ModelManifest::describe(&graph);
        let id = manifest_id(&manifest);
        let layers = graph
            .nodes()
            .iter()
            .map(|n| bind_layer(n, weights))
            .collect::<Result<Vec<_>>>()?;
        let model = Model {
            graph,
            layers,
            manifest,
            id,
            bn_folded: false,
        };
        if fold_bn {
            model.fold_batchnorms()
        } else {
            Ok(model)
        }
    }

    fn fold_batchnorms(self) -> Result<Model> {
        let Model {
            graph,
            mut layers,
            manifest,
            id,
            ..
        } = self;
        let nodes = graph.nodes();
        let consumers = graph.consumers();
        let mut alias: Vec<usize> = (0..nodes.len()).collect();
        let mut removed = vec![false; nodes.len()];
        let mut new_ops: Vec<OpKind> = nodes.iter().map(|n| n.op.clone()).collect();

        for &i in graph.execution_order() {
            let Layer::BatchNorm(bn) = &layers[i] else { continue };
            let src = nodes[i].inputs[0];
            if consumers[src] != [i] {
                continue;
            }
            let folded = match &layers[src] {
                Layer::Conv(p) => Layer::Conv(ops::fold_batchnorm(p, bn)?),
                Layer::Depthwise(p) => Layer::Depthwise(ops::fold_batchnorm(p, bn)?),
                _ => continue,
            };
            layers[src] = folded;
            match &mut new_ops[src] {
                OpKind::Conv { bias, .. } | OpKind::DepthwiseConv { bias, .. } => *bias = true,
                _ => unreachable!("fold source is a convolution"),
            }
            removed[i] = true;
            alias[i] = src;
        }

        let resolve = |mut i: usize| {
            while alias[i] != i {
                i = alias[i];
            }
            i
        };
        let mut remap = vec![usize::MAX; nodes.len()];
        let mut kept_nodes = Vec::new();
        let mut kept_layers = Vec::new();
        for (i, (node, layer)) in nodes.iter().zip(layers).enumerate() {
            if removed[i] {
                continue;
            }
            remap[i] = kept_nodes.len();
            kept_nodes.push((i, node, new_ops[i].clone()));
            kept_layers.push(layer);
        }
        let new_nodes = kept_nodes
            .into_iter()
            .map(|(_, node, op)| Node {
                name: node.name.clone(),
                op,
                inputs: node.inputs.iter().map(|&j| remap[resolve(j)]).collect(),
            })
            .collect();
        let folded_graph = ModelGraph::new(
            graph.architecture(),
            graph.input_spec().clone(),
            graph.labels().to_vec(),
            new_nodes,
        )?;
        Ok(Model {
            graph: folded_graph,
            layers: kept_layers,
            manifest,
            id,
            bn_folded: true,
        })
    }

    /// The executed graph (batch-norms removed when folded).
    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    /// Manifest of the source (unfolded) model, without weights.
    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    /// Hex SHA-256 of the manifest's compact JSON.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn labels(&self) -> &[String] {
        self.graph.labels()
    }

    pub fn is_bn_folded(&self) -> bool {
        self.bn_folded
    }

    pub fn feature_width(&self) -> usize {
        self.graph.feature_width()
    }

    /// Class probabilities for an `N×C×H×W` batch, `N×K`.
    pub fn predict_batch(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input, None)?;
        let out = self.run(input.clone(), self.graph.output())?;
        if self.graph.nodes()[self.graph.output()].op == OpKind::Softmax {
            Ok(out)
        } else {
            ops::softmax_rows(&out)
        }
    }

    /// Activations at the global-average-pool tap, `N×F`.
    pub fn features_batch(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input, None)?;
        self.run(input.clone(), self.graph.feature_tap())
    }

    /// Current classifier as `(weights F×K, bias K)`.
    pub(crate) fn classifier(&self) -> Result<(&Tensor, &[f32])> {
        let (idx, _, _) = self
            .graph
            .fc_node()
            .ok_or_else(|| Error::Graph("model has no fully-connected layer".into()))?;
        match &self.layers[idx] {
            Layer::FullyConnected { weights, bias } => Ok((weights, bias)),
            _ => unreachable!("fc_node points at a fully-connected layer"),
        }
    }

    /// Copy of this model with the classifier replaced.
    pub(crate) fn with_classifier(&self, weights: Tensor, bias: Vec<f32>) -> Result<Model> {
        let (idx, f, k) = self
            .graph
            .fc_node()
            .ok_or_else(|| Error::Graph("model has no fully-connected layer".into()))?;
        if weights.shape() != [f, k] || bias.len() != k {
            return Err(Error::shape(format!(
                "classifier must be [{f}, {k}] + [{k}], got {:?} + [{}]",
                weights.shape(),
                bias.len()
            )));
        }
        let mut model = self.clone();
        model.layers[idx] = Layer::FullyConnected { weights, bias };
        Ok(model)
    }

    fn check_input(&self, input: &Tensor, batch: Option<usize>) -> Result<()> {
        let spec = self.graph.input_spec();
        let ok = match input.shape() {
            [n, c, h, w] => {
                batch.is_none_or(|b| b == *n)
                    && *c == spec.channels
                    && *h == spec.height
                    && *w == spec.width
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "expected input [{}, {}, {}, {}], got {:?}",
                batch.map_or("N".to_string(), |b| b.to_string()),
                spec.channels,
                spec.height,
                spec.width,
                input.shape()
            )))
        }
    }

    /// Executes in topological order until `stop` is computed. Activations
    /// are dropped after their last consumer; single-use inputs to ReLU and
    /// Add are updated in place.
    fn run(&self, input: Tensor, stop: usize) -> Result<Tensor> {
        let nodes = self.graph.nodes();
        let mut uses: Vec<usize> = vec![0; nodes.len()];
        for node in nodes {
            for &j in &node.inputs {
                uses[j] += 1;
            }
        }
        let mut values: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut input = Some(input);

        for &i in self.graph.execution_order() {
            let node = &nodes[i];
            let out = {
                let arg = |k: usize| -> &Tensor {
                    values[node.inputs[k]]
                        .as_ref()
                        .expect("producer runs before consumer")
                };
                match &self.layers[i] {
                    Layer::Input => input.take().expect("single input node"),
                    Layer::Conv(p) => ops::conv2d(arg(0), p)?,
                    Layer::Depthwise(p) => ops::depthwise_conv2d(arg(0), p)?,
                    Layer::BatchNorm(p) => ops::batchnorm_infer(arg(0), p)?,
                    Layer::Pool(mode, geom) => ops::pool2d(arg(0), *mode, geom)?,
                    Layer::GlobalAvgPool => ops::global_avg_pool(arg(0))?,
                    Layer::FullyConnected { weights, bias } => {
                        ops::fully_connected(arg(0), weights, bias)?
                    }
                    Layer::Softmax => ops::softmax_rows(arg(0))?,
                    Layer::Relu => {
                        let j = node.inputs[0];
                        if uses[j] == 1 && j != stop {
                            let mut t = values[j].take().expect("producer runs before consumer");
                            ops::relu_in_place(&mut t);
                            t
                        } else {
                            ops::relu(arg(0))
                        }
                    }
                    Layer::Add => {
                        let (a, b) = (node.inputs[0], node.inputs[1]);
                        if uses[a] == 1 && a != b && a != stop {
                            let mut t = values[a].take().expect("producer runs before consumer");
                            let other = values[b].as_ref().expect("producer runs before consumer");
                            if t.shape() != other.shape() {
                                return Err(Error::shape(format!(
                                    "add operands differ: {:?} vs {:?}",
                                    t.shape(),
                                    other.shape()
                                )));
                            }
                            for (x, &y) in t.data_mut().iter_mut().zip(other.data()) {
                                *x += y;
                            }
                            t
                        } else {
                            ops::add(arg(0), arg(1))?
                        }
                    }
                }
            };
            if i == stop {
                return Ok(out);
            }
            for &j in &node.inputs {
                uses[j] -= 1;
                if uses[j] == 0 {
                    values[j] = None;
                }
            }
            values[i] = Some(out);
        }
        Err(Error::Graph(format!("node {stop} is not reachable")))
    }
}

fn bind_layer(node: &Node, weights: &Weights) -> Result<Layer> {
    let name = &node.name;
    let tensor = |role: &str| weights.take(&format!("{name}.{role}"));
    let vector = |role: &str| tensor(role).map(|t| t.data().to_vec());
    Ok(match &node.op {
        OpKind::Input => Layer::Input,
        OpKind::Conv {
            in_channels,
            out_channels,
            geometry,
            groups,
            bias,
        } => Layer::Conv(ConvParams::new(
            *in_channels,
            *out_channels,
            *geometry,
            *groups,
            tensor("weight")?.clone(),
            if *bias { Some(vector("bias")?) } else { None },
        )?),
        OpKind::DepthwiseConv {
            channels,
            geometry,
            bias,
        } => Layer::Depthwise(ConvParams::new(
            *channels,
            *channels,
            *geometry,
            *channels,
            tensor("weight")?.clone(),
            if *bias { Some(vector("bias")?) } else { None },
        )?),
        OpKind::BatchNorm { eps, .. } => {
            let p = BatchNormParams {
                gamma: vector("weight")?,
                beta: vector("bias")?,
                running_mean: vector("running_mean")?,
                running_var: vector("running_var")?,
                eps: *eps,
            };
            p.validate().map_err(|e| Error::Validation {
                tensor: format!("{name}.running_var"),
                reason: e.to_string(),
            })?;
            Layer::BatchNorm(p)
        }
        OpKind::Relu => Layer::Relu,
        OpKind::Pool { mode, geometry } => Layer::Pool(*mode, *geometry),
        OpKind::GlobalAvgPool => Layer::GlobalAvgPool,
        OpKind::FullyConnected { .. } => Layer::FullyConnected {
            weights: tensor("weight")?.clone(),
            bias: vector("bias")?,
        },
        OpKind::Softmax => Layer::Softmax,
        OpKind::Add => Layer::Add,
    })
}

fn manifest_id(manifest: &ModelManifest) -> String {
    let bytes = serde_json::to_vec(manifest).expect("manifest serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Classifies a single `1×C×H×W` image.
pub fn forward(model: &Model, input: &Tensor) -> Result<Prediction> {
    model.check_input(input, Some(1))?;
    let start = Instant::now();
    let probs = model.predict_batch(input)?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let confidences = probs.into_data();
    let index = argmax(&confidences);
    let labels = model.labels().to_vec();
    Ok(Prediction {
        label: labels[index].clone(),
        labels,
        confidences,
        index,
        latency_ms,
    })
}

/// Feature vector at the global-average-pool tap for a single image.
pub fn extract_features(model: &Model, input: &Tensor) -> Result<Vec<f32>> {
    model.check_input(input, Some(1))?;
    Ok(model.features_batch(input)?.into_data())
}

/// First index of the maximum; ties resolve to the lower class index.
pub(crate) fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
