//! Architecture descriptions and the executable [`Model`].
//!
//! A [`ModelGraph`] is a DAG of [`Node`]s. Parameterized nodes own tensors
//! named `<node name>.<role>` (`conv1.weight`, `bn1.running_var`, ...); the
//! ordered list of those tensors is what the model file serializes.

mod builders;
mod init;
mod io;
mod model;

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::category::WasteCategory;
use crate::error::{Error, Result};
use crate::ops::PoolMode;
use crate::tensor::{ConvGeometry, Tensor};

pub use builders::{build_mobilenet_v1, build_resnet50, GraphBuilder};
pub use init::random_weights;
pub use io::{
    load_model, load_parts, save_model, ModelFile, ModelManifest, ModelPaths, TensorEntry,
    FORMAT_VERSION, MODEL_MAGIC,
};
pub use model::{extract_features, forward, Model, Prediction};
pub(crate) use model::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "resnet50_v1")]
    Resnet50V1,
    #[serde(rename = "mobilenet_v1")]
    MobilenetV1,
    #[serde(rename = "custom")]
    Custom,
}

impl Architecture {
    pub fn id(&self) -> &'static str {
        match self {
            Architecture::Resnet50V1 => "resnet50_v1",
            Architecture::MobilenetV1 => "mobilenet_v1",
            Architecture::Custom => "custom",
        }
    }
}

/// Expected input geometry and per-channel normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl InputSpec {
    pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
    pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

    /// RGB input with ImageNet channel statistics.
    pub fn imagenet(height: usize, width: usize) -> Self {
        InputSpec {
            height,
            width,
            channels: 3,
            mean: Self::IMAGENET_MEAN.to_vec(),
            std: Self::IMAGENET_STD.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "input dims must be positive: {self:?}"
            )));
        }
        if self.mean.len() != self.channels || self.std.len() != self.channels {
            return Err(Error::InvalidArgument(format!(
                "input normalization needs {} mean/std values",
                self.channels
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("input std must be positive".into()));
        }
        Ok(())
    }
}

impl Default for InputSpec {
    fn default() -> Self {
        InputSpec::imagenet(224, 224)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpKind {
    Input,
    Conv {
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        groups: usize,
        bias: bool,
    },
    DepthwiseConv {
        channels: usize,
        geometry: ConvGeometry,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f32,
    },
    Relu,
    Pool {
        mode: PoolMode,
        geometry: ConvGeometry,
    },
    GlobalAvgPool,
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
    Add,
}

impl OpKind {
    fn arity(&self) -> usize {
        match self {
            OpKind::Input => 0,
            OpKind::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    #[serde(flatten)]
    pub op: OpKind,
    pub inputs: Vec<usize>,
}

/// A named parameter tensor a graph expects.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub node: String,
    pub name: String,
    pub shape: Vec<usize>,
    /// Batch-norm running statistics are buffers, not trainable parameters.
    pub trainable: bool,
}

/// Validated architecture: nodes, execution order, the feature tap and the
/// single output node.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    architecture: Architecture,
    input: InputSpec,
    labels: Vec<String>,
    nodes: Vec<Node>,
    order: Vec<usize>,
    feature_tap: usize,
    output: usize,
}

impl ModelGraph {
    /// Validates topology and shapes. `labels` must match the width of the
    /// final fully-connected layer.
    pub fn new(
        architecture: Architecture,
        input: InputSpec,
        labels: Vec<String>,
        nodes: Vec<Node>,
    ) -> Result<Self> {
        input.validate()?;
        let order = topological_order(&nodes)?;
        let mut consumers = vec![0usize; nodes.len()];
        for node in &nodes {
            for &i in &node.inputs {
                consumers[i] += 1;
            }
        }
        let sinks: Vec<usize> = (0..nodes.len()).filter(|&i| consumers[i] == 0).collect();
        let output = match sinks.as_slice() {
            [one] => *one,
            _ => {
                return Err(Error::Graph(format!(
                    "graph must have exactly one output node, found {}",
                    sinks.len()
                )))
            }
        };
        let inputs: Vec<usize> = (0..nodes.len())
            .filter(|&i| nodes[i].op == OpKind::Input)
            .collect();
        if inputs.len() != 1 {
            return Err(Error::Graph(format!(
                "graph must have exactly one input node, found {}",
                inputs.len()
            )));
        }
        let taps: Vec<usize> = (0..nodes.len())
            .filter(|&i| nodes[i].op == OpKind::GlobalAvgPool)
            .collect();
        let feature_tap = match taps.as_slice() {
            [one] => *one,
            _ => {
                return Err(Error::Graph(format!(
                    "graph must have exactly one global_avg_pool feature tap, found {}",
                    taps.len()
                )))
            }
        };
        let mut seen = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Some(prev) = seen.insert(node.name.as_str(), i) {
                return Err(Error::Graph(format!(
                    "duplicate node name `{}` (nodes {prev} and {i})",
                    node.name
                )));
            }
        }

        let graph = ModelGraph {
            architecture,
            input,
            labels,
            nodes,
            order,
            feature_tap,
            output,
        };
        let shapes = graph.infer_shapes(1)?;
        let classes = match graph.fc_node() {
            Some((_, _, k)) => k,
            None => *shapes[graph.output].last().unwrap(),
        };
        if graph.labels.len() != classes {
            return Err(Error::Graph(format!(
                "{} labels supplied for a {classes}-way classifier",
                graph.labels.len()
            )));
        }
        Ok(graph)
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn input_spec(&self) -> &InputSpec {
        &self.input
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn execution_order(&self) -> &[usize] {
        &self.order
    }

    pub fn feature_tap(&self) -> usize {
        self.feature_tap
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn count_op(&self, pred: impl Fn(&OpKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.op)).count()
    }

    /// Width of the feature vector at the global-average-pool tap.
    pub fn feature_width(&self) -> usize {
        let shapes = self
            .infer_shapes(1)
            .expect("validated graph always infers shapes");
        shapes[self.feature_tap][1]
    }

    /// The last fully-connected node as `(index, in_features, out_features)`.
    pub fn fc_node(&self) -> Option<(usize, usize, usize)> {
        self.order.iter().rev().find_map(|&i| match self.nodes[i].op {
            OpKind::FullyConnected {
                in_features,
                out_features,
            } => Some((i, in_features, out_features)),
            _ => None,
        })
    }

    /// Output shape of every node for a batch of `batch` inputs.
    pub fn infer_shapes(&self, batch: usize) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for &i in &self.order {
            let node = &self.nodes[i];
            let ins: Vec<&Vec<usize>> = node.inputs.iter().map(|&j| &shapes[j]).collect();
            shapes[i] = node_shape(node, &ins, &self.input, batch)?;
        }
        Ok(shapes)
    }

    /// Parameter tensors in node order; this order is the blob layout.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        for node in &self.nodes {
            let mut push = |role: &str, shape: Vec<usize>, trainable: bool| {
                specs.push(ParamSpec {
                    node: node.name.clone(),
                    name: format!("{}.{role}", node.name),
                    shape,
                    trainable,
                })
            };
            match &node.op {
                OpKind::Conv {
                    in_channels,
                    out_channels,
                    geometry,
                    groups,
                    bias,
                } => {
                    push(
                        "weight",
                        vec![
                            *out_channels,
                            in_channels / groups,
                            geometry.kernel.0,
                            geometry.kernel.1,
                        ],
                        true,
                    );
                    if *bias {
                        push("bias", vec![*out_channels], true);
                    }
                }
                OpKind::DepthwiseConv {
                    channels,
                    geometry,
                    bias,
                } => {
                    push(
                        "weight",
                        vec![*channels, 1, geometry.kernel.0, geometry.kernel.1],
                        true,
                    );
                    if *bias {
                        push("bias", vec![*channels], true);
                    }
                }
                OpKind::BatchNorm { channels, .. } => {
                    push("weight", vec![*channels], true);
                    push("bias", vec![*channels], true);
                    push("running_mean", vec![*channels], false);
                    push("running_var", vec![*channels], false);
                }
                OpKind::FullyConnected {
                    in_features,
                    out_features,
                } => {
                    push("weight", vec![*in_features, *out_features], true);
                    push("bias", vec![*out_features], true);
                }
                _ => {}
            }
        }
        specs
    }

    /// Number of trainable parameters (batch-norm running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.param_specs()
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// Node index per consumer list.
    pub(crate) fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &j in &node.inputs {
                out[j].push(i);
            }
        }
        out
    }
}

/// Kahn's algorithm; rejects dangling references and cycles.
fn topological_order(nodes: &[Node]) -> Result<Vec<usize>> {
    let n = nodes.len();
    let mut indegree = vec![0usize; n];
    let mut consumers = vec![Vec::new(); n];
    for (i, node) in nodes.iter().enumerate() {
        if node.inputs.len() != node.op.arity() {
            return Err(Error::Graph(format!(
                "node `{}` takes {} inputs, got {}",
                node.name,
                node.op.arity(),
                node.inputs.len()
            )));
        }
        for &j in &node.inputs {
            if j >= n {
                return Err(Error::Graph(format!(
                    "node `{}` references missing node {j}",
                    node.name
                )));
            }
            indegree[i] += 1;
            consumers[j].push(i);
        }
    }
    let mut ready: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_front() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push_back(c);
            }
        }
    }
    if order.len() != n {
        let stuck: Vec<&str> = (0..n)
            .filter(|&i| indegree[i] > 0)
            .map(|i| nodes[i].name.as_str())
            .collect();
        return Err(Error::Graph(format!("cycle through nodes {stuck:?}")));
    }
    Ok(order)
}

fn node_shape(
    node: &Node,
    ins: &[&Vec<usize>],
    input: &InputSpec,
    batch: usize,
) -> Result<Vec<usize>> {
    let err = |msg: String| Error::Graph(format!("node `{}`: {msg}", node.name));
    let nchw = |s: &Vec<usize>| -> Result<(usize, usize, usize, usize)> {
        match s.as_slice() {
            [n, c, h, w] => Ok((*n, *c, *h, *w)),
            _ => Err(err(format!("expects a 4-D input, got {s:?}"))),
        }
    };
    Ok(match &node.op {
        OpKind::Input => vec![batch, input.channels, input.height, input.width],
        OpKind::Conv {
            in_channels,
            out_channels,
            geometry,
            groups,
            ..
        } => {
            let (n, c, h, w) = nchw(ins[0])?;
            if c != *in_channels {
                return Err(err(format!("expects {in_channels} channels, got {c}")));
            }
            if *groups == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                return Err(err(format!("groups={groups} does not divide channels")));
            }
            let (ho, wo) = geometry.output_size(h, w).map_err(|e| err(e.to_string()))?;
            vec![n, *out_channels, ho, wo]
        }
        OpKind::DepthwiseConv {
            channels, geometry, ..
        } => {
            let (n, c, h, w) = nchw(ins[0])?;
            if c != *channels {
                return Err(err(format!("expects {channels} channels, got {c}")));
            }
            let (ho, wo) = geometry.output_size(h, w).map_err(|e| err(e.to_string()))?;
            vec![n, c, ho, wo]
        }
        OpKind::BatchNorm { channels, .. } => {
            let (_, c, _, _) = nchw(ins[0])?;
            if c != *channels {
                return Err(err(format!("expects {channels} channels, got {c}")));
            }
            ins[0].clone()
        }
        OpKind::Relu => ins[0].clone(),
        OpKind::Pool { geometry, .. } => {
            let (n, c, h, w) = nchw(ins[0])?;
            let (ho, wo) = geometry.output_size(h, w).map_err(|e| err(e.to_string()))?;
            vec![n, c, ho, wo]
        }
        OpKind::GlobalAvgPool => {
            let (n, c, _, _) = nchw(ins[0])?;
            vec![n, c]
        }
        OpKind::FullyConnected {
            in_features,
            out_features,
        } => match ins[0].as_slice() {
            [n, f] if f == in_features => vec![*n, *out_features],
            other => {
                return Err(err(format!(
                    "expects [N, {in_features}] input, got {other:?}"
                )))
            }
        },
        OpKind::Softmax => {
            if ins[0].len() != 2 {
                return Err(err(format!("softmax expects [N, K], got {:?}", ins[0])));
            }
            ins[0].clone()
        }
        OpKind::Add => {
            if ins[0] != ins[1] {
                return Err(err(format!(
                    "add operands differ: {:?} vs {:?}",
                    ins[0], ins[1]
                )));
            }
            ins[0].clone()
        }
    })
}

/// Named parameter tensors for a graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Weights {
    tensors: HashMap<String, Tensor>,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Checks every tensor the graph needs is present with the right shape.
    pub fn check_against(&self, graph: &ModelGraph) -> Result<()> {
        for spec in graph.param_specs() {
            match self.tensors.get(&spec.name) {
                None => {
                    return Err(Error::MissingTensor {
                        node: spec.node,
                        tensor: spec.name,
                    })
                }
                Some(t) if t.shape() != spec.shape => {
                    return Err(Error::Validation {
                        tensor: spec.name,
                        reason: format!("shape {:?}, expected {:?}", t.shape(), spec.shape),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub(crate) fn take(&self, spec_name: &str) -> Result<&Tensor> {
        self.tensors.get(spec_name).ok_or_else(|| Error::MissingTensor {
            node: spec_name.rsplit_once('.').map_or(spec_name, |(n, _)| n).to_string(),
            tensor: spec_name.to_string(),
        })
    }
}

/// `["trash", "recycle", "compost"]` for three classes, `class{i}` otherwise.
pub fn default_labels(num_classes: usize) -> Vec<String> {
    if num_classes == WasteCategory::ALL.len() {
        WasteCategory::ALL.iter().map(|c| c.as_str().to_string()).collect()
    } else {
        (0..num_classes).map(|i| format!("class{i}")).collect()
    }
}
