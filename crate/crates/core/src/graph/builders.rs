use super::{default_labels, Architecture, InputSpec, ModelGraph, Node, OpKind};
use crate::error::{Error, Result};
use crate::ops::PoolMode;
use crate::tensor::ConvGeometry;

const BN_EPS: f32 = 1e-5;

/// Appends nodes in execution order and hands back their indices.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, op: OpKind, inputs: Vec<usize>) -> usize {
        self.nodes.push(Node {
            name: name.into(),
            op,
            inputs,
        });
        self.nodes.len() - 1
    }

    pub fn input(&mut self) -> usize {
        self.push("input", OpKind::Input, vec![])
    }

    pub fn conv(
        &mut self,
        name: &str,
        x: usize,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
    ) -> usize {
        self.push(
            name,
            OpKind::Conv {
                in_channels,
                out_channels,
                geometry,
                groups: 1,
                bias: false,
            },
            vec![x],
        )
    }

    pub fn depthwise(&mut self, name: &str, x: usize, channels: usize, geometry: ConvGeometry) -> usize {
        self.push(
            name,
            OpKind::DepthwiseConv {
                channels,
                geometry,
                bias: false,
            },
            vec![x],
        )
    }

    pub fn batchnorm(&mut self, name: &str, x: usize, channels: usize) -> usize {
        self.push(name, OpKind::BatchNorm { channels, eps: BN_EPS }, vec![x])
    }

    pub fn relu(&mut self, name: &str, x: usize) -> usize {
        self.push(name, OpKind::Relu, vec![x])
    }

    pub fn add(&mut self, name: &str, a: usize, b: usize) -> usize {
        self.push(name, OpKind::Add, vec![a, b])
    }

    /// `name` conv + `bn_name` batch-norm (+ ReLU named `relu_name`).
    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &mut self,
        name: &str,
        bn_name: &str,
        relu_name: Option<&str>,
        x: usize,
        cin: usize,
        cout: usize,
        geometry: ConvGeometry,
    ) -> usize {
        let c = self.conv(name, x, cin, cout, geometry);
        let b = self.batchnorm(bn_name, c, cout);
        match relu_name {
            Some(r) => self.relu(r, b),
            None => b,
        }
    }

    /// Global average pool, classifier and softmax.
    pub fn head(&mut self, x: usize, features: usize, num_classes: usize) -> usize {
        let gap = self.push("avgpool", OpKind::GlobalAvgPool, vec![x]);
        let fc = self.push(
            "fc",
            OpKind::FullyConnected {
                in_features: features,
                out_features: num_classes,
            },
            vec![gap],
        );
        self.push("softmax", OpKind::Softmax, vec![fc])
    }

    pub fn finish(
        self,
        architecture: Architecture,
        input: InputSpec,
        labels: Vec<String>,
    ) -> Result<ModelGraph> {
        ModelGraph::new(architecture, input, labels, self.nodes)
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "a classifier needs at least 2 classes, got {num_classes}"
        )));
    }
    Ok(())
}

/// ResNet-50 v1: 7×7/2 stem, 3×3/2 max-pool, bottleneck stages `[3, 4, 6, 3]`
/// with expansion 4. Downsampling stages put stride 2 on the block's first
/// 1×1 conv and on the 1×1 projection shortcut.
pub fn build_resnet50(num_classes: usize) -> Result<ModelGraph> {
    build_resnet50_with(num_classes, InputSpec::default())
}

pub(crate) fn build_resnet50_with(num_classes: usize, input: InputSpec) -> Result<ModelGraph> {
    check_classes(num_classes)?;
    let mut g = GraphBuilder::new();
    let x = g.input();
    let x = g.conv_bn("conv1", "bn1", Some("relu"), x, input.channels, 64, ConvGeometry::new(7, 2, 3));
    let mut x = g.push(
        "maxpool",
        OpKind::Pool {
            mode: PoolMode::Max,
            geometry: ConvGeometry::new(3, 2, 1),
        },
        vec![x],
    );

    let stages = [(64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)];
    let mut in_ch = 64;
    for (stage, &(width, blocks, stride)) in stages.iter().enumerate() {
        for block in 0..blocks {
            let p = format!("layer{}.{block}", stage + 1);
            let s = if block == 0 { stride } else { 1 };
            let out_ch = width * 4;
            let h = g.conv_bn(
                &format!("{p}.conv1"),
                &format!("{p}.bn1"),
                Some(&format!("{p}.relu1")),
                x,
                in_ch,
                width,
                ConvGeometry::new(1, s, 0),
            );
            let h = g.conv_bn(
                &format!("{p}.conv2"),
                &format!("{p}.bn2"),
                Some(&format!("{p}.relu2")),
                h,
                width,
                width,
                ConvGeometry::new(3, 1, 1),
            );
            let h = g.conv_bn(
                &format!("{p}.conv3"),
                &format!("{p}.bn3"),
                None,
                h,
                width,
                out_ch,
                ConvGeometry::new(1, 1, 0),
            );
            let shortcut = if s != 1 || in_ch != out_ch {
                g.conv_bn(
                    &format!("{p}.downsample.0"),
                    &format!("{p}.downsample.1"),
                    None,
                    x,
                    in_ch,
                    out_ch,
                    ConvGeometry::new(1, s, 0),
                )
            } else {
                x
            };
            let sum = g.add(&format!("{p}.add"), h, shortcut);
            x = g.relu(&format!("{p}.relu3"), sum);
            in_ch = out_ch;
        }
    }
    g.head(x, in_ch, num_classes);
    g.finish(Architecture::Resnet50V1, input, default_labels(num_classes))
}

/// `(output channels, depthwise stride)` for the 13 separable blocks.
const MOBILENET_BLOCKS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];

/// MobileNetV1 at width multiplier 1.0: 3×3/2 stem then 13 depthwise-separable
/// blocks, each `dw 3×3 + BN + ReLU, pw 1×1 + BN + ReLU`.
pub fn build_mobilenet_v1(num_classes: usize, width_multiplier: f32) -> Result<ModelGraph> {
    build_mobilenet_v1_with(num_classes, width_multiplier, InputSpec::default())
}

pub(crate) fn build_mobilenet_v1_with(
    num_classes: usize,
    width_multiplier: f32,
    input: InputSpec,
) -> Result<ModelGraph> {
    check_classes(num_classes)?;
    if width_multiplier != 1.0 {
        return Err(Error::InvalidArgument(format!(
            "only width multiplier 1.0 is supported, got {width_multiplier}"
        )));
    }
    let mut g = GraphBuilder::new();
    let x = g.input();
    let mut x = g.conv_bn("conv1", "bn1", Some("relu"), x, input.channels, 32, ConvGeometry::new(3, 2, 1));
    let mut ch = 32;
    for (i, &(out, stride)) in MOBILENET_BLOCKS.iter().enumerate() {
        let p = format!("blocks.{}", i + 1);
        let d = g.depthwise(&format!("{p}.dw"), x, ch, ConvGeometry::new(3, stride, 1));
        let d = g.batchnorm(&format!("{p}.dw_bn"), d, ch);
        let d = g.relu(&format!("{p}.dw_relu"), d);
        x = g.conv_bn(
            &format!("{p}.pw"),
            &format!("{p}.pw_bn"),
            Some(&format!("{p}.pw_relu")),
            d,
            ch,
            out,
            ConvGeometry::new(1, 1, 0),
        );
        ch = out;
    }
    g.head(x, ch, num_classes);
    g.finish(Architecture::MobilenetV1, input, default_labels(num_classes))
}

/// Rebuilds a named architecture for a given class count and input spec.
pub(crate) fn build_architecture(
    arch: Architecture,
    num_classes: usize,
    input: InputSpec,
) -> Result<ModelGraph> {
    match arch {
        Architecture::Resnet50V1 => build_resnet50_with(num_classes, input),
        Architecture::MobilenetV1 => build_mobilenet_v1_with(num_classes, 1.0, input),
        Architecture::Custom => Err(Error::Format(
            "custom architectures carry their own graph description".into(),
        )),
    }
}
