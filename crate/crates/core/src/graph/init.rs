use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelGraph, OpKind, Weights};
use crate::tensor::Tensor;

/// Seeded random parameters for a graph, scaled so activations stay O(1)
/// through deep residual stacks.
///
/// Convolutions get He-normal weights; batch-norm statistics are drawn near
/// identity. Batch-norms that feed a residual add get a small `gamma` so the
/// residual stream does not grow with depth. The classifier is scaled by
/// `1/sqrt(F)`.
pub fn random_weights(graph: &ModelGraph, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let consumers = graph.consumers();
    let mut weights = Weights::new();
    for (idx, node) in graph.nodes().iter().enumerate() {
        let name = &node.name;
        match &node.op {
            OpKind::Conv {
                in_channels,
                out_channels,
                geometry,
                groups,
                bias,
            } => {
                let fan_in = in_channels / groups * geometry.kernel.0 * geometry.kernel.1;
                let shape = [*out_channels, in_channels / groups, geometry.kernel.0, geometry.kernel.1];
                let std = (2.0 / fan_in as f32).sqrt();
                weights.insert(format!("{name}.weight"), Tensor::randn(shape, std, &mut rng));
                if *bias {
                    weights.insert(
                        format!("{name}.bias"),
                        Tensor::rand_uniform([*out_channels], -0.1, 0.1, &mut rng),
                    );
                }
            }
            OpKind::DepthwiseConv {
                channels,
                geometry,
                bias,
            } => {
                let fan_in = geometry.kernel.0 * geometry.kernel.1;
                let shape = [*channels, 1, geometry.kernel.0, geometry.kernel.1];
                let std = (2.0 / fan_in as f32).sqrt();
                weights.insert(format!("{name}.weight"), Tensor::randn(shape, std, &mut rng));
                if *bias {
                    weights.insert(
                        format!("{name}.bias"),
                        Tensor::rand_uniform([*channels], -0.1, 0.1, &mut rng),
                    );
                }
            }
            OpKind::BatchNorm { channels, .. } => {
                let c = *channels;
                let feeds_add = consumers[idx]
                    .iter()
                    .any(|&j| graph.nodes()[j].op == OpKind::Add);
                let (g_lo, g_hi) = if feeds_add { (0.1, 0.3) } else { (0.8, 1.2) };
                weights.insert(format!("{name}.weight"), Tensor::rand_uniform([c], g_lo, g_hi, &mut rng));
                weights.insert(format!("{name}.bias"), Tensor::rand_uniform([c], -0.1, 0.1, &mut rng));
                weights.insert(
                    format!("{name}.running_mean"),
                    Tensor::rand_uniform([c], -0.1, 0.1, &mut rng),
                );
                weights.insert(
                    format!("{name}.running_var"),
                    Tensor::rand_uniform([c], 0.5, 1.5, &mut rng),
                );
            }
            OpKind::FullyConnected {
                in_features,
                out_features,
            } => {
                let std = 1.0 / (*in_features as f32).sqrt();
                weights.insert(
                    format!("{name}.weight"),
                    Tensor::randn([*in_features, *out_features], std, &mut rng),
                );
                weights.insert(format!("{name}.bias"), Tensor::zeros([*out_features]));
            }
            _ => {}
        }
    }
    weights
}
