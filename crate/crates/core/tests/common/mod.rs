//! Reference implementations and fixtures shared by the integration tests.
//! The oracles are deliberately naive: plain loops, f64 accumulation.
#![allow(dead_code)]

use wastesort::imaging::ImageRGB8;
use wastesort::tensor::ConvGeometry;
use wastesort::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Triple-loop matrix product, `m×k · k×n`.
pub fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for p in 0..k {
                acc += a[i * k + p] as f64 * b[p * n + j] as f64;
            }
            c[i * n + j] = acc as f32;
        }
    }
    c
}

/// Direct grouped convolution over `N×C×H×W` with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&[f32]>,
    out_channels: usize,
    groups: usize,
    geom: &ConvGeometry,
) -> Tensor {
    let s = input.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (kh, kw) = geom.kernel;
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.padding;
    let (dh, dw) = geom.dilation;
    let ho = (h + 2 * ph - dh * (kh - 1) - 1) / sh + 1;
    let wo = (w + 2 * pw - dw * (kw - 1) - 1) / sw + 1;
    let cg = c / groups;
    let og = out_channels / groups;
    let x = input.data();
    let k = weights.data();
    let mut out = vec![0.0f32; n * out_channels * ho * wo];
    for b in 0..n {
        for o in 0..out_channels {
            let g = o / og;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |v| v[o] as f64);
                    for ci in 0..cg {
                        let ch = g * cg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * sh + ky * dh) as isize - ph as isize;
                                let ix = (ox * sw + kx * dw) as isize - pw as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ch) * h + iy as usize) * w + ix as usize];
                                let kv = k[((o * cg + ci) * kh + ky) * kw + kx];
                                acc += xv as f64 * kv as f64;
                            }
                        }
                    }
                    out[((b * out_channels + o) * ho + oy) * wo + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::new([n, out_channels, ho, wo], out).unwrap()
}

/// Shape drawn for each class of the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Stripes,
}

/// Procedural `size×size` image: a colored shape on a noisy background.
/// Class 0 draws discs, 1 squares, 2 horizontal stripes.
pub fn shape_image(class: usize, size: u32, seed: u64) -> ImageRGB8 {
    let mut r = rng(seed);
    let bg: [u8; 3] = [r.random_range(90..170), r.random_range(90..170), r.random_range(90..170)];
    let fg: [u8; 3] = match class {
        0 => [r.random_range(0..60), r.random_range(0..60), r.random_range(0..60)],
        1 => [r.random_range(30..90), r.random_range(90..200), r.random_range(200..=255)],
        _ => [r.random_range(120..200), r.random_range(70..120), r.random_range(0..50)],
    };
    let s = size as f32;
    let cx = r.random_range(0.35..0.65) * s;
    let cy = r.random_range(0.35..0.65) * s;
    let rad = r.random_range(0.18..0.3) * s;
    let period = r.random_range(4..8);
    let noise: Vec<i16> = (0..size * size).map(|_| r.random_range(-12..=12)).collect();
    ImageRGB8::from_fn(size, size, |x, y| {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        let inside = match class {
            0 => (fx - cx).powi(2) + (fy - cy).powi(2) <= rad * rad,
            1 => (fx - cx).abs() <= rad && (fy - cy).abs() <= rad,
            _ => (fx - cx).abs() <= 1.3 * rad && (fy - cy).abs() <= 1.3 * rad && (y / period) % 2 == 0,
        };
        let base = if inside { fg } else { bg };
        let n = noise[(y * size + x) as usize];
        base.map(|v| (v as i16 + n).clamp(0, 255) as u8)
    })
}

/// Gaussian clusters in `dim` dimensions, one per class, far apart.
pub fn separable_clusters(per_class: usize, classes: usize, dim: usize, seed: u64) -> (Tensor, Vec<usize>) {
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    let noise = Normal::new(0.0f32, 0.5).unwrap();
    let centers: Vec<Vec<f32>> = (0..classes)
        .map(|c| (0..dim).map(|j| if j % classes == c { 4.0 } else { 0.0 }).collect())
        .collect();
    let mut data = Vec::with_capacity(per_class * classes * dim);
    let mut labels = Vec::with_capacity(per_class * classes);
    for i in 0..per_class * classes {
        let c = i % classes;
        labels.push(c);
        data.extend(centers[c].iter().map(|m| m + noise.sample(&mut r)));
    }
    (Tensor::new([per_class * classes, dim], data).unwrap(), labels)
}

/// Summary of a randomized convolution comparison.
#[derive(Debug, Default)]
pub struct ConvSweep {
    pub configs: usize,
    pub max_abs_diff: f32,
    pub strided_padded: usize,
    pub grouped_full: usize,
    pub depthwise_checked: usize,
}

/// Compares `conv2d` (and `depthwise_conv2d` where it applies) with
/// `naive_conv` on `count` random configurations. Every fourth configuration
/// is forced to stride 2 / pad 1 and every third to `groups = C`.
pub fn conv_sweep(count: usize, seed: u64) -> ConvSweep {
    use wastesort::ops::{conv2d, depthwise_conv2d, ConvParams};
    let mut r = rng(seed);
    let mut sweep = ConvSweep::default();
    let mut i = 0;
    while sweep.configs < count {
        i += 1;
        let c = r.random_range(1..=8);
        let full_groups = i % 3 == 0;
        let groups = if full_groups { c } else { 1 };
        let out_channels = if full_groups { c * r.random_range(1..=2) } else { r.random_range(1..=8) };
        let k = (r.random_range(1..=5), r.random_range(1..=5));
        let (stride, padding) = if i % 4 == 0 {
            ((2, 2), (1, 1))
        } else {
            ((r.random_range(1..=2), r.random_range(1..=2)), (r.random_range(0..=2), r.random_range(0..=2)))
        };
        let dilation = if r.random_bool(0.2) { (2, 2) } else { (1, 1) };
        let geom = ConvGeometry { kernel: k, stride, padding, dilation };
        let (h, w) = (r.random_range(1..=12), r.random_range(1..=12));
        if geom.output_size(h, w).is_err() {
            continue;
        }
        let n = r.random_range(1..=2);
        let input = Tensor::rand_uniform([n, c, h, w], -1.0, 1.0, &mut r);
        let weights = Tensor::rand_uniform([out_channels, c / groups, k.0, k.1], -1.0, 1.0, &mut r);
        let bias: Option<Vec<f32>> = r
            .random_bool(0.5)
            .then(|| (0..out_channels).map(|_| r.random_range(-1.0..1.0)).collect());
        let params = ConvParams::new(c, out_channels, geom, groups, weights.clone(), bias.clone()).unwrap();
        let expected = naive_conv(&input, &weights, bias.as_deref(), out_channels, groups, &geom);
        let got = conv2d(&input, &params).unwrap();
        assert_eq!(got.shape(), expected.shape(), "config {params:?}");
        sweep.max_abs_diff = sweep.max_abs_diff.max(got.max_abs_diff(&expected));
        if full_groups && out_channels == c {
            let dw = depthwise_conv2d(&input, &params).unwrap();
            sweep.max_abs_diff = sweep.max_abs_diff.max(dw.max_abs_diff(&expected));
            sweep.depthwise_checked += 1;
        }
        if stride == (2, 2) && padding == (1, 1) {
            sweep.strided_padded += 1;
        }
        if full_groups && c > 1 {
            sweep.grouped_full += 1;
        }
        sweep.configs += 1;
    }
    sweep
}

/// Worst relative error, `‖a − n‖ / (‖a‖ + ‖n‖)`, between the analytic head
/// gradient and central differences over `problems` random problems.
pub fn gradient_check(problems: usize, eps: f64, seed: u64) -> f64 {
    use wastesort::head::{head_gradient, HeadWeights};
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..problems {
        let k = r.random_range(2..=5);
        let f = r.random_range(1..=12);
        let n = r.random_range(1..=16);
        let lambda = if r.random_bool(0.5) { r.random_range(0.0..0.1) } else { 0.0 };
        let x = Tensor::rand_uniform([n, f], -2.0, 2.0, &mut r);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let head = HeadWeights {
            num_classes: k,
            feature_width: f,
            weights: (0..k * f).map(|_| r.random_range(-1.0..1.0)).collect(),
            bias: (0..k).map(|_| r.random_range(-1.0..1.0)).collect(),
        };
        let g = head_gradient(&head, &x, &labels, lambda).unwrap();
        let loss = |h: &HeadWeights| head_gradient(h, &x, &labels, lambda).unwrap().loss;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for i in 0..k * f + k {
            let nudge = |delta: f64| {
                let mut h = head.clone();
                if i < k * f {
                    h.weights[i] += delta;
                } else {
                    h.bias[i - k * f] += delta;
                }
                loss(&h)
            };
            numeric.push((nudge(eps) - nudge(-eps)) / (2.0 * eps));
            analytic.push(if i < k * f { g.weights[i] } else { g.bias[i - k * f] });
        }
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / (norm(&analytic) + norm(&numeric)).max(1e-12);
        worst = worst.max(rel);
    }
    worst
}

/// AP by counting: for every positive, the fraction of positives among the
/// items ranked at or above it. Rank ties go to the earlier index.
pub fn brute_force_ap(scores: &[f32], positives: &[bool]) -> f64 {
    let above = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let total = positives.iter().filter(|&&p| p).count();
    let mut sum = 0.0;
    for i in (0..scores.len()).filter(|&i| positives[i]) {
        let ranked: Vec<usize> = (0..scores.len()).filter(|&j| above(i, j)).collect();
        let hits = ranked.iter().filter(|&&j| positives[j]).count();
        sum += hits as f64 / ranked.len() as f64;
    }
    sum / total as f64
}

/// Heap's algorithm over every ordering of `items`.
pub fn for_each_permutation<T: Clone>(items: &[T], mut f: impl FnMut(&[T])) {
    let mut a = items.to_vec();
    let n = a.len();
    let mut c = vec![0usize; n];
    f(&a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            f(&a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Checks `average_precision` against `brute_force_ap` for every permutation
/// of 8 labels (1..=7 positives) under distinct scores, and every permutation
/// of a tied score vector. Returns (cases, worst difference).
pub fn exhaustive_ap_check() -> (usize, f64) {
    use wastesort::eval::average_precision;
    let mut cases = 0;
    let mut worst = 0.0f64;
    let distinct: Vec<f32> = (0..8).map(|i| 8.0 - i as f32).collect();
    for positives in 1..8 {
        let labels: Vec<bool> = (0..8).map(|i| i < positives).collect();
        for_each_permutation(&labels, |perm| {
            let ap = average_precision(&distinct, perm).unwrap();
            worst = worst.max((ap - brute_force_ap(&distinct, perm)).abs());
            cases += 1;
        });
    }
    let tied = [0.9f32, 0.9, 0.5, 0.5, 0.5, 0.2, 0.1, 0.1];
    let labels = [true, false, true, false, false, true, false, true];
    for_each_permutation(&tied, |perm| {
        let ap = average_precision(perm, &labels).unwrap();
        worst = worst.max((ap - brute_force_ap(perm, &labels)).abs());
        cases += 1;
    });
    (cases, worst)
}

/// A distinct 2×2 PNG per `index`.
pub fn tiny_png(index: u32) -> Vec<u8> {
    wastesort::imaging::encode_png(&ImageRGB8::from_fn(2, 2, |x, y| {
        [(index & 0xff) as u8, ((index >> 8) & 0xff) as u8, ((index >> 16) as u8) ^ (x + 2 * y) as u8]
    }))
    .unwrap()
}

/// Store holding `counts` items per class (trash, recycle, compost order).
pub fn populated_store(root: &std::path::Path, counts: [usize; 3]) -> wastesort::dataset::DatasetStore {
    use wastesort::dataset::{DatasetStore, NewItem, Source};
    let store = DatasetStore::open(root).unwrap();
    let mut batch = Vec::new();
    let mut index = 0u32;
    for (label, &n) in ["trash", "recycle", "compost"].iter().zip(&counts) {
        for _ in 0..n {
            batch.push(NewItem {
                bytes: tiny_png(index),
                label: label.to_string(),
                metadata: format!("fixture {index}"),
                source: Source::Bundled,
            });
            index += 1;
        }
    }
    store.add_many(batch).unwrap();
    store
}
