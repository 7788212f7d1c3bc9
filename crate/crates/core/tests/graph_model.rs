mod common;

use std::fs;

use common::rng;
use wastesort::graph::{
    build_mobilenet_v1, build_resnet50, forward, load_model, load_parts, random_weights, save_model,
    Architecture, GraphBuilder, InputSpec, Model, ModelGraph, ModelManifest, ModelPaths, OpKind,
    Weights,
};
use wastesort::ops::PoolMode;
use wastesort::tensor::ConvGeometry;
use wastesort::{Error, Tensor};

/// Same topology, smaller input, so tests run quickly.
fn rehome(g: &ModelGraph, side: usize) -> ModelGraph {
    ModelGraph::new(
        Architecture::Custom,
        InputSpec::imagenet(side, side),
        g.labels().to_vec(),
        g.nodes().to_vec(),
    )
    .unwrap()
}

fn resnet50_params_by_hand(classes: usize) -> usize {
    let bn = |c: usize| 2 * c;
    let mut total = 3 * 64 * 49 + bn(64);
    let mut cin = 64;
    for (blocks, width) in [(3, 64), (4, 128), (6, 256), (3, 512)] {
        for b in 0..blocks {
            total += cin * width + bn(width);
            total += width * width * 9 + bn(width);
            total += width * 4 * width + bn(4 * width);
            if b == 0 {
                total += cin * 4 * width + bn(4 * width);
            }
            cin = 4 * width;
        }
    }
    total + 2048 * classes + classes
}

fn mobilenet_params_by_hand(classes: usize) -> usize {
    let mut total = 3 * 32 * 9 + 2 * 32;
    let mut c = 32;
    let widths = [64, 128, 128, 256, 256, 512, 512, 512, 512, 512, 512, 1024, 1024];
    for out in widths {
        total += c * 9 + 2 * c;
        total += c * out + 2 * out;
        c = out;
    }
    total + 1024 * classes + classes
}

#[test]
fn parameter_counts_match_enumeration() {
    let r = build_resnet50(3).unwrap();
    assert_eq!(r.parameter_count(), resnet50_params_by_hand(3));
    assert_eq!(r.parameter_count(), 23_514_179);
    assert_eq!(ModelManifest::describe(&r).parameter_count(), r.parameter_count());
    let m = build_mobilenet_v1(3, 1.0).unwrap();
    assert_eq!(m.parameter_count(), mobilenet_params_by_hand(3));
    assert_eq!(build_resnet50(1000).unwrap().parameter_count(), 25_557_032);
}

#[test]
fn architecture_shape_audit() {
    let r = build_resnet50(3).unwrap();
    assert_eq!(r.count_op(|op| matches!(op, OpKind::Conv { .. })), 53);
    assert_eq!(r.count_op(|op| matches!(op, OpKind::Add)), 16);
    assert_eq!(r.feature_width(), 2048);
    let shapes = r.infer_shapes(1).unwrap();
    assert_eq!(shapes[r.output()], vec![1, 3]);
    let m = build_mobilenet_v1(3, 1.0).unwrap();
    assert_eq!(m.count_op(|op| matches!(op, OpKind::DepthwiseConv { .. })), 13);
    assert_eq!(m.feature_width(), 1024);
    assert!(build_mobilenet_v1(3, 0.5).is_err());
    assert!(build_resnet50(1).is_err());
}

/// input 1×1×2×2 → 1×1 conv (2 channels) → ReLU → GAP → fc → softmax
fn toy_model() -> Model {
    let mut b = GraphBuilder::new();
    let x = b.input();
    let c = b.push(
        "conv",
        OpKind::Conv {
            in_channels: 1,
            out_channels: 2,
            geometry: ConvGeometry::new(1, 1, 0),
            groups: 1,
            bias: true,
        },
        vec![x],
    );
    let r = b.relu("relu", c);
    b.head(r, 2, 2);
    let spec = InputSpec {
        height: 2,
        width: 2,
        channels: 1,
        mean: vec![0.0],
        std: vec![1.0],
    };
    let g = b.finish(Architecture::Custom, spec, vec!["a".into(), "b".into()]).unwrap();
    let mut w = Weights::new();
    w.insert("conv.weight", Tensor::new([2, 1, 1, 1], vec![1.0, -1.0]).unwrap());
    w.insert("conv.bias", Tensor::new([2], vec![0.0, 0.5]).unwrap());
    w.insert("fc.weight", Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
    w.insert("fc.bias", Tensor::new([2], vec![0.0, 0.0]).unwrap());
    Model::from_parts(g, &w, false).unwrap()
}

#[test]
fn toy_graph_by_hand() {
    let m = toy_model();
    let x = Tensor::new([1, 1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
    // relu(ch0) = [1 0 3 4] → 2; relu(-x + 0.5) = [0 2.5 0 0] → 0.625
    let f = m.features_batch(&x).unwrap();
    assert_eq!(f.data(), &[2.0, 0.625]);
    // logits [2, 1.25]
    let p = forward(&m, &x).unwrap();
    let p0 = 1.0 / (1.0 + (-0.75f64).exp());
    assert!((p.confidences[0] as f64 - p0).abs() < 1e-6);
    assert!((p.confidences[1] as f64 - (1.0 - p0)).abs() < 1e-6);
    assert_eq!(p.label, "a");
    assert!(p.latency_ms >= 0.0);
}

#[test]
fn forward_contract_on_resnet() {
    let g = rehome(&build_resnet50(3).unwrap(), 64);
    let w = random_weights(&g, 1);
    let m = Model::from_parts(g, &w, false).unwrap();
    let x = Tensor::randn([1, 3, 64, 64], 1.0, &mut rng(2));
    let p = forward(&m, &x).unwrap();
    assert_eq!(p.labels, ["trash", "recycle", "compost"]);
    let total: f64 = p.confidences.iter().map(|&v| v as f64).sum();
    assert!((total - 1.0).abs() < 1e-5);
    assert!(p.confidences.iter().all(|&v| v > 0.0));
    assert_eq!(m.features_batch(&x).unwrap().shape(), &[1, 2048]);
    // identical input twice → identical output
    assert_eq!(forward(&m, &x).unwrap().confidences, p.confidences);

    let wrong = Tensor::zeros([1, 3, 32, 32]);
    assert!(matches!(forward(&m, &wrong), Err(Error::Shape(_))));
    assert!(forward(&m, &Tensor::zeros([2, 3, 64, 64])).is_err());
}

#[test]
fn batched_rows_equal_single_images() {
    let g = rehome(&build_mobilenet_v1(3, 1.0).unwrap(), 64);
    let w = random_weights(&g, 4);
    let m = Model::from_parts(g, &w, true).unwrap();
    let mut r = rng(5);
    let items: Vec<Tensor> = (0..3).map(|_| Tensor::randn([1, 3, 64, 64], 1.0, &mut r)).collect();
    let batch = m.predict_batch(&Tensor::stack_batch(&items).unwrap()).unwrap();
    for (i, x) in items.iter().enumerate() {
        let single = m.predict_batch(x).unwrap();
        assert!(batch.batch_item(i).unwrap().reshape([1, 3]).unwrap().max_abs_diff(&single) < 1e-6);
    }
}

#[test]
fn folding_preserves_outputs() {
    for g in [
        rehome(&build_resnet50(3).unwrap(), 64),
        rehome(&build_mobilenet_v1(3, 1.0).unwrap(), 64),
    ] {
        let w = random_weights(&g, 8);
        let plain = Model::from_parts(g.clone(), &w, false).unwrap();
        let folded = Model::from_parts(g, &w, true).unwrap();
        assert!(folded.is_bn_folded());
        assert_eq!(folded.graph().count_op(|op| matches!(op, OpKind::BatchNorm { .. })), 0);
        assert_eq!(plain.id(), folded.id());
        let mut r = rng(9);
        for _ in 0..3 {
            let x = Tensor::randn([1, 3, 64, 64], 1.0, &mut r);
            let a = plain.predict_batch(&x).unwrap();
            let b = folded.predict_batch(&x).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-5, "{}", a.max_abs_diff(&b));
            let fa = plain.features_batch(&x).unwrap();
            let fb = folded.features_batch(&x).unwrap();
            let scale = fa.data().iter().fold(1.0f32, |m, v| m.max(v.abs()));
            assert!(fa.max_abs_diff(&fb) <= 1e-5 * scale);
        }
    }
}

#[test]
fn save_load_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let paths = ModelPaths::in_dir(dir.path());
    let g = build_mobilenet_v1(3, 1.0).unwrap();
    let w = random_weights(&g, 3);
    save_model(&g, &w, &paths.manifest, &paths.blob).unwrap();
    let file = load_parts(&paths.manifest, &paths.blob).unwrap();
    assert_eq!(file.graph, g);
    assert_eq!(file.weights, w);

    // offsets are gap-free, sized by shape, and cover the blob exactly
    let mut expected = 0;
    for t in &file.manifest.tensors {
        assert_eq!(t.offset, expected, "{}", t.name);
        assert_eq!(t.length, 4 * t.shape.iter().product::<usize>() as u64);
        expected += t.length;
    }
    assert_eq!(fs::metadata(&paths.blob).unwrap().len(), expected);

    let a = load_model(&paths.manifest, &paths.blob, false).unwrap();
    let b = Model::from_parts(g, &w, false).unwrap();
    assert_eq!(a.id(), b.id());
}

#[test]
fn custom_graph_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let paths = ModelPaths::in_dir(dir.path());
    let m = toy_model();
    let mut w = Weights::new();
    w.insert("conv.weight", Tensor::new([2, 1, 1, 1], vec![1.0, -1.0]).unwrap());
    w.insert("conv.bias", Tensor::new([2], vec![0.0, 0.5]).unwrap());
    w.insert("fc.weight", Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap());
    w.insert("fc.bias", Tensor::new([2], vec![0.0, 0.0]).unwrap());
    save_model(m.graph(), &w, &paths.manifest, &paths.blob).unwrap();
    let back = load_model(&paths.manifest, &paths.blob, false).unwrap();
    assert_eq!(back.graph(), m.graph());
    assert_eq!(back.id(), m.id());
}

fn saved_toy() -> (tempfile::TempDir, ModelPaths) {
    let dir = tempfile::tempdir().unwrap();
    let paths = ModelPaths::in_dir(dir.path());
    let g = build_mobilenet_v1(3, 1.0).unwrap();
    save_model(&g, &random_weights(&g, 0), &paths.manifest, &paths.blob).unwrap();
    (dir, paths)
}

#[test]
fn truncated_blob_is_rejected() {
    let (_dir, paths) = saved_toy();
    let blob = fs::read(&paths.blob).unwrap();
    fs::write(&paths.blob, &blob[..blob.len() - 1]).unwrap();
    match load_parts(&paths.manifest, &paths.blob) {
        Err(Error::Truncated { needed, found }) => assert_eq!(needed, found + 1),
        other => panic!("expected truncation error, got {other:?}"),
    }
}

fn edit_manifest(paths: &ModelPaths, f: impl FnOnce(&mut serde_json::Value)) {
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&paths.manifest).unwrap()).unwrap();
    f(&mut v);
    fs::write(&paths.manifest, serde_json::to_vec(&v).unwrap()).unwrap();
}

#[test]
fn bad_magic_and_version_are_format_errors() {
    let (_dir, paths) = saved_toy();
    edit_manifest(&paths, |v| v["magic"] = "NOTMODEL".into());
    assert!(matches!(load_parts(&paths.manifest, &paths.blob), Err(Error::Format(_))));
    let (_dir, paths) = saved_toy();
    edit_manifest(&paths, |v| v["format_version"] = 99.into());
    assert!(matches!(load_parts(&paths.manifest, &paths.blob), Err(Error::Format(_))));
}

#[test]
fn tensor_table_problems_name_the_tensor() {
    let (_dir, paths) = saved_toy();
    edit_manifest(&paths, |v| {
        let t = v["tensors"].as_array_mut().unwrap();
        t.retain(|e| e["name"] != "fc.bias");
    });
    match load_parts(&paths.manifest, &paths.blob) {
        Err(Error::Validation { tensor, .. }) => assert_eq!(tensor, "fc.bias"),
        other => panic!("{other:?}"),
    }

    let (_dir, paths) = saved_toy();
    edit_manifest(&paths, |v| {
        for e in v["tensors"].as_array_mut().unwrap() {
            if e["name"] == "conv1.weight" {
                e["shape"] = serde_json::json!([32, 3, 3, 2]);
            }
        }
    });
    match load_parts(&paths.manifest, &paths.blob) {
        Err(Error::Validation { tensor, .. }) => assert_eq!(tensor, "conv1.weight"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_weights_name_the_node() {
    let g = build_mobilenet_v1(3, 1.0).unwrap();
    let mut w = random_weights(&g, 0);
    let mut pruned = Weights::new();
    for name in w.names().filter(|n| *n != "blocks.3.pw.weight").map(String::from).collect::<Vec<_>>() {
        pruned.insert(name.clone(), w.get(&name).unwrap().clone());
    }
    w = pruned;
    match Model::from_parts(g, &w, false) {
        Err(Error::MissingTensor { node, tensor }) => {
            assert_eq!(node, "blocks.3.pw");
            assert_eq!(tensor, "blocks.3.pw.weight");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn pooling_graph_nodes_serialize_with_tags() {
    let op = OpKind::Pool {
        mode: PoolMode::Max,
        geometry: ConvGeometry::new(3, 2, 1),
    };
    let v = serde_json::to_value(&op).unwrap();
    assert_eq!(v["op"], "pool");
    assert_eq!(v["mode"], "max");
    let back: OpKind = serde_json::from_value(v).unwrap();
    assert_eq!(back, op);
}
