#![allow(dead_code)]

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use wastesort::dataset::{DatasetStore, NewItem, Source};
use wastesort::graph::{build_mobilenet_v1, random_weights, save_model, InputSpec, ModelGraph, ModelPaths};
use wastesort::imaging::{encode_png, ImageRGB8};
use wastesort_service::api::LabelNotes;
use wastesort_service::config::load_model_dir;
use wastesort_service::{router, AppState};
use http_body_util::BodyExt;
use tower::ServiceExt;

pub const BOUNDARY: &str = "wastesort-test-boundary";

/// MobileNet with 64×64 input and seeded random weights.
pub fn small_model_dir(root: &Path, seed: u64) -> PathBuf {
    let g = build_mobilenet_v1(3, 1.0).unwrap();
    let g = ModelGraph::new(g.architecture(), InputSpec::imagenet(64, 64), g.labels().to_vec(), g.nodes().to_vec())
        .unwrap();
    let dir = root.join(format!("model-{seed}"));
    std::fs::create_dir_all(&dir).unwrap();
    let paths = ModelPaths::in_dir(&dir);
    save_model(&g, &random_weights(&g, seed), &paths.manifest, &paths.blob).unwrap();
    dir
}

pub fn fixture_png(seed: u32) -> Vec<u8> {
    encode_png(&ImageRGB8::from_fn(48, 40, |x, y| {
        [(x * 5 + seed) as u8, (y * 6 + 3 * seed) as u8, ((x ^ y) + seed) as u8]
    }))
    .unwrap()
}

pub fn fixture_jpeg(seed: u32) -> Vec<u8> {
    let img = ImageRGB8::from_fn(32, 32, |x, y| [(x * 8) as u8, (y * 8) as u8, seed as u8]);
    let mut out = Vec::new();
    image::write_buffer_with_format(
        &mut std::io::Cursor::new(&mut out),
        img.pixels(),
        32,
        32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Jpeg,
    )
    .unwrap();
    out
}

/// Distinct 2×2 PNG per index.
pub fn tiny_png(index: u32) -> Vec<u8> {
    encode_png(&ImageRGB8::from_fn(2, 2, |x, y| {
        [(index & 0xff) as u8, ((index >> 8) & 0xff) as u8, (x + 2 * y) as u8]
    }))
    .unwrap()
}

/// 396 compost, 427 recycle, 395 trash.
pub fn reference_store(root: &Path) -> DatasetStore {
    let store = DatasetStore::open(root).unwrap();
    let mut batch = Vec::new();
    let mut i = 0;
    for (label, n) in [("compost", 396), ("recycle", 427), ("trash", 395)] {
        for _ in 0..n {
            batch.push(NewItem {
                bytes: tiny_png(i),
                label: label.into(),
                metadata: String::new(),
                source: Source::Bundled,
            });
            i += 1;
        }
    }
    store.add_many(batch).unwrap();
    store
}

pub enum Part<'a> {
    File { name: &'a str, content_type: &'a str, bytes: &'a [u8] },
    Text { name: &'a str, value: &'a str },
}

pub fn multipart(parts: &[Part]) -> Vec<u8> {
    let mut body = Vec::new();
    for part in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match part {
            Part::File { name, content_type, bytes } => {
                body.extend_from_slice(
                    format!(
                        "Content-Disposition: form-data; name=\"{name}\"; filename=\"upload\"\r\nContent-Type: {content_type}\r\n\r\n"
                    )
                    .as_bytes(),
                );
                body.extend_from_slice(bytes);
            }
            Part::Text { name, value } => {
                body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}").as_bytes());
            }
        }
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub fn image_form(bytes: &[u8]) -> Vec<u8> {
    multipart(&[Part::File { name: "image", content_type: "image/png", bytes }])
}

pub fn app(model_dir: &Path, dataset: &Path, notes: LabelNotes) -> Router {
    let model = load_model_dir(model_dir, true).unwrap();
    let store = DatasetStore::open(dataset).unwrap();
    router(AppState::new(model, store, notes), &["http://localhost:5173".to_string()])
}

pub async fn send(app: &Router, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes)
        .unwrap_or_else(|_| panic!("non-JSON body ({status}): {}", String::from_utf8_lossy(&bytes)));
    (status, value)
}

pub fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

pub fn post_form(uri: &str, body: Vec<u8>) -> Request<Body> {
    Request::post(uri)
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wastesort"))
        .args(args)
        .env_remove("WASTESORT_MODEL_DIR")
        .env_remove("WASTESORT_DATASET_DIR")
        .output()
        .unwrap()
}

/// Inodes of the sockets this process holds open.
pub fn socket_inodes() -> HashSet<u64> {
    fs::read_dir("/proc/self/fd")
        .unwrap()
        .filter_map(|e| fs::read_link(e.ok()?.path()).ok())
        .filter_map(|target| {
            let t = target.to_string_lossy().into_owned();
            t.strip_prefix("socket:[")?.strip_suffix(']')?.parse().ok()
        })
        .collect()
}

/// `(local_port, remote_port, inode)` rows of a `/proc/net` table.
pub fn proc_net(table: &str) -> Vec<(u16, u16, u64)> {
    let Ok(text) = fs::read_to_string(format!("/proc/self/net/{table}")) else {
        return Vec::new();
    };
    let port = |addr: &str| u16::from_str_radix(addr.rsplit(':').next().unwrap(), 16).unwrap();
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let cols: Vec<&str> = line.split_whitespace().collect();
            Some((port(cols.get(1)?), port(cols.get(2)?), cols.get(9)?.parse().ok()?))
        })
        .collect()
}

/// Process-owned TCP sockets, and a description of every one that does not
/// involve `server_port` plus any UDP socket.
pub fn socket_violations(server_port: u16) -> (usize, Vec<String>) {
    let ours = socket_inodes();
    let mut tcp = proc_net("tcp");
    tcp.extend(proc_net("tcp6"));
    let owned: Vec<_> = tcp.into_iter().filter(|(_, _, ino)| ours.contains(ino)).collect();
    let mut bad: Vec<String> = owned
        .iter()
        .filter(|(local, remote, _)| *local != server_port && *remote != server_port)
        .map(|(local, remote, ino)| format!("tcp socket {ino} ({local} -> {remote})"))
        .collect();
    let mut udp = proc_net("udp");
    udp.extend(proc_net("udp6"));
    bad.extend(
        udp.iter()
            .filter(|(_, _, ino)| ours.contains(ino))
            .map(|(local, remote, ino)| format!("udp socket {ino} ({local} -> {remote})")),
    );
    (owned.len(), bad)
}
