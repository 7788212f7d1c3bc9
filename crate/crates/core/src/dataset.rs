//! Annotated image corpus on disk.
//!
//! Layout under the store root:
//!
//! ```text
//! manifest.json
//! images/ab/abcdef....png
//! ```
//!
//! Images are content-addressed by the SHA-256 of their bytes. The manifest
//! is rewritten through a temp file and a rename, so readers of the file
//! never see a half-written document. Inside the process, writers are
//! serialized and readers work on immutable snapshots.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::category::WasteCategory;
use crate::error::{Error, Result};
use crate::imaging::{decode, ImageFormat, ImageRGB8};

pub const DATASET_MAGIC: &str = "DWDATA";
pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_SPLIT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Bundled,
    UserContributed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

macro_rules! str_enum {
    ($ty:ident, $what:literal, $($variant:ident => $s:literal),+) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $s),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$variant),)+
                    _ => Err(Error::InvalidArgument(format!(
                        concat!("unknown ", $what, " {:?}; expected one of: {}"),
                        s,
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

str_enum!(Source, "source", Bundled => "bundled", UserContributed => "user_contributed");
str_enum!(Split, "split", Train => "train", Val => "val", Test => "test", Unassigned => "unassigned");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    /// Hex SHA-256 of the image bytes.
    pub id: String,
    /// Image path relative to the store root.
    pub image: String,
    pub label: WasteCategory,
    #[serde(default)]
    pub metadata: String,
    pub source: Source,
    pub split: Split,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub magic: String,
    pub format_version: u32,
    pub labels: Vec<String>,
    /// Seed and ratios of the last split assignment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_ratios: Option<(f64, f64, f64)>,
    pub items: Vec<DatasetItem>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            magic: DATASET_MAGIC.into(),
            format_version: DATASET_FORMAT_VERSION,
            labels: WasteCategory::ALL.iter().map(|c| c.as_str().to_string()).collect(),
            split_seed: None,
            split_ratios: None,
            items: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Count per label, in label order.
    pub counts: Vec<(String, usize)>,
    pub by_split: BTreeMap<String, usize>,
    pub total: usize,
}

impl DatasetStats {
    pub fn count(&self, label: &str) -> usize {
        self.counts.iter().find(|(l, _)| l == label).map_or(0, |(_, n)| *n)
    }
}

/// Conjunctive filter for `list_items`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemFilter {
    pub label: Option<WasteCategory>,
    pub split: Option<Split>,
    pub source: Option<Source>,
}

impl ItemFilter {
    /// Builds a filter from `key=value` pairs (query strings, CLI flags).
    /// Empty values are ignored; unknown keys are errors.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut f = ItemFilter::default();
        for (key, value) in pairs {
            if value.is_empty() {
                continue;
            }
            match key {
                "label" => f.label = Some(value.parse()?),
                "split" => f.split = Some(value.parse()?),
                "source" => f.source = Some(value.parse()?),
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown filter key {other:?}; expected label, split or source"
                    )))
                }
            }
        }
        Ok(f)
    }

    pub fn matches(&self, item: &DatasetItem) -> bool {
        self.label.is_none_or(|l| l == item.label)
            && self.split.is_none_or(|s| s == item.split)
            && self.source.is_none_or(|s| s == item.source)
    }
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.magic != DATASET_MAGIC {
            return Err(Error::Format(format!(
                "dataset manifest magic is {:?}, expected {DATASET_MAGIC:?}",
                self.magic
            )));
        }
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format_version {}",
                self.format_version
            )));
        }
        let expected: Vec<&str> = WasteCategory::ALL.iter().map(|c| c.as_str()).collect();
        if self.labels != expected {
            return Err(Error::Format(format!(
                "dataset labels {:?} differ from {:?}",
                self.labels, expected
            )));
        }
        let mut seen = HashSet::new();
        for item in &self.items {
            if !seen.insert(item.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate item id {}", item.id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn stats(&self) -> DatasetStats {
        let mut counts: Vec<(String, usize)> =
            WasteCategory::ALL.iter().map(|c| (c.as_str().to_string(), 0)).collect();
        let mut by_split = BTreeMap::new();
        for item in &self.items {
            counts[item.label.index()].1 += 1;
            *by_split.entry(item.split.as_str().to_string()).or_insert(0) += 1;
        }
        DatasetStats {
            counts,
            by_split,
            total: self.items.len(),
        }
    }

    /// Matching items ordered by creation time, then id.
    pub fn list_items(&self, filter: &ItemFilter) -> Vec<DatasetItem> {
        let mut out: Vec<DatasetItem> =
            self.items.iter().filter(|i| filter.matches(i)).cloned().collect();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        out
    }

    /// Stratified split: within each class, items are sorted by id, shuffled
    /// with the seed, and cut by the ratios using largest-remainder rounding.
    pub fn assign_splits(&self, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetManifest> {
        let r = [ratios.0, ratios.1, ratios.2];
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split ratios must be non-negative and sum to 1, got {ratios:?}"
            )));
        }
        let parts = r.iter().filter(|&&v| v > 0.0).count();
        let mut out = self.clone();
        let splits = [Split::Train, Split::Val, Split::Test];
        for class in WasteCategory::ALL {
            let mut members: Vec<usize> = (0..out.items.len())
                .filter(|&i| out.items[i].label == class)
                .collect();
            if members.len() < parts {
                return Err(Error::Dataset(format!(
                    "class {class} has {} items, fewer than the {parts} split parts",
                    members.len()
                )));
            }
            members.sort_by(|&a, &b| out.items[a].id.cmp(&out.items[b].id));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(class.index() as u64);
            members.shuffle(&mut rng);
            let sizes = largest_remainder(members.len(), &r);
            let mut cursor = 0;
            for (split, size) in splits.iter().zip(sizes) {
                for &i in &members[cursor..cursor + size] {
                    out.items[i].split = *split;
                }
                cursor += size;
            }
        }
        out.split_seed = Some(seed);
        out.split_ratios = Some(ratios);
        Ok(out)
    }
}

/// Splits `n` into parts proportional to `ratios`; leftover units go to the
/// largest fractional parts, ties to the earlier part.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa)
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

/// Hex SHA-256 content id.
pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Input for `DatasetStore::add_many`.
#[derive(Clone, Debug)]
pub struct NewItem {
    pub bytes: Vec<u8>,
    pub label: String,
    pub metadata: String,
    pub source: Source,
}

pub struct DatasetStore {
    root: PathBuf,
    snapshot: RwLock<Arc<DatasetManifest>>,
    writer: Mutex<()>,
}

impl fmt::Debug for DatasetStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DatasetStore").field("root", &self.root).finish()
    }
}

impl DatasetStore {
    /// Opens the store at `root`, creating an empty one if there is no
    /// manifest yet.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let path = root.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let m: DatasetManifest = serde_json::from_str(&text)?;
            m.validate()?;
            m
        } else {
            let m = DatasetManifest::default();
            write_manifest(&root, &m)?;
            m
        };
        Ok(DatasetStore {
            root,
            snapshot: RwLock::new(Arc::new(manifest)),
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Consistent view of the manifest; later writes do not affect it.
    pub fn snapshot(&self) -> Arc<DatasetManifest> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn get(&self, id: &str) -> Option<DatasetItem> {
        self.snapshot().get(id).cloned()
    }

    pub fn stats(&self) -> DatasetStats {
        self.snapshot().stats()
    }

    pub fn list_items(&self, filter: &ItemFilter) -> Vec<DatasetItem> {
        self.snapshot().list_items(filter)
    }

    pub fn image_path(&self, item: &DatasetItem) -> PathBuf {
        self.root.join(&item.image)
    }

    pub fn read_image_bytes(&self, item: &DatasetItem) -> Result<Vec<u8>> {
        let path = self.image_path(item);
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn read_image(&self, item: &DatasetItem) -> Result<ImageRGB8> {
        let bytes = self.read_image_bytes(item)?;
        crate::imaging::decode_any(&bytes)
    }

    /// Adds one image. Re-adding identical bytes with the same label
    /// returns the existing record.
    pub fn add_item(
        &self,
        bytes: &[u8],
        label: &str,
        metadata: &str,
        source: Source,
    ) -> Result<DatasetItem> {
        let mut out = self.add_many(vec![NewItem {
            bytes: bytes.to_vec(),
            label: label.to_string(),
            metadata: metadata.to_string(),
            source,
        }])?;
        Ok(out.remove(0))
    }

    /// Adds several images with a single manifest write. Nothing is
    /// committed if any item is rejected.
    pub fn add_many(&self, items: Vec<NewItem>) -> Result<Vec<DatasetItem>> {
        let mut prepared = Vec::with_capacity(items.len());
        for item in items {
            let label: WasteCategory = item.label.parse()?;
            let format = ImageFormat::sniff(&item.bytes)
                .ok_or_else(|| Error::Decode("not a PNG or JPEG stream".into()))?;
            decode(&item.bytes, format)?;
            prepared.push((content_id(&item.bytes), label, format, item));
        }

        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut manifest = (*self.snapshot()).clone();
        let mut index: HashMap<String, usize> = manifest
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.id.clone(), i))
            .collect();
        let mut result = Vec::with_capacity(prepared.len());
        let mut changed = false;
        for (id, label, format, item) in prepared {
            if let Some(&i) = index.get(&id) {
                let existing = &manifest.items[i];
                if existing.label != label {
                    return Err(Error::Dataset(format!(
                        "image {id} is already labeled {}",
                        existing.label
                    )));
                }
                result.push(existing.clone());
                continue;
            }
            let rel = format!("images/{}/{}.{}", &id[..2], id, format.extension());
            self.write_image(&rel, &item.bytes)?;
            let record = DatasetItem {
                id: id.clone(),
                image: rel,
                label,
                metadata: item.metadata,
                source: item.source,
                split: Split::Unassigned,
                created_at: Utc::now(),
            };
            index.insert(id, manifest.items.len());
            manifest.items.push(record.clone());
            result.push(record);
            changed = true;
        }
        if changed {
            self.commit(manifest)?;
        }
        Ok(result)
    }

    /// Re-assigns every item's split and persists the result.
    pub fn assign_splits(&self, ratios: (f64, f64, f64), seed: u64) -> Result<Arc<DatasetManifest>> {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let next = self.snapshot().assign_splits(ratios, seed)?;
        self.commit(next)?;
        Ok(self.snapshot())
    }

    /// Writes a tar archive holding `manifest.json` and every image.
    pub fn export(&self, archive: impl AsRef<Path>) -> Result<()> {
        let archive = archive.as_ref();
        let manifest = self.snapshot();
        let file = fs::File::create(archive).map_err(|e| Error::io(archive, e))?;
        let mut tar = tar::Builder::new(file);
        let io = |e| Error::io(archive, e);
        let json = serde_json::to_vec_pretty(&*manifest)?;
        append_bytes(&mut tar, MANIFEST_FILE, &json).map_err(io)?;
        for item in &manifest.items {
            let bytes = self.read_image_bytes(item)?;
            append_bytes(&mut tar, &item.image, &bytes).map_err(io)?;
        }
        tar.into_inner().and_then(|mut f| f.flush()).map_err(io)?;
        Ok(())
    }

    /// Merges an exported archive. Items whose id is already present are
    /// skipped; image bytes are checked against their ids. Returns the
    /// number of new items.
    pub fn import(&self, archive: impl AsRef<Path>) -> Result<usize> {
        let archive = archive.as_ref();
        let io = |e| Error::io(archive, e);
        let file = fs::File::open(archive).map_err(io)?;
        let mut tar = tar::Archive::new(file);
        let mut files: HashMap<String, Vec<u8>> = HashMap::new();
        for entry in tar.entries().map_err(io)? {
            let mut entry = entry.map_err(io)?;
            let name = entry.path().map_err(io)?.to_string_lossy().into_owned();
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf).map_err(io)?;
            files.insert(name, buf);
        }
        let json = files
            .get(MANIFEST_FILE)
            .ok_or_else(|| Error::Format(format!("{} has no {MANIFEST_FILE}", archive.display())))?;
        let incoming: DatasetManifest = serde_json::from_slice(json)?;
        incoming.validate()?;

        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut manifest = (*self.snapshot()).clone();
        let known: HashSet<String> = manifest.items.iter().map(|i| i.id.clone()).collect();
        let mut added = 0;
        for item in incoming.items {
            if known.contains(&item.id) {
                continue;
            }
            let bytes = files.get(&item.image).ok_or_else(|| {
                Error::Dataset(format!("archive is missing {} for item {}", item.image, item.id))
            })?;
            if content_id(bytes) != item.id {
                return Err(Error::Dataset(format!("image bytes do not hash to id {}", item.id)));
            }
            if !is_safe_relative(&item.image) {
                return Err(Error::Dataset(format!("unsafe image path {:?}", item.image)));
            }
            self.write_image(&item.image, bytes)?;
            manifest.items.push(item);
            added += 1;
        }
        if added > 0 {
            self.commit(manifest)?;
        }
        Ok(added)
    }

    fn write_image(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if path.exists() {
            return Ok(());
        }
        let dir = path.parent().expect("image paths have a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        atomic_write(dir, &path, bytes)
    }

    fn commit(&self, manifest: DatasetManifest) -> Result<()> {
        write_manifest(&self.root, &manifest)?;
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(manifest);
        Ok(())
    }
}

fn is_safe_relative(p: &str) -> bool {
    Path::new(p)
        .components()
        .all(|c| matches!(c, std::path::Component::Normal(_)))
}

fn append_bytes<W: Write>(tar: &mut tar::Builder<W>, name: &str, bytes: &[u8]) -> std::io::Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_cksum();
    tar.append_data(&mut header, name, bytes)
}

fn atomic_write(dir: &Path, path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest)?;
    atomic_write(root, &root.join(MANIFEST_FILE), &json)
}
