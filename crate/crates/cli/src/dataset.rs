//! Event dataset discovery, manifests and embedding bundles.
//!
//! Datasets live at `<root>/<split>/<class>/<id>.{evt1,csv}`. Files placed
//! directly in `<root>/<split>/` are unlabelled. Class indices follow
//! `<root>/classes.txt` when present, else sorted class directory names.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use evadapt_core::embed::{group_by_sample, read_embeddings, EmbeddingSet};
use evadapt_core::events::{parse_stream, EventStream, StreamFormat};
use evadapt_core::linalg::Matrix;
use evadapt_core::Error as CoreError;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, read, read_string, AtPath, CliError, Result};

pub const CLASSES_FILE: &str = "classes.txt";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_FILE: &str = "image.emb1";
pub const TEXT_FILE: &str = "text.emb1";

#[derive(Debug, Clone, PartialEq)]
pub struct StreamEntry {
    pub id: String,
    pub split: String,
    pub class: Option<String>,
    pub label: Option<usize>,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub entries: Vec<StreamEntry>,
}

fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|source| CliError::Input {
        path: dir.into(),
        source,
    })?;
    let mut out = Vec::new();
    for e in rd {
        out.push(
            e.map_err(|source| CliError::Input {
                path: dir.into(),
                source,
            })?
            .path(),
        );
    }
    out.sort();
    Ok(out)
}

fn is_stream_file(p: &Path) -> bool {
    p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("evt1" | "csv"))
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn read_classes(path: &Path) -> Result<Vec<String>> {
    let classes: Vec<String> = read_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    let unique: HashSet<&String> = classes.iter().collect();
    if unique.len() != classes.len() {
        return Err(invalid(format!("{}: duplicate class names", path.display())));
    }
    Ok(classes)
}

/// Walk `root`, optionally keeping only one split.
pub fn discover(root: &Path, only_split: Option<&str>) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(invalid(format!("dataset root {} is not a directory", root.display())));
    }
    let mut found = Vec::new();
    let mut class_dirs = BTreeSet::new();
    for split_dir in sorted_children(root)?.into_iter().filter(|p| p.is_dir()) {
        let split = name(&split_dir);
        if only_split.is_some_and(|s| s != split) {
            continue;
        }
        for child in sorted_children(&split_dir)? {
            if child.is_dir() {
                let class = name(&child);
                class_dirs.insert(class.clone());
                for f in sorted_children(&child)?.into_iter().filter(|p| is_stream_file(p)) {
                    found.push((split.clone(), Some(class.clone()), f));
                }
            } else if is_stream_file(&child) {
                found.push((split.clone(), None, child));
            }
        }
    }
    let classes_path = root.join(CLASSES_FILE);
    let classes = if classes_path.is_file() {
        read_classes(&classes_path)?
    } else {
        class_dirs.into_iter().collect()
    };
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(found.len());
    for (split, class, path) in found {
        let id = stem(&path);
        if !seen.insert(id.clone()) {
            return Err(invalid(format!("duplicate sample id {id:?} ({})", path.display())));
        }
        let label = match &class {
            Some(c) => Some(
                *index
                    .get(c.as_str())
                    .ok_or_else(|| invalid(format!("class directory {c:?} is not listed in {CLASSES_FILE}")))?,
            ),
            None => None,
        };
        entries.push(StreamEntry {
            id,
            split,
            class,
            label,
            path,
        });
    }
    Ok(Dataset { classes, entries })
}

pub fn load_stream(entry: &StreamEntry) -> Result<EventStream> {
    let bytes = read(&entry.path)?;
    let stream = parse_stream(&bytes, StreamFormat::detect(&bytes)).at(&entry.path)?;
    Ok(stream.with_id(entry.id.clone()).with_label(entry.label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelRef {
    Index(usize),
    Name(String),
}

/// One JSON line per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelRef>,
    /// Number of windows `M`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub windows: Option<usize>,
    /// Events per window `N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events_per_window: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<String>,
}

pub fn manifest_text(rows: &[ManifestRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("manifest rows serialise") + "\n")
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    read_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| invalid(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub label: Option<usize>,
    pub features: Matrix,
}

/// Image and text embeddings joined with a manifest.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub classes: Vec<String>,
    pub text: Matrix,
    pub logit_scale: f64,
    /// Manifest order.
    pub samples: Vec<Sample>,
}

impl Bundle {
    pub fn labelled(&self) -> impl Iterator<Item = (&Sample, usize)> {
        self.samples.iter().filter_map(|s| s.label.map(|l| (s, l)))
    }
}

fn load_emb(path: &Path) -> Result<EmbeddingSet> {
    let file = std::fs::File::open(path).map_err(|source| CliError::Input {
        path: path.into(),
        source,
    })?;
    read_embeddings(std::io::BufReader::new(file)).at(path)
}

/// Load `image.emb1`, `text.emb1` and `manifest.jsonl` from `dir`, keeping
/// one split when asked.
pub fn load_bundle(dir: &Path, only_split: Option<&str>) -> Result<Bundle> {
    let image_path = dir.join(IMAGE_FILE);
    let images = load_emb(&image_path)?;
    let text_set = load_emb(&dir.join(TEXT_FILE))?;
    if images.dim != text_set.dim {
        return Err(invalid(format!(
            "image embeddings are {}-d, text {}-d",
            images.dim, text_set.dim
        )));
    }
    let classes = text_set.ids.clone();
    let class_index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut grouped: HashMap<String, Matrix> = group_by_sample(&images).at(&image_path)?.into_iter().collect();
    let mut samples = Vec::new();
    for row in read_manifest(&dir.join(MANIFEST_FILE))? {
        if only_split.is_some_and(|s| row.split.as_deref() != Some(s)) {
            continue;
        }
        let label = match &row.label {
            None => None,
            Some(LabelRef::Index(i)) if *i < classes.len() => Some(*i),
            Some(LabelRef::Index(i)) => {
                return Err(CoreError::LabelOutOfRange {
                    label: *i,
                    num_classes: classes.len(),
                }
                .into())
            }
            Some(LabelRef::Name(n)) => Some(
                *class_index
                    .get(n.as_str())
                    .ok_or_else(|| invalid(format!("sample {:?}: unknown class {n:?}", row.id)))?,
            ),
        };
        let features = grouped
            .remove(&row.id)
            .ok_or_else(|| CoreError::MissingEmbedding(row.id.clone()))?;
        samples.push(Sample {
            id: row.id,
            label,
            features,
        });
    }
    Ok(Bundle {
        classes,
        text: text_set.to_matrix(),
        logit_scale: f64::from(images.logit_scale),
        samples,
    })
}
