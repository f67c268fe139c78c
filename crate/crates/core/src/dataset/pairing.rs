use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::labels::{parse_labels, LabelRecord};
use crate::{Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// An RGB image, its IR counterpart and both label files.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImagePair {
    pub rgb_path: PathBuf,
    pub ir_path: PathBuf,
    pub rgb_label_path: PathBuf,
    pub ir_label_path: PathBuf,
    pub pair_index: usize,
}

impl ImagePair {
    pub fn new(rgb_path: PathBuf, ir_path: PathBuf, pair_index: usize) -> Self {
        Self {
            rgb_label_path: label_path_for(&rgb_path),
            ir_label_path: label_path_for(&ir_path),
            rgb_path,
            ir_path,
            pair_index,
        }
    }
}

/// Label file for an image: `.../images/x.jpg` maps to `.../labels/x.txt`;
/// anything else to a `.txt` next to the image.
pub fn label_path_for(image: &Path) -> PathBuf {
    let stem = image.file_stem().unwrap_or_default();
    let mut name = stem.to_os_string();
    name.push(".txt");
    match image.parent() {
        Some(dir) if dir.file_name().is_some_and(|n| n == "images") => {
            dir.with_file_name("labels").join(name)
        }
        Some(dir) => dir.join(name),
        None => PathBuf::from(name),
    }
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files of a modality directory (or its `images/` child), sorted by
/// raw byte order of the file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let sub = dir.join("images");
    let root = if sub.is_dir() { sub } else { dir.to_path_buf() };
    let entries = std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(&root, e))?.path();
        if p.is_file() && is_image(&p) {
            files.push(p);
        }
    }
    files.sort_by(|a, b| a.as_os_str().as_encoded_bytes().cmp(b.as_os_str().as_encoded_bytes()));
    if files.is_empty() {
        return Err(Error::Pipeline(format!("no images found in {}", root.display())));
    }
    Ok(files)
}

/// Zip the sorted RGB and IR listings, truncating to the shorter one.
pub fn pair_modalities(rgb_dir: &Path, ir_dir: &Path) -> Result<Vec<ImagePair>> {
    let rgb = list_images(rgb_dir)?;
    let ir = list_images(ir_dir)?;
    if rgb.len() != ir.len() {
        log::warn!("{} RGB vs {} IR images; truncating to {}", rgb.len(), ir.len(), rgb.len().min(ir.len()));
    }
    Ok(rgb
        .into_iter()
        .zip(ir)
        .enumerate()
        .map(|(i, (r, t))| ImagePair::new(r, t, i))
        .collect())
}

/// Pairs with their parsed labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<ImagePair>,
    pub rgb_labels: Vec<Vec<LabelRecord>>,
    pub ir_labels: Vec<Vec<LabelRecord>>,
    /// Values clamped into `[0, 1]` while parsing.
    pub clamped: usize,
}

impl Corpus {
    /// Parse every label file (in parallel). A missing label file means an
    /// image without objects.
    pub fn load(pairs: Vec<ImagePair>) -> Result<Self> {
        let read = |p: &Path| -> Result<(Vec<LabelRecord>, usize)> {
            if p.exists() {
                let parsed = parse_labels(p)?;
                Ok((parsed.records, parsed.clamped))
            } else {
                Ok((Vec::new(), 0))
            }
        };
        let parsed: Vec<_> = pairs
            .par_iter()
            .map(|p| Ok((read(&p.rgb_label_path)?, read(&p.ir_label_path)?)))
            .collect::<Result<_>>()?;
        let mut c = Corpus {
            pairs,
            rgb_labels: Vec::new(),
            ir_labels: Vec::new(),
            clamped: 0,
        };
        for ((r, rc), (i, ic)) in parsed {
            c.rgb_labels.push(r);
            c.ir_labels.push(i);
            c.clamped += rc + ic;
        }
        if c.clamped > 0 {
            log::warn!("{} label values clamped into [0, 1]", c.clamped);
        }
        Ok(c)
    }

    /// Every record of both modalities.
    pub fn all_records(&self) -> Vec<LabelRecord> {
        self.rgb_labels.iter().chain(&self.ir_labels).flatten().copied().collect()
    }

    /// Records of pair `i`, both modalities.
    pub fn pair_records(&self, i: usize) -> impl Iterator<Item = &LabelRecord> {
        self.rgb_labels[i].iter().chain(&self.ir_labels[i])
    }
}
