use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::labels::{parse_labels, CLASS_NAMES};
use super::pairing::ImagePair;
use super::split::SplitManifest;
use crate::{Error, Result};

pub const LIST_FILES: [&str; 4] = ["rgb_train.txt", "rgb_val.txt", "ir_train.txt", "ir_val.txt"];
pub const CONFIG_FILE: &str = "dataset.yaml";

/// Paths written by [`emit_manifests`].
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestPaths {
    pub rgb_train: PathBuf,
    pub rgb_val: PathBuf,
    pub ir_train: PathBuf,
    pub ir_val: PathBuf,
    pub config: PathBuf,
}

fn absolute(p: &Path) -> Result<PathBuf> {
    match p.canonicalize() {
        Ok(c) => Ok(c),
        Err(_) => std::path::absolute(p).map_err(|e| Error::io(p, e)),
    }
}

fn write_list(path: &Path, items: impl Iterator<Item = PathBuf>) -> Result<()> {
    let mut s = String::new();
    for p in items {
        let p = absolute(&p)?;
        s.push_str(&p.to_string_lossy());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Write the four path lists and the dataset config into `out_dir`.
pub fn emit_manifests(m: &SplitManifest, out_dir: &Path) -> Result<ManifestPaths> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dir = absolute(out_dir)?;
    let paths = ManifestPaths {
        rgb_train: dir.join(LIST_FILES[0]),
        rgb_val: dir.join(LIST_FILES[1]),
        ir_train: dir.join(LIST_FILES[2]),
        ir_val: dir.join(LIST_FILES[3]),
        config: dir.join(CONFIG_FILE),
    };
    write_list(&paths.rgb_train, m.train.iter().map(|p| p.rgb_path.clone()))?;
    write_list(&paths.rgb_val, m.val.iter().map(|p| p.rgb_path.clone()))?;
    write_list(&paths.ir_train, m.train.iter().map(|p| p.ir_path.clone()))?;
    write_list(&paths.ir_val, m.val.iter().map(|p| p.ir_path.clone()))?;

    let mut cfg = String::new();
    let _ = writeln!(cfg, "path: {}", dir.display());
    let _ = writeln!(cfg, "nc: {}", CLASS_NAMES.len());
    let _ = writeln!(cfg, "names: [{}]", CLASS_NAMES.join(", "));
    let _ = writeln!(cfg, "modalities: [rgb, ir]");
    for (name, train, val) in [
        ("rgb", &paths.rgb_train, &paths.rgb_val),
        ("ir", &paths.ir_train, &paths.ir_val),
    ] {
        let _ = writeln!(cfg, "{name}:");
        let _ = writeln!(cfg, "  train: {}", train.display());
        let _ = writeln!(cfg, "  val: {}", val.display());
    }
    std::fs::write(&paths.config, cfg).map_err(|e| Error::io(&paths.config, e))?;
    Ok(paths)
}

fn read_list(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(PathBuf::from).collect())
}

/// Train/val pairs read back from a manifest directory; pair indices are
/// line numbers within each split.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
}

pub fn read_manifests(dir: &Path) -> Result<Manifest> {
    let split = |rgb: &str, ir: &str| -> Result<Vec<ImagePair>> {
        let (r, i) = (read_list(&dir.join(rgb))?, read_list(&dir.join(ir))?);
        if r.len() != i.len() {
            return Err(Error::Pipeline(format!(
                "{rgb} lists {} images but {ir} lists {}",
                r.len(),
                i.len()
            )));
        }
        Ok(r.into_iter()
            .zip(i)
            .enumerate()
            .map(|(k, (a, b))| ImagePair::new(a, b, k))
            .collect())
    };
    Ok(Manifest {
        train: split(LIST_FILES[0], LIST_FILES[2])?,
        val: split(LIST_FILES[1], LIST_FILES[3])?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum IntegrityFailure {
    /// A listed image or label file is absent.
    Missing { path: PathBuf },
    /// Line `index` of a split lacks a usable RGB/IR partner.
    Pairing {
        split: &'static str,
        index: usize,
        rgb: Option<PathBuf>,
        ir: Option<PathBuf>,
    },
    /// A label file failed to parse.
    Label { path: PathBuf, line: usize, msg: String },
    /// A list file could not be read at all.
    List { path: PathBuf, msg: String },
}

impl std::fmt::Display for IntegrityFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |p: &Option<PathBuf>| p.as_ref().map_or("<none>".to_string(), |p| p.display().to_string());
        match self {
            IntegrityFailure::Missing { path } => write!(f, "missing: {}", path.display()),
            IntegrityFailure::Pairing { split, index, rgb, ir } => {
                write!(f, "pairing: {split}[{index}] rgb={} ir={}", show(rgb), show(ir))
            }
            IntegrityFailure::Label { path, line, msg } => write!(f, "label: {}:{line}: {msg}", path.display()),
            IntegrityFailure::List { path, msg } => write!(f, "list: {}: {msg}", path.display()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IntegrityReport {
    pub files_checked: usize,
    pub files_present: usize,
    pub pairs_checked: usize,
    pub pairs_ok: usize,
    pub failures: Vec<IntegrityFailure>,
}

fn pct(num: usize, den: usize) -> String {
    if num == den {
        "100".into()
    } else {
        format!("{:.2}", 100.0 * num as f64 / den as f64)
    }
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn pairing_failures(&self) -> usize {
        self.failures
            .iter()
            .filter(|f| matches!(f, IntegrityFailure::Pairing { .. }))
            .count()
    }

    pub fn summary(&self) -> String {
        format!(
            "{}% existence, {}% pairing",
            pct(self.files_present, self.files_checked),
            pct(self.pairs_ok, self.pairs_checked)
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.summary());
        let _ = writeln!(s, "files: {}/{} present", self.files_present, self.files_checked);
        let _ = writeln!(s, "pairs: {}/{} intact", self.pairs_ok, self.pairs_checked);
        let _ = writeln!(s, "failures: {}", self.failures.len());
        for f in &self.failures {
            let _ = writeln!(s, "  {f}");
        }
        s
    }
}

/// Check every listed file, RGB/IR line alignment and label syntax. Never
/// fails; problems become report entries.
pub fn verify_integrity(dir: &Path) -> IntegrityReport {
    let mut rep = IntegrityReport::default();
    for (split, rgb_name, ir_name) in [("train", LIST_FILES[0], LIST_FILES[2]), ("val", LIST_FILES[1], LIST_FILES[3])] {
        let mut lists = Vec::new();
        for name in [rgb_name, ir_name] {
            let p = dir.join(name);
            match read_list(&p) {
                Ok(l) => lists.push(l),
                Err(e) => {
                    rep.failures.push(IntegrityFailure::List {
                        path: p,
                        msg: e.to_string(),
                    });
                    lists.push(Vec::new());
                }
            }
        }
        let n = lists[0].len().max(lists[1].len());
        for i in 0..n {
            rep.pairs_checked += 1;
            let rgb = lists[0].get(i).cloned();
            let ir = lists[1].get(i).cloned();
            let mut both = true;
            for img in [&rgb, &ir] {
                let Some(img) = img else {
                    both = false;
                    continue;
                };
                rep.files_checked += 2;
                if img.is_file() {
                    rep.files_present += 1;
                } else {
                    both = false;
                    rep.failures.push(IntegrityFailure::Missing { path: img.clone() });
                }
                let label = super::pairing::label_path_for(img);
                if label.is_file() {
                    rep.files_present += 1;
                    if let Err(e) = parse_labels(&label) {
                        let (line, msg) = match e {
                            Error::Parse { line, msg, .. } => (line, msg),
                            other => (0, other.to_string()),
                        };
                        rep.failures.push(IntegrityFailure::Label { path: label, line, msg });
                    }
                } else {
                    rep.failures.push(IntegrityFailure::Missing { path: label });
                }
            }
            if both {
                rep.pairs_ok += 1;
            } else {
                rep.failures.push(IntegrityFailure::Pairing { split, index: i, rgb, ir });
            }
        }
    }
    rep
}
