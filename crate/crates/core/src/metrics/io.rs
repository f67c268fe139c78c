use std::fmt::Write as _;
use std::path::Path;

use super::boxes::BBox;
use super::losses::ScoredBox;
use crate::{Error, Result};

/// One line of a prediction file:
/// `image_id class_id confidence cx cy w h`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub image_id: String,
    pub det: ScoredBox,
}

impl PredictionRecord {
    pub fn to_line(&self) -> String {
        let b = &self.det.bbox;
        format!(
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
            self.image_id, self.det.class_id, self.det.confidence, b.cx, b.cy, b.w, b.h
        )
    }
}

pub fn format_predictions(records: &[PredictionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}", r.to_line());
    }
    s
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    std::fs::write(path, format_predictions(records)).map_err(|e| Error::io(path, e))
}

pub fn parse_predictions(text: &str, path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let class_id: usize = f[1].parse().map_err(|_| err(format!("class id '{}' is not an integer", f[1])))?;
        let mut v = [0.0; 5];
        for (k, tok) in f[2..].iter().enumerate() {
            v[k] = tok
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("'{tok}' is not a finite number")))?;
        }
        if !(0.0..=1.0).contains(&v[0]) {
            return Err(err(format!("confidence {} outside [0, 1]", v[0])));
        }
        let bbox = BBox::new(v[1], v[2], v[3], v[4]);
        if !bbox.is_valid() {
            return Err(err("box width and height must be positive".into()));
        }
        out.push(PredictionRecord {
            image_id: f[0].to_string(),
            det: ScoredBox {
                class_id,
                confidence: v[0],
                bbox,
            },
        });
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(&text, path)
}
