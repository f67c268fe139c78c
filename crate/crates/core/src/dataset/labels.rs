use std::path::Path;

use crate::{Error, Result};

pub const CLASS_NAMES: [&str; 2] = ["bird", "drone"];
pub const BIRD: u8 = 0;
pub const DRONE: u8 = 1;

/// One YOLO-format object: class and normalised centre/extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelRecord {
    pub class_id: u8,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl LabelRecord {
    pub fn new(class_id: u8, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { class_id, cx, cy, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn class_name(&self) -> &'static str {
        CLASS_NAMES[self.class_id as usize]
    }

    /// `class cx cy w h` with six decimals.
    pub fn to_line(&self) -> String {
        format!("{} {:.6} {:.6} {:.6} {:.6}", self.class_id, self.cx, self.cy, self.w, self.h)
    }
}

/// Parsed label file plus the number of values that had to be clamped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedLabels {
    pub records: Vec<LabelRecord>,
    pub clamped: usize,
}

/// Parse label text; `path` is only used in error messages.
pub fn parse_label_text(text: &str, path: &Path) -> Result<ParsedLabels> {
    let mut out = ParsedLabels::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class: u8 = fields[0]
            .parse()
            .map_err(|_| err(format!("class id '{}' is not an integer", fields[0])))?;
        if class as usize >= CLASS_NAMES.len() {
            return Err(err(format!("unknown class id {class} (0 bird, 1 drone)")));
        }
        let mut v = [0.0; 4];
        for (k, f) in fields[1..].iter().enumerate() {
            let x: f64 = f.parse().map_err(|_| err(format!("'{f}' is not a number")))?;
            if !x.is_finite() {
                return Err(err(format!("'{f}' is not finite")));
            }
            let c = x.clamp(0.0, 1.0);
            if c != x {
                out.clamped += 1;
            }
            v[k] = c;
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(err("box width and height must be positive".into()));
        }
        out.records.push(LabelRecord::new(class, v[0], v[1], v[2], v[3]));
    }
    Ok(out)
}

pub fn parse_labels(path: &Path) -> Result<ParsedLabels> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: "file is not UTF-8".into(),
    })?;
    parse_label_text(&text, path)
}
