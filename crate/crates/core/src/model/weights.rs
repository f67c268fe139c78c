//! Binary weight file.
//!
//! Layout (all integers little-endian): magic `EGDW`, `u32` version,
//! `u32` tensor count, then per tensor a `u16` name length, the UTF-8 name,
//! a `u8` rank, `rank` `u32` extents and the row-major `f32` values.

use std::collections::HashMap;
use std::path::Path;

use super::graph::LayerGraph;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EGDW";
pub const VERSION: u32 = 1;

/// Serialise every tensor of `graph` in visiting order.
pub fn weights_to_bytes(graph: &LayerGraph) -> Result<Vec<u8>> {
    let params = graph.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in &params {
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let dims = p.dims();
        out.push(u8::try_from(dims.len()).map_err(|_| Error::Format(format!("rank too large: {name}")))?);
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor().data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_weights(graph: &LayerGraph, path: &Path) -> Result<()> {
    let bytes = weights_to_bytes(graph)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parsed tensors keyed by name, in file order.
pub fn parse_weights(bytes: &[u8]) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not an EGDW weight file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&format!("extents of {name}"))? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4, &format!("values of {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((name, dims, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    Ok(out)
}

/// Replace every tensor of `graph` from `bytes`. Nothing is modified unless
/// the whole file parses and matches the graph's names and shapes exactly.
pub fn load_weights_from_bytes(graph: &mut LayerGraph, bytes: &[u8]) -> Result<()> {
    let parsed = parse_weights(bytes)?;
    let mut by_name: HashMap<&str, (&Vec<usize>, &Vec<f64>)> = HashMap::with_capacity(parsed.len());
    for (name, dims, data) in &parsed {
        if by_name.insert(name.as_str(), (dims, data)).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    let expected = graph.named_params();
    for (name, p) in &expected {
        match by_name.get(name.as_str()) {
            None => return Err(Error::Format(format!("missing tensor {name}"))),
            Some((dims, _)) if dims.as_slice() != p.dims() => {
                return Err(Error::Format(format!(
                    "shape mismatch for {name}: file {:?}, graph {:?}",
                    dims,
                    p.dims()
                )))
            }
            Some(_) => {}
        }
    }
    if parsed.len() != expected.len() {
        let known: std::collections::HashSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
        let extra = parsed
            .iter()
            .find(|(n, _, _)| !known.contains(n.as_str()))
            .map(|(n, _, _)| n.clone())
            .unwrap_or_default();
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    let mut failure = None;
    graph.visit_mut(&mut |name, p| {
        let (_, data) = by_name[name];
        if let Err(e) = p.set_data(data.clone()) {
            failure.get_or_insert(e);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn load_weights(graph: &mut LayerGraph, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_weights_from_bytes(graph, &bytes)
}
