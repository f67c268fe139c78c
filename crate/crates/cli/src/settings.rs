use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Context;
use toml::{Table, Value};

/// Error that maps to exit code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

pub const STANZA_FILE: &str = "run_config.toml";

/// Optional TOML config file: a top-level table with one section per
/// subcommand.
#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    pub table: Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let table: Table = text
            .parse()
            .map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?;
        Ok(Self { table })
    }

    pub fn threads(&self) -> anyhow::Result<Option<usize>> {
        match self.table.get("threads") {
            None => Ok(None),
            Some(Value::Integer(n)) if *n > 0 => Ok(Some(*n as usize)),
            Some(v) => Err(usage(format!("config: threads must be a positive integer, got {v}"))),
        }
    }

    pub fn section(&self, name: &'static str) -> anyhow::Result<Resolver> {
        let section = match self.table.get(name) {
            None => Table::new(),
            Some(Value::Table(t)) => t.clone(),
            Some(_) => return Err(usage(format!("config: [{name}] must be a table"))),
        };
        Ok(Resolver {
            command: name,
            section,
            used: BTreeSet::new(),
            resolved: Table::new(),
        })
    }
}

/// Resolves each setting as flag, then config file, then default, and
/// records the outcome for the reproducibility stanza.
#[derive(Debug)]
pub struct Resolver {
    command: &'static str,
    section: Table,
    used: BTreeSet<String>,
    resolved: Table,
}

impl Resolver {
    fn lookup(&mut self, key: &str) -> Option<Value> {
        self.used.insert(key.to_string());
        self.section.get(key).cloned()
    }

    fn bad(&self, key: &str, want: &str, v: &Value) -> anyhow::Error {
        usage(format!("config [{}]: {key} must be {want}, got {v}", self.command))
    }

    pub fn f64(&mut self, key: &str, flag: Option<f64>, default: f64) -> anyhow::Result<f64> {
        let v = match (flag, self.lookup(key)) {
            (Some(v), _) => v,
            (None, Some(Value::Float(f))) => f,
            (None, Some(Value::Integer(i))) => i as f64,
            (None, Some(v)) => return Err(self.bad(key, "a number", &v)),
            (None, None) => default,
        };
        self.resolved.insert(key.into(), Value::Float(v));
        Ok(v)
    }

    pub fn usize(&mut self, key: &str, flag: Option<usize>, default: usize) -> anyhow::Result<usize> {
        let v = match (flag, self.lookup(key)) {
            (Some(v), _) => v,
            (None, Some(Value::Integer(i))) if i >= 0 => i as usize,
            (None, Some(v)) => return Err(self.bad(key, "a non-negative integer", &v)),
            (None, None) => default,
        };
        self.resolved.insert(key.into(), Value::Integer(v as i64));
        Ok(v)
    }

    pub fn u64(&mut self, key: &str, flag: Option<u64>, default: u64) -> anyhow::Result<u64> {
        let v = self.usize(key, flag.map(|v| v as usize), default as usize)?;
        Ok(v as u64)
    }

    pub fn string(&mut self, key: &str, flag: Option<String>, default: &str) -> anyhow::Result<String> {
        let v = match (flag, self.lookup(key)) {
            (Some(v), _) => v,
            (None, Some(Value::String(s))) => s,
            (None, Some(v)) => return Err(self.bad(key, "a string", &v)),
            (None, None) => default.to_string(),
        };
        self.resolved.insert(key.into(), Value::String(v.clone()));
        Ok(v)
    }

    pub fn opt_path(&mut self, key: &str, flag: Option<PathBuf>) -> anyhow::Result<Option<PathBuf>> {
        let v = match (flag, self.lookup(key)) {
            (Some(v), _) => Some(v),
            (None, Some(Value::String(s))) => Some(PathBuf::from(s)),
            (None, Some(v)) => return Err(self.bad(key, "a path string", &v)),
            (None, None) => None,
        };
        if let Some(p) = &v {
            self.resolved.insert(key.into(), Value::String(p.display().to_string()));
        }
        Ok(v)
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> anyhow::Result<PathBuf> {
        self.opt_path(key, flag)?
            .ok_or_else(|| usage(format!("{}: --{} is required", self.command, key.replace('_', "-"))))
    }

    pub fn paths(&mut self, key: &str, flag: Vec<PathBuf>) -> anyhow::Result<Vec<PathBuf>> {
        let v = if !flag.is_empty() {
            flag
        } else {
            match self.lookup(key) {
                None => Vec::new(),
                Some(Value::Array(a)) => a
                    .iter()
                    .map(|x| match x {
                        Value::String(s) => Ok(PathBuf::from(s)),
                        other => Err(self.bad(key, "a list of path strings", other)),
                    })
                    .collect::<anyhow::Result<_>>()?,
                Some(v) => return Err(self.bad(key, "a list of path strings", &v)),
            }
        };
        if !v.is_empty() {
            let arr = v.iter().map(|p| Value::String(p.display().to_string())).collect();
            self.resolved.insert(key.into(), Value::Array(arr));
        }
        Ok(v)
    }

    pub fn flag(&mut self, key: &str, flag: bool) -> anyhow::Result<bool> {
        let v = match self.lookup(key) {
            _ if flag => true,
            Some(Value::Boolean(b)) => b,
            Some(v) => return Err(self.bad(key, "a boolean", &v)),
            None => false,
        };
        self.resolved.insert(key.into(), Value::Boolean(v));
        Ok(v)
    }

    /// Finish resolution; keys in the config section that no setting asked
    /// for are rejected.
    pub fn finish(self) -> anyhow::Result<Stanza> {
        let unknown: Vec<&String> = self.section.keys().filter(|k| !self.used.contains(*k)).collect();
        if !unknown.is_empty() {
            return Err(usage(format!("config [{}]: unknown keys {unknown:?}", self.command)));
        }
        Ok(Stanza {
            command: self.command,
            resolved: self.resolved,
        })
    }
}

/// Tool version, subcommand and every resolved setting.
#[derive(Clone, Debug)]
pub struct Stanza {
    pub command: &'static str,
    pub resolved: Table,
}

impl Stanza {
    pub fn render(&self) -> String {
        let mut run = Table::new();
        run.insert("tool".into(), Value::String("egd".into()));
        run.insert("version".into(), Value::String(env!("CARGO_PKG_VERSION").into()));
        run.insert("subcommand".into(), Value::String(self.command.into()));
        let mut doc = Table::new();
        doc.insert("run".into(), Value::Table(run));
        doc.insert(self.command.into(), Value::Table(self.resolved.clone()));
        format!("# reproducibility stanza\n{doc}")
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(STANZA_FILE);
        std::fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
