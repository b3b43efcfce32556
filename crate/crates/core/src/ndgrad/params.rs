use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::scalar::{DType, Float};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    trainable: bool,
}

/// Named parameters and non-trainable buffers (normalization statistics),
/// kept in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

/// One manifest row: name, dtype and shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

const MAGIC: &str = "percept-checkpoint v1";

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a trainable tensor. Panics on a duplicate name, which is a
    /// model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Registers a tensor that is saved with the model but never updated by the optimizer.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!name.contains(char::is_whitespace), "parameter name {name:?} has whitespace");
        let id = self.entries.len();
        let prev = self.by_name.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter {name}");
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Ids of trainable parameters whose name starts with `prefix`.
    pub fn trainable_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.trainable && e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.entries
            .iter()
            .map(|e| ManifestEntry {
                name: e.name.clone(),
                dtype: T::DTYPE,
                shape: e.value.shape().to_vec(),
            })
            .collect()
    }

    /// Serializes the manifest followed by raw little-endian values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        writeln!(header, "{MAGIC}").unwrap();
        writeln!(header, "params {}", self.entries.len()).unwrap();
        for m in self.manifest() {
            let shape = if m.shape.is_empty() {
                "-".to_string()
            } else {
                m.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            writeln!(header, "{} {} {}", m.name, m.dtype.name(), shape).unwrap();
        }
        writeln!(header, "end").unwrap();
        let mut out = header.into_bytes();
        for e in &self.entries {
            for &v in e.value.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Overwrites every value from a checkpoint whose manifest must match
    /// this store exactly; mismatches are reported as a line diff.
    pub fn load_bytes(&mut self, bytes: &[u8], origin: &Path) -> Result<()> {
        let (manifest, body) = parse_checkpoint(bytes, origin)?;
        let mine = self.manifest();
        if manifest != mine {
            return Err(Error::CheckpointMismatch(manifest_diff(&mine, &manifest)));
        }
        let mut at = 0;
        let size = T::DTYPE.size();
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                *v = T::read_le(&body[at..at + size]);
                at += size;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes, path)
    }
}

/// Parses only the manifest section and validates the body length.
pub fn parse_checkpoint<'a>(bytes: &'a [u8], origin: &Path) -> Result<(Vec<ManifestEntry>, &'a [u8])> {
    let bad = |reason: String| Error::format("checkpoint", origin, reason);
    let mut lines = Vec::new();
    let mut start = 0;
    let mut body_at = None;
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' {
            let line = std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("non-utf8 header".into()))?;
            start = i + 1;
            if line == "end" {
                body_at = Some(start);
                break;
            }
            lines.push(line);
        }
    }
    let body_at = body_at.ok_or_else(|| bad("missing end of manifest".into()))?;
    let mut it = lines.into_iter();
    if it.next() != Some(MAGIC) {
        return Err(bad("bad magic".into()));
    }
    let count: usize = it
        .next()
        .and_then(|l| l.strip_prefix("params "))
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing parameter count".into()))?;
    let mut manifest = Vec::with_capacity(count);
    for line in it {
        let mut parts = line.split(' ');
        let (Some(name), Some(dtype), Some(shape), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad(format!("bad manifest line {line:?}")));
        };
        let dtype = DType::parse(dtype).ok_or_else(|| bad(format!("unknown dtype {dtype}")))?;
        let shape = if shape == "-" {
            vec![]
        } else {
            shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("bad shape {shape}")))?
        };
        manifest.push(ManifestEntry {
            name: name.to_string(),
            dtype,
            shape,
        });
    }
    if manifest.len() != count {
        return Err(bad(format!("manifest lists {} of {count} parameters", manifest.len())));
    }
    let body = &bytes[body_at..];
    let expected: usize = manifest
        .iter()
        .map(|m| m.shape.iter().product::<usize>() * m.dtype.size())
        .sum();
    if body.len() != expected {
        return Err(bad(format!("body has {} bytes, manifest needs {expected}", body.len())));
    }
    Ok((manifest, body))
}

fn manifest_diff(expected: &[ManifestEntry], found: &[ManifestEntry]) -> String {
    let fmt = |m: &ManifestEntry| format!("{} {} {:?}", m.name, m.dtype.name(), m.shape);
    let mut out = String::new();
    let n = expected.len().max(found.len());
    for i in 0..n {
        match (expected.get(i), found.get(i)) {
            (Some(a), Some(b)) if a == b => {}
            (Some(a), Some(b)) => {
                writeln!(out, "- {}\n+ {}", fmt(a), fmt(b)).unwrap();
            }
            (Some(a), None) => writeln!(out, "- {}", fmt(a)).unwrap(),
            (None, Some(b)) => writeln!(out, "+ {}", fmt(b)).unwrap(),
            (None, None) => unreachable!(),
        }
    }
    out
}
