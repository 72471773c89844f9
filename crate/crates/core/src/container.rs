//! Named-tensor container: a text manifest plus one little-endian buffer.
//!
//! `<stem>.manifest` starts with `lhc-container 1`; each following line is
//! `name precision dims offset`, tab separated, with `dims` written as
//! `AxBxC` (`scalar` for rank 0) and `offset` the byte offset into
//! `<stem>.bin`. Tensors are stored back to back in manifest order.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "lhc-container 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
    /// Integer values in `0..=255` only.
    U8,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
            Precision::U8 => 1,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
            Precision::U8 => "u8",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            "u8" => Ok(Precision::U8),
            _ => Err(Error::Format(format!("unknown precision {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub precision: Precision,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<Entry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("manifest"), stem.with_extension("bin"))
}

fn dims_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    if s == "scalar" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::Format(format!("bad dims {s:?}"))))
        .collect()
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, precision: Precision) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Format(format!("invalid tensor name {name:?}")));
        }
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
        if precision == Precision::U8 {
            if let Some(v) = tensor.data().iter().find(|v| !(v.fract() == 0.0 && (0.0..=255.0).contains(*v))) {
                return Err(Error::Format(format!("{name}: {v} does not fit u8")));
            }
        }
        self.entries.push(Entry { name, precision, tensor });
        Ok(())
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    /// Manifest text and data buffer.
    pub fn encode(&self) -> (String, Vec<u8>) {
        let mut manifest = format!("{MAGIC}\n");
        let mut buf = Vec::new();
        for e in &self.entries {
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.name,
                e.precision,
                dims_text(e.tensor.shape()),
                buf.len()
            ));
            for &v in e.tensor.data() {
                encode_value(v, e.precision, &mut buf);
            }
        }
        (manifest, buf)
    }

    pub fn decode(manifest: &str, buf: &[u8]) -> Result<Self> {
        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Format("missing container header".into()));
        }
        let mut out = Container::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, precision, dims, offset] = fields[..] else {
                return Err(Error::Format(format!("manifest line {}: expected 4 fields", i + 2)));
            };
            let precision: Precision = precision.parse()?;
            let shape = parse_dims(dims)?;
            let offset: usize = offset
                .parse()
                .map_err(|_| Error::Format(format!("bad offset {offset:?}")))?;
            let count: usize = shape.iter().product();
            let end = offset + count * precision.width();
            let bytes = buf
                .get(offset..end)
                .ok_or_else(|| Error::Format(format!("{name}: data runs past end of buffer")))?;
            let data: Vec<f64> = match precision {
                Precision::F64 => bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Precision::F32 => bytes
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
                Precision::U8 => bytes.iter().map(|&b| f64::from(b)).collect(),
            };
            out.push(name, Tensor::new(shape, data)?, precision)?;
        }
        Ok(out)
    }

    /// Writes `<stem>.manifest` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (m, b) = paths(stem);
        let (manifest, buf) = self.encode();
        fs::write(m, manifest)?;
        fs::write(b, buf)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (m, b) = paths(stem);
        Self::decode(&fs::read_to_string(m)?, &fs::read(b)?)
    }
}

fn encode_value(v: f64, precision: Precision, out: &mut Vec<u8>) {
    match precision {
        Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
        Precision::U8 => out.push(v as u8),
    }
}

struct OpenEntry {
    name: String,
    precision: Precision,
    shape: Vec<usize>,
    remaining: usize,
}

/// Streams entries to disk without holding them in memory. The manifest is
/// written by [`ContainerWriter::finish`].
pub struct ContainerWriter {
    manifest_path: PathBuf,
    manifest: String,
    names: Vec<String>,
    bin: BufWriter<File>,
    offset: usize,
    open: Option<OpenEntry>,
}

impl ContainerWriter {
    pub fn create(stem: &Path) -> Result<Self> {
        let (m, b) = paths(stem);
        Ok(Self {
            manifest_path: m,
            manifest: format!("{MAGIC}\n"),
            names: Vec::new(),
            bin: BufWriter::new(File::create(b)?),
            offset: 0,
            open: None,
        })
    }

    /// Starts an entry whose values arrive through [`ContainerWriter::write_values`].
    pub fn begin(&mut self, name: &str, precision: Precision, shape: &[usize]) -> Result<()> {
        if let Some(e) = &self.open {
            return Err(Error::Format(format!("entry {} still open", e.name)));
        }
        if name.is_empty() || name.contains(char::is_whitespace) || self.names.iter().any(|n| n == name) {
            return Err(Error::Format(format!("invalid or duplicate tensor name {name:?}")));
        }
        self.open = Some(OpenEntry {
            name: name.to_string(),
            precision,
            shape: shape.to_vec(),
            remaining: shape.iter().product(),
        });
        Ok(())
    }

    pub fn write_values(&mut self, values: &[f64]) -> Result<()> {
        let e = self
            .open
            .as_mut()
            .ok_or_else(|| Error::Format("no open entry".into()))?;
        if values.len() > e.remaining {
            return Err(Error::Format(format!("{}: more values than its shape holds", e.name)));
        }
        if e.precision == Precision::U8 {
            if let Some(v) = values.iter().find(|v| !(v.fract() == 0.0 && (0.0..=255.0).contains(*v))) {
                return Err(Error::Format(format!("{}: {v} does not fit u8", e.name)));
            }
        }
        let mut buf = Vec::with_capacity(values.len() * e.precision.width());
        for &v in values {
            encode_value(v, e.precision, &mut buf);
        }
        self.bin.write_all(&buf)?;
        e.remaining -= values.len();
        Ok(())
    }

    pub fn end(&mut self) -> Result<()> {
        let e = self.open.take().ok_or_else(|| Error::Format("no open entry".into()))?;
        if e.remaining != 0 {
            return Err(Error::Format(format!("{}: {} values missing", e.name, e.remaining)));
        }
        let count: usize = e.shape.iter().product();
        self.manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.name,
            e.precision,
            dims_text(&e.shape),
            self.offset
        ));
        self.offset += count * e.precision.width();
        self.names.push(e.name);
        Ok(())
    }

    pub fn add(&mut self, name: &str, tensor: &Tensor, precision: Precision) -> Result<()> {
        self.begin(name, precision, tensor.shape())?;
        self.write_values(tensor.data())?;
        self.end()
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = &self.open {
            return Err(Error::Format(format!("entry {} still open", e.name)));
        }
        self.bin.flush()?;
        fs::write(&self.manifest_path, &self.manifest)?;
        Ok(())
    }
}
