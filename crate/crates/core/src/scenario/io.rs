//! Scenario codec and dataset index.
//!
//! Floats are written with 17 significant digits. Non-finite values are
//! written as `null` and read back as NaN so validation can reject them.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::ser::Formatter;

use super::types::{Limits, Scenario};
use crate::error::{Error, Result};

/// Compact JSON with fixed 17-significant-digit floats.
#[derive(Debug, Default, Clone, Copy)]
pub struct ExactFloatFormatter;

impl Formatter for ExactFloatFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes with [`ExactFloatFormatter`].
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, ExactFloatFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Numeric(format!("serialization: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

/// Parses JSON, reporting line, column and field path on failure.
pub fn from_json_slice<T: DeserializeOwned>(bytes: &[u8], path: &Path) -> Result<T> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value: T = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: format!("{} (field `{}`)", e.inner(), e.path()),
    })?;
    de.end().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(value)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let bytes = to_json_bytes(value)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_json_slice(&bytes, path)
}

fn nan(x: Option<f64>) -> f64 {
    x.unwrap_or(f64::NAN)
}

pub(crate) fn scalars<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let raw: Vec<Option<f64>> = Deserialize::deserialize(d)?;
    Ok(raw.into_iter().map(nan).collect())
}

pub(crate) fn points<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<[f64; 2]>, D::Error> {
    let raw: Vec<[Option<f64>; 2]> = Deserialize::deserialize(d)?;
    Ok(raw.into_iter().map(|[x, y]| [nan(x), nan(y)]).collect())
}

pub fn write_scenario(s: &Scenario, path: &Path) -> Result<()> {
    write_json(s, path)
}

/// Reads and validates against the default [`Limits`].
pub fn read_scenario(path: &Path) -> Result<Scenario> {
    read_scenario_with(path, &Limits::default())
}

pub fn read_scenario_with(path: &Path, limits: &Limits) -> Result<Scenario> {
    let s: Scenario = read_json(path)?;
    s.validate(limits)?;
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub split: Split,
}

/// Contents of `index.json` in a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub limits: Limits,
    pub scenarios: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub limits: Limits,
    pub train: Vec<Scenario>,
    pub val: Vec<Scenario>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Scenario] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

/// Writes one file per scenario plus the index.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (split, list) in [(Split::Train, &dataset.train), (Split::Val, &dataset.val)] {
        for s in list.iter() {
            let file = format!("{}.json", s.id);
            write_scenario(s, &dir.join(&file))?;
            entries.push(IndexEntry { file, split });
        }
    }
    let index = DatasetIndex {
        limits: dataset.limits,
        scenarios: entries,
    };
    write_json(&index, &dir.join(INDEX_FILE))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let index: DatasetIndex = read_json(&dir.join(INDEX_FILE))?;
    let mut ds = Dataset {
        limits: index.limits,
        train: Vec::new(),
        val: Vec::new(),
    };
    for e in &index.scenarios {
        let path: PathBuf = dir.join(&e.file);
        let s = read_scenario_with(&path, &index.limits)?;
        match e.split {
            Split::Train => ds.train.push(s),
            Split::Val => ds.val.push(s),
        }
    }
    Ok(ds)
}
