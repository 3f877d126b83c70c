//! Foreign weight files: a JSON manifest plus a raw little-endian f32 blob.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::scenario::io::{read_json, write_json};

pub const MANIFEST_FORMAT: &str = "foreign-transformer-f32le-v1";

/// Tensor suffixes of one layer, in blob order.
pub const LAYER_TENSORS: [&str; 9] = [
    "attn_norm.weight",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ffn_norm.weight",
    "ffn.w_gate",
    "ffn.w_up",
    "ffn.w_down",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> u64 {
        4 * self.numel() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format: String,
    pub source: String,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn tensor_name(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

fn expected_shape(suffix: &str, hidden: usize, ffn: usize) -> Vec<usize> {
    match suffix {
        "attn_norm.weight" | "ffn_norm.weight" => vec![hidden],
        "ffn.w_gate" | "ffn.w_up" => vec![hidden, ffn],
        "ffn.w_down" => vec![ffn, hidden],
        _ => vec![hidden, hidden],
    }
}

impl WeightManifest {
    /// Contiguous layout for a synthetic stack with feed-forward width `2·hidden`.
    pub fn synthetic_layout(source: &str, blob: &str, layers: usize, hidden: usize, heads: usize) -> Self {
        let ffn = 2 * hidden;
        let mut tensors = Vec::with_capacity(layers * LAYER_TENSORS.len());
        let mut offset = 0u64;
        for l in 0..layers {
            for s in LAYER_TENSORS {
                let e = TensorEntry {
                    name: tensor_name(l, s),
                    shape: expected_shape(s, hidden, ffn),
                    offset,
                };
                offset += e.byte_len();
                tensors.push(e);
            }
        }
        WeightManifest {
            format: MANIFEST_FORMAT.into(),
            source: source.into(),
            layers,
            heads,
            hidden,
            blob: blob.into(),
            tensors,
        }
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Load(format!("tensor `{name}` missing from manifest")))
    }

    /// Feed-forward width, read from layer 0's gate shape.
    pub fn ffn_width(&self) -> Result<usize> {
        let e = self.entry(&tensor_name(0, "ffn.w_gate"))?;
        match e.shape.as_slice() {
            [_, f] => Ok(*f),
            _ => Err(Error::Load(format!("tensor `{}` has shape {:?}, want 2-D", e.name, e.shape))),
        }
    }

    pub fn blob_len(&self) -> u64 {
        self.tensors.iter().map(|t| t.offset + t.byte_len()).max().unwrap_or(0)
    }

    /// Layer geometry, names, shapes and non-overlap of byte ranges.
    pub fn validate(&self, blob_len: Option<u64>) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Load(format!(
                "hidden width {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Load("manifest declares no layers".into()));
        }
        let ffn = self.ffn_width()?;
        for l in 0..self.layers {
            for s in LAYER_TENSORS {
                let name = tensor_name(l, s);
                let e = self.entry(&name)?;
                let want = expected_shape(s, self.hidden, ffn);
                if e.shape != want {
                    return Err(Error::Load(format!("tensor `{name}` has shape {:?}, want {want:?}", e.shape)));
                }
                if e.offset % 4 != 0 {
                    return Err(Error::Load(format!("tensor `{name}` offset {} not 4-byte aligned", e.offset)));
                }
            }
        }
        let mut ranges: Vec<(u64, u64, &str)> = self
            .tensors
            .iter()
            .map(|t| (t.offset, t.offset + t.byte_len(), t.name.as_str()))
            .collect();
        ranges.sort();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Load(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
            }
        }
        if let Some(len) = blob_len {
            if let Some(t) = self.tensors.iter().find(|t| t.offset + t.byte_len() > len) {
                return Err(Error::Load(format!("tensor `{}` extends past the {len}-byte blob", t.name)));
            }
        }
        Ok(())
    }
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn blob_path(prefix: &Path) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Rows of a `rows × cols` matrix made orthonormal (or columns, whichever
/// count is smaller) by modified Gram–Schmidt, then scaled by `gain`.
fn orthogonal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let (n, len, transpose) = if rows <= cols { (rows, cols, false) } else { (cols, rows, true) };
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..len).map(|_| StandardNormal.sample(&mut *rng)).collect())
        .collect();
    for i in 0..n {
        let (done, rest) = v.split_at_mut(i);
        let vi = &mut rest[0];
        for u in done.iter() {
            let d: f64 = u.iter().zip(vi.iter()).map(|(a, b)| a * b).sum();
            vi.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
        }
        let norm = vi.iter().map(|x| x * x).sum::<f64>().sqrt();
        vi.iter_mut().for_each(|x| *x /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for (i, vi) in v.iter().enumerate() {
        for (j, x) in vi.iter().enumerate() {
            let (r, c) = if transpose { (j, i) } else { (i, j) };
            out[r * cols + c] = x * gain;
        }
    }
    out
}

fn synthetic_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Vec<f64> {
    match shape {
        [n] => vec![1.0; *n],
        [r, c] => orthogonal(rng, *r, *c, 1.0),
        _ => unreachable!("layer tensors are 1-D or 2-D"),
    }
}

/// Manifest and blob of a synthetic stack; layer `l` draws from RNG stream `l`.
pub fn synthetic_blob(seed: u64, layers: usize, hidden: usize, heads: usize, blob_name: &str) -> Result<(WeightManifest, Vec<u8>)> {
    if heads == 0 || hidden % heads != 0 {
        return Err(Error::Config(format!("hidden width {hidden} not divisible by {heads} heads")));
    }
    if layers == 0 {
        return Err(Error::Config("at least one layer required".into()));
    }
    let manifest = WeightManifest::synthetic_layout(&format!("synthetic seed {seed}"), blob_name, layers, hidden, heads);
    let mut blob = Vec::with_capacity(manifest.blob_len() as usize);
    for l in 0..layers {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(l as u64);
        for s in LAYER_TENSORS {
            let e = manifest.entry(&tensor_name(l, s))?;
            debug_assert_eq!(e.offset as usize, blob.len());
            let t: Vec<f32> = synthetic_tensor(&mut rng, &e.shape).into_iter().map(|x| x as f32).collect();
            blob.extend_from_slice(&encode_f32(&t));
        }
    }
    Ok((manifest, blob))
}

/// Synthetic layers `[first, first + count)` without touching the disk.
pub fn synthetic_foreign(seed: u64, layers: usize, hidden: usize, heads: usize, first: usize, count: usize) -> Result<ForeignWeights> {
    let (m, blob) = synthetic_blob(seed, layers, hidden, heads, "memory.bin")?;
    foreign_from_blob(&m, &blob, first, count)
}

/// Writes `PREFIX.json` and `PREFIX.bin`.
pub fn make_synthetic_weights(seed: u64, layers: usize, hidden: usize, heads: usize, prefix: &Path) -> Result<WeightManifest> {
    let blob_file = blob_path(prefix);
    let blob_name = blob_file
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Error::Config(format!("weight prefix {} has no file name", prefix.display())))?;
    let (manifest, blob) = synthetic_blob(seed, layers, hidden, heads, &blob_name)?;
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&blob_file, &blob).map_err(|e| Error::io(&blob_file, e))?;
    write_json(&manifest, &manifest_path(prefix))?;
    Ok(manifest)
}

/// One frozen layer widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub index: usize,
    pub attn_norm: Array,
    pub wq: Array,
    pub wk: Array,
    pub wv: Array,
    pub wo: Array,
    pub ffn_norm: Array,
    pub w_gate: Array,
    pub w_up: Array,
    pub w_down: Array,
}

impl LayerWeights {
    pub fn tensors(&self) -> [(&'static str, &Array); 9] {
        [
            (LAYER_TENSORS[0], &self.attn_norm),
            (LAYER_TENSORS[1], &self.wq),
            (LAYER_TENSORS[2], &self.wk),
            (LAYER_TENSORS[3], &self.wv),
            (LAYER_TENSORS[4], &self.wo),
            (LAYER_TENSORS[5], &self.ffn_norm),
            (LAYER_TENSORS[6], &self.w_gate),
            (LAYER_TENSORS[7], &self.w_up),
            (LAYER_TENSORS[8], &self.w_down),
        ]
    }
}

/// Layers `[first, first + count)` of a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ForeignWeights {
    pub source: String,
    pub total_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub first: usize,
    pub layers: Vec<LayerWeights>,
}

pub fn read_manifest(path: &Path) -> Result<WeightManifest> {
    let m: WeightManifest = read_json(path).map_err(|e| match e {
        Error::Parse { path, msg } => Error::Load(format!("manifest {}: {msg}", path.display())),
        other => other,
    })?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::Load(format!("manifest format `{}`, want `{MANIFEST_FORMAT}`", m.format)));
    }
    Ok(m)
}

/// Checks bounds without reading the blob.
pub fn check_range(total: usize, first: usize, count: usize) -> Result<()> {
    if count == 0 || first >= total || first + count > total {
        return Err(Error::Range(format!(
            "layers {first}..{} not within the manifest's {total} layers",
            first + count
        )));
    }
    Ok(())
}

pub fn load_foreign(manifest: &Path, first: usize, count: usize) -> Result<ForeignWeights> {
    let m = read_manifest(manifest)?;
    check_range(m.layers, first, count)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let blob_file = dir.join(&m.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::Load(format!("blob {}: {e}", blob_file.display())))?;
    foreign_from_blob(&m, &blob, first, count)
}

/// Decodes layers `[first, first + count)` from an in-memory blob.
pub fn foreign_from_blob(m: &WeightManifest, blob: &[u8], first: usize, count: usize) -> Result<ForeignWeights> {
    check_range(m.layers, first, count)?;
    m.validate(Some(blob.len() as u64))?;
    let ffn = m.ffn_width()?;
    let read = |name: String| -> Result<Array> {
        let e = m.entry(&name)?;
        let bytes = &blob[e.offset as usize..(e.offset + e.byte_len()) as usize];
        let data: Vec<f64> = decode_f32(bytes).into_iter().map(f64::from).collect();
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::Load(format!("tensor `{name}` holds non-finite values")));
        }
        let shape = if e.shape.len() == 1 { vec![1, e.shape[0]] } else { e.shape.clone() };
        Array::new(shape, data)
    };
    let layers = (first..first + count)
        .map(|l| {
            Ok(LayerWeights {
                index: l,
                attn_norm: read(tensor_name(l, LAYER_TENSORS[0]))?,
                wq: read(tensor_name(l, LAYER_TENSORS[1]))?,
                wk: read(tensor_name(l, LAYER_TENSORS[2]))?,
                wv: read(tensor_name(l, LAYER_TENSORS[3]))?,
                wo: read(tensor_name(l, LAYER_TENSORS[4]))?,
                ffn_norm: read(tensor_name(l, LAYER_TENSORS[5]))?,
                w_gate: read(tensor_name(l, LAYER_TENSORS[6]))?,
                w_up: read(tensor_name(l, LAYER_TENSORS[7]))?,
                w_down: read(tensor_name(l, LAYER_TENSORS[8]))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ForeignWeights {
        source: m.source.clone(),
        total_layers: m.layers,
        hidden: m.hidden,
        heads: m.heads,
        ffn,
        first,
        layers,
    })
}
