//! The `CTB1` tensor container and its in-memory model.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CTB1" | u32 manifest length | manifest (UTF-8 JSON) | pad | payload 0 | pad | payload 1 | ...
//! ```
//!
//! Every payload starts at an absolute file offset that is a multiple of 64;
//! the gap before it is filled with zero bytes. Payloads are raw `f32` values
//! in row-major order and appear in manifest order. The manifest carries
//! `sample_id`, `n_text`, `n_visual`, `n_layers` and, per tensor, `name`,
//! `shape`, `offset` and `length` (bytes).
//!
//! Recognized tensor names for layer `l`:
//!
//! | name           | shape        | content                                  |
//! |----------------|--------------|------------------------------------------|
//! | `attn_tv/{l}`  | `(N_t, N_v)` | head-averaged text-to-visual attention   |
//! | `s_glo/{l}`    | `(N_v)`      | max-pooled global score                  |
//! | `s_last/{l}`   | `(N_v)`      | last-text-token score                    |
//! | `hidden_v/{l}` | `(N_v, d)`   | visual hidden states entering layer `l`  |
//!
//! Other names are carried through untouched.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::Matrix;
use crate::pooling;

pub const MAGIC: &[u8; 4] = b"CTB1";

type PoolFn = fn(&Matrix) -> Result<Vec<f64>, pooling::PoolingError>;
pub const ALIGNMENT: u64 = 64;

/// Maximum permitted attention row sum.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;
/// Maximum disagreement between stored pooled vectors and pooling of the matrix.
pub const POOL_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("BadMagic: expected \"CTB1\", found {0:?}")]
    BadMagic(Vec<u8>),
    #[error("TruncatedPayload: {what} needs {needed} bytes, {available} available")]
    TruncatedPayload { what: String, needed: u64, available: u64 },
    #[error("ManifestMismatch: {0}")]
    ManifestMismatch(String),
    #[error("NonFiniteValue: tensor {name} element {index} is {value}")]
    NonFiniteValue { name: String, index: usize, value: f32 },
    #[error("ShapeMismatch: shape {shape:?} needs {expected} values, got {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("InvalidBundle: {}", join_violations(.0))]
    InvalidBundle(Vec<Violation>),
}

impl BundleError {
    pub fn kind(&self) -> &'static str {
        match self {
            BundleError::Io(_) => "Io",
            BundleError::BadMagic(_) => "BadMagic",
            BundleError::TruncatedPayload { .. } => "TruncatedPayload",
            BundleError::ManifestMismatch(_) => "ManifestMismatch",
            BundleError::NonFiniteValue { .. } => "NonFiniteValue",
            BundleError::ShapeMismatch { .. } => "ShapeMismatch",
            BundleError::InvalidBundle(_) => "InvalidBundle",
        }
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Dense tensor stored as `f32`; read out as `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self, BundleError> {
        let expected = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match expected {
            Some(n) if n == values.len() && shape.iter().all(|&d| d > 0) => Ok(Self { shape, values }),
            _ => Err(BundleError::ShapeMismatch {
                expected: expected.unwrap_or(usize::MAX),
                actual: values.len(),
                shape,
            }),
        }
    }

    /// Narrows `f64` values to the storage precision.
    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self, BundleError> {
        Self::new(shape, values.iter().map(|&v| v as f32).collect())
    }

    pub fn vector(values: &[f64]) -> Result<Self, BundleError> {
        Self::from_f64(vec![values.len()], values)
    }

    pub fn matrix(m: &Matrix) -> Result<Self, BundleError> {
        Self::from_f64(vec![m.rows(), m.cols()], m.as_slice())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| f64::from(v)).collect()
    }

    /// 2-D view promoted to `f64`; `None` for other ranks.
    pub fn to_matrix(&self) -> Option<Matrix> {
        match self.shape.as_slice() {
            &[r, c] => Matrix::from_vec(r, c, self.to_f64()),
            _ => None,
        }
    }
}

/// Role of a recognized tensor name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Attention,
    GlobalScore,
    LastScore,
    Hidden,
}

impl TensorKind {
    pub fn prefix(self) -> &'static str {
        match self {
            TensorKind::Attention => "attn_tv",
            TensorKind::GlobalScore => "s_glo",
            TensorKind::LastScore => "s_last",
            TensorKind::Hidden => "hidden_v",
        }
    }

    pub fn name(self, layer: usize) -> String {
        format!("{}/{layer}", self.prefix())
    }

    fn from_prefix(p: &str) -> Option<Self> {
        Some(match p {
            "attn_tv" => TensorKind::Attention,
            "s_glo" => TensorKind::GlobalScore,
            "s_last" => TensorKind::LastScore,
            "hidden_v" => TensorKind::Hidden,
            _ => return None,
        })
    }
}

/// Splits a recognized name into kind and layer. The layer part is returned
/// as `Err(())` when the prefix is known but the suffix is not a layer index.
fn parse_name(name: &str) -> Option<(TensorKind, Result<usize, ()>)> {
    let (prefix, layer) = name.split_once('/')?;
    let kind = TensorKind::from_prefix(prefix)?;
    Some((kind, layer.parse::<usize>().map_err(|_| ())))
}

/// All tensors captured for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBundle {
    pub sample_id: String,
    pub n_text: usize,
    pub n_visual: usize,
    pub n_layers: usize,
    pub tensors: BTreeMap<String, DenseTensor>,
}

impl TensorBundle {
    pub fn new(sample_id: impl Into<String>, n_text: usize, n_visual: usize, n_layers: usize) -> Self {
        Self {
            sample_id: sample_id.into(),
            n_text,
            n_visual,
            n_layers,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DenseTensor) -> Option<DenseTensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.tensors.get(name)
    }

    pub fn layer_tensor(&self, kind: TensorKind, layer: usize) -> Option<&DenseTensor> {
        self.tensors.get(&kind.name(layer))
    }

    pub fn attention(&self, layer: usize) -> Option<Matrix> {
        self.layer_tensor(TensorKind::Attention, layer)?.to_matrix()
    }

    pub fn hidden(&self, layer: usize) -> Option<Matrix> {
        self.layer_tensor(TensorKind::Hidden, layer)?.to_matrix()
    }

    pub fn global_score(&self, layer: usize) -> Option<Vec<f64>> {
        self.layer_tensor(TensorKind::GlobalScore, layer)
            .map(DenseTensor::to_f64)
    }

    pub fn last_score(&self, layer: usize) -> Option<Vec<f64>> {
        self.layer_tensor(TensorKind::LastScore, layer).map(DenseTensor::to_f64)
    }
}

/// One failed invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub tensor: String,
    pub rule: String,
}

impl Violation {
    fn new(tensor: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            tensor: tensor.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.tensor, self.rule)
    }
}

/// Checks every bundle invariant; an empty result means the bundle is valid.
pub fn validate_bundle(bundle: &TensorBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    if bundle.n_text == 0 {
        out.push(Violation::new("<bundle>", "n_text must be positive"));
    }
    if bundle.n_visual == 0 {
        out.push(Violation::new("<bundle>", "n_visual must be positive"));
    }

    for (name, t) in &bundle.tensors {
        let expected: Option<usize> = t.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if expected != Some(t.values.len()) {
            out.push(Violation::new(
                name,
                format!("element count {} does not match shape {:?}", t.values.len(), t.shape),
            ));
            continue;
        }
        if t.shape.contains(&0) {
            out.push(Violation::new(name, format!("shape {:?} has a zero extent", t.shape)));
            continue;
        }
        if let Some(i) = t.values.iter().position(|v| !v.is_finite()) {
            out.push(Violation::new(name, format!("non-finite value at element {i}")));
            continue;
        }

        let Some((kind, layer)) = parse_name(name) else {
            continue;
        };
        match layer {
            Err(()) => {
                out.push(Violation::new(name, "layer suffix is not an index"));
                continue;
            }
            Ok(l) if l >= bundle.n_layers => {
                out.push(Violation::new(
                    name,
                    format!("layer {l} out of range for n_layers {}", bundle.n_layers),
                ));
                continue;
            }
            Ok(_) => {}
        }

        let (nt, nv) = (bundle.n_text, bundle.n_visual);
        match kind {
            TensorKind::Attention => {
                if t.shape != [nt, nv] {
                    out.push(Violation::new(
                        name,
                        format!("shape {:?} must be [{nt}, {nv}]", t.shape),
                    ));
                    continue;
                }
                if t.values.iter().any(|&v| v < 0.0) {
                    out.push(Violation::new(name, "attention entries must be nonnegative"));
                }
                for (i, row) in t.values.chunks(nv).enumerate() {
                    let s: f64 = row.iter().map(|&v| f64::from(v)).sum();
                    if s > 1.0 + ROW_SUM_TOLERANCE {
                        out.push(Violation::new(
                            name,
                            format!("row {i} sums to {s}, above 1 + {ROW_SUM_TOLERANCE}"),
                        ));
                        break;
                    }
                }
            }
            TensorKind::GlobalScore | TensorKind::LastScore => {
                if t.shape != [nv] {
                    out.push(Violation::new(name, format!("shape {:?} must be [{nv}]", t.shape)));
                    continue;
                }
                if t.values.iter().any(|&v| v < 0.0) {
                    out.push(Violation::new(name, "pooled scores must be nonnegative"));
                }
            }
            TensorKind::Hidden => {
                if t.shape.len() != 2 || t.shape[0] != nv {
                    out.push(Violation::new(name, format!("shape {:?} must be [{nv}, d]", t.shape)));
                }
            }
        }
    }

    out.extend(pooled_consistency(bundle));
    out
}

/// Stored pooled vectors versus pooling of the stored matrix, per layer.
fn pooled_consistency(bundle: &TensorBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    for layer in 0..bundle.n_layers {
        let Some(attn) = bundle.attention(layer) else {
            continue;
        };
        if attn.rows() != bundle.n_text || attn.cols() != bundle.n_visual {
            continue;
        }
        let checks: [(TensorKind, PoolFn); 2] = [
            (TensorKind::GlobalScore, pooling::pool_global),
            (TensorKind::LastScore, pooling::pool_last),
        ];
        for (kind, pool) in checks {
            let Some(stored) = bundle.layer_tensor(kind, layer) else {
                continue;
            };
            let Ok(expected) = pool(&attn) else {
                continue;
            };
            if stored.len() != expected.len() {
                continue;
            }
            let worst = stored
                .to_f64()
                .iter()
                .zip(&expected)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            if worst > POOL_TOLERANCE {
                out.push(Violation::new(
                    kind.name(layer),
                    format!(
                        "differs from pooling of {} by {worst:.3e} (tolerance {POOL_TOLERANCE})",
                        TensorKind::Attention.name(layer)
                    ),
                ));
            }
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    sample_id: String,
    n_text: usize,
    n_visual: usize,
    n_layers: usize,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[inline]
fn align_up(x: u64) -> u64 {
    x.div_ceil(ALIGNMENT) * ALIGNMENT
}

/// Serializes a bundle into `CTB1` bytes. Invalid bundles are rejected.
pub fn encode_bundle(bundle: &TensorBundle) -> Result<Vec<u8>, BundleError> {
    let violations = validate_bundle(bundle);
    if !violations.is_empty() {
        return Err(BundleError::InvalidBundle(violations));
    }

    let mut entries: Vec<ManifestEntry> = bundle
        .tensors
        .iter()
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset: 0,
            length: 4 * t.values.len() as u64,
        })
        .collect();

    // Offsets are absolute, so the manifest length feeds back into them.
    let mut manifest_json = Vec::new();
    for _ in 0..16 {
        let header_len = 8 + manifest_json.len() as u64;
        let mut cursor = header_len;
        for e in &mut entries {
            e.offset = align_up(cursor);
            cursor = e.offset + e.length;
        }
        let manifest = Manifest {
            sample_id: bundle.sample_id.clone(),
            n_text: bundle.n_text,
            n_visual: bundle.n_visual,
            n_layers: bundle.n_layers,
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)
            .map_err(|e| BundleError::ManifestMismatch(format!("manifest serialization failed: {e}")))?;
        entries = manifest.tensors;
        let settled = json.len() == manifest_json.len();
        manifest_json = json;
        if settled {
            break;
        }
    }
    let manifest_len = u32::try_from(manifest_json.len())
        .map_err(|_| BundleError::ManifestMismatch("manifest exceeds 4 GiB".into()))?;

    let total = entries
        .last()
        .map_or(8 + manifest_json.len() as u64, |e| e.offset + e.length);
    let mut buf = Vec::with_capacity(total as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&manifest_len.to_le_bytes());
    buf.extend_from_slice(&manifest_json);
    for (entry, tensor) in entries.iter().zip(bundle.tensors.values()) {
        buf.resize(entry.offset as usize, 0);
        for v in &tensor.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

/// Parses `CTB1` bytes, rejecting malformed containers and invalid bundles.
pub fn decode_bundle(bytes: &[u8]) -> Result<TensorBundle, BundleError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(BundleError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
    }
    let file_len = bytes.len() as u64;
    if file_len < 8 {
        return Err(BundleError::TruncatedPayload {
            what: "header".into(),
            needed: 8,
            available: file_len,
        });
    }
    let manifest_len = u64::from(u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")));
    let header_end = 8 + manifest_len;
    if header_end > file_len {
        return Err(BundleError::TruncatedPayload {
            what: "manifest".into(),
            needed: manifest_len,
            available: file_len - 8,
        });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..header_end as usize])
        .map_err(|e| BundleError::ManifestMismatch(format!("unreadable manifest: {e}")))?;

    let mut bundle = TensorBundle::new(
        manifest.sample_id,
        manifest.n_text,
        manifest.n_visual,
        manifest.n_layers,
    );
    let mut prev_end = header_end;
    for entry in manifest.tensors {
        let name = entry.name;
        let numel = entry
            .shape
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d as u64))
            .ok_or_else(|| BundleError::ManifestMismatch(format!("{name}: shape overflows")))?;
        if entry.shape.contains(&0) {
            return Err(BundleError::ManifestMismatch(format!(
                "{name}: shape {:?} has a zero extent",
                entry.shape
            )));
        }
        let needed = numel * 4;
        if entry.length < needed {
            return Err(BundleError::TruncatedPayload {
                what: name,
                needed,
                available: entry.length,
            });
        }
        if entry.length > needed {
            return Err(BundleError::ManifestMismatch(format!(
                "{name}: length {} bytes but shape {:?} needs {needed}",
                entry.length, entry.shape
            )));
        }
        if entry.offset % ALIGNMENT != 0 {
            return Err(BundleError::ManifestMismatch(format!(
                "{name}: offset {} is not {ALIGNMENT}-byte aligned",
                entry.offset
            )));
        }
        if entry.offset < prev_end {
            return Err(BundleError::ManifestMismatch(format!(
                "{name}: offset {} overlaps preceding data ending at {prev_end}",
                entry.offset
            )));
        }
        let end = entry.offset.saturating_add(entry.length);
        if end > file_len {
            return Err(BundleError::TruncatedPayload {
                available: file_len.saturating_sub(entry.offset),
                what: name,
                needed,
            });
        }
        let payload = &bytes[entry.offset as usize..end as usize];
        let mut values = Vec::with_capacity(numel as usize);
        for (index, chunk) in payload.chunks_exact(4).enumerate() {
            let value = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !value.is_finite() {
                return Err(BundleError::NonFiniteValue { name, index, value });
            }
            values.push(value);
        }
        if bundle.tensors.contains_key(&name) {
            return Err(BundleError::ManifestMismatch(format!("duplicate tensor {name}")));
        }
        let tensor = DenseTensor::new(entry.shape, values)?;
        bundle.tensors.insert(name, tensor);
        prev_end = end;
    }

    let violations = validate_bundle(&bundle);
    if !violations.is_empty() {
        return Err(BundleError::InvalidBundle(violations));
    }
    Ok(bundle)
}

/// Writes `bundle` to `path` in the `CTB1` format.
pub fn write_bundle(bundle: &TensorBundle, path: impl AsRef<Path>) -> Result<(), BundleError> {
    let bytes = encode_bundle(bundle)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Reads and validates a `CTB1` file.
pub fn read_bundle(path: impl AsRef<Path>) -> Result<TensorBundle, BundleError> {
    decode_bundle(&fs::read(path)?)
}
