//! Feature datasets and their on-disk format.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic    "FTLM"            4 bytes
//! version  u32 = 1
//! n        u64               samples
//! t        u32               time steps per sample
//! d        u32               channels per time step
//! c        u32               classes
//! names    c x NUL-terminated UTF-8
//! labels   n x u32
//! features n*t*d x f32       row-major (sample, time, channel)
//! ```
//!
//! A JSON sidecar next to the file (`<stem>.meta.json`) repeats the dims,
//! class names and class counts and records where the data came from. When
//! present at load time it is cross-checked against the binary payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"FTLM";
pub const FORMAT_VERSION: u32 = 1;

/// `N` samples of `T x D` features with integer class labels.
///
/// Immutable after construction; every constructor validates the invariants.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    features: Vec<f32>,
    labels: Vec<u32>,
    class_names: Vec<String>,
    class_counts: Vec<u64>,
    t: usize,
    d: usize,
    provenance: serde_json::Value,
}

impl FeatureDataset {
    pub fn new(
        features: Vec<f32>,
        labels: Vec<u32>,
        class_names: Vec<String>,
        t: usize,
        d: usize,
    ) -> Result<Self> {
        if t == 0 {
            return Err(Error::invalid("t", "must be at least 1"));
        }
        if d == 0 {
            return Err(Error::invalid("d", "must be at least 1"));
        }
        if class_names.is_empty() {
            return Err(Error::invalid("class_names", "at least one class is required"));
        }
        if let Some(name) = class_names.iter().find(|n| n.contains('\0')) {
            return Err(Error::invalid("class_names", format!("{name:?} contains NUL")));
        }
        let expected = labels.len() * t * d;
        if features.len() != expected {
            return Err(Error::DimensionMismatch {
                field: "features",
                expected,
                found: features.len(),
            });
        }
        if let Some(index) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                field: "features",
                index,
            });
        }
        let class_counts = count_labels(&labels, class_names.len())?;
        Ok(Self {
            features,
            labels,
            class_names,
            class_counts,
            t,
            d,
            provenance: serde_json::Value::Null,
        })
    }

    pub fn with_provenance(mut self, provenance: serde_json::Value) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn time_steps(&self) -> usize {
        self.t
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(N, T, D, C)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.len(), self.t, self.d, self.num_classes())
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn provenance(&self) -> &serde_json::Value {
        &self.provenance
    }

    /// The `T x D` block of sample `i`.
    pub fn sample(&self, i: usize) -> &[f32] {
        let stride = self.t * self.d;
        &self.features[i * stride..(i + 1) * stride]
    }

    /// Gathers samples into a `B x (T*D)` batch and their labels.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let stride = self.t * self.d;
        let mut batch = Matrix::zeros(indices.len(), stride);
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            for (dst, &src) in batch.row_mut(row).iter_mut().zip(self.sample(i)) {
                *dst = src as f64;
            }
            labels.push(self.label(i));
        }
        (batch, labels)
    }

    /// Per-class lists of sample indices, in dataset order.
    pub fn class_index_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            lists[y as usize].push(i);
        }
        lists
    }
}

fn count_labels(labels: &[u32], classes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; classes];
    for (index, &y) in labels.iter().enumerate() {
        match counts.get_mut(y as usize) {
            Some(c) => *c += 1,
            None => {
                return Err(Error::LabelOutOfRange {
                    index,
                    label: y as u64,
                    classes,
                })
            }
        }
    }
    Ok(counts)
}

/// One-hot row for class `y` out of `classes`.
pub fn one_hot(y: usize, classes: usize) -> Result<Vec<f64>> {
    if y >= classes {
        return Err(Error::LabelOutOfRange {
            index: 0,
            label: y as u64,
            classes,
        });
    }
    let mut row = vec![0.0; classes];
    row[y] = 1.0;
    Ok(row)
}

/// `B x C` matrix of per-class target mass; every row is a distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelMatrix(Matrix);

impl SoftLabelMatrix {
    pub const ROW_SUM_TOL: f64 = 1e-6;

    pub fn new(m: Matrix) -> Result<Self> {
        for (i, row) in m.iter_rows().enumerate() {
            if row.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid(
                    "soft_labels",
                    format!("row {i} has a negative or non-finite entry"),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::ROW_SUM_TOL {
                return Err(Error::invalid(
                    "soft_labels",
                    format!("row {i} sums to {s}"),
                ));
            }
        }
        Ok(Self(m))
    }

    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        let mut m = Matrix::zeros(labels.len(), classes);
        for (i, &y) in labels.iter().enumerate() {
            if y >= classes {
                return Err(Error::LabelOutOfRange {
                    index: i,
                    label: y as u64,
                    classes,
                });
            }
            m.set(i, y, 1.0);
        }
        Ok(Self(m))
    }

    /// Caller guarantees the row invariant.
    pub(crate) fn new_unchecked(m: Matrix) -> Self {
        debug_assert!(Self::new(m.clone()).is_ok());
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Human-readable metadata written next to every dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub n: u64,
    pub t: u32,
    pub d: u32,
    pub c: u32,
    pub class_names: Vec<String>,
    pub class_counts: Vec<u64>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// `data/train.ftlm` -> `data/train.meta.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn encode_dataset(ds: &FeatureDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + ds.features.len() * 4 + ds.labels.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.t as u32).to_le_bytes());
    out.extend_from_slice(&(ds.d as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes() as u32).to_le_bytes());
    for name in &ds.class_names {
        out.extend_from_slice(name.as_bytes());
        out.push(0);
    }
    for &y in &ds.labels {
        out.extend_from_slice(&y.to_le_bytes());
    }
    for &v in &ds.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::DimensionMismatch {
                field,
                expected: n,
                found: self.buf.len() - self.pos,
            }),
        }
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field).map_err(|_| truncated(field))?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        let b = self.take(8, field).map_err(|_| truncated(field))?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn truncated(field: &'static str) -> Error {
    Error::MalformedHeader {
        field,
        reason: "file truncated".into(),
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<FeatureDataset> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| truncated("magic"))?;
    if magic != MAGIC {
        return Err(Error::MalformedHeader {
            field: "magic",
            reason: format!("expected \"FTLM\", found {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::MalformedHeader {
            field: "version",
            reason: format!("unsupported version {version}"),
        });
    }
    let n = r.u64("n")?;
    let t = r.u32("t")? as usize;
    let d = r.u32("d")? as usize;
    let c = r.u32("c")? as usize;
    if t == 0 || d == 0 || c == 0 {
        let field = if t == 0 {
            "t"
        } else if d == 0 {
            "d"
        } else {
            "c"
        };
        return Err(Error::MalformedHeader {
            field,
            reason: "must be at least 1".into(),
        });
    }

    let mut class_names = Vec::with_capacity(c.min(r.remaining()));
    for _ in 0..c {
        let rest = &buf[r.pos..];
        let nul = rest.iter().position(|&b| b == 0).ok_or(Error::MalformedHeader {
            field: "class_names",
            reason: "missing NUL terminator".into(),
        })?;
        let name = std::str::from_utf8(&rest[..nul]).map_err(|e| Error::MalformedHeader {
            field: "class_names",
            reason: e.to_string(),
        })?;
        class_names.push(name.to_owned());
        r.pos += nul + 1;
    }

    // Size checks before allocating anything proportional to `n`.
    let n_usize = usize::try_from(n).map_err(|_| Error::MalformedHeader {
        field: "n",
        reason: "too large".into(),
    })?;
    let label_bytes = n_usize.checked_mul(4).ok_or(Error::MalformedHeader {
        field: "n",
        reason: "too large".into(),
    })?;
    let feature_count = n_usize
        .checked_mul(t)
        .and_then(|v| v.checked_mul(d))
        .ok_or(Error::MalformedHeader {
            field: "n",
            reason: "n*t*d overflows".into(),
        })?;
    let expected_rest = label_bytes.saturating_add(feature_count.saturating_mul(4));
    if r.remaining() != expected_rest {
        let field = if r.remaining() < label_bytes {
            "labels"
        } else {
            "features"
        };
        return Err(Error::DimensionMismatch {
            field,
            expected: expected_rest,
            found: r.remaining(),
        });
    }

    let labels: Vec<u32> = r
        .take(label_bytes, "labels")?
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let features: Vec<f32> = r
        .take(feature_count * 4, "features")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();

    FeatureDataset::new(features, labels, class_names, t, d)
}

pub fn sidecar_for(ds: &FeatureDataset) -> Sidecar {
    Sidecar {
        format: "FTLM".into(),
        version: FORMAT_VERSION,
        n: ds.len() as u64,
        t: ds.t as u32,
        d: ds.d as u32,
        c: ds.num_classes() as u32,
        class_names: ds.class_names.clone(),
        class_counts: ds.class_counts.clone(),
        provenance: ds.provenance.clone(),
    }
}

/// Writes the binary file and its JSON sidecar. Output bytes depend only on
/// the dataset contents.
pub fn save_dataset(ds: &FeatureDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut json = serde_json::to_vec_pretty(&sidecar_for(ds))?;
    json.push(b'\n');
    fs::write(&side, json).map_err(|e| Error::io(side, e))?;
    Ok(())
}

/// Reads and validates a dataset. If a sidecar exists, its dims, names and
/// stored class counts must agree with the recomputed values.
pub fn load_dataset(path: &Path) -> Result<FeatureDataset> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ds = decode_dataset(&buf)?;
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(ds);
    }
    let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let meta: Sidecar = serde_json::from_slice(&text)?;
    check_sidecar(&ds, &meta)?;
    Ok(ds.with_provenance(meta.provenance))
}

fn check_sidecar(ds: &FeatureDataset, meta: &Sidecar) -> Result<()> {
    let dims = [
        ("n", meta.n as usize, ds.len()),
        ("t", meta.t as usize, ds.t),
        ("d", meta.d as usize, ds.d),
        ("c", meta.c as usize, ds.num_classes()),
        ("class_counts", meta.class_counts.len(), ds.num_classes()),
    ];
    for (field, stored, actual) in dims {
        if stored != actual {
            return Err(Error::DimensionMismatch {
                field,
                expected: actual,
                found: stored,
            });
        }
    }
    if meta.class_names != ds.class_names {
        return Err(Error::invalid(
            "class_names",
            "sidecar names differ from the binary header",
        ));
    }
    for (class, (&stored, &recomputed)) in meta.class_counts.iter().zip(&ds.class_counts).enumerate() {
        if stored != recomputed {
            return Err(Error::CountMismatch {
                class,
                stored,
                recomputed,
            });
        }
    }
    Ok(())
}
