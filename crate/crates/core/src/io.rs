//! Persistence: named-tensor checkpoints, per-layer metrics tables and the
//! heatmap/aggregate CSVs derived from them.
//!
//! # Checkpoint layout (`.nt`)
//!
//! ```text
//! offset 0   8 bytes   magic "NTENSOR1"
//! offset 8   u64 LE    header length H in bytes
//! offset 16  H bytes   UTF-8 header, one line per tensor:
//!                        name \t dtype \t d0,d1,... \t offset \t nbytes \n
//! ...        zero pad  up to the next multiple of 64 (data start D)
//! D+offset   nbytes    little-endian IEEE-754 payload, offsets 64-aligned
//! ```
//!
//! `dtype` is `f32` or `f64`, `offset` is relative to `D`. Tensor order in
//! the header is the store's insertion order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::attention::Variant;
use crate::error::{Error, FormatError, Result};
use crate::gram::GramSpec;
use crate::linalg::Matrix;
use crate::mpstats::{LayerAggregate, LayerSeriesPoint, SpectralMetrics};

pub const MAGIC: &[u8; 8] = b"NTENSOR1";
const ALIGN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    /// Values promoted to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Bitwise equality, so that NaN payloads and signed zeros compare the
    /// way a byte-level round trip should.
    pub fn bit_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidMatrix(format!(
                "tensor shape must be a non-empty list of positive sizes, got {shape:?}"
            )));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::InvalidMatrix(format!(
                "shape {shape:?} needs {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_matrix(m: &Matrix, dtype: Dtype) -> Self {
        let data = match dtype {
            Dtype::F32 => TensorData::F32(m.as_slice().iter().map(|&v| v as f32).collect()),
            Dtype::F64 => TensorData::F64(m.as_slice().to_vec()),
        };
        Self {
            shape: vec![m.rows(), m.cols()],
            data,
        }
    }

    pub fn from_vector(v: &[f64], dtype: Dtype) -> Self {
        let data = match dtype {
            Dtype::F32 => TensorData::F32(v.iter().map(|&x| x as f32).collect()),
            Dtype::F64 => TensorData::F64(v.to_vec()),
        };
        Self {
            shape: vec![v.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    fn nbytes(&self) -> usize {
        self.data.len() * self.dtype().size()
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorStore {
    tensors: IndexMap<String, Tensor>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidMatrix(format!("invalid tensor name {name:?}")));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidMatrix(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: impl Into<String>, m: &Matrix, dtype: Dtype) -> Result<()> {
        self.insert(name, Tensor::from_matrix(m, dtype))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Loads a 2-D tensor as an `f64` matrix.
    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape.len() != 2 {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: vec![0, 0],
                actual: t.shape.clone(),
            });
        }
        Matrix::new(t.shape[0], t.shape[1], t.data.to_f64())
    }

    /// Loads a 1-D tensor as `f64` values.
    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if t.shape.len() != 1 {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: vec![0],
                actual: t.shape.clone(),
            });
        }
        Ok(t.data.to_f64())
    }

    /// Number of layers implied by `layers.{i}.` tensor names (max index + 1).
    pub fn layer_count(&self) -> usize {
        self.names()
            .filter_map(|n| n.strip_prefix("layers.")?.split('.').next()?.parse::<usize>().ok())
            .map(|i| i + 1)
            .max()
            .unwrap_or(0)
    }

    /// Bitwise comparison of names, order, shapes and payloads.
    pub fn bit_eq(&self, other: &TensorStore) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, ta), (nb, tb))| {
                na == nb && ta.shape == tb.shape && ta.data.bit_eq(&tb.data)
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let mut offset = 0usize;
        let mut end = 0usize;
        let mut offsets = Vec::with_capacity(self.len());
        for (name, t) in self.iter() {
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            header.push_str(&format!(
                "{name}\t{}\t{}\t{offset}\t{}\n",
                t.dtype().name(),
                shape.join(","),
                t.nbytes()
            ));
            offsets.push(offset);
            end = offset + t.nbytes();
            offset = align_up(end);
        }

        let data_start = align_up(16 + header.len());
        let mut out = vec![0u8; data_start + end];
        out[..8].copy_from_slice(MAGIC);
        out[8..16].copy_from_slice(&(header.len() as u64).to_le_bytes());
        out[16..16 + header.len()].copy_from_slice(header.as_bytes());
        for ((_, t), off) in self.iter().zip(offsets) {
            let mut pos = data_start + off;
            match &t.data {
                TensorData::F32(v) => {
                    for x in v {
                        out[pos..pos + 4].copy_from_slice(&x.to_le_bytes());
                        pos += 4;
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        out[pos..pos + 8].copy_from_slice(&x.to_le_bytes());
                        pos += 8;
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let len = bytes.len() as u64;
        let need = |offset: usize, needed: usize| -> std::result::Result<(), FormatError> {
            if offset + needed > bytes.len() {
                Err(FormatError::Truncated {
                    offset: offset as u64,
                    needed: needed as u64,
                    len,
                })
            } else {
                Ok(())
            }
        };

        need(0, 8)?;
        let mut magic = [0u8; 8];
        magic.copy_from_slice(&bytes[..8]);
        if &magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        need(8, 8)?;
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        need(16, header_len)?;
        let header = std::str::from_utf8(&bytes[16..16 + header_len]).map_err(|e| FormatError::Header {
            line: 0,
            reason: format!("header is not UTF-8: {e}"),
        })?;
        let data_start = align_up(16 + header_len);

        let mut store = TensorStore::new();
        for (idx, line) in header.lines().enumerate() {
            let line_no = idx + 1;
            let bad = |reason: String| FormatError::Header { line: line_no, reason };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(bad(format!("expected 5 tab-separated fields, got {}", fields.len())));
            }
            let name = fields[0];
            if name.is_empty() {
                return Err(bad("empty tensor name".into()));
            }
            let dtype = match fields[1] {
                "f32" => Dtype::F32,
                "f64" => Dtype::F64,
                other => return Err(bad(format!("unknown dtype `{other}`"))),
            };
            let shape = fields[2]
                .split(',')
                .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(|| bad(format!("invalid shape `{}`", fields[2])))?;
            let offset: usize = fields[3]
                .parse()
                .map_err(|_| bad(format!("invalid offset `{}`", fields[3])))?;
            if !offset.is_multiple_of(ALIGN) {
                return Err(bad(format!("offset {offset} is not {ALIGN}-byte aligned")));
            }
            let nbytes: u64 = fields[4]
                .parse()
                .map_err(|_| bad(format!("invalid byte count `{}`", fields[4])))?;

            if store.contains(name) {
                return Err(FormatError::DuplicateName(name.to_string()));
            }
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("shape {shape:?} overflows")))?;
            let expected = (count as u64).saturating_mul(dtype.size() as u64);
            if expected != nbytes {
                return Err(FormatError::ByteCountMismatch {
                    name: name.to_string(),
                    shape,
                    dtype: dtype.name(),
                    expected,
                    actual: nbytes,
                });
            }
            let start = data_start + offset;
            need(start, nbytes as usize)?;
            let payload = &bytes[start..start + nbytes as usize];
            let data = match dtype {
                Dtype::F32 => TensorData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                Dtype::F64 => TensorData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            store.tensors.insert(name.to_string(), Tensor { shape, data });
        }
        Ok(store)
    }
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn write_tensors(store: &TensorStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<TensorStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorStore::from_bytes(&bytes).map_err(|e| Error::format(path, e))
}

/// One CSV line of per-layer diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub layer: usize,
    pub variant: Variant,
    pub m: usize,
    pub d_in: usize,
    pub gamma: f64,
    pub lambda1: f64,
    pub mp_gap: f64,
    pub outlier_count: usize,
    pub outlier_energy: f64,
    pub mp_soft_rank: f64,
    pub stable_rank: f64,
    pub attention_entropy_bits: Option<f64>,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 13] = [
        "step",
        "layer",
        "variant",
        "m",
        "d_in",
        "gamma",
        "lambda1",
        "mp_gap",
        "outlier_count",
        "outlier_energy",
        "mp_soft_rank",
        "stable_rank",
        "attention_entropy_bits",
    ];

    /// Columns that can be projected into a heatmap.
    pub const METRICS: [&'static str; 8] = [
        "gamma",
        "lambda1",
        "mp_gap",
        "outlier_count",
        "outlier_energy",
        "mp_soft_rank",
        "stable_rank",
        "attention_entropy_bits",
    ];

    pub fn new(step: u64, spec: &GramSpec, metrics: &SpectralMetrics, entropy: Option<f64>) -> Self {
        Self {
            step,
            layer: spec.layer_index,
            variant: spec.variant,
            m: spec.m,
            d_in: spec.d_in,
            gamma: metrics.gamma,
            lambda1: metrics.lambda1,
            mp_gap: metrics.mp_gap,
            outlier_count: metrics.outlier_count,
            outlier_energy: metrics.outlier_energy,
            mp_soft_rank: metrics.mp_soft_rank,
            stable_rank: metrics.stable_rank,
            attention_entropy_bits: entropy,
        }
    }

    pub fn metric(&self, name: &str) -> Result<Option<f64>> {
        Ok(Some(match name {
            "gamma" => self.gamma,
            "lambda1" => self.lambda1,
            "mp_gap" => self.mp_gap,
            "outlier_count" => self.outlier_count as f64,
            "outlier_energy" => self.outlier_energy,
            "mp_soft_rank" => self.mp_soft_rank,
            "stable_rank" => self.stable_rank,
            "attention_entropy_bits" => return Ok(self.attention_entropy_bits),
            other => return Err(Error::UnknownMetric(other.to_string())),
        }))
    }

    pub fn point(&self) -> LayerSeriesPoint {
        LayerSeriesPoint {
            step: self.step,
            layer: self.layer,
            metrics: SpectralMetrics {
                mp_gap: self.mp_gap,
                outlier_count: self.outlier_count,
                outlier_energy: self.outlier_energy,
                mp_soft_rank: self.mp_soft_rank,
                stable_rank: self.stable_rank,
                lambda1: self.lambda1,
                gamma: self.gamma,
                n_eigs: self.m,
            },
        }
    }

    fn to_record(&self) -> [String; 13] {
        [
            self.step.to_string(),
            self.layer.to_string(),
            self.variant.to_string(),
            self.m.to_string(),
            self.d_in.to_string(),
            fmt_f64(self.gamma),
            fmt_f64(self.lambda1),
            fmt_f64(self.mp_gap),
            self.outlier_count.to_string(),
            fmt_f64(self.outlier_energy),
            fmt_f64(self.mp_soft_rank),
            fmt_f64(self.stable_rank),
            self.attention_entropy_bits.map(fmt_f64).unwrap_or_default(),
        ]
    }

    fn from_record(rec: &csv::StringRecord, row: usize) -> std::result::Result<Self, FormatError> {
        let bad = |reason: String| FormatError::Metrics { row, reason };
        if rec.len() != Self::HEADER.len() {
            return Err(bad(format!("expected {} fields, got {}", Self::HEADER.len(), rec.len())));
        }
        fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> std::result::Result<T, String> {
            rec[i]
                .parse()
                .map_err(|_| format!("column `{}`: cannot parse `{}`", MetricsRow::HEADER[i], &rec[i]))
        }
        let float = |i: usize| -> std::result::Result<f64, FormatError> {
            let v: f64 = num(rec, i).map_err(bad)?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(format!("column `{}` is not finite", Self::HEADER[i])))
            }
        };
        Ok(Self {
            step: num(rec, 0).map_err(bad)?,
            layer: num(rec, 1).map_err(bad)?,
            variant: num(rec, 2).map_err(bad)?,
            m: num(rec, 3).map_err(bad)?,
            d_in: num(rec, 4).map_err(bad)?,
            gamma: float(5)?,
            lambda1: float(6)?,
            mp_gap: float(7)?,
            outlier_count: num(rec, 8).map_err(bad)?,
            outlier_energy: float(9)?,
            mp_soft_rank: float(10)?,
            stable_rank: float(11)?,
            attention_entropy_bits: if rec[12].is_empty() { None } else { Some(float(12)?) },
        })
    }
}

/// 17 significant digits, enough for an exact `f64` round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_record<W: Write>(w: &mut W, fields: &[String]) -> std::io::Result<()> {
    writeln!(w, "{}", fields.join(","))
}

/// Appends one row, writing the header first if the file is new or empty.
pub fn append_metrics_row(path: impl AsRef<Path>, row: &MetricsRow) -> Result<()> {
    let path = path.as_ref();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut buf = Vec::new();
    if empty {
        let header: Vec<String> = MetricsRow::HEADER.iter().map(|s| s.to_string()).collect();
        write_record(&mut buf, &header).expect("write to Vec");
    }
    write_record(&mut buf, &row.to_record()).expect("write to Vec");
    file.write_all(&buf)
        .and_then(|_| file.flush())
        .map_err(|e| Error::io(path, e))
}

/// Truncating metrics writer for a fresh run; each row is flushed as it is
/// written so an aborted run leaves a parseable prefix.
pub struct MetricsWriter {
    path: std::path::PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        let header: Vec<String> = MetricsRow::HEADER.iter().map(|s| s.to_string()).collect();
        write_record(&mut out, &header)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, out })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        write_record(&mut self.out, &row.to_record())
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub fn parse_metrics(text: &str) -> std::result::Result<Vec<MetricsRow>, FormatError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| FormatError::Metrics {
        row: 0,
        reason: e.to_string(),
    })?;
    if header.iter().ne(MetricsRow::HEADER.iter().copied()) {
        return Err(FormatError::Metrics {
            row: 0,
            reason: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| FormatError::Metrics {
            row: i + 1,
            reason: e.to_string(),
        })?;
        rows.push(MetricsRow::from_record(&rec, i + 1)?);
    }
    Ok(rows)
}

/// Header plus rows, exactly as [`MetricsWriter`] lays them out.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut buf = Vec::new();
    let header: Vec<String> = MetricsRow::HEADER.iter().map(|s| s.to_string()).collect();
    write_record(&mut buf, &header).expect("write to Vec");
    for r in rows {
        write_record(&mut buf, &r.to_record()).expect("write to Vec");
    }
    String::from_utf8(buf).expect("ascii")
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text).map_err(|e| Error::format(path, e))
}

/// Layer-by-step grid of one metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub metric: String,
    pub layers: Vec<usize>,
    pub steps: Vec<u64>,
    /// `cells[layer_idx][step_idx]`; `None` where no row was logged.
    pub cells: Vec<Vec<Option<f64>>>,
}

pub fn heatmap_grid(rows: &[MetricsRow], metric: &str) -> Result<Heatmap> {
    if !MetricsRow::METRICS.contains(&metric) {
        return Err(Error::UnknownMetric(metric.to_string()));
    }
    if rows.is_empty() {
        return Err(Error::Config("cannot build a heatmap from zero rows".into()));
    }
    let layers: Vec<usize> = rows.iter().map(|r| r.layer).collect::<BTreeSet<_>>().into_iter().collect();
    let steps: Vec<u64> = rows.iter().map(|r| r.step).collect::<BTreeSet<_>>().into_iter().collect();
    let mut by_key = BTreeMap::new();
    for r in rows {
        by_key.insert((r.layer, r.step), r.metric(metric)?);
    }
    let cells = layers
        .iter()
        .map(|&l| steps.iter().map(|&s| by_key.get(&(l, s)).copied().flatten()).collect())
        .collect();
    Ok(Heatmap {
        metric: metric.to_string(),
        layers,
        steps,
        cells,
    })
}

impl Heatmap {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for s in &self.steps {
            out.push(',');
            out.push_str(&s.to_string());
        }
        out.push('\n');
        for (layer, row) in self.layers.iter().zip(&self.cells) {
            out.push_str(&layer.to_string());
            for cell in row {
                out.push(',');
                if let Some(v) = cell {
                    out.push_str(&fmt_f64(*v));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Writes a layers x steps CSV grid of `metric`.
pub fn export_heatmap(rows: &[MetricsRow], metric: &str, path: impl AsRef<Path>) -> Result<()> {
    let grid = heatmap_grid(rows, metric)?;
    let path = path.as_ref();
    std::fs::write(path, grid.to_csv()).map_err(|e| Error::io(path, e))
}

pub fn aggregates_csv(aggs: &[LayerAggregate]) -> String {
    let mut header = vec!["step".to_string(), "n_layers".to_string()];
    for c in LayerAggregate::COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_std"));
    }
    let mut out = header.join(",");
    out.push('\n');
    for a in aggs {
        let mut fields = vec![a.step.to_string(), a.n_layers.to_string()];
        for v in a.values() {
            fields.push(fmt_f64(v.mean));
            fields.push(fmt_f64(v.std));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> TensorStore {
        let mut s = TensorStore::new();
        s.insert_matrix("layers.0.attn.wq", &Matrix::from_rows(&[[1.0, -2.5], [3.25, 0.1]]), Dtype::F64)
            .unwrap();
        s.insert("layers.0.norm.gain", Tensor::from_vector(&[1.0, 2.0, 3.0], Dtype::F32))
            .unwrap();
        s.insert_matrix("layers.1.attn.wk", &Matrix::from_rows(&[[0.5, 0.25, 0.125]]), Dtype::F32)
            .unwrap();
        s
    }

    #[test]
    fn round_trip_preserves_order_and_bits() {
        let s = sample_store();
        let back = TensorStore::from_bytes(&s.to_bytes()).unwrap();
        assert!(s.bit_eq(&back));
        assert_eq!(back.names().collect::<Vec<_>>(), s.names().collect::<Vec<_>>());
        assert_eq!(back.layer_count(), 2);
    }

    #[test]
    fn empty_store_is_a_valid_file() {
        let bytes = TensorStore::new().to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert!(TensorStore::from_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn payloads_are_aligned() {
        let bytes = sample_store().to_bytes();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
        for line in header.lines() {
            let off: usize = line.split('\t').nth(3).unwrap().parse().unwrap();
            assert_eq!(off % 64, 0);
        }
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = sample_store().to_bytes();
        bytes[3] ^= 0xff;
        assert!(matches!(TensorStore::from_bytes(&bytes), Err(FormatError::BadMagic(_))));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = sample_store().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(TensorStore::from_bytes(cut), Err(FormatError::Truncated { .. })));
        assert!(matches!(TensorStore::from_bytes(&bytes[..5]), Err(FormatError::Truncated { .. })));
    }

    fn with_header(header: &str, payload_len: usize) -> Vec<u8> {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.resize(align_up(bytes.len()) + payload_len, 0);
        bytes
    }

    #[test]
    fn duplicate_names_rejected() {
        let bytes = with_header("a\tf32\t1\t0\t4\na\tf32\t1\t64\t4\n", 128);
        assert!(matches!(TensorStore::from_bytes(&bytes), Err(FormatError::DuplicateName(n)) if n == "a"));
    }

    #[test]
    fn byte_count_mismatch_rejected() {
        let bytes = with_header("a\tf64\t2,3\t0\t24\n", 64);
        assert!(matches!(
            TensorStore::from_bytes(&bytes),
            Err(FormatError::ByteCountMismatch { expected: 48, actual: 24, .. })
        ));
    }

    #[test]
    fn malformed_header_rejected() {
        let bytes = with_header("a\tf16\t2\t0\t4\n", 64);
        assert!(matches!(TensorStore::from_bytes(&bytes), Err(FormatError::Header { line: 1, .. })));
    }

    #[test]
    fn missing_tensor_is_named() {
        let err = sample_store().matrix("layers.0.attn.wv").unwrap_err();
        assert!(err.to_string().contains("layers.0.attn.wv"));
    }

    fn row(step: u64, layer: usize, gap: f64, entropy: Option<f64>) -> MetricsRow {
        MetricsRow {
            step,
            layer,
            variant: Variant::MlaDec,
            m: 32,
            d_in: 8,
            gamma: 4.0,
            lambda1: 0.1 + gap,
            mp_gap: gap,
            outlier_count: 0,
            outlier_energy: 0.0,
            mp_soft_rank: 0.3,
            stable_rank: 1.0 / 3.0,
            attention_entropy_bits: entropy,
        }
    }

    #[test]
    fn metrics_append_and_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        append_metrics_row(&path, &row(0, 0, 0.1, Some(2.0))).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), MetricsRow::HEADER.join(","));

        for step in 0..5 {
            for layer in 0..12 {
                if (step, layer) != (0, 0) {
                    append_metrics_row(&path, &row(step * 10, layer, 0.1, None)).unwrap();
                }
            }
        }
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.len(), 60);
        assert_eq!(rows[0], row(0, 0, 0.1, Some(2.0)));
    }

    #[test]
    fn malformed_metrics_rejected() {
        let text = format!("{}\n1,0,mha,4,4,x,1,1,1,1,1,1,\n", MetricsRow::HEADER.join(","));
        assert!(matches!(parse_metrics(&text), Err(FormatError::Metrics { row: 1, .. })));
        assert!(parse_metrics("step,layer\n").is_err());
    }

    #[test]
    fn heatmap_projection() {
        let rows: Vec<MetricsRow> = [0, 10, 20]
            .iter()
            .flat_map(|&s| (0..2).map(move |l| row(s, l, (s as f64) + l as f64, None)))
            .collect();
        let grid = heatmap_grid(&rows, "mp_gap").unwrap();
        assert_eq!(grid.layers, vec![0, 1]);
        assert_eq!(grid.steps, vec![0, 10, 20]);
        assert_eq!(grid.cells[1][2], Some(21.0));
        let csv = grid.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next().unwrap(), "layer,0,10,20");

        let missing = heatmap_grid(&rows[..5], "mp_gap").unwrap();
        assert_eq!(missing.cells[1][2], None);
        assert!(missing.to_csv().lines().last().unwrap().ends_with(','));

        let constant = heatmap_grid(&rows, "gamma").unwrap();
        assert!(constant.cells.iter().flatten().all(|c| *c == Some(4.0)));

        assert!(matches!(heatmap_grid(&rows, "nope"), Err(Error::UnknownMetric(_))));
    }

    proptest! {
        #[test]
        fn metrics_rows_round_trip_exactly(
            gap in any::<f64>().prop_filter("finite", |v| v.is_finite()),
            energy in 0.0f64..1.0,
            entropy in prop::option::of(0.0f64..8.0),
        ) {
            let mut r = row(7, 3, gap, entropy);
            r.outlier_energy = energy;
            let text = format!("{}\n{}\n", MetricsRow::HEADER.join(","), r.to_record().join(","));
            let back = parse_metrics(&text).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].mp_gap.to_bits(), gap.to_bits());
            prop_assert_eq!(&back[0], &r);
        }

        #[test]
        fn tensor_round_trip_is_bit_exact(
            a in prop::collection::vec(any::<f64>(), 1..50),
            b in prop::collection::vec(any::<f32>(), 1..50),
        ) {
            let mut s = TensorStore::new();
            s.insert("a", Tensor::new(vec![a.len()], TensorData::F64(a.clone())).unwrap()).unwrap();
            s.insert("b", Tensor::new(vec![1, b.len()], TensorData::F32(b.clone())).unwrap()).unwrap();
            let back = TensorStore::from_bytes(&s.to_bytes()).unwrap();
            prop_assert!(s.bit_eq(&back));
        }
    }
}
