//! Labeled feature datasets and the HVCF on-disk format.
//!
//! Layout (little-endian): magic `HVCF`, u32 version, u32 n, u32 dim,
//! u32 c_max, u8 has_labels, then `n` i32 labels when present, then
//! `n * dim` f32 values row-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{HvcmError, Result};
use crate::io_util::{write_atomic, Reader};

pub const FEATURE_MAGIC: [u8; 4] = *b"HVCF";
pub const FEATURE_VERSION: u32 = 1;
/// Label reserved for unlabeled / out-of-distribution rows.
pub const OOD_LABEL: i32 = -1;

const HEADER_LEN: usize = 4 + 4 * 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Binary,
    Csv,
}

impl FeatureFormat {
    /// `.csv` files are CSV, everything else is binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Binary,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub name: String,
    pub dim: usize,
    /// Exclusive upper bound on class ids.
    pub c_max: u32,
    pub labels: Option<Vec<i32>>,
    /// `n * dim` values, row-major.
    pub data: Vec<f32>,
}

impl FeatureDataset {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        c_max: u32,
        labels: Option<Vec<i32>>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let ds = FeatureDataset {
            name: name.into(),
            dim,
            c_max,
            labels,
            data,
        };
        ds.check_shape()?;
        ds.check_labels()?;
        Ok(ds)
    }

    /// Builds a dataset from 64-bit rows.
    pub fn from_rows(
        name: impl Into<String>,
        rows: &[Vec<f64>],
        labels: Option<Vec<i32>>,
        c_max: u32,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            crate::error::check_dim(dim, row.len())?;
            data.extend(row.iter().map(|&v| v as f32));
        }
        Self::new(name, dim, c_max, labels, data)
    }

    pub fn len(&self) -> usize {
        self.data
            .len()
            .checked_div(self.dim)
            .unwrap_or_else(|| self.labels.as_ref().map_or(0, Vec::len))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn label(&self, i: usize) -> Option<i32> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Row indices grouped by class id `0..c_max`. Rows labeled −1 are skipped.
    pub fn indices_by_class(&self) -> Result<Vec<Vec<usize>>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| HvcmError::Malformed(format!("dataset `{}` has no labels", self.name)))?;
        let mut out = vec![Vec::new(); self.c_max as usize];
        for (i, &l) in labels.iter().enumerate() {
            if l >= 0 {
                out[l as usize].push(i);
            }
        }
        Ok(out)
    }

    /// Copies the given rows, in order, into a new dataset.
    pub fn subset(&self, rows: &[usize], name: impl Into<String>) -> FeatureDataset {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        FeatureDataset {
            name: name.into(),
            dim: self.dim,
            c_max: self.c_max,
            labels: self.labels.as_ref().map(|l| rows.iter().map(|&r| l[r]).collect()),
            data,
        }
    }

    fn check_shape(&self) -> Result<()> {
        if self.dim == 0 {
            if !self.data.is_empty() {
                return Err(HvcmError::Malformed("dim is 0 but payload is non-empty".into()));
            }
            return Ok(());
        }
        if !self.data.len().is_multiple_of(self.dim) {
            return Err(HvcmError::Malformed(format!(
                "payload length {} is not a multiple of dim {}",
                self.data.len(),
                self.dim
            )));
        }
        if let Some(labels) = &self.labels {
            crate::error::check_dim(self.data.len() / self.dim, labels.len())?;
        }
        Ok(())
    }

    fn check_labels(&self) -> Result<()> {
        if let Some(labels) = &self.labels {
            for (row, &label) in labels.iter().enumerate() {
                if label < OOD_LABEL || (label >= 0 && label as u32 >= self.c_max) {
                    return Err(HvcmError::LabelOutOfRange {
                        row,
                        label,
                        c_max: self.c_max,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub dim: usize,
    pub nan_rows: Vec<usize>,
    pub inf_rows: Vec<usize>,
    pub out_of_range_rows: Vec<usize>,
    /// Every observed label, including −1.
    pub label_histogram: BTreeMap<i32, usize>,
    /// Per-class sample counts `N_c` for labels ≥ 0.
    pub class_counts: BTreeMap<u32, usize>,
    pub ood_count: usize,
}

impl ValidationReport {
    pub fn defect_count(&self) -> usize {
        self.nan_rows.len() + self.inf_rows.len() + self.out_of_range_rows.len()
    }

    pub fn is_clean(&self) -> bool {
        self.defect_count() == 0
    }

    /// Row indices holding any non-finite value.
    pub fn nonfinite_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.nan_rows.iter().chain(&self.inf_rows).copied().collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }
}

pub fn validate(ds: &FeatureDataset) -> ValidationReport {
    let n = ds.len();
    let mut report = ValidationReport {
        n,
        dim: ds.dim,
        nan_rows: Vec::new(),
        inf_rows: Vec::new(),
        out_of_range_rows: Vec::new(),
        label_histogram: BTreeMap::new(),
        class_counts: BTreeMap::new(),
        ood_count: 0,
    };
    for i in 0..n {
        let row = ds.row(i);
        if row.iter().any(|v| v.is_nan()) {
            report.nan_rows.push(i);
        }
        if row.iter().any(|v| v.is_infinite()) {
            report.inf_rows.push(i);
        }
    }
    if let Some(labels) = &ds.labels {
        for (i, &l) in labels.iter().enumerate() {
            *report.label_histogram.entry(l).or_default() += 1;
            if l == OOD_LABEL {
                report.ood_count += 1;
            } else if l >= 0 && (l as u32) < ds.c_max {
                *report.class_counts.entry(l as u32).or_default() += 1;
            } else {
                report.out_of_range_rows.push(i);
            }
        }
    }
    report
}

pub fn load_features(path: impl AsRef<Path>, format: FeatureFormat) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let bytes = fs::read(path)?;
    match format {
        FeatureFormat::Binary => decode_binary(&bytes, name),
        FeatureFormat::Csv => parse_csv(&bytes, name),
    }
}

pub fn save_features(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    let report = validate(ds);
    if let Some(&row) = report.nonfinite_rows().first() {
        return Err(HvcmError::NonFinite(row));
    }
    if let Some(&row) = report.out_of_range_rows.first() {
        return Err(HvcmError::LabelOutOfRange {
            row,
            label: ds.labels.as_ref().unwrap()[row],
            c_max: ds.c_max,
        });
    }
    write_atomic(path, &encode_binary(ds)?)
}

pub fn encode_binary(ds: &FeatureDataset) -> Result<Vec<u8>> {
    ds.check_shape()?;
    let n = u32::try_from(ds.len()).map_err(|_| HvcmError::Malformed("too many rows".into()))?;
    let dim = u32::try_from(ds.dim).map_err(|_| HvcmError::Malformed("dim too large".into()))?;
    let label_bytes = ds.labels.as_ref().map_or(0, |l| 4 * l.len());
    let mut out = Vec::with_capacity(HEADER_LEN + label_bytes + 4 * ds.data.len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&ds.c_max.to_le_bytes());
    out.push(u8::from(ds.labels.is_some()));
    if let Some(labels) = &ds.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    for v in &ds.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_binary(bytes: &[u8], name: impl Into<String>) -> Result<FeatureDataset> {
    let mut r = Reader::new(bytes);
    let magic = r.array4()?;
    if magic != FEATURE_MAGIC {
        return Err(HvcmError::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(HvcmError::UnsupportedVersion(version));
    }
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let c_max = r.u32()?;
    let has_labels = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(HvcmError::Malformed(format!("has_labels byte is {other}"))),
    };
    let expected = (n as u128) * (u128::from(has_labels) * 4 + dim as u128 * 4);
    if expected != r.remaining() as u128 {
        return Err(HvcmError::Truncated {
            expected: HEADER_LEN.saturating_add(usize::try_from(expected).unwrap_or(usize::MAX)),
            found: bytes.len(),
        });
    }
    let labels = if has_labels {
        Some((0..n).map(|_| r.i32()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let data = (0..n * dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    FeatureDataset::new(name, dim, c_max, labels, data)
}

fn parse_csv(bytes: &[u8], name: String) -> Result<FeatureDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut records = reader.records();
    let mut first = match records.next() {
        Some(rec) => Some(rec.map_err(csv_err)?),
        None => return FeatureDataset::new(name, 0, 0, None, Vec::new()),
    };
    let header = first
        .as_ref()
        .filter(|rec| rec.iter().any(|f| f.parse::<f64>().is_err()))
        .cloned();
    let labeled = match &header {
        Some(h) => {
            first = None;
            h.get(0).is_some_and(|f| f.eq_ignore_ascii_case("label"))
        }
        None => false,
    };
    let width = header.as_ref().or(first.as_ref()).map_or(0, |r| r.len());
    let dim = width - usize::from(labeled);
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let rows = first.into_iter().map(Ok).chain(records.map(|r| r.map_err(csv_err)));
    for (row, rec) in rows.enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(HvcmError::Malformed(format!(
                "csv row {row} has {} columns, expected {width}",
                rec.len()
            )));
        }
        let mut fields = rec.iter();
        if labeled {
            let raw = fields.next().unwrap();
            let label = raw
                .parse::<i32>()
                .map_err(|_| HvcmError::Malformed(format!("csv row {row}: bad label `{raw}`")))?;
            labels.push(label);
        }
        for f in fields {
            let v = f
                .parse::<f32>()
                .map_err(|_| HvcmError::Malformed(format!("csv row {row}: bad value `{f}`")))?;
            data.push(v);
        }
    }
    let c_max = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as u32);
    let labels = labeled.then_some(labels);
    if let Some(ls) = &labels {
        if let Some((row, &label)) = ls.iter().enumerate().find(|(_, &l)| l < OOD_LABEL) {
            return Err(HvcmError::LabelOutOfRange { row, label, c_max });
        }
    }
    if dim == 0 {
        return FeatureDataset::new(name, 0, c_max, labels, Vec::new());
    }
    FeatureDataset::new(name, dim, c_max, labels, data)
}

fn csv_err(e: csv::Error) -> HvcmError {
    HvcmError::Malformed(format!("csv: {e}"))
}

/// Stratified split: within every label stratum a seeded shuffle sends
/// `round(fraction * len)` rows to the first part. Both parts keep the
/// original row order.
pub fn split(
    ds: &FeatureDataset,
    fraction: f64,
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(HvcmError::invalid("fraction", format!("{fraction} is outside (0, 1)")));
    }
    let n = ds.len();
    if n < 2 {
        return Err(HvcmError::invalid("dataset", "split needs at least 2 rows"));
    }
    let mut strata: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        strata.entry(ds.label(i).unwrap_or(OOD_LABEL)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for rows in strata.values_mut() {
        rows.shuffle(&mut rng);
        let k = (fraction * rows.len() as f64).round() as usize;
        first.extend_from_slice(&rows[..k]);
        second.extend_from_slice(&rows[k..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((
        ds.subset(&first, format!("{}-a", ds.name)),
        ds.subset(&second, format!("{}-b", ds.name)),
    ))
}
