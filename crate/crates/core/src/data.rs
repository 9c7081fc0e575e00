//! Samples, datasets, CSV I/O and covariate stratification.
//!
//! A [`Dataset`] is stored column-wise: treatment and outcome as bytes and the
//! covariates as one flat row-major buffer of `n * d` doubles. Datasets are
//! immutable once built, so they can be shared freely across threads.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed unit: binary treatment, covariates, binary outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub z: u8,
    pub x: Vec<f64>,
    pub y: u8,
}

impl Sample {
    pub fn new(z: u8, x: Vec<f64>, y: u8) -> Self {
        Sample { z, x, y }
    }
}

/// Borrowed view of one row of a [`Dataset`].
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub z: u8,
    pub x: &'a [f64],
    pub y: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    z: Vec<u8>,
    y: Vec<u8>,
    x: Vec<f64>,
    d: usize,
    biased: bool,
    label: String,
}

impl Dataset {
    /// Builds a dataset from owned samples. All samples must share one
    /// covariate dimension and carry binary `z`/`y`. An empty sample list is
    /// allowed here (with `d = 0`); estimators reject it later.
    pub fn new(samples: Vec<Sample>, biased: bool, label: impl Into<String>) -> Result<Self> {
        let d = samples.first().map_or(0, |s| s.x.len());
        let mut ds = Dataset::with_capacity(d, samples.len(), biased, label);
        for (i, s) in samples.into_iter().enumerate() {
            if s.x.len() != d {
                return Err(Error::InvalidConfig(format!(
                    "sample {i} has {} covariates, expected {d}",
                    s.x.len()
                )));
            }
            if s.z > 1 || s.y > 1 {
                return Err(Error::InvalidConfig(format!("sample {i} has non-binary z or y")));
            }
            ds.push_unchecked(s.z, &s.x, s.y);
        }
        Ok(ds)
    }

    pub(crate) fn with_capacity(d: usize, n: usize, biased: bool, label: impl Into<String>) -> Self {
        Dataset {
            z: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            x: Vec::with_capacity(n * d),
            d,
            biased,
            label: label.into(),
        }
    }

    pub(crate) fn push_unchecked(&mut self, z: u8, x: &[f64], y: u8) {
        debug_assert_eq!(x.len(), self.d);
        self.z.push(z);
        self.y.push(y);
        self.x.extend_from_slice(x);
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn is_biased(&self) -> bool {
        self.biased
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn z(&self, i: usize) -> u8 {
        self.z[i]
    }

    pub fn y(&self, i: usize) -> u8 {
        self.y[i]
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn get(&self, i: usize) -> SampleRef<'_> {
        SampleRef {
            z: self.z[i],
            x: self.x(i),
            y: self.y[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = SampleRef<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn outcomes(&self) -> &[u8] {
        &self.y
    }

    pub fn to_samples(&self) -> Vec<Sample> {
        self.iter()
            .map(|s| Sample::new(s.z, s.x.to_vec(), s.y))
            .collect()
    }

    /// New dataset holding rows `indices` (repeats allowed), same flags.
    pub fn gather(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::with_capacity(self.d, indices.len(), self.biased, self.label.clone());
        for &i in indices {
            out.push_unchecked(self.z[i], self.x(i), self.y[i]);
        }
        out
    }

    /// Keeps rows where `mask` is true.
    pub fn filter(&self, mask: &[bool]) -> Dataset {
        assert_eq!(mask.len(), self.len());
        let mut out = Dataset::with_capacity(self.d, self.len(), self.biased, self.label.clone());
        for (i, _) in mask.iter().enumerate().filter(|(_, &k)| k) {
            out.push_unchecked(self.z[i], self.x(i), self.y[i]);
        }
        out
    }

    pub fn with_flags(mut self, biased: bool, label: impl Into<String>) -> Dataset {
        self.biased = biased;
        self.label = label.into();
        self
    }

    pub(crate) fn truncate(&mut self, n: usize) {
        self.z.truncate(n);
        self.y.truncate(n);
        self.x.truncate(n * self.d);
    }

    pub(crate) fn append(&mut self, other: &Dataset) {
        assert_eq!(self.d, other.d);
        self.z.extend_from_slice(&other.z);
        self.y.extend_from_slice(&other.y);
        self.x.extend_from_slice(&other.x);
    }

    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyDataset)
        } else {
            Ok(())
        }
    }
}

/// Covariate point used as a stratum key.
///
/// Equality is bit equality of the components; ordering is lexicographic
/// under `f64::total_cmp`, which agrees with that equality.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovPoint(pub Vec<f64>);

impl CovPoint {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl PartialEq for CovPoint {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for CovPoint {}

impl PartialOrd for CovPoint {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for CovPoint {
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}

impl fmt::Display for CovPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

/// Order-preserving integer image of `f64::total_cmp`.
fn ordered_bits(v: f64) -> u64 {
    let b = v.to_bits() as i64;
    let flipped = b ^ ((((b >> 63) as u64) >> 1) as i64);
    (flipped as u64) ^ (1 << 63)
}

fn from_ordered_bits(k: u64) -> f64 {
    let flipped = (k ^ (1 << 63)) as i64;
    let b = flipped ^ ((((flipped >> 63) as u64) >> 1) as i64);
    f64::from_bits(b as u64)
}

/// Fills `buf` with the ordered-bit key of a covariate vector. Keys compare
/// exactly like the corresponding [`CovPoint`]s.
pub(crate) fn point_key(x: &[f64], buf: &mut Vec<u64>) {
    buf.clear();
    buf.extend(x.iter().map(|&v| ordered_bits(v)));
}

pub(crate) fn key_to_point(key: &[u64]) -> CovPoint {
    CovPoint(key.iter().map(|&k| from_ordered_bits(k)).collect())
}

/// Groups sample indices by exact covariate value, in canonical point order.
pub fn strata(ds: &Dataset) -> BTreeMap<CovPoint, Vec<usize>> {
    let mut by_key: BTreeMap<Vec<u64>, Vec<usize>> = BTreeMap::new();
    let mut buf = Vec::with_capacity(ds.dim());
    for i in 0..ds.len() {
        point_key(ds.x(i), &mut buf);
        match by_key.get_mut(buf.as_slice()) {
            Some(v) => v.push(i),
            None => {
                by_key.insert(buf.clone(), vec![i]);
            }
        }
    }
    by_key
        .into_iter()
        .map(|(k, v)| (key_to_point(&k), v))
        .collect()
}

/// Distinct covariate points in canonical order.
pub fn distinct_points(ds: &Dataset) -> Vec<CovPoint> {
    let mut keys: std::collections::BTreeSet<Vec<u64>> = Default::default();
    let mut buf = Vec::with_capacity(ds.dim());
    for i in 0..ds.len() {
        point_key(ds.x(i), &mut buf);
        if !keys.contains(buf.as_slice()) {
            keys.insert(buf.clone());
        }
    }
    keys.iter().map(|k| key_to_point(k)).collect()
}

pub fn load_dataset(path: impl AsRef<Path>, biased: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_dataset(file, biased, label)
}

/// Parses the dataset CSV schema: header `z,y,x1,...,xd`, one sample per row.
pub fn read_dataset<R: Read>(reader: R, biased: bool, label: impl Into<String>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        None => return Err(Error::EmptyDataset),
        Some(r) => r.map_err(|e| csv_error(e, 1))?,
    };
    if header.len() < 2 || &header[0] != "z" || &header[1] != "y" {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with `z,y`".into(),
        });
    }
    let d = header.len() - 2;
    let mut ds = Dataset::with_capacity(d, 0, biased, label);
    let mut x = vec![0.0; d];

    for rec in records {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != d + 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} columns, found {}", d + 2, rec.len()),
            });
        }
        let z = parse_binary(&rec[0]).ok_or_else(|| Error::Parse {
            line,
            msg: "non-binary treatment".into(),
        })?;
        let y = parse_binary(&rec[1]).ok_or_else(|| Error::Parse {
            line,
            msg: "non-binary outcome".into(),
        })?;
        for (j, slot) in x.iter_mut().enumerate() {
            let v: f64 = rec[j + 2].parse().map_err(|_| Error::Parse {
                line,
                msg: format!("malformed covariate `{}`", &rec[j + 2]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: "non-finite covariate".into(),
                });
            }
            *slot = v;
        }
        ds.push_unchecked(z, &x, y);
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ds)
}

fn parse_binary(s: &str) -> Option<u8> {
    match s {
        "0" => Some(0),
        "1" => Some(1),
        _ => None,
    }
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Writes the dataset CSV schema. Covariates use the shortest decimal form
/// that round-trips to the same double.
pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> std::io::Result<()> {
    let mut line = String::from("z,y");
    for j in 1..=ds.dim() {
        line.push_str(&format!(",x{j}"));
    }
    writeln!(w, "{line}")?;
    for s in ds.iter() {
        line.clear();
        line.push_str(&format!("{},{}", s.z, s.y));
        for v in s.x {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(ds, &mut w).map_err(io_err)?;
    w.flush().map_err(io_err)
}
