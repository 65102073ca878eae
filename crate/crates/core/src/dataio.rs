//! Paired two-modality datasets: label and feature files, train/query/
//! retrieval splits, and a synthetic generator with class structure.
//!
//! Feature files are `"DSIBF"`, `u32 rows`, `u32 cols`, then `f32` values
//! row-major, all little-endian. Label files use the same layout with 0/1
//! values, or plain CSV of 0/1.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::binio::{put_u32, to_u32, ByteReader};
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::scalar::Scalar;

const FEATURE_MAGIC: &[u8; 5] = b"DSIBF";

/// Binary multi-label matrix, one bit-packed row per sample.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMatrix {
    rows: usize,
    cols: usize,
    words: Vec<u64>,
}

impl LabelMatrix {
    pub fn words_per_row(cols: usize) -> usize {
        cols.div_ceil(64)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            words: vec![0; rows * Self::words_per_row(cols)],
        }
    }

    pub fn from_rows<R: AsRef<[bool]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut m = Self::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!("label row {i} has {} entries, expected {cols}", r.len())));
            }
            for (j, &b) in r.iter().enumerate() {
                m.set(i, j, b);
            }
        }
        Ok(m)
    }

    /// Builds from 0/1 integer rows.
    pub fn from_binary_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let mut bools = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let row: Result<Vec<bool>> = r
                .as_ref()
                .iter()
                .map(|&v| match v {
                    0 => Ok(false),
                    1 => Ok(true),
                    v => Err(Error::invalid(format!("label row {i}: value {v} is not 0/1"))),
                })
                .collect();
            bools.push(row?);
        }
        Self::from_rows(&bools)
    }

    /// Builds from already packed words (`words_per_row(cols)` per row).
    pub fn from_words(rows: usize, cols: usize, words: Vec<u64>) -> Result<Self> {
        let wpr = Self::words_per_row(cols);
        if words.len() != rows * wpr {
            return Err(Error::invalid("packed label length does not match shape"));
        }
        let m = Self { rows, cols, words };
        let tail = cols % 64;
        if tail != 0 && (0..rows).any(|i| m.row_words(i)[wpr - 1] >> tail != 0) {
            return Err(Error::invalid("label bits set beyond label dimension"));
        }
        Ok(m)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row_words(&self, i: usize) -> &[u64] {
        let w = Self::words_per_row(self.cols);
        &self.words[i * w..(i + 1) * w]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        let w = Self::words_per_row(self.cols);
        self.words[i * w + j / 64] >> (j % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        let w = Self::words_per_row(self.cols);
        let word = &mut self.words[i * w + j / 64];
        if v {
            *word |= 1 << (j % 64);
        } else {
            *word &= !(1 << (j % 64));
        }
    }

    pub fn row_bools(&self, i: usize) -> Vec<bool> {
        (0..self.cols).map(|j| self.get(i, j)).collect()
    }

    /// True iff row `i` of `self` and row `j` of `other` share a set bit.
    #[inline]
    pub fn shares_label(&self, i: usize, other: &LabelMatrix, j: usize) -> bool {
        self.row_words(i)
            .iter()
            .zip(other.row_words(j))
            .any(|(a, b)| a & b != 0)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut words = Vec::with_capacity(idx.len() * Self::words_per_row(self.cols));
        for &i in idx {
            words.extend_from_slice(self.row_words(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            words,
        }
    }

    /// Label rows as a 0/1 real matrix (the label encoder's input).
    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                if self.get(i, j) {
                    m[(i, j)] = T::one();
                }
            }
        }
        m
    }

    /// Index of the first all-zero row, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.rows).find(|&i| self.row_words(i).iter().all(|&w| w == 0))
    }

    /// Distinct rows in first-occurrence order, plus each row's index into them.
    pub fn unique_rows(&self) -> (LabelMatrix, Vec<usize>) {
        let mut seen: HashMap<&[u64], usize> = HashMap::new();
        let mut firsts = Vec::new();
        let mut assign = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let key = self.row_words(i);
            let next = firsts.len();
            let id = *seen.entry(key).or_insert_with(|| {
                firsts.push(i);
                next
            });
            assign.push(id);
        }
        (self.select_rows(&firsts), assign)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.rows * self.cols * 2);
        for i in 0..self.rows {
            for j in 0..self.cols {
                if j > 0 {
                    s.push(',');
                }
                s.push(if self.get(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows: Vec<Vec<bool>> = Vec::new();
        let mut offset = 0u64;
        for (lineno, line) in text.split_inclusive('\n').enumerate() {
            let start = offset;
            offset += line.len() as u64;
            let body = line.trim();
            if body.is_empty() {
                continue;
            }
            let row: Result<Vec<bool>> = body
                .split(',')
                .map(|f| match f.trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::format(
                        start,
                        format!("line {}: label value {other:?} is not 0/1", lineno + 1),
                    )),
                })
                .collect();
            let row = row?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::format(
                        start,
                        format!("line {}: {} columns, expected {}", lineno + 1, row.len(), first.len()),
                    ));
                }
            }
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}

/// Serializes a feature matrix (values narrowed to `f32`).
pub fn features_to_bytes<T: Scalar>(m: &Matrix<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(13 + 4 * m.as_slice().len());
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, to_u32(m.rows(), "rows")?);
    put_u32(&mut out, to_u32(m.cols(), "cols")?);
    for &v in m.as_slice() {
        let f = v.to_f32().unwrap_or(f32::NAN);
        if !f.is_finite() {
            return Err(Error::Numeric(format!("feature value {v} not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn features_from_bytes<T: Scalar>(buf: &[u8]) -> Result<Matrix<T>> {
    let mut r = ByteReader::new(buf);
    r.expect_magic(FEATURE_MAGIC)?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let need = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(r.offset(), "matrix size overflows"))?;
    if r.remaining() != need {
        return Err(Error::format(
            r.offset(),
            format!(
                "expected {need} bytes of f32 data for {rows}x{cols}, found {}",
                r.remaining()
            ),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let at = r.offset();
        let v = r.f32("value")?;
        if !v.is_finite() {
            return Err(Error::format(at, "non-finite feature value"));
        }
        data.push(T::lit(v as f64));
    }
    r.finish()?;
    Matrix::new(rows, cols, data)
}

pub fn save_features<T: Scalar>(path: impl AsRef<Path>, m: &Matrix<T>) -> Result<()> {
    std::fs::write(path, features_to_bytes(m)?)?;
    Ok(())
}

pub fn load_features<T: Scalar>(path: impl AsRef<Path>) -> Result<Matrix<T>> {
    features_from_bytes(&std::fs::read(path)?)
}

/// Parses labels from either the binary feature layout or CSV.
pub fn labels_from_bytes(buf: &[u8]) -> Result<LabelMatrix> {
    if buf.starts_with(FEATURE_MAGIC) {
        let m: Matrix<f64> = features_from_bytes(buf)?;
        let mut labels = LabelMatrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                match m[(i, j)] {
                    0.0 => {}
                    1.0 => labels.set(i, j, true),
                    v => {
                        let at = 13 + 4 * (i * m.cols() + j) as u64;
                        return Err(Error::format(at, format!("label value {v} is not 0/1")));
                    }
                }
            }
        }
        Ok(labels)
    } else {
        let text = std::str::from_utf8(buf).map_err(|e| Error::format(e.valid_up_to() as u64, "label file is neither binary nor UTF-8 CSV"))?;
        LabelMatrix::from_csv(text)
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMatrix> {
    labels_from_bytes(&std::fs::read(path)?)
}

/// Writes labels as CSV when the path ends in `.csv`, binary otherwise.
pub fn save_labels(path: impl AsRef<Path>, labels: &LabelMatrix) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        std::fs::write(path, labels.to_csv())?;
    } else {
        std::fs::write(path, features_to_bytes(&labels.to_matrix::<f32>())?)?;
    }
    Ok(())
}

/// Role of a row after splitting. Training rows are also part of the
/// retrieval database.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Query,
    Retrieval,
    Train,
}

impl SplitTag {
    pub fn in_retrieval(self) -> bool {
        matches!(self, SplitTag::Retrieval | SplitTag::Train)
    }
}

/// Row-aligned image features, text features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle<T> {
    pub x1: Matrix<T>,
    pub x2: Matrix<T>,
    pub y: LabelMatrix,
    pub tags: Vec<SplitTag>,
}

impl<T: Scalar> DatasetBundle<T> {
    /// Validates alignment and label rows; every row starts in the retrieval set.
    pub fn new(x1: Matrix<T>, x2: Matrix<T>, y: LabelMatrix) -> Result<Self> {
        let n = x1.rows();
        if x2.rows() != n || y.rows() != n {
            return Err(Error::invalid(format!(
                "modalities are not row-aligned: {} / {} / {} rows",
                n,
                x2.rows(),
                y.rows()
            )));
        }
        if let Some(i) = y.first_empty_row() {
            return Err(Error::invalid(format!("label row {i} has no set bit")));
        }
        Ok(Self {
            x1,
            x2,
            y,
            tags: vec![SplitTag::Retrieval; n],
        })
    }

    pub fn len(&self) -> usize {
        self.y.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices_where(&self, pred: impl Fn(SplitTag) -> bool) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| pred(t))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn query_indices(&self) -> Vec<usize> {
        self.indices_where(|t| t == SplitTag::Query)
    }

    pub fn retrieval_indices(&self) -> Vec<usize> {
        self.indices_where(SplitTag::in_retrieval)
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_where(|t| t == SplitTag::Train)
    }

    /// Rows `idx` as a fresh bundle (tags carried over).
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x1: self.x1.select_rows(idx),
            x2: self.x2.select_rows(idx),
            y: self.y.select_rows(idx),
            tags: idx.iter().map(|&i| self.tags[i]).collect(),
        }
    }
}

/// Uniform random split: `query_count` query rows, `train_count` training
/// rows drawn from the remaining retrieval rows.
pub fn split<T: Scalar>(mut bundle: DatasetBundle<T>, query_count: usize, train_count: usize, seed: u64) -> Result<DatasetBundle<T>> {
    let n = bundle.len();
    if query_count + 1 > n {
        return Err(Error::invalid(format!(
            "query count {query_count} leaves no retrieval rows among {n}"
        )));
    }
    if train_count > n - query_count {
        return Err(Error::invalid(format!(
            "train count {train_count} exceeds the {} retrieval rows",
            n - query_count
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        bundle.tags[i] = if rank < query_count {
            SplitTag::Query
        } else if rank < query_count + train_count {
            SplitTag::Train
        } else {
            SplitTag::Retrieval
        };
    }
    Ok(bundle)
}

/// Parameters of the synthetic paired generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub class_count: usize,
    pub samples_per_class: usize,
    pub d1: usize,
    pub d2: usize,
    pub label_dim: usize,
    pub noise_sigma: f64,
    pub multilabel_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            class_count: 4,
            samples_per_class: 250,
            d1: 32,
            d2: 32,
            label_dim: 4,
            noise_sigma: 0.1,
            multilabel_rate: 0.0,
            seed: 0,
        }
    }
}

/// Dimension of the shared latent space prototypes are drawn in.
pub const SYNTH_LATENT_DIM: usize = 16;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.samples_per_class == 0 || self.d1 == 0 || self.d2 == 0 {
            return Err(Error::invalid("synthetic counts and dimensions must be at least 1"));
        }
        if self.label_dim < self.class_count {
            return Err(Error::invalid("label_dim must be at least class_count"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.multilabel_rate) {
            return Err(Error::invalid("multilabel_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Generates a paired bimodal dataset with class structure.
///
/// Each class gets a Gaussian prototype in a shared latent space; each
/// modality observes a sample's latent code through its own fixed random
/// linear map plus isotropic noise. A sample that draws a second label sits
/// at the mean of its classes' prototypes. Samples are laid out class-major.
pub fn generate_synthetic<T: Scalar>(spec: &SynthSpec) -> Result<DatasetBundle<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    let l = SYNTH_LATENT_DIM;
    let protos: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| (0..l).map(|_| gauss(&mut rng)).collect())
        .collect();
    let scale = 1.0 / (l as f64).sqrt();
    let map1: Vec<f64> = (0..spec.d1 * l).map(|_| gauss(&mut rng) * scale).collect();
    let map2: Vec<f64> = (0..spec.d2 * l).map(|_| gauss(&mut rng) * scale).collect();

    let n = spec.class_count * spec.samples_per_class;
    let mut x1 = Vec::with_capacity(n * spec.d1);
    let mut x2 = Vec::with_capacity(n * spec.d2);
    let mut labels = LabelMatrix::zeros(n, spec.label_dim);
    let project = |map: &[f64], d: usize, z: &[f64], out: &mut Vec<f64>, noise: &mut dyn FnMut() -> f64| {
        for r in 0..d {
            let v: f64 = map[r * l..(r + 1) * l].iter().zip(z).map(|(a, b)| a * b).sum();
            out.push(v + spec.noise_sigma * noise());
        }
    };
    for class in 0..spec.class_count {
        for s in 0..spec.samples_per_class {
            let row = class * spec.samples_per_class + s;
            labels.set(row, class, true);
            let mut latent = protos[class].clone();
            if spec.class_count > 1 && spec.multilabel_rate > 0.0 && rng.random_bool(spec.multilabel_rate) {
                let mut other = rng.random_range(0..spec.class_count - 1);
                if other >= class {
                    other += 1;
                }
                labels.set(row, other, true);
                for (z, p) in latent.iter_mut().zip(&protos[other]) {
                    *z = 0.5 * (*z + p);
                }
            }
            let mut noise = || gauss(&mut rng);
            project(&map1, spec.d1, &latent, &mut x1, &mut noise);
            project(&map2, spec.d2, &latent, &mut x2, &mut noise);
        }
    }
    let conv = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
    DatasetBundle::new(
        Matrix::new(n, spec.d1, conv(x1))?,
        Matrix::new(n, spec.d2, conv(x2))?,
        labels,
    )
}
