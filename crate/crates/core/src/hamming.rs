//! Bit-packed binary codes, Hamming ranking and mean average precision.
//!
//! Packing convention: bit `k` of a code is set iff entry `k` is `+1`,
//! stored little-endian within `u64` words (bit `k` lives in word `k / 64`
//! at position `k % 64`). Bits past the code length are always zero.
//!
//! Code DB file: `"DSIBC"`, `u16 version`, `u32 code_bits`, `u32 count`,
//! `u32 label_dim`, then per item `u64 id`, the code words, and the label
//! bits packed the same way into `u64` words. All little-endian.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::binio::{put_u16, put_u32, put_u64, to_u32, ByteReader};
use crate::dataio::LabelMatrix;
use crate::error::{Error, Result};
use crate::nets::{sign_code, Mlp};
use crate::numkit::Matrix;
use crate::scalar::Scalar;

const DB_MAGIC: &[u8; 5] = b"DSIBC";
const DB_VERSION: u16 = 1;

#[inline]
pub fn words_per_code(code_bits: usize) -> usize {
    code_bits.div_ceil(64)
}

/// Packs one relaxed or ±1 code row via [`sign_code`].
pub fn pack_code<T: Scalar>(row: &[T]) -> Vec<u64> {
    let mut words = vec![0u64; words_per_code(row.len())];
    for (k, &v) in row.iter().enumerate() {
        if sign_code(v) > T::zero() {
            words[k / 64] |= 1 << (k % 64);
        }
    }
    words
}

/// Inverse of [`pack_code`] for binary codes.
pub fn unpack_code(words: &[u64], code_bits: usize) -> Vec<i8> {
    (0..code_bits)
        .map(|k| if words[k / 64] >> (k % 64) & 1 == 1 { 1 } else { -1 })
        .collect()
}

/// Hamming distance: popcount of the XOR over the first `code_bits` bits.
pub fn distance(a: &[u64], b: &[u64], code_bits: usize) -> Result<u32> {
    let w = words_per_code(code_bits);
    if a.len() != w || b.len() != w {
        return Err(Error::invalid(format!(
            "code length mismatch: {} and {} words for {code_bits} bits",
            a.len(),
            b.len()
        )));
    }
    Ok(hamming_words(a, b, code_bits))
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64], code_bits: usize) -> u32 {
    let tail = code_bits % 64;
    let last = a.len().saturating_sub(1);
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (&x, &y))| {
            let mut d = x ^ y;
            if i == last && tail != 0 {
                d &= (1u64 << tail) - 1;
            }
            d.count_ones()
        })
        .sum()
}

/// Immutable database of packed codes with aligned labels and ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedCodeDB {
    code_bits: usize,
    words: Vec<u64>,
    labels: LabelMatrix,
    ids: Vec<u64>,
}

impl PackedCodeDB {
    pub fn new(code_bits: usize, words: Vec<u64>, labels: LabelMatrix, ids: Vec<u64>) -> Result<Self> {
        if code_bits == 0 {
            return Err(Error::invalid("code_bits must be at least 1"));
        }
        let n = ids.len();
        let w = words_per_code(code_bits);
        if words.len() != n * w {
            return Err(Error::invalid(format!(
                "{} code words for {n} items of {code_bits} bits",
                words.len()
            )));
        }
        if labels.rows() != n {
            return Err(Error::invalid(format!("{} label rows for {n} items", labels.rows())));
        }
        let tail = code_bits % 64;
        if tail != 0 && (0..n).any(|i| words[i * w + w - 1] >> tail != 0) {
            return Err(Error::invalid("code bits set beyond code length"));
        }
        Ok(Self {
            code_bits,
            words,
            labels,
            ids,
        })
    }

    /// Binarizes and packs `codes`; row `i` gets `ids[i]` and label row `i`.
    pub fn from_codes<T: Scalar>(codes: &Matrix<T>, labels: LabelMatrix, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != codes.rows() {
            return Err(Error::invalid("id count != code rows"));
        }
        let words = (0..codes.rows()).flat_map(|i| pack_code(codes.row(i))).collect();
        Self::new(codes.cols(), words, labels, ids)
    }

    pub fn code_bits(&self) -> usize {
        self.code_bits
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn labels(&self) -> &LabelMatrix {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    #[inline]
    pub fn code(&self, i: usize) -> &[u64] {
        let w = words_per_code(self.code_bits);
        &self.words[i * w..(i + 1) * w]
    }

    /// Codes as a ±1 matrix.
    pub fn to_signs<T: Scalar>(&self) -> Matrix<T> {
        let mut m = Matrix::zeros(self.len(), self.code_bits);
        for i in 0..self.len() {
            for (v, b) in m.row_mut(i).iter_mut().zip(unpack_code(self.code(i), self.code_bits)) {
                *v = if b > 0 { T::one() } else { -T::one() };
            }
        }
        m
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            code_bits: self.code_bits,
            words: idx.iter().flat_map(|&i| self.code(i).to_vec()).collect(),
            labels: self.labels.select_rows(idx),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DB_MAGIC);
        put_u16(&mut out, DB_VERSION);
        put_u32(&mut out, to_u32(self.code_bits, "code bits")?);
        put_u32(&mut out, to_u32(self.len(), "item count")?);
        put_u32(&mut out, to_u32(self.labels.cols(), "label dim")?);
        for i in 0..self.len() {
            put_u64(&mut out, self.ids[i]);
            for &w in self.code(i) {
                put_u64(&mut out, w);
            }
            for &w in self.labels.row_words(i) {
                put_u64(&mut out, w);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.expect_magic(DB_MAGIC)?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != DB_VERSION {
            return Err(Error::format(at, format!("unsupported code DB version {version}")));
        }
        let at = r.offset();
        let code_bits = r.u32("code bits")? as usize;
        if code_bits == 0 {
            return Err(Error::format(at, "code_bits is zero"));
        }
        let n = r.u32("item count")? as usize;
        let label_dim = r.u32("label dim")? as usize;
        let cw = words_per_code(code_bits);
        let lw = LabelMatrix::words_per_row(label_dim);
        let record = 8 * (1 + cw + lw);
        if r.remaining() != n * record {
            return Err(Error::format(
                r.offset(),
                format!("expected {} bytes for {n} items, found {}", n * record, r.remaining()),
            ));
        }
        let mut ids = Vec::with_capacity(n);
        let mut words = Vec::with_capacity(n * cw);
        let mut label_words = Vec::with_capacity(n * lw);
        for _ in 0..n {
            ids.push(r.u64("id")?);
            for _ in 0..cw {
                words.push(r.u64("code word")?);
            }
            for _ in 0..lw {
                label_words.push(r.u64("label word")?);
            }
        }
        r.finish()?;
        let labels = LabelMatrix::from_words(n, label_dim, label_words)
            .map_err(|e| Error::format(0, e.to_string()))?;
        Self::new(code_bits, words, labels, ids).map_err(|e| Error::format(0, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Out-of-sample encoding: `sign(f(x))`, packed, with labels and ids attached.
pub fn encode<T: Scalar>(net: &Mlp<T>, x: &Matrix<T>, labels: LabelMatrix, ids: Vec<u64>) -> Result<PackedCodeDB> {
    PackedCodeDB::from_codes(&net.forward(x)?, labels, ids)
}

/// One ranked database item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Hit {
    /// Row in the database.
    pub index: usize,
    pub id: u64,
    pub distance: u32,
}

/// Ranks the whole database by `(distance, id)` and keeps the first `k`.
pub fn retrieve(query: &[u64], db: &PackedCodeDB, k: Option<usize>) -> Result<Vec<Hit>> {
    let w = words_per_code(db.code_bits);
    if query.len() != w {
        return Err(Error::invalid(format!(
            "query has {} words, database codes have {w}",
            query.len()
        )));
    }
    let mut hits: Vec<Hit> = (0..db.len())
        .map(|i| Hit {
            index: i,
            id: db.ids[i],
            distance: hamming_words(query, db.code(i), db.code_bits),
        })
        .collect();
    hits.sort_unstable_by_key(|h| (h.distance, h.id, h.index));
    if let Some(k) = k {
        hits.truncate(k);
    }
    Ok(hits)
}

/// A query's ranking with relevance flags.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedResult {
    pub query_id: u64,
    pub hits: Vec<Hit>,
    /// `relevant[j]` iff `hits[j]` shares a label with the query.
    pub relevant: Vec<bool>,
}

/// Ranks database items for query row `q` of `queries`.
pub fn rank(queries: &PackedCodeDB, q: usize, db: &PackedCodeDB, k: Option<usize>) -> Result<RankedResult> {
    check_compatible(queries, db)?;
    let hits = retrieve(queries.code(q), db, k)?;
    let relevant = hits
        .iter()
        .map(|h| queries.labels.shares_label(q, &db.labels, h.index))
        .collect();
    Ok(RankedResult {
        query_id: queries.ids[q],
        hits,
        relevant,
    })
}

fn check_compatible(queries: &PackedCodeDB, db: &PackedCodeDB) -> Result<()> {
    if queries.code_bits != db.code_bits {
        return Err(Error::invalid(format!(
            "bit length mismatch: queries {} vs database {}",
            queries.code_bits, db.code_bits
        )));
    }
    if queries.labels.cols() != db.labels.cols() {
        return Err(Error::invalid(format!(
            "label dimension mismatch: queries {} vs database {}",
            queries.labels.cols(),
            db.labels.cols()
        )));
    }
    Ok(())
}

/// Average precision over the first `radius` entries of a relevance list.
///
/// The normalizer is the number of relevant items inside the radius, so the
/// result never exceeds 1. Returns `None` when that number is zero.
pub fn average_precision(relevant: &[bool], radius: usize) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (j, &rel) in relevant.iter().take(radius).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (j + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// MAP summary; queries without any relevant item in range are skipped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MapReport {
    pub map: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Mean average precision of every query against `db`. `radius` defaults
/// to the database size.
pub fn mean_average_precision(queries: &PackedCodeDB, db: &PackedCodeDB, radius: Option<usize>) -> Result<MapReport> {
    check_compatible(queries, db)?;
    let radius = radius.unwrap_or(db.len()).min(db.len());
    let aps: Vec<Option<f64>> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let hits = retrieve(queries.code(q), db, Some(radius))?;
            let rel: Vec<bool> = hits
                .iter()
                .map(|h| queries.labels.shares_label(q, &db.labels, h.index))
                .collect();
            Ok(average_precision(&rel, radius))
        })
        .collect::<Result<_>>()?;
    let evaluated = aps.iter().flatten().count();
    let skipped = aps.len() - evaluated;
    if evaluated == 0 {
        return Err(Error::UndefinedMetric(format!(
            "none of {} queries has a relevant item within radius {radius}",
            queries.len()
        )));
    }
    let total: f64 = aps.iter().flatten().sum();
    Ok(MapReport {
        map: total / evaluated as f64,
        evaluated,
        skipped,
    })
}

/// Mean fraction of relevant items among each query's top `k`.
pub fn precision_at_k(queries: &PackedCodeDB, db: &PackedCodeDB, k: usize) -> Result<f64> {
    check_compatible(queries, db)?;
    if k == 0 || queries.is_empty() {
        return Err(Error::UndefinedMetric("precision@k needs k >= 1 and a query".into()));
    }
    let per: Vec<f64> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let r = rank(queries, q, db, Some(k))?;
            Ok(r.relevant.iter().filter(|&&b| b).count() as f64 / k as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> LabelMatrix {
        let mut l = LabelMatrix::zeros(n, 1);
        for i in 0..n {
            l.set(i, 0, true);
        }
        l
    }

    #[test]
    fn packing_convention() {
        let words = pack_code(&[0.3f64, -0.9, 0.0]);
        assert_eq!(words, vec![0b101]);
        assert_eq!(unpack_code(&words, 3), vec![1, -1, 1]);
    }

    #[test]
    fn distance_examples() {
        let a = pack_code(&[1.0f64; 70]);
        let b = pack_code(&[-1.0f64; 70]);
        assert_eq!(distance(&a, &a, 70).unwrap(), 0);
        assert_eq!(distance(&a, &b, 70).unwrap(), 70);
        assert!(distance(&a, &b[..1], 70).is_err());
    }

    #[test]
    fn stray_tail_bits_are_rejected() {
        assert!(PackedCodeDB::new(3, vec![0b1000], labels(1), vec![0]).is_err());
        assert!(PackedCodeDB::new(64, vec![u64::MAX], labels(1), vec![0]).is_ok());
    }

    #[test]
    fn exact_match_ranks_first_and_k_zero_is_empty() {
        let codes = Matrix::from_rows(&[[1.0, -1.0, 1.0, 1.0], [-1.0, -1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0]]).unwrap();
        let db = PackedCodeDB::from_codes(&codes, labels(3), vec![10, 11, 12]).unwrap();
        let q = pack_code(codes.row(1));
        let hits = retrieve(&q, &db, None).unwrap();
        assert_eq!(hits[0].id, 11);
        assert_eq!(hits[0].distance, 0);
        assert_eq!(hits.iter().map(|h| h.id).collect::<Vec<_>>(), vec![11, 10, 12]);
        assert!(retrieve(&q, &db, Some(0)).unwrap().is_empty());
        let empty = PackedCodeDB::new(4, vec![], LabelMatrix::zeros(0, 1), vec![]).unwrap();
        assert!(retrieve(&q, &empty, Some(3)).unwrap().is_empty());
    }

    #[test]
    fn ap_hand_example() {
        let ap = average_precision(&[true, false, true], 3).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true], 2), Some(1.0));
        assert_eq!(average_precision(&[false, true], 1), None);
    }

    #[test]
    fn map_perfect_and_undefined() {
        let codes = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0], [-1.0, -1.0], [-1.0, -1.0]]).unwrap();
        let y = LabelMatrix::from_binary_rows(&[[1u8, 0], [1, 0], [0, 1], [0, 1]]).unwrap();
        let db = PackedCodeDB::from_codes(&codes, y, vec![0, 1, 2, 3]).unwrap();
        let r = mean_average_precision(&db, &db, None).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.skipped, 0);

        let q_y = LabelMatrix::from_binary_rows(&[[1u8, 0]]).unwrap();
        let q = PackedCodeDB::from_codes(&Matrix::from_rows(&[[-1.0, -1.0]]).unwrap(), q_y, vec![9]).unwrap();
        assert!(matches!(
            mean_average_precision(&q, &db, Some(2)),
            Err(Error::UndefinedMetric(_))
        ));
        let other = PackedCodeDB::from_codes(&Matrix::<f64>::filled(1, 3, 1.0), labels(1), vec![0]).unwrap();
        assert!(mean_average_precision(&other, &db, None).is_err());
    }

    #[test]
    fn db_bytes_roundtrip_and_truncation() {
        let codes = Matrix::from_rows(&[[1.0; 70], [-1.0; 70]]).unwrap();
        let y = LabelMatrix::from_binary_rows(&[[1u8, 0, 1], [0, 1, 0]]).unwrap();
        let db = PackedCodeDB::from_codes(&codes, y, vec![5, 6]).unwrap();
        let bytes = db.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"DSIBC");
        assert_eq!(bytes.len(), 5 + 2 + 12 + 2 * 8 * (1 + 2 + 1));
        assert_eq!(PackedCodeDB::from_bytes(&bytes).unwrap(), db);
        assert!(matches!(
            PackedCodeDB::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format { .. })
        ));
    }
}
