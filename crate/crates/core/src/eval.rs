//! Post-training measurements: cross-modal MAP, held-out code/input mutual
//! information and sign agreement between the two modality encoders.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataio::DatasetBundle;
use crate::error::{Error, Result};
use crate::hamming::{encode, mean_average_precision, MapReport, PackedCodeDB};
use crate::nets::Mlp;
use crate::numkit::Matrix;
use crate::renyi::{mutual_information, reported_mi, select_sigma, AlphaOrder};
use crate::scalar::Scalar;

/// Which modality queries which.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Modality-1 queries against a modality-2 database.
    #[serde(rename = "x2r")]
    XToR,
    /// Modality-2 queries against a modality-1 database.
    #[serde(rename = "r2x")]
    RToX,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::XToR, Direction::RToX];

    pub fn key(self) -> &'static str {
        match self {
            Direction::XToR => "x2r",
            Direction::RToX => "r2x",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::XToR => "X->R",
            Direction::RToX => "R->X",
        })
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x2r" | "x->r" | "xr" => Ok(Direction::XToR),
            "r2x" | "r->x" | "rx" => Ok(Direction::RToX),
            other => Err(Error::invalid(format!("unknown direction {other:?} (expected x2r or r2x)"))),
        }
    }
}

/// Code databases for the query and retrieval rows of a split bundle, one
/// per modality. Ids are the bundle row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSplit {
    pub query_x: PackedCodeDB,
    pub query_r: PackedCodeDB,
    pub retrieval_x: PackedCodeDB,
    pub retrieval_r: PackedCodeDB,
}

impl EncodedSplit {
    pub fn build<T: Scalar>(imgnet: &Mlp<T>, txtnet: &Mlp<T>, data: &DatasetBundle<T>) -> Result<Self> {
        let side = |idx: Vec<usize>| -> Result<(PackedCodeDB, PackedCodeDB)> {
            let labels = data.y.select_rows(&idx);
            let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
            let x = encode(imgnet, &data.x1.select_rows(&idx), labels.clone(), ids.clone())?;
            let r = encode(txtnet, &data.x2.select_rows(&idx), labels, ids)?;
            Ok((x, r))
        };
        let (query_x, query_r) = side(data.query_indices())?;
        let (retrieval_x, retrieval_r) = side(data.retrieval_indices())?;
        Ok(Self {
            query_x,
            query_r,
            retrieval_x,
            retrieval_r,
        })
    }

    /// (queries, database) for a direction.
    pub fn pair(&self, direction: Direction) -> (&PackedCodeDB, &PackedCodeDB) {
        match direction {
            Direction::XToR => (&self.query_x, &self.retrieval_r),
            Direction::RToX => (&self.query_r, &self.retrieval_x),
        }
    }

    pub fn map(&self, direction: Direction, radius: Option<usize>) -> Result<MapReport> {
        let (q, db) = self.pair(direction);
        mean_average_precision(q, db, radius)
    }
}

/// Mean over consecutive minibatches of `I(net(x); x)`, each with median
/// bandwidths and clamped at zero. A trailing batch of one row is folded
/// into the previous one.
pub fn heldout_mutual_information<T: Scalar>(
    net: &Mlp<T>,
    x: &Matrix<T>,
    batch_size: usize,
    order: AlphaOrder,
) -> Result<f64> {
    let n = x.rows();
    if n < 2 || batch_size < 2 {
        return Err(Error::invalid("held-out MI needs at least two rows and batch_size >= 2"));
    }
    let codes = net.forward(x)?;
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + batch_size).min(n);
        if n - end == 1 {
            end = n;
        }
        bounds.push((start, end));
        start = end;
    }
    let mut total = 0.0;
    for &(s, e) in &bounds {
        let idx: Vec<usize> = (s..e).collect();
        let xb = x.select_rows(&idx);
        let gb = codes.select_rows(&idx);
        let mi = mutual_information(&xb, &gb, select_sigma(&xb)?.sigma, select_sigma(&gb)?.sigma, order)?;
        total += reported_mi(mi).to_f64_lossy();
    }
    Ok(total / bounds.len() as f64)
}

/// Fraction of code bits on which the two encoders agree, over paired rows.
pub fn bit_agreement<T: Scalar>(net1: &Mlp<T>, x1: &Matrix<T>, net2: &Mlp<T>, x2: &Matrix<T>) -> Result<f64> {
    if x1.rows() != x2.rows() || x1.rows() == 0 {
        return Err(Error::invalid("bit agreement needs the same non-zero number of paired rows"));
    }
    if net1.code_bits() != net2.code_bits() {
        return Err(Error::invalid("encoders emit different code lengths"));
    }
    let g1 = net1.forward(x1)?;
    let g2 = net2.forward(x2)?;
    let same = g1
        .as_slice()
        .iter()
        .zip(g2.as_slice())
        .filter(|(a, b)| (**a >= T::zero()) == (**b >= T::zero()))
        .count();
    Ok(same as f64 / g1.as_slice().len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, split, SynthSpec};
    use crate::nets::NetSpec;

    #[test]
    fn direction_parsing_and_names() {
        assert_eq!("x2r".parse::<Direction>().unwrap(), Direction::XToR);
        assert_eq!("R->X".parse::<Direction>().unwrap(), Direction::RToX);
        assert!("sideways".parse::<Direction>().is_err());
        assert_eq!(Direction::XToR.to_string(), "X->R");
        assert_eq!(serde_json::to_string(&Direction::RToX).unwrap(), "\"r2x\"");
    }

    #[test]
    fn identical_encoders_agree_everywhere() {
        let net: Mlp<f64> = Mlp::init(&NetSpec::new(5, vec![6], 8, 2)).unwrap();
        let x = Matrix::from_f64_rows(&(0..7).map(|i| vec![i as f64 * 0.3 - 1.0; 5]).collect::<Vec<_>>()).unwrap();
        assert_eq!(bit_agreement(&net, &x, &net, &x).unwrap(), 1.0);
        // tanh is odd, so negating the output layer flips every non-zero bit.
        let mut layers = net.layers().to_vec();
        let last = layers.last_mut().unwrap();
        last.weight = last.weight.scale(-1.0);
        last.bias.iter_mut().for_each(|b| *b = -*b);
        let flipped = Mlp::from_layers(layers).unwrap();
        assert_eq!(bit_agreement(&net, &x, &flipped, &x).unwrap(), 0.0);
    }

    #[test]
    fn heldout_mi_is_nonnegative_and_chunk_stable() {
        let net: Mlp<f64> = Mlp::init(&NetSpec::new(4, vec![8], 8, 5)).unwrap();
        let x = Matrix::from_f64_rows(
            &(0..21).map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 11) as f64 / 5.0).collect::<Vec<f64>>()).collect::<Vec<_>>(),
        )
        .unwrap();
        let a = heldout_mutual_information(&net, &x, 10, AlphaOrder::TWO).unwrap();
        assert!(a >= 0.0 && a.is_finite());
        let whole = heldout_mutual_information(&net, &x, 100, AlphaOrder::TWO).unwrap();
        let sx = select_sigma(&x).unwrap().sigma;
        let g = net.forward(&x).unwrap();
        let direct = mutual_information(&x, &g, sx, select_sigma(&g).unwrap().sigma, AlphaOrder::TWO).unwrap();
        assert!((whole - direct.max(0.0)).abs() < 1e-12);
        assert!(heldout_mutual_information(&net, &x, 1, AlphaOrder::TWO).is_err());
    }

    #[test]
    fn encoded_split_uses_the_right_rows() {
        let d: DatasetBundle<f64> = generate_synthetic(&SynthSpec {
            samples_per_class: 10,
            d1: 6,
            d2: 5,
            ..SynthSpec::default()
        })
        .unwrap();
        let d = split(d, 8, 20, 1).unwrap();
        let img = Mlp::init(&NetSpec::new(6, vec![4], 8, 1)).unwrap();
        let txt = Mlp::init(&NetSpec::new(5, vec![4], 8, 2)).unwrap();
        let e = EncodedSplit::build(&img, &txt, &d).unwrap();
        let q: Vec<u64> = d.query_indices().iter().map(|&i| i as u64).collect();
        assert_eq!(e.query_x.ids(), &q[..]);
        assert_eq!(e.retrieval_r.len(), 32);
        let (qq, db) = e.pair(Direction::RToX);
        assert!(std::ptr::eq(qq, &e.query_r) && std::ptr::eq(db, &e.retrieval_x));
        let m = e.map(Direction::XToR, None).unwrap();
        assert!((0.0..=1.0).contains(&m.map));
    }
}
