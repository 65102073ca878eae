//! Objective terms and their analytic gradients.
//!
//! * [`labnet_loss`]: pairwise likelihood of semantic similarity plus a
//!   quantization penalty, for the label encoder.
//! * [`weighted_ce_loss`]: softmax cross-entropy whose class weights are the
//!   label encoder's binary class codes.
//! * [`mutual_information`](crate::renyi::mi_gradient) between raw features
//!   and relaxed codes, the compression term.
//! * [`consistency_loss`]: ℓ2 pull of modality codes toward the label codes.
//!
//! [`modality_loss`] combines the last three for an image or text encoder.

use serde::{Deserialize, Serialize};

use crate::dataio::LabelMatrix;
use crate::error::{Error, Result};
use crate::nets::{binarize, Mlp, MlpGrad};
use crate::numkit::{matmul, sigmoid, softplus, Matrix};
use crate::renyi::{mi_gradient, select_sigma, AlphaOrder};
use crate::scalar::Scalar;

/// Binary pairwise relevance: 1 iff two samples share a label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<bool>,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let data = self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Matrix::new(self.n, self.n, data).expect("0/1 entries are finite")
    }
}

pub fn similarity_from_labels(y: &LabelMatrix) -> Result<SimilarityMatrix> {
    if let Some(i) = y.first_empty_row() {
        return Err(Error::invalid(format!("label row {i} is empty; relevance undefined")));
    }
    let n = y.rows();
    let mut data = vec![false; n * n];
    for i in 0..n {
        for j in i..n {
            let s = y.shares_label(i, y, j);
            data[i * n + j] = s;
            data[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, data })
}

/// Distinct label rows and the ±1 code the label encoder assigns each.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCodeTable<T> {
    pub class_labels: LabelMatrix,
    pub class_codes: Matrix<T>,
}

impl<T: Scalar> ClassCodeTable<T> {
    pub fn class_count(&self) -> usize {
        self.class_labels.rows()
    }

    /// Class id of every row of `y`; rows absent from the table are an error.
    pub fn assign(&self, y: &LabelMatrix) -> Result<Vec<usize>> {
        let index: std::collections::HashMap<&[u64], usize> = (0..self.class_count())
            .map(|c| (self.class_labels.row_words(c), c))
            .collect();
        (0..y.rows())
            .map(|i| {
                index
                    .get(y.row_words(i))
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("label row {i} is not a known class")))
            })
            .collect()
    }
}

/// Deduplicates label rows (first-occurrence order) and codes each class
/// with `sign(labnet(label))`.
pub fn class_table_build<T: Scalar>(y: &LabelMatrix, labnet: &Mlp<T>) -> Result<ClassCodeTable<T>> {
    let (class_labels, _) = y.unique_rows();
    let codes = binarize(&labnet.forward(&class_labels.to_matrix())?);
    Ok(ClassCodeTable {
        class_labels,
        class_codes: codes,
    })
}

/// Weights of the modality objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Compression (mutual information) weight.
    pub beta: f64,
    /// Cross-modal consistency weight.
    pub gamma: f64,
    /// Quantization weight in the label encoder loss.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.1,
            gamma: 1.0,
            eta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma), ("eta", self.eta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_shape<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("{what}: shape {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Label encoder loss over a batch and its gradient on `outputs`.
///
/// `Σ_{l,j} [log(1 + e^{Δ_lj}) - S_lj Δ_lj] + η Σ_l ‖b_l - f_l‖²` with
/// `Δ = F Fᵀ`. The binary codes are constants.
pub fn labnet_loss<T: Scalar>(
    outputs: &Matrix<T>,
    binary_codes: &Matrix<T>,
    s: &SimilarityMatrix,
    eta: T,
) -> Result<(T, Matrix<T>)> {
    check_shape(outputs, binary_codes, "labnet_loss codes")?;
    let n = outputs.rows();
    if s.size() != n {
        return Err(Error::invalid(format!("similarity is {0}x{0}, batch has {n} rows", s.size())));
    }
    let delta = matmul(outputs, &outputs.transpose())?;
    let mut value = T::zero();
    // dL/dΔ = σ(Δ) - S
    let mut e = Matrix::zeros(n, n);
    for l in 0..n {
        for j in 0..n {
            let d = delta[(l, j)];
            let sim = if s.get(l, j) { T::one() } else { T::zero() };
            value += softplus(d) - sim * d;
            e[(l, j)] = sigmoid(d) - sim;
        }
    }
    let mut sym = e.clone();
    for l in 0..n {
        for j in 0..n {
            sym[(l, j)] = e[(l, j)] + e[(j, l)];
        }
    }
    let mut grad = matmul(&sym, outputs)?;
    let two_eta = T::lit(2.0) * eta;
    for ((g, &f), &b) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(outputs.as_slice())
        .zip(binary_codes.as_slice())
    {
        value += eta * (b - f) * (b - f);
        *g += two_eta * (f - b);
    }
    Ok((value, grad))
}

/// Softmax cross-entropy against class codes, averaged over the batch.
///
/// Logits are `ḡ_l · g_i`; the target of row `i` is `class_index[i]`.
pub fn weighted_ce_loss<T: Scalar>(
    codes: &Matrix<T>,
    class_index: &[usize],
    table: &ClassCodeTable<T>,
) -> Result<(T, Matrix<T>)> {
    let n = codes.rows();
    if class_index.len() != n {
        return Err(Error::invalid("class index length != batch rows"));
    }
    let k = table.class_count();
    if let Some(&bad) = class_index.iter().find(|&&c| c >= k) {
        return Err(Error::invalid(format!("class index {bad} out of range for {k} classes")));
    }
    if table.class_codes.cols() != codes.cols() {
        return Err(Error::invalid("class code length != code length"));
    }
    if n == 0 {
        return Ok((T::zero(), codes.clone()));
    }
    let logits = matmul(codes, &table.class_codes.transpose())?;
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut value = T::zero();
    let mut dlogits = Matrix::zeros(n, k);
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + z.ln();
        value += lse - row[class_index[i]];
        for (l, d) in dlogits.row_mut(i).iter_mut().enumerate() {
            let a = (row[l] - lse).exp();
            let target = if l == class_index[i] { T::one() } else { T::zero() };
            *d = (a - target) * inv_n;
        }
    }
    let grad = matmul(&dlogits, &table.class_codes)?;
    Ok((value * inv_n, grad))
}

/// `Σ_i ‖g_i^y - g_i^m‖²` and its gradient `2 (g^m - g^y)`.
pub fn consistency_loss<T: Scalar>(codes_m: &Matrix<T>, codes_y: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    check_shape(codes_m, codes_y, "consistency_loss")?;
    let two = T::lit(2.0);
    let mut value = T::zero();
    let mut grad = Matrix::zeros(codes_m.rows(), codes_m.cols());
    for ((g, &m), &y) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(codes_m.as_slice())
        .zip(codes_y.as_slice())
    {
        let d = m - y;
        value += d * d;
        *g = two * d;
    }
    Ok((value, grad))
}

/// How kernel bandwidths are chosen for the compression term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BandwidthRule<T> {
    /// Median pairwise distance of the batch, held constant in the gradient.
    Median,
    Fixed { features: T, codes: T },
}

/// One minibatch for an image or text encoder.
#[derive(Clone, Copy, Debug)]
pub struct ModalityBatch<'a, T> {
    pub features: &'a Matrix<T>,
    pub class_index: &'a [usize],
    /// Binary label-encoder codes of the same rows.
    pub label_codes: &'a Matrix<T>,
}

/// Loss components and the parameter gradient of their weighted sum.
#[derive(Clone, Debug)]
pub struct ModalityLoss<T> {
    pub total: T,
    pub cross_entropy: T,
    /// Unclamped estimate of I(codes; features) in bits.
    pub mutual_information: T,
    pub consistency: T,
    pub grad: MlpGrad<T>,
}

/// `L1 + β·L2 + γ·L3` for one modality encoder, back-propagated to its
/// parameters.
pub fn modality_loss<T: Scalar>(
    net: &Mlp<T>,
    batch: ModalityBatch<'_, T>,
    table: &ClassCodeTable<T>,
    weights: &LossWeights,
    order: AlphaOrder,
    bandwidth: BandwidthRule<T>,
) -> Result<ModalityLoss<T>> {
    let trace = net.forward_trace(batch.features)?;
    let codes = trace.output();
    let (ce, g_ce) = weighted_ce_loss(codes, batch.class_index, table)?;
    let (sx, st) = match bandwidth {
        BandwidthRule::Median => (select_sigma(batch.features)?.sigma, select_sigma(codes)?.sigma),
        BandwidthRule::Fixed { features, codes } => (features, codes),
    };
    let (mi, g_mi) = mi_gradient(batch.features, codes, sx, st, order)?;
    let (cons, g_cons) = consistency_loss(codes, batch.label_codes)?;
    let beta = T::lit(weights.beta);
    let gamma = T::lit(weights.gamma);
    let total = ce + beta * mi + gamma * cons;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "modality loss not finite (ce={ce}, mi={mi}, consistency={cons})"
        )));
    }
    let mut upstream = g_ce;
    for ((u, &a), &b) in upstream
        .as_mut_slice()
        .iter_mut()
        .zip(g_mi.as_slice())
        .zip(g_cons.as_slice())
    {
        *u += beta * a + gamma * b;
    }
    let grad = net.backward_trace(&trace, &upstream)?;
    Ok(ModalityLoss {
        total,
        cross_entropy: ce,
        mutual_information: mi,
        consistency: cons,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetSpec;
    use crate::numkit::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, r: usize, c: usize, scale: f64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn random_labels(seed: u64, n: usize, d: usize) -> LabelMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = LabelMatrix::zeros(n, d);
        for i in 0..n {
            l.set(i, rng.random_range(0..d), true);
            for j in 0..d {
                if rng.random_bool(0.2) {
                    l.set(i, j, true);
                }
            }
        }
        l
    }

    #[test]
    fn similarity_examples() {
        let y = LabelMatrix::from_binary_rows(&[[1u8, 0], [1, 0], [0, 1]]).unwrap();
        let s = similarity_from_labels(&y).unwrap();
        assert!(s.get(0, 1) && s.get(1, 0) && s.get(0, 0));
        assert!(!s.get(0, 2) && !s.get(2, 1));
        let empty = LabelMatrix::from_binary_rows(&[[1u8, 0], [0, 0]]).unwrap();
        assert!(similarity_from_labels(&empty).is_err());
    }

    #[test]
    fn similarity_matches_dot_product() {
        let y = random_labels(4, 20, 5);
        let s = similarity_from_labels(&y).unwrap();
        let m = y.to_matrix::<f64>();
        for i in 0..20 {
            for j in 0..20 {
                let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                assert_eq!(s.get(i, j), dot > 0.0);
            }
        }
    }

    #[test]
    fn labnet_loss_at_zero_is_log_two() {
        let z = Matrix::<f64>::zeros(1, 4);
        let b = Matrix::filled(1, 4, 1.0);
        for sim in [[1u8], [0u8]] {
            // A single-sample batch: only the (0, 0) pair, Δ = 0.
            let s = SimilarityMatrix { n: 1, data: vec![sim[0] == 1] };
            let (v, _) = labnet_loss(&z, &b, &s, 0.0).unwrap();
            assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn labnet_gradient_sign_follows_similarity() {
        // ∂L/∂Δ = σ(Δ) - S: increasing agreement helps similar pairs.
        let f = Matrix::from_rows(&[[0.3, 0.2], [0.25, 0.1]]).unwrap();
        let b = binarize(&f);
        let sim = SimilarityMatrix { n: 2, data: vec![true; 4] };
        let dis = SimilarityMatrix { n: 2, data: vec![true, false, false, true] };
        let scaled = f.scale(1.1);
        let (l0, _) = labnet_loss(&f, &b, &sim, 0.0).unwrap();
        let (l1, _) = labnet_loss(&scaled, &b, &sim, 0.0).unwrap();
        assert!(l1 < l0);
        let mut f2 = f.clone();
        f2[(1, 0)] += 0.1;
        let (d0, _) = labnet_loss(&f, &b, &dis, 0.0).unwrap();
        let (d1, _) = labnet_loss(&f2, &b, &dis, 0.0).unwrap();
        let (s0, _) = labnet_loss(&f, &b, &sim, 0.0).unwrap();
        let (s1, _) = labnet_loss(&f2, &b, &sim, 0.0).unwrap();
        // Off-diagonal Δ_01 grows in both; self-pairs are shared.
        assert!(d1 - d0 > s1 - s0);
    }

    #[test]
    fn labnet_gradient_matches_finite_differences() {
        let y = random_labels(1, 8, 4);
        let s = similarity_from_labels(&y).unwrap();
        let f = random(2, 8, 6, 0.9);
        let b = binarize(&random(3, 8, 6, 1.0));
        let err = grad_check(|f| labnet_loss(f, &b, &s, 1.0), &f, 1e-4).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn class_table_dedups_in_order() {
        let y = LabelMatrix::from_binary_rows(&[[1u8, 0], [1, 0], [0, 1]]).unwrap();
        let net = Mlp::<f64>::init(&NetSpec::new(2, vec![4], 8, 1)).unwrap();
        let t = class_table_build(&y, &net).unwrap();
        assert_eq!(t.class_count(), 2);
        assert_eq!(t.class_labels.row_bools(0), vec![true, false]);
        assert_eq!(t.class_labels.row_bools(1), vec![false, true]);
        assert!(t.class_codes.as_slice().iter().all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(t.assign(&y).unwrap(), vec![0, 0, 1]);
        let same = LabelMatrix::from_binary_rows(&[[1u8, 1]; 5]).unwrap();
        assert_eq!(class_table_build(&same, &net).unwrap().class_count(), 1);
        let unknown = LabelMatrix::from_binary_rows(&[[1u8, 1]]).unwrap();
        assert!(t.assign(&unknown).is_err());
    }

    fn table_from(codes: Matrix<f64>) -> ClassCodeTable<f64> {
        let k = codes.rows();
        let mut labels = LabelMatrix::zeros(k, k);
        for c in 0..k {
            labels.set(c, c, true);
        }
        ClassCodeTable { class_labels: labels, class_codes: codes }
    }

    #[test]
    fn single_class_ce_is_zero() {
        let t = table_from(Matrix::filled(1, 4, 1.0));
        let (v, g) = weighted_ce_loss(&random(1, 5, 4, 0.9), &[0; 5], &t).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn ce_below_log_two_when_codes_match_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let codes = binarize(&Matrix::new(2, 16, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let t = table_from(codes.clone());
        let (exact, _) = weighted_ce_loss(&codes, &[0, 1], &t).unwrap();
        let (half, _) = weighted_ce_loss(&codes.scale(0.5), &[0, 1], &t).unwrap();
        let (tenth, _) = weighted_ce_loss(&codes.scale(0.1), &[0, 1], &t).unwrap();
        assert!(exact < std::f64::consts::LN_2);
        assert!(exact < half && half < tenth);
    }

    #[test]
    fn ce_rejects_bad_class_index() {
        let t = table_from(Matrix::filled(2, 4, 1.0));
        assert!(weighted_ce_loss(&random(1, 2, 4, 0.5), &[0, 2], &t).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let t = table_from(binarize(&random(5, 4, 8, 1.0)));
        let idx = [0, 3, 1, 1, 2, 0];
        let err = grad_check(|g| weighted_ce_loss(g, &idx, &t), &random(6, 6, 8, 0.9), 1e-4).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn consistency_examples() {
        let y = Matrix::from_rows(&[[1.0, -1.0, 1.0]]).unwrap();
        assert_eq!(consistency_loss(&y, &y).unwrap().0, 0.0);
        let m = Matrix::from_rows(&[[1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(consistency_loss(&m, &y).unwrap().0, 4.0);
        assert!(consistency_loss(&m, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn modality_loss_reduces_to_ce_without_regularizers() {
        let net = Mlp::<f64>::init(&NetSpec::new(5, vec![8], 8, 4)).unwrap();
        let x = random(7, 8, 5, 1.0);
        let t = table_from(binarize(&random(8, 3, 8, 1.0)));
        let idx = [0, 1, 2, 0, 1, 2, 0, 1];
        let gy = t.class_codes.select_rows(&idx);
        let w = LossWeights { beta: 0.0, gamma: 0.0, eta: 1.0 };
        let batch = ModalityBatch { features: &x, class_index: &idx, label_codes: &gy };
        let l = modality_loss(&net, batch, &t, &w, AlphaOrder::TWO, BandwidthRule::Median).unwrap();
        let (ce, _) = weighted_ce_loss(&net.forward(&x).unwrap(), &idx, &t).unwrap();
        assert_eq!(l.total, ce);
    }
}
