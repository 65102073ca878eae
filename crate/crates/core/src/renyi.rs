//! Matrix-based Rényi α-order entropy and mutual information.
//!
//! A batch of points is summarized by its Gaussian Gram matrix normalized to
//! unit trace. Entropy is a functional of that matrix's spectrum, so no
//! density estimate is needed. For the default order α = 2 the spectrum never
//! has to be computed: `Σ λ² = trace(A²) = Σ_ij A_ij²`, which also makes the
//! estimator cheaply differentiable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::scalar::Scalar;

const NORMALIZATION_TOL: f64 = 1e-9;
const SIGMA_FLOOR: f64 = 1e-6;

/// Rényi order α (positive, not 1).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct AlphaOrder(f64);

impl AlphaOrder {
    pub const TWO: AlphaOrder = AlphaOrder(2.0);

    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) || alpha == 1.0 {
            return Err(Error::invalid(format!(
                "entropy order must be positive and != 1, got {alpha}"
            )));
        }
        Ok(Self(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    fn is_two(self) -> bool {
        self.0 == 2.0
    }
}

impl Default for AlphaOrder {
    fn default() -> Self {
        Self::TWO
    }
}

impl TryFrom<f64> for AlphaOrder {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<AlphaOrder> for f64 {
    fn from(a: AlphaOrder) -> f64 {
        a.0
    }
}

/// Symmetric PSD kernel matrix normalized to unit trace.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix<T> {
    matrix: Matrix<T>,
    sigma: T,
}

impl<T: Scalar> GramMatrix<T> {
    /// Wraps an already-normalized matrix after validating symmetry and trace.
    pub fn from_normalized(matrix: Matrix<T>, sigma: T) -> Result<Self> {
        check_normalized(&matrix)?;
        Ok(Self { matrix, sigma })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }
}

fn check_normalized<T: Scalar>(m: &Matrix<T>) -> Result<()> {
    let n = m.rows();
    if n == 0 || m.cols() != n {
        return Err(Error::invalid(format!("Gram matrix must be square and non-empty, got {:?}", m.shape())));
    }
    let tr = m.trace().to_f64_lossy();
    if (tr - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::invalid(format!("Gram matrix not normalized: trace = {tr}")));
    }
    for i in 0..n {
        for j in i + 1..n {
            if m[(i, j)] != m[(j, i)] {
                return Err(Error::invalid(format!("Gram matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

fn squared_distances<T: Scalar>(points: &Matrix<T>) -> Matrix<T> {
    let n = points.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let s = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
            d[(i, j)] = s;
            d[(j, i)] = s;
        }
    }
    d
}

/// Unnormalized Gaussian kernel `exp(-‖p_i - p_j‖² / (2σ²))`; diagonal is 1.
fn kernel<T: Scalar>(points: &Matrix<T>, sigma: T) -> Result<Matrix<T>> {
    if !(sigma > T::zero() && sigma.is_finite()) {
        return Err(Error::invalid(format!("kernel bandwidth must be positive, got {sigma}")));
    }
    if points.rows() < 2 {
        return Err(Error::invalid("Gram matrix needs at least two points"));
    }
    let denom = T::lit(2.0) * sigma * sigma;
    let mut k = squared_distances(points).map(|d2| (-d2 / denom).exp());
    for i in 0..points.rows() {
        k[(i, i)] = T::one();
    }
    Ok(k)
}

/// Normalized Gaussian Gram matrix of `points` (one point per row).
pub fn gram<T: Scalar>(points: &Matrix<T>, sigma: T) -> Result<GramMatrix<T>> {
    let k = kernel(points, sigma)?;
    let n = T::from_usize_lossy(points.rows());
    Ok(GramMatrix {
        matrix: k.map(|v| v / n),
        sigma,
    })
}

fn hadamard_normalized<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!(
            "joint entropy needs equal sizes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut h = a.clone();
    for (x, &y) in h.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x *= y;
    }
    let tr = h.trace();
    if !(tr > T::zero()) {
        return Err(Error::Numeric("Hadamard product has non-positive trace".into()));
    }
    Ok(h.map(|v| v / tr))
}

fn entropy_of<T: Scalar>(m: &Matrix<T>, order: AlphaOrder) -> Result<T> {
    let h = if order.is_two() {
        -m.sum_sq().log2()
    } else {
        spectral_entropy(m, order)?
    };
    if !h.is_finite() {
        return Err(Error::Numeric("entropy is not finite".into()));
    }
    Ok(h)
}

/// `H_α(A) = log₂(Σ λ_i^α) / (1 - α)` in bits.
pub fn entropy<T: Scalar>(a: &GramMatrix<T>, order: AlphaOrder) -> Result<T> {
    check_normalized(&a.matrix)?;
    entropy_of(&a.matrix, order)
}

/// Entropy through an explicit eigendecomposition; valid for any order.
pub fn spectral_entropy<T: Scalar>(m: &Matrix<T>, order: AlphaOrder) -> Result<T> {
    check_normalized(m)?;
    let alpha = T::lit(order.value());
    let s = symmetric_eigenvalues(m)
        .into_iter()
        .filter(|&l| l > T::zero())
        .fold(T::zero(), |acc, l| acc + l.powf(alpha));
    Ok(s.log2() / (T::one() - alpha))
}

/// Joint entropy of the trace-normalized Hadamard product `A ∘ B`.
pub fn joint_entropy<T: Scalar>(a: &GramMatrix<T>, b: &GramMatrix<T>, order: AlphaOrder) -> Result<T> {
    let c = hadamard_normalized(&a.matrix, &b.matrix)?;
    entropy_of(&c, order)
}

/// `I_α(X;T) = H(X) + H(T) - H(X,T)`, unclamped.
///
/// Small negative values are estimator noise; use [`reported_mi`] when
/// displaying.
pub fn mutual_information<T: Scalar>(
    x_points: &Matrix<T>,
    t_points: &Matrix<T>,
    sigma_x: T,
    sigma_t: T,
    order: AlphaOrder,
) -> Result<T> {
    check_rows(x_points, t_points)?;
    let ax = gram(x_points, sigma_x)?;
    let at = gram(t_points, sigma_t)?;
    Ok(entropy(&ax, order)? + entropy(&at, order)? - joint_entropy(&ax, &at, order)?)
}

/// Mutual information clamped at zero for reporting.
pub fn reported_mi<T: Scalar>(mi: T) -> T {
    mi.max(T::zero())
}

fn check_rows<T: Scalar>(x: &Matrix<T>, t: &Matrix<T>) -> Result<()> {
    if x.rows() != t.rows() {
        return Err(Error::invalid(format!(
            "mutual information needs paired rows, got {} and {}",
            x.rows(),
            t.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::invalid("mutual information needs at least two rows"));
    }
    Ok(())
}

/// Mutual information (α = 2) and its exact gradient with respect to
/// `t_points`, with both bandwidths held fixed.
pub fn mi_gradient<T: Scalar>(
    x_points: &Matrix<T>,
    t_points: &Matrix<T>,
    sigma_x: T,
    sigma_t: T,
    order: AlphaOrder,
) -> Result<(T, Matrix<T>)> {
    if !order.is_two() {
        return Err(Error::UnsupportedOrder(order.value()));
    }
    check_rows(x_points, t_points)?;
    let n = t_points.rows();
    let ax = gram(x_points, sigma_x)?;
    let kt = kernel(t_points, sigma_t)?;
    let a = ax.matrix();

    // H(T) = -log2(Σ K² / n²); H(X,T) = -log2(Σ A²K² / d²), d = Σ_i A_ii K_ii.
    let nn = T::from_usize_lossy(n);
    let sum_k2 = kt.sum_sq();
    let mut sum_ak2 = T::zero();
    let mut d = T::zero();
    for i in 0..n {
        d += a[(i, i)] * kt[(i, i)];
        for j in 0..n {
            let p = a[(i, j)] * kt[(i, j)];
            sum_ak2 += p * p;
        }
    }
    let h_x = -a.sum_sq().log2();
    let h_t = -(sum_k2 / (nn * nn)).log2();
    let h_xt = -(sum_ak2 / (d * d)).log2();
    let value = h_x + h_t - h_xt;

    // dI/dK_ij for off-diagonal entries, then chain through the kernel.
    let two = T::lit(2.0);
    let c = two / T::LN_2();
    let inv_s2 = T::one() / (sigma_t * sigma_t);
    let mut grad = Matrix::zeros(n, t_points.cols());
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = kt[(i, j)];
            let aij2 = a[(i, j)] * a[(i, j)];
            let w = -c * k / sum_k2 + c * aij2 * k / sum_ak2;
            let coef = two * w * k * inv_s2;
            if coef == T::zero() {
                continue;
            }
            let (ti, tj) = (t_points.row(i), t_points.row(j));
            let diff: Vec<T> = tj.iter().zip(ti).map(|(&b, &a)| b - a).collect();
            for (g, dv) in grad.row_mut(i).iter_mut().zip(diff) {
                *g += coef * dv;
            }
        }
    }
    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::Numeric("mutual information gradient is not finite".into()));
    }
    Ok((value, grad))
}

/// Kernel bandwidth chosen by the median heuristic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bandwidth<T> {
    pub sigma: T,
    /// Set when every pairwise distance was below the floor.
    pub degenerate: bool,
}

/// Median of all pairwise Euclidean distances, floored at `1e-6`.
/// For an even number of pairs the two middle values are averaged.
pub fn select_sigma<T: Scalar>(points: &Matrix<T>) -> Result<Bandwidth<T>> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::invalid("bandwidth selection needs at least two points"));
    }
    let d2 = squared_distances(points);
    let mut dists: Vec<T> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(d2[(i, j)].sqrt());
        }
    }
    let m = dists.len();
    let cmp = |a: &T, b: &T| a.partial_cmp(b).expect("finite distances");
    let upper = *dists.select_nth_unstable_by(m / 2, cmp).1;
    let median = if m % 2 == 1 {
        upper
    } else {
        let lower = dists[..m / 2].iter().copied().fold(T::neg_infinity(), T::max);
        (lower + upper) / T::lit(2.0)
    };
    let floor = T::lit(SIGMA_FLOOR);
    if median < floor {
        Ok(Bandwidth {
            sigma: floor,
            degenerate: true,
        })
    } else {
        Ok(Bandwidth {
            sigma: median,
            degenerate: false,
        })
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let n = m.rows();
    let mut a = m.clone();
    let eps = T::epsilon();
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        let scale = a.sum_sq();
        if off <= eps * eps * scale || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[(i, i)]).collect()
}
