//! State types shared by every other module: capitalizations, market
//! weights on the open simplex, rank permutations, entropy and the
//! ellipticity constant of a covariance matrix.

use nalgebra::DMatrix;

use crate::error::{domain, Error, Result};

/// Absolute tolerance on the sum of a weight vector.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

const JACOBI_OFF_DIAGONAL_TOLERANCE: f64 = 1e-14;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Strictly positive market capitalizations of `n >= 2` companies.
#[derive(Debug, Clone, PartialEq)]
pub struct CapitalizationVector(Vec<f64>);

impl CapitalizationVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(domain(format!(
                "a market needs at least 2 companies, got {}",
                values.len()
            )));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(domain(format!("capitalization {i} is {v}, must be finite and > 0")));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

/// A point of the open unit simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Validates without renormalizing, so exact boundary points stay exact.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(domain("a weight vector needs at least 2 entries"));
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w > 0.0 && **w < 1.0))
        {
            return Err(domain(format!("weight {i} is {w}, must lie in (0, 1)")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(domain(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self(weights))
    }

    /// Divides positive values by their sum.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(domain(format!("cannot normalize values with sum {sum}")));
        }
        Self::new(values.into_iter().map(|v| v / sum).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Largest weight, `mu_(1)`.
    pub fn largest(&self) -> f64 {
        largest_of(&self.0)
    }
}

pub(crate) fn largest_of(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Largest market weight of raw capitalizations, without validation.
pub(crate) fn largest_weight_of(caps: &[f64]) -> f64 {
    largest_of(caps) / caps.iter().sum::<f64>()
}

/// `perm[k]` is the index of the company holding rank `k` (zero based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankPermutation(Vec<usize>);

impl RankPermutation {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Index of the company ranked `k` (0 is the largest).
    pub fn at(&self, k: usize) -> usize {
        self.0[k]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The input reordered into non-increasing order.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.0.iter().map(|&i| values[i]).collect()
    }
}

/// Instantaneous covariance `a = sigma sigma'`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix(DMatrix<f64>);

impl CovarianceMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::Model(format!(
                "covariance must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..a.nrows() {
            for j in 0..i {
                if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Model(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self(a))
    }

    pub fn from_volatility(sigma: &DMatrix<f64>) -> Self {
        Self(sigma * sigma.transpose())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.0[(i, i)]).collect()
    }

    /// `u' a v`
    pub fn bilinear(&self, u: &[f64], v: &[f64]) -> f64 {
        let n = self.dim();
        let mut acc = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += self.0[(i, j)] * v[j];
            }
            acc += u[i] * row;
        }
        acc
    }
}

pub fn market_weights(x: &CapitalizationVector) -> WeightVector {
    let total = x.total();
    // Positive entries keep every ratio inside (0, 1) and the sum within a few ulps of 1.
    WeightVector(x.as_slice().iter().map(|v| v / total).collect())
}

/// Sorts indices by non-increasing value; equal values keep ascending index order.
pub fn rank_permutation(x: &[f64]) -> Result<RankPermutation> {
    if x.is_empty() {
        return Err(domain("cannot rank an empty vector"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(domain("cannot rank non-finite entries"));
    }
    let mut perm: Vec<usize> = (0..x.len()).collect();
    // sort_by is stable, which is exactly the ascending-index tie rule
    perm.sort_by(|&i, &j| x[j].partial_cmp(&x[i]).expect("finite entries"));
    Ok(RankPermutation(perm))
}

/// Shannon entropy `-sum mu_i ln mu_i` (natural log).
pub fn entropy(mu: &WeightVector) -> f64 {
    -mu.as_slice().iter().map(|m| m * m.ln()).sum::<f64>()
}

/// Smallest eigenvalue of `a` by cyclic Jacobi rotations. Errors unless positive.
pub fn ellipticity_constant(a: &CovarianceMatrix) -> Result<f64> {
    let eigenvalues = jacobi_eigenvalues(a.matrix())?;
    let smallest = eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if smallest > 0.0 {
        Ok(smallest)
    } else {
        Err(Error::Model(format!(
            "covariance is not positive definite (smallest eigenvalue {smallest})"
        )))
    }
}

fn off_diagonal_norm(m: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += m[i * n + j] * m[i * n + j];
            }
        }
    }
    acc.sqrt()
}

/// Eigenvalues of a symmetric matrix, unordered.
pub(crate) fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = a.nrows();
    let mut m: Vec<f64> = (0..n * n).map(|k| a[(k / n, k % n)]).collect();
    let scale = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !scale.is_finite() {
        return Err(Error::Model("covariance has non-finite entries".into()));
    }
    let threshold = JACOBI_OFF_DIAGONAL_TOLERANCE * scale.max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&m, n) <= threshold {
            return Ok((0..n).map(|i| m[i * n + i]).collect());
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    Err(Error::Invariant(
        "Jacobi eigenvalue iteration did not converge".into(),
    ))
}
