//! Beam-embedding similarity and the wrapped-diagonal prior over discrete
//! rotations.
//!
//! For a reference embedding `a` (unrotated image) and a query embedding `b`
//! (image rotated by `k` beam steps), `b[j] = a[j + k]`, so the matching
//! pairs `(i, i − k mod B)` line up on one wrapped diagonal of the similarity
//! matrix. Summing each wrapped diagonal yields one logit per rotation.
//!
//! These are plain reference implementations; the differentiable versions
//! used in training live in [`crate::net::tape`].

use crate::angles::{k_to_theta, Angle};
use crate::{Error, Result};

/// `B × B` matrix, `Ξ[i][j] = 1 / (1 + ‖a_i − b_j‖₂)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for a {n}×{n} matrix",
                data.len()
            )));
        }
        Ok(Self { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn check_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} reference rows vs {} query rows",
            a.len(),
            b.len()
        )));
    }
    let l = a[0].len();
    if l == 0 || a.iter().chain(b).any(|r| r.len() != l) {
        return Err(Error::ShapeMismatch("embedding rows must share one nonzero length".into()));
    }
    Ok(l)
}

pub fn similarity(emb_a: &[Vec<f64>], emb_b: &[Vec<f64>]) -> Result<SimilarityMatrix> {
    check_rows(emb_a, emb_b)?;
    let n = emb_a.len();
    let mut data = Vec::with_capacity(n * n);
    for a in emb_a {
        for b in emb_b {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            data.push(1.0 / (1.0 + d2.sqrt()));
        }
    }
    Ok(SimilarityMatrix { n, data })
}

/// The `B` wrapped-diagonal masks and the diagonal → angle map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToeplitzExtractor {
    n: usize,
}

impl ToeplitzExtractor {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::DomainError("extractor needs at least one beam".into()));
        }
        Ok(Self { n })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Column paired with row `i` on diagonal `k`.
    #[inline]
    pub fn column(&self, k: usize, i: usize) -> usize {
        (i + self.n - k % self.n) % self.n
    }

    /// Whether cell `(i, j)` belongs to diagonal `k`.
    pub fn contains(&self, k: usize, i: usize, j: usize) -> bool {
        self.column(k, i) == j
    }

    /// Dense binary mask `T_k`.
    pub fn mask(&self, k: usize) -> Vec<Vec<u8>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.contains(k, i, j) as u8).collect())
            .collect()
    }

    /// The rotation angle encoded by diagonal `k`.
    pub fn angle(&self, k: usize) -> Angle {
        k_to_theta(k, self.n)
    }

    /// `logit_k = 1ᵀ (Ξ ⊙ T_k) 1`.
    pub fn logits(&self, xi: &SimilarityMatrix) -> Result<Vec<f64>> {
        if xi.n != self.n {
            return Err(Error::ShapeMismatch(format!(
                "{}×{} similarity for a {}-beam extractor",
                xi.n, xi.n, self.n
            )));
        }
        Ok((0..self.n)
            .map(|k| (0..self.n).map(|i| xi.get(i, self.column(k, i))).sum())
            .collect())
    }
}

pub fn toeplitz_logits(xi: &SimilarityMatrix, t: &ToeplitzExtractor) -> Result<Vec<f64>> {
    t.logits(xi)
}

/// Numerically stable softmax.
pub fn prior_distribution(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Query rows for a reference rotated by `k` beam steps: `b[j] = a[j + k]`.
pub fn shift_rows(rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = rows.len();
    (0..n).map(|j| rows[(j + k) % n].clone()).collect()
}
