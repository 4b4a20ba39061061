//! Orthogonal projection onto the span of a set of vectors.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg;
use crate::store::EmbeddingMatrix;

/// Relative residual below which a spanning vector counts as dependent.
const RANK_TOLERANCE: f64 = 1e-10;

/// Orthonormal basis of a linear subspace of `R^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subspace {
    dim: usize,
    basis: Vec<Vec<f64>>,
}

impl Subspace {
    /// Span of `vectors` via twice-applied modified Gram–Schmidt.
    ///
    /// Dependent vectors are dropped with a warning, so the rank may be
    /// lower than the number of inputs.
    pub fn span<V: AsRef<[f64]>>(vectors: &[V], dim: usize) -> Self {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for v in vectors {
            let v = v.as_ref();
            debug_assert_eq!(v.len(), dim);
            let scale = linalg::norm(v);
            let mut r = v.to_vec();
            for _ in 0..2 {
                for q in &basis {
                    let c = linalg::dot(&r, q);
                    linalg::axpy(&mut r, -c, q);
                }
            }
            let n = linalg::norm(&r);
            if scale > 0.0 && n > RANK_TOLERANCE * scale {
                basis.push(linalg::scale(&r, 1.0 / n));
            }
        }
        if basis.len() < vectors.len() {
            log::warn!(
                "spanning set of {} vectors has rank {}; using the reduced rank",
                vectors.len(),
                basis.len()
            );
        }
        Subspace { dim, basis }
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    /// `Π_S v`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut p = vec![0.0; self.dim];
        for q in &self.basis {
            linalg::axpy(&mut p, linalg::dot(v, q), q);
        }
        p
    }

    /// `(Π_S v, Π_S⊥ v)`.
    pub fn split(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let inside = self.project(v);
        let outside = linalg::sub(v, &inside);
        (inside, outside)
    }

    /// `‖Π_S v‖`.
    pub fn energy(&self, v: &[f64]) -> f64 {
        self.basis
            .iter()
            .map(|q| linalg::dot(v, q).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Uniformly random unit vector inside the subspace, or `None` when it is `{0}`.
    pub fn random_inside(&self, rng: &mut impl Rng) -> Option<Vec<f64>> {
        if self.basis.is_empty() {
            return None;
        }
        let mut v = vec![0.0; self.dim];
        for q in &self.basis {
            let g: f64 = rng.sample(StandardNormal);
            linalg::axpy(&mut v, g, q);
        }
        linalg::normalized(&v)
    }

    /// Uniformly random unit vector in the orthogonal complement, or `None` when it is `{0}`.
    pub fn random_outside(&self, rng: &mut impl Rng) -> Option<Vec<f64>> {
        if self.basis.len() >= self.dim {
            return None;
        }
        loop {
            let g: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
            let (_, out) = self.split(&g);
            if let Some(u) = linalg::normalized(&out) {
                if linalg::norm(&out) > 1e-6 * linalg::norm(&g) {
                    return Some(u);
                }
            }
        }
    }
}

/// `(Π_S v, Π_S⊥ v)` for `S` spanned by the rows of `basis`.
pub fn project_subspace(v: &[f64], basis: &EmbeddingMatrix) -> (Vec<f64>, Vec<f64>) {
    let rows: Vec<&[f64]> = basis.iter_rows().collect();
    Subspace::span(&rows, basis.dim()).split(v)
}
