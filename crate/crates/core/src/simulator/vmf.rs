//! von Mises–Fisher sampling on the unit sphere.
//!
//! The cosine to the mean direction is drawn with Wood's rejection sampler,
//! the tangential direction uniformly; the combination is exact in any
//! dimension `d ≥ 2`.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::store::EmbeddingMatrix;

/// Reusable sampler for one `(mean_dir, κ)`.
#[derive(Debug, Clone)]
pub struct VmfSampler {
    mean: Vec<f64>,
    kappa: f64,
    b: f64,
    x0: f64,
    c: f64,
    beta: Beta<f64>,
}

impl VmfSampler {
    pub fn new(mean_dir: &[f64], kappa: f64) -> Result<Self> {
        let d = mean_dir.len();
        if d < 2 {
            return Err(Error::invalid("vMF sampling needs dimension >= 2"));
        }
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::invalid(format!("kappa must be finite and >= 0, got {kappa}")));
        }
        let norm = linalg::norm(mean_dir);
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("vMF mean direction has norm {norm}, expected 1")));
        }
        let m = (d - 1) as f64;
        // Stable form of (-2κ + sqrt(4κ² + m²)) / m.
        let b = m / (2.0 * kappa + (4.0 * kappa * kappa + m * m).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let c = kappa * x0 + m * (1.0 - x0 * x0).ln();
        let beta = Beta::new(m / 2.0, m / 2.0).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(VmfSampler {
            mean: mean_dir.to_vec(),
            kappa,
            b,
            x0,
            c,
            beta,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Cosine between a draw and the mean direction.
    pub fn sample_cosine(&self, rng: &mut impl Rng) -> f64 {
        let m = (self.dim() - 1) as f64;
        loop {
            let z = self.beta.sample(rng);
            let w = (1.0 - (1.0 + self.b) * z) / (1.0 - (1.0 - self.b) * z);
            let u: f64 = rng.random();
            if self.kappa * w + m * (1.0 - self.x0 * w).ln() - self.c >= u.ln() {
                return w.clamp(-1.0, 1.0);
            }
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let w = self.sample_cosine(rng);
        let tangent = loop {
            let mut v: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
            let along = linalg::dot(&v, &self.mean);
            linalg::axpy(&mut v, -along, &self.mean);
            if let Some(t) = linalg::normalized(&v) {
                break t;
            }
        };
        let s = (1.0 - w * w).max(0.0).sqrt();
        let mut x = linalg::scale(&self.mean, w);
        linalg::axpy(&mut x, s, &tangent);
        x
    }
}

/// `n` draws from vMF(`mean_dir`, `kappa`); `kappa = 0` is the uniform sphere.
pub fn sample_vmf(
    mean_dir: &[f64],
    kappa: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<EmbeddingMatrix> {
    let sampler = VmfSampler::new(mean_dir, kappa)?;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| sampler.sample(rng)).collect();
    if rows.is_empty() {
        return Ok(EmbeddingMatrix::empty(mean_dir.len()));
    }
    EmbeddingMatrix::from_rows("vmf", &rows)
}

/// `E[cos θ]` under vMF(κ) in dimension `d`, by Simpson quadrature of the
/// marginal density `∝ exp(κ cos θ) sin^(d−2) θ` on `[0, π]`.
pub fn mean_cosine(kappa: f64, d: usize) -> f64 {
    const STEPS: usize = 20_000;
    let h = std::f64::consts::PI / STEPS as f64;
    let p = (d as f64) - 2.0;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..=STEPS {
        let theta = k as f64 * h;
        let weight = if k == 0 || k == STEPS {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let s = theta.sin();
        // Shifted exponent keeps large κ finite.
        let g = (kappa * (theta.cos() - 1.0)).exp() * if p == 0.0 { 1.0 } else { s.powf(p) };
        num += weight * g * theta.cos();
        den += weight * g;
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn axis(d: usize) -> Vec<f64> {
        let mut e = vec![0.0; d];
        e[0] = 1.0;
        e
    }

    #[test]
    fn uniform_sphere_has_zero_mean() {
        let m = sample_vmf(&axis(3), 0.0, 100_000, &mut substream(1, 0)).unwrap();
        let mut mean = [0.0; 3];
        for r in m.iter_rows() {
            for k in 0..3 {
                mean[k] += r[k] / 100_000.0;
            }
        }
        assert!(linalg::norm(&mean) < 0.02);
    }

    #[test]
    fn huge_kappa_concentrates() {
        let m = sample_vmf(&axis(16), 1e5, 2000, &mut substream(2, 0)).unwrap();
        assert!(m.iter_rows().all(|r| r[0] > 0.99));
    }

    #[test]
    fn mean_cosine_matches_quadrature_at_high_kappa() {
        let s = VmfSampler::new(&axis(8), 200.0).unwrap();
        let mut rng = substream(3, 0);
        let n = 10_000;
        let emp: f64 = (0..n).map(|_| s.sample_cosine(&mut rng)).sum::<f64>() / n as f64;
        assert!((emp - mean_cosine(200.0, 8)).abs() < 0.01);
    }

    #[test]
    fn quadrature_known_values() {
        // d = 3: E[cos θ] = coth κ − 1/κ.
        for kappa in [0.5f64, 2.0, 10.0] {
            let exact = 1.0 / kappa.tanh() - 1.0 / kappa;
            assert!((mean_cosine(kappa, 3) - exact).abs() < 1e-9);
        }
        assert!(mean_cosine(0.0, 10).abs() < 1e-12);
    }

    #[test]
    fn samples_are_unit_and_mean_direction_converges() {
        let mean = linalg::normalized(&[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        let s = VmfSampler::new(&mean, 10.0).unwrap();
        let mut rng = substream(4, 0);
        let n = 10_000;
        let mut acc = vec![0.0; 6];
        for _ in 0..n {
            let x = s.sample(&mut rng);
            assert!((linalg::norm(&x) - 1.0).abs() < 1e-12);
            linalg::axpy(&mut acc, 1.0, &x);
        }
        let dir = linalg::normalized(&acc).unwrap();
        assert!(linalg::dot(&dir, &mean) > 1.0 - 5.0 / (n as f64).sqrt());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(VmfSampler::new(&axis(4), -1.0).is_err());
        assert!(VmfSampler::new(&[0.5, 0.5], 1.0).is_err());
        assert!(VmfSampler::new(&[1.0], 1.0).is_err());
    }
}
