//! Sample margins, their domain statistics and the global intercept.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ConfusionGraph;
use crate::linalg;
use crate::priors::PairGapTable;
use crate::store::EmbeddingMatrix;

/// `ℓ_i − ℓ_j = ⟨f, t(i) − t(j)⟩` for one feature.
pub fn sample_margin(
    feature: &[f64],
    prototypes_ft: &EmbeddingMatrix,
    i: usize,
    j: usize,
) -> Result<f64> {
    if i == j {
        return Err(Error::invalid(format!("margin of class {i} against itself")));
    }
    let n = prototypes_ft.rows();
    for c in [i, j] {
        if c >= n {
            return Err(Error::ClassOutOfRange {
                index: c,
                n_classes: n,
            });
        }
    }
    if feature.len() != prototypes_ft.dim() {
        return Err(Error::DimensionMismatch {
            expected: prototypes_ft.dim(),
            actual: feature.len(),
            context: "sample margin".into(),
        });
    }
    Ok(linalg::dot(feature, prototypes_ft.row(i)) - linalg::dot(feature, prototypes_ft.row(j)))
}

/// Empirical mean and unbiased variance of `m_ij` per ordered graph edge.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginStats {
    mu_hat: BTreeMap<(usize, usize), f64>,
    var_hat: BTreeMap<(usize, usize), f64>,
    pub n_samples: usize,
}

#[derive(Serialize, Deserialize)]
struct StatEntry {
    i: usize,
    j: usize,
    mu_hat: f64,
    var_hat: f64,
}

#[derive(Serialize, Deserialize)]
struct StatsRepr {
    n_samples: usize,
    pairs: Vec<StatEntry>,
}

impl Serialize for MarginStats {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        StatsRepr {
            n_samples: self.n_samples,
            pairs: self
                .mu_hat
                .iter()
                .map(|(&(i, j), &mu_hat)| StatEntry {
                    i,
                    j,
                    mu_hat,
                    var_hat: self.var_hat[&(i, j)],
                })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MarginStats {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = StatsRepr::deserialize(d)?;
        let mut stats = MarginStats {
            mu_hat: BTreeMap::new(),
            var_hat: BTreeMap::new(),
            n_samples: repr.n_samples,
        };
        for e in repr.pairs {
            if e.var_hat < 0.0 {
                return Err(serde::de::Error::custom("negative variance"));
            }
            let (i, j, mu) = if e.i < e.j {
                (e.i, e.j, e.mu_hat)
            } else {
                (e.j, e.i, -e.mu_hat)
            };
            stats.insert_pair(i, j, mu, e.var_hat);
        }
        Ok(stats)
    }
}

impl MarginStats {
    fn insert_pair(&mut self, i: usize, j: usize, mu: f64, var: f64) {
        self.mu_hat.insert((i, j), mu);
        self.mu_hat.insert((j, i), -mu);
        self.var_hat.insert((i, j), var);
        self.var_hat.insert((j, i), var);
    }

    pub fn mu_hat(&self, i: usize, j: usize) -> Option<f64> {
        self.mu_hat.get(&(i, j)).copied()
    }

    pub fn var_hat(&self, i: usize, j: usize) -> Option<f64> {
        self.var_hat.get(&(i, j)).copied()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.mu_hat.keys().copied()
    }
}

/// Statistics over every row of `features`.
pub fn estimate_margin_stats(
    features: &EmbeddingMatrix,
    prototypes_ft: &EmbeddingMatrix,
    graph: &ConfusionGraph,
    pair_filter: Option<&BTreeSet<(usize, usize)>>,
) -> Result<MarginStats> {
    let rows: Vec<&[f64]> = features.iter_rows().collect();
    margin_stats_over(&rows, prototypes_ft, graph, pair_filter)
}

/// Statistics over an explicit set of feature rows.
///
/// Means are taken unconditionally over all rows; they are not restricted
/// to samples labeled `i` or `j`. An edge passes `pair_filter` when either
/// orientation is listed.
pub fn margin_stats_over(
    rows: &[&[f64]],
    prototypes_ft: &EmbeddingMatrix,
    graph: &ConfusionGraph,
    pair_filter: Option<&BTreeSet<(usize, usize)>>,
) -> Result<MarginStats> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "margin variance needs at least 2 samples, got {n}"
        )));
    }
    if graph.n_classes() != prototypes_ft.rows() {
        return Err(Error::invalid(format!(
            "graph has {} classes, prototypes {}",
            graph.n_classes(),
            prototypes_ft.rows()
        )));
    }
    let logits: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|f| prototypes_ft.dot_rows(f))
        .collect::<Result<_>>()?;

    let edges: Vec<(usize, usize)> = graph
        .edges()
        .filter(|&(i, j)| {
            pair_filter.is_none_or(|f| f.contains(&(i, j)) || f.contains(&(j, i)))
        })
        .collect();
    let per_edge: Vec<(usize, usize, f64, f64)> = edges
        .par_iter()
        .map(|&(i, j)| {
            let mean = logits.iter().map(|l| l[i] - l[j]).sum::<f64>() / n as f64;
            let ss: f64 = logits
                .iter()
                .map(|l| {
                    let d = (l[i] - l[j]) - mean;
                    d * d
                })
                .sum();
            (i, j, mean, ss / (n - 1) as f64)
        })
        .collect();

    let mut stats = MarginStats {
        mu_hat: BTreeMap::new(),
        var_hat: BTreeMap::new(),
        n_samples: n,
    };
    for (i, j, mu, var) in per_edge {
        stats.insert_pair(i, j, mu, var);
    }
    Ok(stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterceptMode {
    Explicit,
    #[default]
    FoldedIntoGate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterceptEstimate {
    pub beta_hat: f64,
    pub n_pairs_used: usize,
    pub mode: InterceptMode,
}

impl InterceptEstimate {
    /// No explicit intercept; any constant offset is absorbed by the prior gate.
    pub fn folded() -> Self {
        InterceptEstimate {
            beta_hat: 0.0,
            n_pairs_used: 0,
            mode: InterceptMode::FoldedIntoGate,
        }
    }
}

impl Default for InterceptEstimate {
    fn default() -> Self {
        Self::folded()
    }
}

/// Least-squares intercept `argmin_β Σ (μ̂_ij − Σ_ij − β)²` over `base_pairs`,
/// i.e. the mean residual.
pub fn fit_intercept(
    stats: &MarginStats,
    gaps: &PairGapTable,
    base_pairs: &[(usize, usize)],
) -> Result<InterceptEstimate> {
    if base_pairs.is_empty() {
        return Err(Error::InsufficientData(
            "no base pairs for the intercept; use the folded-into-gate mode".into(),
        ));
    }
    let mut total = 0.0;
    for &(i, j) in base_pairs {
        let mu = stats
            .mu_hat(i, j)
            .ok_or_else(|| Error::InsufficientData(format!("no margin stats for ({i}, {j})")))?;
        total += mu - gaps.try_get(i, j)?;
    }
    Ok(InterceptEstimate {
        beta_hat: total / base_pairs.len() as f64,
        n_pairs_used: base_pairs.len(),
        mode: InterceptMode::Explicit,
    })
}

/// Graph edges inside `base_classes`, one orientation each: the one where the
/// composite gap is non-negative (ties keep `i < j`).
///
/// Both orientations together would always average to zero, since `μ̂` and
/// `Σ` are both antisymmetric.
pub fn default_intercept_pairs(
    graph: &ConfusionGraph,
    gaps: &PairGapTable,
    base_classes: &BTreeSet<usize>,
) -> Vec<(usize, usize)> {
    graph
        .edges()
        .filter(|(i, j)| base_classes.contains(i) && base_classes.contains(j))
        .filter_map(|(i, j)| {
            let g = gaps.get(i, j)?;
            Some(if g >= 0.0 { (i, j) } else { (j, i) })
        })
        .collect()
}

/// Fits on the default base pairs, falling back to the folded mode when there are none.
pub fn intercept_for_split(
    stats: &MarginStats,
    gaps: &PairGapTable,
    graph: &ConfusionGraph,
    base_classes: &BTreeSet<usize>,
) -> Result<InterceptEstimate> {
    let pairs = default_intercept_pairs(graph, gaps, base_classes);
    if pairs.is_empty() {
        log::info!("no base edges in the graph; folding the intercept into the prior gate");
        return Ok(InterceptEstimate::folded());
    }
    fit_intercept(stats, gaps, &pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{composite_gap, PriorTable, PriorVariant};
    use proptest::prelude::*;
    use rand::Rng;

    fn mat(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows("m", rows).unwrap()
    }

    fn random_rows(n: usize, d: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn sample_margin_examples() {
        let t = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(sample_margin(&[1.0, 0.0], &t, 0, 1).unwrap(), 1.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(sample_margin(&[h, h], &t, 0, 1).unwrap().abs() < 1e-15);
        let t = mat(&[vec![0.8, 0.6], vec![0.6, 0.8]]);
        assert!((sample_margin(&[1.0, 0.0], &t, 0, 1).unwrap() - 0.2).abs() < 1e-15);
        assert!(sample_margin(&[1.0, 0.0], &t, 1, 1).is_err());
        assert!(sample_margin(&[1.0, 0.0, 0.0], &t, 0, 1).is_err());
    }

    /// Features whose margin on edge (0, 1) equals the given values exactly:
    /// with t(0) = e0, t(1) = e1, a feature (cos a, sin a) has margin cos a − sin a.
    fn features_with_margins(ms: &[f64]) -> EmbeddingMatrix {
        let rows: Vec<Vec<f64>> = ms
            .iter()
            .map(|&m| {
                // cos a − sin a = m  ⇒  a = π/4 − asin(m/√2)
                let a = std::f64::consts::FRAC_PI_4 - (m / 2f64.sqrt()).asin();
                vec![a.cos(), a.sin()]
            })
            .collect();
        mat(&rows)
    }

    #[test]
    fn two_point_statistics() {
        let t = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = ConfusionGraph::from_edges(2, [(0, 1)]).unwrap();
        let s = estimate_margin_stats(&features_with_margins(&[0.2, 0.4]), &t, &g, None).unwrap();
        assert!((s.mu_hat(0, 1).unwrap() - 0.3).abs() < 1e-12);
        assert!((s.var_hat(0, 1).unwrap() - 0.02).abs() < 1e-12);
        assert_eq!(s.mu_hat(1, 0).unwrap(), -s.mu_hat(0, 1).unwrap());
    }

    #[test]
    fn identical_samples_have_zero_variance() {
        let t = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = ConfusionGraph::from_edges(2, [(0, 1)]).unwrap();
        let f = mat(&[vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]]);
        assert_eq!(estimate_margin_stats(&f, &t, &g, None).unwrap().var_hat(0, 1), Some(0.0));
    }

    #[test]
    fn one_sample_is_an_error() {
        let t = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = ConfusionGraph::from_edges(2, [(0, 1)]).unwrap();
        assert!(matches!(
            estimate_margin_stats(&mat(&[vec![1.0, 0.0]]), &t, &g, None),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn batch_statistics_match_streaming_welford() {
        let mut rng = crate::rng::substream(3, 0);
        let t = mat(&random_rows(6, 5, &mut rng));
        let f = mat(&random_rows(50, 5, &mut rng));
        let g = ConfusionGraph::from_edges(6, [(0, 1), (1, 2), (3, 5), (4, 0)]).unwrap();
        let filter: BTreeSet<_> = [(1, 0), (3, 5), (4, 0)].into_iter().collect();
        let s = estimate_margin_stats(&f, &t, &g, Some(&filter)).unwrap();
        assert_eq!(s.mu_hat(1, 2), None);
        for (i, j) in [(0, 1), (3, 5), (0, 4)] {
            let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
            for x in f.iter_rows() {
                let m: f64 = x.iter().zip(t.row(i)).map(|(a, b)| a * b).sum::<f64>()
                    - x.iter().zip(t.row(j)).map(|(a, b)| a * b).sum::<f64>();
                n += 1.0;
                let d = m - mean;
                mean += d / n;
                m2 += d * (m - mean);
            }
            assert!((s.mu_hat(i, j).unwrap() - mean).abs() < 1e-12);
            assert!((s.var_hat(i, j).unwrap() - m2 / (n - 1.0)).abs() < 1e-12);
        }
    }

    fn table(n: usize, rng: &mut impl Rng) -> (MarginStats, PairGapTable, Vec<(usize, usize)>) {
        let t = mat(&random_rows(n, 4, rng));
        let f = mat(&random_rows(30, 4, rng));
        let g = ConfusionGraph::from_edges(n, (0..n).map(|i| (i, (i + 1) % n))).unwrap();
        let stats = estimate_margin_stats(&f, &t, &g, None).unwrap();
        let txt = PriorTable {
            variant: PriorVariant::TextPlain,
            values: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let img = PriorTable {
            variant: PriorVariant::ImagePlain,
            values: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        };
        let gaps = composite_gap(&txt, &img, &g).unwrap();
        let pairs = g.edges().collect();
        (stats, gaps, pairs)
    }

    #[test]
    fn intercept_is_mean_residual() {
        let t = mat(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let g = ConfusionGraph::from_edges(3, [(0, 1), (0, 2)]).unwrap();
        let f = mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let stats = estimate_margin_stats(&f, &t, &g, None).unwrap();
        // mu(0,1) = 0, mu(0,2) = ((1-0.6) + (0-0.8))/2 = -0.2
        let txt = PriorTable {
            variant: PriorVariant::TextPlain,
            values: vec![0.0, 0.1, 0.5],
        };
        let img = PriorTable {
            variant: PriorVariant::ImagePlain,
            values: vec![0.0; 3],
        };
        let gaps = composite_gap(&txt, &img, &g).unwrap();
        // residuals: 0 - (-0.1) = 0.1 and -0.2 - (-0.5) = 0.3
        let est = fit_intercept(&stats, &gaps, &[(0, 1), (0, 2)]).unwrap();
        assert!((est.beta_hat - 0.2).abs() < 1e-12);
        assert_eq!(est.n_pairs_used, 2);
        assert_eq!(est.mode, InterceptMode::Explicit);
        let one = fit_intercept(&stats, &gaps, &[(0, 1)]).unwrap();
        assert!((one.beta_hat - 0.1).abs() < 1e-12);
    }

    #[test]
    fn intercept_needs_pairs() {
        let mut rng = crate::rng::substream(1, 0);
        let (stats, gaps, _) = table(5, &mut rng);
        assert!(fit_intercept(&stats, &gaps, &[]).is_err());
        assert!(fit_intercept(&stats, &gaps, &[(0, 3)]).is_err());
    }

    #[test]
    fn default_pairs_are_oriented_by_gap_sign() {
        let mut rng = crate::rng::substream(2, 0);
        let (stats, gaps, _) = table(6, &mut rng);
        let g = ConfusionGraph::from_edges(6, (0..6).map(|i| (i, (i + 1) % 6))).unwrap();
        let base: BTreeSet<usize> = [0, 1, 2, 3].into_iter().collect();
        let pairs = default_intercept_pairs(&g, &gaps, &base);
        assert_eq!(pairs.len(), 3);
        for &(i, j) in &pairs {
            assert!(gaps.get(i, j).unwrap() >= 0.0);
        }
        let est = intercept_for_split(&stats, &gaps, &g, &base).unwrap();
        assert_eq!(est.n_pairs_used, 3);
        let none = intercept_for_split(&stats, &gaps, &g, &BTreeSet::from([0])).unwrap();
        assert_eq!(none, InterceptEstimate::folded());
    }

    proptest! {
        #[test]
        fn intercept_is_strictly_optimal(seed in 0u64..500, bump in -1.0f64..1.0) {
            prop_assume!(bump.abs() > 1e-6);
            let mut rng = crate::rng::substream(seed, 4);
            let (stats, gaps, pairs) = table(7, &mut rng);
            let beta = fit_intercept(&stats, &gaps, &pairs).unwrap().beta_hat;
            let objective = |b: f64| -> f64 {
                pairs.iter().map(|&(i, j)| {
                    let r = stats.mu_hat(i, j).unwrap() - gaps.get(i, j).unwrap() - b;
                    r * r
                }).sum()
            };
            prop_assert!(objective(beta + bump) > objective(beta));
        }

        #[test]
        fn stats_antisymmetric_and_rotation_invariant(seed in 0u64..300) {
            let mut rng = crate::rng::substream(seed, 5);
            let d = 4;
            let t = random_rows(5, d, &mut rng);
            let f = random_rows(12, d, &mut rng);
            let g = ConfusionGraph::from_edges(5, [(0, 1), (2, 4), (3, 1)]).unwrap();
            let s = estimate_margin_stats(&mat(&f), &mat(&t), &g, None).unwrap();
            for (i, j) in s.pairs() {
                prop_assert_eq!(s.mu_hat(i, j).unwrap(), -s.mu_hat(j, i).unwrap());
                prop_assert_eq!(s.var_hat(i, j).unwrap(), s.var_hat(j, i).unwrap());
                prop_assert!(s.var_hat(i, j).unwrap() >= 0.0);
            }

            // Random orthogonal map from QR of a Gaussian-ish matrix.
            let a = nalgebra::DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            let q = a.qr().q();
            let rotate = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
                rows.iter().map(|r| {
                    let v = &q * nalgebra::DVector::from_column_slice(r);
                    v.iter().copied().collect()
                }).collect()
            };
            let sr = estimate_margin_stats(&mat(&rotate(&f)), &mat(&rotate(&t)), &g, None).unwrap();
            for (i, j) in s.pairs() {
                prop_assert!((s.mu_hat(i, j).unwrap() - sr.mu_hat(i, j).unwrap()).abs() < 1e-9);
                prop_assert!((s.var_hat(i, j).unwrap() - sr.var_hat(i, j).unwrap()).abs() < 1e-9);
            }
        }
    }
}
