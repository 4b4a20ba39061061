//! Synthetic generative model used to check the theory empirically.
//!
//! A world is drawn from the low-rank deformation model (see [`world`]); the
//! checks in [`checks`] then measure, on that world, every quantity the
//! correction rule relies on: gaps as projections, base suppression, sign
//! consistency of margins with prior gaps, the Chebyshev false-flip bound,
//! the asymmetric-confusion signature of a planted bias, and the variance
//! ceiling of zero-shot projections. [`pipeline`] turns worlds into
//! calibration folds and runs the full calibrate-then-correct loop.

pub mod checks;
pub mod pipeline;
pub mod subspace;
pub mod vmf;
pub mod world;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::build_knn_graph;

pub use checks::{
    chebyshev_false_flip_bound, sign_disagreement_bound, BaseSuppression, ConfusionSignature,
    FalseFlipCheck, FalseFlipGates, ProjectionResiduals, SignConsistency, VarianceCeiling,
};
pub use subspace::{project_subspace, Subspace};
pub use vmf::{mean_cosine, sample_vmf, VmfSampler};
pub use world::{generate_world, GroundTruth, PlantedPair, World};

/// Planted prior bias on novel pairs: one value for a spread-out fraction of
/// the pairs (see `biased_pair_fraction`), or one value per pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PlantedBias {
    Uniform(f64),
    /// Missing trailing entries mean no bias.
    PerPair(Vec<f64>),
}

impl PlantedBias {
    /// Per-pair bias. A uniform bias goes to pair `p` iff
    /// `⌊(p+1)·fraction⌋ > ⌊p·fraction⌋`, spreading biased pairs evenly.
    pub fn resolve(&self, n_pairs: usize, fraction: f64) -> Vec<f64> {
        match self {
            PlantedBias::Uniform(b) => (0..n_pairs)
                .map(|p| {
                    let hit = ((p + 1) as f64 * fraction).floor() > (p as f64 * fraction).floor();
                    if hit { *b } else { 0.0 }
                })
                .collect(),
            PlantedBias::PerPair(v) => (0..n_pairs).map(|p| v.get(p).copied().unwrap_or(0.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticModelConfig {
    pub dim: usize,
    pub n_base: usize,
    pub n_novel: usize,
    /// Adapter rank `r`.
    pub rank: usize,
    /// Scale of `‖U b(c)‖` on base classes.
    pub deform_scale_base: f64,
    /// Scale of `‖U b(c)‖` on novel classes.
    pub deform_scale_novel: f64,
    /// vMF concentration of image features around their class direction.
    pub kappa: f64,
    pub planted_bias: PlantedBias,
    /// Share of novel pairs that receive a uniform planted bias; the rest keep
    /// only their natural gaps. Ignored for per-pair biases.
    pub biased_pair_fraction: f64,
    /// Cosine between the two zero-shot prototypes of a confusable pair, before bias.
    pub pair_similarity: f64,
    /// Weight `α` of the image anchor in every class's feature mean.
    pub domain_strength: f64,
    /// `‖Π_S u_img‖`.
    pub kappa_img: f64,
    /// `‖Π_S u⁰_txt‖`.
    pub kappa_txt: f64,
    /// Norm of the out-of-subspace component added to each adapter column; 0 keeps `U ⊂ S`.
    pub subspace_leakage: f64,
    pub samples_per_class: usize,
    /// Neighbors per class in the confusion graph.
    pub knn_k: usize,
    /// Monte-Carlo draws for sample-level checks.
    pub mc_samples: usize,
    /// Draws used to estimate population means.
    pub population_samples: usize,
    pub gamma: f64,
    pub false_flip_gates: FalseFlipGates,
    pub seed: u64,
}

impl Default for SyntheticModelConfig {
    fn default() -> Self {
        SyntheticModelConfig {
            dim: 64,
            n_base: 20,
            n_novel: 20,
            rank: 4,
            deform_scale_base: 0.5,
            deform_scale_novel: 0.05,
            kappa: 100.0,
            planted_bias: PlantedBias::Uniform(0.3),
            biased_pair_fraction: 0.5,
            pair_similarity: 0.7,
            domain_strength: 1.0,
            kappa_img: 0.1,
            kappa_txt: 0.1,
            subspace_leakage: 0.0,
            samples_per_class: 50,
            knn_k: 1,
            mc_samples: 10_000,
            population_samples: 100_000,
            gamma: 0.1,
            false_flip_gates: FalseFlipGates::default(),
            seed: 0,
        }
    }
}

impl SyntheticModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.dim < 2 {
            return fail(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.rank == 0 || self.rank >= self.dim {
            return fail(format!("rank must satisfy 0 < r < d (r = {}, d = {})", self.rank, self.dim));
        }
        if self.n_base == 0 || self.n_novel == 0 {
            return fail("need at least one base and one novel class".into());
        }
        if self.n_base + self.n_novel > self.dim {
            return fail(format!(
                "n_base + n_novel = {} exceeds dim {}",
                self.n_base + self.n_novel,
                self.dim
            ));
        }
        if self.n_base >= self.dim {
            return fail("base classes must leave room outside their span".into());
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return fail(format!("kappa must be finite and >= 0, got {}", self.kappa));
        }
        if !(0.0..=1.0).contains(&self.biased_pair_fraction) {
            return fail(format!(
                "biased_pair_fraction must lie in [0, 1], got {}",
                self.biased_pair_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.pair_similarity) {
            return fail(format!("pair_similarity must lie in [0, 1), got {}", self.pair_similarity));
        }
        for (name, v) in [("kappa_img", self.kappa_img), ("kappa_txt", self.kappa_txt)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [
            ("deform_scale_base", self.deform_scale_base),
            ("deform_scale_novel", self.deform_scale_novel),
            ("domain_strength", self.domain_strength),
            ("subspace_leakage", self.subspace_leakage),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return fail(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.samples_per_class == 0 {
            return fail("samples_per_class must be positive".into());
        }
        if self.knn_k == 0 || self.knn_k >= self.n_base + self.n_novel {
            return fail(format!("knn_k = {} out of range", self.knn_k));
        }
        if self.mc_samples < 2 || self.population_samples < 2 {
            return fail("Monte-Carlo sample counts must be >= 2".into());
        }
        Ok(())
    }
}

/// Everything the theory suite measures on one world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub schema_version: u32,
    pub seed: u64,
    /// Pooled sign agreement over the pairs that clear `ε + γ`; `None` when none do.
    pub sign_consistency_rate: Option<f64>,
    pub eps_img_novel: f64,
    pub eps_txt_novel: f64,
    pub base_gap_mean: f64,
    pub novel_gap_mean: f64,
    pub sigma_m_sq: Option<f64>,
    pub empirical_false_flip_rate: Option<f64>,
    pub chebyshev_bound: Option<f64>,
    pub delta_beta: f64,
    pub projection_residuals: ProjectionResiduals,
    pub sign_consistency: SignConsistency,
    pub base_suppression: BaseSuppression,
    pub false_flip: FalseFlipCheck,
    pub confusion: ConfusionSignature,
    pub variance_ceiling: VarianceCeiling,
    /// Conjunction of every inequality check.
    pub all_checks_pass: bool,
}

/// Generates a world from `config` and runs every check on it.
pub fn run_theory_suite(config: &SyntheticModelConfig) -> Result<TheoryReport> {
    let world = generate_world(config)?;
    let graph = build_knn_graph(&world.bundle.prototypes_zs, config.knn_k)?;
    let projection = checks::check_projection_lemma(&world, &graph)?;
    let base = checks::check_base_suppression(&world, &graph)?;
    let sign = checks::check_sign_consistency(&world, &graph, config.gamma)?;
    let flip = checks::check_false_flip_bound(&world, &graph, &config.false_flip_gates, config.gamma)?;
    let confusion = checks::check_confusion_signature(&world, &graph)?;
    let variance = checks::check_variance_ceiling(&world, 100)?;
    let all_checks_pass = projection.holds()
        && base.holds()
        && sign.all_hold
        && flip.holds.unwrap_or(true)
        && variance.holds;
    Ok(TheoryReport {
        schema_version: crate::SCHEMA_VERSION,
        seed: config.seed,
        sign_consistency_rate: sign.rate,
        eps_img_novel: sign.eps_img,
        eps_txt_novel: sign.eps_txt,
        base_gap_mean: base.base_gap_mean,
        novel_gap_mean: base.novel_gap_mean,
        sigma_m_sq: flip.sigma_m_sq,
        empirical_false_flip_rate: flip.empirical_rate,
        chebyshev_bound: flip.chebyshev_bound,
        delta_beta: flip.delta_beta,
        projection_residuals: projection,
        sign_consistency: sign,
        base_suppression: base,
        false_flip: flip,
        confusion,
        variance_ceiling: variance,
        all_checks_pass,
    })
}
