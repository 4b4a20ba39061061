//! Prior-dominated region test and the local flip rule.
//!
//! For a sample whose top-1 class is `i`, every graph neighbor `j` is tested
//! against two global gates: the prior gate `Σ(i,j) ≥ τ̃` and the evidence
//! gate `m_ij ≤ δ`. Among neighbors passing both, the one with the largest
//! logit is promoted just above `ℓ_i`. A sample flips at most once.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ConfusionGraph;
use crate::linalg;
use crate::margins::{InterceptEstimate, InterceptMode};
use crate::priors::PairGapTable;
use crate::store::{BundleView, DomainBundle};

pub const DEFAULT_EPSILON0: f64 = 1e-4;

/// The two decision gates plus the tie-break and intercept they were fitted with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "GatesFile", into = "GatesFile")]
pub struct GateConfig {
    /// Effective prior gate `τ̃ = τ − β̂`.
    pub tau_eff: f64,
    /// Evidence gate on the sample margin.
    pub delta: f64,
    pub epsilon0: f64,
    pub intercept: InterceptEstimate,
}

/// Flat on-disk form of [`GateConfig`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatesFile {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub tau_eff: f64,
    pub delta: f64,
    #[serde(default = "default_epsilon0")]
    pub epsilon0: f64,
    #[serde(default)]
    pub beta_hat: f64,
    #[serde(default)]
    pub mode: InterceptMode,
    #[serde(default)]
    pub n_pairs_used: usize,
}

fn schema_version() -> u32 {
    crate::SCHEMA_VERSION
}

fn default_epsilon0() -> f64 {
    DEFAULT_EPSILON0
}

impl From<GatesFile> for GateConfig {
    fn from(f: GatesFile) -> Self {
        GateConfig {
            tau_eff: f.tau_eff,
            delta: f.delta,
            epsilon0: f.epsilon0,
            intercept: InterceptEstimate {
                beta_hat: f.beta_hat,
                n_pairs_used: f.n_pairs_used,
                mode: f.mode,
            },
        }
    }
}

impl From<GateConfig> for GatesFile {
    fn from(g: GateConfig) -> Self {
        GatesFile {
            schema_version: crate::SCHEMA_VERSION,
            tau_eff: g.tau_eff,
            delta: g.delta,
            epsilon0: g.epsilon0,
            beta_hat: g.intercept.beta_hat,
            mode: g.intercept.mode,
            n_pairs_used: g.intercept.n_pairs_used,
        }
    }
}

impl GateConfig {
    pub fn new(tau_eff: f64, delta: f64) -> Self {
        GateConfig {
            tau_eff,
            delta,
            epsilon0: DEFAULT_EPSILON0,
            intercept: InterceptEstimate::folded(),
        }
    }

    pub fn with_intercept(mut self, intercept: InterceptEstimate) -> Self {
        self.intercept = intercept;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon0 > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon0 must be positive, got {}",
                self.epsilon0
            )));
        }
        if self.tau_eff.is_nan() || self.delta.is_nan() {
            return Err(Error::invalid("gates must not be NaN"));
        }
        Ok(())
    }
}

/// `m + Σ + β̂`.
pub fn surrogate_score(m: f64, sigma: f64, beta_hat: f64) -> f64 {
    m + sigma + beta_hat
}

/// `Σ ≥ τ̃ ∧ m ≤ δ`.
pub fn in_prior_dominated_region(sigma_ij: f64, m_ij: f64, gates: &GateConfig) -> bool {
    sigma_ij >= gates.tau_eff && m_ij <= gates.delta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipCandidate {
    pub class: usize,
    pub sigma: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateScore {
    pub i: usize,
    pub j: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub sample_index: usize,
    pub original_top1: usize,
    pub corrected_top1: usize,
    pub flipped: bool,
    /// Neighbors that passed both gates.
    pub flip_target_candidates: Vec<FlipCandidate>,
    /// Surrogate score against every neighbor of the original top-1.
    pub surrogate_scores: Vec<SurrogateScore>,
}

/// Applies the decision rule to one logit vector over all classes.
pub fn apply_correction(
    logits: &[f64],
    gaps: &PairGapTable,
    graph: &ConfusionGraph,
    gates: &GateConfig,
) -> Result<CorrectionOutcome> {
    apply_correction_masked(logits, None, gaps, graph, gates)
}

/// As [`apply_correction`], competing only among classes where `allowed` is true.
pub fn apply_correction_masked(
    logits: &[f64],
    allowed: Option<&[bool]>,
    gaps: &PairGapTable,
    graph: &ConfusionGraph,
    gates: &GateConfig,
) -> Result<CorrectionOutcome> {
    let n = graph.n_classes();
    if logits.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: logits.len(),
            context: "logit vector".into(),
        });
    }
    let is_allowed = |c: usize| allowed.is_none_or(|a| a[c]);
    let original = top1(logits, allowed)
        .ok_or_else(|| Error::InsufficientData("no class to predict".into()))?;

    let li = logits[original];
    let mut candidates = Vec::new();
    let mut scores = Vec::new();
    for &j in graph.neighbors(original) {
        if !is_allowed(j) {
            continue;
        }
        let sigma = gaps.try_get(original, j)?;
        let margin = li - logits[j];
        scores.push(SurrogateScore {
            i: original,
            j,
            score: surrogate_score(margin, sigma, gates.intercept.beta_hat),
        });
        if in_prior_dominated_region(sigma, margin, gates) {
            candidates.push(FlipCandidate {
                class: j,
                sigma,
                margin,
            });
        }
    }

    // Neighbors are visited in ascending order, so a strict `>` keeps the lowest index on ties.
    let target = candidates.iter().fold(None::<usize>, |best, c| match best {
        Some(b) if logits[c.class] <= logits[b] => Some(b),
        _ => Some(c.class),
    });
    let corrected = match target {
        Some(j) => {
            let mut updated = logits.to_vec();
            updated[j] = updated[j].max(li + gates.epsilon0);
            top1(&updated, allowed).unwrap_or(original)
        }
        None => original,
    };
    Ok(CorrectionOutcome {
        sample_index: 0,
        original_top1: original,
        corrected_top1: corrected,
        flipped: corrected != original,
        flip_target_candidates: candidates,
        surrogate_scores: scores,
    })
}

fn top1(logits: &[f64], allowed: Option<&[bool]>) -> Option<usize> {
    match allowed {
        None => linalg::argmax(logits),
        Some(mask) => {
            let mut best: Option<usize> = None;
            for (c, &v) in logits.iter().enumerate() {
                if mask[c] && best.is_none_or(|b| v > logits[b]) {
                    best = Some(c);
                }
            }
            best
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub n_samples: usize,
    pub flips: usize,
    pub accuracy_before: Option<f64>,
    pub accuracy_after: Option<f64>,
    pub correct_flips: Option<usize>,
    pub wrong_flips: Option<usize>,
    /// Wrong flips over all flips; 0 when nothing flipped.
    pub flip_error_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCorrection {
    pub summary: CorrectionSummary,
    pub outcomes: Vec<CorrectionOutcome>,
    /// Ground-truth labels aligned with `outcomes`, when the bundle has them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

/// Corrects every sample of `bundle` over all its classes.
pub fn batch_correct(
    bundle: &DomainBundle,
    gaps: &PairGapTable,
    graph: &ConfusionGraph,
    gates: &GateConfig,
) -> Result<BatchCorrection> {
    batch_correct_view(&BundleView::full(bundle), gaps, graph, gates)
}

/// Corrects the samples of a view, competing among the view's classes only.
pub fn batch_correct_view(
    view: &BundleView<'_>,
    gaps: &PairGapTable,
    graph: &ConfusionGraph,
    gates: &GateConfig,
) -> Result<BatchCorrection> {
    gates.validate()?;
    let bundle = view.bundle;
    if graph.n_classes() != bundle.n_classes() {
        return Err(Error::invalid(format!(
            "graph has {} classes, bundle {}",
            graph.n_classes(),
            bundle.n_classes()
        )));
    }
    let full = view.classes.len() == bundle.n_classes();
    let mask = (!full).then(|| view.class_mask());

    let outcomes: Vec<CorrectionOutcome> = view
        .samples
        .par_iter()
        .map(|&s| {
            let logits = bundle.prototypes_ft.dot_rows(bundle.features.row(s))?;
            let mut out = apply_correction_masked(&logits, mask.as_deref(), gaps, graph, gates)?;
            out.sample_index = s;
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let labels: Option<Vec<usize>> = bundle
        .labels
        .as_ref()
        .map(|l| view.samples.iter().map(|&s| l[s]).collect());
    let summary = summarize(&outcomes, labels.as_deref());
    Ok(BatchCorrection {
        summary,
        outcomes,
        labels,
    })
}

/// Tallies flips and, given labels aligned with `outcomes`, accuracy and FER.
pub fn summarize(outcomes: &[CorrectionOutcome], labels: Option<&[usize]>) -> CorrectionSummary {
    let n = outcomes.len();
    let flips = outcomes.iter().filter(|o| o.flipped).count();
    let mut summary = CorrectionSummary {
        n_samples: n,
        flips,
        accuracy_before: None,
        accuracy_after: None,
        correct_flips: None,
        wrong_flips: None,
        flip_error_rate: None,
    };
    if let Some(labels) = labels {
        let before = outcomes
            .iter()
            .zip(labels)
            .filter(|(o, &l)| o.original_top1 == l)
            .count();
        let after = outcomes
            .iter()
            .zip(labels)
            .filter(|(o, &l)| o.corrected_top1 == l)
            .count();
        let correct_flips = outcomes
            .iter()
            .zip(labels)
            .filter(|(o, &l)| o.flipped && o.corrected_top1 == l)
            .count();
        let wrong = flips - correct_flips;
        let denom = n.max(1) as f64;
        summary.accuracy_before = Some(before as f64 / denom);
        summary.accuracy_after = Some(after as f64 / denom);
        summary.correct_flips = Some(correct_flips);
        summary.wrong_flips = Some(wrong);
        summary.flip_error_rate = Some(if flips == 0 {
            0.0
        } else {
            wrong as f64 / flips as f64
        });
    }
    summary
}
