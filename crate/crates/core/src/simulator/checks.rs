//! Empirical checks of the theory on a generated world.
//!
//! Population quantities are taken over the target domain `D`: novel-class
//! samples drawn uniformly over the novel classes. Sample-level statements
//! (sign agreement, false flips) are frequencies over fresh draws from `D`.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::world::World;
use crate::error::Result;
use crate::graph::ConfusionGraph;
use crate::linalg;
use crate::margins::{fit_intercept, margin_stats_over, default_intercept_pairs};
use crate::priors::{image_prior, priors_for_bundle, text_prior, GapMode, PriorSet};
use crate::rng::substream;

const STREAM_POPULATION: u64 = 1 << 32;
const STREAM_SIGN: u64 = 2 << 32;
const STREAM_FLIP: u64 = 3 << 32;
const STREAM_CONFUSION: u64 = 4 << 32;
const STREAM_VARIANCE: u64 = 5 << 32;
const CHUNK: usize = 1024;
/// Round-off allowance for inequalities that hold exactly in real arithmetic.
const EXACT_SLACK: f64 = 1e-12;

struct Draw {
    f0: Vec<f64>,
    f: Vec<f64>,
}

/// `n` draws cycling over `classes`; chunked substreams keep it thread-count independent.
fn draw_domain(world: &World, classes: &[usize], n: usize, stream: u64) -> Vec<Draw> {
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(world.config.seed, stream + k as u64);
            (k * CHUNK..((k + 1) * CHUNK).min(n))
                .map(|idx| {
                    let label = classes[idx % classes.len()];
                    let (f0, f) = world.sample_feature(label, &mut rng);
                    Draw { f0, f }
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Mean deformed feature over `n` draws from `classes`.
fn domain_mean(world: &World, classes: &[usize], n: usize, stream: u64) -> Vec<f64> {
    let d = world.config.dim;
    let chunks = n.div_ceil(CHUNK);
    let partial: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(world.config.seed, stream + k as u64);
            let mut acc = vec![0.0; d];
            for idx in k * CHUNK..((k + 1) * CHUNK).min(n) {
                let (_, f) = world.sample_feature(classes[idx % classes.len()], &mut rng);
                linalg::axpy(&mut acc, 1.0, &f);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; d];
    for p in &partial {
        linalg::axpy(&mut total, 1.0, p);
    }
    linalg::scale(&total, 1.0 / n as f64)
}

fn novel_classes(world: &World) -> Vec<usize> {
    world.split.novel_classes.iter().copied().collect()
}

fn edges_within<'a>(graph: &'a ConfusionGraph, set: &'a BTreeSet<usize>) -> impl Iterator<Item = (usize, usize)> + 'a {
    graph
        .edges()
        .filter(move |(i, j)| set.contains(i) && set.contains(j))
}

fn all_pairs(classes: &BTreeSet<usize>) -> Vec<(usize, usize)> {
    let v: Vec<usize> = classes.iter().copied().collect();
    let mut out = Vec::new();
    for (a, &i) in v.iter().enumerate() {
        for &j in &v[a + 1..] {
            out.push((i, j));
        }
    }
    out
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var)
}

fn plain_priors(world: &World, graph: &ConfusionGraph) -> Result<PriorSet> {
    priors_for_bundle(&world.bundle, graph, GapMode::Plain)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResiduals {
    pub n_pairs: usize,
    /// `max |Δπ_img − ⟨u_img, Δ⁰⟩|`.
    pub max_image_residual: f64,
    /// `max |Δπ_txt − ⟨Δ⁰, u⁰_txt⟩|` on raw (unnormalized) deformed prototypes.
    pub max_text_residual_raw: f64,
    /// Largest ratio of the raw text residual to `‖U‖(‖b(i)‖ + ‖b(j)‖)`.
    pub max_text_constant: Option<f64>,
    pub text_bound_violations: usize,
    /// `max |Δπ_txt(normalized) − Δπ_txt(raw)|`.
    pub max_normalization_discrepancy: f64,
}

impl ProjectionResiduals {
    pub fn holds(&self) -> bool {
        self.max_image_residual <= 1e-12 && self.text_bound_violations == 0
    }
}

/// Gaps as projections, on every class pair.
pub fn check_projection_lemma(world: &World, _graph: &ConfusionGraph) -> Result<ProjectionResiduals> {
    let truth = &world.truth;
    let img = image_prior(&world.bundle.prototypes_zs, &truth.u_img)?;
    let txt = text_prior(&world.bundle.prototypes_ft, &truth.u_txt_zs)?;
    let raw: Vec<f64> = truth.t_raw.iter().map(|t| linalg::dot(t, &truth.u_txt_zs)).collect();
    let classes: BTreeSet<usize> = (0..world.n_classes()).collect();
    let pairs = all_pairs(&classes);
    let mut out = ProjectionResiduals {
        n_pairs: pairs.len(),
        max_image_residual: 0.0,
        max_text_residual_raw: 0.0,
        max_text_constant: None,
        text_bound_violations: 0,
        max_normalization_discrepancy: 0.0,
    };
    for (i, j) in pairs {
        let d0 = linalg::sub(&truth.t0[i], &truth.t0[j]);
        let r_img = ((img.values[i] - img.values[j]) - linalg::dot(&truth.u_img, &d0)).abs();
        out.max_image_residual = out.max_image_residual.max(r_img);

        let raw_gap = raw[i] - raw[j];
        let r_txt = (raw_gap - linalg::dot(&d0, &truth.u_txt_zs)).abs();
        out.max_text_residual_raw = out.max_text_residual_raw.max(r_txt);
        let bound = truth.adapter_norm * (linalg::norm(&truth.b[i]) + linalg::norm(&truth.b[j]));
        if r_txt > bound + EXACT_SLACK {
            out.text_bound_violations += 1;
        }
        if bound > 0.0 {
            let c = r_txt / bound;
            out.max_text_constant = Some(out.max_text_constant.map_or(c, |m| m.max(c)));
        }
        let norm_gap = txt.values[i] - txt.values[j];
        out.max_normalization_discrepancy = out.max_normalization_discrepancy.max((norm_gap - raw_gap).abs());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSuppression {
    pub n_base_pairs: usize,
    /// `‖Π_S u_img‖`.
    pub kappa_img: f64,
    /// `‖Π_S u⁰_txt‖`.
    pub kappa_txt: f64,
    pub min_image_slack: Option<f64>,
    pub min_text_slack: Option<f64>,
    pub violations: usize,
    /// Mean `|Σ|` over base graph edges.
    pub base_gap_mean: f64,
    /// Mean `|Σ|` over novel graph edges.
    pub novel_gap_mean: f64,
}

impl BaseSuppression {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Both base-pair inequalities on every base class pair, and mean gaps on graph edges.
pub fn check_base_suppression(world: &World, graph: &ConfusionGraph) -> Result<BaseSuppression> {
    let truth = &world.truth;
    let s = &truth.subspace;
    let img = image_prior(&world.bundle.prototypes_zs, &truth.u_img)?;
    let txt = text_prior(&world.bundle.prototypes_ft, &truth.u_txt_zs)?;
    let kappa_img = s.energy(&truth.u_img);
    let kappa_txt = s.energy(&truth.u_txt_zs);
    let (_, u_out) = s.split(&truth.u_txt_zs);
    let u_out_norm = linalg::norm(&u_out);

    let pairs = all_pairs(&world.split.base_classes);
    let mut out = BaseSuppression {
        n_base_pairs: pairs.len(),
        kappa_img,
        kappa_txt,
        min_image_slack: None,
        min_text_slack: None,
        violations: 0,
        base_gap_mean: 0.0,
        novel_gap_mean: 0.0,
    };
    let min = |acc: Option<f64>, v: f64| Some(acc.map_or(v, |m: f64| m.min(v)));
    for (i, j) in pairs {
        let d0 = linalg::sub(&truth.t0[i], &truth.t0[j]);
        let img_slack = kappa_img * s.energy(&d0) - (img.values[i] - img.values[j]).abs();
        let dt = linalg::sub(world.bundle.prototypes_ft.row(i), world.bundle.prototypes_ft.row(j));
        let (dt_in, dt_out) = s.split(&dt);
        let txt_bound = kappa_txt * linalg::norm(&dt_in) + u_out_norm * linalg::norm(&dt_out);
        let txt_slack = txt_bound - (txt.values[i] - txt.values[j]).abs();
        if img_slack < -EXACT_SLACK || txt_slack < -EXACT_SLACK {
            out.violations += 1;
        }
        out.min_image_slack = min(out.min_image_slack, img_slack);
        out.min_text_slack = min(out.min_text_slack, txt_slack);
    }

    let priors = plain_priors(world, graph)?;
    let mean_abs = |set: &BTreeSet<usize>| {
        let gaps: Vec<f64> = edges_within(graph, set)
            .filter_map(|(i, j)| priors.gaps.get(i, j))
            .map(f64::abs)
            .collect();
        if gaps.is_empty() {
            0.0
        } else {
            gaps.iter().sum::<f64>() / gaps.len() as f64
        }
    };
    out.base_gap_mean = mean_abs(&world.split.base_classes);
    out.novel_gap_mean = mean_abs(&world.split.novel_classes);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSide {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConsistency {
    pub i: usize,
    pub j: usize,
    pub side: PriorSide,
    /// `Δπ(i, j)` on this side.
    pub gap: f64,
    /// Population margin mean `μ_ij(D)`.
    pub mu: f64,
    pub sigma_m_sq: f64,
    /// Fraction of draws with `sign m_ij ≠ sign Δπ`.
    pub disagreement: f64,
    pub bound: f64,
    pub mc_sigma: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignConsistency {
    pub eps_img: f64,
    pub eps_txt: f64,
    pub gamma: f64,
    pub n_novel_pairs: usize,
    pub n_samples: usize,
    /// Pairs with `|Δπ| > ε + γ` on either side.
    pub pairs: Vec<PairConsistency>,
    pub rate: Option<f64>,
    pub all_hold: bool,
}

/// `min(σ_m² / (|Δπ| − ε − γ)², 1)`, or `None` unless `|Δπ| > ε + γ` and `γ > 0`.
pub fn sign_disagreement_bound(sigma_m_sq: f64, gap: f64, eps: f64, gamma: f64) -> Option<f64> {
    let den = gap.abs() - eps - gamma;
    (gamma > 0.0 && den > 0.0).then(|| (sigma_m_sq / (den * den)).min(1.0))
}

/// Margin means against both prior sides on novel graph edges, and the
/// sample-level sign agreement on pairs whose gap clears `ε + γ`.
pub fn check_sign_consistency(world: &World, graph: &ConfusionGraph, gamma: f64) -> Result<SignConsistency> {
    let priors = plain_priors(world, graph)?;
    let novel = novel_classes(world);
    let protos = &world.bundle.prototypes_ft;
    let mean = domain_mean(world, &novel, world.config.population_samples, STREAM_POPULATION);
    let pairs: Vec<(usize, usize)> = edges_within(graph, &world.split.novel_classes).collect();
    let mu = |i: usize, j: usize| linalg::dot(&mean, protos.row(i)) - linalg::dot(&mean, protos.row(j));

    let side_gap = |side: PriorSide, i: usize, j: usize| match side {
        PriorSide::Image => priors.image.values[i] - priors.image.values[j],
        PriorSide::Text => priors.text.values[i] - priors.text.values[j],
    };
    let eps = |side| {
        pairs
            .iter()
            .map(|&(i, j)| (mu(i, j) - side_gap(side, i, j)).abs())
            .fold(0.0, f64::max)
    };
    let (eps_img, eps_txt) = (eps(PriorSide::Image), eps(PriorSide::Text));

    let n = world.config.mc_samples;
    let draws = draw_domain(world, &novel, n, STREAM_SIGN);
    let mut out_pairs = Vec::new();
    let (mut agree, mut total) = (0usize, 0usize);
    for side in [PriorSide::Image, PriorSide::Text] {
        let e = if side == PriorSide::Image { eps_img } else { eps_txt };
        for &(i, j) in &pairs {
            let gap = side_gap(side, i, j);
            if !(gap.abs() > e + gamma) {
                continue;
            }
            let dt = linalg::sub(protos.row(i), protos.row(j));
            let m: Vec<f64> = draws.iter().map(|d| linalg::dot(&d.f, &dt)).collect();
            let (_, var) = mean_var(&m);
            let same = m.iter().filter(|&&x| x != 0.0 && (x > 0.0) == (gap > 0.0)).count();
            let dis = 1.0 - same as f64 / n as f64;
            let bound = sign_disagreement_bound(var, gap, e, gamma).unwrap_or(1.0);
            let mc_sigma = (dis * (1.0 - dis) / n as f64).sqrt();
            agree += same;
            total += n;
            out_pairs.push(PairConsistency {
                i,
                j,
                side,
                gap,
                mu: mu(i, j),
                sigma_m_sq: var,
                disagreement: dis,
                bound,
                mc_sigma,
                holds: dis <= bound + 3.0 * mc_sigma,
            });
        }
    }
    let all_hold = out_pairs.iter().all(|p| p.holds);
    Ok(SignConsistency {
        eps_img,
        eps_txt,
        gamma,
        n_novel_pairs: pairs.len(),
        n_samples: n,
        pairs: out_pairs,
        rate: (total > 0).then(|| agree as f64 / total as f64),
        all_hold,
    })
}

/// Gates for the false-flip check; missing values are derived from the world.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FalseFlipGates {
    /// Default: 75th percentile of the positive composite gaps on novel edges.
    pub tau_eff: Option<f64>,
    /// Default: `τ − ε_int − γ`.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalseFlipCheck {
    pub applicable: bool,
    pub reason: Option<String>,
    pub tau_eff: Option<f64>,
    pub delta: Option<f64>,
    pub beta_hat: f64,
    pub beta_star: f64,
    pub delta_beta: f64,
    /// `max |μ_ij − Σ_ij − β*|` over novel edges.
    pub eps_composite: f64,
    pub eps_int: f64,
    /// `τ − ε_int − δ`.
    pub gamma_eff: Option<f64>,
    pub n_pairs: usize,
    pub n_samples: usize,
    pub sigma_m_sq: Option<f64>,
    pub empirical_rate: Option<f64>,
    pub mc_sigma: Option<f64>,
    pub chebyshev_bound: Option<f64>,
    pub holds: Option<bool>,
}

/// `σ_m² / (τ − ε_int − δ)²`, or `None` when `τ ≤ ε_int + δ`.
pub fn chebyshev_false_flip_bound(sigma_m: f64, tau: f64, eps_int: f64, delta: f64) -> Option<f64> {
    let gamma = tau - eps_int - delta;
    (gamma > 0.0).then(|| sigma_m * sigma_m / (gamma * gamma))
}

/// Frequency of `m_ij ≤ δ` over the domain on novel oriented edges with
/// `Σ_ij ≥ τ̃`, against the Chebyshev bound.
pub fn check_false_flip_bound(
    world: &World,
    graph: &ConfusionGraph,
    gates: &FalseFlipGates,
    gamma: f64,
) -> Result<FalseFlipCheck> {
    let priors = plain_priors(world, graph)?;
    let gaps = &priors.gaps;
    let novel = novel_classes(world);
    let protos = &world.bundle.prototypes_ft;
    let labels = world.bundle.labels.as_ref().expect("worlds are labeled");

    let base_pairs = default_intercept_pairs(graph, gaps, &world.split.base_classes);
    let mean = domain_mean(world, &novel, world.config.population_samples, STREAM_POPULATION);
    let mu = |i: usize, j: usize| linalg::dot(&mean, protos.row(i)) - linalg::dot(&mean, protos.row(j));
    let (beta_hat, beta_star) = if base_pairs.is_empty() {
        (0.0, 0.0)
    } else {
        let rows: Vec<&[f64]> = (0..world.bundle.n_samples())
            .filter(|&s| world.split.novel_classes.contains(&labels[s]))
            .map(|s| world.bundle.features.row(s))
            .collect();
        let wanted: BTreeSet<(usize, usize)> = base_pairs.iter().copied().collect();
        let stats = margin_stats_over(&rows, protos, graph, Some(&wanted))?;
        let beta_hat = fit_intercept(&stats, gaps, &base_pairs)?.beta_hat;
        let beta_star = base_pairs
            .iter()
            .map(|&(i, j)| mu(i, j) - gaps.get(i, j).unwrap_or(0.0))
            .sum::<f64>()
            / base_pairs.len() as f64;
        (beta_hat, beta_star)
    };
    let delta_beta = beta_hat - beta_star;
    let novel_edges: Vec<(usize, usize)> = edges_within(graph, &world.split.novel_classes).collect();
    let eps_composite = novel_edges
        .iter()
        .map(|&(i, j)| (mu(i, j) - gaps.get(i, j).unwrap_or(0.0) - beta_star).abs())
        .fold(0.0, f64::max);
    let eps_int = eps_composite + delta_beta.abs();

    let mut out = FalseFlipCheck {
        applicable: false,
        reason: None,
        tau_eff: None,
        delta: None,
        beta_hat,
        beta_star,
        delta_beta,
        eps_composite,
        eps_int,
        gamma_eff: None,
        n_pairs: 0,
        n_samples: world.config.mc_samples,
        sigma_m_sq: None,
        empirical_rate: None,
        mc_sigma: None,
        chebyshev_bound: None,
        holds: None,
    };
    if !(gamma > 0.0) {
        out.reason = Some(format!("gamma = {gamma} is not positive"));
        return Ok(out);
    }
    let positive: Vec<f64> = novel_edges
        .iter()
        .filter_map(|&(i, j)| gaps.get(i, j))
        .map(f64::abs)
        .filter(|&g| g > 0.0)
        .collect();
    let Some(tau_eff) = gates.tau_eff.or_else(|| linalg::percentile(&positive, 0.75)) else {
        out.reason = Some("no novel edges with a nonzero gap".into());
        return Ok(out);
    };
    let tau = tau_eff + beta_hat;
    let delta = gates.delta.unwrap_or(tau - eps_int - gamma);
    let gamma_eff = tau - eps_int - delta;
    out.tau_eff = Some(tau_eff);
    out.delta = Some(delta);
    out.gamma_eff = Some(gamma_eff);
    if !(gamma_eff > 0.0) {
        out.reason = Some(format!("tau = {tau} does not exceed eps_int + delta = {}", eps_int + delta));
        return Ok(out);
    }
    let oriented: Vec<(usize, usize)> = novel_edges
        .iter()
        .flat_map(|&(i, j)| [(i, j), (j, i)])
        .filter(|&(i, j)| gaps.get(i, j).is_some_and(|g| g >= tau_eff))
        .collect();
    if oriented.is_empty() {
        out.reason = Some(format!("no novel edge has a gap >= {tau_eff}"));
        return Ok(out);
    }
    let n = world.config.mc_samples;
    let draws = draw_domain(world, &novel, n, STREAM_FLIP);
    let (mut rate, mut var) = (0.0, 0.0);
    for &(i, j) in &oriented {
        let dt = linalg::sub(protos.row(i), protos.row(j));
        let m: Vec<f64> = draws.iter().map(|d| linalg::dot(&d.f, &dt)).collect();
        rate += m.iter().filter(|&&x| x <= delta).count() as f64 / n as f64;
        var += mean_var(&m).1;
    }
    let k = oriented.len() as f64;
    let (rate, var) = (rate / k, var / k);
    let bound = var / (gamma_eff * gamma_eff);
    let mc_sigma = (rate * (1.0 - rate) / n as f64).sqrt();
    out.applicable = true;
    out.n_pairs = oriented.len();
    out.sigma_m_sq = Some(var);
    out.empirical_rate = Some(rate);
    out.mc_sigma = Some(mc_sigma);
    out.chebyshev_bound = Some(bound);
    out.holds = Some(rate <= bound + 3.0 * mc_sigma);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConfusion {
    pub favored: usize,
    pub disfavored: usize,
    pub bias: f64,
    /// Composite gap `Σ(favored, disfavored)`.
    pub gap: f64,
    /// Fraction of disfavored-class samples predicted as the favored class.
    pub rate_toward_favored: f64,
    /// Fraction of favored-class samples predicted as the disfavored class.
    pub rate_toward_disfavored: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionSignature {
    pub samples_per_class: usize,
    /// Every planted pair, biased or not.
    pub pairs: Vec<PairConfusion>,
    /// Mean over biased pairs.
    pub pooled_toward_favored: f64,
    pub pooled_toward_disfavored: f64,
    /// Biased pairs whose two error rates differ.
    pub n_directional: usize,
    /// Among those, the fraction where the sign of `Σ` points along the dominant error.
    pub sign_match_rate: Option<f64>,
}

/// Directional misclassification rates on planted pairs, classifying among novel classes.
pub fn check_confusion_signature(world: &World, graph: &ConfusionGraph) -> Result<ConfusionSignature> {
    let priors = plain_priors(world, graph)?;
    let novel = novel_classes(world);
    let protos = &world.bundle.prototypes_ft;
    let per_class = (world.config.mc_samples / novel.len()).max(1);
    let predict = |f: &[f64]| {
        let mut best = novel[0];
        let mut best_logit = f64::NEG_INFINITY;
        for &c in &novel {
            let l = linalg::dot(f, protos.row(c));
            if l > best_logit {
                best = c;
                best_logit = l;
            }
        }
        best
    };
    let rate = |from: usize, to: usize| {
        let mut rng = substream(world.config.seed, STREAM_CONFUSION + from as u64);
        let hits = (0..per_class)
            .filter(|_| predict(&world.sample_feature(from, &mut rng).1) == to)
            .count();
        hits as f64 / per_class as f64
    };
    let pairs: Vec<PairConfusion> = world
        .truth
        .planted
        .par_iter()
        .map(|p| {
            let gap = priors.gaps.get(p.favored, p.disfavored).unwrap_or_else(|| {
                let t = &priors.text.values;
                let im = &priors.image.values;
                (t[p.favored] - t[p.disfavored]) + (im[p.favored] - im[p.disfavored])
            });
            PairConfusion {
                favored: p.favored,
                disfavored: p.disfavored,
                bias: p.bias,
                gap,
                rate_toward_favored: rate(p.disfavored, p.favored),
                rate_toward_disfavored: rate(p.favored, p.disfavored),
            }
        })
        .collect();
    let biased: Vec<&PairConfusion> = pairs.iter().filter(|p| p.bias != 0.0).collect();
    let k = biased.len().max(1) as f64;
    let pooled_toward_favored = biased.iter().map(|p| p.rate_toward_favored).sum::<f64>() / k;
    let pooled_toward_disfavored = biased.iter().map(|p| p.rate_toward_disfavored).sum::<f64>() / k;
    let directional: Vec<&PairConfusion> = pairs
        .iter()
        .filter(|p| p.bias != 0.0 && p.rate_toward_favored != p.rate_toward_disfavored)
        .collect();
    let matches = directional
        .iter()
        .filter(|p| (p.gap > 0.0) == (p.rate_toward_favored > p.rate_toward_disfavored))
        .count();
    Ok(ConfusionSignature {
        samples_per_class: per_class,
        n_directional: directional.len(),
        sign_match_rate: (!directional.is_empty()).then(|| matches as f64 / directional.len() as f64),
        pairs,
        pooled_toward_favored,
        pooled_toward_disfavored,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceCeiling {
    pub lambda_max: f64,
    pub max_directional_var: f64,
    pub n_directions: usize,
    pub n_samples: usize,
    pub holds: bool,
}

/// `Var[⟨f⁰, Δ⟩] ≤ λ_max(Ω_D)` for unit `Δ`: normalized novel prototype
/// differences plus random directions, `n_directions` in total.
pub fn check_variance_ceiling(world: &World, n_directions: usize) -> Result<VarianceCeiling> {
    let d = world.config.dim;
    let novel = novel_classes(world);
    let n = world.config.mc_samples;
    let draws = draw_domain(world, &novel, n, STREAM_VARIANCE);
    let mut mean = vec![0.0; d];
    for dr in &draws {
        linalg::axpy(&mut mean, 1.0 / n as f64, &dr.f0);
    }
    let centered = DMatrix::from_fn(n, d, |s, k| draws[s].f0[k] - mean[k]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let lambda_max = cov.clone().symmetric_eigenvalues().max();

    let mut dirs: Vec<Vec<f64>> = Vec::new();
    for (a, &i) in novel.iter().enumerate() {
        for &j in &novel[a + 1..] {
            if dirs.len() < n_directions / 2 {
                if let Some(u) = linalg::normalized(&linalg::sub(&world.truth.t0[i], &world.truth.t0[j])) {
                    dirs.push(u);
                }
            }
        }
    }
    let mut rng = substream(world.config.seed, STREAM_VARIANCE - 1);
    while dirs.len() < n_directions {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = linalg::normalized(&g) {
            dirs.push(u);
        }
    }
    let max_directional_var = dirs
        .iter()
        .map(|u| {
            let proj: Vec<f64> = draws.iter().map(|dr| linalg::dot(&dr.f0, u)).collect();
            mean_var(&proj).1
        })
        .fold(0.0, f64::max);
    Ok(VarianceCeiling {
        lambda_max,
        max_directional_var,
        n_directions: dirs.len(),
        n_samples: n,
        holds: max_directional_var <= lambda_max * (1.0 + 1e-9) + EXACT_SLACK,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_knn_graph;
    use crate::simulator::{generate_world, PlantedBias, SyntheticModelConfig};

    fn small(seed: u64) -> SyntheticModelConfig {
        SyntheticModelConfig {
            dim: 32,
            n_base: 8,
            n_novel: 8,
            samples_per_class: 20,
            mc_samples: 2000,
            population_samples: 20_000,
            seed,
            ..Default::default()
        }
    }

    fn world_and_graph(cfg: &SyntheticModelConfig) -> (World, ConfusionGraph) {
        let w = generate_world(cfg).unwrap();
        let g = build_knn_graph(&w.bundle.prototypes_zs, cfg.knn_k).unwrap();
        (w, g)
    }

    #[test]
    fn closed_form_bounds() {
        let b = chebyshev_false_flip_bound(0.1, 0.5, 0.1, 0.2).unwrap();
        assert!((b - 0.25).abs() < 1e-12);
        assert!(chebyshev_false_flip_bound(0.1, 0.3, 0.1, 0.2).is_none());
        assert!(sign_disagreement_bound(0.01, 0.3, 0.1, 0.0).is_none());
        assert!(sign_disagreement_bound(0.01, 0.3, 0.25, 0.1).is_none());
        assert!((sign_disagreement_bound(0.001, -0.3, 0.1, 0.1).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn projection_lemma_on_small_world() {
        let (w, g) = world_and_graph(&small(1));
        let r = check_projection_lemma(&w, &g).unwrap();
        assert!(r.holds(), "{r:?}");
        assert!(r.max_text_constant.unwrap() <= 1.0);
    }

    #[test]
    fn zero_deformation_zeroes_text_residual() {
        let cfg = SyntheticModelConfig {
            deform_scale_base: 0.0,
            deform_scale_novel: 0.0,
            ..small(2)
        };
        let (w, g) = world_and_graph(&cfg);
        let r = check_projection_lemma(&w, &g).unwrap();
        assert!(r.max_text_residual_raw < 1e-15);
        assert!(r.max_text_constant.is_none());
    }

    #[test]
    fn anchor_orthogonal_to_s_kills_base_image_gaps() {
        let cfg = SyntheticModelConfig { kappa_img: 0.0, ..small(3) };
        let (w, g) = world_and_graph(&cfg);
        let r = check_base_suppression(&w, &g).unwrap();
        assert!(r.kappa_img < 1e-12);
        for (i, j) in all_pairs(&w.split.base_classes) {
            let gap = linalg::dot(&w.truth.u_img, &linalg::sub(&w.truth.t0[i], &w.truth.t0[j]));
            assert!(gap.abs() < 1e-12);
        }
        assert!(r.holds());
    }

    #[test]
    fn false_flip_not_applicable_without_positive_gamma() {
        let (w, g) = world_and_graph(&small(4));
        let r = check_false_flip_bound(&w, &g, &FalseFlipGates::default(), 0.0).unwrap();
        assert!(!r.applicable);
        assert!(r.holds.is_none());
    }

    #[test]
    fn noiseless_undeformed_world_agrees_in_sign() {
        // κ → ∞ surrogate: features sit on their class directions.
        let cfg = SyntheticModelConfig {
            kappa: 1e9,
            deform_scale_base: 0.0,
            deform_scale_novel: 0.0,
            ..small(5)
        };
        let (w, g) = world_and_graph(&cfg);
        let r = check_sign_consistency(&w, &g, 0.01).unwrap();
        for p in &r.pairs {
            assert!(p.sigma_m_sq >= 0.0);
            assert!(p.holds);
        }
    }

    #[test]
    fn unbiased_pairs_fall_below_the_gate() {
        let cfg = SyntheticModelConfig {
            planted_bias: PlantedBias::Uniform(0.0),
            ..small(6)
        };
        let (w, g) = world_and_graph(&cfg);
        let r = check_sign_consistency(&w, &g, 0.1).unwrap();
        for p in &r.pairs {
            let eps = if p.side == PriorSide::Image { r.eps_img } else { r.eps_txt };
            assert!(p.gap.abs() > eps + 0.1);
        }
    }

    #[test]
    fn variance_ceiling_holds() {
        let (w, _) = world_and_graph(&small(7));
        let r = check_variance_ceiling(&w, 20).unwrap();
        assert!(r.holds, "{r:?}");
        assert_eq!(r.n_directions, 20);
    }
}
