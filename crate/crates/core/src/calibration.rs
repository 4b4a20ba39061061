//! Gate calibration on pseudo-target splits carved out of the base classes.
//!
//! The base classes are partitioned into `E` folds. Each fold plays the part
//! of an unseen target: a model adapted on the remaining classes is evaluated
//! on the fold's samples, and `(τ̃, δ)` is picked by exhaustive grid search
//! over the fold-averaged objective.
//!
//! The sweep does not rerun the corrector per cell. For one sample the flip
//! target at prior gate `τ̃` is the highest-logit neighbor with `Σ ≥ τ̃`, and
//! it is taken iff its margin is `≤ δ`. So every sample contributes a handful
//! of axis-aligned rectangles to the grid, which a 2-D prefix sum collects.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::{self, GateConfig, DEFAULT_EPSILON0};
use crate::error::{Error, Result};
use crate::graph::ConfusionGraph;
use crate::linalg;
use crate::priors::PairGapTable;
use crate::store::{BundleView, DatasetSplit, DomainBundle};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const COARSE_STEP: f64 = 1e-2;
/// Percentiles of the observed values bounding a default grid axis.
pub const DEFAULT_RANGE: (f64, f64) = (0.01, 0.99);
const MAX_GRID_CELLS: usize = 50_000_000;
const FOLD_STREAM: u64 = 0xf01d;

/// Inclusive range `[min, max]` sampled every `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl GridAxis {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self> {
        let axis = GridAxis { min, max, step };
        axis.validate()?;
        Ok(axis)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::invalid(format!("grid step must be positive, got {}", self.step)));
        }
        if !(self.min < self.max) || !self.min.is_finite() || !self.max.is_finite() {
            return Err(Error::invalid(format!(
                "grid needs min < max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    /// Grid points in ascending order.
    ///
    /// When `1/step` is an integer `N` and `min` lies on that lattice, the
    /// points are `k / N` for integer `k`, so a grid and its refinement by an
    /// integer factor share their common points bit for bit. Otherwise they
    /// are `min + k * step`.
    pub fn values(&self) -> Vec<f64> {
        let inv = 1.0 / self.step;
        let n = inv.round();
        let on_lattice = |x: f64| (x * n - (x * n).round()).abs() <= 1e-9 * (x * n).abs().max(1.0);
        if n >= 1.0 && (inv - n).abs() <= 1e-9 * n && on_lattice(self.min) {
            let lo = (self.min * n - 1e-9).ceil() as i64;
            let hi = (self.max * n + 1e-9).floor() as i64;
            (lo..=hi).map(|k| k as f64 / n).collect()
        } else {
            let count = ((self.max - self.min) / self.step + 1e-9).floor() as usize;
            (0..=count).map(|k| self.min + k as f64 * self.step).collect()
        }
    }

    /// Parses `min,max,step`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        let [min, max, step] = parts.as_slice() else {
            return Err(Error::invalid(format!("expected min,max,step, got {text:?}")));
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::invalid(format!("not a number: {s:?}")))
        };
        GridAxis::new(num(min)?, num(max)?, num(step)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Correct flips minus wrong flips.
    #[default]
    NetCorrectFlips,
    /// Number of flips, among cells whose mean FER does not exceed `cap`.
    CoverageUnderFerCap { cap: f64 },
}

impl std::str::FromStr for Objective {
    type Err = Error;

    /// `net` or `cap:<fer>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "net" {
            return Ok(Objective::NetCorrectFlips);
        }
        if let Some(cap) = s.strip_prefix("cap:") {
            let cap: f64 = cap
                .parse()
                .map_err(|_| Error::invalid(format!("bad FER cap {cap:?}")))?;
            if !(0.0..=1.0).contains(&cap) {
                return Err(Error::invalid(format!("FER cap must lie in [0, 1], got {cap}")));
            }
            return Ok(Objective::CoverageUnderFerCap { cap });
        }
        Err(Error::invalid(format!("unknown objective {s:?} (expected net or cap:<fer>)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Each fold of base classes becomes the pseudo-novel set.
    #[default]
    BaseToNovel,
    /// First half of the source classes is pseudo-source, second half pseudo-target.
    HalfSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub n_folds: usize,
    /// `None` spans the 1st to 99th percentile of observed gaps.
    #[serde(default)]
    pub grid_tau: Option<GridAxis>,
    /// `None` spans the 1st to 99th percentile of observed margins.
    #[serde(default)]
    pub grid_delta: Option<GridAxis>,
    #[serde(default = "default_step")]
    pub default_step: f64,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub mode: SplitMode,
    #[serde(default = "default_epsilon0")]
    pub epsilon0: f64,
}

fn default_step() -> f64 {
    DEFAULT_STEP
}

fn default_epsilon0() -> f64 {
    DEFAULT_EPSILON0
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            n_folds: 5,
            grid_tau: None,
            grid_delta: None,
            default_step: DEFAULT_STEP,
            objective: Objective::NetCorrectFlips,
            mode: SplitMode::BaseToNovel,
            epsilon0: DEFAULT_EPSILON0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 2 && self.mode == SplitMode::BaseToNovel {
            return Err(Error::invalid(format!("need at least 2 folds, got {}", self.n_folds)));
        }
        for axis in self.grid_tau.iter().chain(&self.grid_delta) {
            axis.validate()?;
        }
        if !(self.default_step > 0.0) {
            return Err(Error::invalid("default grid step must be positive"));
        }
        Ok(())
    }
}

/// Splits `base_classes` into `n_folds` disjoint sets whose sizes differ by at most one.
pub fn partition_folds(
    base_classes: &BTreeSet<usize>,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<BTreeSet<usize>>> {
    if n_folds == 0 || n_folds > base_classes.len() {
        return Err(Error::invalid(format!(
            "cannot split {} base classes into {n_folds} folds",
            base_classes.len()
        )));
    }
    let mut classes: Vec<usize> = base_classes.iter().copied().collect();
    classes.shuffle(&mut crate::rng::substream(seed, FOLD_STREAM));
    let mut folds = vec![BTreeSet::new(); n_folds];
    for (k, c) in classes.into_iter().enumerate() {
        folds[k % n_folds].insert(c);
    }
    Ok(folds)
}

/// Pseudo-source and pseudo-target classes for one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_id: usize,
    pub pseudo_base: BTreeSet<usize>,
    pub pseudo_target: BTreeSet<usize>,
}

/// Class sets for every fold of `split` under `mode`.
pub fn plan_folds(
    split: &DatasetSplit,
    n_folds: usize,
    mode: SplitMode,
    seed: u64,
) -> Result<Vec<FoldPlan>> {
    match mode {
        SplitMode::BaseToNovel => partition_folds(&split.base_classes, n_folds, seed)?
            .into_iter()
            .enumerate()
            .map(|(fold_id, fold)| {
                let (pseudo_base, pseudo_target) = pseudo_classes(split, &fold, mode)?;
                Ok(FoldPlan {
                    fold_id,
                    pseudo_base,
                    pseudo_target,
                })
            })
            .collect(),
        SplitMode::HalfSplit => {
            let (pseudo_base, pseudo_target) = pseudo_classes(split, &BTreeSet::new(), mode)?;
            Ok(vec![FoldPlan {
                fold_id: 0,
                pseudo_base,
                pseudo_target,
            }])
        }
    }
}

fn pseudo_classes(
    split: &DatasetSplit,
    fold: &BTreeSet<usize>,
    mode: SplitMode,
) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    match mode {
        SplitMode::BaseToNovel => {
            if fold.is_empty() {
                return Err(Error::invalid("empty fold"));
            }
            if !fold.is_subset(&split.base_classes) {
                return Err(Error::invalid("fold is not a subset of the base classes"));
            }
            let pseudo_base = split.base_classes.difference(fold).copied().collect();
            Ok((pseudo_base, fold.clone()))
        }
        SplitMode::HalfSplit => {
            let source: Vec<usize> = split.base_classes.iter().copied().collect();
            if source.len() < 2 {
                return Err(Error::invalid("half split needs at least 2 source classes"));
            }
            let (a, b) = source.split_at(source.len() / 2);
            Ok((a.iter().copied().collect(), b.iter().copied().collect()))
        }
    }
}

/// Pseudo-train and pseudo-target views for one fold. `fold` is ignored in half-split mode.
pub fn make_pseudo_split<'a>(
    bundle: &'a DomainBundle,
    split: &DatasetSplit,
    fold: &BTreeSet<usize>,
    mode: SplitMode,
) -> Result<(BundleView<'a>, BundleView<'a>)> {
    let (pseudo_base, pseudo_target) = pseudo_classes(split, fold, mode)?;
    Ok((
        BundleView::restricted(bundle, &pseudo_base)?,
        BundleView::restricted(bundle, &pseudo_target)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateEvaluation {
    /// Accuracy after correction minus accuracy before.
    pub accuracy_gain: f64,
    pub flips: usize,
    pub correct_flips: usize,
    pub fer: f64,
}

/// Runs the corrector on a labeled view and reports its metrics.
pub fn evaluate_gates(
    target: &BundleView<'_>,
    gaps: &PairGapTable,
    graph: &ConfusionGraph,
    gates: &GateConfig,
) -> Result<GateEvaluation> {
    if target.bundle.labels.is_none() {
        return Err(Error::InsufficientData("pseudo-target has no labels".into()));
    }
    let batch = corrector::batch_correct_view(target, gaps, graph, gates)?;
    let s = &batch.summary;
    Ok(GateEvaluation {
        accuracy_gain: s.accuracy_after.unwrap_or(0.0) - s.accuracy_before.unwrap_or(0.0),
        flips: s.flips,
        correct_flips: s.correct_flips.unwrap_or(0),
        fer: s.flip_error_rate.unwrap_or(0.0),
    })
}

/// Neighbor of a sample's top-1 class, as seen by the gates.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Contender {
    class: usize,
    sigma: f64,
    margin: f64,
    logit: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct SampleRecord {
    label: usize,
    top1: usize,
    contenders: Vec<Contender>,
}

/// Everything the grid sweep needs from one fold's pseudo-target.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldRecords {
    pub fold_id: usize,
    samples: Vec<SampleRecord>,
}

impl FoldRecords {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    fn sigmas(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().flat_map(|s| s.contenders.iter().map(|c| c.sigma))
    }

    fn margins(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().flat_map(|s| s.contenders.iter().map(|c| c.margin))
    }
}

/// Extracts per-sample gate inputs from a labeled pseudo-target view.
pub fn prepare_fold(
    fold_id: usize,
    target: &BundleView<'_>,
    gaps: &PairGapTable,
    graph: &ConfusionGraph,
) -> Result<FoldRecords> {
    let bundle = target.bundle;
    let labels = bundle
        .labels
        .as_ref()
        .ok_or_else(|| Error::InsufficientData("pseudo-target has no labels".into()))?;
    if graph.n_classes() != bundle.n_classes() {
        return Err(Error::invalid(format!(
            "graph has {} classes, bundle {}",
            graph.n_classes(),
            bundle.n_classes()
        )));
    }
    let mask = target.class_mask();
    let samples = target
        .samples
        .par_iter()
        .map(|&s| {
            let logits = bundle.prototypes_ft.dot_rows(bundle.features.row(s))?;
            let mut top1: Option<usize> = None;
            for c in target.classes.iter().copied() {
                if top1.is_none_or(|b| logits[c] > logits[b]) {
                    top1 = Some(c);
                }
            }
            let i = top1.ok_or_else(|| Error::InsufficientData("view has no classes".into()))?;
            let contenders = graph
                .neighbors(i)
                .iter()
                .filter(|&&j| mask[j])
                .map(|&j| {
                    Ok(Contender {
                        class: j,
                        sigma: gaps.try_get(i, j)?,
                        margin: logits[i] - logits[j],
                        logit: logits[j],
                    })
                })
                .collect::<Result<_>>()?;
            Ok(SampleRecord {
                label: labels[s],
                top1: i,
                contenders,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FoldRecords { fold_id, samples })
}

/// Default axis spanning the configured percentiles of `values`.
pub fn default_axis(values: &[f64], step: f64) -> Result<GridAxis> {
    let lo = linalg::percentile(values, DEFAULT_RANGE.0)
        .ok_or_else(|| Error::InsufficientData("no gate inputs to derive a grid from".into()))?;
    let hi = linalg::percentile(values, DEFAULT_RANGE.1).unwrap_or(lo);
    // Snap outward to the step lattice so grids with nested steps line up.
    let lo = (lo / step).floor() * step;
    let mut hi = (hi / step).ceil() * step;
    if hi <= lo {
        hi = lo + step;
    }
    GridAxis::new(lo, hi, step)
}

/// Resolves the grid axes, deriving missing ones from the folds' observed values.
pub fn resolve_axes(folds: &[FoldRecords], config: &CalibrationConfig) -> Result<(GridAxis, GridAxis)> {
    let tau = match config.grid_tau {
        Some(a) => a,
        None => {
            let v: Vec<f64> = folds.iter().flat_map(|f| f.sigmas()).collect();
            default_axis(&v, config.default_step)?
        }
    };
    let delta = match config.grid_delta {
        Some(a) => a,
        None => {
            let v: Vec<f64> = folds.iter().flat_map(|f| f.margins()).collect();
            default_axis(&v, config.default_step)?
        }
    };
    Ok((tau, delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold_id: usize,
    pub n_samples: usize,
    pub accuracy_gain: f64,
    pub flips: usize,
    pub fer: f64,
}

/// Fold-averaged objective over the grid; `None` marks cells ruled out by a FER cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSurface {
    pub tau: Vec<f64>,
    pub delta: Vec<f64>,
    /// `objective[a][b]` belongs to `(tau[a], delta[b])`.
    pub objective: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema_version: u32,
    pub best_tau_eff: f64,
    pub best_delta: f64,
    pub best_objective: f64,
    /// Mean per-fold FER at the selected cell.
    pub best_fer: f64,
    pub best_flips: usize,
    pub n_folds: usize,
    pub objective: Objective,
    pub grid_tau: GridAxis,
    pub grid_delta: GridAxis,
    pub per_fold: Vec<FoldMetrics>,
    pub grid_surface: GridSurface,
}

impl CalibrationReport {
    pub fn gates(&self, epsilon0: f64) -> GateConfig {
        let mut g = GateConfig::new(self.best_tau_eff, self.best_delta);
        g.epsilon0 = epsilon0;
        g
    }
}

/// Per-cell flip tallies for one fold.
struct FoldGrid {
    n_delta: usize,
    correct: Vec<i32>,
    wrong: Vec<i32>,
    /// Flips away from a correct prediction.
    broken: Vec<i32>,
}

impl FoldGrid {
    fn flips(&self, cell: usize) -> i64 {
        (self.correct[cell] + self.wrong[cell]) as i64
    }

    fn fer(&self, cell: usize) -> f64 {
        let f = self.flips(cell);
        if f == 0 {
            0.0
        } else {
            self.wrong[cell] as f64 / f as f64
        }
    }
}

fn sweep_fold(fold: &FoldRecords, tau: &[f64], delta: &[f64]) -> FoldGrid {
    let (nt, nd) = (tau.len(), delta.len());
    // Rows 0..=nt so the closing edge of a τ-interval always has a slot.
    let width = nd + 1;
    let mut diff = [vec![0i32; (nt + 1) * width], vec![0i32; (nt + 1) * width], vec![0i32; (nt + 1) * width]];
    let mut order: Vec<(usize, Contender)> = Vec::new();
    for s in &fold.samples {
        // τ[a] ≤ σ exactly for a < reach.
        order.clear();
        order.extend(
            s.contenders
                .iter()
                .map(|c| (tau.partition_point(|&t| t <= c.sigma), *c))
                .filter(|(reach, _)| *reach > 0),
        );
        order.sort_by_key(|x| std::cmp::Reverse(x.0));
        let mut best: Option<Contender> = None;
        let mut k = 0;
        while k < order.len() {
            let reach = order[k].0;
            while k < order.len() && order[k].0 == reach {
                let c = order[k].1;
                if best.is_none_or(|b| c.logit > b.logit || (c.logit == b.logit && c.class < b.class)) {
                    best = Some(c);
                }
                k += 1;
            }
            let next = order.get(k).map_or(0, |o| o.0);
            let b = best.expect("at least one contender seen");
            let d0 = delta.partition_point(|&d| d < b.margin);
            if d0 == nd {
                continue;
            }
            let slot = if b.class == s.label {
                0
            } else if s.top1 == s.label {
                2
            } else {
                1
            };
            // Rectangle a ∈ [next, reach), b ∈ [d0, nd).
            diff[slot][next * width + d0] += 1;
            diff[slot][reach * width + d0] -= 1;
            if slot == 2 {
                diff[1][next * width + d0] += 1;
                diff[1][reach * width + d0] -= 1;
            }
        }
    }
    let mut out = Vec::with_capacity(3);
    for d in diff {
        let mut grid = vec![0i32; nt * nd];
        let mut col = vec![0i32; nd];
        for a in 0..nt {
            let mut run = 0;
            for b in 0..nd {
                col[b] += d[a * width + b];
                run += col[b];
                grid[a * nd + b] = run;
            }
        }
        out.push(grid);
    }
    let broken = out.pop().unwrap();
    let wrong = out.pop().unwrap();
    let correct = out.pop().unwrap();
    FoldGrid {
        n_delta: nd,
        correct,
        wrong,
        broken,
    }
}

/// Exhaustive search for the gates maximizing the fold-averaged objective.
///
/// Ties go to lower mean FER, then fewer flips, then smaller `τ̃`, then smaller `δ`.
pub fn grid_search(folds: &[FoldRecords], config: &CalibrationConfig) -> Result<CalibrationReport> {
    config.validate()?;
    if folds.is_empty() {
        return Err(Error::InsufficientData("no calibration folds".into()));
    }
    let (tau_axis, delta_axis) = resolve_axes(folds, config)?;
    let tau = tau_axis.values();
    let delta = delta_axis.values();
    if tau.is_empty() || delta.is_empty() {
        return Err(Error::invalid("empty grid"));
    }
    let cells = tau.len().saturating_mul(delta.len());
    if cells > MAX_GRID_CELLS {
        return Err(Error::invalid(format!(
            "grid has {cells} cells, above the limit of {MAX_GRID_CELLS}; use a coarser step"
        )));
    }
    log::debug!("grid search over {} x {} cells, {} folds", tau.len(), delta.len(), folds.len());

    let grids: Vec<FoldGrid> = folds.par_iter().map(|f| sweep_fold(f, &tau, &delta)).collect();
    let e = folds.len() as f64;

    // Aggregated per cell in fixed fold order.
    let score = |cell: usize| -> (Option<f64>, f64, i64) {
        let mut net = 0i64;
        let mut flips = 0i64;
        let mut fer = 0.0;
        for g in &grids {
            net += (g.correct[cell] - g.wrong[cell]) as i64;
            flips += g.flips(cell);
            fer += g.fer(cell);
        }
        let fer = fer / e;
        let value = match config.objective {
            Objective::NetCorrectFlips => Some(net as f64 / e),
            Objective::CoverageUnderFerCap { cap } => (fer <= cap).then(|| flips as f64 / e),
        };
        (value, fer, flips)
    };
    let scored: Vec<(Option<f64>, f64, i64)> = (0..cells).into_par_iter().map(score).collect();

    let mut best: Option<usize> = None;
    for (cell, &(value, fer, flips)) in scored.iter().enumerate() {
        let Some(v) = value else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let (bv, bfer, bflips) = scored[b];
                let bv = bv.expect("best cell is feasible");
                v > bv || (v == bv && (fer < bfer || (fer == bfer && flips < bflips)))
            }
        };
        if better {
            best = Some(cell);
        }
    }
    let best = best.ok_or_else(|| {
        Error::InsufficientData("no grid cell satisfies the FER cap".into())
    })?;
    let nd = delta.len();
    let (a, b) = (best / nd, best % nd);
    let per_fold = folds
        .iter()
        .zip(&grids)
        .map(|(f, g)| {
            debug_assert_eq!(g.n_delta, nd);
            let net_acc = g.correct[best] - g.broken[best];
            FoldMetrics {
                fold_id: f.fold_id,
                n_samples: f.n_samples(),
                accuracy_gain: net_acc as f64 / f.n_samples().max(1) as f64,
                flips: g.flips(best) as usize,
                fer: g.fer(best),
            }
        })
        .collect();
    let objective = scored
        .chunks(nd)
        .map(|row| row.iter().map(|s| s.0).collect())
        .collect();
    let (best_value, best_fer, best_flips) = scored[best];
    Ok(CalibrationReport {
        schema_version: crate::SCHEMA_VERSION,
        best_tau_eff: tau[a],
        best_delta: delta[b],
        best_objective: best_value.expect("best cell is feasible"),
        best_fer,
        best_flips: best_flips as usize,
        n_folds: folds.len(),
        objective: config.objective,
        grid_tau: tau_axis,
        grid_delta: delta_axis,
        per_fold,
        grid_surface: GridSurface {
            tau,
            delta,
            objective,
        },
    })
}
