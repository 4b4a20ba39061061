//! Calibrate-then-correct on generated worlds.
//!
//! Each calibration fold is emulated by a fresh world whose base classes are
//! the fold's pseudo-base and whose novel classes are its pseudo-target, so
//! the pseudo-target carries the same kind of planted bias as the real target.

use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::world::{generate_world, World};
use super::SyntheticModelConfig;
use crate::calibration::{grid_search, plan_folds, prepare_fold, CalibrationConfig, CalibrationReport, FoldPlan, FoldRecords};
use crate::corrector::{batch_correct_view, CorrectionSummary, GateConfig};
use crate::error::{Error, Result};
use crate::graph::{build_knn_graph, ConfusionGraph, EdgeListFile};
use crate::priors::{priors_for_bundle, GapMode};
use crate::rng::substream;
use crate::store::{save_bundle, write_json, BundleView};

const FOLD_SEED_STREAM: u64 = 6 << 32;

/// A fold's class plan together with the world that emulates it.
#[derive(Debug, Clone)]
pub struct FoldWorld {
    pub plan: FoldPlan,
    pub world: World,
    pub graph: ConfusionGraph,
}

/// Seed of the world emulating fold `fold_id`.
pub fn fold_seed(seed: u64, fold_id: usize) -> u64 {
    substream(seed, FOLD_SEED_STREAM + fold_id as u64).next_u64()
}

/// kNN graph over a world's zero-shot prototypes, with `k` capped below the class count.
pub fn world_graph(world: &World) -> Result<ConfusionGraph> {
    let k = world.config.knn_k.min(world.n_classes().saturating_sub(1)).max(1);
    build_knn_graph(&world.bundle.prototypes_zs, k)
}

/// One emulating world per fold of `world`'s base classes.
pub fn fold_worlds(world: &World, config: &CalibrationConfig) -> Result<Vec<FoldWorld>> {
    let plans = plan_folds(&world.split, config.n_folds, config.mode, world.config.seed)?;
    plans
        .into_par_iter()
        .map(|plan| {
            let cfg = SyntheticModelConfig {
                n_base: plan.pseudo_base.len(),
                n_novel: plan.pseudo_target.len(),
                seed: fold_seed(world.config.seed, plan.fold_id),
                ..world.config.clone()
            };
            let world = generate_world(&cfg)?;
            let graph = world_graph(&world)?;
            Ok(FoldWorld { plan, world, graph })
        })
        .collect()
}

/// Gate inputs from a fold world's novel (pseudo-target) classes.
pub fn fold_records(fold: &FoldWorld) -> Result<FoldRecords> {
    let priors = priors_for_bundle(&fold.world.bundle, &fold.graph, GapMode::Plain)?;
    let view = BundleView::restricted(&fold.world.bundle, &fold.world.split.novel_classes)?;
    prepare_fold(fold.plan.fold_id, &view, &priors.gaps, &fold.graph)
}

/// Writes `world/` and `folds/fold_<k>/` under `dir`, each with a bundle,
/// `split.json` and `edges.json`. A fold's split lists its pseudo-target as novel.
pub fn emit_bundles(world: &World, folds: &[FoldWorld], dir: &Path) -> Result<()> {
    let write = |w: &World, graph: &ConfusionGraph, sub: &Path| -> Result<()> {
        save_bundle(&w.bundle, sub)?;
        write_json(&sub.join("split.json"), &w.split)?;
        write_json(&sub.join("edges.json"), &EdgeListFile::new(graph))
    };
    write(world, &world_graph(world)?, &dir.join("world"))?;
    for f in folds {
        write(&f.world, &f.graph, &dir.join("folds").join(format!("fold_{}", f.plan.fold_id)))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEndReport {
    pub schema_version: u32,
    pub seed: u64,
    pub n_folds: usize,
    pub step: f64,
    pub tau_eff: f64,
    pub delta: f64,
    /// Fold-averaged objective at the selected cell.
    pub calibration_objective: f64,
    /// Flips and accuracy on novel samples, competing among novel classes.
    pub novel: CorrectionSummary,
    /// Same for base samples among base classes; flips here change base predictions.
    pub base: CorrectionSummary,
}

impl EndToEndReport {
    pub fn novel_gain(&self) -> Option<f64> {
        Some(self.novel.accuracy_after? - self.novel.accuracy_before?)
    }
}

/// Calibrates gates on emulated folds, then corrects the target world.
pub fn calibrate_world(world: &World, config: &CalibrationConfig) -> Result<(Vec<FoldWorld>, CalibrationReport)> {
    let folds = fold_worlds(world, config)?;
    let records = folds.iter().map(fold_records).collect::<Result<Vec<_>>>()?;
    let report = grid_search(&records, config)?;
    Ok((folds, report))
}

/// Generates a world, calibrates with `n_folds` folds at grid `step`, and
/// applies the selected gates to its novel and base classes.
pub fn end_to_end(config: &SyntheticModelConfig, n_folds: usize, step: f64) -> Result<EndToEndReport> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!("grid step must be positive, got {step}")));
    }
    let world = generate_world(config)?;
    let cal = CalibrationConfig {
        n_folds,
        default_step: step,
        ..Default::default()
    };
    let (_, report) = calibrate_world(&world, &cal)?;
    let gates: GateConfig = report.gates(cal.epsilon0);
    let graph = world_graph(&world)?;
    let gaps = priors_for_bundle(&world.bundle, &graph, GapMode::Plain)?.gaps;
    let run = |classes| -> Result<CorrectionSummary> {
        let view = BundleView::restricted(&world.bundle, classes)?;
        Ok(batch_correct_view(&view, &gaps, &graph, &gates)?.summary)
    };
    Ok(EndToEndReport {
        schema_version: crate::SCHEMA_VERSION,
        seed: config.seed,
        n_folds,
        step,
        tau_eff: report.best_tau_eff,
        delta: report.best_delta,
        calibration_objective: report.best_objective,
        novel: run(&world.split.novel_classes)?,
        base: run(&world.split.base_classes)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::load_bundle;

    fn small() -> SyntheticModelConfig {
        SyntheticModelConfig {
            dim: 32,
            n_base: 8,
            n_novel: 8,
            samples_per_class: 20,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn fold_worlds_match_the_plan() {
        let world = generate_world(&small()).unwrap();
        let cal = CalibrationConfig { n_folds: 4, ..Default::default() };
        let folds = fold_worlds(&world, &cal).unwrap();
        assert_eq!(folds.len(), 4);
        for f in &folds {
            assert_eq!(f.world.split.novel_classes.len(), f.plan.pseudo_target.len());
            assert_eq!(f.world.split.base_classes.len(), f.plan.pseudo_base.len());
            assert_ne!(f.world.config.seed, world.config.seed);
        }
        let seeds: std::collections::BTreeSet<u64> = folds.iter().map(|f| f.world.config.seed).collect();
        assert_eq!(seeds.len(), 4);
    }

    #[test]
    fn emitted_bundles_reload() {
        let world = generate_world(&small()).unwrap();
        let cal = CalibrationConfig { n_folds: 2, ..Default::default() };
        let folds = fold_worlds(&world, &cal).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_bundles(&world, &folds, dir.path()).unwrap();
        let b = load_bundle(&dir.path().join("world")).unwrap();
        assert_eq!(b.class_names, world.bundle.class_names);
        for k in 0..2 {
            let d = dir.path().join("folds").join(format!("fold_{k}"));
            assert!(d.join("split.json").exists());
            assert!(d.join("edges.json").exists());
            load_bundle(&d).unwrap();
        }
    }

    #[test]
    fn end_to_end_is_deterministic() {
        let a = end_to_end(&small(), 2, 1e-2).unwrap();
        let b = end_to_end(&small(), 2, 1e-2).unwrap();
        assert_eq!(a, b);
        assert!(end_to_end(&small(), 2, 0.0).is_err());
    }
}
