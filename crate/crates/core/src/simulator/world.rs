//! Synthetic domains drawn from the low-rank deformation model.
//!
//! Zero-shot prototypes come in confusable pairs sharing a cluster direction.
//! The base prototypes span the subspace `S`; the adapter `U` has its columns
//! inside `S` (up to an optional leakage), and every class is moved by
//! `U b(c)` with `‖b‖` set by its base/novel deformation scale. Anchors have
//! a capped share of their energy in `S` and otherwise point along a common
//! direction `w ⟂ S`. Novel pairs get their planted bias by pushing the two
//! prototypes apart along `w`.
//!
//! Image features of class `c` are vMF draws around `normalize(t⁰(c) + α u_img)`,
//! so the anchor direction enters every logit, deformed by the same adapter
//! offset as the class prototype.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::subspace::Subspace;
use super::vmf::VmfSampler;
use super::SyntheticModelConfig;
use crate::error::Result;
use crate::linalg;
use crate::rng::{substream, SimRng};
use crate::store::{DatasetSplit, DomainBundle, EmbeddingMatrix, NeutralAnchors, UnitVector};

const STREAM_PROTOTYPES: u64 = 1;
const STREAM_ANCHORS: u64 = 2;
const STREAM_ADAPTER: u64 = 3;
/// Feature streams are `STREAM_FEATURES + class`.
const STREAM_FEATURES: u64 = 1 << 20;

/// A novel confusable pair; its zero-shot prior was tilted toward `favored` by `bias` (possibly 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub favored: usize,
    pub disfavored: usize,
    pub bias: f64,
}

/// Generator internals that the bundles do not expose.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Unit zero-shot prototypes `t⁰(c)`.
    pub t0: Vec<Vec<f64>>,
    /// Raw deformed prototypes `t⁰(c) + U b(c)`, before normalization.
    pub t_raw: Vec<Vec<f64>>,
    /// Adapter columns, `rank` vectors of length `dim`.
    pub adapter: Vec<Vec<f64>>,
    /// Spectral norm of the adapter.
    pub adapter_norm: f64,
    /// Per-class adapter coefficients.
    pub b: Vec<Vec<f64>>,
    /// Span of the base zero-shot prototypes.
    pub subspace: Subspace,
    pub u_img: Vec<f64>,
    pub u_txt_zs: Vec<f64>,
    pub u_txt_ft: Vec<f64>,
    /// vMF mean direction of each class's zero-shot features.
    pub class_means: Vec<Vec<f64>>,
    pub planted: Vec<PlantedPair>,
}

/// One generated domain.
#[derive(Debug, Clone)]
pub struct World {
    pub config: SyntheticModelConfig,
    /// Deformed features and prototypes, i.e. what the tuned model sees.
    pub bundle: DomainBundle,
    /// Undeformed features with zero-shot prototypes on both sides.
    pub zs_bundle: DomainBundle,
    pub split: DatasetSplit,
    pub truth: GroundTruth,
    samplers: Vec<VmfSampler>,
}

fn gaussian_unit(dim: usize, rng: &mut SimRng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Some(u) = linalg::normalized(&g) {
            return u;
        }
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    linalg::normalized(v).expect("generator produced a zero vector")
}

fn spectral_norm(columns: &[Vec<f64>], dim: usize) -> f64 {
    if columns.is_empty() {
        return 0.0;
    }
    let m = nalgebra::DMatrix::from_fn(dim, columns.len(), |i, j| columns[j][i]);
    m.singular_values().max()
}

/// Pairs `(2k, 2k+1)` within a range, plus a trailing singleton when the count is odd.
fn clusters(range: std::ops::Range<usize>) -> Vec<Vec<usize>> {
    let classes: Vec<usize> = range.collect();
    classes.chunks(2).map(<[usize]>::to_vec).collect()
}

impl World {
    pub fn n_classes(&self) -> usize {
        self.config.n_base + self.config.n_novel
    }

    pub fn is_base(&self, class: usize) -> bool {
        class < self.config.n_base
    }

    /// One `(zero-shot, deformed)` feature pair for `class`.
    pub fn sample_feature(&self, class: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let f0 = self.samplers[class].sample(rng);
        let offset = self.adapter_offset(class);
        let f = match offset {
            Some(o) => unit(&linalg::add(&f0, &o)),
            None => f0.clone(),
        };
        (f0, f)
    }

    /// `U b(c)`, or `None` when `b(c) = 0`.
    fn adapter_offset(&self, class: usize) -> Option<Vec<f64>> {
        let b = &self.truth.b[class];
        if b.iter().all(|&x| x == 0.0) {
            return None;
        }
        let mut o = vec![0.0; self.config.dim];
        for (col, &coef) in self.truth.adapter.iter().zip(b) {
            linalg::axpy(&mut o, coef, col);
        }
        Some(o)
    }
}

/// Draws a world from a validated config.
pub fn generate_world(config: &SyntheticModelConfig) -> Result<World> {
    config.validate()?;
    let d = config.dim;
    let n_base = config.n_base;
    let n = n_base + config.n_novel;
    let rho = config.pair_similarity;

    let mut rng = substream(config.seed, STREAM_PROTOTYPES);
    let raw_proto = |rng: &mut SimRng, shared: &[f64]| {
        let own = gaussian_unit(d, rng);
        let mut v = linalg::scale(shared, rho.sqrt());
        linalg::axpy(&mut v, (1.0 - rho).sqrt(), &own);
        v
    };

    let mut t0: Vec<Vec<f64>> = vec![Vec::new(); n];
    for cluster in clusters(0..n_base) {
        let shared = gaussian_unit(d, &mut rng);
        for c in cluster {
            t0[c] = unit(&raw_proto(&mut rng, &shared));
        }
    }
    let subspace = Subspace::span(&t0[..n_base], d);

    let mut arng = substream(config.seed, STREAM_ANCHORS);
    let w = subspace
        .random_outside(&mut arng)
        .expect("validated config leaves room outside the base subspace");
    let anchor = |cap: f64, rng: &mut SimRng| {
        let mut u = linalg::scale(&w, (1.0 - cap * cap).sqrt());
        if let Some(s) = subspace.random_inside(rng) {
            linalg::axpy(&mut u, cap, &s);
        }
        unit(&u)
    };
    let u_img = anchor(config.kappa_img, &mut arng);
    let u_txt_zs = anchor(config.kappa_txt, &mut arng);

    let pair_bias = config.planted_bias.resolve(config.n_novel.div_ceil(2), config.biased_pair_fraction);
    let mut planted = Vec::new();
    for (p, cluster) in clusters(n_base..n).into_iter().enumerate() {
        let shared = gaussian_unit(d, &mut rng);
        let bias = if cluster.len() == 2 { pair_bias[p] } else { 0.0 };
        let flip: bool = rng.random();
        let (fav, dis) = if flip {
            (cluster[0], *cluster.last().unwrap())
        } else {
            (*cluster.last().unwrap(), cluster[0])
        };
        for &c in &cluster {
            let mut v = raw_proto(&mut rng, &shared);
            if cluster.len() == 2 && bias != 0.0 {
                let sign = if c == fav { 0.5 } else { -0.5 };
                linalg::axpy(&mut v, sign * bias, &w);
            }
            t0[c] = unit(&v);
        }
        if cluster.len() == 2 {
            planted.push(PlantedPair {
                favored: fav,
                disfavored: dis,
                bias,
            });
        }
    }

    let mut urng = substream(config.seed, STREAM_ADAPTER);
    let r_s = subspace.rank().max(1) as f64;
    let adapter: Vec<Vec<f64>> = (0..config.rank)
        .map(|_| {
            let mut col = vec![0.0; d];
            for q in subspace.basis() {
                let g: f64 = urng.sample(StandardNormal);
                linalg::axpy(&mut col, g / r_s.sqrt(), q);
            }
            if config.subspace_leakage > 0.0 {
                if let Some(out) = subspace.random_outside(&mut urng) {
                    linalg::axpy(&mut col, config.subspace_leakage, &out);
                }
            }
            col
        })
        .collect();
    let adapter_norm = spectral_norm(&adapter, d);
    let coefficients = |scale: f64, rng: &mut SimRng| -> Vec<f64> {
        if scale == 0.0 {
            return vec![0.0; config.rank];
        }
        let s = scale / (config.rank as f64).sqrt();
        (0..config.rank)
            .map(|_| s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let b: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let scale = if c < n_base {
                config.deform_scale_base
            } else {
                config.deform_scale_novel
            };
            coefficients(scale, &mut urng)
        })
        .collect();
    let b_anchor = coefficients(config.deform_scale_base, &mut urng);

    let apply = |base: &[f64], coef: &[f64]| -> Vec<f64> {
        let mut v = base.to_vec();
        for (col, &c) in adapter.iter().zip(coef) {
            linalg::axpy(&mut v, c, col);
        }
        v
    };
    let t_raw: Vec<Vec<f64>> = (0..n).map(|c| apply(&t0[c], &b[c])).collect();
    let t: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            if b[c].iter().all(|&x| x == 0.0) {
                t0[c].clone()
            } else {
                unit(&t_raw[c])
            }
        })
        .collect();
    let u_txt_ft = if b_anchor.iter().all(|&x| x == 0.0) {
        u_txt_zs.clone()
    } else {
        unit(&apply(&u_txt_zs, &b_anchor))
    };

    let class_means: Vec<Vec<f64>> = t0
        .iter()
        .map(|tc| {
            let mut m = tc.clone();
            linalg::axpy(&mut m, config.domain_strength, &u_img);
            unit(&m)
        })
        .collect();
    let samplers = class_means
        .iter()
        .map(|m| VmfSampler::new(m, config.kappa))
        .collect::<Result<Vec<_>>>()?;

    let truth = GroundTruth {
        t0,
        t_raw,
        adapter,
        adapter_norm,
        b,
        subspace,
        u_img,
        u_txt_zs,
        u_txt_ft,
        class_means,
        planted,
    };
    let split = DatasetSplit::new(0..n_base, n_base..n, n)?;
    let class_names: Vec<String> = (0..n)
        .map(|c| {
            if c < n_base {
                format!("base_{c:03}")
            } else {
                format!("novel_{:03}", c - n_base)
            }
        })
        .collect();

    let mut world = World {
        config: config.clone(),
        bundle: placeholder_bundle(d),
        zs_bundle: placeholder_bundle(d),
        split,
        truth,
        samplers,
    };

    let spc = config.samples_per_class;
    let per_class: Vec<Vec<(Vec<f64>, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|c| {
            let mut rng = substream(config.seed, STREAM_FEATURES + c as u64);
            (0..spc).map(|_| world.sample_feature(c, &mut rng)).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, spc)).collect();
    let (f0_rows, f_rows): (Vec<Vec<f64>>, Vec<Vec<f64>>) = per_class.into_iter().flatten().unzip();
    let matrix = |name: &str, rows: &[Vec<f64>]| {
        if rows.is_empty() {
            Ok(EmbeddingMatrix::empty(d))
        } else {
            EmbeddingMatrix::from_rows(name, rows)
        }
    };
    let protos_zs = EmbeddingMatrix::from_rows("prototypes_zs", &world.truth.t0)?;
    let protos_ft = EmbeddingMatrix::from_rows("prototypes_ft", &t)?;
    let u_zs = UnitVector::new("u_txt_zs", world.truth.u_txt_zs.clone())?;
    let u_img_v = UnitVector::new("u_img", world.truth.u_img.clone())?;

    world.bundle = DomainBundle {
        domain_id: format!("synthetic-{}", config.seed),
        features: matrix("features", &f_rows)?,
        labels: Some(labels.clone()),
        prototypes_ft: protos_ft,
        prototypes_zs: protos_zs.clone(),
        anchors: NeutralAnchors {
            u_txt_zs: u_zs.clone(),
            u_txt_ft: Some(UnitVector::new("u_txt_ft", world.truth.u_txt_ft.clone())?),
            u_img: Some(u_img_v.clone()),
        },
        class_names: class_names.clone(),
    };
    world.zs_bundle = DomainBundle {
        domain_id: format!("synthetic-{}-zs", config.seed),
        features: matrix("features", &f0_rows)?,
        labels: Some(labels),
        prototypes_ft: protos_zs.clone(),
        prototypes_zs: protos_zs,
        anchors: NeutralAnchors {
            u_txt_zs: u_zs.clone(),
            u_txt_ft: Some(u_zs),
            u_img: Some(u_img_v),
        },
        class_names,
    };
    world.bundle.validate()?;
    world.zs_bundle.validate()?;
    Ok(world)
}

fn placeholder_bundle(d: usize) -> DomainBundle {
    let mut e = vec![0.0; d];
    e[0] = 1.0;
    DomainBundle {
        domain_id: String::new(),
        features: EmbeddingMatrix::empty(d),
        labels: None,
        prototypes_ft: EmbeddingMatrix::empty(d),
        prototypes_zs: EmbeddingMatrix::empty(d),
        anchors: NeutralAnchors {
            u_txt_zs: UnitVector::new("u", e).expect("unit axis"),
            u_txt_ft: None,
            u_img: None,
        },
        class_names: Vec::new(),
    }
}
