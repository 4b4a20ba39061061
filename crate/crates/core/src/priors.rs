//! Neutral prior logits and composite pair gaps.
//!
//! Plain priors correlate class prototypes with a neutral anchor:
//! text uses the fine-tuned prototypes against the zero-shot text anchor,
//! image uses the zero-shot prototypes against the mean-image anchor.
//! Residual priors subtract the same correlation taken against the current
//! model (text: current text anchor; image: fine-tuned prototypes), leaving
//! only the displacement induced by fine-tuning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ConfusionGraph;
use crate::store::{DomainBundle, EmbeddingMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorVariant {
    TextPlain,
    TextResidual,
    ImagePlain,
    ImageResidual,
}

impl PriorVariant {
    pub fn mode(self) -> GapMode {
        match self {
            PriorVariant::TextPlain | PriorVariant::ImagePlain => GapMode::Plain,
            PriorVariant::TextResidual | PriorVariant::ImageResidual => GapMode::Residual,
        }
    }

    fn is_text(self) -> bool {
        matches!(self, PriorVariant::TextPlain | PriorVariant::TextResidual)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapMode {
    #[default]
    Plain,
    Residual,
}

impl GapMode {
    /// Largest possible |gap| for this mode.
    pub fn gap_bound(self) -> f64 {
        match self {
            GapMode::Plain => 4.0,
            GapMode::Residual => 8.0,
        }
    }
}

impl std::str::FromStr for GapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(GapMode::Plain),
            "residual" => Ok(GapMode::Residual),
            other => Err(Error::invalid(format!(
                "unknown prior mode {other:?} (expected plain|residual)"
            ))),
        }
    }
}

/// Per-class prior logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTable {
    pub variant: PriorVariant,
    pub values: Vec<f64>,
}

impl PriorTable {
    pub fn n_classes(&self) -> usize {
        self.values.len()
    }
}

fn check_dim(m: &EmbeddingMatrix, v: &[f64], what: &str) -> Result<()> {
    if m.dim() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            actual: v.len(),
            context: what.into(),
        });
    }
    Ok(())
}

/// `⟨t(c), u_txt_zs⟩` for every class.
pub fn text_prior(prototypes_ft: &EmbeddingMatrix, u_txt_zs: &[f64]) -> Result<PriorTable> {
    check_dim(prototypes_ft, u_txt_zs, "text prior anchor")?;
    Ok(PriorTable {
        variant: PriorVariant::TextPlain,
        values: prototypes_ft.dot_rows(u_txt_zs)?,
    })
}

/// `⟨u_img, t⁰(c)⟩` for every class.
pub fn image_prior(prototypes_zs: &EmbeddingMatrix, u_img: &[f64]) -> Result<PriorTable> {
    check_dim(prototypes_zs, u_img, "image prior anchor")?;
    Ok(PriorTable {
        variant: PriorVariant::ImagePlain,
        values: prototypes_zs.dot_rows(u_img)?,
    })
}

/// `⟨t(c), u_txt_zs⟩ − ⟨t(c), u_txt_ft⟩`.
pub fn residual_text_prior(
    prototypes_ft: &EmbeddingMatrix,
    u_txt_zs: &[f64],
    u_txt_ft: Option<&[f64]>,
) -> Result<PriorTable> {
    let u_txt_ft = u_txt_ft.ok_or(Error::MissingAnchor(crate::store::U_TXT_FT))?;
    check_dim(prototypes_ft, u_txt_zs, "residual text prior zero-shot anchor")?;
    check_dim(prototypes_ft, u_txt_ft, "residual text prior current anchor")?;
    let values = prototypes_ft
        .iter_rows()
        .map(|t| {
            let zs: f64 = crate::linalg::dot(t, u_txt_zs);
            let ft: f64 = crate::linalg::dot(t, u_txt_ft);
            zs - ft
        })
        .collect();
    Ok(PriorTable {
        variant: PriorVariant::TextResidual,
        values,
    })
}

/// `⟨u_img, t⁰(c)⟩ − ⟨u_img, t(c)⟩`.
pub fn residual_image_prior(
    prototypes_zs: &EmbeddingMatrix,
    prototypes_ft: &EmbeddingMatrix,
    u_img: Option<&[f64]>,
) -> Result<PriorTable> {
    let u_img = u_img.ok_or(Error::MissingAnchor(crate::store::U_IMG))?;
    if prototypes_zs.rows() != prototypes_ft.rows() || prototypes_zs.dim() != prototypes_ft.dim()
    {
        return Err(Error::invalid(format!(
            "prototype shapes differ: zero-shot {}x{}, fine-tuned {}x{}",
            prototypes_zs.rows(),
            prototypes_zs.dim(),
            prototypes_ft.rows(),
            prototypes_ft.dim()
        )));
    }
    check_dim(prototypes_zs, u_img, "residual image prior anchor")?;
    let values = prototypes_zs
        .iter_rows()
        .zip(prototypes_ft.iter_rows())
        .map(|(t0, t)| crate::linalg::dot(u_img, t0) - crate::linalg::dot(u_img, t))
        .collect();
    Ok(PriorTable {
        variant: PriorVariant::ImageResidual,
        values,
    })
}

/// Composite gaps on graph edges, keyed by ordered pair.
///
/// Each unordered pair is computed once and stored with both signs, so
/// `gap(i, j) == -gap(j, i)` holds bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGapTable {
    pub mode: GapMode,
    gaps: BTreeMap<(usize, usize), f64>,
}

#[derive(Serialize, Deserialize)]
struct GapEntry {
    i: usize,
    j: usize,
    gap: f64,
}

#[derive(Serialize, Deserialize)]
struct GapTableRepr {
    mode: GapMode,
    gaps: Vec<GapEntry>,
}

impl Serialize for PairGapTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GapTableRepr {
            mode: self.mode,
            gaps: self
                .gaps
                .iter()
                .map(|(&(i, j), &gap)| GapEntry { i, j, gap })
                .collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PairGapTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = GapTableRepr::deserialize(d)?;
        let mut table = PairGapTable {
            mode: repr.mode,
            gaps: BTreeMap::new(),
        };
        for GapEntry { i, j, gap } in repr.gaps {
            if i < j {
                table.insert_pair(i, j, gap);
            } else if i > j && !table.gaps.contains_key(&(i, j)) {
                table.insert_pair(j, i, -gap);
            }
        }
        Ok(table)
    }
}

impl PairGapTable {
    pub fn new(mode: GapMode) -> Self {
        PairGapTable {
            mode,
            gaps: BTreeMap::new(),
        }
    }

    fn insert_pair(&mut self, i: usize, j: usize, gap: f64) {
        self.gaps.insert((i, j), gap);
        self.gaps.insert((j, i), -gap);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.gaps.get(&(i, j)).copied()
    }

    pub fn try_get(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j).ok_or(Error::MissingGap(i, j))
    }

    /// Ordered pairs with their gaps, in key order.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.gaps.iter().map(|(&k, &v)| (k, v))
    }

    /// Number of ordered pairs stored (twice the edge count).
    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }
}

/// `Σ(i,j) = (txt[i] − txt[j]) + (img[i] − img[j])` on every graph edge.
pub fn composite_gap(
    txt: &PriorTable,
    img: &PriorTable,
    graph: &ConfusionGraph,
) -> Result<PairGapTable> {
    if !txt.variant.is_text() || img.variant.is_text() {
        return Err(Error::invalid(format!(
            "composite gap needs a text and an image table, got {:?} and {:?}",
            txt.variant, img.variant
        )));
    }
    let mode = txt.variant.mode();
    if img.variant.mode() != mode {
        return Err(Error::invalid(format!(
            "mixed prior modes: {:?} with {:?}",
            txt.variant, img.variant
        )));
    }
    if txt.n_classes() != img.n_classes() || txt.n_classes() != graph.n_classes() {
        return Err(Error::invalid(format!(
            "class counts differ: text {}, image {}, graph {}",
            txt.n_classes(),
            img.n_classes(),
            graph.n_classes()
        )));
    }
    let mut table = PairGapTable::new(mode);
    for (i, j) in graph.edges() {
        let gap = (txt.values[i] - txt.values[j]) + (img.values[i] - img.values[j]);
        table.insert_pair(i, j, gap);
    }
    Ok(table)
}

/// Text and image tables plus their composite gaps for one bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSet {
    pub text: PriorTable,
    pub image: PriorTable,
    pub gaps: PairGapTable,
}

/// Computes both prior tables in `mode` and the composite gaps over `graph`.
pub fn priors_for_bundle(
    bundle: &DomainBundle,
    graph: &ConfusionGraph,
    mode: GapMode,
) -> Result<PriorSet> {
    let anchors = &bundle.anchors;
    let (text, image) = match mode {
        GapMode::Plain => (
            text_prior(&bundle.prototypes_ft, &anchors.u_txt_zs)?,
            image_prior(&bundle.prototypes_zs, anchors.img()?)?,
        ),
        GapMode::Residual => (
            residual_text_prior(
                &bundle.prototypes_ft,
                &anchors.u_txt_zs,
                anchors.u_txt_ft.as_deref(),
            )?,
            residual_image_prior(
                &bundle.prototypes_zs,
                &bundle.prototypes_ft,
                anchors.u_img.as_deref(),
            )?,
        ),
    };
    let gaps = composite_gap(&text, &image, graph)?;
    Ok(PriorSet { text, image, gaps })
}
