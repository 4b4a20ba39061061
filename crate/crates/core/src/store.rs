//! Embedding data model and the on-disk bundle container.
//!
//! A bundle lives in a directory holding a `bundle.json` manifest plus one raw
//! file per matrix, anchor and (optionally) label vector:
//!
//! ```text
//! {
//!   "domain_id": "eurosat",
//!   "dim": 512,
//!   "class_names": ["forest", "river", ...],
//!   "matrices": {
//!     "features":      {"rows": 800, "file": "features.f32"},
//!     "prototypes_ft": {"rows": 10,  "file": "prototypes_ft.f32"},
//!     "prototypes_zs": {"rows": 10,  "file": "prototypes_zs.f32"}
//!   },
//!   "anchors": {"u_txt_zs": "u_txt_zs.f32", "u_txt_ft": null, "u_img": "u_img.f32"},
//!   "labels": "labels.u32"
//! }
//! ```
//!
//! Matrix and anchor files are little-endian `f32`, row-major, exactly
//! `rows * dim * 4` bytes. Label files are little-endian `u32`, one per sample.
//! Values are widened to `f64` on load and every row is re-normalized.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Rows closer than this to unit norm are re-normalized silently.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;
/// Rows with a norm below this are rejected outright.
pub const DEGENERATE_NORM: f64 = 1e-8;

pub const MANIFEST_FILE: &str = "bundle.json";

pub const FEATURES: &str = "features";
pub const PROTOTYPES_FT: &str = "prototypes_ft";
pub const PROTOTYPES_ZS: &str = "prototypes_zs";
pub const U_TXT_ZS: &str = "u_txt_zs";
pub const U_TXT_FT: &str = "u_txt_ft";
pub const U_IMG: &str = "u_img";

/// Dense row-major matrix of unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from raw row-major values and re-normalizes every row.
    pub fn from_flat(name: &str, rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::DimensionMismatch {
                expected: rows * dim,
                actual: data.len(),
                context: format!("{name} element count"),
            });
        }
        let mut m = EmbeddingMatrix { rows, dim, data };
        m.normalize_rows(name)?;
        Ok(m)
    }

    pub fn from_rows(name: &str, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some((idx, bad)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: bad.len(),
                context: format!("{name} row {idx}"),
            });
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_flat(name, rows.len(), dim, data)
    }

    /// An empty matrix with a fixed dimension (a bundle with no samples).
    pub fn empty(dim: usize) -> Self {
        EmbeddingMatrix {
            rows: 0,
            dim,
            data: Vec::new(),
        }
    }

    fn normalize_rows(&mut self, name: &str) -> Result<()> {
        if self.dim == 0 {
            return Ok(());
        }
        for (row, chunk) in self.data.chunks_exact_mut(self.dim).enumerate() {
            let norm = linalg::norm(chunk);
            if !norm.is_finite() || norm < DEGENERATE_NORM {
                return Err(Error::DegenerateRow {
                    matrix: name.to_string(),
                    row,
                    norm,
                });
            }
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                log::warn!("{name} row {row} has norm {norm:.6}; re-normalizing");
            }
            chunk.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, and a zero-dim matrix has no rows to yield anyway.
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `self · v` for every row.
    pub fn dot_rows(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: v.len(),
                context: "matrix-vector product".into(),
            });
        }
        Ok(self.iter_rows().map(|r| linalg::dot(r, v)).collect())
    }
}

/// A single unit vector (neutral anchor).
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn new(name: &str, values: Vec<f64>) -> Result<Self> {
        let m = EmbeddingMatrix::from_flat(name, 1, values.len(), values)?;
        Ok(UnitVector(m.data))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

impl std::ops::Deref for UnitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Class-agnostic probe directions for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct NeutralAnchors {
    /// Zero-shot text encoder's embedding of the neutral prompt.
    pub u_txt_zs: UnitVector,
    /// Current (fine-tuned) text encoder's embedding of the neutral prompt.
    pub u_txt_ft: Option<UnitVector>,
    /// Image embedding of the mean preprocessed training image.
    pub u_img: Option<UnitVector>,
}

impl NeutralAnchors {
    pub fn txt_ft(&self) -> Result<&UnitVector> {
        self.u_txt_ft.as_ref().ok_or(Error::MissingAnchor(U_TXT_FT))
    }

    pub fn img(&self) -> Result<&UnitVector> {
        self.u_img.as_ref().ok_or(Error::MissingAnchor(U_IMG))
    }
}

/// All embeddings for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBundle {
    pub domain_id: String,
    /// Image features, one row per sample.
    pub features: EmbeddingMatrix,
    pub labels: Option<Vec<usize>>,
    /// Class prototypes from the current (fine-tuned) model.
    pub prototypes_ft: EmbeddingMatrix,
    /// Class prototypes from the zero-shot model.
    pub prototypes_zs: EmbeddingMatrix,
    pub anchors: NeutralAnchors,
    pub class_names: Vec<String>,
}

impl DomainBundle {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_samples(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes_zs.dim()
    }

    /// Checks every structural invariant of the bundle.
    pub fn validate(&self) -> Result<()> {
        let n_classes = self.class_names.len();
        for (name, m) in [
            (PROTOTYPES_FT, &self.prototypes_ft),
            (PROTOTYPES_ZS, &self.prototypes_zs),
        ] {
            if m.rows() != n_classes {
                return Err(Error::Bundle(format!(
                    "{name} has {} rows but there are {n_classes} class names",
                    m.rows()
                )));
            }
        }
        let dim = self.prototypes_zs.dim();
        let mut dims = vec![
            (FEATURES, self.features.dim()),
            (PROTOTYPES_FT, self.prototypes_ft.dim()),
            (U_TXT_ZS, self.anchors.u_txt_zs.dim()),
        ];
        if let Some(u) = &self.anchors.u_txt_ft {
            dims.push((U_TXT_FT, u.dim()));
        }
        if let Some(u) = &self.anchors.u_img {
            dims.push((U_IMG, u.dim()));
        }
        for (name, d) in dims {
            if d != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: d,
                    context: name.into(),
                });
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.features.rows() {
                return Err(Error::Bundle(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    self.features.rows()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
                return Err(Error::ClassOutOfRange {
                    index: bad,
                    n_classes,
                });
            }
        }
        Ok(())
    }

    /// Index of a class by name.
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }
}

/// Base / novel partition of the label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub base_classes: BTreeSet<usize>,
    pub novel_classes: BTreeSet<usize>,
}

impl DatasetSplit {
    pub fn new(
        base_classes: impl IntoIterator<Item = usize>,
        novel_classes: impl IntoIterator<Item = usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let split = DatasetSplit {
            base_classes: base_classes.into_iter().collect(),
            novel_classes: novel_classes.into_iter().collect(),
        };
        split.validate(n_classes)?;
        Ok(split)
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if let Some(c) = self.base_classes.intersection(&self.novel_classes).next() {
            return Err(Error::invalid(format!(
                "class {c} is both base and novel"
            )));
        }
        if let Some(&c) = self
            .base_classes
            .iter()
            .chain(&self.novel_classes)
            .find(|&&c| c >= n_classes)
        {
            return Err(Error::ClassOutOfRange {
                index: c,
                n_classes,
            });
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// A subset of a bundle's samples, classified over a subset of its classes.
///
/// Views borrow the bundle; nothing is copied.
#[derive(Debug, Clone)]
pub struct BundleView<'a> {
    pub bundle: &'a DomainBundle,
    /// Sample indices into `bundle.features`, ascending.
    pub samples: Vec<usize>,
    /// Classes competing for the top-1 prediction, ascending.
    pub classes: Vec<usize>,
}

impl<'a> BundleView<'a> {
    pub fn full(bundle: &'a DomainBundle) -> Self {
        BundleView {
            bundle,
            samples: (0..bundle.n_samples()).collect(),
            classes: (0..bundle.n_classes()).collect(),
        }
    }

    /// Samples labeled in `classes`, classified over `classes` only.
    pub fn restricted(bundle: &'a DomainBundle, classes: &BTreeSet<usize>) -> Result<Self> {
        let labels = bundle
            .labels
            .as_ref()
            .ok_or_else(|| Error::InsufficientData("bundle has no labels".into()))?;
        let samples = labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect();
        Ok(BundleView {
            bundle,
            samples,
            classes: classes.iter().copied().collect(),
        })
    }

    pub fn class_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.bundle.n_classes()];
        for &c in &self.classes {
            mask[c] = true;
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MatrixEntry {
    rows: usize,
    file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    domain_id: String,
    dim: usize,
    class_names: Vec<String>,
    matrices: BTreeMap<String, MatrixEntry>,
    anchors: BTreeMap<String, Option<String>>,
    labels: Option<String>,
}

/// Resolves a bundle path to its manifest: a directory means `<dir>/bundle.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn read_f32_file(path: &Path, expected_values: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_values * 4 {
        return Err(Error::Bundle(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected_values * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

fn read_u32_file(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Bundle(format!(
            "{} length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect()
}

/// Loads and validates a bundle. `path` is the manifest or its directory.
pub fn load_bundle(path: &Path) -> Result<DomainBundle> {
    let manifest_file = manifest_path(path);
    let manifest: Manifest = read_json(&manifest_file)?;
    let root = manifest_file.parent().unwrap_or(Path::new("."));
    let dim = manifest.dim;

    let load_matrix = |name: &str| -> Result<EmbeddingMatrix> {
        let entry = manifest
            .matrices
            .get(name)
            .ok_or_else(|| Error::Bundle(format!("manifest lacks matrix {name}")))?;
        let data = read_f32_file(&root.join(&entry.file), entry.rows * dim)?;
        if entry.rows == 0 {
            return Ok(EmbeddingMatrix::empty(dim));
        }
        EmbeddingMatrix::from_flat(name, entry.rows, dim, data)
    };
    let load_anchor = |name: &'static str| -> Result<Option<UnitVector>> {
        match manifest.anchors.get(name) {
            Some(Some(file)) => {
                let data = read_f32_file(&root.join(file), dim)?;
                UnitVector::new(name, data).map(Some)
            }
            _ => Ok(None),
        }
    };

    let features = load_matrix(FEATURES)?;
    let prototypes_ft = load_matrix(PROTOTYPES_FT)?;
    let prototypes_zs = load_matrix(PROTOTYPES_ZS)?;
    let anchors = NeutralAnchors {
        u_txt_zs: load_anchor(U_TXT_ZS)?.ok_or(Error::MissingAnchor(U_TXT_ZS))?,
        u_txt_ft: load_anchor(U_TXT_FT)?,
        u_img: load_anchor(U_IMG)?,
    };
    let labels = match &manifest.labels {
        Some(file) => Some(read_u32_file(&root.join(file))?),
        None => None,
    };

    let bundle = DomainBundle {
        domain_id: manifest.domain_id,
        features,
        labels,
        prototypes_ft,
        prototypes_zs,
        anchors,
        class_names: manifest.class_names,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes `bundle` into directory `dir` (created if needed).
pub fn save_bundle(bundle: &DomainBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut matrices = BTreeMap::new();
    for (name, m) in [
        (FEATURES, &bundle.features),
        (PROTOTYPES_FT, &bundle.prototypes_ft),
        (PROTOTYPES_ZS, &bundle.prototypes_zs),
    ] {
        let file = format!("{name}.f32");
        write_file(&dir.join(&file), &f32_bytes(m.as_slice()))?;
        matrices.insert(
            name.to_string(),
            MatrixEntry {
                rows: m.rows(),
                file,
            },
        );
    }

    let mut anchors = BTreeMap::new();
    for (name, anchor) in [
        (U_TXT_ZS, Some(&bundle.anchors.u_txt_zs)),
        (U_TXT_FT, bundle.anchors.u_txt_ft.as_ref()),
        (U_IMG, bundle.anchors.u_img.as_ref()),
    ] {
        let entry = match anchor {
            Some(u) => {
                let file = format!("{name}.f32");
                write_file(&dir.join(&file), &f32_bytes(u))?;
                Some(file)
            }
            None => None,
        };
        anchors.insert(name.to_string(), entry);
    }

    let labels = match &bundle.labels {
        Some(labels) => {
            let file = "labels.u32".to_string();
            let bytes: Vec<u8> = labels
                .iter()
                .flat_map(|&l| (l as u32).to_le_bytes())
                .collect();
            write_file(&dir.join(&file), &bytes)?;
            Some(file)
        }
        None => None,
    };

    let manifest = Manifest {
        domain_id: bundle.domain_id.clone(),
        dim: bundle.dim(),
        class_names: bundle.class_names.clone(),
        matrices,
        anchors,
        labels,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), &json)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tiny_bundle() -> DomainBundle {
        let eye = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        DomainBundle {
            domain_id: "tiny".into(),
            features: EmbeddingMatrix::from_rows("features", &[eye(0), eye(1), eye(2)]).unwrap(),
            labels: Some(vec![0, 1, 0]),
            prototypes_ft: EmbeddingMatrix::from_rows(PROTOTYPES_FT, &[eye(0), eye(1)]).unwrap(),
            prototypes_zs: EmbeddingMatrix::from_rows(PROTOTYPES_ZS, &[eye(0), eye(1)]).unwrap(),
            anchors: NeutralAnchors {
                u_txt_zs: UnitVector::new(U_TXT_ZS, eye(3)).unwrap(),
                u_txt_ft: None,
                u_img: Some(UnitVector::new(U_IMG, eye(2)).unwrap()),
            },
            class_names: vec!["a".into(), "b".into()],
        }
    }

    #[test]
    fn round_trip_small_bundle() {
        let dir = tempfile::tempdir().unwrap();
        let b = tiny_bundle();
        save_bundle(&b, dir.path()).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.features.rows(), 3);
        assert_eq!(loaded.prototypes_ft.rows(), 2);
        assert_eq!(loaded, b);
    }

    #[test]
    fn rows_are_renormalized() {
        let m = EmbeddingMatrix::from_rows("p", &[vec![2.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(m.row(0), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_row_is_degenerate() {
        let err = EmbeddingMatrix::from_rows("p", &[vec![0.0; 4]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 0, .. }));
        assert!(err.to_string().contains("degenerate row"));
    }

    #[test]
    fn labels_absent_are_marked_null() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = tiny_bundle();
        b.labels = None;
        save_bundle(&b, dir.path()).unwrap();
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert!(manifest["labels"].is_null());
        assert!(manifest["anchors"]["u_txt_ft"].is_null());
        assert_eq!(load_bundle(dir.path()).unwrap().labels, None);
    }

    #[test]
    fn payload_size_is_rows_times_dim_times_four() {
        let dim = 512;
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|r| (0..dim).map(|c| ((r * 7 + c) % 13) as f64 + 1.0).collect())
            .collect();
        let mut b = tiny_bundle();
        let m = EmbeddingMatrix::from_rows(FEATURES, &rows).unwrap();
        b.features = m.clone();
        b.labels = None;
        b.prototypes_ft = m.clone();
        b.prototypes_zs = m;
        b.class_names = (0..100).map(|i| format!("c{i}")).collect();
        let u = UnitVector::new(U_TXT_ZS, vec![1.0; dim]).unwrap();
        b.anchors = NeutralAnchors {
            u_txt_zs: u.clone(),
            u_txt_ft: Some(u.clone()),
            u_img: Some(u),
        };
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        for name in [FEATURES, PROTOTYPES_FT, PROTOTYPES_ZS] {
            let len = fs::metadata(dir.path().join(format!("{name}.f32"))).unwrap().len();
            assert_eq!(len, 512 * 100 * 4);
        }
        assert_eq!(
            fs::metadata(dir.path().join("u_img.f32")).unwrap().len(),
            512 * 4
        );
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_bundle(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));

        // label out of range
        let mut b = tiny_bundle();
        save_bundle(&b, dir.path()).unwrap();
        fs::write(
            dir.path().join("labels.u32"),
            [0u32, 1, 5].iter().flat_map(|l| l.to_le_bytes()).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::ClassOutOfRange { index: 5, .. })
        ));

        // matrix file whose size disagrees with the manifest
        b.labels = None;
        save_bundle(&b, dir.path()).unwrap();
        fs::write(dir.path().join("prototypes_zs.f32"), [0u8; 12]).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Bundle(_))));

        // degenerate prototype row
        save_bundle(&b, dir.path()).unwrap();
        fs::write(dir.path().join("prototypes_ft.f32"), [0u8; 32]).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::DegenerateRow { .. })
        ));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut b = tiny_bundle();
        b.anchors.u_img = Some(UnitVector::new(U_IMG, vec![1.0, 0.0]).unwrap());
        assert!(matches!(
            b.validate(),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn split_rejects_overlap() {
        assert!(DatasetSplit::new([0, 1], [1, 2], 3).is_err());
        assert!(DatasetSplit::new([0], [4], 3).is_err());
        assert!(DatasetSplit::new([0, 1], [2], 3).is_ok());
    }
}
