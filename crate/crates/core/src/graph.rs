//! Symmetric confusable-neighbor graph over classes.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::store::EmbeddingMatrix;

/// Undirected, irreflexive graph; `adjacency[i]` is sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionGraph {
    n_classes: usize,
    adjacency: Vec<Vec<usize>>,
}

/// One endpoint in an edge-list file: an index or a class name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassRef {
    Index(usize),
    Name(String),
}

impl ConfusionGraph {
    /// Symmetrized union of directed edges; self-edges are dropped.
    pub fn from_edges(
        n_classes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); n_classes];
        for (i, j) in edges {
            for idx in [i, j] {
                if idx >= n_classes {
                    return Err(Error::ClassOutOfRange {
                        index: idx,
                        n_classes,
                    });
                }
            }
            if i != j {
                sets[i].insert(j);
                sets[j].insert(i);
            }
        }
        Ok(ConfusionGraph {
            n_classes,
            adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn neighbors(&self, class: usize) -> &[usize] {
        &self.adjacency[class]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.n_classes && self.adjacency[i].binary_search(&j).is_ok()
    }

    /// Each undirected edge once, as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    pub fn n_edges(&self) -> usize {
        self.edges().count()
    }

    pub fn max_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Keeps only edges with both endpoints in `classes`.
    pub fn restrict(&self, classes: &BTreeSet<usize>) -> Self {
        let adjacency = self
            .adjacency
            .iter()
            .enumerate()
            .map(|(i, ns)| {
                if classes.contains(&i) {
                    ns.iter().copied().filter(|j| classes.contains(j)).collect()
                } else {
                    Vec::new()
                }
            })
            .collect();
        ConfusionGraph {
            n_classes: self.n_classes,
            adjacency,
        }
    }

    /// Serializable edge list (`i < j`, each edge once).
    pub fn to_edge_list(&self) -> Vec<[usize; 2]> {
        self.edges().map(|(i, j)| [i, j]).collect()
    }
}

/// Resolves an edge list of indices and/or class names.
pub fn graph_from_refs(
    refs: &[[ClassRef; 2]],
    n_classes: usize,
    class_names: Option<&[String]>,
) -> Result<ConfusionGraph> {
    let resolve = |r: &ClassRef| -> Result<usize> {
        match r {
            ClassRef::Index(i) => Ok(*i),
            ClassRef::Name(name) => class_names
                .and_then(|names| names.iter().position(|c| c == name))
                .ok_or_else(|| Error::UnknownClass(name.clone())),
        }
    };
    let edges = refs
        .iter()
        .map(|[a, b]| Ok((resolve(a)?, resolve(b)?)))
        .collect::<Result<Vec<_>>>()?;
    ConfusionGraph::from_edges(n_classes, edges)
}

/// Edge list as written by this crate: versioned, indices only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeListFile {
    pub schema_version: u32,
    pub edges: Vec<[usize; 2]>,
}

impl EdgeListFile {
    pub fn new(graph: &ConfusionGraph) -> Self {
        EdgeListFile {
            schema_version: crate::SCHEMA_VERSION,
            edges: graph.to_edge_list(),
        }
    }
}

/// Accepted edge-list layouts: a bare array, or an object with an `edges` array.
#[derive(Deserialize)]
#[serde(untagged)]
enum EdgeListInput {
    Bare(Vec<[ClassRef; 2]>),
    Wrapped { edges: Vec<[ClassRef; 2]> },
}

/// Reads a JSON edge-list file: an array of `[i, j]` pairs of indices or
/// names, optionally wrapped as `{"schema_version": .., "edges": [..]}`.
pub fn load_edge_list(
    path: &Path,
    n_classes: usize,
    class_names: Option<&[String]>,
) -> Result<ConfusionGraph> {
    let refs = match crate::store::read_json::<EdgeListInput>(path)? {
        EdgeListInput::Bare(r) | EdgeListInput::Wrapped { edges: r } => r,
    };
    graph_from_refs(&refs, n_classes, class_names)
}

/// Connects every class to its `k` most cosine-similar zero-shot prototypes,
/// then symmetrizes by union. Similarity ties go to the lower class index.
pub fn build_knn_graph(prototypes_zs: &EmbeddingMatrix, k: usize) -> Result<ConfusionGraph> {
    let n = prototypes_zs.rows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "k must satisfy 1 <= k < n_classes (k = {k}, n_classes = {n})"
        )));
    }
    let directed: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = prototypes_zs.row(i);
            let mut sims: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (linalg::dot(row, prototypes_zs.row(j)), j))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            sims.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();
    ConfusionGraph::from_edges(
        n,
        directed
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().map(move |&j| (i, j))),
    )
}
