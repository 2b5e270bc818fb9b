//! Fact similarity graph and label-propagation clustering.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::embedding::{similarity, SimilarityError};
use crate::model::{FactId, FactUnit};

pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_LPA_MAX_ITERS: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("facts {a} and {b} have embeddings of different dimension")]
    DimensionMismatch { a: FactId, b: FactId },
    #[error("duplicate fact id {0}")]
    DuplicateId(FactId),
    #[error("threshold {0} outside [0, 1)")]
    Threshold(f64),
}

/// Undirected graph over fact ids. Symmetric, no self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct FactGraph {
    pub node_ids: Vec<FactId>,
    pub adjacency: BTreeMap<FactId, BTreeSet<FactId>>,
    pub tau: f64,
}

impl FactGraph {
    /// Graph with the given nodes and undirected edges.
    pub fn from_edges(nodes: impl IntoIterator<Item = FactId>, edges: impl IntoIterator<Item = (FactId, FactId)>) -> Self {
        let mut adjacency: BTreeMap<FactId, BTreeSet<FactId>> = nodes.into_iter().map(|n| (n, BTreeSet::new())).collect();
        for (a, b) in edges {
            if a == b {
                continue;
            }
            adjacency.entry(a).or_default().insert(b);
            adjacency.entry(b).or_default().insert(a);
        }
        Self {
            node_ids: adjacency.keys().copied().collect(),
            adjacency,
            tau: 0.0,
        }
    }

    pub fn neighbors(&self, id: FactId) -> impl Iterator<Item = FactId> + '_ {
        self.adjacency.get(&id).into_iter().flatten().copied()
    }

    /// Unordered edges as `(smaller, larger)` pairs.
    pub fn edges(&self) -> BTreeSet<(FactId, FactId)> {
        self.adjacency
            .iter()
            .flat_map(|(&a, ns)| ns.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeSet::len).sum::<usize>() / 2
    }
}

/// Links every pair of facts whose embedding cosine similarity exceeds `tau`.
pub fn build_graph(facts: &[FactUnit], tau: f64) -> Result<FactGraph, GraphError> {
    if !(0.0..1.0).contains(&tau) {
        return Err(GraphError::Threshold(tau));
    }
    let mut seen = BTreeSet::new();
    for f in facts {
        if !seen.insert(f.id) {
            return Err(GraphError::DuplicateId(f.id));
        }
    }
    let pairs: Vec<(FactId, FactId)> = (0..facts.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            for j in i + 1..facts.len() {
                let (a, b) = (&facts[i], &facts[j]);
                match similarity(&a.embedding, &b.embedding) {
                    Ok(s) if s > tau => row.push((a.id, b.id)),
                    Ok(_) => {}
                    Err(SimilarityError::LengthMismatch(..)) | Err(SimilarityError::ZeroNorm) => {
                        return Err(GraphError::DimensionMismatch { a: a.id, b: b.id })
                    }
                }
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let mut g = FactGraph::from_edges(facts.iter().map(|f| f.id), pairs);
    g.tau = tau;
    Ok(g)
}

/// Builds the graph and writes each fact's neighbor set back into its `edges`.
pub fn build_edges(facts: &mut [FactUnit], tau: f64) -> Result<FactGraph, GraphError> {
    let graph = build_graph(facts, tau)?;
    for f in facts.iter_mut() {
        f.edges = graph.adjacency.get(&f.id).cloned().unwrap_or_default();
    }
    Ok(graph)
}

/// Partition of the graph's nodes. Labels are dense, ordered by smallest member id.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignment: BTreeMap<FactId, usize>,
    pub clusters: Vec<BTreeSet<FactId>>,
}

impl Clustering {
    pub fn from_labels(labels: &BTreeMap<FactId, FactId>) -> Self {
        let mut groups: BTreeMap<FactId, BTreeSet<FactId>> = BTreeMap::new();
        for (&node, &label) in labels {
            groups.entry(label).or_default().insert(node);
        }
        let mut clusters: Vec<BTreeSet<FactId>> = groups.into_values().collect();
        clusters.sort_by_key(|c| *c.first().expect("groups are non-empty"));
        let assignment = clusters
            .iter()
            .enumerate()
            .flat_map(|(j, c)| c.iter().map(move |&n| (n, j)))
            .collect();
        Self { assignment, clusters }
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Asynchronous label propagation.
///
/// Each node starts with its own id as label. Every iteration visits nodes in
/// a seeded shuffled order; a node with neighbors takes the most frequent
/// neighbor label, smallest label on ties. Stops when a full sweep changes
/// nothing or after `max_iters` sweeps.
pub fn lpa_cluster(graph: &FactGraph, max_iters: usize, seed: u64) -> Clustering {
    let mut labels: BTreeMap<FactId, FactId> = graph.node_ids.iter().map(|&n| (n, n)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = graph.node_ids.clone();
    let mut counts: BTreeMap<FactId, usize> = BTreeMap::new();

    for _ in 0..max_iters {
        order.shuffle(&mut rng);
        let mut changed = false;
        for &node in &order {
            counts.clear();
            for nb in graph.neighbors(node) {
                *counts.entry(labels[&nb]).or_default() += 1;
            }
            // BTreeMap iterates labels ascending, so the first maximum is the smallest label
            let best = counts
                .iter()
                .fold(None, |best: Option<(FactId, usize)>, (&l, &c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((l, c)),
                });
            if let Some((label, _)) = best {
                if labels[&node] != label {
                    labels.insert(node, label);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Clustering::from_labels(&labels)
}
