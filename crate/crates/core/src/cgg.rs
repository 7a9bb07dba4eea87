//! Causal graph generation: time-causality matrices from the first residual
//! block, local/global 2x2 causal summaries per pair, directed edges and
//! text exports.

use std::collections::BTreeSet;

use icst_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataio::CausalEdge;
use crate::roadnet::{PairOrder, RoadPair};
use crate::stcl::Stcl;

/// Per-timestep causal strength of one pair's history.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeCausalityMatrix {
    pub pair: RoadPair,
    /// History offset of each row, ascending time.
    pub offsets: Vec<i64>,
    /// `P x d` copy of `B1`.
    pub weights: Tensor,
    /// L1 norm of each row.
    pub row_scores: Vec<f64>,
}

impl TimeCausalityMatrix {
    pub fn new(pair: RoadPair, offsets: &[i64], weights: Tensor) -> Self {
        let d = weights.shape()[1];
        let row_scores: Vec<f64> = weights
            .data()
            .chunks(d)
            .map(|r| r.iter().map(|v| v.abs()).sum())
            .collect();
        if row_scores.iter().all(|s| *s == 0.0) {
            log::warn!("pair ({}, {}) has an all-zero time causality matrix", pair.m, pair.n);
        }
        Self {
            pair,
            offsets: offsets.to_vec(),
            weights,
            row_scores,
        }
    }

    /// Offsets ordered by descending row score (ties by recency).
    pub fn ranked_offsets(&self) -> Vec<i64> {
        let mut idx: Vec<usize> = (0..self.offsets.len()).collect();
        idx.sort_by(|&a, &b| {
            self.row_scores[b]
                .total_cmp(&self.row_scores[a])
                .then(self.offsets[b].cmp(&self.offsets[a]))
        });
        idx.into_iter().map(|i| self.offsets[i]).collect()
    }
}

/// Time-causality matrix of pair `index` of a trained branch. `offsets` are
/// the history offsets in ascending time order.
pub fn extract_time_causality(stcl: &Stcl, store: &ParamStore, index: usize, offsets: &[i64]) -> TimeCausalityMatrix {
    TimeCausalityMatrix::new(stcl.pairs[index], offsets, stcl.first_block(store, index))
}

/// `A^q` of one pair at one block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalCausalGraph {
    pub pair: RoadPair,
    pub block: usize,
    pub a: [[f64; 2]; 2],
}

/// Directed edge with nonnegative strength.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectedEdge {
    pub src: usize,
    pub dst: usize,
    pub strength: f64,
}

/// Relevance-weighted pair summary `A_mn = sum_q gamma_q A^q`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMatrix {
    pub pair: RoadPair,
    pub a: [[f64; 2]; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalCausalGraph {
    pub pairs: Vec<PairMatrix>,
    pub margin: f64,
    pub edges: Vec<DirectedEdge>,
}

/// Weighted sum of local graphs for each pair; `locals[i]` lists `A^q` of
/// `pairs[i]` for `q = 1..Q_R`.
pub fn build_global_graph(pairs: &[RoadPair], locals: &[Vec<[[f64; 2]; 2]>], gammas: &[f64]) -> Vec<PairMatrix> {
    pairs
        .iter()
        .zip(locals)
        .map(|(&pair, blocks)| {
            let mut a = [[0.0; 2]; 2];
            for (aq, &g) in blocks.iter().zip(gammas) {
                for i in 0..2 {
                    for j in 0..2 {
                        a[i][j] += g * aq[i][j];
                    }
                }
            }
            PairMatrix { pair, a }
        })
        .collect()
}

/// For each pair compare `|a12|` (m to n) with `|a21|` (n to m) and keep the
/// stronger direction with strength `||a12| - |a21||` when that strength,
/// divided by the largest strength in the graph, exceeds `margin`. Equal
/// magnitudes never produce an edge.
pub fn decide_edges(pairs: &[PairMatrix], margin: f64) -> Vec<DirectedEdge> {
    let raw: Vec<(usize, usize, f64)> = pairs
        .iter()
        .filter_map(|p| {
            let (f, b) = (p.a[0][1].abs(), p.a[1][0].abs());
            if f > b {
                Some((p.pair.m, p.pair.n, f - b))
            } else if b > f {
                Some((p.pair.n, p.pair.m, b - f))
            } else {
                None
            }
        })
        .collect();
    let max = raw.iter().map(|e| e.2).fold(0.0, f64::max);
    raw.into_iter()
        .filter(|e| max > 0.0 && e.2 / max > margin)
        .map(|(src, dst, strength)| DirectedEdge { src, dst, strength })
        .collect()
}

/// Global graph of a trained branch.
pub fn global_graph(stcl: &Stcl, store: &ParamStore, margin: f64) -> GlobalCausalGraph {
    let locals: Vec<_> = (0..stcl.pairs.len()).map(|i| stcl.causal_matrices(store, i)).collect();
    let pairs = build_global_graph(&stcl.pairs, &locals, &stcl.gammas);
    let edges = decide_edges(&pairs, margin);
    GlobalCausalGraph { pairs, margin, edges }
}

/// Every `A^q` of every pair.
pub fn local_graphs(stcl: &Stcl, store: &ParamStore) -> Vec<LocalCausalGraph> {
    let mut out = Vec::new();
    for (i, &pair) in stcl.pairs.iter().enumerate() {
        for (q, a) in stcl.causal_matrices(store, i).into_iter().enumerate() {
            out.push(LocalCausalGraph { pair, block: q + 1, a });
        }
    }
    out
}

/// `digraph causal { m -> n [label="0.432"]; }` with every road as a node.
pub fn export_dot(graph: &GlobalCausalGraph, roads: usize) -> String {
    let mut s = String::from("digraph causal {\n");
    for r in 0..roads {
        s.push_str(&format!("  {r};\n"));
    }
    for e in &graph.edges {
        let label = if e.strength >= 1e-3 {
            format!("{:.3}", e.strength)
        } else {
            format!("{:.3e}", e.strength)
        };
        s.push_str(&format!("  {} -> {} [label=\"{label}\"];\n", e.src, e.dst));
    }
    s.push_str("}\n");
    s
}

#[derive(Serialize)]
struct JsonPair<'a> {
    m: usize,
    n: usize,
    order: PairOrder,
    #[serde(rename = "A")]
    a: [[f64; 2]; 2],
    edges: Vec<&'a DirectedEdge>,
}

#[derive(Serialize)]
struct JsonGraph<'a> {
    pairs: Vec<JsonPair<'a>>,
    margin: f64,
    row_score: &'static str,
}

pub fn export_json(graph: &GlobalCausalGraph) -> String {
    let pairs = graph
        .pairs
        .iter()
        .map(|p| {
            let (m, n) = (p.pair.m, p.pair.n);
            JsonPair {
                m,
                n,
                order: p.pair.order,
                a: p.a,
                edges: graph
                    .edges
                    .iter()
                    .filter(|e| (e.src == m && e.dst == n) || (e.src == n && e.dst == m))
                    .collect(),
            }
        })
        .collect();
    serde_json::to_string_pretty(&JsonGraph {
        pairs,
        margin: graph.margin,
        row_score: "l1 norm of each B1 row",
    })
    .expect("graph serializes")
}

/// Header `offset,w_0..w_{d-1},row_score`, one row per history offset.
pub fn export_heatmap_csv(tcm: &TimeCausalityMatrix) -> String {
    let d = tcm.weights.shape()[1];
    let mut s = String::from("offset");
    for k in 0..d {
        s.push_str(&format!(",w_{k}"));
    }
    s.push_str(",row_score\n");
    for (r, &off) in tcm.offsets.iter().enumerate() {
        s.push_str(&off.to_string());
        for v in &tcm.weights.data()[r * d..(r + 1) * d] {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{}\n", tcm.row_scores[r]));
    }
    s
}

/// Precision, recall and F1 of predicted directed edges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn score_edges(predicted: &[DirectedEdge], truth: &[CausalEdge]) -> EdgeScore {
    let p: BTreeSet<(usize, usize)> = predicted.iter().map(|e| (e.src, e.dst)).collect();
    let t: BTreeSet<(usize, usize)> = truth.iter().map(|e| (e.src, e.dst)).collect();
    let tp = p.intersection(&t).count() as f64;
    let precision = if p.is_empty() { 0.0 } else { tp / p.len() as f64 };
    let recall = if t.is_empty() { 0.0 } else { tp / t.len() as f64 };
    let f1 = if tp == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    EdgeScore { precision, recall, f1 }
}
