//! Spatial kNN graphs over patch centroids and the two-layer GATv2 encoder.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_SLOPE: f64 = 0.2;

/// Directed kNN graph: node `i` attends to its neighbors and itself.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGraph {
    num_nodes: usize,
    neighbors: Vec<Vec<usize>>,
    // Flattened message layout: for node i, `degree` rows, self first.
    self_index: Arc<[usize]>,
    message_index: Arc<[usize]>,
}

impl SpatialGraph {
    /// Builds a graph from explicit neighbor lists (sorted, no self entries).
    pub fn from_neighbors(neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let num_nodes = neighbors.len();
        let width = neighbors.first().map_or(0, Vec::len);
        for (i, list) in neighbors.iter().enumerate() {
            if list.len() != width {
                return Err(Error::Data(format!(
                    "node {i} has {} neighbors, expected a uniform {width}",
                    list.len()
                )));
            }
            if list.iter().any(|&j| j >= num_nodes || j == i) || list.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data(format!("invalid neighbor list for node {i}: {list:?}")));
            }
        }
        let degree = width + 1;
        let mut self_index = Vec::with_capacity(num_nodes * degree);
        let mut message_index = Vec::with_capacity(num_nodes * degree);
        for (i, list) in neighbors.iter().enumerate() {
            self_index.extend(std::iter::repeat_n(i, degree));
            message_index.push(i);
            message_index.extend_from_slice(list);
        }
        Ok(Self {
            num_nodes,
            neighbors,
            self_index: self_index.into(),
            message_index: message_index.into(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Messages per node including the self-loop.
    pub fn degree(&self) -> usize {
        self.neighbors.first().map_or(1, |l| l.len() + 1)
    }

    /// The same graph with node `i` renamed to `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let mut lists = vec![Vec::new(); self.num_nodes];
        for (i, list) in self.neighbors.iter().enumerate() {
            let mut mapped: Vec<usize> = list.iter().map(|&j| perm[j]).collect();
            mapped.sort_unstable();
            lists[perm[i]] = mapped;
        }
        Self::from_neighbors(lists)
    }
}

/// Brute-force kNN over `I × 2` centroids, ties broken by lower index.
pub fn build_knn_graph(centroids: &Tensor, k: usize) -> Result<SpatialGraph> {
    let (n, cols) = centroids.dims2();
    if cols != 2 {
        return Err(Error::shape("build_knn_graph", format!("centroids must be I×2, got {:?}", centroids.shape())));
    }
    if n == 0 || k == 0 {
        return Err(Error::Data(format!("kNN graph needs I ≥ 1 and k ≥ 1 (I={n}, k={k})")));
    }
    if let Some(bad) = centroids.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite centroid coordinate at node {}", bad / 2)));
    }
    let width = k.min(n - 1);
    let pts = centroids.data();
    let mut lists = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        let (xi, yi) = (pts[2 * i], pts[2 * i + 1]);
        cand.extend((0..n).filter(|&j| j != i).map(|j| {
            let (dx, dy) = (pts[2 * j] - xi, pts[2 * j + 1] - yi);
            (dx * dx + dy * dy, j)
        }));
        let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
        if width < cand.len() {
            cand.select_nth_unstable_by(width, by_dist);
        }
        let mut chosen: Vec<usize> = cand[..width].iter().map(|c| c.1).collect();
        chosen.sort_unstable();
        lists.push(chosen);
    }
    SpatialGraph::from_neighbors(lists)
}

/// Weights of one single-head GATv2 layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GatLayerParams {
    /// `d_out × d_in`.
    pub w: Tensor,
    /// `1 × d_out`.
    pub attn: Tensor,
    /// `1 × d_out`.
    pub bias: Tensor,
}

impl GatLayerParams {
    pub fn bind(&self, tape: &mut Tape) -> GatLayerVars {
        GatLayerVars {
            w: tape.leaf(self.w.clone()),
            attn: tape.leaf(self.attn.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GatLayerVars {
    pub w: Var,
    pub attn: Var,
    pub bias: Var,
}

/// One GATv2 layer: `e_ij = aᵀ·LeakyReLU(W·h_i + W·h_j)`, softmax over
/// `j ∈ N(i) ∪ {i}`, output `Σ_j α_ij·W·h_j + b`.
pub fn gatv2_layer(tape: &mut Tape, h: Var, graph: &SpatialGraph, layer: &GatLayerVars, slope: f64) -> Result<Var> {
    let nodes = graph.num_nodes();
    if nodes == 0 {
        return Err(Error::shape("gatv2_layer", "empty graph"));
    }
    if tape.value(h).rows() != nodes {
        return Err(Error::shape(
            "gatv2_layer",
            format!("{} feature rows for a {nodes}-node graph", tape.value(h).rows()),
        ));
    }
    let degree = graph.degree();
    let z = tape.matmul_t(h, layer.w)?;
    let z_self = tape.gather_rows(z, graph.self_index.clone())?;
    let z_msg = tape.gather_rows(z, graph.message_index.clone())?;
    let pre = tape.add(z_self, z_msg)?;
    let act = tape.leaky_relu(pre, slope)?;
    let scores = tape.matmul_t(act, layer.attn)?;
    let scores = tape.reshape(scores, &[nodes, degree])?;
    let alpha = tape.softmax(scores, 1, 1.0)?;
    let alpha = tape.reshape(alpha, &[nodes * degree, 1])?;
    let weighted = tape.mul(z_msg, alpha)?;
    let agg = tape.group_sum_rows(weighted, degree)?;
    tape.add(agg, layer.bias)
}

/// Contextual patch encoder: GATv2 → ELU → GATv2.
pub fn encode_wsi(
    tape: &mut Tape,
    bag: Var,
    graph: &SpatialGraph,
    layers: [&GatLayerVars; 2],
    slope: f64,
) -> Result<Var> {
    let h1 = gatv2_layer(tape, bag, graph, layers[0], slope)?;
    let h1 = tape.elu(h1)?;
    let out = gatv2_layer(tape, h1, graph, layers[1], slope)?;
    if !tape.value(out).is_finite() {
        return Err(Error::Numeric("graph encoder produced non-finite features".into()));
    }
    Ok(out)
}
