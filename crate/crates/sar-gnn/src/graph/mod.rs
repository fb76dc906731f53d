//! Graph and dataset types, synthetic benchmark generation, TU-format
//! ingestion, feature initialization and fold splitting.

mod triangles;
mod tu;

pub use triangles::{count_triangles, generate_triangles, triangle_member_mask, TriangleSpec};
pub use tu::load_tu_dataset;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An undirected graph with per-node features and a class label.
///
/// The adjacency is symmetric with a zero diagonal; self-loops exist only
/// inside backbone arithmetic (the renormalized form adds them explicitly).
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    adj: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
    features: Tensor,
    label: usize,
    saliency_truth: Option<Vec<f64>>,
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Tensor,
        label: usize,
        saliency_truth: Option<Vec<f64>>,
    ) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != num_nodes {
            return Err(Error::Dim(format!(
                "features shape {:?} does not match {} nodes",
                features.shape(),
                num_nodes
            )));
        }
        let mut adj = vec![false; num_nodes * num_nodes];
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Contract(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                return Err(Error::Contract(format!("self-loop on node {u}")));
            }
            adj[u * num_nodes + v] = true;
            adj[v * num_nodes + u] = true;
        }
        let neighbors = (0..num_nodes)
            .map(|i| (0..num_nodes).filter(|&j| adj[i * num_nodes + j]).collect())
            .collect();
        if let Some(s) = &saliency_truth {
            if s.len() != num_nodes {
                return Err(Error::Dim("saliency_truth length != num_nodes".into()));
            }
            if s.iter().any(|&x| x < 0.0) {
                return Err(Error::Contract("saliency_truth has negative mass".into()));
            }
            let total: f64 = s.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!(
                    "saliency_truth sums to {total}, expected 1"
                )));
            }
        }
        Ok(Graph { num_nodes, adj, neighbors, features, label, saliency_truth })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(|n| n.len()).sum::<usize>() / 2
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u * self.num_nodes + v]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// The node itself followed by its neighbors in ascending order. Every
    /// per-neighborhood weight vector in the model uses this ordering.
    pub fn closed_neighborhood(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.neighbors[i].len() + 1);
        out.push(i);
        out.extend_from_slice(&self.neighbors[i]);
        out
    }

    /// Undirected edge list with `u < v`, ascending.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for u in 0..self.num_nodes {
            for &v in &self.neighbors[u] {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn saliency_truth(&self) -> Option<&[f64]> {
        self.saliency_truth.as_deref()
    }

    /// Relabel nodes: node `i` becomes `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.num_nodes {
            return Err(Error::Contract("permutation length != num_nodes".into()));
        }
        let mut seen = vec![false; self.num_nodes];
        for &p in perm {
            if p >= self.num_nodes || seen[p] {
                return Err(Error::Contract("not a permutation".into()));
            }
            seen[p] = true;
        }
        let edges: Vec<(usize, usize)> =
            self.edges().iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let d = self.feature_dim();
        let mut feats = vec![0.0; self.num_nodes * d];
        for i in 0..self.num_nodes {
            feats[perm[i] * d..(perm[i] + 1) * d].copy_from_slice(self.features.row(i));
        }
        let truth = self.saliency_truth.as_ref().map(|s| {
            let mut out = vec![0.0; s.len()];
            for (i, &m) in s.iter().enumerate() {
                out[perm[i]] = m;
            }
            out
        });
        Graph::new(
            self.num_nodes,
            &edges,
            Tensor::new(vec![self.num_nodes, d], feats)?,
            self.label,
            truth,
        )
    }
}

/// A labeled collection of graphs sharing one feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub graphs: Vec<Graph>,
}

impl Dataset {
    pub fn new(name: String, num_classes: usize, graphs: Vec<Graph>) -> Result<Self> {
        let feature_dim = graphs
            .first()
            .map(|g| g.feature_dim())
            .ok_or_else(|| Error::Contract("dataset has no graphs".into()))?;
        for (i, g) in graphs.iter().enumerate() {
            if g.feature_dim() != feature_dim {
                return Err(Error::Dim(format!(
                    "graph {i} has feature dim {}, expected {feature_dim}",
                    g.feature_dim()
                )));
            }
            if g.label() >= num_classes {
                return Err(Error::Contract(format!(
                    "graph {i} has label {} outside [0, {num_classes})",
                    g.label()
                )));
            }
        }
        Ok(Dataset { name, num_classes, feature_dim, graphs })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn to_json_string(&self) -> Result<String> {
        let json = DatasetJson::from(self);
        Ok(serde_json::to_string_pretty(&json)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let json: DatasetJson = serde_json::from_str(s)?;
        json.into_dataset()
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetJson {
    name: String,
    num_classes: usize,
    feature_dim: usize,
    graphs: Vec<GraphJson>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    n: usize,
    edges: Vec<[usize; 2]>,
    features: Vec<Vec<f64>>,
    label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    saliency_truth: Option<Vec<f64>>,
}

impl From<&Dataset> for DatasetJson {
    fn from(d: &Dataset) -> Self {
        DatasetJson {
            name: d.name.clone(),
            num_classes: d.num_classes,
            feature_dim: d.feature_dim,
            graphs: d
                .graphs
                .iter()
                .map(|g| GraphJson {
                    n: g.num_nodes(),
                    edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
                    features: (0..g.num_nodes()).map(|i| g.features().row(i).to_vec()).collect(),
                    label: g.label(),
                    saliency_truth: g.saliency_truth().map(|s| s.to_vec()),
                })
                .collect(),
        }
    }
}

impl DatasetJson {
    fn into_dataset(self) -> Result<Dataset> {
        let graphs = self
            .graphs
            .into_iter()
            .map(|g| {
                let edges: Vec<(usize, usize)> = g.edges.iter().map(|e| (e[0], e[1])).collect();
                Graph::new(
                    g.n,
                    &edges,
                    Tensor::from_rows(&g.features)?,
                    g.label,
                    g.saliency_truth,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let d = Dataset::new(self.name, self.num_classes, graphs)?;
        if d.feature_dim != self.feature_dim {
            return Err(Error::Format(format!(
                "declared feature_dim {} does not match features ({})",
                self.feature_dim, d.feature_dim
            )));
        }
        Ok(d)
    }
}

/// Disjoint, exhaustive fold assignment over dataset indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
}

impl FoldSplit {
    /// Indices of every fold except `held_out`, in fold order.
    pub fn training_indices(&self, held_out: usize) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != held_out)
            .flat_map(|(_, fold)| fold.iter().copied())
            .collect()
    }
}

/// Deterministic stratified k-fold split. Within each label group the
/// order is shuffled by a seeded RNG, then members are dealt round-robin
/// so per-fold class counts differ by at most one.
pub fn k_fold_split(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Contract(format!("k = {k}, need k >= 2")));
    }
    if k > dataset.len() {
        return Err(Error::Contract(format!(
            "k = {k} exceeds dataset size {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, g) in dataset.graphs.iter().enumerate() {
        by_label[g.label()].push(i);
    }
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut cursor = 0usize;
    for group in &mut by_label {
        group.shuffle(&mut rng);
        for &idx in group.iter() {
            folds[cursor % k].push(idx);
            cursor += 1;
        }
    }
    Ok(FoldSplit { folds, seed })
}

/// Input featurization for datasets without node attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Row `v` is the indicator of `min(deg(v), max_degree)`;
    /// feature dimension is `max_degree + 1`.
    DegreeOnehot { max_degree: usize },
    /// Every row is the single constant `[1.0]`.
    Constant,
}

/// Replace a graph's features according to `mode`.
pub fn init_features(g: &Graph, mode: FeatureMode) -> Graph {
    let n = g.num_nodes();
    let features = match mode {
        FeatureMode::DegreeOnehot { max_degree } => {
            let d = max_degree + 1;
            let mut data = vec![0.0; n * d];
            for v in 0..n {
                data[v * d + g.degree(v).min(max_degree)] = 1.0;
            }
            Tensor::new(vec![n, d], data).expect("shape is consistent by construction")
        }
        FeatureMode::Constant => Tensor::new(vec![n, 1], vec![1.0; n])
            .expect("shape is consistent by construction"),
    };
    Graph {
        num_nodes: n,
        adj: g.adj.clone(),
        neighbors: g.neighbors.clone(),
        features,
        label: g.label,
        saliency_truth: g.saliency_truth.clone(),
    }
}

/// The GCN propagation matrix `D̃^{-1/2} (A + I) D̃^{-1/2}`.
///
/// An isolated node's only entry is its self-loop, which normalizes to 1.
pub fn renormalized_adjacency(g: &Graph) -> Tensor {
    let n = g.num_nodes();
    let inv_sqrt_deg: Vec<f64> =
        (0..n).map(|i| 1.0 / ((g.degree(i) + 1) as f64).sqrt()).collect();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = inv_sqrt_deg[i] * inv_sqrt_deg[i];
        for &j in g.neighbors(i) {
            data[i * n + j] = inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    Tensor::new(vec![n, n], data).expect("shape is consistent by construction")
}
