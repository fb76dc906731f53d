//! The four neighborhood-aggregation layer kinds. Each exposes its native
//! local weights over closed neighborhoods and accepts externally supplied
//! per-neighborhood aggregation weights in their place, so a saliency
//! distribution can regularize the aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{renormalized_adjacency, Graph};
use crate::tensor::{Param, Tape, Tensor, Val};

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Gcn,
    Sage,
    Gin,
    Gat,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 4] =
        [BackboneKind::Gcn, BackboneKind::Sage, BackboneKind::Gin, BackboneKind::Gat];

    pub fn name(&self) -> &'static str {
        match self {
            BackboneKind::Gcn => "gcn",
            BackboneKind::Sage => "sage",
            BackboneKind::Gin => "gin",
            BackboneKind::Gat => "gat",
        }
    }
}

/// One feature-refining layer, holding exactly the parameters its kind
/// needs. Hidden width is constant across layers; the input embedding maps
/// raw features into that width before layer 1.
#[derive(Debug, Clone)]
pub enum BackboneLayer {
    Gcn { theta: Param },
    Sage { theta: Param },
    Gin { mlp_w1: Param, mlp_b1: Param, mlp_w2: Param, mlp_b2: Param, epsilon: Param },
    Gat { w: Param, a: Param },
}

#[derive(Debug, Clone, Copy)]
pub enum BackboneLease {
    Gcn { theta: Val },
    Sage { theta: Val },
    Gin { mlp_w1: Val, mlp_b1: Val, mlp_w2: Val, mlp_b2: Val, epsilon: Val },
    Gat { w: Val, a: Val },
}

impl BackboneLayer {
    pub fn init(kind: BackboneKind, d_h: usize, rng: &mut impl Rng) -> Self {
        match kind {
            BackboneKind::Gcn => BackboneLayer::Gcn { theta: Param::new(Tensor::glorot(d_h, d_h, rng)) },
            BackboneKind::Sage => BackboneLayer::Sage { theta: Param::new(Tensor::glorot(d_h, d_h, rng)) },
            BackboneKind::Gin => BackboneLayer::Gin {
                mlp_w1: Param::new(Tensor::glorot(d_h, d_h, rng)),
                mlp_b1: Param::new(Tensor::zeros(vec![d_h])),
                mlp_w2: Param::new(Tensor::glorot(d_h, d_h, rng)),
                mlp_b2: Param::new(Tensor::zeros(vec![d_h])),
                epsilon: Param::new(Tensor::zeros(vec![1])),
            },
            BackboneKind::Gat => BackboneLayer::Gat {
                w: Param::new(Tensor::glorot(d_h, d_h, rng)),
                a: Param::new(Tensor::glorot(2 * d_h, 1, rng)),
            },
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            BackboneLayer::Gcn { .. } => BackboneKind::Gcn,
            BackboneLayer::Sage { .. } => BackboneKind::Sage,
            BackboneLayer::Gin { .. } => BackboneKind::Gin,
            BackboneLayer::Gat { .. } => BackboneKind::Gat,
        }
    }

    pub fn params(&self) -> Vec<(&'static str, Param)> {
        match self {
            BackboneLayer::Gcn { theta } | BackboneLayer::Sage { theta } => {
                vec![("theta", theta.clone())]
            }
            BackboneLayer::Gin { mlp_w1, mlp_b1, mlp_w2, mlp_b2, epsilon } => vec![
                ("mlp_w1", mlp_w1.clone()),
                ("mlp_b1", mlp_b1.clone()),
                ("mlp_w2", mlp_w2.clone()),
                ("mlp_b2", mlp_b2.clone()),
                ("epsilon", epsilon.clone()),
            ],
            BackboneLayer::Gat { w, a } => vec![("w", w.clone()), ("a", a.clone())],
        }
    }

    pub fn lease(&self, tape: &Tape, frozen: bool) -> BackboneLease {
        let grab = |p: &Param| if frozen { tape.param_frozen(p) } else { tape.param(p) };
        match self {
            BackboneLayer::Gcn { theta } => BackboneLease::Gcn { theta: grab(theta) },
            BackboneLayer::Sage { theta } => BackboneLease::Sage { theta: grab(theta) },
            BackboneLayer::Gin { mlp_w1, mlp_b1, mlp_w2, mlp_b2, epsilon } => BackboneLease::Gin {
                mlp_w1: grab(mlp_w1),
                mlp_b1: grab(mlp_b1),
                mlp_w2: grab(mlp_w2),
                mlp_b2: grab(mlp_b2),
                epsilon: grab(epsilon),
            },
            BackboneLayer::Gat { w, a } => BackboneLease::Gat { w: grab(w), a: grab(a) },
        }
    }
}

/// Per-node raw aggregation weights over closed neighborhoods.
///
/// `support[i]` lists the nodes `weights_for(i)` refers to, center first
/// then neighbors ascending (the ordering of
/// [`Graph::closed_neighborhood`]).
#[derive(Debug, Clone)]
pub struct LocalWeights {
    pub per_node: Vec<Val>,
    pub support: Vec<Vec<usize>>,
}

/// Native local weights of the layer kind:
///
/// * GCN — rows of the renormalized adjacency restricted to closed
///   neighborhoods;
/// * GraphSAGE — all ones (the mean aggregator's uniform weighting);
/// * GIN — `1 + ε` at the center, 1 at neighbors;
/// * GAT — attention softmax over each closed neighborhood.
pub fn local_weights(
    layer: &BackboneLease,
    tape: &Tape,
    g: &Graph,
    h: Val,
) -> Result<LocalWeights> {
    let n = g.num_nodes();
    if tape.shape(h)[0] != n {
        return Err(Error::Dim("local_weights: H rows != graph nodes".into()));
    }
    let support: Vec<Vec<usize>> = (0..n).map(|i| g.closed_neighborhood(i)).collect();
    let per_node = match layer {
        BackboneLease::Gcn { .. } => {
            let renorm = renormalized_adjacency(g);
            support
                .iter()
                .enumerate()
                .map(|(i, closed)| {
                    let row: Vec<f64> = closed.iter().map(|&j| renorm.row(i)[j]).collect();
                    tape.constant(vec![closed.len()], row)
                })
                .collect::<Result<Vec<_>>>()?
        }
        BackboneLease::Sage { .. } => support
            .iter()
            .map(|closed| tape.constant(vec![closed.len()], vec![1.0; closed.len()]))
            .collect::<Result<Vec<_>>>()?,
        BackboneLease::Gin { epsilon, .. } => support
            .iter()
            .map(|closed| {
                let k = closed.len();
                let mut center = vec![0.0; k];
                center[0] = 1.0;
                let center = tape.constant(vec![k], center)?;
                let ones = tape.constant(vec![k], vec![1.0; k])?;
                let eps_term = tape.mul_scalar(center, *epsilon)?;
                tape.add(ones, eps_term)
            })
            .collect::<Result<Vec<_>>>()?,
        BackboneLease::Gat { .. } => {
            let scores = gat_attention_scores(layer, tape, g, h)?;
            scores
                .into_iter()
                .map(|s| tape.softmax(s, 0))
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(LocalWeights { per_node, support })
}

/// Pre-softmax GAT compatibility scores per closed neighborhood:
/// `LeakyReLU(aᵀ[W h_i ∥ W h_j])`, computed as the split form
/// `LeakyReLU(a₁ᵀW h_i + a₂ᵀW h_j)`.
///
/// These are the logits that the attention softmax (or a fused softmax,
/// when saliency regularization is active) normalizes.
pub fn gat_attention_scores(
    layer: &BackboneLease,
    tape: &Tape,
    g: &Graph,
    h: Val,
) -> Result<Vec<Val>> {
    let BackboneLease::Gat { w, a } = layer else {
        return Err(Error::Contract("attention scores are a GAT notion".into()));
    };
    let d_h = tape.shape(h)[1];
    let hw = tape.matmul(h, *w)?;
    let a_center = tape.gather_rows(*a, &(0..d_h).collect::<Vec<_>>())?;
    let a_neighbor = tape.gather_rows(*a, &(d_h..2 * d_h).collect::<Vec<_>>())?;
    let n = g.num_nodes();
    let center_term = tape.reshape(tape.matmul(hw, a_center)?, vec![n])?;
    let neighbor_term = tape.reshape(tape.matmul(hw, a_neighbor)?, vec![n])?;
    (0..n)
        .map(|i| {
            let closed = g.closed_neighborhood(i);
            let ci = tape.gather(center_term, &[i])?;
            let nj = tape.gather(neighbor_term, &closed)?;
            Ok(tape.leaky_relu(tape.add_scalar(nj, ci)?, LEAKY_RELU_SLOPE))
        })
        .collect()
}

/// Refine node features with externally supplied per-neighborhood weights.
///
/// `weights[i]` must cover exactly the closed neighborhood of node `i` in
/// the [`Graph::closed_neighborhood`] ordering.
pub fn layer_forward(
    layer: &BackboneLease,
    tape: &Tape,
    g: &Graph,
    h: Val,
    weights: &[Val],
) -> Result<Val> {
    let n = g.num_nodes();
    if weights.len() != n {
        return Err(Error::Contract(format!(
            "layer_forward: {} weight vectors for {} nodes",
            weights.len(),
            n
        )));
    }
    // For GAT the aggregation runs over transformed features W·h.
    let source = match layer {
        BackboneLease::Gat { w, .. } => tape.matmul(h, *w)?,
        _ => h,
    };
    let mut agg_rows = Vec::with_capacity(n);
    for i in 0..n {
        let closed = g.closed_neighborhood(i);
        if tape.shape(weights[i]) != [closed.len()] {
            return Err(Error::Contract(format!(
                "layer_forward: weight support for node {i} is {:?}, closed neighborhood has {} nodes",
                tape.shape(weights[i]),
                closed.len()
            )));
        }
        let rows = tape.gather_rows(source, &closed)?;
        let w_row = tape.reshape(weights[i], vec![1, closed.len()])?;
        let mut agg = tape.matmul(w_row, rows)?;
        if matches!(layer, BackboneLease::Sage { .. }) {
            // the mean over the |N_i| + 1 weighted feature vectors
            agg = tape.scale(agg, 1.0 / closed.len() as f64);
        }
        agg_rows.push(agg);
    }
    let aggregated = tape.concat(&agg_rows, 0)?;
    match layer {
        BackboneLease::Gcn { theta } | BackboneLease::Sage { theta } => {
            Ok(tape.relu(tape.matmul(aggregated, *theta)?))
        }
        BackboneLease::Gin { mlp_w1, mlp_b1, mlp_w2, mlp_b2, .. } => {
            let hidden = tape.relu(tape.add_bias(tape.matmul(aggregated, *mlp_w1)?, *mlp_b1)?);
            tape.add_bias(tape.matmul(hidden, *mlp_w2)?, *mlp_b2)
        }
        BackboneLease::Gat { .. } => Ok(tape.relu(aggregated)),
    }
}
