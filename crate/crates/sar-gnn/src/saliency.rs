//! Global node saliency scored from the memory vector, and the two fusion
//! mechanisms that fold it into the backbone's local aggregation weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::LocalWeights;
use crate::error::{Error, Result};
use crate::memory::MemoryState;
use crate::tensor::{Param, Tape, Tensor, Val};

/// Projections that map the memory vector and node features into one
/// latent space where their dot product measures compatibility.
#[derive(Debug, Clone)]
pub struct SaliencyParams {
    pub wq_s: Param,
    pub wk_s: Param,
    pub d: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SaliencyLease {
    pub wq_s: Val,
    pub wk_s: Val,
}

impl SaliencyParams {
    pub fn init(d_m: usize, d: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        SaliencyParams {
            wq_s: Param::new(Tensor::glorot(d_m, d, rng)),
            wk_s: Param::new(Tensor::glorot(d_h, d, rng)),
            d,
        }
    }

    pub fn lease(&self, tape: &Tape, frozen: bool) -> SaliencyLease {
        let grab = |p: &Param| if frozen { tape.param_frozen(p) } else { tape.param(p) };
        SaliencyLease { wq_s: grab(&self.wq_s), wk_s: grab(&self.wk_s) }
    }
}

/// A probability distribution over the nodes of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyDistribution {
    pub s: Vec<f64>,
}

/// Per-node fused aggregation weights; each vector is a distribution over
/// the node's closed neighborhood.
#[derive(Debug, Clone)]
pub struct FusedWeights {
    pub per_node: Vec<Val>,
    pub support: Vec<Vec<usize>>,
}

/// How local and global weights combine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FusionConfig {
    /// `w_i(j) = softmax_j(a_i(j) + β s(j))`
    WeightedSum { beta: f64 },
    /// `w_i(j) = softmax_j((1 + s(j))^γ a_i(j))`, `γ > 0`
    Scaling { gamma: f64 },
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            FusionConfig::Scaling { gamma } if *gamma <= 0.0 => Err(Error::Contract(format!(
                "scaling fusion needs gamma > 0, got {gamma}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Saliency scores on the tape: softmax over nodes of
/// `(m W^q_s)(H W^K_s)ᵀ / √d`. Returns a rank-1 value of length `N`.
pub fn compute_saliency_t(
    tape: &Tape,
    m: Val,
    h: Val,
    lease: &SaliencyLease,
    d: usize,
) -> Result<Val> {
    let n = tape.shape(h)[0];
    if n == 0 {
        return Err(Error::Contract("saliency needs at least one node".into()));
    }
    let scores = saliency_scores_t(tape, m, h, lease, d)?;
    tape.softmax(scores, 0)
}

/// The pre-softmax node scores backing [`compute_saliency_t`]; the loss
/// uses them to form a stable log-softmax.
pub fn saliency_scores_t(
    tape: &Tape,
    m: Val,
    h: Val,
    lease: &SaliencyLease,
    d: usize,
) -> Result<Val> {
    let n = tape.shape(h)[0];
    let q = tape.matmul(m, lease.wq_s)?;
    let keys = tape.matmul(h, lease.wk_s)?;
    let keys_t = tape.transpose(keys)?;
    let scores = tape.scale(tape.matmul(q, keys_t)?, 1.0 / (d as f64).sqrt());
    tape.reshape(scores, vec![n])
}

/// Value-level wrapper around [`compute_saliency_t`].
pub fn compute_saliency(
    m: &MemoryState,
    h: &Tensor,
    params: &SaliencyParams,
) -> Result<SaliencyDistribution> {
    let tape = Tape::new();
    let mv = tape.constant(vec![1, m.m.len()], m.m.clone())?;
    let hv = tape.constant_tensor(h);
    let lease = params.lease(&tape, true);
    let s = compute_saliency_t(&tape, mv, hv, &lease, params.d)?;
    Ok(SaliencyDistribution { s: tape.value(s) })
}

/// Weighted-sum fusion: per node, softmax over the closed neighborhood of
/// `a_i(j) + β s(j)`. The saliency is restricted to the neighborhood
/// without renormalization.
pub fn fuse_weighted_sum(
    tape: &Tape,
    local: &LocalWeights,
    s: Val,
    beta: f64,
) -> Result<FusedWeights> {
    let per_node = local
        .per_node
        .iter()
        .zip(&local.support)
        .map(|(&a_i, closed)| {
            let s_restricted = tape.gather(s, closed)?;
            let shifted = tape.add(a_i, tape.scale(s_restricted, beta))?;
            tape.softmax(shifted, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FusedWeights { per_node, support: local.support.clone() })
}

/// Scaling fusion: per node, softmax over the closed neighborhood of
/// `(1 + s(j))^γ · a_i(j)`, with `γ > 0`.
pub fn fuse_scaling(
    tape: &Tape,
    local: &LocalWeights,
    s: Val,
    gamma: f64,
) -> Result<FusedWeights> {
    if gamma <= 0.0 {
        return Err(Error::Contract(format!("fuse_scaling needs gamma > 0, got {gamma}")));
    }
    let per_node = local
        .per_node
        .iter()
        .zip(&local.support)
        .map(|(&a_i, closed)| {
            let s_restricted = tape.gather(s, closed)?;
            let factor = tape.pow_const(tape.add_const(s_restricted, 1.0), gamma)?;
            let scaled = tape.mul(factor, a_i)?;
            tape.softmax(scaled, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FusedWeights { per_node, support: local.support.clone() })
}

/// Apply the configured fusion mechanism.
pub fn fuse(
    tape: &Tape,
    local: &LocalWeights,
    s: Val,
    config: &FusionConfig,
) -> Result<FusedWeights> {
    match config {
        FusionConfig::WeightedSum { beta } => fuse_weighted_sum(tape, local, s, *beta),
        FusionConfig::Scaling { gamma } => fuse_scaling(tape, local, s, *gamma),
    }
}
