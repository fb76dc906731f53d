//! The graph neural memory: a learnable latent vector that distills a
//! compact representation of the whole graph by cross-attending over node
//! features, refined once per backbone layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Param, Tape, Tensor, Val};

/// Dimension chain of the memory: the vector has `d_m` entries, queries and
/// keys meet in a `d`-dimensional space, node features have `d_h` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryDims {
    pub d_m: usize,
    pub d: usize,
    pub d_h: usize,
}

/// Learnable parameters of one memory layer.
///
/// `m0` is consumed only at layer 0, where it seeds the refinement chain;
/// deeper layers receive the previous layer's output instead.
#[derive(Debug, Clone)]
pub struct MemoryParams {
    pub m0: Param,
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub mlp_w1: Param,
    pub mlp_b1: Param,
    pub mlp_w2: Param,
    pub mlp_b2: Param,
    pub k_iters: usize,
    pub dims: MemoryDims,
}

/// The compact graph representation at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState {
    pub m: Vec<f64>,
    pub layer_index: usize,
}

/// Tape handles for one memory layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct MemoryLease {
    pub m0: Option<Val>,
    pub wq: Val,
    pub wk: Val,
    pub wv: Val,
    pub mlp_w1: Val,
    pub mlp_b1: Val,
    pub mlp_w2: Val,
    pub mlp_b2: Val,
}

impl MemoryParams {
    pub fn init(dims: MemoryDims, k_iters: usize, rng: &mut impl Rng) -> Self {
        let MemoryDims { d_m, d, d_h } = dims;
        MemoryParams {
            m0: Param::new(Tensor::glorot(1, d_m, rng)),
            wq: Param::new(Tensor::glorot(d_m, d, rng)),
            wk: Param::new(Tensor::glorot(d_h, d, rng)),
            wv: Param::new(Tensor::glorot(d_h, d, rng)),
            mlp_w1: Param::new(Tensor::glorot(d, d, rng)),
            mlp_b1: Param::new(Tensor::zeros(vec![d])),
            mlp_w2: Param::new(Tensor::glorot(d, d_m, rng)),
            mlp_b2: Param::new(Tensor::zeros(vec![d_m])),
            k_iters,
            dims,
        }
    }

    pub fn lease(&self, tape: &Tape, frozen: bool, with_m0: bool) -> MemoryLease {
        let grab = |p: &Param| if frozen { tape.param_frozen(p) } else { tape.param(p) };
        MemoryLease {
            m0: with_m0.then(|| grab(&self.m0)),
            wq: grab(&self.wq),
            wk: grab(&self.wk),
            wv: grab(&self.wv),
            mlp_w1: grab(&self.mlp_w1),
            mlp_b1: grab(&self.mlp_b1),
            mlp_w2: grab(&self.mlp_w2),
            mlp_b2: grab(&self.mlp_b2),
        }
    }
}

/// Fresh memory parameters with the default square configuration
/// `d = d_H = d_M`, one inner iteration, deterministic in `seed`.
pub fn init_memory(d_m: usize, seed: u64) -> MemoryParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MemoryParams::init(MemoryDims { d_m, d: d_m, d_h: d_m }, 1, &mut rng)
}

/// One memory refinement on the tape: `k_iters` rounds of single-query
/// scaled dot-product attention over the node features, an MLP, and a
/// residual connection around each round.
///
/// `m` is `[1, d_m]`, `h` is `[N, d_h]`; returns `[1, d_m]`.
pub fn gnm_layer_t(
    tape: &Tape,
    m: Val,
    h: Val,
    lease: &MemoryLease,
    k_iters: usize,
    d: usize,
) -> Result<Val> {
    let n = tape.shape(h)[0];
    if n == 0 {
        return Err(Error::Contract("memory layer needs at least one node".into()));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let keys = tape.matmul(h, lease.wk)?;
    let values = tape.matmul(h, lease.wv)?;
    let keys_t = tape.transpose(keys)?;
    let mut m_cur = m;
    for _ in 0..k_iters.max(1) {
        let q = tape.matmul(m_cur, lease.wq)?;
        let scores = tape.scale(tape.matmul(q, keys_t)?, scale);
        let attn = tape.softmax(scores, 1)?;
        let distilled = tape.matmul(attn, values)?;
        let hidden = tape.relu(tape.add_bias(tape.matmul(distilled, lease.mlp_w1)?, lease.mlp_b1)?);
        let out = tape.add_bias(tape.matmul(hidden, lease.mlp_w2)?, lease.mlp_b2)?;
        m_cur = tape.add(out, m_cur)?;
    }
    Ok(m_cur)
}

/// Value-level wrapper around [`gnm_layer_t`] for inspection and tests.
pub fn gnm_layer(state: &MemoryState, h: &Tensor, params: &MemoryParams) -> Result<MemoryState> {
    let tape = Tape::new();
    let m = tape.constant(vec![1, state.m.len()], state.m.clone())?;
    let hv = tape.constant_tensor(h);
    let lease = params.lease(&tape, true, false);
    let out = gnm_layer_t(&tape, m, hv, &lease, params.k_iters, params.dims.d)?;
    Ok(MemoryState { m: tape.value(out), layer_index: state.layer_index + 1 })
}

/// The attention distribution over nodes for one refinement step.
pub fn attention_weights(
    state: &MemoryState,
    h: &Tensor,
    params: &MemoryParams,
) -> Result<Vec<f64>> {
    if h.shape()[0] == 0 {
        return Err(Error::Contract("memory layer needs at least one node".into()));
    }
    let tape = Tape::new();
    let m = tape.constant(vec![1, state.m.len()], state.m.clone())?;
    let hv = tape.constant_tensor(h);
    let lease = params.lease(&tape, true, false);
    let q = tape.matmul(m, lease.wq)?;
    let keys = tape.matmul(hv, lease.wk)?;
    let keys_t = tape.transpose(keys)?;
    let scores = tape.scale(tape.matmul(q, keys_t)?, 1.0 / (params.dims.d as f64).sqrt());
    let attn = tape.softmax(scores, 1)?;
    Ok(tape.value(attn))
}
