//! The full model: input embedding, backbone stack, per-layer memory
//! refinement, saliency-regularized aggregation, and the classification
//! head, assembled per ablation variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    gat_attention_scores, layer_forward, local_weights, BackboneKind, BackboneLayer, LocalWeights,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::memory::{gnm_layer_t, MemoryDims, MemoryParams, MemoryState};
use crate::saliency::{
    compute_saliency_t, fuse, saliency_scores_t, FusionConfig, SaliencyParams,
};
use crate::tensor::{Param, Tape, Tensor, Val};

/// Ablation variants: which of the two modules feed the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The bare backbone with sum pooling; no memory, no saliency.
    Base,
    /// Memory head, but aggregation keeps its native local weights.
    GnmGnn,
    /// Saliency-regularized aggregation with a sum-pooling head.
    SarPooling,
    /// The intact model: regularized aggregation, memory head.
    SarGnn,
}

impl Variant {
    pub fn uses_memory(&self) -> bool {
        !matches!(self, Variant::Base)
    }

    pub fn uses_saliency(&self) -> bool {
        matches!(self, Variant::SarPooling | Variant::SarGnn)
    }

    pub fn memory_head(&self) -> bool {
        matches!(self, Variant::GnmGnn | Variant::SarGnn)
    }
}

/// Which parameter block a training epoch updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Gradient steps over all parameters.
    Joint,
    /// Alternate between the memory+saliency block and the
    /// backbone+embedding+head block every `period` epochs.
    Alternating { period: usize },
}

/// Freeze mask for one forward pass; frozen parameters enter the tape as
/// constants, so gradients only propagate into the unfrozen block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Freeze {
    None,
    MemoryBlock,
    BackboneBlock,
    All,
}

impl Freeze {
    fn memory(&self) -> bool {
        matches!(self, Freeze::MemoryBlock | Freeze::All)
    }
    fn backbone(&self) -> bool {
        matches!(self, Freeze::BackboneBlock | Freeze::All)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarGnnConfig {
    pub backbone: BackboneKind,
    pub variant: Variant,
    /// Number of feature-refining backbone layers L; the memory stack has
    /// L + 1 layers.
    pub layers: usize,
    pub d_in: usize,
    pub d_h: usize,
    pub d_m: usize,
    /// Projection width of the attention and saliency dot products.
    pub d_att: usize,
    pub k_iters: usize,
    pub fusion: FusionConfig,
    pub num_classes: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub policy: Policy,
    /// Weight of the saliency-supervision loss term; 0 disables it.
    pub saliency_lambda: f64,
    pub seed: u64,
}

impl SarGnnConfig {
    /// Desk-scale defaults; `d_in` and `num_classes` still need to be set
    /// from the dataset.
    pub fn defaults(backbone: BackboneKind, variant: Variant) -> Self {
        SarGnnConfig {
            backbone,
            variant,
            layers: 3,
            d_in: 1,
            d_h: 32,
            d_m: 32,
            d_att: 32,
            k_iters: 1,
            fusion: FusionConfig::WeightedSum { beta: 1.0 },
            num_classes: 2,
            learning_rate: 1e-3,
            epochs: 100,
            policy: Policy::Joint,
            saliency_lambda: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Contract("need at least one backbone layer".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Contract("need at least two classes".into()));
        }
        if self.d_in < 1 || self.d_h < 1 || self.d_m < 1 || self.d_att < 1 {
            return Err(Error::Contract("all dimensions must be positive".into()));
        }
        if self.saliency_lambda < 0.0 {
            return Err(Error::Contract("saliency_lambda must be nonnegative".into()));
        }
        if self.saliency_lambda > 0.0 && !self.variant.uses_saliency() {
            return Err(Error::Contract(
                "saliency supervision requires a saliency-aware variant".into(),
            ));
        }
        if let Policy::Alternating { period } = self.policy {
            if period == 0 {
                return Err(Error::Contract("alternating period must be positive".into()));
            }
        }
        self.fusion.validate()
    }
}

/// All model state: configuration plus every learnable parameter.
#[derive(Debug, Clone)]
pub struct SarGnnModel {
    pub config: SarGnnConfig,
    pub input_embed_w: Param,
    pub input_embed_b: Param,
    pub backbone_layers: Vec<BackboneLayer>,
    pub memory_layers: Option<Vec<MemoryParams>>,
    pub saliency_layers: Option<Vec<SaliencyParams>>,
    pub head_w1: Param,
    pub head_b1: Param,
    pub head_w2: Param,
    pub head_b2: Param,
}

/// Everything one forward pass produces, as plain values.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Vec<f64>,
    /// One distribution per backbone layer, `s^0 .. s^{L-1}`; empty when
    /// the variant does not compute saliency.
    pub saliencies: Vec<Vec<f64>>,
    /// `M^0 .. M^{L+1}`; empty when the variant has no memory.
    pub memory_states: Vec<MemoryState>,
    /// `H^0 .. H^L`.
    pub node_features: Vec<Tensor>,
    /// The graph-level representation the head consumed: `M^{L+1}` for
    /// memory-head variants, sum-pooled `H^L` otherwise.
    pub graph_embedding: Vec<f64>,
}

/// Tape handles produced by [`SarGnnModel::forward_on_tape`].
pub struct TapeForward {
    pub logits: Val,
    pub saliencies: Vec<Val>,
    pub saliency_scores: Vec<Val>,
    pub memories: Vec<Val>,
    pub node_features: Vec<Val>,
    pub graph_embedding: Val,
}

impl SarGnnModel {
    pub fn new(config: SarGnnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let input_embed_w = Param::new(Tensor::glorot(config.d_in, config.d_h, &mut rng));
        let input_embed_b = Param::new(Tensor::zeros(vec![config.d_h]));
        let backbone_layers: Vec<BackboneLayer> = (0..config.layers)
            .map(|_| BackboneLayer::init(config.backbone, config.d_h, &mut rng))
            .collect();
        let dims = MemoryDims { d_m: config.d_m, d: config.d_att, d_h: config.d_h };
        let memory_layers = config.variant.uses_memory().then(|| {
            (0..config.layers + 1)
                .map(|_| MemoryParams::init(dims, config.k_iters, &mut rng))
                .collect()
        });
        let saliency_layers = config.variant.uses_saliency().then(|| {
            (0..config.layers)
                .map(|_| SaliencyParams::init(config.d_m, config.d_att, config.d_h, &mut rng))
                .collect()
        });
        let head_in = if config.variant.memory_head() { config.d_m } else { config.d_h };
        let head_w1 = Param::new(Tensor::glorot(head_in, config.d_m, &mut rng));
        let head_b1 = Param::new(Tensor::zeros(vec![config.d_m]));
        let head_w2 = Param::new(Tensor::glorot(config.d_m, config.num_classes, &mut rng));
        let head_b2 = Param::new(Tensor::zeros(vec![config.num_classes]));
        Ok(SarGnnModel {
            config,
            input_embed_w,
            input_embed_b,
            backbone_layers,
            memory_layers,
            saliency_layers,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        })
    }

    /// Every trainable parameter with a stable canonical name. Layer-0's
    /// memory owns the only live `m0`; deeper `m0` seeds are never read,
    /// so they are not trained or serialized.
    pub fn named_parameters(&self) -> Vec<(String, Param)> {
        let mut out: Vec<(String, Param)> = vec![
            ("input_embed.w".into(), self.input_embed_w.clone()),
            ("input_embed.b".into(), self.input_embed_b.clone()),
        ];
        for (l, layer) in self.backbone_layers.iter().enumerate() {
            for (name, p) in layer.params() {
                out.push((format!("backbone.{l}.{name}"), p));
            }
        }
        if let Some(memory) = &self.memory_layers {
            for (l, m) in memory.iter().enumerate() {
                if l == 0 {
                    out.push((format!("memory.{l}.m0"), m.m0.clone()));
                }
                out.push((format!("memory.{l}.wq"), m.wq.clone()));
                out.push((format!("memory.{l}.wk"), m.wk.clone()));
                out.push((format!("memory.{l}.wv"), m.wv.clone()));
                out.push((format!("memory.{l}.mlp_w1"), m.mlp_w1.clone()));
                out.push((format!("memory.{l}.mlp_b1"), m.mlp_b1.clone()));
                out.push((format!("memory.{l}.mlp_w2"), m.mlp_w2.clone()));
                out.push((format!("memory.{l}.mlp_b2"), m.mlp_b2.clone()));
            }
        }
        if let Some(saliency) = &self.saliency_layers {
            for (l, s) in saliency.iter().enumerate() {
                out.push((format!("saliency.{l}.wq_s"), s.wq_s.clone()));
                out.push((format!("saliency.{l}.wk_s"), s.wk_s.clone()));
            }
        }
        out.push(("head.w1".into(), self.head_w1.clone()));
        out.push(("head.b1".into(), self.head_b1.clone()));
        out.push(("head.w2".into(), self.head_w2.clone()));
        out.push(("head.b2".into(), self.head_b2.clone()));
        out
    }

    pub fn parameters(&self) -> Vec<Param> {
        self.named_parameters().into_iter().map(|(_, p)| p).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, p)| p.numel()).sum()
    }

    /// The memory+saliency parameter block (the distillation module).
    pub fn memory_block(&self) -> Vec<Param> {
        self.named_parameters()
            .into_iter()
            .filter(|(name, _)| name.starts_with("memory.") || name.starts_with("saliency."))
            .map(|(_, p)| p)
            .collect()
    }

    /// The embedding+backbone+head parameter block.
    pub fn backbone_block(&self) -> Vec<Param> {
        self.named_parameters()
            .into_iter()
            .filter(|(name, _)| !(name.starts_with("memory.") || name.starts_with("saliency.")))
            .map(|(_, p)| p)
            .collect()
    }

    fn lease_is_frozen(&self, name_is_memory_block: bool, freeze: Freeze) -> bool {
        if name_is_memory_block {
            freeze.memory()
        } else {
            freeze.backbone()
        }
    }

    /// Record the forward pass for `g` on `tape`.
    pub fn forward_on_tape(&self, tape: &Tape, g: &Graph, freeze: Freeze) -> Result<TapeForward> {
        let cfg = &self.config;
        if g.feature_dim() != cfg.d_in {
            return Err(Error::Dim(format!(
                "graph features have dim {}, model expects {}",
                g.feature_dim(),
                cfg.d_in
            )));
        }
        let n = g.num_nodes();
        if n == 0 {
            return Err(Error::Contract("graph has no nodes".into()));
        }
        let bb_frozen = self.lease_is_frozen(false, freeze);
        let mem_frozen = self.lease_is_frozen(true, freeze);
        let grab = |p: &Param, frozen: bool| {
            if frozen {
                tape.param_frozen(p)
            } else {
                tape.param(p)
            }
        };

        // H^0: linear embedding of the raw features
        let x = tape.constant_tensor(g.features());
        let we = grab(&self.input_embed_w, bb_frozen);
        let be = grab(&self.input_embed_b, bb_frozen);
        let mut h = tape.add_bias(tape.matmul(x, we)?, be)?;
        let mut node_features = vec![h];

        let memory_leases = self.memory_layers.as_ref().map(|layers| {
            layers
                .iter()
                .enumerate()
                .map(|(l, m)| m.lease(tape, mem_frozen, l == 0))
                .collect::<Vec<_>>()
        });
        let saliency_leases = self
            .saliency_layers
            .as_ref()
            .map(|layers| layers.iter().map(|s| s.lease(tape, mem_frozen)).collect::<Vec<_>>());

        let mut memories = Vec::new();
        let mut saliencies = Vec::new();
        let mut saliency_scores = Vec::new();

        // M^0 and M^1 (distilled from the embedded input features)
        if let Some(leases) = &memory_leases {
            let m0 = leases[0].m0.expect("layer 0 carries m0");
            memories.push(m0);
            let m1 = gnm_layer_t(tape, m0, h, &leases[0], cfg.k_iters, cfg.d_att)?;
            memories.push(m1);
        }

        for l in 0..cfg.layers {
            let layer = self.backbone_layers[l].lease(tape, bb_frozen);
            let weights = if cfg.variant.uses_saliency() {
                let leases = saliency_leases.as_ref().expect("saliency variant has projections");
                let m_cur = *memories.last().expect("memory precedes saliency");
                let scores = saliency_scores_t(tape, m_cur, h, &leases[l], cfg.d_att)?;
                let s = tape.softmax(scores, 0)?;
                saliency_scores.push(scores);
                saliencies.push(s);
                // GAT contributes its pre-softmax attention scores: the
                // fusion softmax subsumes the one in its native weights.
                let fusion_input = match cfg.backbone {
                    BackboneKind::Gat => LocalWeights {
                        per_node: gat_attention_scores(&layer, tape, g, h)?,
                        support: (0..n).map(|i| g.closed_neighborhood(i)).collect(),
                    },
                    _ => local_weights(&layer, tape, g, h)?,
                };
                fuse(tape, &fusion_input, s, &cfg.fusion)?.per_node
            } else {
                local_weights(&layer, tape, g, h)?.per_node
            };
            h = layer_forward(&layer, tape, g, h, &weights)?;
            node_features.push(h);
            if let Some(leases) = &memory_leases {
                let m_cur = *memories.last().expect("seeded above");
                let next = gnm_layer_t(tape, m_cur, h, &leases[l + 1], cfg.k_iters, cfg.d_att)?;
                memories.push(next);
            }
        }

        let graph_embedding = if cfg.variant.memory_head() {
            *memories.last().expect("memory head variants build the stack")
        } else {
            let ones = tape.constant(vec![1, n], vec![1.0; n])?;
            tape.matmul(ones, h)?
        };
        let hw1 = grab(&self.head_w1, bb_frozen);
        let hb1 = grab(&self.head_b1, bb_frozen);
        let hw2 = grab(&self.head_w2, bb_frozen);
        let hb2 = grab(&self.head_b2, bb_frozen);
        let hidden = tape.relu(tape.add_bias(tape.matmul(graph_embedding, hw1)?, hb1)?);
        let logits = tape.add_bias(tape.matmul(hidden, hw2)?, hb2)?;

        Ok(TapeForward {
            logits,
            saliencies,
            saliency_scores,
            memories,
            node_features,
            graph_embedding,
        })
    }

    /// The training loss for one graph on the tape: cross-entropy of the
    /// label, plus `λ ·` the mean over layers of the cross-entropy between
    /// the ground-truth saliency mask and the predicted distribution.
    pub fn loss_on_tape(&self, tape: &Tape, fwd: &TapeForward, g: &Graph) -> Result<Val> {
        let cfg = &self.config;
        if g.label() >= cfg.num_classes {
            return Err(Error::Contract(format!(
                "label {} outside [0, {})",
                g.label(),
                cfg.num_classes
            )));
        }
        let log_probs = tape.log_softmax(fwd.logits, 1)?;
        let picked = tape.gather(log_probs, &[g.label()])?;
        let mut loss = tape.scale(picked, -1.0);

        if cfg.saliency_lambda > 0.0 {
            let truth = g.saliency_truth().ok_or_else(|| {
                Error::Contract("saliency supervision needs ground-truth masks".into())
            })?;
            if fwd.saliency_scores.is_empty() {
                return Err(Error::Contract(
                    "saliency supervision requires a saliency-aware variant".into(),
                ));
            }
            let truth_val = tape.constant(vec![truth.len()], truth.to_vec())?;
            let mut acc: Option<Val> = None;
            for &scores in &fwd.saliency_scores {
                let log_s = tape.log_softmax(scores, 0)?;
                let ce = tape.scale(tape.sum(tape.mul(truth_val, log_s)?), -1.0);
                acc = Some(match acc {
                    Some(a) => tape.add(a, ce)?,
                    None => ce,
                });
            }
            let mean_ce = tape.scale(acc.expect("at least one layer"),
                1.0 / fwd.saliency_scores.len() as f64);
            loss = tape.add(loss, tape.scale(mean_ce, cfg.saliency_lambda))?;
        }
        Ok(loss)
    }

    /// Run a forward pass and extract every quantity as plain values.
    pub fn forward(&self, g: &Graph) -> Result<ForwardTrace> {
        let tape = Tape::new();
        let fwd = self.forward_on_tape(&tape, g, Freeze::All)?;
        let memory_states = fwd
            .memories
            .iter()
            .enumerate()
            .map(|(l, &m)| MemoryState { m: tape.value(m), layer_index: l })
            .collect();
        let node_features = fwd
            .node_features
            .iter()
            .map(|&h| {
                let shape = tape.shape(h);
                Tensor::new(shape, tape.value(h)).expect("tape values are consistent")
            })
            .collect();
        Ok(ForwardTrace {
            logits: tape.value(fwd.logits),
            saliencies: fwd.saliencies.iter().map(|&s| tape.value(s)).collect(),
            memory_states,
            node_features,
            graph_embedding: tape.value(fwd.graph_embedding),
        })
    }

    /// The scalar training loss for one graph, as a plain value.
    pub fn loss(&self, trace: &ForwardTrace, g: &Graph) -> Result<f64> {
        let cfg = &self.config;
        if g.label() >= cfg.num_classes {
            return Err(Error::Contract(format!(
                "label {} outside [0, {})",
                g.label(),
                cfg.num_classes
            )));
        }
        let ce = -log_softmax_at(&trace.logits, g.label());
        if cfg.saliency_lambda == 0.0 {
            return Ok(ce);
        }
        let truth = g
            .saliency_truth()
            .ok_or_else(|| Error::Contract("saliency supervision needs ground-truth masks".into()))?;
        if trace.saliencies.is_empty() {
            return Err(Error::Contract(
                "saliency supervision requires a saliency-aware variant".into(),
            ));
        }
        let mut total = 0.0;
        for s in &trace.saliencies {
            total += -truth
                .iter()
                .zip(s)
                .filter(|(&t, _)| t > 0.0)
                .map(|(&t, &p)| t * p.ln())
                .sum::<f64>();
        }
        Ok(ce + cfg.saliency_lambda * total / trace.saliencies.len() as f64)
    }

    /// Predicted class: argmax of the logits.
    pub fn predict(&self, g: &Graph) -> Result<usize> {
        let trace = self.forward(g)?;
        Ok(argmax(&trace.logits))
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.total_cmp(b))
        .map(|(i, _)| i)
        .expect("non-empty logits")
}

fn log_softmax_at(logits: &[f64], idx: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits[idx] - max - lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_triangles, TriangleSpec};
    use crate::tensor::grad_check;
    use rand::Rng;

    pub(crate) fn small_config(backbone: BackboneKind, variant: Variant) -> SarGnnConfig {
        let mut cfg = SarGnnConfig::defaults(backbone, variant);
        cfg.layers = 2;
        cfg.d_h = 4;
        cfg.d_m = 4;
        cfg.d_att = 4;
        cfg.d_in = 3;
        cfg.num_classes = 2;
        cfg.seed = 5;
        cfg
    }

    pub(crate) fn toy_graph(n: usize, d_in: usize, label: usize, seed: u64) -> Graph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for u in 0..n {
            for v in u + 1..n {
                if rng.random::<f64>() < 0.5 {
                    edges.push((u, v));
                }
            }
        }
        let feats: Vec<f64> = (0..n * d_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut truth: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let z: f64 = truth.iter().sum();
        truth.iter_mut().for_each(|x| *x /= z);
        Graph::new(n, &edges, Tensor::new(vec![n, d_in], feats).unwrap(), label, Some(truth))
            .unwrap()
    }

    #[test]
    fn trace_shapes_match_the_architecture() {
        for variant in [Variant::Base, Variant::GnmGnn, Variant::SarPooling, Variant::SarGnn] {
            let cfg = small_config(BackboneKind::Gcn, variant);
            let model = SarGnnModel::new(cfg.clone()).unwrap();
            let g = toy_graph(5, 3, 1, 2);
            let trace = model.forward(&g).unwrap();
            assert_eq!(trace.logits.len(), 2);
            assert_eq!(trace.node_features.len(), cfg.layers + 1);
            if variant.uses_memory() {
                assert_eq!(trace.memory_states.len(), cfg.layers + 2);
            } else {
                assert!(trace.memory_states.is_empty());
            }
            if variant.uses_saliency() {
                assert_eq!(trace.saliencies.len(), cfg.layers);
                for s in &trace.saliencies {
                    assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            } else {
                assert!(trace.saliencies.is_empty());
            }
        }
    }

    #[test]
    fn base_and_gnm_share_node_features() {
        // Both run the backbone with native weights; the memory only adds
        // a parallel read-out path.
        let base = SarGnnModel::new(small_config(BackboneKind::Gin, Variant::Base)).unwrap();
        let mut gnm_cfg = small_config(BackboneKind::Gin, Variant::GnmGnn);
        gnm_cfg.seed = base.config.seed;
        let mut gnm = SarGnnModel::new(gnm_cfg).unwrap();
        // align the shared parameters
        *gnm.input_embed_w.borrow_mut() = base.input_embed_w.borrow().clone();
        *gnm.input_embed_b.borrow_mut() = base.input_embed_b.borrow().clone();
        for (bl, gl) in base.backbone_layers.iter().zip(&gnm.backbone_layers) {
            for ((_, bp), (_, gp)) in bl.params().into_iter().zip(gl.params()) {
                *gp.borrow_mut() = bp.borrow().clone();
            }
        }
        let g = toy_graph(6, 3, 0, 3);
        let tb = base.forward(&g).unwrap();
        let tg = gnm.forward(&g).unwrap();
        for (hb, hg) in tb.node_features.iter().zip(&tg.node_features) {
            assert_eq!(hb.data(), hg.data());
        }
    }

    #[test]
    fn sar_gat_at_beta_zero_reduces_to_gnm_gat() {
        let mut sar_cfg = small_config(BackboneKind::Gat, Variant::SarGnn);
        sar_cfg.fusion = FusionConfig::WeightedSum { beta: 0.0 };
        let sar = SarGnnModel::new(sar_cfg).unwrap();
        let mut gnm_cfg = small_config(BackboneKind::Gat, Variant::GnmGnn);
        gnm_cfg.seed = sar.config.seed;
        let mut gnm = SarGnnModel::new(gnm_cfg).unwrap();
        *gnm.input_embed_w.borrow_mut() = sar.input_embed_w.borrow().clone();
        *gnm.input_embed_b.borrow_mut() = sar.input_embed_b.borrow().clone();
        for (sl, gl) in sar.backbone_layers.iter().zip(&gnm.backbone_layers) {
            for ((_, sp), (_, gp)) in sl.params().into_iter().zip(gl.params()) {
                *gp.borrow_mut() = sp.borrow().clone();
            }
        }
        for (sm, gm) in sar
            .memory_layers
            .as_ref()
            .unwrap()
            .iter()
            .zip(gnm.memory_layers.as_mut().unwrap())
        {
            *gm.m0.borrow_mut() = sm.m0.borrow().clone();
            *gm.wq.borrow_mut() = sm.wq.borrow().clone();
            *gm.wk.borrow_mut() = sm.wk.borrow().clone();
            *gm.wv.borrow_mut() = sm.wv.borrow().clone();
            *gm.mlp_w1.borrow_mut() = sm.mlp_w1.borrow().clone();
            *gm.mlp_b1.borrow_mut() = sm.mlp_b1.borrow().clone();
            *gm.mlp_w2.borrow_mut() = sm.mlp_w2.borrow().clone();
            *gm.mlp_b2.borrow_mut() = sm.mlp_b2.borrow().clone();
        }
        *gnm.head_w1.borrow_mut() = sar.head_w1.borrow().clone();
        *gnm.head_b1.borrow_mut() = sar.head_b1.borrow().clone();
        *gnm.head_w2.borrow_mut() = sar.head_w2.borrow().clone();
        *gnm.head_b2.borrow_mut() = sar.head_b2.borrow().clone();

        let g = toy_graph(6, 3, 0, 4);
        let ts = sar.forward(&g).unwrap();
        let tg = gnm.forward(&g).unwrap();
        for (a, b) in ts.logits.iter().zip(&tg.logits) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn singleton_graph_has_unit_saliency_everywhere() {
        let cfg = small_config(BackboneKind::Gcn, Variant::SarGnn);
        let model = SarGnnModel::new(cfg).unwrap();
        let g = toy_graph(1, 3, 0, 5);
        let trace = model.forward(&g).unwrap();
        for s in &trace.saliencies {
            assert_eq!(s, &vec![1.0]);
        }
    }

    #[test]
    fn uniform_logits_loss_is_ln_two() {
        let cfg = small_config(BackboneKind::Gcn, Variant::Base);
        let model = SarGnnModel::new(cfg).unwrap();
        let g = toy_graph(4, 3, 0, 6);
        let mut trace = model.forward(&g).unwrap();
        trace.logits = vec![0.25, 0.25];
        let loss = model.loss(&trace, &g).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-12);

        trace.logits = vec![20.0, -20.0];
        let loss = model.loss(&trace, &g).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn exact_saliency_supervision_term_is_the_mask_entropy() {
        let mut cfg = small_config(BackboneKind::Gcn, Variant::SarGnn);
        cfg.saliency_lambda = 1.0;
        cfg.layers = 1;
        let model = SarGnnModel::new(cfg).unwrap();
        let g = toy_graph(3, 3, 0, 7);
        let truth = g.saliency_truth().unwrap().to_vec();
        let mut trace = model.forward(&g).unwrap();
        trace.logits = vec![0.0, 0.0];
        trace.saliencies = vec![truth.clone()];
        let loss = model.loss(&trace, &g).unwrap();
        let entropy: f64 = -truth.iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum::<f64>();
        assert!((loss - (2.0_f64.ln() + entropy)).abs() < 1e-12);
    }

    #[test]
    fn logits_match_step_by_step_scripted_evaluation() {
        // Independent composition of the module-level oracles, assembled
        // following the architecture loop by hand.
        use crate::memory::tests::gnm_oracle;
        use crate::saliency::tests::saliency_oracle;

        let mut cfg = small_config(BackboneKind::Gcn, Variant::SarGnn);
        cfg.layers = 2;
        cfg.fusion = FusionConfig::WeightedSum { beta: 0.8 };
        let model = SarGnnModel::new(cfg.clone()).unwrap();
        let g = toy_graph(5, 3, 1, 8);
        let got = model.forward(&g).unwrap();

        let n = g.num_nodes();
        let ew = model.input_embed_w.data_vec();
        let eb = model.input_embed_b.data_vec();
        let matmul = |x: &[f64], w: &[f64], m: usize, k: usize, out: usize| -> Vec<f64> {
            let mut c = vec![0.0; m * out];
            for i in 0..m {
                for p in 0..k {
                    for j in 0..out {
                        c[i * out + j] += x[i * k + p] * w[p * out + j];
                    }
                }
            }
            c
        };
        // H^0
        let mut h: Vec<f64> = matmul(g.features().data(), &ew, n, cfg.d_in, cfg.d_h);
        for r in 0..n {
            for j in 0..cfg.d_h {
                h[r * cfg.d_h + j] += eb[j];
            }
        }
        let mems = model.memory_layers.as_ref().unwrap();
        let sals = model.saliency_layers.as_ref().unwrap();
        let ht = |h: &[f64]| Tensor::new(vec![n, cfg.d_h], h.to_vec()).unwrap();
        let mut m = mems[0].m0.data_vec();
        m = gnm_oracle(&m, &ht(&h), &mems[0]);
        let renorm = crate::graph::renormalized_adjacency(&g);

        for l in 0..cfg.layers {
            let s = saliency_oracle(&m, &ht(&h), &sals[l]);
            // fused weights + aggregation + GCN transform
            let mut h_next = vec![0.0; n * cfg.d_h];
            for i in 0..n {
                let closed = g.closed_neighborhood(i);
                let logits: Vec<f64> =
                    closed.iter().map(|&j| renorm.row(i)[j] + 0.8 * s[j]).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut agg = vec![0.0; cfg.d_h];
                for (idx, &j) in closed.iter().enumerate() {
                    for t in 0..cfg.d_h {
                        agg[t] += exps[idx] / z * h[j * cfg.d_h + t];
                    }
                }
                let BackboneLayer::Gcn { theta } = &model.backbone_layers[l] else {
                    unreachable!()
                };
                let td = theta.data_vec();
                for j in 0..cfg.d_h {
                    let mut acc = 0.0;
                    for t in 0..cfg.d_h {
                        acc += agg[t] * td[t * cfg.d_h + j];
                    }
                    h_next[i * cfg.d_h + j] = acc.max(0.0);
                }
            }
            h = h_next;
            m = gnm_oracle(&m, &ht(&h), &mems[l + 1]);
        }
        // head
        let w1 = model.head_w1.data_vec();
        let b1 = model.head_b1.data_vec();
        let w2 = model.head_w2.data_vec();
        let b2 = model.head_b2.data_vec();
        let hidden: Vec<f64> = (0..cfg.d_m)
            .map(|j| {
                ((0..cfg.d_m).map(|i| m[i] * w1[i * cfg.d_m + j]).sum::<f64>() + b1[j]).max(0.0)
            })
            .collect();
        let logits: Vec<f64> = (0..cfg.num_classes)
            .map(|j| {
                (0..cfg.d_m).map(|i| hidden[i] * w2[i * cfg.num_classes + j]).sum::<f64>() + b2[j]
            })
            .collect();
        for (a, b) in got.logits.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn whole_model_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for backbone in BackboneKind::ALL {
            let mut cfg = small_config(backbone, Variant::SarGnn);
            cfg.seed = 11;
            let model = SarGnnModel::new(cfg).unwrap();
            let g = toy_graph(6, 3, 0, 9);
            let mut perm: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let pg = g.permute(&perm).unwrap();
            let t1 = model.forward(&g).unwrap();
            let t2 = model.forward(&pg).unwrap();
            for (a, b) in t1.logits.iter().zip(&t2.logits) {
                assert!((a - b).abs() < 1e-9, "{backbone:?}: {a} vs {b}");
            }
            // saliencies permute with the nodes
            for (s1, s2) in t1.saliencies.iter().zip(&t2.saliencies) {
                for i in 0..6 {
                    assert!((s1[i] - s2[perm[i]]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn end_to_end_gradients_all_variants_all_backbones() {
        // The acceptance suite covers the full matrix at tighter settings;
        // this is the fast development check on two corners.
        for (backbone, variant, fusion) in [
            (BackboneKind::Gcn, Variant::SarGnn, FusionConfig::WeightedSum { beta: 0.9 }),
            (BackboneKind::Gat, Variant::SarPooling, FusionConfig::Scaling { gamma: 1.2 }),
        ] {
            let mut cfg = small_config(backbone, variant);
            cfg.fusion = fusion;
            cfg.saliency_lambda = 0.5;
            let model = SarGnnModel::new(cfg).unwrap();
            let g = toy_graph(4, 3, 1, 10);
            let params = model.parameters();
            let f = {
                let model = model.clone();
                let g = g.clone();
                move |t: &Tape| -> Result<Val> {
                    let fwd = model.forward_on_tape(t, &g, Freeze::None)?;
                    model.loss_on_tape(t, &fwd, &g)
                }
            };
            let err = grad_check(f, &params, 1e-5).unwrap();
            assert!(err < 1e-4, "{backbone:?} {variant:?}: relative error {err}");
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let cfg = small_config(BackboneKind::Gcn, Variant::Base);
        let model = SarGnnModel::new(cfg).unwrap();
        let g = toy_graph(3, 3, 5, 11);
        let trace = model.forward(&g).unwrap();
        assert!(matches!(model.loss(&trace, &g), Err(Error::Contract(_))));
    }

    #[test]
    fn config_contracts_are_validated() {
        let mut cfg = small_config(BackboneKind::Gcn, Variant::SarGnn);
        cfg.num_classes = 1;
        assert!(SarGnnModel::new(cfg).is_err());

        let mut cfg = small_config(BackboneKind::Gcn, Variant::SarGnn);
        cfg.fusion = FusionConfig::Scaling { gamma: -0.5 };
        assert!(SarGnnModel::new(cfg).is_err());

        let mut cfg = small_config(BackboneKind::Gcn, Variant::Base);
        cfg.saliency_lambda = 1.0;
        assert!(SarGnnModel::new(cfg).is_err());

        let mut cfg = small_config(BackboneKind::Gcn, Variant::SarGnn);
        cfg.layers = 0;
        assert!(SarGnnModel::new(cfg).is_err());
    }

    #[test]
    fn feature_dim_mismatch_is_rejected() {
        let cfg = small_config(BackboneKind::Gcn, Variant::Base);
        let model = SarGnnModel::new(cfg).unwrap();
        let g = toy_graph(3, 7, 0, 12);
        assert!(matches!(model.forward(&g), Err(Error::Dim(_))));
    }

    #[test]
    fn frozen_blocks_receive_no_gradients() {
        let mut cfg = small_config(BackboneKind::Gcn, Variant::SarGnn);
        cfg.saliency_lambda = 0.0;
        let model = SarGnnModel::new(cfg).unwrap();
        let g = toy_graph(4, 3, 1, 13);

        let tape = Tape::new();
        let fwd = model.forward_on_tape(&tape, &g, Freeze::MemoryBlock).unwrap();
        let loss = model.loss_on_tape(&tape, &fwd, &g).unwrap();
        tape.backward(loss).unwrap();
        for p in model.memory_block() {
            assert!(p.grad_vec().is_none());
        }
        for p in model.backbone_block() {
            assert!(p.grad_vec().is_some());
        }
    }

    #[test]
    fn generated_dataset_feeds_the_model() {
        let spec = TriangleSpec {
            count: 6,
            nodes_min: 6,
            nodes_max: 9,
            max_label: 3,
            edge_prob: 0.3,
            seed: 2,
        };
        let data = generate_triangles(&spec).unwrap();
        let mut cfg = small_config(BackboneKind::Gcn, Variant::SarGnn);
        cfg.d_in = data.feature_dim;
        cfg.num_classes = data.num_classes;
        let model = SarGnnModel::new(cfg).unwrap();
        for g in &data.graphs {
            let trace = model.forward(g).unwrap();
            assert_eq!(trace.logits.len(), 3);
        }
    }
}
