//! Graph attention network over snapshots: node embedding, per-edge-type
//! multi-head attention layers, depth-routed code path selection, and a
//! per-depth address decoder.

mod checkpoint;
mod train;

use std::sync::Arc;

use ndarray::s;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{block_sum, Mat, Tape, Var};
use crate::graph::{vocab, EdgeKind};
use crate::snapshot::{GraphSnapshot, NodeInit, SnapshotStructure, MAX_DEPTH};
use crate::Scalar;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use train::{
    prefetch_accuracy, split_dataset, train, Adam, EpochStats, TrainError, TrainReport,
};

/// Bits per address and per value encoding.
pub const BITS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    /// Node embedding width `h`.
    pub node_dim: usize,
    pub heads: usize,
    pub edge_types: usize,
    pub vocab: usize,
    /// Hidden width of the address decoder.
    pub mlp_hidden: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_fraction: f64,
    /// Global gradient norm limit per step; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small model for laptop-scale runs.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 4,
            node_dim: 64,
            heads: 4,
            edge_types: EdgeKind::COUNT,
            vocab: vocab::CAPACITY,
            mlp_hidden: 128,
            max_depth: MAX_DEPTH,
            learning_rate: 1e-3,
            seed: 1,
            batch_size: 16,
            epochs: 30,
            train_fraction: 0.7,
            grad_clip: 10.0,
        }
    }

    /// Full-scale hyperparameters.
    pub fn paper() -> Self {
        ModelConfig {
            node_dim: 256,
            heads: 8,
            mlp_hidden: 256,
            learning_rate: 1e-5,
            grad_clip: 0.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.layers == 0 || self.node_dim == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return bad("layers, node_dim, heads and mlp_hidden must be positive".into());
        }
        if self.node_dim % self.heads != 0 {
            return bad(format!("node_dim {} is not divisible by heads {}", self.node_dim, self.heads));
        }
        if self.edge_types != EdgeKind::COUNT {
            return bad(format!("edge_types must be {}", EdgeKind::COUNT));
        }
        if self.vocab < vocab::USED || self.vocab > vocab::CAPACITY {
            return bad(format!("vocab must lie in {}..={}", vocab::USED, vocab::CAPACITY));
        }
        if self.max_depth != MAX_DEPTH {
            return bad(format!("max_depth must be {MAX_DEPTH}"));
        }
        if self.batch_size == 0 || !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("batch_size must be positive and train_fraction in (0, 1]".into());
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip must be finite and non-negative".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive".into());
        }
        Ok(())
    }

    /// Same network shape (ignores optimiser and schedule settings).
    pub fn same_architecture(&self, o: &ModelConfig) -> bool {
        (self.layers, self.node_dim, self.heads, self.edge_types, self.vocab, self.mlp_hidden, self.max_depth)
            == (o.layers, o.node_dim, o.heads, o.edge_types, o.vocab, o.mlp_hidden, o.max_depth)
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("token id {token} is outside the vocabulary of {vocab}")]
    Token { token: u16, vocab: usize },
    #[error("depth {0} has no task node but is not masked")]
    EmptyDepth(usize),
}

/// Indices of the parameter tensors of one attention layer.
#[derive(Debug, Clone)]
struct LayerLayout {
    /// Per edge type: projection, source and destination attention vectors.
    edge: Vec<[usize; 3]>,
    u_msg: usize,
    u_self: usize,
    bias: usize,
    final_layer: bool,
}

#[derive(Debug, Clone)]
struct Layout {
    emb: usize,
    val_w: usize,
    val_b: usize,
    layers: Vec<LayerLayout>,
    path_w: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Fixed head-bookkeeping matrices.
#[derive(Debug, Clone)]
struct HeadConsts<T> {
    /// Sums each head's block of columns: `(heads·width) × heads`.
    sum: Mat<T>,
    /// Spreads one weight per head across its block: `heads × (heads·width)`.
    spread: Mat<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Vec<Mat<T>>,
    pub names: Vec<String>,
    layout: Layout,
    hidden_heads: HeadConsts<T>,
    final_heads: HeadConsts<T>,
    /// `(heads·h) × h` averaging of the final layer's heads.
    head_mean: Mat<T>,
}

fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| T::from_f64(rng.gen_range(-limit..limit)).unwrap())
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.node_dim;
        let heads = config.heads;
        let mut params = Vec::new();
        let mut names = Vec::new();
        let mut add = |name: String, m: Mat<T>| {
            params.push(m);
            names.push(name);
            params.len() - 1
        };
        let emb = add("embedding".into(), glorot(&mut rng, config.vocab, h));
        let val_w = add("value.weight".into(), glorot(&mut rng, BITS, h));
        let val_b = add("value.bias".into(), Mat::zeros((1, h)));
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let final_layer = l + 1 == config.layers;
            let width = if final_layer { heads * h } else { h };
            let mut edge = Vec::new();
            for k in EdgeKind::ALL {
                let w = add(format!("gat{l}.{k}.weight"), glorot(&mut rng, h, width));
                let a_src = add(format!("gat{l}.{k}.att_src"), glorot(&mut rng, 1, width));
                let a_dst = add(format!("gat{l}.{k}.att_dst"), glorot(&mut rng, 1, width));
                edge.push([w, a_src, a_dst]);
            }
            let u_msg = add(format!("gat{l}.update_msg"), glorot(&mut rng, h, h));
            let u_self = add(format!("gat{l}.update_self"), glorot(&mut rng, h, h));
            let bias = add(format!("gat{l}.update_bias"), Mat::zeros((1, h)));
            layers.push(LayerLayout {
                edge,
                u_msg,
                u_self,
                bias,
                final_layer,
            });
        }
        let path_w = add("path.score".into(), glorot(&mut rng, h, 1));
        let w1 = add("predict.hidden.weight".into(), glorot(&mut rng, h, config.mlp_hidden));
        let b1 = add("predict.hidden.bias".into(), Mat::zeros((1, config.mlp_hidden)));
        let w2 = add("predict.out.weight".into(), glorot(&mut rng, config.mlp_hidden, BITS));
        let b2 = add("predict.out.bias".into(), Mat::zeros((1, BITS)));
        let layout = Layout {
            emb,
            val_w,
            val_b,
            layers,
            path_w,
            w1,
            b1,
            w2,
            b2,
        };
        let consts = |width: usize| {
            let sum = block_sum::<T>(heads, width);
            HeadConsts {
                spread: sum.t().to_owned(),
                sum,
            }
        };
        let mut head_mean = Mat::zeros((heads * h, h));
        let inv = T::one() / T::from_usize(heads).unwrap();
        for k in 0..heads {
            for j in 0..h {
                head_mean[[k * h + j, j]] = inv;
            }
        }
        Ok(Model {
            hidden_heads: consts(h / heads),
            final_heads: consts(h),
            head_mean,
            config,
            params,
            names,
            layout,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    /// Pushes all parameters onto the tape, in order.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    /// Initial node states: token rows from the embedding table, runtime
    /// values through the bit projection, zeros elsewhere.
    pub fn embed_nodes<'p>(&'p self, tape: &mut Tape<'p, T>, pv: &[Var], g: &GraphInput) -> Result<Var, ModelError> {
        let h = self.config.node_dim;
        let n = g.node_count;
        for &t in g.tokens.iter() {
            if t as usize >= self.config.vocab {
                return Err(ModelError::Token { token: t, vocab: self.config.vocab });
            }
        }
        let mut x = tape.constant(Mat::zeros((n, h)));
        if !g.token_nodes.is_empty() {
            let idx: Arc<[usize]> = g.tokens.iter().map(|&t| t as usize).collect();
            let rows = tape.gather(pv[self.layout.emb], idx);
            let placed = tape.scatter_add(rows, g.token_nodes.clone(), n);
            x = tape.add(x, placed);
        }
        if !g.value_nodes.is_empty() {
            let bits = tape.constant(value_bits(&g.values));
            let proj = tape.matmul(bits, pv[self.layout.val_w]);
            let proj = tape.add_row(proj, pv[self.layout.val_b]);
            let placed = tape.scatter_add(proj, g.value_nodes.clone(), n);
            x = tape.add(x, placed);
        }
        Ok(x)
    }

    /// Message passing; returns final node states and the attention
    /// coefficients of every (layer, edge type) as `edges × heads` tensors.
    pub fn gat_forward<'p>(&'p self, tape: &mut Tape<'p, T>, pv: &[Var], g: &GraphInput, x: Var) -> (Var, Vec<Var>) {
        let n = g.node_count;
        let h = self.config.node_dim;
        let leak = T::from_f64(0.2).unwrap();
        let mut state = x;
        let mut attention = Vec::new();
        for layer in &self.layout.layers {
            let consts = if layer.final_layer {
                &self.final_heads
            } else {
                &self.hidden_heads
            };
            let sum_c = tape.param(&consts.sum);
            let spread_c = tape.param(&consts.spread);
            let mut agg: Option<Var> = None;
            for (k, &[w, a_src, a_dst]) in layer.edge.iter().enumerate() {
                let (src, dst) = &g.edges[k];
                if src.is_empty() {
                    continue;
                }
                let z = tape.matmul(state, pv[w]);
                let zs = tape.gather(z, src.clone());
                let zd = tape.gather(z, dst.clone());
                let es = tape.mul_row(zs, pv[a_src]);
                let ed = tape.mul_row(zd, pv[a_dst]);
                let es = tape.matmul(es, sum_c);
                let ed = tape.matmul(ed, sum_c);
                let e = tape.add(es, ed);
                let e = tape.leaky_relu(e, leak);
                let alpha = tape.segment_softmax(e, dst.clone(), n);
                attention.push(alpha);
                let weights = tape.matmul(alpha, spread_c);
                let msg = tape.mul(zs, weights);
                let m = tape.scatter_add(msg, dst.clone(), n);
                agg = Some(match agg {
                    Some(a) => tape.add(a, m),
                    None => m,
                });
            }
            let m = match agg {
                Some(m) if layer.final_layer => {
                    let mean = tape.param(&self.head_mean);
                    tape.matmul(m, mean)
                }
                Some(m) => m,
                None => tape.constant(Mat::zeros((n, h))),
            };
            let a = tape.matmul(m, pv[layer.u_msg]);
            let b = tape.matmul(state, pv[layer.u_self]);
            let s = tape.add(a, b);
            let s = tape.add_row(s, pv[layer.bias]);
            state = tape.tanh(s);
        }
        (state, attention)
    }

    /// Depth-routed attention over task nodes: `MAX_DEPTH × h`, rows at or
    /// beyond `d` zero. Also returns the per-task-node weights.
    pub fn select_path<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        pv: &[Var],
        g: &GraphInput,
        out: Var,
    ) -> Result<(Var, Option<Var>), ModelError> {
        let h = self.config.node_dim;
        for depth in 0..g.d {
            if !g.task_depth.contains(&depth) {
                return Err(ModelError::EmptyDepth(depth + 1));
            }
        }
        if g.task_nodes.is_empty() {
            return Ok((tape.constant(Mat::zeros((MAX_DEPTH, h))), None));
        }
        let tasks = tape.gather(out, g.task_nodes.clone());
        let scores = tape.matmul(tasks, pv[self.layout.path_w]);
        let alpha = tape.segment_softmax(scores, g.task_depth.clone(), MAX_DEPTH);
        let weighted = tape.mul_col(tasks, alpha);
        let routed = tape.scatter_add(weighted, g.task_depth.clone(), MAX_DEPTH);
        Ok((routed, Some(alpha)))
    }

    /// Per-depth two-layer perceptron to 64 address-bit logits.
    pub fn predict_addresses<'p>(&'p self, tape: &mut Tape<'p, T>, pv: &[Var], depth_emb: Var) -> Var {
        let l = &self.layout;
        let a = tape.matmul(depth_emb, pv[l.w1]);
        let a = tape.add_row(a, pv[l.b1]);
        let a = tape.tanh(a);
        let o = tape.matmul(a, pv[l.w2]);
        tape.add_row(o, pv[l.b2])
    }

    /// Masked sigmoid cross-entropy summed over valid depths and all bits.
    pub fn loss<'p>(&'p self, tape: &mut Tape<'p, T>, logits: Var, labels: &[u64], d: usize) -> Var {
        tape.bce_with_logits(logits, label_bits(labels), d)
    }

    /// Runs the whole network; attaches the loss when labels are given.
    pub fn forward<'p>(&'p self, g: &GraphInput, labels: Option<&[u64]>) -> Result<Forward<'p, T>, ModelError> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape);
        let x = self.embed_nodes(&mut tape, &pv, g)?;
        let (node_emb, attention) = self.gat_forward(&mut tape, &pv, g, x);
        let (depth_emb, path_attention) = self.select_path(&mut tape, &pv, g, node_emb)?;
        let logits = self.predict_addresses(&mut tape, &pv, depth_emb);
        let loss = labels.map(|l| self.loss(&mut tape, logits, l, g.d));
        Ok(Forward {
            tape,
            params: pv,
            initial: x,
            node_emb,
            depth_emb,
            logits,
            loss,
            attention,
            path_attention,
            d: g.d,
        })
    }

    /// Loss and gradient per parameter tensor.
    pub fn loss_and_grad(&self, g: &GraphInput, labels: &[u64]) -> Result<(T, Vec<Mat<T>>), ModelError> {
        let f = self.forward(g, Some(labels))?;
        let loss = f.loss.expect("labels given");
        let mut grads = f.tape.backward(loss);
        let out = f
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Mat::zeros(p.raw_dim())))
            .collect();
        Ok((f.tape.scalar(loss), out))
    }

    /// Final node states only, skipping path selection and prediction.
    pub fn node_embeddings(&self, g: &GraphInput) -> Result<Mat<T>, ModelError> {
        let mut tape = Tape::new();
        let pv = self.bind(&mut tape);
        let x = self.embed_nodes(&mut tape, &pv, g)?;
        let (node_emb, _) = self.gat_forward(&mut tape, &pv, g, x);
        Ok(tape.value(node_emb).clone())
    }

    /// Predicted addresses for the valid depths.
    pub fn predict(&self, g: &GraphInput) -> Result<Vec<u64>, ModelError> {
        let f = self.forward(g, None)?;
        Ok(f.addresses())
    }

    /// Converts parameters to another scalar type (e.g. f32 for storage).
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |m: &Mat<T>| m.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap());
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(conv).collect(),
            names: self.names.clone(),
            layout: self.layout.clone(),
            hidden_heads: HeadConsts {
                sum: conv(&self.hidden_heads.sum),
                spread: conv(&self.hidden_heads.spread),
            },
            final_heads: HeadConsts {
                sum: conv(&self.final_heads.sum),
                spread: conv(&self.final_heads.spread),
            },
            head_mean: conv(&self.head_mean),
        }
    }
}

pub struct Forward<'p, T: Scalar> {
    pub tape: Tape<'p, T>,
    pub params: Vec<Var>,
    pub initial: Var,
    pub node_emb: Var,
    pub depth_emb: Var,
    pub logits: Var,
    pub loss: Option<Var>,
    pub attention: Vec<Var>,
    pub path_attention: Option<Var>,
    pub d: usize,
}

impl<T: Scalar> Forward<'_, T> {
    pub fn addresses(&self) -> Vec<u64> {
        let logits = self.tape.value(self.logits);
        (0..self.d)
            .map(|r| {
                (0..BITS).fold(0u64, |acc, b| {
                    if logits[[r, b]] > T::zero() {
                        acc | 1 << b
                    } else {
                        acc
                    }
                })
            })
            .collect()
    }

    pub fn loss_value(&self) -> Option<T> {
        self.loss.map(|l| self.tape.scalar(l))
    }
}

/// LSB-first bit expansion, one row per value.
pub fn value_bits<T: Scalar>(values: &[u64]) -> Mat<T> {
    Mat::from_shape_fn((values.len(), BITS), |(r, b)| {
        if values[r] >> b & 1 == 1 {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// `MAX_DEPTH × 64` target bits; rows past the labels are zero.
pub fn label_bits<T: Scalar>(labels: &[u64]) -> Mat<T> {
    let mut m = Mat::zeros((MAX_DEPTH, BITS));
    m.slice_mut(s![..labels.len(), ..]).assign(&value_bits::<T>(labels));
    m
}

/// Network input derived from a snapshot: node features and edge lists.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub node_count: usize,
    pub token_nodes: Arc<[usize]>,
    pub tokens: Vec<u16>,
    pub value_nodes: Arc<[usize]>,
    pub values: Vec<u64>,
    /// `(sources, destinations)` per edge kind.
    pub edges: Vec<(Arc<[usize]>, Arc<[usize]>)>,
    pub task_nodes: Arc<[usize]>,
    /// Zero-based depth of each task node.
    pub task_depth: Arc<[usize]>,
    pub d: usize,
}

impl GraphInput {
    pub fn new(s: &SnapshotStructure, init: &[NodeInit]) -> Self {
        let mut token_nodes = Vec::new();
        let mut tokens = Vec::new();
        let mut value_nodes = Vec::new();
        let mut values = Vec::new();
        for (i, v) in init.iter().enumerate() {
            match *v {
                NodeInit::Token(t) => {
                    token_nodes.push(i);
                    tokens.push(t);
                }
                NodeInit::Value(x) => {
                    value_nodes.push(i);
                    values.push(x);
                }
                NodeInit::Zero => {}
            }
        }
        let mut edges = vec![(Vec::new(), Vec::new()); EdgeKind::COUNT];
        for e in &s.edges {
            edges[e.kind.index()].0.push(e.src);
            edges[e.kind.index()].1.push(e.dst);
        }
        let task_nodes: Vec<usize> = s.depths.iter().map(|&(n, _)| n).collect();
        let task_depth: Vec<usize> = s.depths.iter().map(|&(_, d)| d as usize - 1).collect();
        GraphInput {
            node_count: s.nodes.len(),
            token_nodes: token_nodes.into(),
            tokens,
            value_nodes: value_nodes.into(),
            values,
            edges: edges.into_iter().map(|(a, b)| (a.into(), b.into())).collect(),
            task_nodes: task_nodes.into(),
            task_depth: task_depth.into(),
            d: s.d,
        }
    }

    pub fn from_snapshot(s: &GraphSnapshot) -> Self {
        Self::new(&s.structure, &s.init)
    }

    /// Same graph with nodes relabelled by `perm` (old id → new id).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let map = |v: &Arc<[usize]>| -> Arc<[usize]> { v.iter().map(|&i| perm[i]).collect() };
        GraphInput {
            node_count: self.node_count,
            token_nodes: map(&self.token_nodes),
            tokens: self.tokens.clone(),
            value_nodes: map(&self.value_nodes),
            values: self.values.clone(),
            edges: self.edges.iter().map(|(a, b)| (map(a), map(b))).collect(),
            task_nodes: map(&self.task_nodes),
            task_depth: self.task_depth.clone(),
            d: self.d,
        }
    }
}

/// One labelled training example.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: GraphInput,
    pub labels: Vec<u64>,
}

impl Example {
    pub fn from_snapshot(s: &GraphSnapshot) -> Option<Self> {
        s.is_trainable().then(|| Example {
            input: GraphInput::from_snapshot(s),
            labels: s.labels.clone(),
        })
    }
}

#[cfg(test)]
mod tests;
