//! Query-conditioned sparse graph-transformer encoder with an expansion
//! head and a two-logit scoring head.
//!
//! Per layer, with `Q_i = W_Q h_i`, `K_i = W_K h_i`, `V_i = W_V h_i` and
//! edge modulation vectors `(E^K_e, E^V_e)` produced by an MLP over the
//! learned relation-type feature of edge `e`:
//!
//! ```text
//! a_e     = Q_dst . (K_src * E^K_e) / sqrt(d)
//! alpha_e = softmax of a_e over in-edges of dst
//! msg_e   = alpha_e * (V_src + E^V_e)
//! h'_i    = FFN(Norm(h_i + sum_e msg_e))
//! ```
//!
//! Attention runs only over the observed topology of the induced
//! subgraph; there is no virtual query node and no extra edges. Query
//! information enters through the node features instead, so nodes are
//! query-aware from the first message-passing layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::embed::{cosine, EmbeddingTable};
use crate::error::{Error, Result};
use crate::graph::{NodeId, RelId, SubgraphView};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDR1";
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    Add,
    Concat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GnnConfig {
    /// Node/query embedding dim as fed to the encoder (post-PCA).
    pub input_dim: usize,
    /// Hidden width `d`.
    pub hidden_dim: usize,
    /// Message-passing layers `L`.
    pub layers: usize,
    /// Relation vocabulary size; every edge needs a feature.
    pub n_relations: usize,
    pub injection: InjectionMode,
    /// Dropout rate on the FFN hidden layer during training.
    pub dropout: f64,
    /// Also attend along reversed edges.
    pub attn_reverse_edges: bool,
}

impl GnnConfig {
    fn fused_dim(&self) -> usize {
        match self.injection {
            InjectionMode::Add => self.input_dim,
            InjectionMode::Concat => 2 * self.input_dim + 1,
        }
    }

    fn head_in_dim(&self) -> usize {
        self.hidden_dim + self.input_dim
    }
}

/// Plain f32 matrix, the at-rest form of every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Mat {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| (rng.gen::<f64>() * 2.0 * a - a) as f32)
                .collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| x as f64).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Parameter structure, generic over the per-tensor payload so the same
/// shape describes f32 storage ([`Mat`]), tape bindings ([`TensorId`]),
/// and gradient/optimizer slots.
#[derive(Debug, Clone)]
pub struct ModelParamsG<T> {
    pub query_proj: T,
    pub input_proj: T,
    pub input_bias: T,
    pub rel_features: T,
    pub layers: Vec<LayerParamsG<T>>,
    pub expand_head: HeadParamsG<T>,
    pub score_head: HeadParamsG<T>,
}

#[derive(Debug, Clone)]
pub struct LayerParamsG<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub edge_w1: T,
    pub edge_b1: T,
    pub edge_wk: T,
    pub edge_bk: T,
    pub edge_wv: T,
    pub edge_bv: T,
    pub norm_gamma: T,
    pub norm_beta: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
}

#[derive(Debug, Clone)]
pub struct HeadParamsG<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> ModelParamsG<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParamsG<U> {
        ModelParamsG {
            query_proj: f(&self.query_proj),
            input_proj: f(&self.input_proj),
            input_bias: f(&self.input_bias),
            rel_features: f(&self.rel_features),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParamsG {
                    w_q: f(&l.w_q),
                    w_k: f(&l.w_k),
                    w_v: f(&l.w_v),
                    edge_w1: f(&l.edge_w1),
                    edge_b1: f(&l.edge_b1),
                    edge_wk: f(&l.edge_wk),
                    edge_bk: f(&l.edge_bk),
                    edge_wv: f(&l.edge_wv),
                    edge_bv: f(&l.edge_bv),
                    norm_gamma: f(&l.norm_gamma),
                    norm_beta: f(&l.norm_beta),
                    ffn_w1: f(&l.ffn_w1),
                    ffn_b1: f(&l.ffn_b1),
                    ffn_w2: f(&l.ffn_w2),
                    ffn_b2: f(&l.ffn_b2),
                })
                .collect(),
            expand_head: HeadParamsG {
                w1: f(&self.expand_head.w1),
                b1: f(&self.expand_head.b1),
                w2: f(&self.expand_head.w2),
                b2: f(&self.expand_head.b2),
            },
            score_head: HeadParamsG {
                w1: f(&self.score_head.w1),
                b1: f(&self.score_head.b1),
                w2: f(&self.score_head.w2),
                b2: f(&self.score_head.b2),
            },
        }
    }

    /// References to every tensor in a fixed declaration order.
    pub fn flatten(&self) -> Vec<&T> {
        let mut out = vec![
            &self.query_proj,
            &self.input_proj,
            &self.input_bias,
            &self.rel_features,
        ];
        for l in &self.layers {
            out.extend([
                &l.w_q, &l.w_k, &l.w_v, &l.edge_w1, &l.edge_b1, &l.edge_wk, &l.edge_bk,
                &l.edge_wv, &l.edge_bv, &l.norm_gamma, &l.norm_beta, &l.ffn_w1, &l.ffn_b1,
                &l.ffn_w2, &l.ffn_b2,
            ]);
        }
        for h in [&self.expand_head, &self.score_head] {
            out.extend([&h.w1, &h.b1, &h.w2, &h.b2]);
        }
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![
            &mut self.query_proj,
            &mut self.input_proj,
            &mut self.input_bias,
            &mut self.rel_features,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.w_q,
                &mut l.w_k,
                &mut l.w_v,
                &mut l.edge_w1,
                &mut l.edge_b1,
                &mut l.edge_wk,
                &mut l.edge_bk,
                &mut l.edge_wv,
                &mut l.edge_bv,
                &mut l.norm_gamma,
                &mut l.norm_beta,
                &mut l.ffn_w1,
                &mut l.ffn_b1,
                &mut l.ffn_w2,
                &mut l.ffn_b2,
            ]);
        }
        for h in [&mut self.expand_head, &mut self.score_head] {
            out.extend([&mut h.w1, &mut h.b1, &mut h.w2, &mut h.b2]);
        }
        out
    }

    /// Tensor names in `flatten` order.
    pub fn names(&self) -> Vec<String> {
        let mut out = vec![
            "query_proj".to_string(),
            "input_proj".to_string(),
            "input_bias".to_string(),
            "rel_features".to_string(),
        ];
        for (i, _) in self.layers.iter().enumerate() {
            for field in [
                "w_q", "w_k", "w_v", "edge_w1", "edge_b1", "edge_wk", "edge_bk", "edge_wv",
                "edge_bv", "norm_gamma", "norm_beta", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
            ] {
                out.push(format!("layer{i}.{field}"));
            }
        }
        for head in ["expand_head", "score_head"] {
            for field in ["w1", "b1", "w2", "b2"] {
                out.push(format!("{head}.{field}"));
            }
        }
        out
    }

    /// Rebuild the structure from items given in `flatten` order.
    pub fn from_flat<U: Clone>(&self, items: &[U]) -> ModelParamsG<U> {
        let mut it = items.iter().cloned();
        let mut next = move || it.next().expect("flat item count mismatch");
        ModelParamsG {
            query_proj: next(),
            input_proj: next(),
            input_bias: next(),
            rel_features: next(),
            layers: self
                .layers
                .iter()
                .map(|_| LayerParamsG {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                    edge_w1: next(),
                    edge_b1: next(),
                    edge_wk: next(),
                    edge_bk: next(),
                    edge_wv: next(),
                    edge_bv: next(),
                    norm_gamma: next(),
                    norm_beta: next(),
                    ffn_w1: next(),
                    ffn_b1: next(),
                    ffn_w2: next(),
                    ffn_b2: next(),
                })
                .collect(),
            expand_head: HeadParamsG {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            },
            score_head: HeadParamsG {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            },
        }
    }
}

pub type ModelParams = ModelParamsG<Mat>;

/// The full learned model: configuration plus parameter tensors.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: GnnConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: GnnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let din = config.input_dim;
        let layer = |rng: &mut ChaCha8Rng| LayerParamsG {
            w_q: Mat::xavier(d, d, rng),
            w_k: Mat::xavier(d, d, rng),
            w_v: Mat::xavier(d, d, rng),
            edge_w1: Mat::xavier(d, d, rng),
            edge_b1: Mat::zeros(1, d),
            edge_wk: Mat::xavier(d, d, rng),
            edge_bk: Mat::zeros(1, d),
            edge_wv: Mat::xavier(d, d, rng),
            edge_bv: Mat::zeros(1, d),
            norm_gamma: Mat::filled(1, d, 1.0),
            norm_beta: Mat::zeros(1, d),
            ffn_w1: Mat::xavier(d, 2 * d, rng),
            ffn_b1: Mat::zeros(1, 2 * d),
            ffn_w2: Mat::xavier(2 * d, d, rng),
            ffn_b2: Mat::zeros(1, d),
        };
        let head = |rng: &mut ChaCha8Rng, out: usize| HeadParamsG {
            w1: Mat::xavier(config.head_in_dim(), d, rng),
            b1: Mat::zeros(1, d),
            w2: Mat::xavier(d, out, rng),
            b2: Mat::zeros(1, out),
        };
        let params = ModelParamsG {
            query_proj: Mat::xavier(din, din, &mut rng),
            input_proj: Mat::xavier(config.fused_dim(), d, &mut rng),
            input_bias: Mat::zeros(1, d),
            rel_features: Mat::xavier(config.n_relations.max(1), d, &mut rng),
            layers: (0..config.layers).map(|_| layer(&mut rng)).collect(),
            expand_head: head(&mut rng, 1),
            score_head: head(&mut rng, 2),
        };
        Model { config, params }
    }

    pub fn n_parameters(&self) -> usize {
        self.params.flatten().iter().map(|m| m.len()).sum()
    }

    /// Bind all parameters onto a tape as leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ForwardCtx {
        let bound = self
            .params
            .map(&mut |m: &Mat| tape.leaf(m.to_tensor(), trainable));
        ForwardCtx {
            config: self.config.clone(),
            bound,
            dropout_rng: None,
            last_attention: Vec::new(),
        }
    }

    /// The query-fused input feature of one node: `z_v + W_q z_q` in add
    /// mode, or the concat fusion followed by the linear projection to the
    /// hidden width in concat mode.
    pub fn inject_query(&self, z_v: &[f32], z_q: &[f32]) -> Result<Vec<f32>> {
        let din = self.config.input_dim;
        if z_v.len() != din || z_q.len() != din {
            return Err(Error::Shape(format!(
                "inject_query: got dims {}/{}, expected {din}",
                z_v.len(),
                z_q.len()
            )));
        }
        let wq_zq = mat_vec_f32(&self.params.query_proj, z_q);
        match self.config.injection {
            InjectionMode::Add => Ok(z_v
                .iter()
                .zip(&wq_zq)
                .map(|(&a, &b)| a + b as f32)
                .collect()),
            InjectionMode::Concat => {
                let fused = fuse_concat(z_v, &wq_zq, cosine(z_v, z_q));
                let p = &self.params.input_proj;
                let mut out = vec![0.0f32; p.cols];
                for (r, &x) in fused.iter().enumerate() {
                    for c in 0..p.cols {
                        out[c] += x * p.data[r * p.cols + c];
                    }
                }
                for (c, o) in out.iter_mut().enumerate() {
                    *o += self.params.input_bias.data[c];
                }
                Ok(out)
            }
        }
    }

    /// Encode an induced subgraph (inference mode, detached values).
    pub fn encode(
        &self,
        view: &SubgraphView<'_>,
        z_q: &[f32],
        node_feats: &EmbeddingTable,
    ) -> Result<EncodedSubgraph> {
        let mut tape = Tape::new();
        let mut ctx = self.bind(&mut tape, false);
        let h = ctx.encode(
            &mut tape,
            view.members(),
            &view.induced_edges_local(),
            node_feats,
            z_q,
        )?;
        Ok(EncodedSubgraph {
            order: view.members().to_vec(),
            reps: tape.value(h).clone(),
        })
    }

    /// Expansion logits for frontier nodes of an encoded subgraph.
    pub fn policy_logits(
        &self,
        enc: &EncodedSubgraph,
        z_q: &[f32],
        frontier: &[NodeId],
    ) -> Result<BTreeMap<NodeId, f64>> {
        let local = enc.locate(frontier)?;
        let mut tape = Tape::new();
        let mut ctx = self.bind(&mut tape, false);
        let h = tape.constant(enc.reps.clone());
        let logits = ctx.policy_logits(&mut tape, h, z_q, &local)?;
        let vals = tape.value(logits);
        Ok(frontier
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, vals.data[i]))
            .collect())
    }

    /// Logit-difference relevance score per member node.
    pub fn node_scores(&self, enc: &EncodedSubgraph, z_q: &[f32]) -> Result<BTreeMap<NodeId, f64>> {
        let mut tape = Tape::new();
        let mut ctx = self.bind(&mut tape, false);
        let h = tape.constant(enc.reps.clone());
        let scores = ctx.node_scores(&mut tape, h, z_q)?;
        let vals = tape.value(scores);
        Ok(enc
            .order
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, vals.data[i]))
            .collect())
    }
}

/// Final per-node representations of one encoded subgraph.
#[derive(Debug, Clone)]
pub struct EncodedSubgraph {
    pub order: Vec<NodeId>,
    pub reps: Tensor,
}

impl EncodedSubgraph {
    fn locate(&self, nodes: &[NodeId]) -> Result<Vec<usize>> {
        nodes
            .iter()
            .map(|&v| {
                self.order.iter().position(|&o| o == v).ok_or_else(|| {
                    Error::Argument(format!("node {v} is not in the encoded subgraph"))
                })
            })
            .collect()
    }
}

/// One forward context: parameter bindings on a tape plus per-call state.
/// Multiple encodes may run on the same tape; they share the bindings, so
/// gradients accumulate across them on backward.
pub struct ForwardCtx {
    pub config: GnnConfig,
    pub bound: ModelParamsG<TensorId>,
    /// When set, dropout masks are drawn from this stream (training mode).
    pub dropout_rng: Option<ChaCha8Rng>,
    /// Attention weights of the most recent encode, one vec per layer,
    /// aligned with the attention edge list.
    pub last_attention: Vec<Vec<f64>>,
}

impl ForwardCtx {
    pub fn with_dropout(mut self, seed: u64) -> Self {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    /// Encode a node set with its induced (local-index) edge list.
    /// Returns the `n x d` final representations.
    pub fn encode(
        &mut self,
        tape: &mut Tape,
        members: &[NodeId],
        edges_local: &[(usize, RelId, usize)],
        node_feats: &EmbeddingTable,
        z_q: &[f32],
    ) -> Result<TensorId> {
        let n = members.len();
        if n == 0 {
            return Err(Error::Argument("cannot encode an empty subgraph".into()));
        }
        let din = self.config.input_dim;
        if node_feats.dim() != din || z_q.len() != din {
            return Err(Error::Shape(format!(
                "encode: feature dim {} / query dim {} vs configured {din}",
                node_feats.dim(),
                z_q.len()
            )));
        }
        for &(_, rel, _) in edges_local {
            if rel >= self.config.n_relations {
                return Err(Error::Config(format!(
                    "edge relation {rel} has no feature (vocabulary size {})",
                    self.config.n_relations
                )));
            }
        }

        // fused input features
        let feats = Tensor::from_rows_f32(
            &members
                .iter()
                .map(|&v| node_feats.row(v))
                .collect::<Vec<_>>(),
        );
        let x0 = tape.constant(feats);
        let zq_t = tape.constant(Tensor::new(
            1,
            din,
            z_q.iter().map(|&x| x as f64).collect(),
        ));
        let zq_proj = tape.matmul(zq_t, self.bound.query_proj)?;
        let zq_rows = tape.broadcast_rows(zq_proj, n)?;
        let fused = match self.config.injection {
            InjectionMode::Add => tape.add(x0, zq_rows)?,
            InjectionMode::Concat => {
                let cos_col = Tensor::new(
                    n,
                    1,
                    members
                        .iter()
                        .map(|&v| cosine(node_feats.row(v), z_q))
                        .collect(),
                );
                let cos_id = tape.constant(cos_col);
                let cat = tape.concat_cols(x0, zq_rows)?;
                tape.concat_cols(cat, cos_id)?
            }
        };
        let mut h = tape.matmul(fused, self.bound.input_proj)?;
        h = tape.add(h, self.bound.input_bias)?;

        // attention topology: in-edges, optionally plus reversed edges
        let mut attn_edges: Vec<(usize, RelId, usize)> = edges_local.to_vec();
        if self.config.attn_reverse_edges {
            attn_edges.extend(edges_local.iter().map(|&(s, r, d)| (d, r, s)));
        }
        let src: Vec<usize> = attn_edges.iter().map(|e| e.0).collect();
        let rel: Vec<usize> = attn_edges.iter().map(|e| e.1).collect();
        let dst: Vec<usize> = attn_edges.iter().map(|e| e.2).collect();
        let inv_sqrt_d = 1.0 / (self.config.hidden_dim as f64).sqrt();

        self.last_attention.clear();
        let layer_bounds = self.bound.layers.clone();
        for lp in &layer_bounds {
            let q = tape.matmul(h, lp.w_q)?;
            let k = tape.matmul(h, lp.w_k)?;
            let v = tape.matmul(h, lp.w_v)?;

            let e_feat = tape.gather_rows(self.bound.rel_features, &rel)?;
            let mut eh = tape.matmul(e_feat, lp.edge_w1)?;
            eh = tape.add(eh, lp.edge_b1)?;
            eh = tape.relu(eh);
            let mut ek = tape.matmul(eh, lp.edge_wk)?;
            ek = tape.add(ek, lp.edge_bk)?;
            let mut ev = tape.matmul(eh, lp.edge_wv)?;
            ev = tape.add(ev, lp.edge_bv)?;

            let k_src = tape.gather_rows(k, &src)?;
            let q_dst = tape.gather_rows(q, &dst)?;
            let v_src = tape.gather_rows(v, &src)?;

            let km = tape.mul(k_src, ek)?;
            let qk = tape.mul(q_dst, km)?;
            let a = tape.row_sum(qk);
            let a = tape.scale(a, inv_sqrt_d);
            let alpha = tape.segment_softmax(a, &dst)?;
            self.last_attention.push(tape.value(alpha).data.clone());

            let vm = tape.add(v_src, ev)?;
            let msg = tape.mul(vm, alpha)?;
            let agg = tape.segment_sum(msg, &dst, n)?;

            let res = tape.add(h, agg)?;
            let normed = tape.layer_norm(res, lp.norm_gamma, lp.norm_beta, LAYER_NORM_EPS)?;
            let mut ffn = tape.matmul(normed, lp.ffn_w1)?;
            ffn = tape.add(ffn, lp.ffn_b1)?;
            ffn = tape.relu(ffn);
            if self.config.dropout > 0.0 {
                if let Some(rng) = self.dropout_rng.as_mut() {
                    let mask =
                        Tape::dropout_mask(n, 2 * self.config.hidden_dim, self.config.dropout, rng);
                    let mask_id = tape.constant(mask);
                    ffn = tape.mul(ffn, mask_id)?;
                }
            }
            let mut out = tape.matmul(ffn, lp.ffn_w2)?;
            out = tape.add(out, lp.ffn_b2)?;
            h = out;
        }
        Ok(h)
    }

    fn head_forward(
        &self,
        tape: &mut Tape,
        head: &HeadParamsG<TensorId>,
        h: TensorId,
        z_q: &[f32],
    ) -> Result<TensorId> {
        let n = tape.value(h).rows;
        let zq_t = tape.constant(Tensor::new(
            1,
            z_q.len(),
            z_q.iter().map(|&x| x as f64).collect(),
        ));
        let zq_proj = tape.matmul(zq_t, self.bound.query_proj)?;
        let zq_rows = tape.broadcast_rows(zq_proj, n)?;
        let inp = tape.concat_cols(h, zq_rows)?;
        let mut hh = tape.matmul(inp, head.w1)?;
        hh = tape.add(hh, head.b1)?;
        hh = tape.relu(hh);
        let mut out = tape.matmul(hh, head.w2)?;
        out = tape.add(out, head.b2)?;
        Ok(out)
    }

    /// Expansion logits, one per frontier row (local indexes into the
    /// encoded node order). Output is `|frontier| x 1`.
    pub fn policy_logits(
        &mut self,
        tape: &mut Tape,
        h: TensorId,
        z_q: &[f32],
        frontier_local: &[usize],
    ) -> Result<TensorId> {
        let n = tape.value(h).rows;
        if let Some(&bad) = frontier_local.iter().find(|&&i| i >= n) {
            return Err(Error::Argument(format!(
                "frontier index {bad} outside encoded subgraph of {n} nodes"
            )));
        }
        let head = self.bound.expand_head.clone();
        let logits_all = self.head_forward(tape, &head, h, z_q)?;
        tape.gather_rows(logits_all, frontier_local)
    }

    /// Logit-difference scores, `n x 1`: `logit(v, 1) - logit(v, 0)`.
    pub fn node_scores(&mut self, tape: &mut Tape, h: TensorId, z_q: &[f32]) -> Result<TensorId> {
        let head = self.bound.score_head.clone();
        let two = self.head_forward(tape, &head, h, z_q)?;
        let diff = tape.constant(Tensor::new(2, 1, vec![-1.0, 1.0]));
        tape.matmul(two, diff)
    }

    /// Pull gradients for every bound parameter off the tape, scaled, into
    /// a flat accumulator aligned with `ModelParamsG::flatten` order.
    pub fn accumulate_grads(&self, tape: &Tape, acc: &mut [Vec<f64>], scale: f64) {
        let ids = self.bound.flatten();
        assert_eq!(ids.len(), acc.len());
        for (slot, &&id) in acc.iter_mut().zip(ids.iter()) {
            if let Some(g) = tape.grad(id) {
                for (s, &x) in slot.iter_mut().zip(g) {
                    *s += scale * x;
                }
            }
        }
    }
}

fn mat_vec_f32(m: &Mat, v: &[f32]) -> Vec<f64> {
    // v is a row vector: out = v . m  (1 x rows  times  rows x cols)
    let mut out = vec![0.0f64; m.cols];
    for (r, &x) in v.iter().enumerate() {
        for c in 0..m.cols {
            out[c] += x as f64 * m.data[r * m.cols + c] as f64;
        }
    }
    out
}

fn fuse_concat(z_v: &[f32], wq_zq: &[f64], cos: f64) -> Vec<f32> {
    let mut fused: Vec<f32> = Vec::with_capacity(2 * z_v.len() + 1);
    fused.extend_from_slice(z_v);
    fused.extend(wq_zq.iter().map(|&x| x as f32));
    fused.push(cos as f32);
    fused
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "SDR1", u32 config-JSON length, config JSON,
// u32 tensor count, then per tensor u32 name length, name, u32 rows,
// u32 cols, f32 data.
// ---------------------------------------------------------------------------

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let cfg = serde_json::to_vec(&model.config)?;
    let mats = model.params.flatten();
    let names = model.params.names();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&cfg);
    bytes.extend_from_slice(&(mats.len() as u32).to_le_bytes());
    for (name, mat) in names.iter().zip(&mats) {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(mat.rows as u32).to_le_bytes());
        bytes.extend_from_slice(&(mat.cols as u32).to_le_bytes());
        for x in &mat.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let mut off = 0usize;
    fn take<'a>(bytes: &'a [u8], off: &mut usize, n: usize, path: &Path) -> Result<&'a [u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated checkpoint",
                path.display()
            )));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    }
    fn read_u32(bytes: &[u8], off: &mut usize, path: &Path) -> Result<u32> {
        Ok(u32::from_le_bytes(
            take(bytes, off, 4, path)?.try_into().unwrap(),
        ))
    }

    if take(&bytes, &mut off, 4, path)? != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{}: missing SDR1 magic",
            path.display()
        )));
    }
    let cfg_len = read_u32(&bytes, &mut off, path)? as usize;
    let config: GnnConfig = serde_json::from_slice(take(&bytes, &mut off, cfg_len, path)?)?;
    let mut model = Model::init(config, 0);

    let n_tensors = read_u32(&bytes, &mut off, path)? as usize;
    let names = model.params.names();
    if n_tensors != names.len() {
        return Err(Error::Format(format!(
            "{}: checkpoint has {n_tensors} tensors, config implies {}",
            path.display(),
            names.len()
        )));
    }
    let mut mats = model.params.flatten_mut();
    for (expect_name, slot) in names.iter().zip(mats.iter_mut()) {
        let name_len = read_u32(&bytes, &mut off, path)? as usize;
        let name = String::from_utf8_lossy(take(&bytes, &mut off, name_len, path)?).to_string();
        if &name != expect_name {
            return Err(Error::Format(format!(
                "{}: tensor {name:?} where {expect_name:?} expected",
                path.display()
            )));
        }
        let rows = read_u32(&bytes, &mut off, path)? as usize;
        let cols = read_u32(&bytes, &mut off, path)? as usize;
        if rows != slot.rows || cols != slot.cols {
            return Err(Error::Format(format!(
                "{}: tensor {name:?} is {rows}x{cols}, config implies {}x{}",
                path.display(),
                slot.rows,
                slot.cols
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in take(&bytes, &mut off, 4 * rows * cols, path)?.chunks_exact(4) {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !x.is_finite() {
                return Err(Error::Data(format!(
                    "{}: non-finite value in tensor {name:?}",
                    path.display()
                )));
            }
            data.push(x);
        }
        slot.data = data;
    }
    if off != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - off
        )));
    }
    Ok(model)
}
