//! Transition-aware graph attention encoder.
//!
//! Each layer turns every filled adjacency slot of a node into a `d`-wide
//! message with a weight chosen by (view, direction, behavior pair), attends
//! over those messages from the node's own state, and finishes with the usual
//! residual, layer norm and feed-forward block. Slots of one sequence are
//! batched: edge inputs are gathered into rows sorted by transition type so
//! each type is a single matrix product.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::NodeStates;
use crate::error::{Error, Result};
use crate::event::{BehaviorType, NUM_BEHAVIORS};
use crate::graph::{Direction, TransitionEdge, TransitionGraph, TransitionView, NUM_SLOTS, NUM_VIEWS};
use crate::numerics::{HeadSpec, Init, Matrix, ParamId, ParamStore, RowGroup, Scalar, Segments, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Per-field embedding width; node states are `4d` wide.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Hidden width of the feed-forward block.
    pub ffn_dim: usize,
    /// Divide attention logits by `sqrt(key_dim)`.
    pub scale_logits: bool,
    /// One set of transition weights for all three views.
    pub share_across_views: bool,
}

impl EncoderConfig {
    pub fn new(d: usize, layers: usize) -> Self {
        Self {
            d,
            layers,
            heads: 4,
            key_dim: 16,
            value_dim: 16,
            ffn_dim: 16 * d,
            scale_logits: true,
            share_across_views: false,
        }
    }

    pub fn node_dim(&self) -> usize {
        4 * self.d
    }

    /// Width of a transition input: both endpoint states plus the time and position deltas.
    pub fn edge_input_dim(&self) -> usize {
        2 * self.node_dim() + 2 * self.d
    }

    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            heads: self.heads,
            key_dim: self.key_dim,
            value_dim: self.value_dim,
            scale: if self.scale_logits {
                1.0 / (self.key_dim as f64).sqrt()
            } else {
                1.0
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d, self.layers, self.heads, self.key_dim, self.value_dim, self.ffn_dim];
        if dims.contains(&0) {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    fn transition_types(&self) -> usize {
        let views = if self.share_across_views { 1 } else { NUM_VIEWS };
        views * 2 * NUM_BEHAVIORS * NUM_BEHAVIORS
    }

    fn transition_key(&self, view: TransitionView, dir: Direction, src: BehaviorType, dst: BehaviorType) -> usize {
        let v = if self.share_across_views { 0 } else { view.index() };
        ((v * 2 + dir as usize) * NUM_BEHAVIORS + src.code()) * NUM_BEHAVIORS + dst.code()
    }
}

/// Init std of the matrices that write into the residual stream (attention
/// output and second FFN layer). Small values start every layer close to
/// the identity, which keeps item identity readable through stacked layers.
pub const RESIDUAL_INIT_STD: f64 = 0.02;

/// Residual, layer norm and feed-forward tail shared by both encoders:
/// `e' = LN(h + a)`, `out = LN(e' + W2 relu(W1 e' + b1) + b2)`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForwardBlock {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

impl FeedForwardBlock {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, width: usize, hidden: usize) -> Self {
        Self {
            w1: store.register(format!("{prefix}.ffn.1.W"), hidden, width, Init::Xavier),
            b1: store.register(format!("{prefix}.ffn.1.b"), 1, hidden, Init::Zeros),
            w2: store.register(format!("{prefix}.ffn.2.W"), width, hidden, Init::Normal(RESIDUAL_INIT_STD)),
            b2: store.register(format!("{prefix}.ffn.2.b"), 1, width, Init::Zeros),
            ln1_gamma: store.register(format!("{prefix}.ln1.gamma"), 1, width, Init::Ones),
            ln1_beta: store.register(format!("{prefix}.ln1.beta"), 1, width, Init::Zeros),
            ln2_gamma: store.register(format!("{prefix}.ln2.gamma"), 1, width, Init::Ones),
            ln2_beta: store.register(format!("{prefix}.ln2.beta"), 1, width, Init::Zeros),
        }
    }

    pub fn apply<F: Scalar>(&self, tape: &mut Tape<'_, F>, h: Var, attended: Var) -> Var {
        let res = tape.add(h, attended);
        let (g1, be1) = (tape.param(self.ln1_gamma), tape.param(self.ln1_beta));
        let e = tape.layer_norm(res, g1, be1);
        let (w1, b1) = (tape.param(self.w1), tape.param(self.b1));
        let hidden = tape.linear(e, w1, Some(b1));
        let hidden = tape.relu(hidden);
        let (w2, b2) = (tape.param(self.w2), tape.param(self.b2));
        let ff = tape.linear(hidden, w2, Some(b2));
        let res2 = tape.add(e, ff);
        let (g2, be2) = (tape.param(self.ln2_gamma), tape.param(self.ln2_beta));
        tape.layer_norm(res2, g2, be2)
    }
}

/// Parameters of one encoder layer.
#[derive(Debug, Clone)]
pub struct LayerParams {
    /// Weight and bias per transition type, indexed by the config's transition key.
    pub transitions: Vec<(ParamId, ParamId)>,
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub out: ParamId,
    pub block: FeedForwardBlock,
}

impl LayerParams {
    fn register<F: Scalar>(store: &mut ParamStore<F>, cfg: &EncoderConfig, layer: usize) -> Self {
        let (d, big) = (cfg.d, cfg.node_dim());
        let mut transitions = Vec::with_capacity(cfg.transition_types());
        let views: Vec<&str> = if cfg.share_across_views {
            vec!["shared"]
        } else {
            TransitionView::ALL.iter().map(|v| v.as_str()).collect()
        };
        // Registration order must follow `transition_key`.
        for view in views {
            for dir in Direction::ALL {
                for src in BehaviorType::ALL {
                    for dst in BehaviorType::ALL {
                        let name = format!("layer{layer}.trans.{view}.{}.{src}->{dst}", dir.as_str());
                        let w = store.register(format!("{name}.W"), d, cfg.edge_input_dim(), Init::Xavier);
                        let b = store.register(format!("{name}.b"), 1, d, Init::Zeros);
                        transitions.push((w, b));
                    }
                }
            }
        }
        let heads = |store: &mut ParamStore<F>, tag: &str, rows: usize, cols: usize| -> Vec<ParamId> {
            (0..cfg.heads)
                .map(|h| store.register(format!("layer{layer}.attn.{tag}{h}"), rows, cols, Init::Xavier))
                .collect()
        };
        let query = heads(store, "q", cfg.key_dim, big);
        let key = heads(store, "k", cfg.key_dim, d);
        let value = heads(store, "v", cfg.value_dim, d);
        let out = store.register(
            format!("layer{layer}.attn.out"),
            big,
            cfg.heads * cfg.value_dim,
            Init::Normal(RESIDUAL_INIT_STD),
        );
        let block = FeedForwardBlock::register(store, &format!("layer{layer}"), big, cfg.ffn_dim);
        Self {
            transitions,
            query,
            key,
            value,
            out,
            block,
        }
    }
}

/// Slot layout of one graph, shared by every layer.
#[derive(Debug, Clone)]
pub struct GraphPlan {
    num_nodes: usize,
    /// Edge source and destination per slot row.
    src: Arc<Vec<usize>>,
    dst: Arc<Vec<usize>>,
    /// `(transition key, first row, end row)` for every non-empty type.
    groups: Vec<(usize, usize, usize)>,
    /// Slot rows of each node in adjacency order.
    segments: Arc<Segments>,
}

impl GraphPlan {
    pub fn new(graph: &TransitionGraph, cfg: &EncoderConfig) -> Self {
        let n = graph.num_nodes();
        let mut keyed = Vec::with_capacity(n * NUM_SLOTS);
        for node in 0..n {
            for (k, slot) in graph.slots_unchecked(node).enumerate() {
                let key = cfg.transition_key(slot.view, slot.direction, slot.src_behavior, slot.dst_behavior);
                keyed.push((key, node, k, slot.edge));
            }
        }
        // Stable in node order within each key.
        keyed.sort_by_key(|&(key, node, k, _)| (key, node, k));
        let edges = graph.edges();
        let mut src = Vec::with_capacity(keyed.len());
        let mut dst = Vec::with_capacity(keyed.len());
        let mut groups: Vec<(usize, usize, usize)> = Vec::new();
        let mut lists = vec![Vec::new(); n];
        for (row, &(key, node, k, edge)) in keyed.iter().enumerate() {
            src.push(edges[edge].src);
            dst.push(edges[edge].dst);
            match groups.last_mut() {
                Some(g) if g.0 == key => g.2 = row + 1,
                _ => groups.push((key, row, row + 1)),
            }
            let list: &mut Vec<(usize, usize)> = &mut lists[node];
            list.push((k, row));
        }
        let lists: Vec<Vec<usize>> = lists
            .into_iter()
            .map(|mut l| {
                l.sort_unstable();
                l.into_iter().map(|(_, row)| row).collect()
            })
            .collect();
        Self {
            num_nodes: n,
            src: Arc::new(src),
            dst: Arc::new(dst),
            groups,
            segments: Arc::new(Segments::from_lists(&lists)),
        }
    }

    pub fn num_slots(&self) -> usize {
        self.src.len()
    }

    /// Rows of the message matrix belonging to `node`, in adjacency order.
    pub fn node_rows(&self, node: usize) -> &[usize] {
        self.segments.segment(node)
    }
}

/// Intermediate values of one layer, kept for inspection.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    pub input: Var,
    /// `slots x 10d` rows `[h_src, h_dst, dt, dp]` fed to the transition maps.
    pub edge_input: Var,
    /// `slots x d` transition outputs.
    pub messages: Var,
    /// Attention output before the residual (`L x 4d`).
    pub attended: Var,
    pub attention: Var,
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct TgaEncoder {
    pub cfg: EncoderConfig,
    pub layers: Vec<LayerParams>,
}

impl TgaEncoder {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers).map(|l| LayerParams::register(store, &cfg, l)).collect();
        Ok(Self { cfg, layers })
    }

    /// Time and position deltas per slot row; constant across layers.
    fn deltas<F: Scalar>(&self, tape: &mut Tape<'_, F>, ns: &NodeStates, plan: &GraphPlan) -> Var {
        let t_src = tape.gather_rows(ns.time, plan.src.clone());
        let t_dst = tape.gather_rows(ns.time, plan.dst.clone());
        let p_src = tape.gather_rows(ns.position, plan.src.clone());
        let p_dst = tape.gather_rows(ns.position, plan.dst.clone());
        let dt = tape.sub(t_dst, t_src);
        let dp = tape.sub(p_dst, p_src);
        tape.concat_cols(&[dt, dp])
    }

    /// Edge inputs and transition messages (`slots x d`) for every slot row.
    fn messages<F: Scalar>(&self, tape: &mut Tape<'_, F>, l: usize, h: Var, deltas: Var, plan: &GraphPlan) -> (Var, Var) {
        let layer = &self.layers[l];
        let h_src = tape.gather_rows(h, plan.src.clone());
        let h_dst = tape.gather_rows(h, plan.dst.clone());
        let x = tape.concat_cols(&[h_src, h_dst, deltas]);
        let groups = plan
            .groups
            .iter()
            .map(|&(key, start, end)| {
                let (w, b) = layer.transitions[key];
                RowGroup {
                    start,
                    end,
                    weight: tape.param(w),
                    bias: tape.param(b),
                }
            })
            .collect::<Vec<_>>();
        if groups.is_empty() {
            let w = tape.param(layer.transitions[0].0);
            // No slots at all: an empty product keeps the output shape `0 x d`.
            return (x, tape.linear(x, w, None));
        }
        (x, tape.grouped_linear(x, groups))
    }

    fn stacked<F: Scalar>(tape: &mut Tape<'_, F>, ids: &[ParamId]) -> Var {
        let parts: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
        tape.concat_rows(&parts)
    }

    /// One layer over all nodes.
    pub fn graph_attention<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        l: usize,
        h: Var,
        deltas: Var,
        plan: &GraphPlan,
    ) -> LayerTrace {
        let layer = &self.layers[l];
        let (edge_input, messages) = self.messages(tape, l, h, deltas, plan);
        let wq = Self::stacked(tape, &layer.query);
        let wk = Self::stacked(tape, &layer.key);
        let wv = Self::stacked(tape, &layer.value);
        let q = tape.linear(h, wq, None);
        let k = tape.linear(messages, wk, None);
        let v = tape.linear(messages, wv, None);
        let attention = tape.segment_attention(q, k, v, plan.segments.clone(), self.cfg.head_spec());
        let wo = tape.param(layer.out);
        let attended = tape.linear(attention, wo, None);
        let output = layer.block.apply(tape, h, attended);
        LayerTrace {
            input: h,
            edge_input,
            messages,
            attended,
            attention,
            output,
        }
    }

    /// Runs every layer over the same graph and side embeddings.
    pub fn encode<F: Scalar>(&self, tape: &mut Tape<'_, F>, ns: &NodeStates, graph: &TransitionGraph) -> Result<Var> {
        Ok(self.encode_traced(tape, ns, graph)?.last().map_or(ns.states, |t| t.output))
    }

    pub fn encode_traced<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        ns: &NodeStates,
        graph: &TransitionGraph,
    ) -> Result<Vec<LayerTrace>> {
        let big = self.cfg.node_dim();
        if tape.shape(ns.states) != (graph.num_nodes(), big) {
            return Err(Error::Shape {
                op: "encode",
                left: tape.shape(ns.states),
                right: (graph.num_nodes(), big),
            });
        }
        let plan = GraphPlan::new(graph, &self.cfg);
        let deltas = self.deltas(tape, ns, &plan);
        let mut h = ns.states;
        let mut traces = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let t = self.graph_attention(tape, l, h, deltas, &plan);
            debug_assert_eq!(tape.shape(t.output), (plan.num_nodes, big));
            h = t.output;
            traces.push(t);
        }
        Ok(traces)
    }
}

impl TgaEncoder {
    /// Weights of `head` at `node` over its filled slots, in adjacency order.
    pub fn node_attention<F: Scalar>(
        &self,
        tape: &Tape<'_, F>,
        trace: &LayerTrace,
        plan: &GraphPlan,
        node: usize,
        head: usize,
    ) -> Vec<F> {
        let weights = tape.attention_weights(trace.attention).expect("trace attention is a segment attention");
        plan.segments
            .range(node)
            .map(|slot| weights[slot * self.cfg.heads + head])
            .collect()
    }
}

/// One transition message computed directly from value matrices.
pub fn edge_transform<F: Scalar>(
    store: &ParamStore<F>,
    encoder: &TgaEncoder,
    layer: usize,
    states: &Matrix<F>,
    time: &Matrix<F>,
    position: &Matrix<F>,
    edge: &TransitionEdge,
    direction: Direction,
) -> Vec<F> {
    let key = encoder
        .cfg
        .transition_key(edge.view, direction, edge.src_behavior, edge.dst_behavior);
    let (w, b) = encoder.layers[layer].transitions[key];
    let mut x = Vec::with_capacity(encoder.cfg.edge_input_dim());
    x.extend_from_slice(states.row(edge.src));
    x.extend_from_slice(states.row(edge.dst));
    x.extend(time.row(edge.dst).iter().zip(time.row(edge.src)).map(|(&a, &b)| a - b));
    x.extend(position.row(edge.dst).iter().zip(position.row(edge.src)).map(|(&a, &b)| a - b));
    let w = store.value(w);
    let b = store.value(b);
    (0..w.rows())
        .map(|r| w.row(r).iter().zip(&x).fold(b.data()[r], |acc, (&wi, &xi)| acc + wi * xi))
        .collect()
}

/// Transition messages of every filled slot of `node`, in adjacency order.
#[allow(clippy::too_many_arguments)]
pub fn neighbor_set<F: Scalar>(
    store: &ParamStore<F>,
    encoder: &TgaEncoder,
    layer: usize,
    states: &Matrix<F>,
    time: &Matrix<F>,
    position: &Matrix<F>,
    graph: &TransitionGraph,
    node: usize,
) -> Result<Vec<Vec<F>>> {
    Ok(graph
        .neighbor_slots(node)?
        .iter()
        .map(|s| {
            let edge = &graph.edges()[s.edge];
            edge_transform(store, encoder, layer, states, time, position, edge, s.direction)
        })
        .collect())
}

/// Multiply-adds of the encoder for a sequence whose nodes all have six
/// filled slots. Only matrix products and attention are counted; gathers,
/// normalization and activations are ignored.
pub fn count_flops(cfg: &EncoderConfig, seq_len: usize) -> u64 {
    count_flops_for_slots(cfg, seq_len, NUM_SLOTS * seq_len)
}

/// As [`count_flops`] with an explicit number of filled slots.
pub fn count_flops_for_slots(cfg: &EncoderConfig, seq_len: usize, slots: usize) -> u64 {
    let (l, s) = (seq_len as u64, slots as u64);
    let d = cfg.d as u64;
    let big = cfg.node_dim() as u64;
    let (k, dk, dv, ff) = (cfg.heads as u64, cfg.key_dim as u64, cfg.value_dim as u64, cfg.ffn_dim as u64);
    let edges = s * cfg.edge_input_dim() as u64 * d;
    let projections = l * big * k * dk + s * d * k * (dk + dv);
    let attention = s * k * (dk + dv);
    let output = l * k * dv * big;
    let ffn = 2 * l * big * ff;
    cfg.layers as u64 * (edges + projections + attention + output + ffn)
}
