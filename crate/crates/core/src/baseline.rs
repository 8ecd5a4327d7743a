//! Full self-attention encoder over the embedded sequence, the quadratic
//! comparator for the graph encoder.

use crate::embedding::NodeStates;
use crate::encoder::{EncoderConfig, FeedForwardBlock, RESIDUAL_INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Init, ParamId, ParamStore, Scalar, Tape, Var};

#[derive(Debug, Clone)]
pub struct BaselineLayer {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub out: ParamId,
    pub block: FeedForwardBlock,
}

/// Multi-head attention over all node pairs with the same residual and
/// feed-forward block as the graph encoder. Heads split the node width evenly.
#[derive(Debug, Clone)]
pub struct BaselineEncoder {
    pub cfg: EncoderConfig,
    pub layers: Vec<BaselineLayer>,
}

impl BaselineEncoder {
    pub fn head_dim(cfg: &EncoderConfig) -> usize {
        cfg.node_dim() / cfg.heads
    }

    pub fn register<F: Scalar>(store: &mut ParamStore<F>, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let big = cfg.node_dim();
        if big % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "node width {big} is not divisible by {} heads",
                cfg.heads
            )));
        }
        let dh = Self::head_dim(&cfg);
        let layers = (0..cfg.layers)
            .map(|l| {
                let prefix = format!("base.layer{l}");
                let mut heads = |tag: &str| -> Vec<ParamId> {
                    (0..cfg.heads)
                        .map(|h| store.register(format!("{prefix}.attn.{tag}{h}"), dh, big, Init::Xavier))
                        .collect()
                };
                let query = heads("q");
                let key = heads("k");
                let value = heads("v");
                let out = store.register(format!("{prefix}.attn.out"), big, big, Init::Normal(RESIDUAL_INIT_STD));
                let block = FeedForwardBlock::register(store, &prefix, big, cfg.ffn_dim);
                BaselineLayer {
                    query,
                    key,
                    value,
                    out,
                    block,
                }
            })
            .collect();
        Ok(Self { cfg, layers })
    }

    /// One layer; also returns the per-head `L x L` attention matrices.
    pub fn layer_forward<F: Scalar>(&self, tape: &mut Tape<'_, F>, l: usize, h: Var) -> (Var, Vec<Var>) {
        let layer = &self.layers[l];
        let scale = F::from_f64(1.0 / (Self::head_dim(&self.cfg) as f64).sqrt());
        let mut outs = Vec::with_capacity(self.cfg.heads);
        let mut maps = Vec::with_capacity(self.cfg.heads);
        for hd in 0..self.cfg.heads {
            let (wq, wk, wv) = (
                tape.param(layer.query[hd]),
                tape.param(layer.key[hd]),
                tape.param(layer.value[hd]),
            );
            let q = tape.linear(h, wq, None);
            let k = tape.linear(h, wk, None);
            let v = tape.linear(h, wv, None);
            let scores = tape.matmul_t(q, false, k, true);
            let scores = tape.scale(scores, scale);
            let a = tape.row_softmax(scores);
            outs.push(tape.matmul(a, v));
            maps.push(a);
        }
        let heads = tape.concat_cols(&outs);
        let wo = tape.param(layer.out);
        let attended = tape.linear(heads, wo, None);
        (layer.block.apply(tape, h, attended), maps)
    }

    pub fn encode<F: Scalar>(&self, tape: &mut Tape<'_, F>, ns: &NodeStates) -> Result<Var> {
        let (rows, cols) = tape.shape(ns.states);
        if cols != self.cfg.node_dim() {
            return Err(Error::Shape {
                op: "baseline encode",
                left: (rows, cols),
                right: (rows, self.cfg.node_dim()),
            });
        }
        let mut h = ns.states;
        for l in 0..self.layers.len() {
            h = self.layer_forward(tape, l, h).0;
        }
        Ok(h)
    }
}

/// Multiply-adds of the baseline for one sequence, counted like
/// [`crate::encoder::count_flops`].
pub fn count_flops_baseline(cfg: &EncoderConfig, seq_len: usize) -> u64 {
    let l = seq_len as u64;
    let big = cfg.node_dim() as u64;
    let projections = 4 * l * big * big;
    let attention = 2 * l * l * big;
    let ffn = 2 * l * big * cfg.ffn_dim as u64;
    cfg.layers as u64 * (projections + attention + ffn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{embed_sequence, EmbeddingConfig, EmbeddingTables, TimeEncoding};
    use crate::event::{BehaviorSequence, BehaviorType};

    fn setup(d: usize, layers: usize) -> (ParamStore<f64>, EmbeddingTables, EmbeddingConfig, BaselineEncoder) {
        let emb = EmbeddingConfig {
            d,
            item_vocab: 32,
            time_buckets: 32,
            max_positions: 512,
            time_encoding: TimeEncoding::Recency,
        };
        let mut store = ParamStore::new(3);
        let tables = EmbeddingTables::register(&mut store, &emb);
        let cfg = EncoderConfig {
            heads: 2,
            ffn_dim: 4 * 4 * d,
            ..EncoderConfig::new(d, layers)
        };
        let enc = BaselineEncoder::register(&mut store, cfg).unwrap();
        (store, tables, emb, enc)
    }

    fn seq(n: usize) -> BehaviorSequence {
        let mut s = BehaviorSequence::new();
        for i in 0..n as u64 {
            s.push(i % 7, i % 3, BehaviorType::ALL[(i % 4) as usize], 10 * i);
        }
        s
    }

    #[test]
    fn single_event_attends_to_itself() {
        let (store, tables, emb, enc) = setup(2, 1);
        let mut tape = Tape::new(&store);
        let ns = embed_sequence(&mut tape, &tables, &emb, &seq(1)).unwrap();
        let (out, maps) = enc.layer_forward(&mut tape, 0, ns.states);
        for m in maps {
            assert_eq!(tape.value(m).data(), &[1.0]);
        }
        assert_eq!(tape.shape(out), (1, 8));
    }

    #[test]
    fn rows_of_attention_sum_to_one() {
        let (store, tables, emb, enc) = setup(2, 1);
        let mut tape = Tape::new(&store);
        let ns = embed_sequence(&mut tape, &tables, &emb, &seq(9)).unwrap();
        let (_, maps) = enc.layer_forward(&mut tape, 0, ns.states);
        for m in maps {
            let a = tape.value(m);
            for r in 0..9 {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn names_and_shapes() {
        let (store, _, _, _) = setup(4, 2);
        assert_eq!(store.value(store.id("base.layer1.attn.q1").unwrap()).shape(), (8, 16));
        assert!(store.id("base.layer0.ffn.1.W").is_some());
        assert!(store.id("base.layer0.ln2.beta").is_some());
    }

    #[test]
    fn instrumented_count_matches_formula_and_grows_quadratically() {
        let (store, tables, emb, enc) = setup(2, 2);
        let mut counts = Vec::new();
        for n in [64, 128, 256] {
            let mut tape = Tape::new(&store);
            let ns = embed_sequence(&mut tape, &tables, &emb, &seq(n)).unwrap();
            tape.reset_flops();
            enc.encode(&mut tape, &ns).unwrap();
            assert_eq!(tape.flops(), count_flops_baseline(&enc.cfg, n));
            counts.push(tape.flops() as f64);
        }
        assert!(counts[2] / counts[1] > counts[1] / counts[0]);
        let big = count_flops_baseline(&enc.cfg, 1 << 16) as f64 / count_flops_baseline(&enc.cfg, 1 << 15) as f64;
        assert!(big > 3.9 && big < 4.0);
    }
}
