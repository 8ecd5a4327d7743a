//! Candidate scoring: dot-product target attention over the encoded sequence,
//! then an MLP over profile, candidate and attended context.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::EMBEDDING_INIT_STD;
use crate::error::{Error, Result};
use crate::event::{hash_bucket, Candidate};
use crate::numerics::{Init, Matrix, ParamId, ParamStore, Scalar, Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub d: usize,
    pub profile_dim: usize,
    pub category_vocab: usize,
    pub item_vocab: usize,
    /// Hidden widths of the MLP; a final width-1 layer is appended.
    pub hidden: Vec<usize>,
}

impl HeadConfig {
    pub fn node_dim(&self) -> usize {
        4 * self.d
    }

    pub fn candidate_dim(&self) -> usize {
        2 * self.d
    }

    pub fn mlp_input_dim(&self) -> usize {
        self.profile_dim + self.candidate_dim() + self.node_dim()
    }
}

#[derive(Debug, Clone)]
pub struct PredictionHead {
    pub cfg: HeadConfig,
    pub category: ParamId,
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    /// `(W, b)` per MLP layer; the last one has a single output.
    pub mlp: Vec<(ParamId, ParamId)>,
}

/// Outputs of one scoring pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub logit: Var,
    pub context: Var,
    /// `1 x L` target attention weights.
    pub weights: Var,
}

impl PredictionHead {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, cfg: HeadConfig) -> Self {
        let big = cfg.node_dim();
        let category = store.register(
            "head.emb.category",
            cfg.category_vocab,
            cfg.d,
            Init::Normal(EMBEDDING_INIT_STD),
        );
        let query_w = store.register("head.query.W", big, cfg.candidate_dim(), Init::Xavier);
        let query_b = store.register("head.query.b", 1, big, Init::Zeros);
        let key = store.register("head.key.W", big, big, Init::Xavier);
        let value = store.register("head.value.W", big, big, Init::Xavier);
        let mut mlp = Vec::new();
        let mut width = cfg.mlp_input_dim();
        for (i, &out) in cfg.hidden.iter().chain(std::iter::once(&1)).enumerate() {
            let w = store.register(format!("head.mlp.{}.W", i + 1), out, width, Init::Xavier);
            let b = store.register(format!("head.mlp.{}.b", i + 1), 1, out, Init::Zeros);
            mlp.push((w, b));
            width = out;
        }
        Self {
            cfg,
            category,
            query_w,
            query_b,
            key,
            value,
            mlp,
        }
    }

    /// `[item embedding, category embedding]` of the candidate (`1 x 2d`).
    pub fn candidate<F: Scalar>(&self, tape: &mut Tape<'_, F>, item_table: ParamId, cand: &Candidate) -> Var {
        let items = tape.param(item_table);
        let cats = tape.param(self.category);
        let item = tape.gather_rows(items, Arc::new(vec![hash_bucket(cand.item, self.cfg.item_vocab)]));
        let cat = tape.gather_rows(cats, Arc::new(vec![hash_bucket(cand.cat, self.cfg.category_vocab)]));
        tape.concat_cols(&[item, cat])
    }

    /// Softmax over all encoded rows of `key_n . query / sqrt(4d)`, then the
    /// weighted sum of value rows. An empty sequence gives a zero context.
    /// Returns the `1 x 4d` context and the `1 x L` weights.
    pub fn target_attention<F: Scalar>(&self, tape: &mut Tape<'_, F>, encoded: Var, query: Var) -> (Var, Var) {
        let wk = tape.param(self.key);
        let wv = tape.param(self.value);
        let keys = tape.linear(encoded, wk, None);
        let values = tape.linear(encoded, wv, None);
        let logits = tape.matmul_t(query, false, keys, true);
        let scaled = tape.scale(logits, F::from_f64(1.0 / (self.cfg.node_dim() as f64).sqrt()));
        let weights = tape.row_softmax(scaled);
        (tape.matmul(weights, values), weights)
    }

    /// Pre-sigmoid score of one sample.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<'_, F>,
        item_table: ParamId,
        profile: &[f64],
        cand: &Candidate,
        encoded: Var,
    ) -> Result<HeadOutput> {
        if profile.len() != self.cfg.profile_dim {
            return Err(Error::Shape {
                op: "user profile",
                left: (1, profile.len()),
                right: (1, self.cfg.profile_dim),
            });
        }
        let cand_vec = self.candidate(tape, item_table, cand);
        let (qw, qb) = (tape.param(self.query_w), tape.param(self.query_b));
        let query = tape.linear(cand_vec, qw, Some(qb));
        let (context, weights) = self.target_attention(tape, encoded, query);
        let profile = tape.input(Matrix::from_f64(1, profile.len(), profile));
        let mut x = tape.concat_cols(&[profile, cand_vec, context]);
        let last = self.mlp.len() - 1;
        for (i, &(w, b)) in self.mlp.iter().enumerate() {
            let (w, b) = (tape.param(w), tape.param(b));
            x = tape.linear(x, w, Some(b));
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(HeadOutput {
            logit: x,
            context,
            weights,
        })
    }
}

/// Binary cross-entropy of a probability, evaluated through its logit.
pub fn bce_loss(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    bce_with_logit((p / (1.0 - p)).ln(), label)
}

/// `-[y ln s(z) + (1 - y) ln(1 - s(z))]` without overflow for large `|z|`.
pub fn bce_with_logit(z: f64, label: u8) -> f64 {
    crate::numerics::tape::stable_bce(z, label as f64)
}
