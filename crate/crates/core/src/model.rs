//! The full scoring model: embeddings, sequence encoder and prediction head.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::BaselineEncoder;
use crate::embedding::{embed_sequence, EmbeddingConfig, EmbeddingTables, TimeEncoding};
use crate::encoder::{EncoderConfig, TgaEncoder};
use crate::error::{Error, Result};
use crate::event::Sample;
use crate::graph::{build_graph_with, GraphOptions, TransitionGraph};
use crate::head::{HeadConfig, HeadOutput, PredictionHead};
use crate::numerics::checkpoint;
use crate::numerics::{grad_check_with, GradCheckConfig, GradCheckReport, Gradients, ParamId, ParamStore, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Tga,
    FullAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Feed-forward hidden width; `None` means four times the node width.
    pub ffn_dim: Option<usize>,
    pub scale_logits: bool,
    pub share_across_views: bool,
    pub item_vocab: usize,
    pub category_vocab: usize,
    pub time_buckets: usize,
    pub max_positions: usize,
    pub time_encoding: TimeEncoding,
    pub profile_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub graph: GraphOptions,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Tga,
            d: 64,
            layers: 3,
            heads: 4,
            key_dim: 16,
            value_dim: 16,
            ffn_dim: None,
            scale_logits: true,
            share_across_views: false,
            item_vocab: 32768,
            category_vocab: 1024,
            time_buckets: 32,
            max_positions: 256,
            time_encoding: TimeEncoding::Recency,
            profile_dim: 16,
            mlp_hidden: vec![128, 64],
            graph: GraphOptions::default(),
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            key_dim: self.key_dim,
            value_dim: self.value_dim,
            ffn_dim: self.ffn_dim.unwrap_or(16 * self.d),
            scale_logits: self.scale_logits,
            share_across_views: self.share_across_views,
        }
    }

    pub fn embedding_config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            d: self.d,
            item_vocab: self.item_vocab,
            time_buckets: self.time_buckets,
            max_positions: self.max_positions,
            time_encoding: self.time_encoding,
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            d: self.d,
            profile_dim: self.profile_dim,
            category_vocab: self.category_vocab,
            item_vocab: self.item_vocab,
            hidden: self.mlp_hidden.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        for (name, v) in [
            ("item_vocab", self.item_vocab),
            ("category_vocab", self.category_vocab),
            ("time_buckets", self.time_buckets),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum SequenceEncoder {
    Tga(TgaEncoder),
    FullAttention(BaselineEncoder),
}

/// Values of interest from one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub states: Var,
    pub encoded: Var,
    pub head: HeadOutput,
}

#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    pub embedding: EmbeddingTables,
    pub encoder: SequenceEncoder,
    pub head: PredictionHead,
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(seed);
        let embedding = EmbeddingTables::register(&mut params, &cfg.embedding_config());
        let encoder = match cfg.encoder {
            EncoderKind::Tga => SequenceEncoder::Tga(TgaEncoder::register(&mut params, cfg.encoder_config())?),
            EncoderKind::FullAttention => {
                SequenceEncoder::FullAttention(BaselineEncoder::register(&mut params, cfg.encoder_config())?)
            }
        };
        let head = PredictionHead::register(&mut params, cfg.head_config());
        Ok(Self {
            cfg,
            params,
            embedding,
            encoder,
            head,
        })
    }

    pub fn graph(&self, sample: &Sample) -> TransitionGraph {
        build_graph_with(&sample.sequence, &self.cfg.graph)
    }

    /// Records the forward pass of one sample on `tape`, which may read a
    /// parameter store other than `self.params` as long as its layout matches.
    pub fn forward(&self, tape: &mut Tape<'_, F>, sample: &Sample) -> Result<Forward> {
        let ns = embed_sequence(tape, &self.embedding, &self.cfg.embedding_config(), &sample.sequence)?;
        let encoded = match &self.encoder {
            SequenceEncoder::Tga(enc) => enc.encode(tape, &ns, &self.graph(sample))?,
            SequenceEncoder::FullAttention(enc) => enc.encode(tape, &ns)?,
        };
        let head = self
            .head
            .forward(tape, self.embedding.item, &sample.user_profile, &sample.candidate, encoded)?;
        Ok(Forward {
            states: ns.states,
            encoded,
            head,
        })
    }

    pub fn logit(&self, sample: &Sample) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, sample)?;
        Ok(tape.value(out.head.logit).get(0, 0).as_f64())
    }

    /// Conversion probability in (0, 1).
    pub fn predict(&self, sample: &Sample) -> Result<f64> {
        Ok(crate::numerics::matrix::sigmoid(self.logit(sample)?))
    }

    /// Mean cross-entropy over `samples` evaluated at `params`. When `grads` is
    /// given its contents are replaced by the gradient of that mean.
    pub fn loss(&self, params: &ParamStore<F>, samples: &[Sample], mut grads: Option<&mut Gradients<F>>) -> Result<F> {
        if let Some(g) = grads.as_deref_mut() {
            g.zero();
        }
        let mut total = F::zero();
        for s in samples {
            let mut tape = Tape::new(params);
            let out = self.forward(&mut tape, s)?;
            let loss = tape.bce_with_logits(out.head.logit, &[F::from_f64(s.label as f64)]);
            total += tape.value(loss).get(0, 0);
            if let Some(g) = grads.as_deref_mut() {
                tape.backward(loss, g)?;
            }
        }
        let n = F::from_f64(samples.len().max(1) as f64);
        if let Some(g) = grads {
            g.scale(F::one() / n);
        }
        Ok(total / n)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params, serde_json::to_value(&self.cfg)?)
    }

    /// Rebuilds a model from a checkpoint, converting precision if needed.
    pub fn load(path: &Path) -> Result<Self> {
        let header = checkpoint::read_header(path)?;
        let cfg: ModelConfig = serde_json::from_value(header.config)
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut model = Self::new(cfg, header.seed)?;
        checkpoint::load_into(path, &mut model.params)?;
        Ok(model)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}

/// Module a parameter belongs to, from its name.
pub fn module_of(param: &str) -> &'static str {
    if param.starts_with("emb.") {
        "embedding"
    } else if param.starts_with("layer") {
        "tga_encoder"
    } else if param.starts_with("base.") {
        "baseline_encoder"
    } else if param.starts_with("head.") {
        "prediction_head"
    } else {
        "other"
    }
}

/// Finite-difference check of the mean loss over `samples` in 64-bit, with
/// the worst relative error of each module. Probes rotate over modules and
/// favor coordinates with a non-zero analytic gradient, so a small embedding
/// table or head is not drowned out by the transition weights.
pub fn check_gradients(
    cfg: &ModelConfig,
    seed: u64,
    samples: &[Sample],
    gc: &GradCheckConfig,
) -> Result<(GradCheckReport, Vec<(&'static str, f64)>)> {
    let model = Model::<f64>::new(cfg.clone(), seed)?;
    let mut params = model.params.clone();
    let mut modules: Vec<(&'static str, Vec<ParamId>)> = Vec::new();
    for id in params.ids() {
        let m = module_of(params.name(id));
        match modules.iter_mut().find(|e| e.0 == m) {
            Some(e) => e.1.push(id),
            None => modules.push((m, vec![id])),
        }
    }
    let mut turn = 0;
    let pick = |rng: &mut ChaCha8Rng, store: &ParamStore<f64>, grads: &Gradients<f64>| {
        let ids = &modules[turn % modules.len()].1;
        turn += 1;
        let mut choice = (ids[0], 0);
        for _ in 0..64 {
            let id = ids[rng.gen_range(0..ids.len())];
            choice = (id, rng.gen_range(0..store.value(id).len()));
            if grads.get(id).data()[choice.1] != 0.0 {
                break;
            }
        }
        choice
    };
    let report = grad_check_with(&mut params, |p, g| model.loss(p, samples, g), gc, pick)?;
    let mut per_module: Vec<(&'static str, f64)> = Vec::new();
    for probe in &report.probes {
        let m = module_of(&probe.param);
        match per_module.iter_mut().find(|e| e.0 == m) {
            Some(e) => e.1 = e.1.max(probe.rel_error),
            None => per_module.push((m, probe.rel_error)),
        }
    }
    per_module.sort_by_key(|e| e.0);
    Ok((report, per_module))
}
