//! Optimizers, the training loop, evaluation, throughput measurement and
//! view ablations.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{BehaviorSequence, BehaviorType, Candidate, Sample};
use crate::graph::{TransitionView, ViewSet};
use crate::metrics::{auc, logloss_from_logits, positive_rate, Auc};
use crate::model::{EncoderKind, Model, ModelConfig};
use crate::numerics::{Gradients, Matrix, ParamStore, Precision, Scalar, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub enabled_views: ViewSet,
    pub layers: usize,
    /// Steps between validation passes; 0 evaluates once per epoch.
    pub eval_every: usize,
    /// Stop after this many steps, if set.
    pub max_steps: Option<usize>,
    /// Threads computing per-sample gradients; the reduction order is fixed.
    pub workers: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 512,
            epochs: 1,
            seed: 0,
            enabled_views: ViewSet::all(),
            layers: 3,
            eval_every: 0,
            max_steps: None,
            workers: 1,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.workers == 0 || self.layers == 0 {
            return Err(Error::Config("batch_size, workers and layers must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is not a non-negative number", self.lr)));
        }
        Ok(())
    }

    /// The model configuration with this run's layer count and views applied.
    pub fn apply_to(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        m.layers = self.layers;
        m.graph.views = self.enabled_views;
        m
    }
}

/// Moments and step count of Adam.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub t: u64,
    pub m: Vec<Matrix<F>>,
    pub v: Vec<Matrix<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros: Vec<Matrix<F>> = params
            .ids()
            .map(|id| {
                let (r, c) = params.value(id).shape();
                Matrix::zeros(r, c)
            })
            .collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<F: Scalar>(
    params: &mut ParamStore<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (F::from_f64(beta1), F::from_f64(beta2));
    let (one, lr_f, eps_f) = (F::one(), F::from_f64(lr), F::from_f64(eps));
    let (c1, c2) = (F::from_f64(c1), F::from_f64(c2));
    for (i, (id, g)) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let w = params.value_mut(id).data_mut();
        for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr_f * mhat / (vhat.sqrt() + eps_f);
        }
    }
}

pub fn sgd_step<F: Scalar>(params: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) {
    let lr = F::from_f64(lr);
    for (id, g) in grads.iter() {
        params.value_mut(id).add_scaled(g, -lr);
    }
}

/// Adds the summed per-sample loss gradients of `samples` into `grads` and
/// returns the summed loss.
fn accumulate<F: Scalar>(model: &Model<F>, samples: &[Sample], grads: &mut Gradients<F>) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::new(&model.params);
        let out = model.forward(&mut tape, s)?;
        let loss = tape.bce_with_logits(out.head.logit, &[F::from_f64(s.label as f64)]);
        total += tape.value(loss).get(0, 0).as_f64();
        tape.backward(loss, grads)?;
    }
    Ok(total)
}

/// Mean loss and gradient of a batch. Each worker sums a contiguous chunk into
/// its own buffer; buffers are then added in worker order, so the result
/// depends on the worker count but not on thread timing.
pub fn batch_gradient<F: Scalar>(
    model: &Model<F>,
    batch: &[Sample],
    buffers: &mut [Gradients<F>],
) -> Result<(f64, Gradients<F>)> {
    let workers = buffers.len().max(1);
    let chunk = batch.len().div_ceil(workers).max(1);
    for b in buffers.iter_mut() {
        b.zero();
    }
    let losses: Vec<Result<f64>> = if workers == 1 {
        vec![accumulate(model, batch, &mut buffers[0])]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .zip(buffers.iter_mut())
                .map(|(part, buf)| scope.spawn(move || accumulate(model, part, buf)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        })
    };
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    let mut sum = buffers[0].clone();
    for b in &buffers[1..] {
        sum.add_scaled(b, F::one());
    }
    let n = batch.len().max(1) as f64;
    sum.scale(F::from_f64(1.0 / n));
    Ok((total / n, sum))
}

/// Logits of `samples`, computed in parallel chunks and returned in order.
pub fn logits<F: Scalar>(model: &Model<F>, samples: &[Sample], workers: usize) -> Result<Vec<f64>> {
    let workers = workers.max(1);
    if workers == 1 || samples.len() < 2 {
        return samples.iter().map(|s| model.logit(s)).collect();
    }
    let chunk = samples.len().div_ceil(workers);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| model.logit(s)).collect::<Result<Vec<f64>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub auc: Auc,
    pub n: usize,
    pub pos_rate: f64,
    pub logloss: f64,
}

impl EvalReport {
    /// `{"auc": .., "n": .., "pos_rate": .., "logloss": ..}`; a degenerate AUC is `null`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "auc": self.auc.value(),
            "n": self.n,
            "pos_rate": self.pos_rate,
            "logloss": self.logloss,
        })
    }
}

pub fn evaluate<F: Scalar>(model: &Model<F>, samples: &[Sample], workers: usize) -> Result<EvalReport> {
    let z = logits(model, samples, workers)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    Ok(EvalReport {
        auc: auc(&z, &labels),
        n: samples.len(),
        pos_rate: positive_rate(&labels),
        logloss: logloss_from_logits(&z, &labels),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub valid_auc: Option<f64>,
}

/// Everything needed to reproduce a run, written as the log's JSON header.
#[derive(Debug, Clone, Serialize)]
pub struct RunHeader {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub parameters: usize,
    pub parameters_by_group: Vec<(String, usize)>,
    pub train_samples: usize,
    pub valid_samples: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub header: RunHeader,
    pub log: Vec<LogRow>,
    pub best_auc: Option<f64>,
    pub best_step: usize,
    pub steps: usize,
    pub seconds: f64,
}

impl TrainOutcome {
    /// `step,loss,valid_auc` lines; steps without validation leave the last field empty.
    pub fn csv(&self) -> String {
        let mut s = String::from("step,loss,valid_auc\n");
        for r in &self.log {
            let auc = r.valid_auc.map(|a| format!("{a:.9}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:.9},{auc}", r.step, r.loss);
        }
        s
    }
}

fn group_counts<F: Scalar>(params: &ParamStore<F>) -> Vec<(String, usize)> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for (name, r, c) in params.manifest() {
        let key = name.split('.').next().unwrap_or("").to_string();
        match groups.iter_mut().find(|g| g.0 == key) {
            Some(g) => g.1 += r * c,
            None => groups.push((key, r * c)),
        }
    }
    groups
}

fn norm_dump<F: Scalar>(params: &ParamStore<F>) -> String {
    params
        .norms()
        .iter()
        .map(|(n, v)| format!("{n}={v:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Trains `model` in place. When `out` is given, `train_log.csv`,
/// `run_header.json` and `best.ckpt` are written there. On return the model
/// holds the parameters of the best validation AUC (or the final ones when
/// validation never produced an AUC).
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    train_set: &[Sample],
    valid_set: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if model.cfg.graph.views != cfg.enabled_views || model.cfg.layers != cfg.layers {
        return Err(Error::Config(format!(
            "model has layers={} views={}, run asks for layers={} views={}",
            model.cfg.layers, model.cfg.graph.views, cfg.layers, cfg.enabled_views
        )));
    }
    let header = RunHeader {
        train: cfg.clone(),
        model: model.cfg.clone(),
        parameters: model.num_parameters(),
        parameters_by_group: group_counts(&model.params),
        train_samples: train_set.len(),
        valid_samples: valid_set.len(),
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run_header.json");
        fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&path, e))?;
    }
    log::info!(
        "training {} parameters on {} samples ({} valid)",
        header.parameters,
        train_set.len(),
        valid_set.len()
    );

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut adam = AdamState::new(&model.params);
    let mut buffers: Vec<Gradients<F>> = (0..cfg.workers).map(|_| model.params.new_gradients()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Vec<Matrix<F>>)> = None;
    let mut step = 0;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);

    'epochs: for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (k, idx) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| train_set[i].clone()));
            let (loss, grads) = batch_gradient(model, &batch, &mut buffers)?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    norms: norm_dump(&model.params),
                });
            }
            match cfg.optimizer {
                OptimizerKind::Adam => adam_step(&mut model.params, &grads, &mut adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
                OptimizerKind::Sgd => sgd_step(&mut model.params, &grads, cfg.lr),
            }
            let last_step = cfg.max_steps == Some(step);
            let eval_now = if cfg.eval_every == 0 {
                k + 1 == steps_per_epoch || last_step
            } else {
                step % cfg.eval_every == 0 || last_step
            };
            let mut valid_auc = None;
            if eval_now && !valid_set.is_empty() {
                let report = evaluate(model, valid_set, cfg.workers)?;
                valid_auc = report.auc.value();
                log::info!("step {step}: loss {loss:.5}, valid auc {:?}", valid_auc);
                if let Some(a) = valid_auc {
                    if best.as_ref().map_or(true, |b| a > b.0) {
                        let snapshot = model.params.ids().map(|id| model.params.value(id).clone()).collect();
                        best = Some((a, step, snapshot));
                        if let Some(dir) = out {
                            model.save(&dir.join("best.ckpt"))?;
                        }
                    }
                }
            }
            log.push(LogRow { step, loss, valid_auc });
            if last_step {
                break 'epochs;
            }
        }
    }

    let (best_auc, best_step) = match best {
        Some((a, s, snapshot)) => {
            let ids: Vec<_> = model.params.ids().collect();
            for (id, m) in ids.into_iter().zip(snapshot) {
                *model.params.value_mut(id) = m;
            }
            (Some(a), s)
        }
        None => (None, step),
    };
    let outcome = TrainOutcome {
        header,
        log,
        best_auc,
        best_step,
        steps: step,
        seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        let path = dir.join("train_log.csv");
        fs::write(&path, outcome.csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(outcome)
}

/// Builds a fresh model for `cfg` and trains it.
pub fn train_new<F: Scalar>(
    model_cfg: &ModelConfig,
    train_set: &[Sample],
    valid_set: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(Model<F>, TrainOutcome)> {
    let mut model = Model::new(cfg.apply_to(model_cfg), cfg.seed)?;
    let outcome = train(&mut model, train_set, valid_set, cfg, out)?;
    Ok((model, outcome))
}

/// Views removed by each ablation run, in report order.
pub const ABLATIONS: [(&str, Option<TransitionView>); 4] = [
    ("full", None),
    ("minus_item", Some(TransitionView::Item)),
    ("minus_category", Some(TransitionView::Category)),
    ("minus_neighbor", Some(TransitionView::Neighbor)),
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub views: String,
    pub best_auc: Option<f64>,
    /// Best AUC minus the full model's; negative means worse.
    pub delta: Option<f64>,
}

/// Trains the full model and one model per removed view with the same seed.
pub fn ablate<F: Scalar>(
    model_cfg: &ModelConfig,
    train_set: &[Sample],
    valid_set: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for (name, removed) in ABLATIONS {
        let views = removed.map_or(cfg.enabled_views, |v| cfg.enabled_views.without(v));
        let run_cfg = TrainConfig {
            enabled_views: views,
            ..cfg.clone()
        };
        let dir: Option<PathBuf> = out.map(|d| d.join(name));
        let (_, outcome) = train_new::<F>(model_cfg, train_set, valid_set, &run_cfg, dir.as_deref())?;
        let full = rows.first().and_then(|r| r.best_auc);
        rows.push(AblationRow {
            variant: name.to_string(),
            views: views.to_string(),
            best_auc: outcome.best_auc,
            delta: match (outcome.best_auc, full, removed) {
                (Some(a), _, None) => Some(a - a),
                (Some(a), Some(f), Some(_)) => Some(a - f),
                _ => None,
            },
        });
    }
    Ok(rows)
}

pub fn ablation_report(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<16} {:<24} {:>10} {:>10}\n", "variant", "views", "auc", "delta");
    for r in rows {
        let f = |v: Option<f64>| v.map_or("degenerate".to_string(), |x| format!("{x:.4}"));
        let delta = r.delta.map_or("-".to_string(), |d| format!("{d:+.4}"));
        let _ = writeln!(s, "{:<16} {:<24} {:>10} {:>10}", r.variant, r.views, f(r.best_auc), delta);
    }
    s
}

/// Random history of exactly `len` events for throughput runs.
pub fn synthetic_sample(rng: &mut impl Rng, len: usize, profile_dim: usize) -> Sample {
    let mut seq = BehaviorSequence::new();
    let mut ts = 1_600_000_000u64;
    for _ in 0..len {
        ts += rng.gen_range(1..3600);
        let cat = rng.gen_range(0..20u64);
        let item = cat + 20 * rng.gen_range(0..50u64);
        seq.push(item, cat, BehaviorType::ALL[rng.gen_range(0..4)], ts);
    }
    Sample {
        user_profile: (0..profile_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        sequence: seq,
        candidate: Candidate {
            item: rng.gen_range(0..1000),
            cat: rng.gen_range(0..20),
        },
        label: rng.gen_range(0..2),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeedRow {
    pub model: String,
    pub len: usize,
    /// Median milliseconds of a forward pass over the batch.
    pub fwd_ms: f64,
    /// Median milliseconds of forward, backward and an Adam step.
    pub train_ms: f64,
    pub samples_per_s: f64,
    pub parameters: usize,
    /// Set when the model was not run at this length.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeedConfig {
    pub lengths: Vec<usize>,
    pub repeats: usize,
    pub batch: usize,
    /// Full attention is not run above this length.
    pub baseline_max_len: usize,
    pub seed: u64,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 512, 1024, 2048],
            repeats: 3,
            batch: 2,
            baseline_max_len: 4096,
            seed: 0,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Median forward and training time per length for the graph encoder and
/// the full-attention baseline under the same dimensions.
pub fn measure_ti_speed(model_cfg: &ModelConfig, speed: &SpeedConfig) -> Result<Vec<SpeedRow>> {
    let max_len = speed.lengths.iter().copied().max().unwrap_or(1);
    let mut rows = Vec::new();
    for kind in [EncoderKind::Tga, EncoderKind::FullAttention] {
        let cfg = ModelConfig {
            encoder: kind,
            max_positions: model_cfg.max_positions.max(max_len),
            ..model_cfg.clone()
        };
        let name = match kind {
            EncoderKind::Tga => "tga",
            EncoderKind::FullAttention => "full_attention",
        };
        let mut model = Model::<f32>::new(cfg, speed.seed)?;
        let mut adam = AdamState::new(&model.params);
        let mut buffers = vec![model.params.new_gradients()];
        for &len in &speed.lengths {
            if kind == EncoderKind::FullAttention && len > speed.baseline_max_len {
                rows.push(SpeedRow {
                    model: name.into(),
                    len,
                    fwd_ms: f64::NAN,
                    train_ms: f64::NAN,
                    samples_per_s: f64::NAN,
                    parameters: model.num_parameters(),
                    skipped: true,
                });
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(speed.seed ^ len as u64);
            let batch: Vec<Sample> = (0..speed.batch)
                .map(|_| synthetic_sample(&mut rng, len, model.cfg.profile_dim))
                .collect();
            let (mut fwd, mut trn) = (Vec::new(), Vec::new());
            for _ in 0..speed.repeats {
                let t = Instant::now();
                logits(&model, &batch, 1)?;
                fwd.push(t.elapsed().as_secs_f64() * 1e3);
                let t = Instant::now();
                let (_, g) = batch_gradient(&model, &batch, &mut buffers)?;
                adam_step(&mut model.params, &g, &mut adam, 1e-6, 0.9, 0.999, 1e-8);
                trn.push(t.elapsed().as_secs_f64() * 1e3);
            }
            let (fwd_ms, train_ms) = (median(fwd), median(trn));
            rows.push(SpeedRow {
                model: name.into(),
                len,
                fwd_ms,
                train_ms,
                samples_per_s: speed.batch as f64 / ((fwd_ms + train_ms) / 1e3),
                parameters: model.num_parameters(),
                skipped: false,
            });
        }
    }
    Ok(rows)
}

/// `model,L,fwd_ms,train_ms,samples_per_s` lines.
pub fn speed_csv(rows: &[SpeedRow]) -> String {
    let mut s = String::from("model,L,fwd_ms,train_ms,samples_per_s\n");
    for r in rows {
        if r.skipped {
            let _ = writeln!(s, "{},{},-,-,-", r.model, r.len);
        } else {
            let _ = writeln!(s, "{},{},{:.3},{:.3},{:.3}", r.model, r.len, r.fwd_ms, r.train_ms, r.samples_per_s);
        }
    }
    s
}

/// Training time of each model relative to the graph encoder at the same length.
pub fn speed_ratio_table(rows: &[SpeedRow]) -> String {
    let mut s = String::from("model,L,train_ms,ratio_to_tga\n");
    for r in rows {
        let tga = rows.iter().find(|t| t.model == "tga" && t.len == r.len && !t.skipped);
        let ratio = match (tga, r.skipped) {
            (Some(t), false) => format!("{:.3}", r.train_ms / t.train_ms),
            _ => "-".into(),
        };
        let ms = if r.skipped { "-".into() } else { format!("{:.3}", r.train_ms) };
        let _ = writeln!(s, "{},{},{ms},{ratio}", r.model, r.len);
    }
    s
}

/// Appends `text` to `path`, creating it if needed.
pub fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
