//! Acceptance criteria 1 through 9, one PASS/FAIL line each.
//!
//! `cargo test --test acceptance` runs all of them; trailing numbers select a
//! subset (`cargo test --test acceptance -- 2 4`). With `ACCEPTANCE_STRICT=1`
//! set, any FAIL makes the process exit non-zero.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tga::data::{bayes_auc, generate, write_jsonl, Generated, Generator, GeneratorConfig};
use tga::embedding::embed_sequence;
use tga::encoder::{count_flops, EncoderConfig};
use tga::event::{validate_sequence, Candidate, Sample};
use tga::graph::{build_graph, build_graph_with, GraphOptions, TransitionGraph, TransitionView, ViewSet};
use tga::model::{check_gradients, EncoderKind, Model, ModelConfig, SequenceEncoder};
use tga::numerics::{GradCheckConfig, Tape};
use tga::train::{evaluate, measure_ti_speed, synthetic_sample, train, train_new, SpeedConfig, TrainConfig};

// Criterion 1.
const GRAPH_SEQUENCES: usize = 10_000;
const GRAPH_MAX_LEN: usize = 2048;
const GRAPH_SECONDS: f64 = 30.0;
// Criterion 3.
const GRAD_PROBES: usize = 200;
const GRAD_EPS: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 300.0;
// Criterion 5.
const OP_RATIO: (f64, f64) = (1.9, 2.1);
const TGA_WALL_RATIO_MAX: f64 = 2.5;
const BASELINE_OP_RATIO: (f64, f64) = (3.0, 4.0);
const BASELINE_WALL_RATIO_MIN: f64 = 3.0;
// Criterion 6.
const CEILING_GAP: f64 = 0.03;
const LEARN_SECONDS: f64 = 900.0;
// Criterion 9.
const AUC_ROUND_TRIP: f64 = 1e-9;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> tga::Result<Verdict>;

fn main() {
    let checks: [(&str, Check); 9] = [
        ("graph construction properties", graph_properties),
        ("hand-traced four-event example", hand_traced),
        ("end-to-end gradient check", gradient_fidelity),
        ("dimensional closure at d=64", dimensional_closure),
        ("linear scaling law", scaling_law),
        ("learnability against the Bayes ceiling", learnability),
        ("item-view ablation direction", ablation_direction),
        ("depth probe and receptive field", depth_probe),
        ("determinism and checkpoint round trip", determinism),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let v = check().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}")));
        if !v.pass {
            failed += 1;
        }
        println!(
            "criterion {n} {}: {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

fn edge_set(g: &TransitionGraph) -> BTreeSet<(usize, usize, usize)> {
    g.edges().iter().map(|e| (e.src, e.dst, e.view.index())).collect()
}

fn graph_properties() -> tga::Result<Verdict> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut violations, mut first) = (0usize, None);
    for i in 0..GRAPH_SEQUENCES {
        let len = rng.gen_range(0..=GRAPH_MAX_LEN);
        let (items, cats) = (rng.gen_range(1..=64), rng.gen_range(1..=8));
        let seq = common::random_sequence(&mut rng, len, items, cats);
        let mut v = Vec::new();
        if let Err(e) = validate_sequence(&seq) {
            v.push(format!("generated sequence invalid: {e}"));
        }
        let g = build_graph(&seq);
        v.extend(common::graph_violations(&seq, &g));
        if build_graph(&seq) != g {
            v.push("rebuilding gives a different graph".into());
        }
        let off = TransitionView::ALL[i % 3];
        let opts = GraphOptions {
            views: ViewSet::all().without(off),
            ..GraphOptions::default()
        };
        let mut expect = edge_set(&g);
        expect.retain(|e| e.2 != off.index());
        if edge_set(&build_graph_with(&seq, &opts)) != expect {
            v.push(format!("disabling {off} changed other views"));
        }
        if !v.is_empty() {
            violations += v.len();
            first.get_or_insert_with(|| format!("sequence {i}: {}", v[0]));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(Verdict::new(
        violations == 0 && secs < GRAPH_SECONDS,
        format!(
            "{GRAPH_SEQUENCES} sequences, {violations} violations{}, {secs:.1}s (limit {GRAPH_SECONDS}s)",
            first.map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    ))
}

fn hand_traced() -> tga::Result<Verdict> {
    let seq = common::four_events();
    let g = build_graph(&seq);
    // Items A,B,A,C; categories X,X,X,Y.
    let want: BTreeSet<(usize, usize, usize)> = [(0, 2, 0), (0, 1, 1), (1, 2, 1), (0, 1, 2), (1, 2, 2), (2, 3, 2)].into();
    let want_dump = "0 2 item click cart\n\
                     0 1 category click click\n\
                     0 1 neighbor click click\n\
                     1 2 category click cart\n\
                     1 2 neighbor click cart\n\
                     2 3 neighbor cart click\n";

    let dir = tempfile::tempdir().map_err(|e| tga::Error::io(std::env::temp_dir(), e))?;
    let input = dir.path().join("four.jsonl");
    let sample = Sample {
        user_profile: vec![0.0; 16],
        sequence: seq,
        candidate: Candidate { item: 1, cat: 10 },
        label: 1,
    };
    write_jsonl(&input, &[sample])?;
    let mut dumps = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let args = ["tga", "build-graph", "--dump", "--input"].map(String::from).into_iter().chain([
            input.display().to_string(),
            "--out".into(),
            out.display().to_string(),
        ]);
        let (mut so, mut se) = (Vec::new(), Vec::new());
        let code = tga::cli::run(args, &mut so, &mut se);
        if code != 0 {
            return Ok(Verdict::new(false, format!("build-graph exited {code}: {}", String::from_utf8_lossy(&se))));
        }
        let path = out.join("graph_dump.txt");
        dumps.push(std::fs::read(&path).map_err(|e| tga::Error::io(&path, e))?);
    }
    let edges = edge_set(&g);
    let pass = g.num_edges() == 6 && edges == want && dumps[0] == dumps[1] && dumps[0] == want_dump.as_bytes();
    Ok(Verdict::new(
        pass,
        format!(
            "{} edges (want 6), edge set {}, dumps {} across runs and {} the traced text",
            g.num_edges(),
            if edges == want { "matches" } else { "differs" },
            if dumps[0] == dumps[1] { "identical" } else { "differ" },
            if dumps[0] == want_dump.as_bytes() { "equal" } else { "differ from" }
        ),
    ))
}

fn gradient_fidelity() -> tga::Result<Verdict> {
    let t = Instant::now();
    let cfg = ModelConfig {
        d: 4,
        layers: 3,
        heads: 2,
        key_dim: 4,
        value_dim: 4,
        ffn_dim: Some(16),
        item_vocab: 16,
        category_vocab: 8,
        time_buckets: 8,
        max_positions: 16,
        profile_dim: 4,
        mlp_hidden: vec![8, 4],
        ..ModelConfig::default()
    };
    let samples = generate(&GeneratorConfig {
        n_users: 3,
        seq_len_min: 6,
        seq_len_max: 12,
        profile_dim: 4,
        plant_rate: 1.0,
        ..GeneratorConfig::default()
    })?;
    let gc = GradCheckConfig {
        probes: GRAD_PROBES,
        eps: GRAD_EPS,
        tol: GRAD_TOL,
        ..GradCheckConfig::default()
    };
    let (report, per_module) = check_gradients(&cfg, 7, &samples, &gc)?;
    let secs = t.elapsed().as_secs_f64();
    let covered = ["embedding", "tga_encoder", "prediction_head"]
        .iter()
        .all(|m| per_module.iter().any(|(n, _)| n == m));
    let modules: Vec<String> = per_module.iter().map(|(m, e)| format!("{m} {e:.1e}")).collect();
    Ok(Verdict::new(
        report.probes.len() >= GRAD_PROBES && report.max_rel_error < GRAD_TOL && covered && secs < GRAD_SECONDS,
        format!(
            "{} probes, max relative error {:.2e} (limit {GRAD_TOL:.0e}), {} kinks replaced, {}",
            report.probes.len(),
            report.max_rel_error,
            report.kinks_skipped,
            modules.join(", ")
        ),
    ))
}

fn dimensional_closure() -> tga::Result<Verdict> {
    let cfg = ModelConfig::default();
    let d = cfg.d;
    let model = Model::<f32>::new(cfg.clone(), 0)?;
    let SequenceEncoder::Tga(enc) = &model.encoder else {
        return Ok(Verdict::new(false, "default encoder is not the graph encoder"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sample = synthetic_sample(&mut rng, 96, cfg.profile_dim);
    let mut tape = Tape::new(&model.params);
    let ns = embed_sequence(&mut tape, &model.embedding, &cfg.embedding_config(), &sample.sequence)?;
    let traces = enc.encode_traced(&mut tape, &ns, &model.graph(&sample))?;
    let mut bad = Vec::new();
    for (l, tr) in traces.iter().enumerate() {
        for (what, v, cols) in [
            ("node input", tr.input, 4 * d),
            ("edge input", tr.edge_input, 10 * d),
            ("messages", tr.messages, d),
            ("node output", tr.output, 4 * d),
        ] {
            if tape.shape(v).1 != cols {
                bad.push(format!("layer {l} {what} width {} != {cols}", tape.shape(v).1));
            }
        }
        for &(w, _) in &enc.layers[l].transitions {
            if model.params.value(w).shape() != (d, 10 * d) {
                bad.push(format!("layer {l} {} has shape {:?}", model.params.name(w), model.params.value(w).shape()));
            }
        }
    }
    let ec = EncoderConfig::new(d, 3);
    let pass = traces.len() == 3 && bad.is_empty() && ec.edge_input_dim() == 640 && ec.node_dim() == 256;
    Ok(Verdict::new(
        pass,
        if bad.is_empty() {
            format!("{} layers: edge input 640, node states 256 at every layer", traces.len())
        } else {
            bad.join("; ")
        },
    ))
}

/// Multiply-adds recorded by the tape for one forward pass at each length.
fn forward_ops(cfg: &ModelConfig, lengths: &[usize]) -> tga::Result<Vec<u64>> {
    let model = Model::<f32>::new(cfg.clone(), 0)?;
    lengths
        .iter()
        .map(|&len| {
            let mut rng = ChaCha8Rng::seed_from_u64(len as u64);
            let s = synthetic_sample(&mut rng, len, cfg.profile_dim);
            let mut tape = Tape::new(&model.params);
            model.forward(&mut tape, &s)?;
            Ok(tape.flops())
        })
        .collect()
}

fn ratios(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|w| w[1] / w[0]).collect()
}

fn scaling_law() -> tga::Result<Verdict> {
    let tga_cfg = ModelConfig {
        max_positions: 4096,
        ..ModelConfig::default()
    };
    let ops: Vec<f64> = forward_ops(&tga_cfg, &[256, 512, 1024])?.into_iter().map(|x| x as f64).collect();
    let op_r = ratios(&ops);
    // Cross-check against the closed-form count for fully connected nodes.
    let enc = tga_cfg.encoder_config();
    let formula = ratios(&[256, 512, 1024].map(|l| count_flops(&enc, l) as f64));

    let base_cfg = ModelConfig {
        d: 16,
        encoder: EncoderKind::FullAttention,
        max_positions: 4096,
        ..ModelConfig::default()
    };
    let base_ops: Vec<f64> = forward_ops(&base_cfg, &[512, 1024, 2048])?.into_iter().map(|x| x as f64).collect();
    let base_r = ratios(&base_ops);

    let rows = measure_ti_speed(
        &ModelConfig {
            d: 16,
            ..ModelConfig::default()
        },
        &SpeedConfig {
            lengths: vec![512, 1024, 2048],
            repeats: 3,
            batch: 2,
            baseline_max_len: 4096,
            seed: 0,
        },
    )?;
    let times = |m: &str| -> Vec<f64> { rows.iter().filter(|r| r.model == m).map(|r| r.train_ms).collect() };
    let (tga_t, base_t) = (times("tga"), times("full_attention"));
    let (tga_w, base_w) = (ratios(&tga_t), ratios(&base_t));

    let in_range = |x: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&x);
    let pass = op_r.iter().all(|&r| in_range(r, OP_RATIO))
        && tga_w.iter().all(|&r| r <= TGA_WALL_RATIO_MAX)
        && in_range(base_r[1], BASELINE_OP_RATIO)
        && base_r[1] > base_r[0]
        && base_w[1] >= BASELINE_WALL_RATIO_MIN;
    let f = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join("/");
    Ok(Verdict::new(
        pass,
        format!(
            "TGA op ratio 256>512>1024 {} (closed form {}), wall ratio 512>1024>2048 {}; \
             full attention op ratio 512>1024>2048 {}, wall ratio {}",
            f(&op_r),
            f(&formula),
            f(&tga_w),
            f(&base_r),
            f(&base_w)
        ),
    ))
}

fn split(cfg: &GeneratorConfig, n: usize, seed: u64) -> tga::Result<(Vec<Sample>, f64)> {
    let gens: Vec<Generated> = Generator::new(GeneratorConfig {
        n_users: n,
        seed,
        ..cfg.clone()
    })?
    .collect();
    let prevalence = gens.iter().filter(|g| g.has_pattern).count() as f64 / n.max(1) as f64;
    Ok((gens.into_iter().map(|g| g.sample).collect(), prevalence))
}

/// The compact model used by the training criteria.
fn small_model() -> ModelConfig {
    ModelConfig {
        d: 8,
        key_dim: 8,
        value_dim: 8,
        ffn_dim: Some(64),
        mlp_hidden: vec![64, 32],
        ..ModelConfig::default()
    }
}

fn learnability() -> tga::Result<Verdict> {
    let data = GeneratorConfig::default();
    let (train_set, _) = split(&data, 50_000, 1)?;
    let (valid_set, prevalence) = split(&data, 10_000, 2)?;
    let ceiling = bayes_auc(data.p_convert_when_pattern, data.p_convert_base, prevalence);
    let run = TrainConfig {
        layers: 3,
        lr: 3e-3,
        batch_size: 64,
        epochs: 1,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let (_, out) = train_new::<f32>(&small_model(), &train_set, &valid_set, &run, None)?;
    let secs = t.elapsed().as_secs_f64();
    let auc = out.best_auc.unwrap_or(f64::NAN);
    Ok(Verdict::new(
        auc >= ceiling - CEILING_GAP && secs <= LEARN_SECONDS,
        format!(
            "best valid AUC {auc:.4}, Bayes ceiling {ceiling:.4}, gap {:.4} (limit {CEILING_GAP}), {secs:.0}s (limit {LEARN_SECONDS}s)",
            ceiling - auc
        ),
    ))
}

fn ablation_direction() -> tga::Result<Verdict> {
    let data = GeneratorConfig {
        seq_len_min: 16,
        seq_len_max: 48,
        ..GeneratorConfig::default()
    };
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..3u64 {
        let (train_set, _) = split(&data, 8000, 10 + seed)?;
        let (valid_set, _) = split(&data, 3000, 20 + seed)?;
        let mut aucs = [0.0; 2];
        for (k, views) in [ViewSet::all(), ViewSet::all().without(TransitionView::Item)].into_iter().enumerate() {
            let run = TrainConfig {
                layers: 2,
                lr: 3e-3,
                batch_size: 64,
                epochs: 2,
                seed,
                enabled_views: views,
                ..TrainConfig::default()
            };
            let (_, out) = train_new::<f32>(&small_model(), &train_set, &valid_set, &run, None)?;
            aucs[k] = out.best_auc.unwrap_or(f64::NAN);
        }
        wins += usize::from(aucs[1] < aucs[0]);
        pairs.push(format!("seed {seed}: full {:.4} minus-item {:.4}", aucs[0], aucs[1]));
    }
    Ok(Verdict::new(wins == 3, format!("{wins}/3 seeds lower without item view; {}", pairs.join(", "))))
}

fn depth_probe() -> tga::Result<Verdict> {
    // Receptive field: perturbing node 0 reaches node l only through l neighbor hops.
    let mut field_ok = true;
    for layers in 1..=3 {
        let cfg = ModelConfig {
            d: 4,
            layers,
            heads: 2,
            key_dim: 4,
            value_dim: 4,
            item_vocab: 512,
            category_vocab: 64,
            ..ModelConfig::default()
        };
        let model = Model::<f64>::new(cfg.clone(), 3)?;
        let SequenceEncoder::Tga(enc) = &model.encoder else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Distinct items and categories: only neighbor edges exist.
        let mut seq = tga::event::BehaviorSequence::new();
        for i in 0..8u64 {
            seq.push(100 + i, i, tga::event::BehaviorType::ALL[rng.gen_range(0..4)], 10 * i);
        }
        let mut ev = seq.events().to_vec();
        ev[0].behavior = match ev[0].behavior {
            tga::event::BehaviorType::Click => tga::event::BehaviorType::Cart,
            _ => tga::event::BehaviorType::Click,
        };
        let other = tga::event::BehaviorSequence::from_events(ev);
        let encode = |s: &tga::event::BehaviorSequence| -> tga::Result<tga::numerics::Matrix<f64>> {
            let mut tape = Tape::new(&model.params);
            let ns = embed_sequence(&mut tape, &model.embedding, &cfg.embedding_config(), s)?;
            let out = enc.encode(&mut tape, &ns, &build_graph(s))?;
            Ok(tape.value(out).clone())
        };
        let (a, b) = (encode(&seq)?, encode(&other)?);
        for node in 0..8 {
            let changed = a.row(node) != b.row(node);
            field_ok &= changed == (node <= layers);
        }
    }

    // Neighbor edges only: the pattern's endpoints are then exactly three
    // hops apart, out of reach of any single node in one layer.
    let probe = GeneratorConfig::depth_probe();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..3u64 {
        let (train_set, _) = split(&probe, 30_000, 30 + seed)?;
        let (valid_set, _) = split(&probe, 3000, 40 + seed)?;
        let mut aucs = [0.0; 2];
        for (k, layers) in [1, 2].into_iter().enumerate() {
            let run = TrainConfig {
                layers,
                lr: 3e-3,
                batch_size: 64,
                epochs: 8,
                seed,
                enabled_views: ViewSet::parse("neighbor").expect("view name"),
                ..TrainConfig::default()
            };
            let (_, out) = train_new::<f32>(&small_model(), &train_set, &valid_set, &run, None)?;
            aucs[k] = out.best_auc.unwrap_or(f64::NAN);
        }
        wins += usize::from(aucs[1] > aucs[0]);
        pairs.push(format!("seed {seed}: 1 layer {:.4} 2 layers {:.4}", aucs[0], aucs[1]));
    }
    Ok(Verdict::new(
        wins == 3 && field_ok,
        format!(
            "receptive field {}; {wins}/3 seeds favor 2 layers; {}",
            if field_ok { "exact" } else { "violated" },
            pairs.join(", ")
        ),
    ))
}

fn determinism() -> tga::Result<Verdict> {
    let data = GeneratorConfig {
        seq_len_min: 8,
        seq_len_max: 40,
        ..GeneratorConfig::default()
    };
    let (train_set, _) = split(&data, 1500, 1)?;
    let (valid_set, _) = split(&data, 800, 2)?;
    let run = TrainConfig {
        layers: 2,
        lr: 3e-3,
        batch_size: 64,
        epochs: 1,
        eval_every: 8,
        seed: 9,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| tga::Error::io(std::env::temp_dir(), e))?;
    let mut logs = Vec::new();
    let mut models = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let mut model = Model::<f32>::new(run.apply_to(&small_model()), run.seed)?;
        let outcome = train(&mut model, &train_set, &valid_set, &run, Some(&out))?;
        let path = out.join("train_log.csv");
        logs.push((outcome.log.clone(), std::fs::read(&path).map_err(|e| tga::Error::io(&path, e))?));
        models.push((model, out));
    }
    let same_log = logs[0] == logs[1];
    let same_params = models[0].0.params.ids().all(|id| models[0].0.params.value(id) == models[1].0.params.value(id));
    let (model, out) = &models[0];
    let before = evaluate(model, &valid_set, 1)?.auc.or_nan();
    let reloaded = Model::<f32>::load(&out.join("best.ckpt"))?;
    let after = evaluate(&reloaded, &valid_set, 1)?.auc.or_nan();
    let diff = (before - after).abs();
    Ok(Verdict::new(
        same_log && same_params && diff <= AUC_ROUND_TRIP,
        format!(
            "logs {} ({} rows), parameters {}, valid AUC {before:.6} before and {after:.6} after reload (|diff| {diff:.1e}, limit {AUC_ROUND_TRIP:.0e})",
            if same_log { "identical" } else { "differ" },
            logs[0].0.len(),
            if same_params { "identical" } else { "differ" },
        ),
    ))
}
