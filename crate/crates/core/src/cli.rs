//! Command-line front end. [`run`] parses arguments, dispatches and maps the
//! outcome to an exit code: 0 on success, 1 on a usage error, 2 when the
//! command itself fails.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_setting, RunConfig};
use crate::data::{bayes_auc, estimate_prevalence, generate, load_jsonl, write_jsonl, GeneratorConfig};
use crate::error::{Error, Result};
use crate::model::{check_gradients, Model};
use crate::numerics::{checkpoint, GradCheckConfig, Precision, Scalar};
use crate::train::{
    ablate, ablation_report, evaluate, measure_ti_speed, speed_csv, speed_ratio_table, train_new,
};

#[derive(Debug, Parser)]
#[command(name = "tga", version, about = "Transition-aware graph attention for multi-behavior sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set model.d=16`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub settings: Vec<String>,
    /// Directory receiving every output file.
    #[arg(long, default_value = "out", global = true)]
    pub out: PathBuf,
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate planted-pattern train and validation JSONL files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50_000)]
        train: usize,
        #[arg(long, default_value_t = 10_000)]
        valid: usize,
    },
    /// Build transition graphs for every sample of a JSONL file.
    BuildGraph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Print every edge as `src dst view src_behavior dst_behavior`.
        #[arg(long)]
        dump: bool,
    },
    /// Train a model and keep the checkpoint with the best validation AUC.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training JSONL; generated from the data settings when absent.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long, default_value_t = 50_000)]
        n_train: usize,
        #[arg(long, default_value_t = 10_000)]
        n_valid: usize,
    },
    /// Score a JSONL file with a checkpoint and print metrics as JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Time the graph encoder against full attention across sequence lengths.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Train the full model and one model per removed view with paired seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long, default_value_t = 20_000)]
        n_train: usize,
        #[arg(long, default_value_t = 5_000)]
        n_valid: usize,
    },
    /// Compare analytic gradients with finite differences.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::BuildGraph { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Bench { common, .. }
            | Command::Ablate { common, .. }
            | Command::GradCheck { common, .. } => common,
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let settings = common
        .settings
        .iter()
        .map(|s| parse_setting(s))
        .collect::<Result<Vec<_>>>()?;
    let cfg = RunConfig::resolve(common.config.as_deref(), &settings)?;
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

/// Train and validation sets: loaded when paths are given, otherwise generated
/// with the validation set drawn from a different seed.
fn datasets(
    cfg: &RunConfig,
    train: Option<&Path>,
    valid: Option<&Path>,
    n_train: usize,
    n_valid: usize,
) -> Result<(Vec<crate::event::Sample>, Vec<crate::event::Sample>)> {
    let max = cfg.model.max_positions;
    let gen = |n: usize, seed: u64| {
        generate(&GeneratorConfig {
            n_users: n,
            seed,
            ..cfg.data.clone()
        })
    };
    let tr = match train {
        Some(p) => load_jsonl(p, max)?,
        None => gen(n_train, cfg.data.seed)?,
    };
    let va = match valid {
        Some(p) => load_jsonl(p, max)?,
        None => gen(n_valid, cfg.data.seed.wrapping_add(1))?,
    };
    Ok((tr, va))
}

fn train_cmd<F: Scalar>(cfg: &RunConfig, out: &Path, tr: &[crate::event::Sample], va: &[crate::event::Sample]) -> Result<serde_json::Value> {
    let (model, outcome) = train_new::<F>(&cfg.model, tr, va, &cfg.train, Some(out))?;
    let report = evaluate(&model, va, cfg.train.workers)?;
    Ok(serde_json::json!({
        "steps": outcome.steps,
        "best_step": outcome.best_step,
        "best_valid_auc": outcome.best_auc,
        "seconds": outcome.seconds,
        "valid": report.to_json(),
    }))
}

fn eval_cmd<F: Scalar>(ckpt: &Path, samples: &[crate::event::Sample], workers: usize) -> Result<serde_json::Value> {
    let model = Model::<F>::load(ckpt)?;
    Ok(evaluate(&model, samples, workers)?.to_json())
}

fn execute(cmd: &Command, cfg: RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let out = &cmd.common().out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let print = |stdout: &mut dyn Write, s: &str| -> Result<()> {
        stdout.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e))
    };
    match cmd {
        Command::GenData { train, valid, .. } => {
            let (tr, va) = datasets(&cfg, None, None, *train, *valid)?;
            write_jsonl(&out.join("train.jsonl"), &tr)?;
            write_jsonl(&out.join("valid.jsonl"), &va)?;
            let prevalence = estimate_prevalence(&cfg.data, 20_000, cfg.data.seed)?;
            let summary = serde_json::json!({
                "config": cfg.data,
                "train": tr.len(),
                "valid": va.len(),
                "pattern_prevalence": prevalence,
                "bayes_auc": bayes_auc(cfg.data.p_convert_when_pattern, cfg.data.p_convert_base, prevalence),
            });
            write_json(&out.join("data_summary.json"), &summary)?;
            print(stdout, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
        }
        Command::BuildGraph { input, dump, .. } => {
            let samples = load_jsonl(input, usize::MAX)?;
            let mut text = String::new();
            let mut edges = 0;
            let mut nodes = 0;
            for (i, s) in samples.iter().enumerate() {
                let g = crate::graph::build_graph_with(&s.sequence, &cfg.model.graph);
                edges += g.num_edges();
                nodes += g.num_nodes();
                if *dump {
                    if samples.len() > 1 {
                        text.push_str(&format!("# sample {i}\n"));
                    }
                    text.push_str(&g.dump());
                }
            }
            if *dump {
                write(&out.join("graph_dump.txt"), &text)?;
                print(stdout, &text)?;
            } else {
                let summary = serde_json::json!({"samples": samples.len(), "nodes": nodes, "edges": edges});
                write_json(&out.join("graph_summary.json"), &summary)?;
                print(stdout, &(summary.to_string() + "\n"))?;
            }
        }
        Command::Train {
            train,
            valid,
            n_train,
            n_valid,
            ..
        } => {
            let (tr, va) = datasets(&cfg, train.as_deref(), valid.as_deref(), *n_train, *n_valid)?;
            write_json(&out.join("config.json"), &cfg)?;
            let summary = match cfg.train.precision {
                Precision::F32 => train_cmd::<f32>(&cfg, out, &tr, &va)?,
                Precision::F64 => train_cmd::<f64>(&cfg, out, &tr, &va)?,
            };
            write_json(&out.join("train_summary.json"), &summary)?;
            print(stdout, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
        }
        Command::Eval { ckpt, input, .. } => {
            let header = checkpoint::read_header(ckpt)?;
            let samples = load_jsonl(input, usize::MAX)?;
            let report = match header.precision {
                Precision::F32 => eval_cmd::<f32>(ckpt, &samples, cfg.train.workers)?,
                Precision::F64 => eval_cmd::<f64>(ckpt, &samples, cfg.train.workers)?,
            };
            write_json(&out.join("eval.json"), &report)?;
            print(stdout, &(report.to_string() + "\n"))?;
        }
        Command::Bench { lengths, repeats, .. } => {
            let mut speed = cfg.bench.clone();
            if let Some(l) = lengths {
                speed.lengths = l.clone();
            }
            if let Some(r) = repeats {
                speed.repeats = *r;
            }
            let rows = measure_ti_speed(&cfg.model, &speed)?;
            let csv = speed_csv(&rows);
            write(&out.join("bench.csv"), &csv)?;
            write(&out.join("bench_ratios.csv"), &speed_ratio_table(&rows))?;
            print(stdout, &csv)?;
        }
        Command::Ablate {
            train,
            valid,
            n_train,
            n_valid,
            ..
        } => {
            let (tr, va) = datasets(&cfg, train.as_deref(), valid.as_deref(), *n_train, *n_valid)?;
            write_json(&out.join("config.json"), &cfg)?;
            let rows = match cfg.train.precision {
                Precision::F32 => ablate::<f32>(&cfg.model, &tr, &va, &cfg.train, Some(out))?,
                Precision::F64 => ablate::<f64>(&cfg.model, &tr, &va, &cfg.train, Some(out))?,
            };
            let report = ablation_report(&rows);
            write(&out.join("ablation.txt"), &report)?;
            write_json(&out.join("ablation.json"), &rows)?;
            print(stdout, &report)?;
        }
        Command::GradCheck { probes, eps, tol, .. } => {
            let samples = generate(&GeneratorConfig {
                n_users: 2,
                seq_len_min: 6,
                seq_len_max: 12,
                ..cfg.data.clone()
            })?;
            let gc = GradCheckConfig {
                probes: *probes,
                eps: *eps,
                tol: *tol,
                seed: cfg.train.seed,
                skip_kinks: true,
            };
            let (report, per_module) = check_gradients(&cfg.model, cfg.train.seed, &samples, &gc)?;
            let mut text = String::from("module,max_rel_error\n");
            for (m, e) in &per_module {
                text.push_str(&format!("{m},{e:.3e}\n"));
            }
            text.push_str(&format!("all,{:.3e}\n", report.max_rel_error));
            write(&out.join("grad_check.csv"), &text)?;
            print(stdout, &text)?;
            if !report.passed() {
                return Err(Error::Config(format!(
                    "gradient check failed: max relative error {:.3e} >= {:.1e}",
                    report.max_rel_error, report.tol
                )));
            }
        }
    }
    Ok(())
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(text.as_bytes());
                    0
                }
                _ => {
                    let _ = stderr.write_all(text.as_bytes());
                    1
                }
            };
        }
    };
    // A configuration that does not resolve is a usage error.
    let cfg = match resolve(cli.command.common()) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return 1;
        }
    };
    match execute(&cli.command, cfg, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}
