//! Train a small model on generated data, evaluate it against the Bayes
//! ceiling, and check that the saved checkpoint scores identically.

use tga::data::{bayes_auc, Generated, Generator, GeneratorConfig};
use tga::model::{Model, ModelConfig};
use tga::train::{evaluate, train_new, TrainConfig};

fn split(cfg: &GeneratorConfig, n: usize, seed: u64) -> tga::Result<Vec<Generated>> {
    Ok(Generator::new(GeneratorConfig {
        n_users: n,
        seed,
        ..cfg.clone()
    })?
    .collect())
}

fn main() -> tga::Result<()> {
    let data = GeneratorConfig {
        seq_len_min: 16,
        seq_len_max: 48,
        ..GeneratorConfig::default()
    };
    let train_set: Vec<_> = split(&data, 8000, 1)?.into_iter().map(|g| g.sample).collect();
    let valid = split(&data, 2000, 2)?;
    let prevalence = valid.iter().filter(|g| g.has_pattern).count() as f64 / valid.len() as f64;
    let valid_set: Vec<_> = valid.into_iter().map(|g| g.sample).collect();

    let model_cfg = ModelConfig {
        d: 8,
        key_dim: 8,
        value_dim: 8,
        ffn_dim: Some(64),
        mlp_hidden: vec![64, 32],
        ..ModelConfig::default()
    };
    let run = TrainConfig {
        layers: 2,
        lr: 3e-3,
        batch_size: 64,
        epochs: 2,
        eval_every: 50,
        ..TrainConfig::default()
    };
    let out = std::env::temp_dir().join("tga-train-example");
    let (model, outcome) = train_new::<f32>(&model_cfg, &train_set, &valid_set, &run, Some(&out))?;
    print!("{}", outcome.csv());
    let report = evaluate(&model, &valid_set, 1)?;
    println!(
        "{} parameters, {} steps in {:.1}s",
        outcome.header.parameters, outcome.steps, outcome.seconds
    );
    println!("valid AUC {:.4} (Bayes ceiling {:.4})", report.auc.or_nan(), bayes_auc(0.7, 0.1, prevalence));

    let reloaded = Model::<f32>::load(&out.join("best.ckpt"))?;
    let again = evaluate(&reloaded, &valid_set, 1)?;
    assert_eq!(report.auc, again.auc);
    println!("checkpoint in {} reproduces the AUC", out.display());
    Ok(())
}
