//! With equal conversion rates the history carries no information: a
//! trained model's validation AUC stays near one half.

use tga::data::{generate, GeneratorConfig};
use tga::model::ModelConfig;
use tga::train::{train_new, TrainConfig};

fn main() -> tga::Result<()> {
    let data = GeneratorConfig {
        seq_len_min: 16,
        seq_len_max: 32,
        p_convert_when_pattern: 0.3,
        p_convert_base: 0.3,
        ..GeneratorConfig::default()
    };
    let train_set = generate(&GeneratorConfig { n_users: 3000, seed: 1, ..data.clone() })?;
    let valid_set = generate(&GeneratorConfig { n_users: 3000, seed: 2, ..data })?;
    let model = ModelConfig {
        d: 8,
        key_dim: 8,
        value_dim: 8,
        ffn_dim: Some(64),
        mlp_hidden: vec![32, 16],
        ..ModelConfig::default()
    };
    let run = TrainConfig {
        layers: 1,
        lr: 3e-3,
        batch_size: 64,
        epochs: 1,
        eval_every: 10,
        ..TrainConfig::default()
    };
    let (_, out) = train_new::<f32>(&model, &train_set, &valid_set, &run, None)?;
    let last = out.log.iter().rev().find_map(|r| r.valid_auc).unwrap_or(f64::NAN);
    println!("final valid AUC {last:.4} (best {:.4}, picked on the same set)", out.best_auc.unwrap_or(f64::NAN));
    Ok(())
}
