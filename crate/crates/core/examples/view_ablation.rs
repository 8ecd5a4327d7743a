//! Train the full model and one model per removed view on the same data
//! and seed, and report AUC deltas (negative means worse than full).

use tga::data::{generate, GeneratorConfig};
use tga::model::ModelConfig;
use tga::train::{ablate, ablation_report, TrainConfig};

fn main() -> tga::Result<()> {
    let data = GeneratorConfig {
        seq_len_min: 16,
        seq_len_max: 48,
        ..GeneratorConfig::default()
    };
    let train_set = generate(&GeneratorConfig { n_users: 4000, seed: 1, ..data.clone() })?;
    let valid_set = generate(&GeneratorConfig { n_users: 2000, seed: 2, ..data })?;
    let model = ModelConfig {
        d: 8,
        key_dim: 8,
        value_dim: 8,
        ffn_dim: Some(64),
        mlp_hidden: vec![64, 32],
        ..ModelConfig::default()
    };
    let run = TrainConfig {
        layers: 1,
        lr: 3e-3,
        batch_size: 64,
        epochs: 2,
        ..TrainConfig::default()
    };
    let rows = ablate::<f32>(&model, &train_set, &valid_set, &run, None)?;
    print!("{}", ablation_report(&rows));
    Ok(())
}
