//! A click on the candidate followed three positions later by a cart. With
//! only neighbor edges enabled, no node sees both ends in one hop, so one
//! encoder layer cannot resolve the pattern and two can.
//!
//! `cargo run --release --example depth_probe -- 30000 8` reproduces the
//! acceptance setting; the defaults are a quicker demo.

use tga::data::{generate, GeneratorConfig};
use tga::graph::ViewSet;
use tga::model::ModelConfig;
use tga::train::{train_new, TrainConfig};

fn main() -> tga::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("a count"));
    let n_train = args.next().unwrap_or(10_000);
    let epochs = args.next().unwrap_or(4);

    let probe = GeneratorConfig::depth_probe();
    let train_set = generate(&GeneratorConfig { n_users: n_train, seed: 1, ..probe.clone() })?;
    let valid_set = generate(&GeneratorConfig { n_users: 3000, seed: 2, ..probe })?;
    let model = ModelConfig {
        d: 8,
        key_dim: 8,
        value_dim: 8,
        ffn_dim: Some(64),
        mlp_hidden: vec![64, 32],
        ..ModelConfig::default()
    };
    for layers in [1, 2] {
        let run = TrainConfig {
            layers,
            lr: 3e-3,
            batch_size: 64,
            epochs,
            enabled_views: ViewSet::parse("neighbor").expect("view name"),
            ..TrainConfig::default()
        };
        let (_, out) = train_new::<f32>(&model, &train_set, &valid_set, &run, None)?;
        println!("{layers} layer(s): best valid AUC {:.4}", out.best_auc.unwrap_or(f64::NAN));
    }
    Ok(())
}
