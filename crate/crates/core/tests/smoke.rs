use tga::data::{generate, GeneratorConfig};
use tga::model::ModelConfig;
use tga::train::{evaluate, train_new, TrainConfig};

#[test]
fn generate_train_and_score() {
    let cfg = GeneratorConfig {
        seq_len_min: 8,
        seq_len_max: 24,
        ..GeneratorConfig::default()
    };
    let tr = generate(&GeneratorConfig { n_users: 400, seed: 1, ..cfg.clone() }).unwrap();
    let va = generate(&GeneratorConfig { n_users: 200, seed: 2, ..cfg }).unwrap();
    let model = ModelConfig {
        d: 4,
        key_dim: 4,
        value_dim: 4,
        ffn_dim: Some(16),
        mlp_hidden: vec![8],
        ..ModelConfig::default()
    };
    let run = TrainConfig {
        layers: 1,
        epochs: 1,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let (m, out) = train_new::<f32>(&model, &tr, &va, &run, None).unwrap();
    assert!(out.steps > 0);
    let report = evaluate(&m, &va, 1).unwrap();
    assert_eq!(report.n, 200);
    assert!(report.logloss.is_finite());
    let auc = report.auc.value().unwrap();
    assert!((0.0..=1.0).contains(&auc));
}
