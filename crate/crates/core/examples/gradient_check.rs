//! Finite-difference check of the whole model (embeddings, three encoder
//! layers, head and loss) in 64-bit, with the worst error per module.

use tga::data::{generate, GeneratorConfig};
use tga::model::{check_gradients, ModelConfig};
use tga::numerics::GradCheckConfig;

fn main() -> tga::Result<()> {
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
        n_users: 2,
        seq_len_min: 6,
        seq_len_max: 10,
        profile_dim: 4,
        plant_rate: 1.0,
        ..GeneratorConfig::default()
    })?;
    let (report, per_module) = check_gradients(&cfg, 0, &samples, &GradCheckConfig::default())?;
    for (module, err) in per_module {
        println!("{module:<18} {err:.3e}");
    }
    println!(
        "{} probes, {} kinks skipped, max relative error {:.3e} ({})",
        report.probes.len(),
        report.kinks_skipped,
        report.max_rel_error,
        if report.passed() { "pass" } else { "fail" }
    );
    Ok(())
}
