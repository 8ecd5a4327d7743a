//! Generate planted-pattern samples, report the pattern prevalence and the
//! Bayes-optimal AUC, and round-trip the data through JSONL.

use tga::data::{bayes_auc, load_jsonl, write_jsonl, Generated, Generator, GeneratorConfig};

fn main() -> tga::Result<()> {
    let cfg = GeneratorConfig {
        n_users: 2000,
        seed: 7,
        ..GeneratorConfig::default()
    };
    let gens: Vec<Generated> = Generator::new(cfg.clone())?.collect();
    let n = gens.len() as f64;
    let prevalence = gens.iter().filter(|g| g.has_pattern).count() as f64 / n;
    let pos_rate = gens.iter().filter(|g| g.sample.label == 1).count() as f64 / n;
    let mean_len = gens.iter().map(|g| g.sample.sequence.len()).sum::<usize>() as f64 / n;
    println!("samples {}, mean length {mean_len:.1}", gens.len());
    println!("pattern prevalence {prevalence:.3}, positive rate {pos_rate:.3}");
    println!(
        "Bayes-optimal AUC {:.4}",
        bayes_auc(cfg.p_convert_when_pattern, cfg.p_convert_base, prevalence)
    );

    let dir = std::env::temp_dir().join("tga-generate-data");
    std::fs::create_dir_all(&dir).map_err(|e| tga::Error::io(&dir, e))?;
    let path = dir.join("samples.jsonl");
    let samples: Vec<_> = gens.into_iter().map(|g| g.sample).collect();
    write_jsonl(&path, &samples)?;
    let back = load_jsonl(&path, 256)?;
    assert_eq!(back, samples);
    println!("wrote and re-read {}", path.display());
    Ok(())
}
