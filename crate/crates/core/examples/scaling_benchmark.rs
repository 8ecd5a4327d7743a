//! Multiply-add counts and wall time of the graph encoder against full
//! attention as the sequence doubles.

use tga::baseline::count_flops_baseline;
use tga::encoder::count_flops;
use tga::model::ModelConfig;
use tga::train::{measure_ti_speed, speed_csv, speed_ratio_table, SpeedConfig};

fn main() -> tga::Result<()> {
    let cfg = ModelConfig {
        d: 16,
        ..ModelConfig::default()
    };
    let enc = cfg.encoder_config();
    println!("L,tga_ops,full_attention_ops");
    for l in [256, 512, 1024, 2048] {
        println!("{l},{},{}", count_flops(&enc, l), count_flops_baseline(&enc, l));
    }
    let rows = measure_ti_speed(
        &cfg,
        &SpeedConfig {
            lengths: vec![256, 512, 1024],
            repeats: 1,
            batch: 1,
            ..SpeedConfig::default()
        },
    )?;
    print!("{}", speed_csv(&rows));
    print!("{}", speed_ratio_table(&rows));
    Ok(())
}
