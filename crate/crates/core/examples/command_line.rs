//! Drive the command-line interface in-process: a config file overridden by
//! flags, graph dumping and evaluation output, all under one output directory.

use std::io::Write;

fn run(args: &[&str]) -> i32 {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = tga::cli::run(args.iter().copied(), &mut out, &mut err);
    std::io::stdout().write_all(&out).unwrap();
    std::io::stderr().write_all(&err).unwrap();
    code
}

fn main() {
    let dir = std::env::temp_dir().join("tga-command-line");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "# small and quick\nmodel.d = 4\nmodel.key_dim = 4\nmodel.value_dim = 4\nmodel.mlp_hidden = [16, 8]\n\
         train.layers = 1\ntrain.batch_size = 32\ndata.seq_len_min = 8\ndata.seq_len_max = 16\n",
    )
    .unwrap();
    let out = dir.join("out");
    let (cfg, out) = (cfg.to_str().unwrap(), out.to_str().unwrap());

    let common = ["--config", cfg, "--out", out, "--seed", "3"];
    let with = |head: &[&'static str], extra: &[&str]| -> Vec<String> {
        let mut v: Vec<String> = head.iter().map(|s| s.to_string()).collect();
        v.extend(common.iter().map(|s| s.to_string()));
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    };
    let call = |v: Vec<String>| {
        let refs: Vec<&str> = v.iter().map(String::as_str).collect();
        let code = run(&refs);
        println!("-> exit {code}");
        code
    };

    call(with(&["tga", "gen-data"], &["--train", "400", "--valid", "200"]));
    let train = format!("{out}/train.jsonl");
    let valid = format!("{out}/valid.jsonl");
    call(with(&["tga", "train"], &["--train", &train, "--valid", &valid, "--set", "train.epochs=2"]));
    call(with(&["tga", "eval"], &["--ckpt", &format!("{out}/best.ckpt"), "--input", &valid]));
    call(with(&["tga", "grad-check"], &["--probes", "20"]));
    // Unknown flags are usage errors.
    call(with(&["tga", "train"], &["--learning-rate", "1"]));
}
