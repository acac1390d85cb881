use std::path::Path;

use promptdet_cli::config::RunConfig;

/// A tiny model and dataset that train in seconds.
pub fn tiny(out: &Path, extra: &[&str]) -> RunConfig {
    let mut sets: Vec<String> = [
        "model.d=16",
        "model.heads=2",
        "model.num_queries=6",
        "model.enc_layers=1",
        "model.dec_layers=1",
        "model.ffn_mult=2",
        "model.vpe_points=2",
        "model.image_size=32",
        "stage1.epochs=1",
        "stage2.epochs=1",
        "stage3.epochs=1",
        "eval_draws=2",
        "n=2",
        "gradcheck.max_entries=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let spec = out.join("spec.json");
    std::fs::create_dir_all(out).unwrap();
    let mut s = promptdet::data::DatasetSpec::three_category();
    s.train_scenes = 8;
    s.test_scenes = 4;
    s.image_size = 32;
    s.min_size = 5.0;
    s.max_size = 10.0;
    std::fs::write(&spec, serde_json::to_string(&s).unwrap()).unwrap();
    sets.push(format!("dataset={}", spec.display()));
    sets.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::resolve(None, &sets, Some(3), Some(&out.join("run"))).unwrap()
}
