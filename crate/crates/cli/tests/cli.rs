use std::process::Command;

use promptdet::pipeline::EvalMode;
use promptdet_cli::ablate::{cmd_ablate, CSV_HEADER};
use promptdet_cli::artifacts::read_meta;
use promptdet_cli::commands::{cmd_build_cache, cmd_detect, cmd_eval, cmd_gen_data, cmd_train, run_gradcheck, Layout};
use promptdet_cli::Failure;

mod common;
use common::tiny;

#[test]
fn stage_by_stage_equals_all_at_once() {
    let dir = tempfile::tempdir().unwrap();
    let all = tiny(&dir.path().join("a"), &[]);
    cmd_train(&all).unwrap();
    let mut split = tiny(&dir.path().join("b"), &["stages=[1]"]);
    cmd_train(&split).unwrap();
    split.stages = vec![2, 3];
    cmd_train(&split).unwrap();
    for s in 1..=3 {
        let a = std::fs::read(Layout::new(&all.out).checkpoint(s)).unwrap();
        let b = std::fs::read(Layout::new(&split.out).checkpoint(s)).unwrap();
        assert_eq!(a, b, "stage {s}");
    }
    let m = read_meta(&Layout::new(&all.out).checkpoint(2)).unwrap();
    assert_eq!(m.seed, 3);
    assert!(m.source_sha256.is_some());
}

#[test]
fn missing_prerequisites_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &["stages=[2]"]);
    let e = cmd_train(&cfg).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("stage1.pdps"), "{e}");
    let e = cmd_build_cache(&cfg).unwrap_err();
    assert!(e.to_string().contains("stage2.pdps"), "{e}");
    assert_eq!(cmd_eval(&cfg).unwrap_err().exit_code(), 3);
    let cfg = tiny(dir.path(), &["stages=[1]", "prompt_mode=visual"]);
    cmd_train(&cfg).unwrap();
    let e = cmd_detect(&cfg).unwrap_err();
    assert!(e.to_string().contains("cache.json"), "{e}");
}

#[test]
fn eval_is_repeatable_and_modes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    cmd_train(&cfg).unwrap();
    let l = Layout::new(&cfg.out);
    assert!(l.cache().exists());
    for extra in [["prompt_mode=visual", "n=1"], ["prompt_mode=visual", "n=8"], ["prompt_mode=multimodal", "n=2"]] {
        let c = tiny(dir.path(), &extra);
        let a = cmd_eval(&c).unwrap();
        let bytes = std::fs::read(l.metrics(c.mode())).unwrap();
        let b = cmd_eval(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(bytes, std::fs::read(l.metrics(c.mode())).unwrap());
        assert!((0.0..=1.0).contains(&a.report.ap50) && (0.0..=1.0).contains(&a.report.map));
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert!(v["per_category"].is_object() && v["config_hash"].is_string());
        cmd_detect(&c).unwrap();
        let jsonl = std::fs::read_to_string(l.detections(c.mode())).unwrap();
        assert_eq!(jsonl.lines().count(), 4);
        assert!(l.pr(c.mode()).exists());
    }
    assert!(l.metrics(EvalMode::Visual(8)).exists());
}

#[test]
fn ablation_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(
        dir.path(),
        &["ablation.n_values=[1,2]", "ablation.stage2_m=[1,2]", "ablation.stage3_counts=[1,\"random\"]"],
    );
    let rows = cmd_ablate(&cfg).unwrap();
    // prompt 1+2+2, freeze 2*2, fusion 2*2, stage2_m 2*2, stage3_count 2
    assert_eq!(rows.len(), 19);
    let mut keys: Vec<String> = rows
        .iter()
        .map(|r| format!("{}|{}|{:?}|{}|{}|{}|{}", r.sweep, r.mode, r.n, r.frozen, r.fusion, r.stage2_m, r.stage3_count))
        .collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), rows.len());
    assert!(rows.iter().any(|r| r.sweep == "fusion" && r.fusion == "average"));
    assert!(rows.iter().any(|r| r.sweep == "freeze" && !r.frozen));
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.ap50) && (0.0..=1.0).contains(&r.map)));
    let csv = std::fs::read_to_string(cfg.out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    // a second run reuses every checkpoint and reproduces the report
    let again = cmd_ablate(&cfg).unwrap();
    assert_eq!(again, rows);
}

struct Corrupted<'a>(&'a dyn promptdet::numerics::Objective);

impl promptdet::numerics::Objective for Corrupted<'_> {
    fn value(&self, p: &promptdet::ParamStore) -> promptdet::Result<f64> {
        self.0.value(p)
    }
    fn value_and_grad(&self, p: &promptdet::ParamStore) -> promptdet::Result<(f64, promptdet::numerics::GradMap)> {
        let (v, mut g) = self.0.value_and_grad(p)?;
        for x in g.values_mut().flat_map(|v| v.iter_mut()) {
            *x *= 1.5;
        }
        Ok((v, g))
    }
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    let report = promptdet_cli::commands::cmd_gradcheck(&cfg).unwrap();
    let store = promptdet::detector::init_params(&cfg.model, cfg.seed).unwrap();
    let mut paths: Vec<&String> = report.params.iter().map(|p| &p.path).collect();
    assert_eq!(paths.len(), store.paths().count());
    paths.dedup();
    assert_eq!(paths.len(), store.paths().count());

    let data = cfg.scenes().unwrap();
    let obj = promptdet::training::FullObjective::new(
        &cfg.model,
        &store,
        &data.train[0],
        &data.spec.category_names(),
        cfg.train.weights,
        &promptdet::training::ObjectiveTerm::ALL,
    )
    .unwrap();
    let e = run_gradcheck(&Corrupted(&obj), &store, &cfg).unwrap_err();
    assert!(matches!(e, Failure::Check(_)));
    assert_eq!(e.exit_code(), 4);
}

#[test]
fn gen_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), &[]);
    let data_dir = cmd_gen_data(&cfg).unwrap();
    let from_disk = tiny(dir.path(), &[&format!("data_dir={}", data_dir.display())]);
    let a = cfg.scenes().unwrap();
    let b = from_disk.scenes().unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.test, b.test);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptdet"))
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["eval", "--set", "model.heads=\"x\""]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.heads"));
    let out = bin()
        .args(["build-cache", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage2.pdps"));
}
