use std::path::{Path, PathBuf};

use promptdet::data::export_dataset;
use promptdet::detector::init_params;
use promptdet::eval::{coco_thresholds, pr_csv, MetricsReport};
use promptdet::numerics::{finite_diff_check, CheckOptions, CheckReport, Objective};
use promptdet::pipeline::{detect_all, build_prompts, mode_rng, evaluate_mode, to_jsonl, EvalMode, ModeEvaluation};
use promptdet::prompts::{build_cache, PromptCache};
use promptdet::training::{encode_scenes, loss_csv, run_stage, FullObjective, LossWeights, ObjectiveTerm, StageConfig};
use promptdet::ParamStore;
use serde::{Deserialize, Serialize};

use crate::artifacts::{config_hash, file_sha256, log_line, read_meta, require, sha256_hex, write_artifact};
use crate::config::{Dataset, RunConfig};
use crate::Failure;

/// File names inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn checkpoint(&self, stage: u8) -> PathBuf {
        self.dir.join(format!("stage{stage}.pdps"))
    }

    pub fn loss(&self, stage: u8) -> PathBuf {
        self.dir.join(format!("stage{stage}_loss.csv"))
    }

    pub fn cache(&self) -> PathBuf {
        self.dir.join("cache.json")
    }

    pub fn detections(&self, mode: EvalMode) -> PathBuf {
        self.dir.join(format!("detections_{mode}.jsonl"))
    }

    pub fn metrics(&self, mode: EvalMode) -> PathBuf {
        self.dir.join(format!("metrics_{mode}.json"))
    }

    pub fn pr(&self, mode: EvalMode) -> PathBuf {
        self.dir.join(format!("pr_{mode}.csv"))
    }

    /// The highest stage checkpoint present.
    pub fn latest_checkpoint(&self) -> Option<PathBuf> {
        (1..=3).rev().map(|s| self.checkpoint(s)).find(|p| p.exists())
    }
}

fn load_store(path: &Path) -> Result<ParamStore, Failure> {
    require(path, "checkpoint", "train the preceding stage first")?;
    Ok(ParamStore::load(path)?)
}

/// Hash of everything that determines a stage checkpoint.
pub fn train_key(cfg: &RunConfig, data: &Dataset, stage: &StageConfig, source: Option<&str>, cache: Option<&str>) -> String {
    let v = serde_json::json!({
        "model": cfg.model,
        "train": cfg.train,
        "stage": stage,
        "spec": data.spec,
        "seed": cfg.seed,
        "source": source,
        "cache": cache,
    });
    sha256_hex(v.to_string().as_bytes())
}

/// Trains one stage from `source` (fresh init for stage 1) into `dest`.
/// An existing checkpoint whose recorded key matches is kept when `reuse`.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    cfg: &RunConfig,
    data: &Dataset,
    stage: &StageConfig,
    source: Option<&Path>,
    cache: Option<(&PromptCache, &Path)>,
    dest: &Path,
    loss_path: &Path,
    reuse: bool,
) -> Result<(), Failure> {
    let (store, source_sha) = match source {
        Some(p) => (load_store(p)?, Some(file_sha256(p)?)),
        None if stage.stage == 1 => (init_params(&cfg.model, cfg.seed)?, None),
        None => return Err(Failure::Missing(format!("stage {} needs a predecessor checkpoint", stage.stage))),
    };
    let cache_sha = match cache {
        Some((_, p)) => Some(file_sha256(p)?),
        None => None,
    };
    let key = train_key(cfg, data, stage, source_sha.as_deref(), cache_sha.as_deref());
    if reuse && dest.exists() {
        if let Some(m) = read_meta(dest) {
            if m.key.as_deref() == Some(key.as_str()) && file_sha256(dest)? == m.sha256 {
                log_line(&cfg.out, &format!("reusing {}", dest.display()));
                return Ok(());
            }
        }
    }
    log_line(&cfg.out, &format!("training stage {} into {}", stage.stage, dest.display()));
    let names = data.spec.category_names();
    let out = run_stage(stage, &cfg.train, &cfg.model, store, &data.train, &names, cache.map(|c| c.0), cfg.seed)?;
    let mut meta = write_artifact(cfg, dest, &out.store.to_bytes(), source_sha)?;
    meta.key = Some(key);
    crate::artifacts::write_meta(dest, &meta)?;
    write_artifact(cfg, loss_path, loss_csv(&out.log).as_bytes(), Some(meta.sha256.clone()))?;
    if let Some(last) = out.log.last() {
        log_line(
            &cfg.out,
            &format!("stage {} done: {} steps, final loss {:.4}", stage.stage, last.step, last.total),
        );
    }
    Ok(())
}

/// Loads the cache at `path` if it was built from `checkpoint`, else builds
/// and writes it.
pub fn ensure_cache(cfg: &RunConfig, data: &Dataset, checkpoint: &Path, path: &Path) -> Result<PromptCache, Failure> {
    let sha = file_sha256(checkpoint)?;
    if path.exists() {
        if let Some(m) = read_meta(path) {
            if m.source_sha256.as_deref() == Some(sha.as_str()) && file_sha256(path)? == m.sha256 {
                return Ok(PromptCache::load(path)?);
            }
        }
    }
    log_line(&cfg.out, &format!("building prompt cache {} from {}", path.display(), checkpoint.display()));
    let store = load_store(checkpoint)?;
    let cache = build_cache(&data.train, &store, &cfg.model)?;
    write_artifact(cfg, path, cache.to_json()?.as_bytes(), Some(sha))?;
    Ok(cache)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), Failure> {
    let data = cfg.scenes()?;
    let l = Layout::new(&cfg.out);
    for &s in &cfg.stages {
        let source = (s > 1).then(|| l.checkpoint(s - 1));
        if let Some(p) = &source {
            require(p, "checkpoint", &format!("run `promptdet train` with stage {} first", s - 1))?;
        }
        let cache = if s == 3 {
            Some(ensure_cache(cfg, &data, &l.checkpoint(2), &l.cache())?)
        } else {
            None
        };
        let cache_path = l.cache();
        train_stage(
            cfg,
            &data,
            cfg.stage(s),
            source.as_deref(),
            cache.as_ref().map(|c| (c, cache_path.as_path())),
            &l.checkpoint(s),
            &l.loss(s),
            false,
        )?;
    }
    Ok(())
}

pub fn cmd_build_cache(cfg: &RunConfig) -> Result<PromptCache, Failure> {
    let l = Layout::new(&cfg.out);
    require(&l.checkpoint(2), "stage 2 checkpoint", "run `promptdet train` with stage 2 first")?;
    let data = cfg.scenes()?;
    ensure_cache(cfg, &data, &l.checkpoint(2), &l.cache())
}

/// The checkpoint used by `detect` and `eval`.
pub fn eval_checkpoint(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    match &cfg.checkpoint {
        Some(p) => Ok(p.clone()),
        None => Layout::new(&cfg.out).latest_checkpoint().ok_or_else(|| {
            Failure::Missing(format!(
                "no checkpoint in {}; run `promptdet train` first",
                cfg.out.display()
            ))
        }),
    }
}

fn eval_cache(cfg: &RunConfig, mode: EvalMode) -> Result<Option<PromptCache>, Failure> {
    if !mode.needs_cache() {
        return Ok(None);
    }
    let path = Layout::new(&cfg.out).cache();
    require(&path, "prompt cache", "run `promptdet build-cache` first")?;
    Ok(Some(PromptCache::load(&path)?))
}

pub fn cmd_detect(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let mode = cfg.mode();
    let ckpt = eval_checkpoint(cfg)?;
    let store = load_store(&ckpt)?;
    let cache = eval_cache(cfg, mode)?;
    let data = cfg.scenes()?;
    let names = data.spec.category_names();
    let enc = encode_scenes(&store, &cfg.model, &data.test)?;
    let mut rng = mode_rng(cfg.seed, mode, 0);
    let prompts = build_prompts(mode, &store, &cfg.model, &names, cache.as_ref(), &mut rng)?;
    let dets = detect_all(&store, &cfg.model, &data.test, &enc, &prompts, cfg.conf_threshold)?;
    let path = Layout::new(&cfg.out).detections(mode);
    write_artifact(cfg, &path, to_jsonl(&dets)?.as_bytes(), Some(file_sha256(&ckpt)?))?;
    log_line(&cfg.out, &format!("wrote {}", path.display()));
    Ok(path)
}

/// The metrics report with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    #[serde(flatten)]
    pub report: MetricsReport,
    pub mode: EvalMode,
    pub draws: usize,
    pub config_hash: String,
    pub seed: u64,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsFile, Failure> {
    let mode = cfg.mode();
    let ckpt = eval_checkpoint(cfg)?;
    let store = load_store(&ckpt)?;
    let cache = eval_cache(cfg, mode)?;
    let data = cfg.scenes()?;
    let names = data.spec.category_names();
    let enc = encode_scenes(&store, &cfg.model, &data.test)?;
    let thresholds = coco_thresholds();
    let ModeEvaluation { result, detections, .. } = evaluate_mode(
        &store,
        &cfg.model,
        &data.test,
        &enc,
        &names,
        cache.as_ref(),
        mode,
        cfg.eval_draws,
        cfg.conf_threshold,
        &thresholds,
        cfg.seed,
    )?;
    let file = MetricsFile {
        report: MetricsReport::from(&result),
        mode,
        draws: if mode.needs_cache() { cfg.eval_draws } else { 1 },
        config_hash: config_hash(cfg),
        seed: cfg.seed,
    };
    let l = Layout::new(&cfg.out);
    let source = Some(file_sha256(&ckpt)?);
    let json = serde_json::to_string_pretty(&file).map_err(|e| Failure::Other(e.into()))? + "\n";
    write_artifact(cfg, &l.metrics(mode), json.as_bytes(), source.clone())?;
    let scored = promptdet::pipeline::scored_boxes(&detections, &names)?;
    let gts = promptdet::pipeline::ground_truth(&data.test);
    write_artifact(cfg, &l.pr(mode), pr_csv(&scored, &gts, &result).as_bytes(), source)?;
    log_line(&cfg.out, &format!("{mode}: AP50 {:.4} mAP {:.4}", result.ap50, result.map));
    Ok(file)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let spec = cfg.spec()?;
    let dir = cfg.out.join("data");
    export_dataset(&spec, &dir)?;
    let manifest = dir.join("manifest.json");
    let bytes = std::fs::read(&manifest).map_err(|e| Failure::Other(e.into()))?;
    write_artifact(cfg, &manifest, &bytes, None)?;
    log_line(&cfg.out, &format!("wrote {} scenes to {}", spec.num_scenes(), dir.display()));
    Ok(dir)
}

/// Runs the check and fails with a check failure above the tolerance.
pub fn run_gradcheck(objective: &dyn Objective, store: &ParamStore, cfg: &RunConfig) -> Result<CheckReport, Failure> {
    let g = &cfg.gradcheck;
    let opts = CheckOptions {
        eps: g.eps,
        max_entries: (g.max_entries > 0).then_some(g.max_entries),
        seed: cfg.seed,
    };
    let report = finite_diff_check(objective, store, &opts)?;
    for p in &report.params {
        println!("{:<40} {:>6} {:.3e}", p.path, p.entries, p.max_rel_err);
    }
    for (module, err) in report.by_module() {
        let verdict = if err < g.tolerance { "ok" } else { "FAIL" };
        println!("module {module:<28} {err:.3e} {verdict}");
    }
    let worst = report.max_rel_err();
    if !(worst < g.tolerance) {
        return Err(Failure::Check(format!(
            "gradient check failed: max relative error {worst:.3e} exceeds {:.0e}",
            g.tolerance
        )));
    }
    Ok(report)
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<CheckReport, Failure> {
    let data = cfg.scenes()?;
    let scene = data
        .train
        .get(cfg.gradcheck.scene)
        .ok_or_else(|| Failure::Config(format!("gradcheck.scene {} is out of range", cfg.gradcheck.scene)))?;
    let mut store = init_params(&cfg.model, cfg.seed)?;
    store.unfreeze_all();
    let objective = FullObjective::new(
        &cfg.model,
        &store,
        scene,
        &data.spec.category_names(),
        LossWeights { ..cfg.train.weights },
        &ObjectiveTerm::ALL,
    )?;
    run_gradcheck(&objective, &store, cfg)
}
