use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use promptdet::detector::Encoded;
use promptdet::eval::{coco_thresholds, ApResult};
use promptdet::pipeline::{evaluate_mode, EvalMode};
use promptdet::prompts::PromptCache;
use promptdet::training::{encode_scenes, PromptCount, StageConfig};
use promptdet::ParamStore;
use serde::{Deserialize, Serialize};

use crate::artifacts::{file_sha256, log_line, write_artifact};
use crate::commands::{ensure_cache, train_stage, Layout};
use crate::config::{Dataset, RunConfig};
use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sweep: String,
    pub mode: String,
    /// Prompts averaged per category; empty for text mode.
    pub n: Option<usize>,
    /// Whether the detector was frozen in Stage II.
    pub frozen: bool,
    /// `learned`, `average` or `none`.
    pub fusion: String,
    pub stage2_m: usize,
    pub stage3_count: String,
    pub ap50: f64,
    pub map: f64,
}

pub const CSV_HEADER: &str = "sweep,mode,n,frozen,fusion,stage2_m,stage3_count,ap50,map";

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let n = r.n.map(|n| n.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{n},{},{},{},{},{},{}\n",
            r.sweep, r.mode, r.frozen, r.fusion, r.stage2_m, r.stage3_count, r.ap50, r.map
        ));
    }
    out
}

/// A trained model variant: checkpoint plus the cache built for it.
#[derive(Debug, Clone)]
struct Variant {
    checkpoint: PathBuf,
    cache: PathBuf,
    frozen: bool,
    stage2_m: usize,
    stage3_count: PromptCount,
}

struct Evaluator<'a> {
    cfg: &'a RunConfig,
    data: &'a Dataset,
    stores: BTreeMap<PathBuf, (ParamStore, Vec<Encoded>)>,
    caches: BTreeMap<PathBuf, PromptCache>,
    done: BTreeMap<(PathBuf, PathBuf, String), ApResult>,
}

impl Evaluator<'_> {
    fn eval(&mut self, v: &Variant, mode: EvalMode) -> Result<ApResult, Failure> {
        let key = (v.checkpoint.clone(), v.cache.clone(), mode.to_string());
        if let Some(r) = self.done.get(&key) {
            return Ok(r.clone());
        }
        if !self.stores.contains_key(&v.checkpoint) {
            let store = ParamStore::load(&v.checkpoint)?;
            let enc = encode_scenes(&store, &self.cfg.model, &self.data.test)?;
            self.stores.insert(v.checkpoint.clone(), (store, enc));
        }
        if !self.caches.contains_key(&v.cache) {
            self.caches.insert(v.cache.clone(), PromptCache::load(&v.cache)?);
        }
        let (store, enc) = &self.stores[&v.checkpoint];
        let r = evaluate_mode(
            store,
            &self.cfg.model,
            &self.data.test,
            enc,
            &self.data.spec.category_names(),
            Some(&self.caches[&v.cache]),
            mode,
            self.cfg.eval_draws,
            self.cfg.conf_threshold,
            &coco_thresholds(),
            self.cfg.seed,
        )?
        .result;
        log_line(
            &self.cfg.out,
            &format!("{} {mode}: AP50 {:.4} mAP {:.4}", v.checkpoint.display(), r.ap50, r.map),
        );
        self.done.insert(key, r.clone());
        Ok(r)
    }

    fn row(&mut self, sweep: &str, v: &Variant, mode: EvalMode) -> Result<AblationRow, Failure> {
        let r = self.eval(v, mode)?;
        Ok(AblationRow {
            sweep: sweep.into(),
            mode: mode.kind().into(),
            n: mode.prompt_count(),
            frozen: v.frozen,
            fusion: match mode {
                EvalMode::Multimodal(_) => "learned",
                EvalMode::Average(_) => "average",
                _ => "none",
            }
            .into(),
            stage2_m: v.stage2_m,
            stage3_count: v.stage3_count.to_string(),
            ap50: r.ap50,
            map: r.map,
        })
    }
}

fn stage2_variant(
    cfg: &RunConfig,
    data: &Dataset,
    main: &Layout,
    dir: &Path,
    stage: &StageConfig,
) -> Result<Variant, Failure> {
    let l = Layout::new(dir);
    train_stage(cfg, data, stage, Some(&main.checkpoint(1)), None, &l.checkpoint(2), &l.loss(2), true)?;
    ensure_cache(cfg, data, &l.checkpoint(2), &l.cache())?;
    Ok(Variant {
        checkpoint: l.checkpoint(2),
        cache: l.cache(),
        frozen: stage.freezes("det"),
        stage2_m: stage.instances_per_category,
        stage3_count: cfg.stage3.fusion_train_prompt_count,
    })
}

/// Trains what is missing, then evaluates the sweep grid in order.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>, Failure> {
    let data = cfg.scenes()?;
    let main = Layout::new(&cfg.out);
    let root = cfg.out.join("ablation");
    train_stage(cfg, &data, &cfg.stage1, None, None, &main.checkpoint(1), &main.loss(1), true)?;
    train_stage(cfg, &data, &cfg.stage2, Some(&main.checkpoint(1)), None, &main.checkpoint(2), &main.loss(2), true)?;
    let cache = ensure_cache(cfg, &data, &main.checkpoint(2), &main.cache())?;
    let cache_path = main.cache();
    let stage3 = |count: PromptCount, dir: &Path| -> Result<Variant, Failure> {
        let l = Layout::new(dir);
        let s3 = StageConfig {
            fusion_train_prompt_count: count,
            ..cfg.stage3.clone()
        };
        train_stage(cfg, &data, &s3, Some(&main.checkpoint(2)), Some((&cache, &cache_path)), &l.checkpoint(3), &l.loss(3), true)?;
        Ok(Variant {
            checkpoint: l.checkpoint(3),
            cache: cache_path.clone(),
            frozen: cfg.stage2.freezes("det"),
            stage2_m: cfg.stage2.instances_per_category,
            stage3_count: count,
        })
    };
    let full = stage3(cfg.stage3.fusion_train_prompt_count, &cfg.out)?;
    let stage2_main = Variant {
        checkpoint: main.checkpoint(2),
        ..full.clone()
    };

    let ns = &cfg.ablation.n_values;
    let n_max = *ns.iter().max().unwrap_or(&cfg.n);
    let mut ev = Evaluator {
        cfg,
        data: &data,
        stores: BTreeMap::new(),
        caches: BTreeMap::new(),
        done: BTreeMap::new(),
    };
    let mut rows = Vec::new();

    rows.push(ev.row("prompt", &full, EvalMode::Text)?);
    for &n in ns {
        rows.push(ev.row("prompt", &full, EvalMode::Visual(n))?);
    }
    for &n in ns {
        rows.push(ev.row("prompt", &full, EvalMode::Multimodal(n))?);
    }

    let mut joint_cfg = cfg.stage2.clone();
    joint_cfg.frozen.retain(|p| p != "det");
    let other = if cfg.stage2.freezes("det") { "stage2_joint" } else { "stage2_frozen" };
    if !cfg.stage2.freezes("det") {
        joint_cfg.frozen.push("det".into());
    }
    let other = stage2_variant(cfg, &data, &main, &root.join(other), &joint_cfg)?;
    let (frozen, unfrozen) = if stage2_main.frozen { (&stage2_main, &other) } else { (&other, &stage2_main) };
    for v in [frozen, unfrozen] {
        for &n in ns {
            rows.push(ev.row("freeze", v, EvalMode::Visual(n))?);
        }
    }

    for &n in ns {
        rows.push(ev.row("fusion", &full, EvalMode::Multimodal(n))?);
        rows.push(ev.row("fusion", &full, EvalMode::Average(n))?);
    }

    for &m in &cfg.ablation.stage2_m {
        let v = if m == cfg.stage2.instances_per_category {
            stage2_main.clone()
        } else {
            let s2 = StageConfig {
                instances_per_category: m,
                ..cfg.stage2.clone()
            };
            stage2_variant(cfg, &data, &main, &root.join(format!("stage2_m{m}")), &s2)?
        };
        for &n in ns {
            rows.push(ev.row("stage2_m", &v, EvalMode::Visual(n))?);
        }
    }

    for &c in &cfg.ablation.stage3_counts {
        let v = if c == cfg.stage3.fusion_train_prompt_count {
            full.clone()
        } else {
            stage3(c, &root.join(format!("stage3_count_{c}")))?
        };
        rows.push(ev.row("stage3_count", &v, EvalMode::Multimodal(n_max))?);
    }

    let path = cfg.out.join("ablation.csv");
    write_artifact(cfg, &path, rows_csv(&rows).as_bytes(), Some(file_sha256(&full.checkpoint)?))?;
    log_line(&cfg.out, &format!("wrote {} rows to {}", rows.len(), path.display()));
    Ok(rows)
}
