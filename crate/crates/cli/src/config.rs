use std::path::{Path, PathBuf};

use promptdet::data::{generate_split, load_dataset, DatasetSpec, Scene, Split};
use promptdet::detector::ModelConfig;
use promptdet::pipeline::EvalMode;
use promptdet::training::{PromptCount, StageConfig, TrainOptions};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Text,
    Visual,
    Multimodal,
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Scene index of the training split used as the 1-image batch.
    pub scene: usize,
    pub eps: f64,
    pub tolerance: f64,
    /// Entries checked per parameter tensor; 0 checks all of them.
    pub max_entries: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            scene: 0,
            eps: 1e-3,
            tolerance: 1e-4,
            max_entries: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub n_values: Vec<usize>,
    pub stage2_m: Vec<usize>,
    pub stage3_counts: Vec<PromptCount>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            n_values: vec![1, 4, 8, 16, 32],
            stage2_m: vec![1, 4, 8],
            stage3_counts: vec![
                PromptCount::Fixed(1),
                PromptCount::Random(promptdet::training::RandomCount::Random),
                PromptCount::Fixed(32),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset spec JSON; the built-in reference spec when absent.
    pub dataset: Option<PathBuf>,
    /// Directory written by `gen-data`; overrides `dataset`.
    pub data_dir: Option<PathBuf>,
    pub model: ModelConfig,
    /// Stages run by `train`, in order.
    pub stages: Vec<u8>,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub train: TrainOptions,
    pub prompt_mode: PromptKind,
    /// Visual prompts averaged per category at inference.
    pub n: usize,
    /// Independent prompt draws averaged by `eval` for stochastic modes.
    pub eval_draws: usize,
    pub conf_threshold: f64,
    /// Checkpoint for `detect` and `eval`; the latest stage in `out` when absent.
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub gradcheck: GradcheckConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            data_dir: None,
            model: ModelConfig::default(),
            stages: vec![1, 2, 3],
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            stage3: StageConfig::stage3(),
            train: TrainOptions::default(),
            prompt_mode: PromptKind::Text,
            n: 8,
            eval_draws: 5,
            conf_threshold: 0.0,
            checkpoint: None,
            out: PathBuf::from("runs/default"),
            seed: 0,
            gradcheck: GradcheckConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Sets `path` (dot separated) in `root` to `value`, creating objects on the
/// way. The value is parsed as JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), Failure> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Config(format!("override '{assignment}' is not of the form key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Failure::Config(format!("override '{assignment}' has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if !node.is_object() {
            return Err(Failure::Config(format!(
                "override '{path}': '{}' is not an object",
                keys[..i].join(".")
            )));
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last key")
}

/// Recursively overlays `top` onto `base`; non-object values replace.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

impl RunConfig {
    /// Defaults, overlaid by the file, then `--set`s, then `--seed`/`--out`.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
        out: Option<&Path>,
    ) -> Result<Self, Failure> {
        let mut root = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(p) = file {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            if !v.is_object() {
                return Err(Failure::Config(format!("{}: config must be a JSON object", p.display())));
            }
            merge(&mut root, v);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(root)
            .map_err(|e| Failure::Config(format!("invalid config at '{}': {}", e.path(), e.inner())))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out = o.to_path_buf();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate()?;
        self.train.validate()?;
        for (s, c) in [(1, &self.stage1), (2, &self.stage2), (3, &self.stage3)] {
            if c.stage != s {
                return Err(Failure::Config(format!("stage{s}.stage is {}", c.stage)));
            }
            c.validate()?;
        }
        if let Some(s) = self.stages.iter().find(|s| !(1..=3).contains(*s)) {
            return Err(Failure::Config(format!("unknown stage {s} in stages")));
        }
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Failure::Config("stages must be strictly increasing".into()));
        }
        if self.n == 0 || self.eval_draws == 0 {
            return Err(Failure::Config("n and eval_draws must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Failure::Config(format!("conf_threshold {} outside [0, 1]", self.conf_threshold)));
        }
        let a = &self.ablation;
        if a.n_values.contains(&0) || a.stage2_m.contains(&0) || a.stage3_counts.contains(&PromptCount::Fixed(0)) {
            return Err(Failure::Config("ablation counts must be at least 1".into()));
        }
        for p in [&self.dataset, &self.data_dir, &self.checkpoint].into_iter().flatten() {
            if !p.exists() {
                return Err(Failure::Config(format!("referenced path {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> EvalMode {
        match self.prompt_mode {
            PromptKind::Text => EvalMode::Text,
            PromptKind::Visual => EvalMode::Visual(self.n),
            PromptKind::Multimodal => EvalMode::Multimodal(self.n),
            PromptKind::Average => EvalMode::Average(self.n),
        }
    }

    pub fn stage(&self, s: u8) -> &StageConfig {
        match s {
            1 => &self.stage1,
            2 => &self.stage2,
            _ => &self.stage3,
        }
    }

    pub fn spec(&self) -> Result<DatasetSpec, Failure> {
        match &self.dataset {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Config(format!("cannot read dataset spec {}: {e}", p.display())))?;
                let spec: DatasetSpec = serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(&text))
                    .map_err(|e| Failure::Config(format!("{} at '{}': {}", p.display(), e.path(), e.inner())))?;
                spec.validate()?;
                Ok(spec)
            }
            None => Ok(DatasetSpec::reference()),
        }
    }

    /// The spec with its train and test scenes.
    pub fn scenes(&self) -> Result<Dataset, Failure> {
        if let Some(dir) = &self.data_dir {
            let (spec, all) = load_dataset(dir)?;
            let (train, test): (Vec<Scene>, Vec<Scene>) =
                all.into_iter().partition(|s| spec.split_range(Split::Train).contains(&s.index));
            return Ok(Dataset { spec, train, test });
        }
        let spec = self.spec()?;
        Ok(Dataset {
            train: generate_split(&spec, Split::Train)?,
            test: generate_split(&spec, Split::Test)?,
            spec,
        })
    }
}

pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
}
