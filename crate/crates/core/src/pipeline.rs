//! Prompt construction for evaluation modes, batch detection and scoring.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{splitmix64, Scene};
use crate::detector::{detect_encoded, Detection, Encoded, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ApResult, CategoryAp, GroundTruth, ScoredBox};
use crate::numerics::ParamStore;
use crate::prompts::{average_fuse, encode_text, fnv1a, fuse, CategoryPrompt, PromptCache};

/// How category prompts are formed at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalMode {
    Text,
    /// Mean of `n` cached visual prompts.
    Visual(usize),
    /// Learned fusion of the text prompt with a visual-`n` prompt.
    Multimodal(usize),
    /// Visual-`n` prompt added to every text token feature, then averaged.
    Average(usize),
}

impl EvalMode {
    pub fn needs_cache(&self) -> bool {
        !matches!(self, EvalMode::Text)
    }

    pub fn prompt_count(&self) -> Option<usize> {
        match *self {
            EvalMode::Text => None,
            EvalMode::Visual(n) | EvalMode::Multimodal(n) | EvalMode::Average(n) => Some(n),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            EvalMode::Text => "text",
            EvalMode::Visual(_) => "visual",
            EvalMode::Multimodal(_) => "multimodal",
            EvalMode::Average(_) => "average",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.prompt_count() {
            None => write!(f, "{}", self.kind()),
            Some(n) => write!(f, "{}-{n}", self.kind()),
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "text" {
            return Ok(EvalMode::Text);
        }
        let bad = || Error::Config(format!("unknown prompt mode '{s}' (expected text, visual-N, multimodal-N or average-N)"));
        let (kind, n) = s.rsplit_once('-').ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(Error::Config(format!("prompt mode '{s}' needs N >= 1")));
        }
        match kind {
            "visual" => Ok(EvalMode::Visual(n)),
            "multimodal" => Ok(EvalMode::Multimodal(n)),
            "average" => Ok(EvalMode::Average(n)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for EvalMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EvalMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The stream used for draw `draw` of `mode`.
pub fn mode_rng(seed: u64, mode: EvalMode, draw: usize) -> ChaCha8Rng {
    let h = fnv1a(mode.to_string().as_bytes());
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ h) ^ draw as u64))
}

/// One prompt per category, in `categories` order.
pub fn build_prompts(
    mode: EvalMode,
    store: &ParamStore,
    model: &ModelConfig,
    categories: &[String],
    cache: Option<&PromptCache>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CategoryPrompt>> {
    let cache = match (mode.needs_cache(), cache) {
        (true, None) => return Err(Error::MissingPrerequisite(format!("prompt mode {mode} needs a prompt cache"))),
        (_, c) => c,
    };
    categories
        .iter()
        .map(|name| {
            Ok(match mode {
                EvalMode::Text => CategoryPrompt::Textual(encode_text(name, store, model)?),
                EvalMode::Visual(n) => CategoryPrompt::Visual(cache.expect("checked").aggregate(name, n, rng)?),
                EvalMode::Multimodal(n) => {
                    let v = cache.expect("checked").aggregate(name, n, rng)?;
                    CategoryPrompt::Fused(fuse(&encode_text(name, store, model)?, &v, store, model)?)
                }
                EvalMode::Average(n) => {
                    let v = cache.expect("checked").aggregate(name, n, rng)?;
                    CategoryPrompt::Fused(average_fuse(&encode_text(name, store, model)?, &v)?)
                }
            })
        })
        .collect()
}

/// Detections of one image, as written to JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image: usize,
    pub detections: Vec<Detection>,
}

pub fn detect_all(
    store: &ParamStore,
    model: &ModelConfig,
    scenes: &[Scene],
    encoded: &[Encoded],
    prompts: &[CategoryPrompt],
    conf_threshold: f64,
) -> Result<Vec<ImageDetections>> {
    if scenes.len() != encoded.len() {
        return Err(Error::Dimension(format!("{} scenes but {} encodings", scenes.len(), encoded.len())));
    }
    scenes
        .iter()
        .zip(encoded)
        .map(|(s, e)| {
            Ok(ImageDetections {
                image: s.index,
                detections: detect_encoded(store, model, e, prompts, conf_threshold)?,
            })
        })
        .collect()
}

pub fn to_jsonl(dets: &[ImageDetections]) -> Result<String> {
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn scored_boxes(dets: &[ImageDetections], categories: &[String]) -> Result<Vec<ScoredBox>> {
    let mut out = Vec::new();
    for img in dets {
        for d in &img.detections {
            let category = categories
                .get(d.label)
                .ok_or_else(|| Error::Validation(format!("detection label {} has no category", d.label)))?;
            out.push(ScoredBox {
                image: img.image,
                category: category.clone(),
                bbox: d.bbox,
                confidence: d.confidence,
            });
        }
    }
    Ok(out)
}

pub fn ground_truth(scenes: &[Scene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .flat_map(|s| {
            s.annotations.iter().map(|a| GroundTruth {
                image: s.index,
                category: a.category.clone(),
                bbox: a.bbox,
            })
        })
        .collect()
}

/// Element-wise mean of results over the same categories and thresholds.
pub fn mean_results(results: &[ApResult]) -> Result<ApResult> {
    let first = results.first().ok_or_else(|| Error::Evaluation("no results to average".into()))?;
    let n = results.len() as f64;
    let mut out = first.clone();
    for (name, c) in out.per_category.iter_mut() {
        let mut acc = CategoryAp {
            per_threshold: vec![0.0; c.per_threshold.len()],
            ap50: 0.0,
            ap: 0.0,
            num_gt: c.num_gt,
        };
        for r in results {
            let o = r
                .per_category
                .get(name)
                .ok_or_else(|| Error::Evaluation(format!("category '{name}' missing from a result")))?;
            for (a, v) in acc.per_threshold.iter_mut().zip(&o.per_threshold) {
                *a += v / n;
            }
            acc.ap50 += o.ap50 / n;
            acc.ap += o.ap / n;
        }
        *c = acc;
    }
    out.ap50 = results.iter().map(|r| r.ap50).sum::<f64>() / n;
    out.map = results.iter().map(|r| r.map).sum::<f64>() / n;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ModeEvaluation {
    pub mode: EvalMode,
    /// Mean over draws.
    pub result: ApResult,
    /// Detections of the first draw.
    pub detections: Vec<ImageDetections>,
}

/// Evaluates `mode` on pre-encoded scenes. Stochastic modes are averaged over
/// `draws` independent prompt draws.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_mode(
    store: &ParamStore,
    model: &ModelConfig,
    scenes: &[Scene],
    encoded: &[Encoded],
    categories: &[String],
    cache: Option<&PromptCache>,
    mode: EvalMode,
    draws: usize,
    conf_threshold: f64,
    thresholds: &[f64],
    seed: u64,
) -> Result<ModeEvaluation> {
    let draws = if mode.needs_cache() { draws.max(1) } else { 1 };
    let gts = ground_truth(scenes);
    let mut results = Vec::with_capacity(draws);
    let mut first = None;
    for draw in 0..draws {
        let mut rng = mode_rng(seed, mode, draw);
        let prompts = build_prompts(mode, store, model, categories, cache, &mut rng)?;
        let dets = detect_all(store, model, scenes, encoded, &prompts, conf_threshold)?;
        results.push(evaluate(&scored_boxes(&dets, categories)?, &gts, categories, thresholds)?);
        if first.is_none() {
            first = Some(dets);
        }
    }
    Ok(ModeEvaluation {
        mode,
        result: mean_results(&results)?,
        detections: first.expect("at least one draw"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, DatasetSpec};
    use crate::detector::init_params;
    use crate::eval::coco_thresholds;
    use crate::prompts::build_cache;
    use crate::training::encode_scenes;

    #[test]
    fn mode_strings() {
        for (s, m) in [
            ("text", EvalMode::Text),
            ("visual-8", EvalMode::Visual(8)),
            ("multimodal-32", EvalMode::Multimodal(32)),
            ("average-4", EvalMode::Average(4)),
        ] {
            assert_eq!(s.parse::<EvalMode>().unwrap(), m);
            assert_eq!(m.to_string(), s);
        }
        for bad in ["visual", "visual-0", "fancy-3", "text-2", ""] {
            assert!(bad.parse::<EvalMode>().is_err(), "{bad}");
        }
        let j = serde_json::to_string(&EvalMode::Visual(3)).unwrap();
        assert_eq!(j, "\"visual-3\"");
    }

    #[test]
    fn modes_run_and_are_deterministic() {
        let model = ModelConfig {
            d: 16,
            heads: 2,
            num_queries: 5,
            enc_layers: 1,
            dec_layers: 1,
            ffn_mult: 2,
            vpe_points: 2,
            ..ModelConfig::default()
        };
        let spec = DatasetSpec::three_category();
        let scenes: Vec<Scene> = (0..3).map(|i| generate_scene(&spec, i).unwrap()).collect();
        let store = init_params(&model, 3).unwrap();
        let cache = build_cache(&scenes, &store, &model).unwrap();
        let enc = encode_scenes(&store, &model, &scenes).unwrap();
        let cats = spec.category_names();
        assert!(matches!(
            evaluate_mode(&store, &model, &scenes, &enc, &cats, None, EvalMode::Visual(1), 2, 0.0, &[0.5], 1),
            Err(Error::MissingPrerequisite(_))
        ));
        for mode in [EvalMode::Text, EvalMode::Visual(2), EvalMode::Multimodal(2), EvalMode::Average(2)] {
            let a = evaluate_mode(&store, &model, &scenes, &enc, &cats, Some(&cache), mode, 2, 0.0, &coco_thresholds(), 1).unwrap();
            let b = evaluate_mode(&store, &model, &scenes, &enc, &cats, Some(&cache), mode, 2, 0.0, &coco_thresholds(), 1).unwrap();
            assert_eq!(a.result, b.result);
            assert_eq!(to_jsonl(&a.detections).unwrap(), to_jsonl(&b.detections).unwrap());
            assert!((0.0..=1.0).contains(&a.result.ap50));
            // confidence threshold 0 keeps every query
            assert!(a.detections.iter().all(|d| d.detections.len() == model.num_queries));
        }
    }

    #[test]
    fn mean_of_results() {
        let mk = |v: f64| {
            let mut per = std::collections::BTreeMap::new();
            per.insert(
                "a".to_string(),
                CategoryAp {
                    per_threshold: vec![v, v / 2.0],
                    ap50: v,
                    ap: 0.75 * v,
                    num_gt: 1,
                },
            );
            ApResult {
                thresholds: vec![0.5, 0.75],
                per_category: per,
                ap50: v,
                map: 0.75 * v,
            }
        };
        let m = mean_results(&[mk(0.2), mk(0.6)]).unwrap();
        assert!((m.ap50 - 0.4).abs() < 1e-15);
        assert!((m.per_category["a"].per_threshold[1] - 0.2).abs() < 1e-15);
        assert!(mean_results(&[]).is_err());
    }
}
