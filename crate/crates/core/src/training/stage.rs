use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{forward_loss, LossBreakdown};
use super::{PromptCount, PromptMode, StageConfig, TrainOptions};
use crate::data::{splitmix64, Annotation, Scene};
use crate::detector::{encode_image, encode_on_tape, forward, token_heads, Encoded, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::optim::{accumulate, clip_global_norm};
use crate::numerics::{Adam, GradMap, LevelShape, ParamStore, Tape, Tensor, Var};
use crate::prompts::{fuse_on_tape, text_features, tokenize, visual_prompts, PromptCache};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub store: ParamStore,
    pub log: Vec<StepLog>,
}

/// Independent stream per stage, so running stages separately or in one
/// invocation draws the same numbers.
pub fn stage_rng(seed: u64, stage: u8) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed) ^ stage as u64))
}

/// For every category present, up to `m` of its annotation indices drawn
/// without replacement. Categories appear in `categories` order.
pub fn sample_stage2_instances<R: Rng + ?Sized>(
    annotations: &[Annotation],
    categories: &[String],
    m: usize,
    rng: &mut R,
) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::new();
    for (k, name) in categories.iter().enumerate() {
        let idx: Vec<usize> = annotations
            .iter()
            .enumerate()
            .filter(|(_, a)| &a.category == name)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mut pick: Vec<usize> = sample(rng, idx.len(), m.min(idx.len()))
            .into_iter()
            .map(|j| idx[j])
            .collect();
        pick.sort_unstable();
        out.push((k, pick));
    }
    out
}

pub fn encode_scenes(store: &ParamStore, model: &ModelConfig, scenes: &[Scene]) -> Result<Vec<Encoded>> {
    scenes.iter().map(|s| encode_image(store, model, &s.image)).collect()
}

/// `step,cls,l1,giou,total`, one row per optimizer step.
pub fn loss_csv(log: &[StepLog]) -> String {
    let mut text = String::from("step,cls,l1,giou,total\n");
    for r in log {
        text.push_str(&format!("{},{},{},{},{}\n", r.step, r.cls, r.l1, r.giou, r.total));
    }
    text
}

pub fn write_loss_csv(log: &[StepLog], path: &Path) -> Result<()> {
    std::fs::write(path, loss_csv(log)).map_err(|e| Error::io(path, e))
}

/// What a single step feeds the detector.
#[derive(Debug, Clone, Copy)]
enum StepPrompts {
    Text,
    Visual,
    Multimodal(usize),
}

struct Context<'a> {
    cfg: &'a StageConfig,
    opts: &'a TrainOptions,
    model: &'a ModelConfig,
    categories: &'a [String],
    tokens: Vec<Vec<usize>>,
    /// Text features when the text encoder is frozen.
    text_cache: Option<Vec<Tensor>>,
    memory_cache: Option<Vec<Encoded>>,
    cache: Option<&'a PromptCache>,
}

fn text_prompt(ctx: &Context, tape: &mut Tape, store: &ParamStore, k: usize) -> Result<Var> {
    match &ctx.text_cache {
        Some(t) => Ok(tape.constant(t[k].clone())),
        None => text_features(tape, store, ctx.model, &ctx.tokens[k]),
    }
}

/// One `[1, d]` prompt per entry of `picks`: the mean visual prompt over the
/// listed annotations.
pub(super) fn instance_prompts(
    tape: &mut Tape,
    store: &ParamStore,
    model: &ModelConfig,
    annotations: &[Annotation],
    picks: &[(usize, Vec<usize>)],
    memory: Var,
    levels: &[LevelShape],
) -> Result<Vec<Var>> {
    let boxes: Vec<BBox> = picks.iter().flat_map(|(_, ix)| ix.iter().map(|&i| annotations[i].bbox)).collect();
    if boxes.is_empty() {
        return Ok(Vec::new());
    }
    let v = visual_prompts(tape, store, model, &boxes, memory, levels)?;
    let mut avg = vec![0.0; picks.len() * boxes.len()];
    let mut col = 0;
    for (r, (_, ix)) in picks.iter().enumerate() {
        for _ in ix {
            avg[r * boxes.len() + col] = 1.0 / ix.len() as f64;
            col += 1;
        }
    }
    let a = tape.constant(Tensor::matrix(picks.len(), boxes.len(), avg)?);
    let per_cat = tape.matmul(a, v)?;
    (0..picks.len()).map(|r| tape.gather_rows(per_cat, &[r])).collect()
}

fn image_step(
    ctx: &Context,
    store: &ParamStore,
    scene: &Scene,
    scene_pos: usize,
    mode: StepPrompts,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, GradMap)> {
    let model = ctx.model;
    let mut tape = Tape::new();
    let (memory, levels) = match &ctx.memory_cache {
        Some(m) => (tape.constant(m[scene_pos].memory.clone()), m[scene_pos].levels.clone()),
        None => {
            let s = model.image_size;
            let x = tape.constant(scene.image.clone().reshaped(vec![s * s, 3])?);
            (encode_on_tape(&mut tape, store, model, x)?, model.level_shapes())
        }
    };
    let cat_of = |a: &Annotation| {
        ctx.categories
            .iter()
            .position(|c| c == &a.category)
            .ok_or_else(|| Error::Validation(format!("scene {} uses unknown category '{}'", scene.index, a.category)))
    };
    let gt: Vec<[f64; 4]> = scene.annotations.iter().map(|a| a.bbox.to_array()).collect();
    let mut labels = scene.annotations.iter().map(cat_of).collect::<Result<Vec<_>>>()?;
    let mut prompts = Vec::new();
    match mode {
        StepPrompts::Text => {
            for k in 0..ctx.categories.len() {
                prompts.push(text_prompt(ctx, &mut tape, store, k)?);
            }
        }
        StepPrompts::Visual => {
            let picks = sample_stage2_instances(&scene.annotations, ctx.categories, ctx.cfg.instances_per_category, rng);
            prompts = instance_prompts(&mut tape, store, model, &scene.annotations, &picks, memory, &levels)?;
            let position: Vec<Option<usize>> = (0..ctx.categories.len())
                .map(|k| picks.iter().position(|(c, _)| *c == k))
                .collect();
            labels = labels.iter().map(|&k| position[k].expect("present category")).collect();
        }
        StepPrompts::Multimodal(n) => {
            let cache = ctx.cache.ok_or_else(|| Error::MissingPrerequisite("prompt cache".into()))?;
            for (k, name) in ctx.categories.iter().enumerate() {
                let g = text_prompt(ctx, &mut tape, store, k)?;
                let v = cache.aggregate(name, n, rng)?;
                let v = tape.constant(v.embedding.reshaped(vec![1, model.d])?);
                prompts.push(fuse_on_tape(&mut tape, store, model, g, v)?);
            }
        }
    }
    let out = forward(&mut tape, store, model, memory, &levels, &prompts, None)?;
    let heads = token_heads(&mut tape, store, model, memory, &levels, &prompts)?;
    let loss = forward_loss(&mut tape, &out, heads, &labels, &gt, &ctx.opts.weights, None)?;
    let grads = tape.backward(loss.total)?.into_param_grads(store);
    Ok((loss.breakdown, grads))
}

/// Trains the unfrozen parameters of `store` for one stage.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    cfg: &StageConfig,
    opts: &TrainOptions,
    model: &ModelConfig,
    mut store: ParamStore,
    scenes: &[Scene],
    categories: &[String],
    cache: Option<&PromptCache>,
    seed: u64,
) -> Result<StageOutcome> {
    cfg.validate()?;
    opts.validate()?;
    model.validate()?;
    if scenes.is_empty() {
        return Err(Error::Validation("training needs at least one scene".into()));
    }
    if cfg.prompt_mode == PromptMode::Multimodal && cache.is_none() {
        return Err(Error::MissingPrerequisite(format!(
            "stage {} needs a prompt cache built from a stage 2 checkpoint",
            cfg.stage
        )));
    }
    if let Some(c) = cache {
        if c.dim != model.d {
            return Err(Error::Dimension(format!("prompt cache width {} differs from model width {}", c.dim, model.d)));
        }
        if let Some(missing) = categories.iter().find(|k| c.len(k) == 0) {
            return Err(Error::MissingPrerequisite(format!("prompt cache has no entries for '{missing}'")));
        }
    }
    store.set_frozen(cfg.frozen.iter().cloned());
    let tokens = categories.iter().map(|c| tokenize(c)).collect::<Result<Vec<_>>>()?;
    let text_cache = if cfg.freezes("text") {
        let mut out = Vec::with_capacity(tokens.len());
        for t in &tokens {
            let mut tape = Tape::new();
            let g = text_features(&mut tape, &store, model, t)?;
            out.push(tape.value(g).clone());
        }
        Some(out)
    } else {
        None
    };
    let memory_cache = if cfg.freezes("det") {
        Some(encode_scenes(&store, model, scenes)?)
    } else {
        None
    };
    let ctx = Context {
        cfg,
        opts,
        model,
        categories,
        tokens,
        text_cache,
        memory_cache,
        cache,
    };
    let mut rng = stage_rng(seed, cfg.stage);
    let mut adam = Adam::new(cfg.lr);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            let mode = match cfg.prompt_mode {
                PromptMode::Text => StepPrompts::Text,
                PromptMode::Visual if cfg.is_joint() => {
                    if rng.gen_bool(0.5) {
                        StepPrompts::Text
                    } else {
                        StepPrompts::Visual
                    }
                }
                PromptMode::Visual => StepPrompts::Visual,
                PromptMode::Multimodal => StepPrompts::Multimodal(match cfg.fusion_train_prompt_count {
                    PromptCount::Fixed(n) => n,
                    PromptCount::Random(_) => rng.gen_range(1..=opts.max_prompt_count),
                }),
            };
            let scale = 1.0 / batch.len() as f64;
            let mut acc = GradMap::new();
            let mut sums = [0.0; 4];
            for &i in batch {
                let (b, g) = image_step(&ctx, &store, &scenes[i], i, mode, &mut rng)?;
                accumulate(&mut acc, g, scale);
                for (s, v) in sums.iter_mut().zip([b.cls, b.l1, b.giou, b.total]) {
                    *s += v * scale;
                }
            }
            if sums.iter().any(|v| !v.is_finite()) {
                return Err(Error::Evaluation(format!("non-finite loss at step {}", log.len() + 1)));
            }
            clip_global_norm(&mut acc, opts.grad_clip);
            adam.step(&mut store, &acc);
            log.push(StepLog {
                step: log.len() + 1,
                cls: sums[0],
                l1: sums[1],
                giou: sums[2],
                total: sums[3],
            });
        }
    }
    Ok(StageOutcome { store, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, DatasetSpec};
    use crate::detector::init_params;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            d: 16,
            heads: 2,
            num_queries: 5,
            enc_layers: 1,
            dec_layers: 1,
            ffn_mult: 2,
            vpe_points: 2,
            ..ModelConfig::default()
        }
    }

    fn ann(cat: &str) -> Annotation {
        Annotation {
            category: cat.into(),
            bbox: BBox::new(0.5, 0.5, 0.1, 0.1).unwrap(),
        }
    }

    #[test]
    fn stage2_sampling_rules() {
        let cats: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let anns = vec![ann("b"), ann("a"), ann("b"), ann("b")];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = sample_stage2_instances(&anns[..2], &cats, 1, &mut rng);
        assert_eq!(one, vec![(0, vec![1]), (1, vec![0])]);
        for _ in 0..50 {
            for (k, ix) in sample_stage2_instances(&anns, &cats, 2, &mut rng) {
                assert!(ix.iter().all(|&i| anns[i].category == cats[k]));
                assert_eq!(ix.len(), if k == 0 { 1 } else { 2 });
            }
        }
        // uniform choice among three instances
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let picks = sample_stage2_instances(&anns, &cats, 1, &mut rng);
            let (_, ix) = picks.iter().find(|(k, _)| *k == 1).unwrap();
            counts[[0usize, 3, 1, 2][ix[0]]] += 1;
        }
        let p = 1.0 / 3.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    fn setup() -> (ModelConfig, ParamStore, Vec<Scene>, Vec<String>) {
        let model = tiny_model();
        let spec = DatasetSpec::three_category();
        let scenes: Vec<Scene> = (0..3).map(|i| generate_scene(&spec, i).unwrap()).collect();
        (model.clone(), init_params(&model, 1).unwrap(), scenes, spec.category_names())
    }

    fn short(stage: u8) -> StageConfig {
        StageConfig {
            epochs: 1,
            ..StageConfig::default_for(stage).unwrap()
        }
    }

    #[test]
    fn stage1_is_deterministic() {
        let (model, store, scenes, cats) = setup();
        let opts = TrainOptions { batch_size: 2, ..TrainOptions::default() };
        let a = run_stage(&short(1), &opts, &model, store.clone(), &scenes, &cats, None, 5).unwrap();
        let b = run_stage(&short(1), &opts, &model, store.clone(), &scenes, &cats, None, 5).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 2);
        assert_eq!(a.store.to_bytes(), b.store.to_bytes());
        assert_ne!(a.store.prefix_bytes("det"), store.prefix_bytes("det"));
        assert_eq!(a.store.prefix_bytes("vpe"), store.prefix_bytes("vpe"));
        for r in &a.log {
            assert!((r.total - (2.0 * r.cls + 5.0 * r.l1 + 2.0 * r.giou)).abs() < 1e-9);
        }
    }

    #[test]
    fn later_stages_keep_frozen_bytes() {
        let (model, store, scenes, cats) = setup();
        let opts = TrainOptions::default();
        let s2 = run_stage(&short(2), &opts, &model, store.clone(), &scenes, &cats, None, 5).unwrap();
        for p in ["det", "text", "fusion"] {
            assert_eq!(s2.store.prefix_bytes(p), store.prefix_bytes(p), "{p}");
        }
        assert_ne!(s2.store.prefix_bytes("vpe"), store.prefix_bytes("vpe"));
        assert!(matches!(
            run_stage(&short(3), &opts, &model, s2.store.clone(), &scenes, &cats, None, 5),
            Err(Error::MissingPrerequisite(_))
        ));
        let cache = crate::prompts::build_cache(&scenes, &s2.store, &model).unwrap();
        let mut cfg3 = short(3);
        cfg3.fusion_train_prompt_count = PromptCount::Random(super::super::RandomCount::Random);
        let s3 = run_stage(&cfg3, &opts, &model, s2.store.clone(), &scenes, &cats, Some(&cache), 5).unwrap();
        for p in ["det", "text", "vpe"] {
            assert_eq!(s3.store.prefix_bytes(p), s2.store.prefix_bytes(p), "{p}");
        }
        assert_ne!(s3.store.prefix_bytes("fusion"), s2.store.prefix_bytes("fusion"));
    }

    #[test]
    fn joint_stage2_moves_detector() {
        let (model, store, scenes, cats) = setup();
        let mut cfg = short(2);
        cfg.frozen = vec!["text".into(), "fusion".into()];
        let out = run_stage(&cfg, &TrainOptions::default(), &model, store.clone(), &scenes, &cats, None, 9).unwrap();
        assert_ne!(out.store.prefix_bytes("det"), store.prefix_bytes("det"));
        assert_eq!(out.store.prefix_bytes("text"), store.prefix_bytes("text"));
    }
}
