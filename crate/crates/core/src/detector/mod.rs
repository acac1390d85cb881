//! The prompt-conditioned detector: convolutional backbone, transformer
//! encoder, similarity-based query selection, decoder, box head and cosine
//! classification against category prompts.

mod model;

pub use model::{
    box_head, decode, encode_on_tape, forward, pos_level, prompt_logits, select_indices, token_heads, ForwardOutput, TokenHeads,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sincos_block, BBox};
use crate::numerics::{nn, softmax_rows, LevelShape, ParamStore, Tape, Tensor};
use crate::prompts::{category_similarity, CategoryPrompt, TokenReduction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_mult: usize,
    pub image_size: usize,
    pub num_levels: usize,
    /// Deformable sampling points per head and level.
    pub vpe_points: usize,
    pub tau: f64,
    pub text_reduction: TokenReduction,
    /// Reference-box extent of selected queries, per level.
    pub level_extents: Vec<f64>,
    pub box_param: BoxParam,
    /// Supervise every encoder token with the detection loss, which trains
    /// the similarity scores that drive query selection.
    pub selection_loss: bool,
}

/// How the box head output is turned into a box.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxParam {
    /// `sigmoid(h(q))`.
    Absolute,
    /// `sigmoid(h(q) + logit(ref_box))`, offsets from the query's reference box.
    #[default]
    Anchored,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            num_queries: 20,
            enc_layers: 2,
            dec_layers: 2,
            ffn_mult: 4,
            image_size: 64,
            num_levels: 3,
            vpe_points: 4,
            tau: 0.1,
            text_reduction: TokenReduction::Max,
            level_extents: vec![0.15, 0.3, 0.5],
            box_param: BoxParam::default(),
            selection_loss: true,
        }
    }
}

impl ModelConfig {
    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d
    }

    pub fn levels(&self) -> usize {
        self.num_levels
    }

    /// Flattened level layout of the encoder tokens: the first level has
    /// stride 4, each further level halves the resolution.
    pub fn level_shapes(&self) -> Vec<LevelShape> {
        let mut out = Vec::with_capacity(self.num_levels);
        let mut side = self.image_size / 4;
        let mut offset = 0;
        for _ in 0..self.num_levels {
            out.push(LevelShape {
                height: side,
                width: side,
                offset,
            });
            offset += side * side;
            side /= 2;
        }
        out
    }

    pub fn num_tokens(&self) -> usize {
        self.level_shapes().iter().map(|l| l.height * l.width).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.d % 8 != 0 {
            return fail(format!("model width {} must be a positive multiple of 8", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("model width {} is not divisible by {} heads", self.d, self.heads));
        }
        if !(1..=3).contains(&self.num_levels) {
            return fail(format!("num_levels must be 1..=3, got {}", self.num_levels));
        }
        let div = 1usize << (self.num_levels + 1);
        if self.image_size == 0 || self.image_size % div != 0 {
            return fail(format!("image size {} must be divisible by {div}", self.image_size));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.tau));
        }
        if self.num_queries == 0 || self.num_queries > self.num_tokens() {
            return fail(format!(
                "num_queries {} must be in 1..={}",
                self.num_queries,
                self.num_tokens()
            ));
        }
        if self.level_extents.len() < self.num_levels || self.level_extents.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return fail("level_extents needs one value in (0,1] per level".into());
        }
        if self.vpe_points == 0 || self.ffn_mult == 0 {
            return fail("vpe_points and ffn_mult must be positive".into());
        }
        Ok(())
    }
}

/// Encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    /// `[tokens, d]`, levels stacked in order.
    pub memory: Tensor,
    pub levels: Vec<LevelShape>,
}

impl Encoded {
    /// Splits the flat memory back into per-level `[h, w, d]` maps.
    pub fn level_maps(&self) -> Vec<Tensor> {
        let d = self.memory.cols();
        self.levels
            .iter()
            .map(|l| {
                let a = l.offset * d;
                let b = (l.offset + l.height * l.width) * d;
                Tensor::new(vec![l.height, l.width, d], self.memory.values()[a..b].to_vec()).expect("level slice")
            })
            .collect()
    }
}

/// A selected query slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub content: Tensor,
    pub ref_box: BBox,
    /// (level, row, col) of the source token.
    pub source_index: (usize, usize, usize),
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Foreground scores, one per prompt.
    pub scores: Vec<f64>,
    pub label: usize,
    pub confidence: f64,
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let d = cfg.d;
    let mut cin = 3;
    for i in 1..=cfg.num_levels + 1 {
        s.init_linear_he(&format!("det.backbone.conv{i}"), 9 * cin, d, &mut rng)?;
        if i > 1 {
            s.init_layer_norm(&format!("det.backbone.norm{i}"), d)?;
        }
        cin = d;
    }
    s.init_normal("det.level_embed", &[cfg.num_levels, d], 0.5, &mut rng)?;
    for l in 0..cfg.enc_layers {
        let p = format!("det.encoder.layer{l}");
        nn::init_mha(&mut s, &format!("{p}.attn"), d, &mut rng)?;
        s.init_layer_norm(&format!("{p}.attn_norm"), d)?;
        nn::init_ffn(&mut s, &format!("{p}.ffn"), d, cfg.ffn_hidden(), &mut rng)?;
        s.init_layer_norm(&format!("{p}.ffn_norm"), d)?;
    }
    s.init_layer_norm("det.encoder.norm", d)?;
    for l in 0..cfg.dec_layers {
        let p = format!("det.decoder.layer{l}");
        nn::init_mha(&mut s, &format!("{p}.self_attn"), d, &mut rng)?;
        s.init_layer_norm(&format!("{p}.self_norm"), d)?;
        nn::init_mha(&mut s, &format!("{p}.cross_attn"), d, &mut rng)?;
        s.init_layer_norm(&format!("{p}.cross_norm"), d)?;
        nn::init_ffn(&mut s, &format!("{p}.ffn"), d, cfg.ffn_hidden(), &mut rng)?;
        s.init_layer_norm(&format!("{p}.ffn_norm"), d)?;
    }
    s.init_layer_norm("det.decoder.norm", d)?;
    let mut heads = vec!["det.box_head"];
    if cfg.selection_loss {
        heads.push("det.enc_box_head");
    }
    for h in heads {
        s.init_linear_he(&format!("{h}.fc1"), d, d, &mut rng)?;
        s.init_linear_he(&format!("{h}.fc2"), d, d, &mut rng)?;
        s.init_linear(&format!("{h}.fc3"), d, 4, &mut rng)?;
    }
    s.init_normal("det.bg_prompt", &[d], 1.0, &mut rng)?;
    crate::prompts::text::init(&mut s, cfg, &mut rng)?;
    crate::prompts::visual::init(&mut s, cfg, &mut rng)?;
    Ok(s)
}

/// 2D sinusoidal encoding of every token center, `[tokens, d]`.
pub fn token_positions(cfg: &ModelConfig) -> Tensor {
    let d = cfg.d;
    let mut out = Vec::with_capacity(cfg.num_tokens() * d);
    for l in cfg.level_shapes() {
        for r in 0..l.height {
            for c in 0..l.width {
                out.extend(sincos_block((c as f64 + 0.5) / l.width as f64, d / 2));
                out.extend(sincos_block((r as f64 + 0.5) / l.height as f64, d / 2));
            }
        }
    }
    Tensor::matrix(cfg.num_tokens(), d, out).expect("position table")
}

fn check_image(cfg: &ModelConfig, image: &Tensor) -> Result<()> {
    let s = cfg.image_size;
    if image.shape() != [s, s, 3] {
        return Err(Error::Dimension(format!(
            "image must be [{s}, {s}, 3], got {:?}",
            image.shape()
        )));
    }
    Ok(())
}

/// Backbone feature maps, one `[h, w, d]` tensor per level, before the encoder.
pub fn backbone_forward(store: &ParamStore, cfg: &ModelConfig, image: &Tensor) -> Result<Vec<Tensor>> {
    check_image(cfg, image)?;
    let mut tape = Tape::new();
    let x = tape.constant(image.clone().reshaped(vec![cfg.image_size * cfg.image_size, 3])?);
    let levels = model::backbone(&mut tape, store, cfg, x)?;
    Ok(levels
        .iter()
        .zip(cfg.level_shapes())
        .map(|(v, l)| tape.value(*v).clone().reshaped(vec![l.height, l.width, cfg.d]).expect("level shape"))
        .collect())
}

/// Backbone and encoder; the result does not depend on any prompt.
pub fn encode_image(store: &ParamStore, cfg: &ModelConfig, image: &Tensor) -> Result<Encoded> {
    check_image(cfg, image)?;
    let mut tape = Tape::new();
    let x = tape.constant(image.clone().reshaped(vec![cfg.image_size * cfg.image_size, 3])?);
    let memory = encode_on_tape(&mut tape, store, cfg, x)?;
    Ok(Encoded {
        memory: tape.value(memory).clone(),
        levels: cfg.level_shapes(),
    })
}

/// `(level, row, col)` of flat token index `t`.
pub fn token_source(levels: &[LevelShape], t: usize) -> (usize, usize, usize) {
    let (li, lvl) = levels
        .iter()
        .enumerate()
        .rev()
        .find(|(_, l)| l.offset <= t)
        .expect("token inside a level");
    let local = t - lvl.offset;
    (li, local / lvl.width, local % lvl.width)
}

/// Token center with the level's default extent.
pub fn ref_box(cfg: &ModelConfig, levels: &[LevelShape], t: usize) -> Result<BBox> {
    let (li, r, c) = token_source(levels, t);
    let ext = *cfg
        .level_extents
        .get(li)
        .ok_or_else(|| Error::Config(format!("no reference extent for level {li}")))?;
    BBox::new(
        (c as f64 + 0.5) / levels[li].width as f64,
        (r as f64 + 0.5) / levels[li].height as f64,
        ext,
        ext,
    )
}

/// Top-`num_queries` tokens by their best prompt similarity.
pub fn select_queries(encoded: &Encoded, prompts: &[CategoryPrompt], cfg: &ModelConfig) -> Result<Vec<Query>> {
    let rows: Vec<Tensor> = prompts.iter().map(CategoryPrompt::rows).collect();
    let picked = select_indices(&encoded.memory, &rows, cfg.num_queries, cfg.text_reduction)?;
    let d = encoded.memory.cols();
    let mut out = Vec::with_capacity(picked.len());
    for (t, score) in picked {
        let (li, r, c) = token_source(&encoded.levels, t);
        out.push(Query {
            content: Tensor::vector(encoded.memory.values()[t * d..(t + 1) * d].to_vec()),
            ref_box: ref_box(cfg, &encoded.levels, t)?,
            source_index: (li, r, c),
            score,
        });
    }
    Ok(out)
}

/// Softmax over `cos(q, P_k) / τ` for every slot, background included as the
/// last entry of `prompts`.
pub fn classify(q: &[f64], prompts: &[CategoryPrompt], tau: f64, reduction: TokenReduction) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if prompts.is_empty() {
        return Err(Error::Validation("classification needs at least one prompt".into()));
    }
    let logits = prompts
        .iter()
        .map(|p| category_similarity(q, p, reduction).map(|s| s / tau))
        .collect::<Result<Vec<_>>>()?;
    softmax_rows(&Tensor::matrix(1, logits.len(), logits)?)
}

/// Full inference on an already encoded image.
pub fn detect_encoded(
    store: &ParamStore,
    cfg: &ModelConfig,
    encoded: &Encoded,
    prompts: &[CategoryPrompt],
    conf_threshold: f64,
) -> Result<Vec<Detection>> {
    if prompts.is_empty() {
        return Err(Error::Validation("detection needs at least one prompt".into()));
    }
    for p in prompts {
        if p.width() != cfg.d {
            return Err(Error::Dimension(format!(
                "prompt '{}' has width {}, model width is {}",
                p.category_name(),
                p.width(),
                cfg.d
            )));
        }
    }
    let mut tape = Tape::new();
    let memory = tape.constant(encoded.memory.clone());
    let pvars: Vec<_> = prompts.iter().map(|p| tape.constant(p.rows())).collect();
    let out = forward(&mut tape, store, cfg, memory, &encoded.levels, &pvars, None)?;
    let probs = softmax_rows(tape.value(out.logits))?;
    let k = prompts.len();
    let boxes = tape.values(out.boxes);
    let mut dets = Vec::new();
    for i in 0..out.selected.len() {
        let scores = probs[i * (k + 1)..i * (k + 1) + k].to_vec();
        let (label, confidence) = scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, &s)| if s > acc.1 { (j, s) } else { acc });
        if confidence < conf_threshold {
            continue;
        }
        let b = &boxes[i * 4..i * 4 + 4];
        dets.push(Detection {
            bbox: BBox {
                cx: b[0],
                cy: b[1],
                w: b[2],
                h: b[3],
            },
            scores,
            label,
            confidence,
        });
    }
    Ok(dets)
}

pub fn detect(
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &Tensor,
    prompts: &[CategoryPrompt],
    conf_threshold: f64,
) -> Result<Vec<Detection>> {
    let enc = encode_image(store, cfg, image)?;
    detect_encoded(store, cfg, &enc, prompts, conf_threshold)
}
