use std::ops::Range;

use super::{ref_box, token_positions, BoxParam, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{conv_out, nn, LevelShape, ParamStore, Tape, Tensor, Var};
use crate::prompts::{cosine, TokenReduction};

fn conv(
    tape: &mut Tape,
    store: &ParamStore,
    name: &str,
    x: Var,
    hw: (usize, usize),
) -> Result<(Var, (usize, usize))> {
    let cols = tape.im2col(x, hw.0, hw.1, 2)?;
    let y = nn::linear(tape, store, name, cols)?;
    Ok((tape.gelu(y), conv_out(hw.0, hw.1, 2)))
}

/// Stride-2 3×3 conv stack over an HWC image `[s*s, 3]`; returns one
/// layer-normed `[h*w, d]` node per level.
pub(crate) fn backbone(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, image: Var) -> Result<Vec<Var>> {
    let s = cfg.image_size;
    let (mut x, mut hw) = conv(tape, store, "det.backbone.conv1", image, (s, s))?;
    let mut levels = Vec::with_capacity(cfg.num_levels);
    for i in 2..=cfg.num_levels + 1 {
        let (y, o) = conv(tape, store, &format!("det.backbone.conv{i}"), x, hw)?;
        levels.push(nn::layer_norm(tape, store, &format!("det.backbone.norm{i}"), y)?);
        x = y;
        hw = o;
    }
    Ok(levels)
}

/// Level embedding plus 2D sinusoidal position for every token.
pub fn pos_level(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig) -> Result<Var> {
    let table = tape.param(store, "det.level_embed")?;
    let index: Vec<usize> = cfg
        .level_shapes()
        .iter()
        .enumerate()
        .flat_map(|(i, l)| std::iter::repeat(i).take(l.height * l.width))
        .collect();
    let lvl = tape.gather_rows(table, &index)?;
    let pos = tape.constant(token_positions(cfg));
    tape.add(lvl, pos)
}

/// Backbone and encoder on the tape; returns the memory `[tokens, d]`.
pub fn encode_on_tape(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let levels = backbone(tape, store, cfg, image)?;
    let feats = tape.concat_rows(&levels)?;
    let pl = pos_level(tape, store, cfg)?;
    let mut x = tape.add(feats, pl)?;
    for l in 0..cfg.enc_layers {
        let p = format!("det.encoder.layer{l}");
        let h = nn::layer_norm(tape, store, &format!("{p}.attn_norm"), x)?;
        let a = nn::multi_head_attention(tape, store, &format!("{p}.attn"), h, h, h, cfg.heads)?;
        x = tape.add(x, a)?;
        let h = nn::layer_norm(tape, store, &format!("{p}.ffn_norm"), x)?;
        let f = nn::ffn(tape, store, &format!("{p}.ffn"), h)?;
        x = tape.add(x, f)?;
    }
    nn::layer_norm(tape, store, "det.encoder.norm", x)
}

/// Token indices ranked by `max_k sim(token, P_k)`, best first, ties to the
/// lower index. Returns `(index, score)` for the top `count`.
pub fn select_indices(
    memory: &Tensor,
    prompts: &[Tensor],
    count: usize,
    reduction: TokenReduction,
) -> Result<Vec<(usize, f64)>> {
    if prompts.is_empty() {
        return Err(Error::Validation("query selection needs at least one prompt".into()));
    }
    let (t, d) = (memory.rows(), memory.cols());
    if count > t {
        return Err(Error::Config(format!("cannot select {count} queries from {t} tokens")));
    }
    if let Some(p) = prompts.iter().find(|p| p.cols() != d) {
        return Err(Error::Dimension(format!("prompt width {} does not match memory width {d}", p.cols())));
    }
    let mut scored: Vec<(usize, f64)> = (0..t)
        .map(|i| {
            let x = memory.row(i);
            let best = prompts
                .iter()
                .map(|p| {
                    let sims = (0..p.rows()).map(|j| cosine(x, p.row(j)));
                    match reduction {
                        TokenReduction::Max => sims.fold(f64::NEG_INFINITY, f64::max),
                        TokenReduction::Mean => sims.sum::<f64>() / p.rows() as f64,
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max);
            (i, best)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(count);
    Ok(scored)
}

/// Refines the selected tokens through the pre-norm decoder stack; `[Q, d]`.
pub fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    memory: Var,
    selected: &[usize],
) -> Result<Var> {
    if selected.is_empty() {
        return Err(Error::Validation("decoder needs at least one query".into()));
    }
    let mut q = tape.gather_rows(memory, selected)?;
    let pl = pos_level(tape, store, cfg)?;
    let kv = tape.add(memory, pl)?;
    for l in 0..cfg.dec_layers {
        let p = format!("det.decoder.layer{l}");
        let h = nn::layer_norm(tape, store, &format!("{p}.self_norm"), q)?;
        let a = nn::multi_head_attention(tape, store, &format!("{p}.self_attn"), h, h, h, cfg.heads)?;
        q = tape.add(q, a)?;
        let h = nn::layer_norm(tape, store, &format!("{p}.cross_norm"), q)?;
        let c = nn::multi_head_attention(tape, store, &format!("{p}.cross_attn"), h, kv, kv, cfg.heads)?;
        q = tape.add(q, c)?;
        let h = nn::layer_norm(tape, store, &format!("{p}.ffn_norm"), q)?;
        let f = nn::ffn(tape, store, &format!("{p}.ffn"), h)?;
        q = tape.add(q, f)?;
    }
    nn::layer_norm(tape, store, "det.decoder.norm", q)
}

/// 3-layer MLP with sigmoid output, `(cx, cy, w, h)` per row. `anchor`
/// holds reference boxes in logit space, added before the sigmoid.
pub fn box_head(tape: &mut Tape, store: &ParamStore, prefix: &str, q: Var, anchor: Option<&Tensor>) -> Result<Var> {
    let h = nn::linear(tape, store, &format!("{prefix}.fc1"), q)?;
    let h = tape.gelu(h);
    let h = nn::linear(tape, store, &format!("{prefix}.fc2"), h)?;
    let h = tape.gelu(h);
    let mut o = nn::linear(tape, store, &format!("{prefix}.fc3"), h)?;
    if let Some(a) = anchor {
        let a = tape.constant(a.clone());
        o = tape.add(o, a)?;
    }
    Ok(tape.sigmoid(o))
}

/// `cos(q̂, P_k) / τ` for each prompt plus the background slot; `[Q, K+1]`.
pub fn prompt_logits(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    q: Var,
    prompts: &[Var],
) -> Result<Var> {
    let d = cfg.d;
    let bg = tape.param(store, "det.bg_prompt")?;
    let bg = tape.reshape(bg, &[1, d])?;
    let mut parts = prompts.to_vec();
    parts.push(bg);
    let mut segments: Vec<Range<usize>> = Vec::with_capacity(parts.len());
    let mut at = 0;
    for p in &parts {
        let n = tape.value(*p).rows();
        segments.push(at..at + n);
        at += n;
    }
    let rows = tape.concat_rows(&parts)?;
    let qn = tape.normalize_rows(q);
    let pn = tape.normalize_rows(rows);
    let sims = tape.matmul_t(qn, pn, false, true)?;
    let reduced = match cfg.text_reduction {
        TokenReduction::Max => tape.segment_max(sims, &segments)?,
        TokenReduction::Mean => tape.segment_mean(sims, &segments)?,
    };
    Ok(tape.scale(reduced, 1.0 / cfg.tau))
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[Q, K+1]`, background last.
    pub logits: Var,
    /// `[Q, 4]`
    pub boxes: Var,
    pub selected: Vec<usize>,
}

/// Class and box predictions for every encoder token; `None` unless the
/// selection loss is enabled.
pub fn token_heads(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    memory: Var,
    levels: &[LevelShape],
    prompts: &[Var],
) -> Result<Option<TokenHeads>> {
    if !cfg.selection_loss {
        return Ok(None);
    }
    let all: Vec<usize> = (0..tape.value(memory).rows()).collect();
    let anchor = anchors(cfg, levels, &all)?;
    Ok(Some(TokenHeads {
        logits: prompt_logits(tape, store, cfg, memory, prompts)?,
        boxes: box_head(tape, store, "det.enc_box_head", memory, anchor.as_ref())?,
    }))
}

#[derive(Debug, Clone, Copy)]
pub struct TokenHeads {
    /// `[tokens, K+1]`
    pub logits: Var,
    /// `[tokens, 4]`
    pub boxes: Var,
}

fn anchors(cfg: &ModelConfig, levels: &[LevelShape], tokens: &[usize]) -> Result<Option<Tensor>> {
    match cfg.box_param {
        BoxParam::Absolute => Ok(None),
        BoxParam::Anchored => {
            let mut v = Vec::with_capacity(tokens.len() * 4);
            for &t in tokens {
                v.extend(ref_box(cfg, levels, t)?.to_array().iter().map(|&x| (x / (1.0 - x)).ln()));
            }
            Ok(Some(Tensor::matrix(tokens.len(), 4, v)?))
        }
    }
}

/// Query selection, decoding, classification and boxes from an encoder
/// memory. `fixed_selection` bypasses the similarity ranking.
pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    memory: Var,
    levels: &[LevelShape],
    prompts: &[Var],
    fixed_selection: Option<&[usize]>,
) -> Result<ForwardOutput> {
    let tokens: usize = levels.iter().map(|l| l.height * l.width).sum();
    if tape.value(memory).rows() != tokens {
        return Err(Error::Dimension(format!(
            "memory has {} rows, levels describe {tokens}",
            tape.value(memory).rows()
        )));
    }
    let selected = match fixed_selection {
        Some(s) => s.to_vec(),
        None => {
            let rows: Vec<Tensor> = prompts.iter().map(|p| tape.value(*p).clone()).collect();
            select_indices(tape.value(memory), &rows, cfg.num_queries, cfg.text_reduction)?
                .into_iter()
                .map(|(i, _)| i)
                .collect()
        }
    };
    let q = decode(tape, store, cfg, memory, &selected)?;
    let logits = prompt_logits(tape, store, cfg, q, prompts)?;
    let anchor = anchors(cfg, levels, &selected)?;
    let boxes = box_head(tape, store, "det.box_head", q, anchor.as_ref())?;
    Ok(ForwardOutput {
        logits,
        boxes,
        selected,
    })
}
