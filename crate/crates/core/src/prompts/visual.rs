use rand_chacha::ChaCha8Rng;

use super::{FusedPrompt, PromptSource, TextualPrompt, VisualPrompt};
use crate::detector::{Encoded, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::{box_pe, BBox};
use crate::numerics::{nn, LevelShape, ParamStore, Tape, Tensor, Var};

pub(crate) fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = cfg.d;
    let samples = cfg.heads * cfg.levels() * cfg.vpe_points;
    store.init_linear_he("vpe.box_mlp.fc1", d, d, rng)?;
    store.init_linear("vpe.box_mlp.fc2", d, d, rng)?;
    store.init_normal("vpe.content", &[d], 1.0, rng)?;
    store.init_linear("vpe.query_proj", 2 * d, d, rng)?;
    // offsets start as a fixed pattern inside the box: head h points along
    // angle 2πh/H, point p at radius (p+1)/(P+1) of the half extent
    store.insert("vpe.deform.offset.w", Tensor::zeros(&[d, 2 * samples]))?;
    let mut bias = vec![0.0; 2 * samples];
    for h in 0..cfg.heads {
        let a = 2.0 * std::f64::consts::PI * h as f64 / cfg.heads as f64;
        for l in 0..cfg.levels() {
            for p in 0..cfg.vpe_points {
                let s = (h * cfg.levels() + l) * cfg.vpe_points + p;
                let rad = (p + 1) as f64 / (cfg.vpe_points + 1) as f64;
                bias[2 * s] = rad * a.cos();
                bias[2 * s + 1] = rad * a.sin();
            }
        }
    }
    store.insert("vpe.deform.offset.b", Tensor::vector(bias))?;
    store.insert("vpe.deform.attn.w", Tensor::zeros(&[d, samples]))?;
    store.insert("vpe.deform.attn.b", Tensor::zeros(&[samples]))?;
    store.init_linear("vpe.deform.value", d, d, rng)?;
    store.init_linear("vpe.deform.out", d, d, rng)?;
    nn::init_ffn(store, "vpe.ffn", d, cfg.ffn_hidden(), rng)?;
    store.init_layer_norm("vpe.ffn_norm", d)?;

    store.init_normal("fusion.query", &[d], 1.0, rng)?;
    nn::init_mha(store, "fusion.attn", d, rng)?;
    store.init_layer_norm("fusion.norm", d)
}

/// Result of [`deformable_attention`]: projected output `[n, d]` and the
/// per-sample weights `[n, H·L·P]`.
#[derive(Debug, Clone, Copy)]
pub struct DeformOutput {
    pub out: Var,
    pub weights: Var,
}

/// Samples `memory` around each reference box. Offsets and attention logits
/// are linear in the query rows `r`; offsets are in units of half the box
/// extent and weights are normalized per head over all levels and points.
pub fn deformable_attention(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    r: Var,
    boxes: &[BBox],
    memory: Var,
    levels: &[LevelShape],
) -> Result<DeformOutput> {
    if levels.is_empty() {
        return Err(Error::Config("deformable attention needs at least one feature level".into()));
    }
    let n = tape.value(r).rows();
    if boxes.len() != n {
        return Err(Error::Dimension(format!("{} reference boxes for {n} queries", boxes.len())));
    }
    let heads = cfg.heads;
    let per_head = levels.len() * cfg.vpe_points;
    let samples = heads * per_head;
    let value = nn::linear(tape, store, "vpe.deform.value", memory)?;
    let off = nn::linear(tape, store, "vpe.deform.offset", r)?;
    if tape.value(off).cols() != 2 * samples {
        return Err(Error::Dimension(format!(
            "offset head emits {} values, expected {}",
            tape.value(off).cols(),
            2 * samples
        )));
    }
    let mut scale = Vec::with_capacity(n * 2 * samples);
    let mut center = Vec::with_capacity(n * 2 * samples);
    for b in boxes {
        for _ in 0..samples {
            scale.extend([b.w / 2.0, b.h / 2.0]);
            center.extend([b.cx, b.cy]);
        }
    }
    let scale = tape.constant(Tensor::matrix(n, 2 * samples, scale)?);
    let center = tape.constant(Tensor::matrix(n, 2 * samples, center)?);
    let loc = tape.mul(off, scale)?;
    let loc = tape.add(loc, center)?;
    let logits = nn::linear(tape, store, "vpe.deform.attn", r)?;
    let logits = tape.reshape(logits, &[n * heads, per_head])?;
    let weights = tape.softmax(logits)?;
    let weights = tape.reshape(weights, &[n, samples])?;
    let sampled = tape.deform_sample(value, levels, loc, weights, heads)?;
    let out = nn::linear(tape, store, "vpe.deform.out", sampled)?;
    Ok(DeformOutput { out, weights })
}

/// Visual prompts `v` for each box, `[n, d]`.
pub fn visual_prompts(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    boxes: &[BBox],
    memory: Var,
    levels: &[LevelShape],
) -> Result<Var> {
    let d = cfg.d;
    let n = boxes.len();
    if n == 0 {
        return Err(Error::Validation("visual prompt needs at least one box".into()));
    }
    let mut pe = Vec::with_capacity(n * d);
    for b in boxes {
        b.validate()?;
        pe.extend(box_pe(b, d)?.into_values());
    }
    let pe = tape.constant(Tensor::matrix(n, d, pe)?);
    let e = nn::linear(tape, store, "vpe.box_mlp.fc1", pe)?;
    let e = tape.gelu(e);
    let e = nn::linear(tape, store, "vpe.box_mlp.fc2", e)?;
    let c = tape.param(store, "vpe.content")?;
    let c = tape.reshape(c, &[1, d])?;
    let c = tape.gather_rows(c, &vec![0; n])?;
    let ec = tape.concat_cols(&[e, c])?;
    let r = nn::linear(tape, store, "vpe.query_proj", ec)?;
    let z = deformable_attention(tape, store, cfg, r, boxes, memory, levels)?.out;
    let f = nn::ffn(tape, store, "vpe.ffn", z)?;
    nn::residual_norm(tape, store, "vpe.ffn_norm", z, f)
}

pub fn encode_visual(
    b: &BBox,
    encoded: &Encoded,
    store: &ParamStore,
    cfg: &ModelConfig,
    category_name: &str,
    source: PromptSource,
) -> Result<VisualPrompt> {
    let mut tape = Tape::new();
    let memory = tape.constant(encoded.memory.clone());
    let v = visual_prompts(&mut tape, store, cfg, std::slice::from_ref(b), memory, &encoded.levels)?;
    Ok(VisualPrompt {
        category_name: category_name.to_string(),
        embedding: Tensor::vector(tape.values(v).to_vec()),
        source,
    })
}

/// `LN(u + MHA(u, S, S))` with `S = [g; v]`, output `[1, d]`.
pub fn fuse_on_tape(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, g: Var, v: Var) -> Result<Var> {
    let d = tape.value(g).cols();
    if tape.value(v).cols() != d {
        return Err(Error::Dimension(format!(
            "text width {d} and visual width {} differ",
            tape.value(v).cols()
        )));
    }
    let s = tape.concat_rows(&[g, v])?;
    let u = tape.param(store, "fusion.query")?;
    let u = tape.reshape(u, &[1, d])?;
    let a = nn::multi_head_attention(tape, store, "fusion.attn", u, s, s, cfg.heads)?;
    nn::residual_norm(tape, store, "fusion.norm", u, a)
}

fn check_pair(g: &TextualPrompt, v: &VisualPrompt) -> Result<()> {
    if g.category_name != v.category_name {
        return Err(Error::Validation(format!(
            "cannot fuse prompts of '{}' and '{}'",
            g.category_name, v.category_name
        )));
    }
    if g.features.cols() != v.embedding.len() {
        return Err(Error::Dimension(format!(
            "text width {} and visual width {} differ",
            g.features.cols(),
            v.embedding.len()
        )));
    }
    Ok(())
}

pub fn fuse(g: &TextualPrompt, v: &VisualPrompt, store: &ParamStore, cfg: &ModelConfig) -> Result<FusedPrompt> {
    check_pair(g, v)?;
    let d = v.embedding.len();
    let mut tape = Tape::new();
    let gv = tape.constant(g.features.clone());
    let vv = tape.constant(v.embedding.clone().reshaped(vec![1, d])?);
    let u = fuse_on_tape(&mut tape, store, cfg, gv, vv)?;
    Ok(FusedPrompt {
        category_name: g.category_name.clone(),
        embedding: Tensor::vector(tape.values(u).to_vec()),
    })
}

/// Parameter-free baseline: `mean_j (g_j + v)`.
pub fn average_fuse(g: &TextualPrompt, v: &VisualPrompt) -> Result<FusedPrompt> {
    check_pair(g, v)?;
    let (n, d) = (g.features.rows(), g.features.cols());
    let mut out = vec![0.0; d];
    for j in 0..n {
        for (o, (a, b)) in out.iter_mut().zip(g.features.row(j).iter().zip(v.embedding.values())) {
            *o += (a + b) / n as f64;
        }
    }
    Ok(FusedPrompt {
        category_name: g.category_name.clone(),
        embedding: Tensor::vector(out),
    })
}
