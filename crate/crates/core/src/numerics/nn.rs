//! Layer helpers composed from tape ops. Each layer reads its parameters
//! from a [`ParamStore`] under a dotted prefix.

use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// `x · w + b` with `w = "{prefix}.w"` (`[d_in, d_out]`) and `b = "{prefix}.b"`.
pub fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub fn layer_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.gamma"))?;
    let b = tape.param(store, &format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Multi-head attention with learned projections `{prefix}.{q,k,v,o}`.
pub fn multi_head_attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    query: Var,
    key: Var,
    value: Var,
    heads: usize,
) -> Result<Var> {
    let q = linear(tape, store, &format!("{prefix}.q"), query)?;
    let k = linear(tape, store, &format!("{prefix}.k"), key)?;
    let v = linear(tape, store, &format!("{prefix}.v"), value)?;
    let o = tape.attention(q, k, v, heads)?;
    linear(tape, store, &format!("{prefix}.o"), o)
}

/// Two-layer feed-forward block `d -> hidden -> d` with GELU.
pub fn ffn(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, store, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, store, &format!("{prefix}.fc2"), h)
}

/// `LN(x + sublayer)`.
pub fn residual_norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, sub: Var) -> Result<Var> {
    let s = tape.add(x, sub)?;
    layer_norm(tape, store, prefix, s)
}

pub fn init_mha(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        store.init_linear(&format!("{prefix}.{p}"), d, d, rng)?;
    }
    Ok(())
}

pub fn init_ffn(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    store.init_linear_he(&format!("{prefix}.fc1"), d, hidden, rng)?;
    store.init_linear(&format!("{prefix}.fc2"), hidden, d, rng)
}
