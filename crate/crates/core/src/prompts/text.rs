use rand_chacha::ChaCha8Rng;

use super::TextualPrompt;
use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{nn, ParamStore, Tape, Var};

pub const VOCAB_SIZE: usize = 1024;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercases, splits on whitespace, `-` and `_`, and hashes each token
/// into the vocabulary.
pub fn tokenize(name: &str) -> Result<Vec<usize>> {
    let lower = name.to_lowercase();
    let ids: Vec<usize> = lower
        .split(|c: char| c.is_whitespace() || c == '-' || c == '_')
        .filter(|t| !t.is_empty())
        .map(|t| (fnv1a(t.as_bytes()) % VOCAB_SIZE as u64) as usize)
        .collect();
    if ids.is_empty() {
        return Err(Error::Validation(format!("category name '{name}' has no tokens")));
    }
    Ok(ids)
}

pub(crate) fn init(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    let d = cfg.d;
    store.init_normal("text.embed", &[VOCAB_SIZE, d], 1.0, rng)?;
    nn::init_mha(store, "text.attn", d, rng)?;
    store.init_layer_norm("text.attn_norm", d)?;
    nn::init_ffn(store, "text.ffn", d, cfg.ffn_hidden(), rng)?;
    store.init_layer_norm("text.ffn_norm", d)
}

/// Token features `G_k` on the tape, `[n_k, d]`.
pub fn text_features(tape: &mut Tape, store: &ParamStore, cfg: &ModelConfig, tokens: &[usize]) -> Result<Var> {
    let table = tape.param(store, "text.embed")?;
    let x = tape.gather_rows(table, tokens)?;
    let a = nn::multi_head_attention(tape, store, "text.attn", x, x, x, cfg.heads)?;
    let x = nn::residual_norm(tape, store, "text.attn_norm", x, a)?;
    let f = nn::ffn(tape, store, "text.ffn", x)?;
    nn::residual_norm(tape, store, "text.ffn_norm", x, f)
}

pub fn encode_text(name: &str, store: &ParamStore, cfg: &ModelConfig) -> Result<TextualPrompt> {
    let tokens = tokenize(name)?;
    let mut tape = Tape::new();
    let g = text_features(&mut tape, store, cfg, &tokens)?;
    Ok(TextualPrompt {
        category_name: name.to_string(),
        tokens,
        features: tape.value(g).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Helicopter").unwrap(), tokenize("helicopter").unwrap());
        assert_eq!(tokenize("long-vehicle").unwrap().len(), 2);
        assert_eq!(tokenize("a_b c").unwrap().len(), 3);
        assert!(tokenize("").is_err());
        assert!(tokenize(" - ").is_err());
    }

    #[test]
    fn fnv_reference() {
        // FNV-1a 64 of "ship", computed byte by byte.
        let mut h: u128 = 14695981039346656037;
        for b in b"ship" {
            h ^= *b as u128;
            h = (h * 1099511628211) % (1u128 << 64);
        }
        assert_eq!(fnv1a(b"ship") as u128, h);
        assert_eq!(tokenize("ship").unwrap(), vec![(h % 1024) as usize]);
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn encode_shape_and_determinism() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init(&mut store, &cfg, &mut rng).unwrap();
        let a = encode_text("red square", &store, &cfg).unwrap();
        let b = encode_text("red square", &store, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.features.shape(), &[2, cfg.d]);
    }

    #[test]
    fn single_token_trace() {
        // identity projections: one token attends to itself, so the attention
        // output equals the value, i.e. the embedding row itself
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            ..ModelConfig::default()
        };
        let d = cfg.d;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        init(&mut store, &cfg, &mut rng).unwrap();
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        for p in ["q", "k", "v", "o"] {
            store.set_values(&format!("text.attn.{p}.w"), &eye).unwrap();
            store.set_values(&format!("text.attn.{p}.b"), &vec![0.0; d]).unwrap();
        }
        let tokens = tokenize("ship").unwrap();
        let e = store.tensor("text.embed").unwrap().row(tokens[0]).to_vec();
        let ln = |x: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / x.len() as f64;
            x.iter().map(|a| (a - m) / (v + nn::LN_EPS).sqrt()).collect()
        };
        let h1 = ln(&e.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
        // FFN by hand
        let w1 = store.tensor("text.ffn.fc1.w").unwrap();
        let b1 = store.tensor("text.ffn.fc1.b").unwrap();
        let w2 = store.tensor("text.ffn.fc2.w").unwrap();
        let b2 = store.tensor("text.ffn.fc2.b").unwrap();
        let hid = w1.cols();
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let mid: Vec<f64> = (0..hid)
            .map(|j| gelu((0..d).map(|i| h1[i] * w1.values()[i * hid + j]).sum::<f64>() + b1.values()[j]))
            .collect();
        let out: Vec<f64> = (0..d)
            .map(|j| (0..hid).map(|i| mid[i] * w2.values()[i * d + j]).sum::<f64>() + b2.values()[j])
            .collect();
        let want = ln(&h1.iter().zip(&out).map(|(a, b)| a + b).collect::<Vec<_>>());
        let got = encode_text("ship", &store, &cfg).unwrap();
        for (a, b) in got.features.values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
