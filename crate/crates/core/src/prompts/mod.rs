//! Category prompts: hashed-token text encoder, box-conditioned visual
//! prompt encoder with deformable sampling, text/visual fusion and the
//! per-category visual prompt cache.

mod cache;
pub(crate) mod text;
pub(crate) mod visual;

pub use cache::{build_cache, CacheEntry, PromptCache, CACHE_VERSION};
pub use text::{encode_text, fnv1a, text_features, tokenize, VOCAB_SIZE};
pub use visual::{
    average_fuse, deformable_attention, encode_visual, fuse, fuse_on_tape, visual_prompts,
    DeformOutput,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TextualPrompt {
    pub category_name: String,
    pub tokens: Vec<usize>,
    /// `[n_k, d]` token features.
    pub features: Tensor,
}

/// Where a visual prompt came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptSource {
    Instance(String),
    Aggregated(usize),
}

impl std::fmt::Display for PromptSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PromptSource::Instance(id) => write!(f, "{id}"),
            PromptSource::Aggregated(n) => write!(f, "aggregated({n})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualPrompt {
    pub category_name: String,
    /// `[d]`
    pub embedding: Tensor,
    pub source: PromptSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrompt {
    pub category_name: String,
    /// `[d]`
    pub embedding: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CategoryPrompt {
    Textual(TextualPrompt),
    Visual(VisualPrompt),
    Fused(FusedPrompt),
}

impl CategoryPrompt {
    pub fn category_name(&self) -> &str {
        match self {
            CategoryPrompt::Textual(p) => &p.category_name,
            CategoryPrompt::Visual(p) => &p.category_name,
            CategoryPrompt::Fused(p) => &p.category_name,
        }
    }

    /// The prompt as a `[rows, d]` matrix: one row per token for textual
    /// prompts, a single row otherwise.
    pub fn rows(&self) -> Tensor {
        match self {
            CategoryPrompt::Textual(p) => p.features.clone(),
            CategoryPrompt::Visual(VisualPrompt { embedding, .. })
            | CategoryPrompt::Fused(FusedPrompt { embedding, .. }) => {
                let d = embedding.len();
                embedding.clone().reshaped(vec![1, d]).expect("vector reshape")
            }
        }
    }

    pub fn width(&self) -> usize {
        self.rows().cols()
    }
}

/// How a textual prompt's token similarities collapse to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenReduction {
    #[default]
    Max,
    Mean,
}

/// Cosine similarity with norms clamped at `1e-12`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::numerics::tape::NORM_FLOOR);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(crate::numerics::tape::NORM_FLOOR);
    dot / (na * nb)
}

/// Similarity of `x` to one prompt: cosine for single-vector prompts,
/// reduced over tokens for textual ones.
pub fn category_similarity(x: &[f64], p: &CategoryPrompt, reduction: TokenReduction) -> Result<f64> {
    let rows = p.rows();
    if rows.cols() != x.len() {
        return Err(Error::Dimension(format!(
            "prompt width {} does not match feature width {}",
            rows.cols(),
            x.len()
        )));
    }
    let sims = (0..rows.rows()).map(|j| cosine(x, rows.row(j)));
    Ok(match reduction {
        TokenReduction::Max => sims.fold(f64::NEG_INFINITY, f64::max),
        TokenReduction::Mean => sims.sum::<f64>() / rows.rows() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn visual(v: Vec<f64>) -> CategoryPrompt {
        CategoryPrompt::Visual(VisualPrompt {
            category_name: "a".into(),
            embedding: Tensor::vector(v),
            source: PromptSource::Aggregated(1),
        })
    }

    #[test]
    fn similarity_cases() {
        let p = visual(vec![1.0, 2.0, 0.0]);
        let s = category_similarity(&[1.0, 2.0, 0.0], &p, TokenReduction::Max).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
        let s = category_similarity(&[0.0, 0.0, 3.0], &p, TokenReduction::Max).unwrap();
        assert_eq!(s, 0.0);
        let a = category_similarity(&[0.3, -1.0, 2.0], &p, TokenReduction::Max).unwrap();
        let b = category_similarity(&[0.9, -3.0, 6.0], &p, TokenReduction::Max).unwrap();
        assert!((a - b).abs() < 1e-15);
        let z = category_similarity(&[0.0, 0.0, 0.0], &p, TokenReduction::Max).unwrap();
        assert_eq!(z, 0.0);
        assert!(category_similarity(&[1.0], &p, TokenReduction::Max).is_err());
    }

    #[test]
    fn textual_reductions() {
        let p = CategoryPrompt::Textual(TextualPrompt {
            category_name: "t".into(),
            tokens: vec![1, 2],
            features: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        });
        let x = [1.0, 0.0];
        assert_eq!(category_similarity(&x, &p, TokenReduction::Max).unwrap(), 1.0);
        assert_eq!(category_similarity(&x, &p, TokenReduction::Mean).unwrap(), 0.5);
    }
}
