use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{visual_prompts, PromptSource, VisualPrompt};
use crate::data::Scene;
use crate::detector::{encode_image, ModelConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::{ParamStore, Tape, Tensor};

pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub id: String,
    pub vec: Vec<f64>,
}

/// Instance-level visual prompts grouped by category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCache {
    pub version: u32,
    pub dim: usize,
    pub entries: BTreeMap<String, Vec<CacheEntry>>,
}

impl PromptCache {
    pub fn new(dim: usize) -> Self {
        Self {
            version: CACHE_VERSION,
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, category: &str, id: String, vec: Vec<f64>) -> Result<()> {
        if vec.len() != self.dim {
            return Err(Error::Dimension(format!(
                "cache entry '{id}' has width {}, cache width is {}",
                vec.len(),
                self.dim
            )));
        }
        let list = self.entries.entry(category.to_string()).or_default();
        if list.iter().any(|e| e.id == id) {
            return Err(Error::Validation(format!("duplicate cache entry '{id}' for '{category}'")));
        }
        list.push(CacheEntry { id, vec });
        Ok(())
    }

    pub fn categories(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self, category: &str) -> usize {
        self.entries.get(category).map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CACHE_VERSION {
            return Err(Error::Validation(format!(
                "cache version {} is not supported (expected {CACHE_VERSION})",
                self.version
            )));
        }
        for (cat, list) in &self.entries {
            if list.is_empty() {
                return Err(Error::Validation(format!("cache category '{cat}' is empty")));
            }
            let mut ids: Vec<&str> = list.iter().map(|e| e.id.as_str()).collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Validation(format!("cache category '{cat}' repeats an instance id")));
            }
            if let Some(e) = list.iter().find(|e| e.vec.len() != self.dim || e.vec.iter().any(|v| !v.is_finite())) {
                return Err(Error::Validation(format!("cache entry '{}' is malformed", e.id)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cache: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cache.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(cache)
    }

    /// Mean of `min(n, available)` entries of `category` drawn without
    /// replacement.
    pub fn aggregate<R: Rng + ?Sized>(&self, category: &str, n: usize, rng: &mut R) -> Result<VisualPrompt> {
        if n == 0 {
            return Err(Error::Validation("aggregate needs n >= 1".into()));
        }
        let list = self
            .entries
            .get(category)
            .filter(|l| !l.is_empty())
            .ok_or_else(|| Error::Lookup(format!("category '{category}' not in prompt cache")))?;
        let take = n.min(list.len());
        let mut idx = sample(rng, list.len(), take).into_vec();
        idx.sort_unstable();
        let mut mean = vec![0.0; self.dim];
        for &i in &idx {
            for (m, v) in mean.iter_mut().zip(&list[i].vec) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= take as f64;
        }
        Ok(VisualPrompt {
            category_name: category.to_string(),
            embedding: Tensor::vector(mean),
            source: PromptSource::Aggregated(n),
        })
    }
}

pub fn instance_id(scene_index: usize, annotation: usize) -> String {
    format!("scene{scene_index}/ann{annotation}")
}

/// Visual prompts for every annotation of every scene, inserted in
/// (scene, annotation) order.
pub fn build_cache(scenes: &[Scene], store: &ParamStore, cfg: &ModelConfig) -> Result<PromptCache> {
    if scenes.is_empty() {
        return Err(Error::Validation("cannot build a prompt cache from an empty dataset".into()));
    }
    let mut cache = PromptCache::new(cfg.d);
    for scene in scenes {
        if scene.annotations.is_empty() {
            continue;
        }
        let enc = encode_image(store, cfg, &scene.image)?;
        let boxes: Vec<BBox> = scene.annotations.iter().map(|a| a.bbox).collect();
        let mut tape = Tape::new();
        let memory = tape.constant(enc.memory);
        let v = visual_prompts(&mut tape, store, cfg, &boxes, memory, &enc.levels)?;
        let v = tape.value(v);
        for (j, ann) in scene.annotations.iter().enumerate() {
            cache.insert(&ann.category, instance_id(scene.index, j), v.row(j).to_vec())?;
        }
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cache3() -> PromptCache {
        let mut c = PromptCache::new(2);
        c.insert("sq", "a".into(), vec![1.0, 0.0]).unwrap();
        c.insert("sq", "b".into(), vec![0.0, 3.0]).unwrap();
        c.insert("sq", "c".into(), vec![2.0, 3.0]).unwrap();
        c.insert("same", "x".into(), vec![0.5, 0.25]).unwrap();
        c.insert("same", "y".into(), vec![0.5, 0.25]).unwrap();
        c
    }

    #[test]
    fn aggregate_cases() {
        let c = cache3();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = c.aggregate("sq", 1, &mut rng).unwrap();
        assert!(c.entries["sq"].iter().any(|e| e.vec == one.embedding.values()));
        let all = c.aggregate("sq", 3, &mut rng).unwrap();
        assert_eq!(all.embedding.values(), &[1.0, 2.0]);
        assert_eq!(all.source.to_string(), "aggregated(3)");
        // more than available uses all
        assert_eq!(c.aggregate("sq", 10, &mut rng).unwrap().embedding.values(), &[1.0, 2.0]);
        for n in 1..4 {
            assert_eq!(c.aggregate("same", n, &mut rng).unwrap().embedding.values(), &[0.5, 0.25]);
        }
        assert!(matches!(c.aggregate("nope", 1, &mut rng), Err(Error::Lookup(_))));
    }

    #[test]
    fn cache_rejects_bad_entries() {
        let mut c = cache3();
        assert!(c.insert("sq", "a".into(), vec![0.0, 0.0]).is_err());
        assert!(c.insert("sq", "z".into(), vec![0.0]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.json");
        let mut c = cache3();
        c.insert("sq", "d".into(), vec![0.1 + 0.2, 1.0 / 3.0]).unwrap();
        c.save(&p).unwrap();
        let back = PromptCache::load(&p).unwrap();
        assert_eq!(back, c);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("{\"version\":1,\"dim\":2,\"entries\":{"));
        std::fs::write(&p, text.replace("\"version\":1", "\"version\":7")).unwrap();
        assert!(PromptCache::load(&p).is_err());
    }
}
