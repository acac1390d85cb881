//! Synthetic shape scenes: a deterministic generator and an on-disk format.

mod io;

pub use io::{export_dataset, load_dataset, MANIFEST_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Cross,
    Ring,
}

impl ShapeKind {
    /// Membership test in box-local coordinates `(u, v) ∈ [0,1]²`.
    fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        match self {
            ShapeKind::Square => true,
            ShapeKind::Disk => du * du + dv * dv <= 0.25,
            ShapeKind::Ring => {
                let r2 = du * du + dv * dv;
                (0.25 * 0.55 * 0.55..=0.25).contains(&r2)
            }
            ShapeKind::Triangle => du.abs() <= 0.5 * v,
            ShapeKind::Cross => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorRange {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub kind: ShapeKind,
    pub color: ColorRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub categories: Vec<CategorySpec>,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Amplitude of the low-frequency background noise.
    pub noise_amplitude: f64,
    pub seed: u64,
    pub image_size: usize,
}

fn cat(name: &str, kind: ShapeKind, lo: [f64; 3], hi: [f64; 3]) -> CategorySpec {
    CategorySpec {
        name: name.into(),
        kind,
        color: ColorRange { lo, hi },
    }
}

const WARM_LO: [f64; 3] = [0.6, 0.5, 0.0];
const WARM_HI: [f64; 3] = [1.0, 1.0, 0.4];

impl DatasetSpec {
    /// Five categories: two squares told apart by color, and three warm-colored
    /// shapes told apart by geometry.
    pub fn reference() -> Self {
        Self {
            categories: vec![
                cat("red square", ShapeKind::Square, [0.75, 0.0, 0.0], [1.0, 0.25, 0.25]),
                cat("blue square", ShapeKind::Square, [0.0, 0.0, 0.75], [0.25, 0.3, 1.0]),
                cat("disk", ShapeKind::Disk, WARM_LO, WARM_HI),
                cat("triangle", ShapeKind::Triangle, WARM_LO, WARM_HI),
                cat("ring", ShapeKind::Ring, WARM_LO, WARM_HI),
            ],
            train_scenes: 500,
            test_scenes: 100,
            min_objects: 1,
            max_objects: 4,
            min_size: 8.0,
            max_size: 20.0,
            noise_amplitude: 0.12,
            seed: 7,
            image_size: 64,
        }
    }

    pub fn three_category() -> Self {
        Self {
            categories: vec![
                cat("square", ShapeKind::Square, WARM_LO, WARM_HI),
                cat("disk", ShapeKind::Disk, WARM_LO, WARM_HI),
                cat("triangle", ShapeKind::Triangle, WARM_LO, WARM_HI),
            ],
            ..Self::reference()
        }
    }

    pub fn num_scenes(&self) -> usize {
        self.train_scenes + self.test_scenes
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => 0..self.train_scenes,
            Split::Test => self.train_scenes..self.num_scenes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.categories.len() < 2 {
            return fail("a dataset needs at least two categories".into());
        }
        let mut names = self.category_names();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return fail("category names must be unique".into());
        }
        for c in &self.categories {
            crate::prompts::tokenize(&c.name)?;
            let ok = (0..3).all(|i| (0.0..=1.0).contains(&c.color.lo[i]) && c.color.lo[i] <= c.color.hi[i] && c.color.hi[i] <= 1.0);
            if !ok {
                return fail(format!("color range of '{}' must satisfy 0 <= lo <= hi <= 1", c.name));
            }
        }
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return fail("scene counts must be positive".into());
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!("object counts {}..{} are invalid", self.min_objects, self.max_objects));
        }
        if self.image_size < 8 {
            return fail(format!("image size {} is too small", self.image_size));
        }
        let min_px = 4.0 * self.image_size as f64 / 64.0;
        if !(self.min_size >= min_px && self.min_size <= self.max_size && self.max_size <= self.image_size as f64) {
            return fail(format!(
                "object sizes {}..{} must lie in [{min_px}, {}]",
                self.min_size, self.max_size, self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return fail(format!("noise amplitude {} must lie in [0, 1]", self.noise_amplitude));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub category: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub index: usize,
    pub seed: u64,
    /// `[s, s, 3]` in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<Annotation>,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn scene_seed(master: u64, index: usize) -> u64 {
    splitmix64(splitmix64(master) ^ index as u64)
}

const SUPERSAMPLE: usize = 4;
const NOISE_GRID: usize = 5;

fn background(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = spec.image_size;
    let base = rng.gen_range(0.2..0.5);
    let tint: Vec<f64> = (0..3).map(|_| base + rng.gen_range(-0.05..0.05)).collect();
    let grid: Vec<f64> = (0..NOISE_GRID * NOISE_GRID * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut img = vec![0.0; s * s * 3];
    let g = (NOISE_GRID - 1) as f64;
    for y in 0..s {
        let fy = (y as f64 + 0.5) / s as f64 * g;
        let y0 = (fy as usize).min(NOISE_GRID - 2);
        let ty = fy - y0 as f64;
        for x in 0..s {
            let fx = (x as f64 + 0.5) / s as f64 * g;
            let x0 = (fx as usize).min(NOISE_GRID - 2);
            let tx = fx - x0 as f64;
            for c in 0..3 {
                let at = |yy: usize, xx: usize| grid[(yy * NOISE_GRID + xx) * 3 + c];
                let n = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1))
                    + ty * ((1.0 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
                img[(y * s + x) * 3 + c] = (tint[c] + spec.noise_amplitude * n).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], margin: f64) -> bool {
    a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin
}

fn rasterize(img: &mut [f64], s: usize, kind: ShapeKind, corners: &[f64; 4], color: &[f64; 3]) {
    let (x1, y1, x2, y2) = (corners[0], corners[1], corners[2], corners[3]);
    let (w, h) = (x2 - x1, y2 - y1);
    let px0 = x1.floor().max(0.0) as usize;
    let py0 = y1.floor().max(0.0) as usize;
    let px1 = (x2.ceil() as usize).min(s);
    let py1 = (y2.ceil() as usize).min(s);
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in py0..py1 {
        for px in px0..px1 {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    if x < x1 || x > x2 || y < y1 || y > y2 {
                        continue;
                    }
                    if kind.contains((x - x1) / w, (y - y1) / h) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let a = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for c in 0..3 {
                let v = &mut img[(py * s + px) * 3 + c];
                *v = (1.0 - a) * *v + a * color[c];
            }
        }
    }
}

const PLACEMENT_TRIES: usize = 100;

/// Scene `index` of `spec`; a pure function of its arguments.
pub fn generate_scene(spec: &DatasetSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    if index >= spec.num_scenes() {
        return Err(Error::Validation(format!(
            "scene index {index} out of range for {} scenes",
            spec.num_scenes()
        )));
    }
    let seed = scene_seed(spec.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.image_size;
    let sf = s as f64;
    let mut img = background(spec, &mut rng);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<[f64; 4]> = Vec::new();
    let mut annotations = Vec::new();
    // keep every object requested for the scene, retrying smaller sizes if crowded
    for _ in 0..count {
        let ci = rng.gen_range(0..spec.categories.len());
        let cat = &spec.categories[ci];
        let color: [f64; 3] = std::array::from_fn(|c| {
            let (lo, hi) = (cat.color.lo[c], cat.color.hi[c]);
            if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                lo
            }
        });
        let mut spot = None;
        for attempt in 0..PLACEMENT_TRIES {
            let hi = if attempt < PLACEMENT_TRIES / 2 { spec.max_size } else { spec.min_size };
            let side = if hi > spec.min_size { rng.gen_range(spec.min_size..hi) } else { spec.min_size };
            let x = rng.gen_range(0.0..=sf - side);
            let y = rng.gen_range(0.0..=sf - side);
            let c = [x, y, x + side, y + side];
            if !placed.iter().any(|p| overlaps(p, &c, 1.0)) {
                spot = Some(c);
                break;
            }
        }
        let Some(c) = spot else { continue };
        rasterize(&mut img, s, cat.kind, &c, &color);
        placed.push(c);
        annotations.push(Annotation {
            category: cat.name.clone(),
            bbox: BBox::from_xyxy([c[0] / sf, c[1] / sf, c[2] / sf, c[3] / sf]),
        });
    }
    if annotations.is_empty() {
        return Err(Error::Validation(format!("scene {index} could not place any object")));
    }
    Ok(Scene {
        index,
        seed,
        image: Tensor::new(vec![s, s, 3], img)?,
        annotations,
    })
}

pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<Scene>> {
    spec.split_range(split).map(|i| generate_scene(spec, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinism() {
        let spec = DatasetSpec::reference();
        assert_eq!(generate_scene(&spec, 3).unwrap(), generate_scene(&spec, 3).unwrap());
        assert_ne!(generate_scene(&spec, 3).unwrap().image, generate_scene(&spec, 4).unwrap().image);
    }

    #[test]
    fn scene_invariants_over_many_scenes() {
        let mut spec = DatasetSpec::reference();
        spec.train_scenes = 1000;
        let min = 4.0 / 64.0;
        for i in 0..1000 {
            let sc = generate_scene(&spec, i).unwrap();
            assert!(sc.image.values().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!((spec.min_objects..=spec.max_objects).contains(&sc.annotations.len()));
            for a in &sc.annotations {
                let b = a.bbox;
                assert!(b.w >= min - 1e-12 && b.h >= min - 1e-12, "{b:?}");
                let c = b.to_xyxy();
                assert!(c[0] >= -1e-12 && c[1] >= -1e-12 && c[2] <= 1.0 + 1e-12 && c[3] <= 1.0 + 1e-12);
                assert!(b.validate().is_ok());
                assert!(spec.category_index(&a.category).is_some());
            }
        }
    }

    #[test]
    fn shapes_cover_expected_fraction() {
        let s = 64;
        for (kind, want) in [
            (ShapeKind::Square, 1.0),
            (ShapeKind::Disk, std::f64::consts::PI / 4.0),
            (ShapeKind::Triangle, 0.5),
            (ShapeKind::Ring, std::f64::consts::PI / 4.0 * (1.0 - 0.55 * 0.55)),
            (ShapeKind::Cross, 5.0 / 9.0),
        ] {
            let mut img = vec![0.0; s * s * 3];
            rasterize(&mut img, s, kind, &[0.0, 0.0, 64.0, 64.0], &[1.0, 1.0, 1.0]);
            let cover = img.iter().sum::<f64>() / (s * s * 3) as f64;
            assert!((cover - want).abs() < 0.01, "{kind:?}: {cover} vs {want}");
        }
    }

    #[test]
    fn split_ranges() {
        let spec = DatasetSpec::reference();
        assert_eq!(spec.split_range(Split::Train), 0..500);
        assert_eq!(spec.split_range(Split::Test), 500..600);
        assert!(generate_scene(&spec, 600).is_err());
    }

    #[test]
    fn invalid_specs() {
        let mut spec = DatasetSpec::reference();
        spec.categories.truncate(1);
        assert!(spec.validate().is_err());
        let mut spec = DatasetSpec::reference();
        spec.min_size = 2.0;
        assert!(spec.validate().is_err());
    }
}
