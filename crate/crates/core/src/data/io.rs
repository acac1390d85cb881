use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_scene, Annotation, DatasetSpec, Scene};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    scenes: usize,
    spec: DatasetSpec,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneRecord {
    index: usize,
    seed: u64,
    image_sha256: String,
    annotations: Vec<Annotation>,
}

fn scene_stem(index: usize) -> String {
    format!("{index:06}")
}

fn encode_image(t: &Tensor) -> Vec<u8> {
    t.values().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `manifest.json` plus one `.bin`/`.json` pair per scene.
pub fn export_dataset(spec: &DatasetSpec, dir: &Path) -> Result<()> {
    spec.validate()?;
    let scenes_dir = dir.join("scenes");
    fs::create_dir_all(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;
    for i in 0..spec.num_scenes() {
        let sc = generate_scene(spec, i)?;
        let bytes = encode_image(&sc.image);
        let bin = scenes_dir.join(format!("{}.bin", scene_stem(i)));
        fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
        let rec = SceneRecord {
            index: i,
            seed: sc.seed,
            image_sha256: hex::encode(Sha256::digest(&bytes)),
            annotations: sc.annotations,
        };
        let json = scenes_dir.join(format!("{}.json", scene_stem(i)));
        fs::write(&json, serde_json::to_string_pretty(&rec)?).map_err(|e| Error::io(&json, e))?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: spec.seed,
        scenes: spec.num_scenes(),
        spec: spec.clone(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

fn load_scene(dir: &Path, index: usize, spec: &DatasetSpec) -> Result<Scene> {
    let json = dir.join("scenes").join(format!("{}.json", scene_stem(index)));
    let bin = dir.join("scenes").join(format!("{}.bin", scene_stem(index)));
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let rec: SceneRecord = serde_json::from_str(&text).map_err(|e| Error::format(&json, e.to_string()))?;
    if rec.index != index {
        return Err(Error::format(&json, format!("record claims index {}", rec.index)));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if hex::encode(Sha256::digest(&bytes)) != rec.image_sha256 {
        return Err(Error::format(&bin, "image payload does not match its recorded checksum"));
    }
    let s = spec.image_size;
    if bytes.len() != s * s * 3 * 8 {
        return Err(Error::format(&bin, format!("expected {} bytes, found {}", s * s * 24, bytes.len())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::format(&bin, "pixel values outside [0, 1]"));
    }
    for a in &rec.annotations {
        a.bbox.validate().map_err(|e| Error::format(&json, e.to_string()))?;
        if spec.category_index(&a.category).is_none() {
            return Err(Error::format(&json, format!("unknown category '{}'", a.category)));
        }
    }
    Ok(Scene {
        index,
        seed: rec.seed,
        image: Tensor::new(vec![s, s, 3], values)?,
        annotations: rec.annotations,
    })
}

/// Reads a directory written by [`export_dataset`], verifying every record.
pub fn load_dataset(dir: &Path) -> Result<(DatasetSpec, Vec<Scene>)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format(
            &path,
            format!("manifest version {} is not supported (expected {MANIFEST_VERSION})", m.version),
        ));
    }
    if m.scenes != m.spec.num_scenes() || m.seed != m.spec.seed {
        return Err(Error::format(&path, "manifest header disagrees with its spec"));
    }
    m.spec.validate()?;
    let scenes = (0..m.scenes).map(|i| load_scene(dir, i, &m.spec)).collect::<Result<Vec<_>>>()?;
    Ok((m.spec, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            train_scenes: 4,
            test_scenes: 2,
            ..DatasetSpec::reference()
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        export_dataset(&spec, dir.path()).unwrap();
        let (back, scenes) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, spec);
        for (i, sc) in scenes.iter().enumerate() {
            assert_eq!(sc, &generate_scene(&spec, i).unwrap());
        }
        let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(manifest.contains("\"seed\": 7"));
    }

    #[test]
    fn tampered_record_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&small(), dir.path()).unwrap();
        let bin = dir.path().join("scenes/000002.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[100] ^= 0x01;
        fs::write(&bin, bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("000002.bin"), "{err}");
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&small(), dir.path()).unwrap();
        let p = dir.path().join("manifest.json");
        let text = fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 2");
        fs::write(&p, text).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
