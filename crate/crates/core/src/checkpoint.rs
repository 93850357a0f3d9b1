//! Single-file checkpoints: tensors in safetensors format, run metadata as
//! JSON in the header.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "landsynth";

/// Exact position of a ChaCha stream, enough to continue it bit-identically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    /// `u128` word position as a decimal string (JSON numbers are too narrow).
    pub word_pos: String,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos().to_string(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad RNG position '{}'", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// `"gan"` or `"segmenter"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub normalization: serde_json::Value,
    pub rng: RngState,
    pub epoch: u64,
    pub step: u64,
}

/// Writes atomically: a temporary sibling file is renamed into place.
pub fn save(path: &Path, tensors: &BTreeMap<String, Tensor>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let info = HashMap::from([(META_KEY.to_string(), json)]);
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors.iter(), Some(info), &tmp)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(BTreeMap<String, Tensor>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad("not a landsynth checkpoint (missing metadata)".into()))?;
    let meta: CheckpointMeta = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok((tensors.into_iter().collect(), meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn round_trip_preserves_tensors_meta_and_rng_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run/ckpt.safetensors");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..13 {
            rng.next_u32();
        }
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            kind: "gan".into(),
            config: serde_json::json!({"batch_size": 4}),
            normalization: serde_json::json!(null),
            rng: RngState::capture(&rng),
            epoch: 3,
            step: 42,
        };
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "g.w".to_string(),
            Tensor::new(&[[1.5f32, -2.0], [0.25, 8.0]], &Device::Cpu).unwrap(),
        );
        save(&path, &tensors, &meta).unwrap();
        let (back, m2) = load(&path).unwrap();
        assert_eq!(m2, meta);
        assert_eq!(
            back["g.w"].to_vec2::<f32>().unwrap(),
            vec![vec![1.5, -2.0], vec![0.25, 8.0]]
        );
        let mut resumed = m2.rng.restore().unwrap();
        assert_eq!(resumed.next_u64(), rng.next_u64());
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        candle_core::safetensors::save(
            &HashMap::from([("a", Tensor::new(&[1f32], &Device::Cpu).unwrap())]),
            &path,
        )
        .unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("missing metadata"));
        fs::write(&path, b"garbage").unwrap();
        assert!(load(&path).is_err());
    }
}
