//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every array as raw little-endian `f64` in header order
//! (parameters, running means and variances, optimizer velocity), and a
//! trailing SHA-256 of everything before it.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::grad::Tensor;
use crate::model::{ModelParams, RunningStats, SpeakerCnnConfig, SpeakerModel};
use crate::training::{DefenseKind, TrainState};

pub const MAGIC: &[u8; 8] = b"HATCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    frontend: FrontendConfig,
    model: SpeakerCnnConfig,
    defense: Option<DefenseKind>,
    epoch: usize,
    seed: u64,
    config_fingerprint: String,
    corpus_fingerprint: String,
    shapes: Vec<Vec<usize>>,
    running: Vec<usize>,
    has_velocity: bool,
}

/// Everything needed to rebuild a model and resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub frontend: FrontendConfig,
    pub model: SpeakerCnnConfig,
    pub params: ModelParams,
    pub velocity: Option<Vec<Tensor>>,
    /// Completed epochs.
    pub epoch: usize,
    pub defense: Option<DefenseKind>,
    pub seed: u64,
    pub config_fingerprint: String,
    pub corpus_fingerprint: String,
}

impl Checkpoint {
    pub fn from_state(
        state: &TrainState,
        defense: Option<DefenseKind>,
        seed: u64,
        config_fingerprint: &str,
        corpus_fingerprint: &str,
    ) -> Self {
        Self {
            frontend: state.model.frontend().config().clone(),
            model: state.model.config().clone(),
            params: state.model.params.clone(),
            velocity: Some(state.velocity.clone()),
            epoch: state.epoch,
            defense,
            seed,
            config_fingerprint: config_fingerprint.to_string(),
            corpus_fingerprint: corpus_fingerprint.to_string(),
        }
    }

    pub fn to_model(&self) -> Result<SpeakerModel> {
        SpeakerModel::from_parts(self.frontend.clone(), self.model.clone(), self.params.clone())
    }

    /// Model plus optimizer state; velocity restarts at zero if it was not
    /// saved.
    pub fn to_state(&self) -> Result<TrainState> {
        let model = self.to_model()?;
        let mut state = TrainState::new(model);
        if let Some(v) = &self.velocity {
            if v.len() != state.velocity.len() || v.iter().zip(&state.velocity).any(|(a, b)| a.shape() != b.shape()) {
                return Err(Error::Checkpoint {
                    path: Default::default(),
                    reason: "velocity does not match the parameter shapes".into(),
                });
            }
            state.velocity = v.clone();
        }
        state.epoch = self.epoch;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            frontend: self.frontend.clone(),
            model: self.model.clone(),
            defense: self.defense,
            epoch: self.epoch,
            seed: self.seed,
            config_fingerprint: self.config_fingerprint.clone(),
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            shapes: self.params.tensors.iter().map(|t| t.shape().to_vec()).collect(),
            running: self.params.running.iter().map(|r| r.mean.len()).collect(),
            has_velocity: self.velocity.is_some(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u64::<LittleEndian>(json.len() as u64).unwrap();
        out.extend_from_slice(&json);
        let mut put = |values: &mut dyn Iterator<Item = &f64>| {
            for &v in values {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        };
        for t in &self.params.tensors {
            put(&mut t.iter());
        }
        for r in &self.params.running {
            put(&mut r.mean.iter());
            put(&mut r.var.iter());
        }
        if let Some(v) = &self.velocity {
            for t in v {
                put(&mut t.iter());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() + 12 + 32 {
            return Err("file too short".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if &body[..MAGIC.len()] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch (file truncated or corrupted)".into());
        }
        let mut cur = Cursor::new(&body[MAGIC.len()..]);
        let version = cur.read_u32::<LittleEndian>().map_err(|e| e.to_string())?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version} (expected {VERSION})"));
        }
        let len = cur.read_u64::<LittleEndian>().map_err(|e| e.to_string())? as usize;
        let mut json = vec![0u8; len];
        cur.read_exact(&mut json).map_err(|e| format!("header: {e}"))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| format!("header: {e}"))?;
        let mut take = |n: usize| -> std::result::Result<Vec<f64>, String> {
            let mut v = vec![0.0; n];
            cur.read_f64_into::<LittleEndian>(&mut v)
                .map_err(|_| "array data truncated".to_string())?;
            Ok(v)
        };
        let mut tensors = Vec::new();
        for shape in &header.shapes {
            let n = shape.iter().product();
            tensors.push(Tensor::from_shape_vec(IxDyn(shape), take(n)?).map_err(|e| e.to_string())?);
        }
        let mut running = Vec::new();
        for &n in &header.running {
            running.push(RunningStats {
                mean: Array1::from(take(n)?),
                var: Array1::from(take(n)?),
            });
        }
        let velocity = if header.has_velocity {
            let mut v = Vec::new();
            for shape in &header.shapes {
                let n = shape.iter().product();
                v.push(Tensor::from_shape_vec(IxDyn(shape), take(n)?).map_err(|e| e.to_string())?);
            }
            Some(v)
        } else {
            None
        };
        if (cur.position() as usize) != body.len() - MAGIC.len() {
            return Err("trailing bytes after array data".into());
        }
        Ok(Self {
            frontend: header.frontend,
            model: header.model,
            params: ModelParams { tensors, running },
            velocity,
            epoch: header.epoch,
            defense: header.defense,
            seed: header.seed,
            config_fingerprint: header.config_fingerprint,
            corpus_fingerprint: header.corpus_fingerprint,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let ckpt = Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })?;
        // Shapes and statistics are checked by rebuilding the model once.
        ckpt.to_model().map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(ckpt)
    }

    /// SHA-256 of the serialized checkpoint, used to identify it in reports.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let fe = FrontendConfig {
            sample_rate: 8000,
            window_length: 64,
            hop_length: 32,
            fft_size: 64,
            mel_bins: 6,
            log_floor: 1e-6,
        };
        let mut s = TrainState::new(SpeakerModel::build(fe, SpeakerCnnConfig::tiny(4), 3).unwrap());
        for (i, v) in s.velocity.iter_mut().enumerate() {
            v.mapv_inplace(|_| i as f64 * 0.1 + 1e-17);
        }
        s.model.params.running[0].var[1] = 0.123_456_789_123_456_78;
        s.epoch = 7;
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = state();
        let c = Checkpoint::from_state(&s, Some(DefenseKind::Hat), 42, "cfg", "corpus");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        let restored = back.to_state().unwrap();
        assert_eq!(restored.model.params, s.model.params);
        assert_eq!(restored.velocity, s.velocity);
        assert_eq!(restored.epoch, 7);
        assert_eq!(back.fingerprint(), c.fingerprint());
        assert!(!dir.path().join("model.tmp").exists());
    }

    #[test]
    fn corrupt_files_are_rejected_with_a_reason() {
        let c = Checkpoint::from_state(&state(), None, 1, "a", "b");
        let bytes = c.to_bytes();
        let reason = |b: &[u8]| Checkpoint::from_bytes(b).unwrap_err();
        assert!(reason(&bytes[..bytes.len() - 10]).contains("checksum"));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(reason(&flipped).contains("checksum"));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(reason(&magic).contains("magic"));
        assert!(reason(b"short").contains("short"));

        let mut versioned = bytes[..bytes.len() - 32].to_vec();
        versioned[8] = 9;
        let digest = Sha256::digest(&versioned);
        versioned.extend_from_slice(&digest);
        assert!(reason(&versioned).contains("version 9"));

        let dir = tempfile::tempdir().unwrap();
        let missing = Checkpoint::load(&dir.path().join("none.ckpt"));
        assert!(matches!(missing, Err(Error::Io(_))));
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, &flipped).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn checkpoints_without_velocity_restart_momentum() {
        let mut c = Checkpoint::from_state(&state(), None, 1, "a", "b");
        c.velocity = None;
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.velocity, None);
        assert!(back
            .to_state()
            .unwrap()
            .velocity
            .iter()
            .all(|v| v.iter().all(|&x| x == 0.0)));
    }
}
