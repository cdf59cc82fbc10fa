//! Binary checkpoints for trained (or partially trained) models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"BMOECKPT"                     magic, 8 bytes
//! u32                             format version
//! u64                             header length H
//! H bytes                         JSON header (see CheckpointHeader)
//! f64 * P                         parameters, network by network in header
//!                                 order; per layer weights (row-major, out x in)
//!                                 then biases
//! f64 * 2P (optional)             adaptive-moment m then v, same order,
//!                                 present iff `adam_steps` is set
//! 32 bytes                        SHA-256 of everything above
//! ```
//!
//! `save` also writes a short human-readable summary next to the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::moe::{BeamModel, EpochRecord, GatingInput, ModelAdamState, ModelKind, TrainingRun};
use crate::nn::{AdamState, DenseNet, DenseNetSpec};

pub const MAGIC: &[u8; 8] = b"BMOECKPT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkEntry {
    pub name: String,
    pub layer_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub modality_dims: Vec<usize>,
    pub active_modalities: Vec<usize>,
    pub gating_input: GatingInput,
    pub freeze_gating: bool,
    pub networks: Vec<NetworkEntry>,
    pub init_seed: u64,
    /// Config hash of the dataset the model was trained on.
    pub dataset_hash: Option<String>,
    /// Epochs completed.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Per-network adaptive-moment step counts.
    pub adam_steps: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub run: TrainingRun,
    pub init_seed: u64,
    pub dataset_hash: Option<String>,
}

fn format_err(origin: &Path, reason: impl Into<String>) -> Error {
    Error::format(origin, reason)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(self.origin, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| format_err(self.origin, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

impl Checkpoint {
    pub fn new(run: TrainingRun, init_seed: u64, dataset_hash: Option<String>) -> Self {
        Self {
            run,
            init_seed,
            dataset_hash,
        }
    }

    pub fn model(&self) -> &BeamModel {
        &self.run.model
    }

    pub fn header(&self) -> CheckpointHeader {
        let model = &self.run.model;
        CheckpointHeader {
            kind: model.kind(),
            modality_dims: model.modality_dims().to_vec(),
            active_modalities: model.active_modalities().to_vec(),
            gating_input: model.gating_input(),
            freeze_gating: model.freeze_gating(),
            networks: model
                .network_names()
                .into_iter()
                .zip(model.networks())
                .map(|(name, net)| NetworkEntry {
                    name,
                    layer_sizes: net.spec().layer_sizes().to_vec(),
                })
                .collect(),
            init_seed: self.init_seed,
            dataset_hash: self.dataset_hash.clone(),
            epoch: self.run.epochs_done(),
            history: self.run.history.clone(),
            adam_steps: self
                .run
                .adam
                .as_ref()
                .map(|a| a.networks.iter().map(|s| s.step).collect()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut push = |vals: Vec<f64>| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for net in self.run.model.networks() {
            push(net.params_flat());
        }
        if let Some(adam) = &self.run.adam {
            for s in &adam.networks {
                push(s.m.flat());
            }
            for s in &adam.networks {
                push(s.v.flat());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
            return Err(format_err(origin, "file too short for a checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let mut r = Reader {
            bytes: body,
            pos: 0,
            origin,
        };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(format_err(origin, "bad magic; not a checkpoint"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(format_err(
                origin,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let header_len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let header_len = usize::try_from(header_len)
            .map_err(|_| format_err(origin, "header length overflows"))?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| format_err(origin, format!("bad header: {e}")))?;
        if Sha256::digest(body).as_slice() != digest {
            return Err(format_err(origin, "checksum mismatch"));
        }
        let mut nets = Vec::with_capacity(header.networks.len());
        for entry in &header.networks {
            let spec = DenseNetSpec::new(entry.layer_sizes.clone())
                .map_err(|e| format_err(origin, format!("network {}: {e}", entry.name)))?;
            let vals = r.f64s(spec.num_params())?;
            nets.push(DenseNet::from_flat(spec, &vals)?);
        }
        let adam = match &header.adam_steps {
            Some(steps) => {
                if steps.len() != nets.len() {
                    return Err(format_err(origin, "optimizer state count mismatch"));
                }
                let mut states: Vec<AdamState> = nets.iter().map(AdamState::new).collect();
                for s in &mut states {
                    let n = s.m.flat().len();
                    s.m.set_flat(&r.f64s(n)?)?;
                }
                for (s, &step) in states.iter_mut().zip(steps) {
                    let n = s.v.flat().len();
                    s.v.set_flat(&r.f64s(n)?)?;
                    s.step = step;
                }
                Some(ModelAdamState { networks: states })
            }
            None => None,
        };
        if r.pos != body.len() {
            return Err(format_err(origin, "trailing bytes after parameters"));
        }
        let n_experts = header.active_modalities.len();
        if nets.len() < n_experts + 1 {
            return Err(format_err(origin, "too few networks for the declared model"));
        }
        let head = nets.pop().expect("checked length");
        let gating = if nets.len() > n_experts { nets.pop() } else { None };
        if nets.len() != n_experts {
            return Err(format_err(origin, "network count does not match modalities"));
        }
        let model = BeamModel::from_parts(
            header.kind,
            header.modality_dims.clone(),
            header.active_modalities.clone(),
            nets,
            gating,
            head,
            header.gating_input,
            header.freeze_gating,
        )
        .map_err(|e| format_err(origin, format!("inconsistent model: {e}")))?;
        if header.history.len() != header.epoch {
            return Err(format_err(origin, "history length disagrees with epoch"));
        }
        Ok(Self {
            run: TrainingRun {
                model,
                history: header.history,
                adam,
            },
            init_seed: header.init_seed,
            dataset_hash: header.dataset_hash,
        })
    }

    /// Human-readable summary written next to saved checkpoints.
    pub fn summary(&self) -> String {
        let h = self.header();
        let mut out = String::new();
        let _ = writeln!(out, "kind: {}", h.kind);
        let _ = writeln!(out, "modality_dims: {:?}", h.modality_dims);
        let _ = writeln!(out, "active_modalities: {:?}", h.active_modalities);
        for n in &h.networks {
            let _ = writeln!(out, "network {}: {:?}", n.name, n.layer_sizes);
        }
        let _ = writeln!(out, "parameters: {}", self.run.model.num_params());
        let _ = writeln!(out, "epochs: {}", h.epoch);
        if let Some(last) = h.history.last() {
            let val = last.val_top1.map_or("n/a".to_owned(), |v| format!("{v:.4}"));
            let _ = writeln!(out, "last train_loss: {:.6}", last.train_loss);
            let _ = writeln!(out, "last val_top1: {val}");
        }
        let _ = writeln!(
            out,
            "optimizer state: {}",
            if h.adam_steps.is_some() { "adam" } else { "none" }
        );
        out
    }

    pub fn summary_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".txt");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.to_bytes())?;
        fsutil::write_atomic(&Self::summary_path(path), self.summary().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsutil::read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{ModelConfig, OptimizerKind, TrainConfig};
    use crate::scenario::{generate_dataset, ScenarioConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            embedding_dim: 6,
            position_expert_width: 5,
            visual_expert_width: 7,
            gating_width: 4,
            ..ModelConfig::default()
        }
    }

    fn trained(kind: ModelKind, optimizer: OptimizerKind) -> Checkpoint {
        let ds = generate_dataset(&ScenarioConfig {
            num_samples: 60,
            visual_grid_size: 3,
            num_beams: 8,
            ..ScenarioConfig::default()
        })
        .unwrap();
        let model = BeamModel::build(kind, ds.modality_dims(), 8, &cfg()).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 0.01,
            optimizer,
            ..TrainConfig::default()
        };
        let run = crate::moe::train(model, &ds, &tc).unwrap();
        Checkpoint::new(run, 0, Some(ds.header().config_hash.clone()))
    }

    #[test]
    fn round_trip_every_kind() {
        let p = Path::new("mem");
        for kind in ModelKind::ALL {
            for opt in [OptimizerKind::Sgd, OptimizerKind::Adam] {
                let ck = trained(kind, opt);
                let bytes = ck.to_bytes();
                let back = Checkpoint::from_bytes(&bytes, p).unwrap();
                assert_eq!(back, ck);
                assert_eq!(back.to_bytes(), bytes);
            }
        }
    }

    #[test]
    fn save_load_writes_summary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = trained(ModelKind::Moe, OptimizerKind::Sgd);
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let summary = std::fs::read_to_string(Checkpoint::summary_path(&path)).unwrap();
        assert!(summary.contains("kind: moe") && summary.contains("epochs: 2"));
    }

    #[test]
    fn corruption_is_a_format_error() {
        let p = Path::new("mem");
        let bytes = trained(ModelKind::ConcatFusion, OptimizerKind::Sgd).to_bytes();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let mut flipped = bytes.clone();
        let mid = bytes.len() - 100;
        flipped[mid] ^= 1;
        let mut bad_header = bytes.clone();
        bad_header[20] = b'#';
        for (what, b) in [
            ("magic", bad_magic),
            ("payload", flipped),
            ("header", bad_header),
            ("truncated", bytes[..bytes.len() - 1].to_vec()),
            ("empty", Vec::new()),
        ] {
            let err = Checkpoint::from_bytes(&b, p).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "{what}: {err}");
            assert_eq!(err.exit_code(), 3);
        }
    }
}
