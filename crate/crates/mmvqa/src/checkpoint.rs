//! Versioned checkpoint file format.
//!
//! Layout:
//!
//! ```text
//! "MMBC"                         magic
//! u32 LE                         format version (currently 1)
//! UTF-8 header lines, each '\n'-terminated:
//!   config <canonical trunk configuration>
//!   head <kind> <classes>
//!   fingerprint <16 hex>         FNV-1a 64 of the config value
//!   epoch <u32>
//!   best <8 hex>                 f32 bits of the best validation metric
//!   rng <16 hex>                 master seed
//!   opt <u64>                    Adam step count (only with optimizer state)
//!   tensor <name> f32 <rank> <extents...>
//!   data
//! raw little-endian f32 payloads in manifest order
//! u32 LE                         CRC32 (IEEE) of the payload region
//! ```
//!
//! Loading and re-saving a checkpoint is byte-identical. Version,
//! fingerprint, truncation, and payload-integrity failures are distinct
//! error kinds.

use std::fs;
use std::path::Path;

use mmvqa_core::model::{Head, ModelConfig, Network};
use mmvqa_core::optim::AdamState;
use mmvqa_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const MAGIC: &[u8; 4] = b"MMBC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint version error: {0}")]
    Version(String),
    #[error("checkpoint fingerprint mismatch: expected config {expected:?}, found {found:?}")]
    Fingerprint { expected: String, found: String },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint payload corrupt: stored crc {stored:08x}, computed {computed:08x}")]
    Integrity { stored: u32, computed: u32 },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// FNV-1a 64-bit hash; the config fingerprint.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// In-memory checkpoint: everything needed to reproduce model, optimizer,
/// and training position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub head_kind: String,
    pub head_classes: usize,
    pub epoch: u32,
    pub best_metric: f32,
    pub rng_seed: u64,
    pub adam_step: Option<u64>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_network(
        net: &Network,
        adam: Option<&AdamState>,
        epoch: u32,
        best_metric: f32,
        rng_seed: u64,
    ) -> Checkpoint {
        let head_classes = match &net.head {
            Head::Mlm(_) => net.cfg.vocab_size,
            Head::Vqa(h) | Head::Category(h) => h.classes(),
        };
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        net.visit(&mut |name, t| tensors.push((name, t.clone())));
        let mut adam_step = None;
        if let Some(state) = adam {
            adam_step = Some(state.t);
            for (name, m, v) in state.moments() {
                tensors.push((format!("adam.m.{name}"), m.clone()));
                tensors.push((format!("adam.v.{name}"), v.clone()));
            }
        }
        Checkpoint {
            config: net.cfg.canonical(),
            head_kind: net.head.kind().to_string(),
            head_classes,
            epoch,
            best_metric,
            rng_seed,
            adam_step,
            tensors,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut header = String::new();
        header.push_str(&format!("config {}\n", self.config));
        header.push_str(&format!("head {} {}\n", self.head_kind, self.head_classes));
        header.push_str(&format!(
            "fingerprint {:016x}\n",
            fnv1a64(self.config.as_bytes())
        ));
        header.push_str(&format!("epoch {}\n", self.epoch));
        header.push_str(&format!("best {:08x}\n", self.best_metric.to_bits()));
        header.push_str(&format!("rng {:016x}\n", self.rng_seed));
        if let Some(t) = self.adam_step {
            header.push_str(&format!("opt {t}\n"));
        }
        for (name, tensor) in &self.tensors {
            header.push_str(&format!("tensor {name} f32 {}", tensor.rank()));
            for d in tensor.shape() {
                header.push_str(&format!(" {d}"));
            }
            header.push('\n');
        }
        header.push_str("data\n");
        out.extend_from_slice(header.as_bytes());

        let mut payload = Vec::new();
        for (_, tensor) in &self.tensors {
            for &v in tensor.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&payload);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated(format!(
                "{} bytes is shorter than the fixed prelude",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::Version(format!(
                "bad magic {:?}, expected {:?}",
                &bytes[..4],
                MAGIC
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }

        // header: '\n'-terminated lines until the "data" sentinel
        let mut pos = 8usize;
        let mut config = None;
        let mut head = None;
        let mut fingerprint = None;
        let mut epoch = None;
        let mut best = None;
        let mut rng_seed = None;
        let mut adam_step = None;
        let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| {
                    CheckpointError::Truncated("header ends without data sentinel".into())
                })?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| CheckpointError::Format("header is not UTF-8".into()))?;
            pos += nl + 1;
            if line == "data" {
                break;
            }
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "config" => config = Some(rest.to_string()),
                "head" => {
                    let (kind, classes) = rest.split_once(' ').ok_or_else(|| {
                        CheckpointError::Format(format!("bad head line {line:?}"))
                    })?;
                    let classes: usize = classes.parse().map_err(|_| {
                        CheckpointError::Format(format!("bad head classes {classes:?}"))
                    })?;
                    head = Some((kind.to_string(), classes));
                }
                "fingerprint" => {
                    fingerprint = Some(u64::from_str_radix(rest, 16).map_err(|_| {
                        CheckpointError::Format(format!("bad fingerprint {rest:?}"))
                    })?)
                }
                "epoch" => {
                    epoch = Some(rest.parse::<u32>().map_err(|_| {
                        CheckpointError::Format(format!("bad epoch {rest:?}"))
                    })?)
                }
                "best" => {
                    let bits = u32::from_str_radix(rest, 16).map_err(|_| {
                        CheckpointError::Format(format!("bad best metric {rest:?}"))
                    })?;
                    best = Some(f32::from_bits(bits));
                }
                "rng" => {
                    rng_seed = Some(u64::from_str_radix(rest, 16).map_err(|_| {
                        CheckpointError::Format(format!("bad rng state {rest:?}"))
                    })?)
                }
                "opt" => {
                    adam_step = Some(rest.parse::<u64>().map_err(|_| {
                        CheckpointError::Format(format!("bad opt step {rest:?}"))
                    })?)
                }
                "tensor" => {
                    let mut parts = rest.split(' ');
                    let name = parts
                        .next()
                        .ok_or_else(|| CheckpointError::Format("tensor without name".into()))?
                        .to_string();
                    let dtype = parts.next().unwrap_or("");
                    if dtype != "f32" {
                        return Err(CheckpointError::Format(format!(
                            "tensor {name}: unsupported dtype {dtype:?}"
                        )));
                    }
                    let rank: usize = parts
                        .next()
                        .and_then(|r| r.parse().ok())
                        .ok_or_else(|| CheckpointError::Format(format!("tensor {name}: bad rank")))?;
                    let dims: Vec<usize> = parts
                        .map(|d| d.parse::<usize>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| CheckpointError::Format(format!("tensor {name}: bad extent")))?;
                    if dims.len() != rank {
                        return Err(CheckpointError::Format(format!(
                            "tensor {name}: rank {rank} with {} extents",
                            dims.len()
                        )));
                    }
                    manifest.push((name, dims));
                }
                other => {
                    return Err(CheckpointError::Format(format!(
                        "unknown header key {other:?}"
                    )))
                }
            }
        }

        let config = config.ok_or_else(|| CheckpointError::Format("missing config".into()))?;
        let (head_kind, head_classes) =
            head.ok_or_else(|| CheckpointError::Format("missing head".into()))?;
        let fingerprint =
            fingerprint.ok_or_else(|| CheckpointError::Format("missing fingerprint".into()))?;
        if fingerprint != fnv1a64(config.as_bytes()) {
            return Err(CheckpointError::Fingerprint {
                expected: format!("{:016x}", fnv1a64(config.as_bytes())),
                found: format!("{fingerprint:016x}"),
            });
        }

        let payload_len: usize = manifest
            .iter()
            .map(|(_, dims)| dims.iter().product::<usize>() * 4)
            .sum();
        if bytes.len() < pos + payload_len + 4 {
            return Err(CheckpointError::Truncated(format!(
                "need {} payload bytes plus crc, only {} remain",
                payload_len,
                bytes.len().saturating_sub(pos)
            )));
        }
        if bytes.len() != pos + payload_len + 4 {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes after the payload",
                bytes.len() - (pos + payload_len + 4)
            )));
        }
        let payload = &bytes[pos..pos + payload_len];
        let stored = u32::from_le_bytes(bytes[pos + payload_len..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(CheckpointError::Integrity { stored, computed });
        }

        let mut tensors = Vec::with_capacity(manifest.len());
        let mut offset = 0usize;
        for (name, dims) in manifest {
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let b = &payload[offset + i * 4..offset + i * 4 + 4];
                data.push(f32::from_le_bytes(b.try_into().unwrap()));
            }
            offset += n * 4;
            let tensor = Tensor::new(dims, data)
                .map_err(|e| CheckpointError::Format(format!("tensor {name}: {e}")))?;
            tensors.push((name, tensor));
        }

        Ok(Checkpoint {
            config,
            head_kind,
            head_classes,
            epoch: epoch.ok_or_else(|| CheckpointError::Format("missing epoch".into()))?,
            best_metric: best.ok_or_else(|| CheckpointError::Format("missing best".into()))?,
            rng_seed: rng_seed.ok_or_else(|| CheckpointError::Format("missing rng".into()))?,
            adam_step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = fs::read(path)?;
        Checkpoint::decode(&bytes)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CheckpointError> {
        ModelConfig::parse_canonical(&self.config)
            .map_err(|e| CheckpointError::Format(e.to_string()))
    }

    /// Verify that this checkpoint's trunk configuration matches `cfg`.
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<(), CheckpointError> {
        if self.config != cfg.canonical() {
            return Err(CheckpointError::Fingerprint {
                expected: cfg.canonical(),
                found: self.config.clone(),
            });
        }
        Ok(())
    }

    /// Rebuild the full network from the stored config and tensors.
    pub fn to_network(&self) -> Result<Network, CheckpointError> {
        let cfg = self.model_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = match self.head_kind.as_str() {
            "mlm" => Network::init_mlm(cfg, &mut rng),
            "vqa" => Network::init_vqa(cfg, self.head_classes, &mut rng),
            "category" => Network::init_category(cfg, self.head_classes, &mut rng),
            other => {
                return Err(CheckpointError::Format(format!(
                    "unknown head kind {other:?}"
                )))
            }
        }
        .map_err(|e| CheckpointError::Format(e.to_string()))?;

        let stored: std::collections::BTreeMap<&str, &Tensor<f32>> = self
            .tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        net.visit_mut(&mut |name, t| match stored.get(name.as_str()) {
            Some(src) if src.shape() == t.shape() => *t = (*src).clone(),
            Some(src) => mismatched.push(format!(
                "{name}: stored {:?} vs model {:?}",
                src.shape(),
                t.shape()
            )),
            None => missing.push(name),
        });
        if !missing.is_empty() {
            return Err(CheckpointError::Format(format!(
                "missing tensors: {}",
                missing.join(", ")
            )));
        }
        if !mismatched.is_empty() {
            return Err(CheckpointError::Format(format!(
                "shape mismatches: {}",
                mismatched.join("; ")
            )));
        }
        Ok(net)
    }

    /// Rebuild the optimizer state, if this checkpoint carries one.
    pub fn to_adam(&self) -> Option<AdamState> {
        let t = self.adam_step?;
        let mut state = AdamState::new();
        state.t = t;
        for (name, tensor) in &self.tensors {
            if let Some(pname) = name.strip_prefix("adam.m.") {
                let v = self
                    .tensors
                    .iter()
                    .find(|(n, _)| n == &format!("adam.v.{pname}"))
                    .map(|(_, t)| t.clone())?;
                state.insert_moments(pname.to_string(), tensor.clone(), v);
            }
        }
        Some(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmvqa_core::vision::FeatureMode;

    fn toy_net() -> Network {
        let cfg = ModelConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            max_text: 4,
            vocab_size: 12,
            feature_mode: FeatureMode::Multiscale,
            image_size: 32,
            cnn_widths: [2, 2, 4, 4, 4],
        };
        Network::init_mlm(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let net = toy_net();
        let ckpt = Checkpoint::from_network(&net, None, 3, 0.25, 17);
        let bytes = ckpt.encode();
        let reloaded = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(reloaded.encode(), bytes);
        assert_eq!(reloaded, ckpt);
    }

    #[test]
    fn network_round_trips_through_checkpoint() {
        let net = toy_net();
        let ckpt = Checkpoint::from_network(&net, None, 0, f32::INFINITY, 1);
        let rebuilt = Checkpoint::decode(&ckpt.encode()).unwrap().to_network().unwrap();
        assert_eq!(rebuilt, net);
    }

    #[test]
    fn adam_state_round_trips() {
        let net = toy_net();
        let mut adam = AdamState::new();
        adam.begin_step();
        let mut p = net.trunk.embed.segment.clone();
        let g = Tensor::full(p.shape().to_vec(), 0.5);
        adam.update("embed.segment", &mut p, &g, 1e-3).unwrap();
        let ckpt = Checkpoint::from_network(&net, Some(&adam), 1, 0.5, 2);
        let restored = Checkpoint::decode(&ckpt.encode()).unwrap().to_adam().unwrap();
        assert_eq!(restored.t, 1);
        let names: Vec<&String> = restored.moments().map(|(n, _, _)| n).collect();
        assert_eq!(names, vec!["embed.segment"]);
    }

    #[test]
    fn tampered_magic_is_a_version_error() {
        let ckpt = Checkpoint::from_network(&toy_net(), None, 0, 0.0, 0);
        let mut bytes = ckpt.encode();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(CheckpointError::Version(_))
        ));
    }

    #[test]
    fn wrong_version_is_a_version_error() {
        let ckpt = Checkpoint::from_network(&toy_net(), None, 0, 0.0, 0);
        let mut bytes = ckpt.encode();
        bytes[4] = 99;
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(CheckpointError::Version(_))
        ));
    }

    #[test]
    fn truncation_is_distinct_from_corruption() {
        let ckpt = Checkpoint::from_network(&toy_net(), None, 0, 0.0, 0);
        let bytes = ckpt.encode();
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 10]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut corrupt = bytes.clone();
        let n = corrupt.len();
        corrupt[n - 100] ^= 0xFF; // flip a payload byte
        assert!(matches!(
            Checkpoint::decode(&corrupt),
            Err(CheckpointError::Integrity { .. })
        ));
    }

    #[test]
    fn mismatched_config_fails_compatibility() {
        let net = toy_net();
        let ckpt = Checkpoint::from_network(&net, None, 0, 0.0, 0);
        let mut other = net.cfg.clone();
        other.dim = 16;
        other.ffn_dim = 32;
        assert!(matches!(
            ckpt.check_compatible(&other),
            Err(CheckpointError::Fingerprint { .. })
        ));
        assert!(ckpt.check_compatible(&net.cfg).is_ok());
    }

    #[test]
    fn fingerprint_header_tamper_is_detected() {
        let ckpt = Checkpoint::from_network(&toy_net(), None, 0, 0.0, 0);
        let bytes = ckpt.encode();
        let text = String::from_utf8_lossy(&bytes).to_string();
        let pos = text.find("fingerprint ").unwrap() + "fingerprint ".len();
        let mut tampered = bytes.clone();
        tampered[pos] = if bytes[pos] == b'0' { b'1' } else { b'0' };
        assert!(matches!(
            Checkpoint::decode(&tampered),
            Err(CheckpointError::Fingerprint { .. })
        ));
    }
}
