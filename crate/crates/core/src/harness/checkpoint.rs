//! Binary checkpoint files.
//!
//! Layout: `"SACA"`, format `u32`, config hash `u64`, version `u64`, env
//! steps, gradient steps and episodes as `u64`, then network fragments in the
//! order policy, Q1, Q2, target Q1, target Q2, then `log α`, the four Adam
//! states (policy, Q1, Q2, temperature) and the learner rng. Everything is
//! little-endian.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::codec::{DecodeError, Reader, Writer};
use crate::net::{Activation, AdamConfig, AdamState, Layer, Mlp};

pub const MAGIC: &[u8; 4] = b"SACA";
pub const FORMAT_VERSION: u32 = 1;
pub const FILE_NAME: &str = "latest.ckpt";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
    #[error("config hash {found:016x} does not match {expected:016x}")]
    ConfigMismatch { expected: u64, found: u64 },
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub version: u64,
    pub env_steps: u64,
    pub grad_steps: u64,
    pub episodes: u64,
    pub policy: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub log_alpha: f64,
    pub policy_opt: AdamState,
    pub q1_opt: AdamState,
    pub q2_opt: AdamState,
    pub alpha_opt: AdamState,
    pub rng: RngState,
}

fn write_net(w: &mut Writer, net: &Mlp) {
    w.u32(net.layers().len() as u32);
    for (i, l) in net.layers().iter().enumerate() {
        w.u32(i as u32)
            .u32(l.output_dim as u32)
            .u32(l.input_dim as u32)
            .u8(l.activation.tag())
            .f64s(&l.weights)
            .f64s(&l.bias);
    }
}

fn read_net(r: &mut Reader) -> Result<Mlp, DecodeError> {
    let start = r.offset();
    let n = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n.min(64));
    for i in 0..n {
        if r.u32()? as usize != i {
            return Err(r.invalid("layer index out of order"));
        }
        let out = r.u32()? as usize;
        let inp = r.u32()? as usize;
        let activation = Activation::from_tag(r.u8()?).ok_or_else(|| r.invalid("unknown activation"))?;
        let count = out.checked_mul(inp).ok_or_else(|| r.invalid("layer shape overflow"))?;
        let weights = r.f64s(count)?;
        let bias = r.f64s(out)?;
        layers.push(Layer {
            weights,
            bias,
            input_dim: inp,
            output_dim: out,
            activation,
        });
    }
    Mlp::from_layers(layers).map_err(|e| DecodeError::Invalid {
        offset: start,
        reason: e.to_string(),
    })
}

fn write_adam(w: &mut Writer, a: &AdamState) {
    w.u64(a.step)
        .f64(a.config.learning_rate)
        .f64(a.config.beta1)
        .f64(a.config.beta2)
        .f64(a.config.epsilon)
        .u32(a.first_moment.len() as u32)
        .f64s(&a.first_moment)
        .f64s(&a.second_moment);
}

fn read_adam(r: &mut Reader) -> Result<AdamState, DecodeError> {
    let step = r.u64()?;
    let config = AdamConfig {
        learning_rate: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
    };
    let n = r.u32()? as usize;
    Ok(AdamState {
        config,
        step,
        first_moment: r.f64s(n)?,
        second_moment: r.f64s(n)?,
    })
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC)
            .u32(FORMAT_VERSION)
            .u64(self.config_hash)
            .u64(self.version)
            .u64(self.env_steps)
            .u64(self.grad_steps)
            .u64(self.episodes);
        for net in [&self.policy, &self.q1, &self.q2, &self.target1, &self.target2] {
            write_net(&mut w, net);
        }
        w.f64(self.log_alpha);
        for a in [&self.policy_opt, &self.q1_opt, &self.q2_opt, &self.alpha_opt] {
            write_adam(&mut w, a);
        }
        w.bytes(&self.rng.seed).u64(self.rng.stream).u128(self.rng.word_pos);
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(DecodeError::Invalid {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let format = r.u32()?;
        if format != FORMAT_VERSION {
            return Err(r.invalid(&format!("unsupported format {format}")));
        }
        let config_hash = r.u64()?;
        let version = r.u64()?;
        let env_steps = r.u64()?;
        let grad_steps = r.u64()?;
        let episodes = r.u64()?;
        let policy = read_net(&mut r)?;
        let q1 = read_net(&mut r)?;
        let q2 = read_net(&mut r)?;
        let target1 = read_net(&mut r)?;
        let target2 = read_net(&mut r)?;
        let log_alpha = r.f64()?;
        let policy_opt = read_adam(&mut r)?;
        let q1_opt = read_adam(&mut r)?;
        let q2_opt = read_adam(&mut r)?;
        let alpha_opt = read_adam(&mut r)?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let rng = RngState {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        };
        r.finish()?;
        Ok(Checkpoint {
            config_hash,
            version,
            env_steps,
            grad_steps,
            episodes,
            policy,
            q1,
            q2,
            target1,
            target2,
            log_alpha,
            policy_opt,
            q1_opt,
            q2_opt,
            alpha_opt,
            rng,
        })
    }

    /// Reads and checks the config hash when `expected` is given.
    pub fn load(path: &Path, expected: Option<u64>) -> Result<Self, CheckpointError> {
        let ckpt = Self::decode(&fs::read(path)?)?;
        if let Some(expected) = expected {
            if ckpt.config_hash != expected {
                return Err(CheckpointError::ConfigMismatch {
                    expected,
                    found: ckpt.config_hash,
                });
            }
        }
        Ok(ckpt)
    }

    /// Writes to a temporary sibling and renames it over `path`.
    pub fn save_atomic(&self, path: &Path) -> io::Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(format!(".tmp{}", std::process::id()));
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, self.encode())?;
        fs::rename(&tmp, path)
    }
}

/// Version stored in a checkpoint file, read without decoding the rest.
pub fn peek_version(path: &Path) -> Option<u64> {
    let mut buf = [0u8; 24];
    let mut f = fs::File::open(path).ok()?;
    io::Read::read_exact(&mut f, &mut buf).ok()?;
    if &buf[..4] != MAGIC {
        return None;
    }
    Some(u64::from_le_bytes(buf[16..24].try_into().unwrap()))
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(FILE_NAME)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let net = |s| Mlp::new(&[3, 4, 2], s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: u64 = rng.random();
        let mut opt = AdamState::for_network(&net(0), AdamConfig::default());
        opt.step = 7;
        opt.first_moment[1] = -0.25;
        Checkpoint {
            config_hash: 0xdead_beef,
            version: 4,
            env_steps: 1000,
            grad_steps: 900,
            episodes: 5,
            policy: net(1),
            q1: net(2),
            q2: net(3),
            target1: net(4),
            target2: net(5),
            log_alpha: -0.5,
            policy_opt: opt.clone(),
            q1_opt: opt.clone(),
            q2_opt: opt,
            alpha_opt: AdamState::new(1, AdamConfig::default()),
            rng: RngState::capture(&rng),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let c = sample();
        let bytes = c.encode();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), c);
    }

    #[test]
    fn rng_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..17 {
            let _: u32 = rng.random();
        }
        let mut copy = RngState::capture(&rng).restore();
        for _ in 0..100 {
            assert_eq!(rng.random::<u64>(), copy.random::<u64>());
        }
    }

    #[test]
    fn every_truncation_errors() {
        let bytes = sample().encode();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn atomic_save_and_peek() {
        let dir = tempfile::tempdir().unwrap();
        let path = checkpoint_path(dir.path());
        let c = sample();
        c.save_atomic(&path).unwrap();
        assert_eq!(peek_version(&path), Some(4));
        assert_eq!(Checkpoint::load(&path, Some(0xdead_beef)).unwrap(), c);
        assert!(matches!(
            Checkpoint::load(&path, Some(1)),
            Err(CheckpointError::ConfigMismatch { .. })
        ));
    }
}
