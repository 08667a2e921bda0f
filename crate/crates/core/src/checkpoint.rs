//! Binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes  "EPBRMCKP"
//! version      u32      1
//! class        u8       0 car, 1 pedestrian, 2 cyclist
//! dist_bound   f64
//! rot_bins     u32
//! n_points     u32
//! point_widths u32 count, then u32 each
//! head_widths  u32 count, then u32 each
//! seed         u64
//! iteration    u64
//! blocks       u32 count (stages, then the head)
//!   per block: mechanism u8 (0 translation, 1 centering, 2 rotation,
//!              3 scaling, 255 head), u32 layer count, then
//!              (u32 inputs, u32 outputs) per layer
//! payload      f32 per parameter: per block, per layer, weight
//!              (outputs x inputs, row-major) then bias
//! optimizer    u8 0 absent / 1 present; when present:
//!              u8 kind (0 adam, 1 sgd), f64 lr, f64 beta1, f64 beta2,
//!              f64 eps, u64 step, then f64 first moments and f64 second
//!              moments in payload order
//! ```
//!
//! The file must end exactly after the last field.

use alloc::vec::Vec;

use crate::class::ObjectClass;
use crate::network::{BlockParams, Dense, EpbrmModel, Mechanism, ModelConfig, OptimizerKind, OptimizerState};

pub const MAGIC: &[u8; 8] = b"EPBRMCKP";
pub const VERSION: u32 = 1;
const HEAD_TAG: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(&'static str),
    #[error("{0} trailing bytes after checkpoint")]
    Trailing(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: EpbrmModel,
    pub seed: u64,
    pub iteration: u64,
    pub optimizer: Option<OptimizerState>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn widths(&mut self, w: &[usize]) {
        self.u32(w.len());
        for &x in w {
            self.u32(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let end = self.pos + N;
        let bytes = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated(self.buf.len()))?;
        self.pos = end;
        Ok(bytes.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        self.take().map(u32::from_le_bytes)
    }
    fn len(&mut self, max: u32) -> Result<usize, CheckpointError> {
        let v = self.u32()?;
        if v > max {
            return Err(CheckpointError::Corrupt("count out of range"));
        }
        Ok(v as usize)
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        self.take().map(u64::from_le_bytes)
    }
    fn f32(&mut self) -> Result<f32, CheckpointError> {
        self.take().map(f32::from_le_bytes)
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        self.take().map(f64::from_le_bytes)
    }
    fn widths(&mut self) -> Result<Vec<usize>, CheckpointError> {
        let n = self.len(64)?;
        (0..n).map(|_| self.len(1 << 16)).collect()
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        let cfg = &self.model.config;
        w.u8(cfg.class.code());
        w.f64(cfg.dist_bound);
        w.u32(cfg.rotation_bins);
        w.u32(cfg.n_points);
        w.widths(&cfg.point_widths);
        w.widths(&cfg.head_widths);
        w.u64(self.seed);
        w.u64(self.iteration);

        let blocks: Vec<(u8, &BlockParams)> = self
            .model
            .stages
            .iter()
            .map(|(m, b)| (m.code(), b))
            .chain(core::iter::once((HEAD_TAG, &self.model.head)))
            .collect();
        w.u32(blocks.len());
        for (tag, b) in &blocks {
            w.u8(*tag);
            w.u32(b.point_layers.len() + b.head_layers.len());
            for l in b.point_layers.iter().chain(&b.head_layers) {
                w.u32(l.inputs);
                w.u32(l.outputs);
            }
        }
        for t in self.model.tensors() {
            for v in t {
                w.0.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }

        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                let (kind, b1, b2, eps) = match opt.kind {
                    OptimizerKind::Adam { beta1, beta2, eps } => (0, beta1, beta2, eps),
                    OptimizerKind::Sgd => (1, 0.0, 0.0, 0.0),
                };
                w.u8(kind);
                w.f64(opt.learning_rate);
                w.f64(b1);
                w.f64(b2);
                w.f64(eps);
                w.u64(opt.step);
                for m in opt.first_moment.iter().chain(&opt.second_moment) {
                    for v in m {
                        w.f64(*v);
                    }
                }
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &r.take::<8>()? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let class = ObjectClass::from_code(r.u8()?).ok_or(CheckpointError::Corrupt("unknown class"))?;
        let dist_bound = r.f64()?;
        let rotation_bins = r.len(1 << 16)?;
        let n_points = r.len(1 << 24)?;
        let point_widths = r.widths()?;
        let head_widths = r.widths()?;
        let seed = r.u64()?;
        let iteration = r.u64()?;

        let n_blocks = r.len(64)?;
        if n_blocks == 0 {
            return Err(CheckpointError::Corrupt("no head block"));
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let tag = r.u8()?;
            let n_layers = r.len(64)?;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let (i, o) = (r.len(1 << 16)?, r.len(1 << 16)?);
                layers.push(Dense::zeros(i, o));
            }
            let split = point_widths.len().min(layers.len());
            let head_layers = layers.split_off(split);
            blocks.push((tag, BlockParams { point_layers: layers, head_layers }));
        }
        let (head_tag, head) = blocks.pop().expect("nonempty");
        if head_tag != HEAD_TAG {
            return Err(CheckpointError::Corrupt("last block is not the head"));
        }
        let mut stages = Vec::with_capacity(blocks.len());
        let mut mechanisms = Vec::with_capacity(blocks.len());
        for (tag, b) in blocks {
            let m = Mechanism::from_code(tag).ok_or(CheckpointError::Corrupt("unknown mechanism"))?;
            mechanisms.push(m);
            stages.push((m, b));
        }
        let config = ModelConfig { class, dist_bound, mechanisms, rotation_bins, n_points, point_widths, head_widths };
        let mut model = EpbrmModel { config, stages, head };
        model.validate().map_err(|_| CheckpointError::Corrupt("layer shapes do not match the configuration"))?;
        for t in model.tensors_mut() {
            for v in t.iter_mut() {
                *v = r.f32()? as f64;
            }
        }

        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let kind_code = r.u8()?;
                let learning_rate = r.f64()?;
                let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
                let kind = match kind_code {
                    0 => OptimizerKind::Adam { beta1, beta2, eps },
                    1 => OptimizerKind::Sgd,
                    _ => return Err(CheckpointError::Corrupt("unknown optimizer")),
                };
                let step = r.u64()?;
                let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
                let mut opt = OptimizerState::new(kind, learning_rate, &shapes);
                opt.step = step;
                for m in opt.first_moment.iter_mut().chain(opt.second_moment.iter_mut()) {
                    for v in m.iter_mut() {
                        *v = r.f64()?;
                    }
                }
                Some(opt)
            }
            _ => return Err(CheckpointError::Corrupt("bad optimizer flag")),
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Trailing(bytes.len() - r.pos));
        }
        Ok(Checkpoint { model, seed, iteration, optimizer })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = ModelConfig::new(ObjectClass::Cyclist);
        cfg.mechanisms = vec![Mechanism::Rotation, Mechanism::Centering];
        cfg.point_widths = vec![4, 8];
        cfg.head_widths = vec![6];
        cfg.n_points = 20;
        let model = EpbrmModel::new(cfg, &mut rng).unwrap();
        let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        let mut opt = OptimizerState::new(OptimizerKind::ADAM, 5e-4, &shapes);
        opt.step = 7;
        opt.first_moment[0][1] = 0.1234567891234;
        opt.second_moment[3][0] = 1e-9;
        Checkpoint { model, seed: 99, iteration: 7, optimizer: Some(opt) }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        let bare = Checkpoint { optimizer: None, ..c };
        assert_eq!(Checkpoint::decode(&bare.encode()).unwrap(), bare);
    }

    #[test]
    fn rejects_damage() {
        let bytes = sample().encode();
        assert_eq!(Checkpoint::decode(b"nope"), Err(CheckpointError::BadMagic));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(Checkpoint::decode(&extra), Err(CheckpointError::Trailing(1)));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert_eq!(Checkpoint::decode(&v2), Err(CheckpointError::Version(2)));
        let mut bad_class = bytes;
        bad_class[12] = 9;
        assert!(matches!(Checkpoint::decode(&bad_class), Err(CheckpointError::Corrupt(_))));
    }
}
