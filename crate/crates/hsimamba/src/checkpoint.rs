//! Versioned binary checkpoint ("HSCK" v1).
//!
//! Stores everything a resumed run needs to continue bit-exactly: the
//! flat parameter list, Adam moments and step counter, the cluster state
//! including the assignment map, and the epoch counter. The payload is
//! protected by an FNV-1a 64 checksum.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use hsimamba_core::cluster::ClusterState;
use hsimamba_core::tensor::Tensor;
use hsimamba_core::train::Trainer;
use thiserror::Error;

use crate::container::write_atomic;

pub const MAGIC: &[u8; 4] = b"HSCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic: expected \"HSCK\"")]
    BadMagic,
    #[error("checkpoint version {found} not supported (this build reads version {VERSION})")]
    VersionMismatch { found: u16 },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint does not fit this model: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Deserialized checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: u64,
    pub params: Vec<Tensor>,
    pub adam_t: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub cluster: ClusterState,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        let mut b = [0u8; 2];
        LittleEndian::write_u16(&mut b, v);
        self.0.extend_from_slice(&b);
    }
    fn u32(&mut self, v: u32) {
        let mut b = [0u8; 4];
        LittleEndian::write_u32(&mut b, v);
        self.0.extend_from_slice(&b);
    }
    fn u64(&mut self, v: u64) {
        let mut b = [0u8; 8];
        LittleEndian::write_u64(&mut b, v);
        self.0.extend_from_slice(&b);
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Truncated { offset: self.at });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(LittleEndian::read_u16(self.take(2)?))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

pub fn encode(trainer: &Trainer) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);

    w.u64(trainer.epoch as u64);

    let tensors = trainer.params.tensors();
    w.u32(tensors.len() as u32);
    for t in &tensors {
        w.u8(t.ndim() as u8);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.f64s(t.data());
    }

    w.u64(trainer.adam.t);
    w.u8(if trainer.adam.m.is_empty() { 0 } else { 1 });
    if !trainer.adam.m.is_empty() {
        for (m, v) in trainer.adam.m.iter().zip(&trainer.adam.v) {
            w.f64s(m);
            w.f64s(v);
        }
    }

    let cluster = &trainer.cluster;
    let k = cluster.num_centers();
    let d = cluster.feature_dim();
    w.u32(k as u32);
    w.u32(d as u32);
    w.u32(cluster.clusters_per_class as u32);
    w.f64(cluster.momentum);
    for &flag in &cluster.initialized {
        w.u8(flag as u8);
    }
    w.f64s(cluster.centers.data());
    w.u64(cluster.assignments.len() as u64);
    for &a in &cluster.assignments {
        w.u32(a as u32);
    }

    let checksum = fnv1a64(&w.0);
    w.u64(checksum);
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < 14 {
        return Err(CheckpointError::Truncated { offset: bytes.len() });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = LittleEndian::read_u64(tail);
    let computed = fnv1a64(payload);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { bytes: payload, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }

    let epoch = r.u64()?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f64s(numel)?;
        params.push(Tensor::new(shape, data).expect("consistent tensor"));
    }

    let adam_t = r.u64()?;
    let has_moments = r.u8()? != 0;
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    if has_moments {
        for t in &params {
            adam_m.push(r.f64s(t.numel())?);
            adam_v.push(r.f64s(t.numel())?);
        }
    }

    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let cpc = r.u32()? as usize;
    let momentum = r.f64()?;
    let mut initialized = Vec::with_capacity(k);
    for _ in 0..k {
        initialized.push(r.u8()? != 0);
    }
    let centers = Tensor::new(vec![k, d], r.f64s(k * d)?).expect("center shape");
    let n_assign = r.u64()? as usize;
    let mut assignments = Vec::with_capacity(n_assign);
    for _ in 0..n_assign {
        assignments.push(r.u32()? as usize);
    }
    if r.at != payload.len() {
        return Err(CheckpointError::Truncated { offset: r.at });
    }

    Ok(Checkpoint {
        epoch,
        params,
        adam_t,
        adam_m,
        adam_v,
        cluster: ClusterState {
            centers,
            initialized,
            momentum,
            clusters_per_class: cpc,
            assignments,
        },
    })
}

pub fn save(path: &Path, trainer: &Trainer) -> Result<(), CheckpointError> {
    write_atomic(path, &encode(trainer))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&fs::read(path)?)
}

/// Restores a freshly constructed trainer to the checkpointed state.
pub fn apply(trainer: &mut Trainer, ckpt: Checkpoint) -> Result<(), CheckpointError> {
    trainer
        .params
        .assign_tensors(&ckpt.params)
        .map_err(|e| CheckpointError::Incompatible(e.to_string()))?;
    if ckpt.cluster.num_centers() != trainer.cluster.num_centers()
        || ckpt.cluster.feature_dim() != trainer.cluster.feature_dim()
    {
        return Err(CheckpointError::Incompatible(format!(
            "cluster state is {}×{}, model expects {}×{}",
            ckpt.cluster.num_centers(),
            ckpt.cluster.feature_dim(),
            trainer.cluster.num_centers(),
            trainer.cluster.feature_dim()
        )));
    }
    trainer.adam.t = ckpt.adam_t;
    trainer.adam.m = ckpt.adam_m;
    trainer.adam.v = ckpt.adam_v;
    trainer.cluster = ckpt.cluster;
    trainer.epoch = ckpt.epoch as usize;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use hsimamba_core::data::{generate_synthetic, SynthSpec};
    use hsimamba_core::train::TrainConfig;

    fn tiny_trainer() -> Trainer {
        let spec = SynthSpec {
            height: 6,
            width: 6,
            bands: 4,
            classes: 2,
            noise_sigma: 0.1,
            gain_jitter: 0.1,
            seed: 5,
        };
        let (mut cube, labels, _) = generate_synthetic(&spec);
        cube.normalize_bands();
        let cfg = TrainConfig {
            hidden: 6,
            state_dim: 2,
            attn_dim: 3,
            spectral_group: 2,
            clusters_per_class: 1,
            epochs: 3,
            ..TrainConfig::default()
        };
        Trainer::new(&cube, &labels, 2, cfg).unwrap()
    }

    #[test]
    fn round_trip_preserves_all_state() {
        let mut trainer = tiny_trainer();
        trainer.step().unwrap();
        trainer.step().unwrap();
        let bytes = encode(&trainer);
        let ckpt = decode(&bytes).unwrap();
        assert_eq!(ckpt.epoch, 2);
        assert_eq!(ckpt.adam_t, trainer.adam.t);
        assert_eq!(ckpt.cluster, trainer.cluster);
        for (a, b) in ckpt.params.iter().zip(trainer.params.tensors()) {
            assert_eq!(&a, &b);
        }
    }

    #[test]
    fn resume_continues_bit_exactly() {
        // save after one step, resume, take a step; must equal the
        // uninterrupted two-step run bit for bit
        let mut solo = tiny_trainer();
        solo.step().unwrap();
        solo.step().unwrap();

        let mut first = tiny_trainer();
        first.step().unwrap();
        let bytes = encode(&first);

        let mut resumed = tiny_trainer();
        apply(&mut resumed, decode(&bytes).unwrap()).unwrap();
        resumed.step().unwrap();

        assert_eq!(resumed.epoch, solo.epoch);
        assert_eq!(resumed.cluster, solo.cluster);
        for (a, b) in resumed.params.tensors().iter().zip(solo.params.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let trainer = tiny_trainer();
        let mut bytes = encode(&trainer);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn version_mismatch_names_versions() {
        let trainer = tiny_trainer();
        let mut bytes = encode(&trainer);
        bytes[4] = 3;
        // fix the checksum so the version check itself is exercised
        let len = bytes.len();
        let sum = fnv1a64(&bytes[..len - 8]);
        LittleEndian::write_u64(&mut bytes[len - 8..], sum);
        match decode(&bytes) {
            Err(CheckpointError::VersionMismatch { found: 3 }) => {}
            other => panic!("expected version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn cluster_centers_survive_round_trip_exactly() {
        let mut trainer = tiny_trainer();
        trainer.step().unwrap();
        let ckpt = decode(&encode(&trainer)).unwrap();
        assert_eq!(ckpt.cluster.centers.data(), trainer.cluster.centers.data());
    }
}
