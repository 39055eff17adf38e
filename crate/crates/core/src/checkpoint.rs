//! Binary checkpoints of a training run.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic      8 bytes   "MTDA" followed by the 4-digit ASCII version
//! count      u32       number of tensors
//! tensors    count x { name_len u16, name, rank u8, dims u32 x rank, f32 x numel }
//! epoch      u32
//! step       u64
//! adam_t     u64
//! ema_alpha  f64
//! config     u32 length, UTF-8 text in the config file format
//! ```
//!
//! Tensor names carry a group prefix: `student/`, `teacher/`, `adam_m/` or
//! `adam_v/`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::teacher::TrainState;
use crate::tensor::Tensor;
use crate::unet::ModelParams;

pub const MAGIC_PREFIX: &[u8; 4] = b"MTDA";
pub const FORMAT_VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["student", "teacher", "adam_m", "adam_v"];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub epoch: u32,
    pub global_step: u64,
    pub ema_alpha: f64,
    pub student: ModelParams<f32>,
    pub teacher: ModelParams<f32>,
    pub adam_m: ModelParams<f32>,
    pub adam_v: ModelParams<f32>,
    pub adam_t: u64,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState<f32>, config: &ExperimentConfig) -> Self {
        Self {
            config: config.clone(),
            epoch: state.epoch,
            global_step: state.global_step,
            ema_alpha: state.ema_alpha,
            student: state.student.clone(),
            teacher: state.teacher.clone(),
            adam_m: state.adam.m.clone(),
            adam_v: state.adam.v.clone(),
            adam_t: state.adam.t,
        }
    }

    /// Rebuilds the training state so a run can resume.
    pub fn into_state(self) -> Result<TrainState<f32>> {
        self.student.check_same_layout(&self.teacher)?;
        self.student.check_same_layout(&self.adam_m)?;
        self.student.check_same_layout(&self.adam_v)?;
        let cfg = self.config.train_config();
        Ok(TrainState {
            student: self.student,
            teacher: self.teacher,
            adam: AdamState {
                config: cfg.adam,
                m: self.adam_m,
                v: self.adam_v,
                t: self.adam_t,
            },
            epoch: self.epoch,
            global_step: self.global_step,
            ema_alpha: self.ema_alpha,
            ema_alpha_late: cfg.ema_alpha_late,
            consistency_kind: cfg.consistency,
            gamma_max: cfg.schedule.gamma_max,
        })
    }

    fn groups(&self) -> [&ModelParams<f32>; 4] {
        [&self.student, &self.teacher, &self.adam_m, &self.adam_v]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC_PREFIX);
        out.extend_from_slice(format!("{FORMAT_VERSION:04}").as_bytes());
        let count: usize = self.groups().iter().map(|g| g.len()).sum();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (group, params) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in params.iter() {
                let full = format!("{group}/{name}");
                let len = u16::try_from(full.len())
                    .map_err(|_| Error::CheckpointLayout(format!("tensor name too long: {full}")))?;
                let rank = u8::try_from(t.shape().len())
                    .map_err(|_| Error::CheckpointLayout(format!("rank too large for {full}")))?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(full.as_bytes());
                out.push(rank);
                for &d in t.shape() {
                    let d = u32::try_from(d).map_err(|_| Error::CheckpointLayout(format!("dimension too large in {full}")))?;
                    out.extend_from_slice(&d.to_le_bytes());
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.global_step.to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        out.extend_from_slice(&self.ema_alpha.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        let magic: [u8; 8] = r.take(8, "magic")?.try_into().unwrap();
        if &magic[..4] != MAGIC_PREFIX {
            return Err(Error::BadMagic(magic));
        }
        let version = std::str::from_utf8(&magic[4..])
            .ok()
            .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse::<u32>().ok())
            .ok_or(Error::BadMagic(magic))?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch(version));
        }

        let count = r.u32("tensor count")? as usize;
        let mut maps: [BTreeMap<String, Tensor<f32>>; 4] = Default::default();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let full = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::CheckpointLayout("tensor name is not UTF-8".into()))?;
            let (group, name) = full
                .split_once('/')
                .ok_or_else(|| Error::CheckpointLayout(format!("tensor name {full:?} lacks a group")))?;
            let gi = GROUPS
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| Error::CheckpointLayout(format!("unknown tensor group {group:?}")))?;
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimensions")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::CheckpointLayout(format!("tensor {full:?} is too large")))?
                / 4;
            let raw = r.take(numel * 4, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if maps[gi].insert(name.to_string(), Tensor::new(&shape, data)?).is_some() {
                return Err(Error::CheckpointLayout(format!("duplicate tensor {full:?}")));
            }
        }
        let epoch = r.u32("epoch")?;
        let global_step = r.u64("global step")?;
        let adam_t = r.u64("adam step")?;
        let ema_alpha = f64::from_le_bytes(r.take(8, "ema alpha")?.try_into().unwrap());
        let text_len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(text_len, "config text")?)
            .map_err(|_| Error::CheckpointLayout("config text is not UTF-8".into()))?;
        if !r.buf.is_empty() {
            return Err(Error::CheckpointLayout(format!("{} trailing bytes", r.buf.len())));
        }
        let config = ExperimentConfig::parse(text)?;
        let [student, teacher, adam_m, adam_v] = maps.map(ModelParams::from_map);
        student.check_same_layout(&teacher)?;
        student.check_same_layout(&adam_m)?;
        student.check_same_layout(&adam_v)?;
        Ok(Self {
            config,
            epoch,
            global_step,
            ema_alpha,
            student,
            teacher,
            adam_m,
            adam_v,
            adam_t,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{UNet, UNetConfig};

    fn sample() -> Checkpoint {
        let mut config = ExperimentConfig::desk();
        config.model = UNetConfig {
            depth: 1,
            base_channels: 4,
            groups: 2,
            dropout_rate: 0.5,
        };
        let net = UNet::new(config.model).unwrap();
        let mut state = TrainState::<f32>::new(&net, &config.train_config()).unwrap();
        for (_, t) in state.teacher.iter_mut() {
            for v in t.data_mut() {
                *v = -*v * 0.5 + 1e-3;
            }
        }
        for (i, (_, t)) in state.adam.v.iter_mut().enumerate() {
            t.data_mut().fill(i as f32 * 0.25);
        }
        state.epoch = 3;
        state.global_step = 123;
        state.adam.t = 123;
        state.ema_alpha = 0.99;
        Checkpoint::from_state(&state, &config)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip_and_state_restore() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("final.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let state = back.clone().into_state().unwrap();
        assert_eq!(state.global_step, 123);
        assert_eq!(Checkpoint::from_state(&state, &back.config), ck);
    }

    #[test]
    fn rejects_bad_headers() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::BadMagic(_))));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4..8].copy_from_slice(b"0002");
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::VersionMismatch(2))));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Truncated(_))), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::CheckpointLayout(_))));
    }
}
