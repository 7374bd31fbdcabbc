//! `PCCK` checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      4 bytes  "PCCK"
//! version    u32      = 1
//! kind       u8       0 = full training state, 1 = online encoder only
//! precision  u8       0 = f32, 1 = f64
//! hash       str      hex SHA-256 of the canonical run config
//! config     str      canonical run config JSON
//! step       u64
//! epoch      u64
//! lr         f64
//! groups     u32 count, then per group:
//!              name str, update rule u8 (0 backprop, 1 ema, 2 frozen),
//!              u32 count + arrays (parameters), u32 count + arrays (buffers)
//! state      u8 flag; when 1:
//!              adam step u64, then for every parameter array in group order
//!              its first-moment array and second-moment array,
//!              rng seed 32 bytes, rng stream u64, rng word position u128,
//!              u32 count + u32 indices (epoch order)
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8 bytes. An array is
//! `name str, dtype u8 (0 f32, 1 f64), rank u32, rank × u32 dims, data`.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamGroup, ParamTensor, Precision, Real, UpdateRule};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ENCODER_ONLINE, GROUP_NAMES};
use crate::train::{AdamState, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Full,
    EncoderOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub config_json: String,
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub groups: Vec<ParamGroup<T>>,
    /// Present for full checkpoints only.
    pub state: Option<TrainState<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn full(params: &ModelParams<T>, state: &TrainState<T>, config_hash: &str, config_json: &str) -> Self {
        Checkpoint {
            kind: CheckpointKind::Full,
            config_hash: config_hash.into(),
            config_json: config_json.into(),
            step: state.step,
            epoch: state.epoch,
            lr: state.lr,
            groups: params.groups.clone(),
            state: Some(state.clone()),
        }
    }

    /// Only the online encoder; everything else is discarded.
    pub fn encoder_only(&self) -> Self {
        let groups = self
            .groups
            .iter()
            .filter(|g| g.name == GROUP_NAMES[ENCODER_ONLINE])
            .cloned()
            .collect();
        Checkpoint {
            kind: CheckpointKind::EncoderOnly,
            groups,
            state: None,
            ..self.clone()
        }
    }

    pub fn encoder(&self) -> Result<&ParamGroup<T>> {
        self.groups
            .iter()
            .find(|g| g.name == GROUP_NAMES[ENCODER_ONLINE])
            .ok_or_else(|| Error::InvalidInput("checkpoint has no encoder_online group".into()))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u8(match self.kind {
            CheckpointKind::Full => 0,
            CheckpointKind::EncoderOnly => 1,
        });
        w.u8(T::PRECISION.tag());
        w.str(&self.config_hash);
        w.str(&self.config_json);
        w.u64(self.step);
        w.u64(self.epoch);
        w.f64(self.lr);
        w.u32(self.groups.len() as u32);
        for g in &self.groups {
            w.str(&g.name);
            w.u8(g.update_rule.tag());
            w.u32(g.tensors.len() as u32);
            for t in &g.tensors {
                w.array(&t.name, &t.shape, &t.value);
            }
            w.u32(g.buffers.len() as u32);
            for t in &g.buffers {
                w.array(&t.name, &t.shape, &t.value);
            }
        }
        match &self.state {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.u64(s.adam.t);
                for (gi, g) in self.groups.iter().enumerate() {
                    for (ti, t) in g.tensors.iter().enumerate() {
                        w.array(&format!("{}/{}.m", g.name, t.name), &t.shape, &s.adam.m[gi][ti]);
                        w.array(&format!("{}/{}.v", g.name, t.name), &t.shape, &s.adam.v[gi][ti]);
                    }
                }
                w.0.extend_from_slice(&s.rng.get_seed());
                w.u64(s.rng.get_stream());
                w.0.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());
                w.u32(s.order.len() as u32);
                for &i in &s.order {
                    w.u32(i as u32);
                }
            }
        }
        w.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a PCCK checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = match r.u8()? {
            0 => CheckpointKind::Full,
            1 => CheckpointKind::EncoderOnly,
            k => return Err(Error::Format(format!("unknown checkpoint kind {k}"))),
        };
        let precision = Precision::from_tag(r.u8()?).ok_or_else(|| Error::Format("unknown precision tag".into()))?;
        if precision != T::PRECISION {
            return Err(Error::Format(format!(
                "checkpoint stores {precision:?} values, reader expects {:?}",
                T::PRECISION
            )));
        }
        let config_hash = r.str()?;
        let config_json = r.str()?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let lr = r.f64()?;
        let n_groups = r.u32()? as usize;
        let mut groups = Vec::with_capacity(n_groups.min(64));
        for _ in 0..n_groups {
            let name = r.str()?;
            let rule = UpdateRule::from_tag(r.u8()?).ok_or_else(|| Error::Format("unknown update rule".into()))?;
            let mut g = ParamGroup::new(name, rule);
            for _ in 0..r.u32()? {
                g.tensors.push(r.array()?);
            }
            for _ in 0..r.u32()? {
                g.buffers.push(r.array()?);
            }
            groups.push(g);
        }
        let state = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let mut m = Vec::with_capacity(groups.len());
                let mut v = Vec::with_capacity(groups.len());
                for g in &groups {
                    let (mut gm, mut gv) = (Vec::new(), Vec::new());
                    for tensor in &g.tensors {
                        for out in [&mut gm, &mut gv] {
                            let a = r.array::<T>()?;
                            if a.shape != tensor.shape {
                                return Err(Error::Format(format!(
                                    "optimizer moment {} has the wrong shape",
                                    a.name
                                )));
                            }
                            out.push(a.value);
                        }
                    }
                    m.push(gm);
                    v.push(gv);
                }
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
                rng.set_stream(stream);
                rng.set_word_pos(word_pos);
                let n = r.u32()? as usize;
                let order = (0..n)
                    .map(|_| r.u32().map(|i| i as usize))
                    .collect::<Result<Vec<_>>>()?;
                Some(TrainState {
                    step,
                    epoch,
                    lr,
                    adam: AdamState { t, m, v },
                    rng,
                    order,
                })
            }
            f => return Err(Error::Format(format!("bad state flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if (kind == CheckpointKind::Full) != state.is_some() {
            return Err(Error::Format("checkpoint kind does not match its contents".into()));
        }
        Ok(Checkpoint {
            kind,
            config_hash,
            config_json,
            step,
            epoch,
            lr,
            groups,
            state,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Precision tag of a checkpoint file without decoding it.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a PCCK checkpoint".into()));
    }
    Precision::from_tag(bytes[9]).ok_or_else(|| Error::Format("unknown precision tag".into()))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn array<T: Real>(&mut self, name: &str, shape: &[usize], data: &[T]) {
        self.str(name);
        self.u8(T::PRECISION.tag());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u32(d as u32);
        }
        for &v in data {
            match T::PRECISION {
                Precision::F32 => self.0.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                Precision::F64 => self.0.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format("checkpoint is truncated".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
    fn array<T: Real>(&mut self) -> Result<ParamTensor<T>> {
        let name = self.str()?;
        let dtype = Precision::from_tag(self.u8()?).ok_or_else(|| Error::Format("unknown dtype tag".into()))?;
        if dtype != T::PRECISION {
            return Err(Error::Format(format!("array {name} has dtype {dtype:?}")));
        }
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format(format!("array {name} is too large")))?;
        let raw = self.take(
            n.checked_mul(dtype.byte_width())
                .ok_or_else(|| Error::Format("array too large".into()))?,
        )?;
        let value = match dtype {
            Precision::F32 => raw
                .chunks_exact(4)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect(),
            Precision::F64 => raw
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
        };
        Ok(ParamTensor::new(name, &shape, value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    fn sample<T: Real>() -> Checkpoint<T> {
        let cfg = ModelConfig {
            dim: 8,
            encoder_hidden: [4, 8],
            heads: 2,
            ..ModelConfig::default()
        };
        let params = ModelParams::<T>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut state = TrainState::new(&params, &crate::train::TrainConfig::default());
        state.step = 7;
        state.order = vec![2, 0, 1];
        rand::RngCore::next_u32(&mut state.rng);
        Checkpoint::full(&params, &state, "abc", "{}")
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = sample::<f32>();
        let bytes = a.encode();
        let b = Checkpoint::<f32>::decode(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.encode(), bytes);
        let c = sample::<f64>();
        assert_eq!(Checkpoint::<f64>::decode(&c.encode()).unwrap().encode(), c.encode());
    }

    #[test]
    fn encoder_export_keeps_one_group() {
        let e = sample::<f32>().encoder_only();
        let d = Checkpoint::<f32>::decode(&e.encode()).unwrap();
        assert_eq!(d.groups.len(), 1);
        assert_eq!(d.groups[0].name, "encoder_online");
        assert!(d.state.is_none());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample::<f32>().encode();
        assert!(Checkpoint::<f32>::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::<f64>::decode(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::<f32>::decode(&bad).is_err());
        assert_eq!(peek_precision(&bytes).unwrap(), Precision::F32);
    }
}
