//! `LORC` checkpoint encoding.
//!
//! Layout (little-endian): magic, `u32` version, `u64`-length-prefixed config
//! TOML, `u64` epoch, `u64` step, `u32` tensor count, query tensors, key
//! tensors, `u64` queue head, `u64` queue fill, queue tensor, `u32` velocity
//! count, velocity tensors, `u64` RNG seed, `u64` RNG epoch counter. A tensor
//! is `u32` rank, `u64` dims, then `f64` data.

use std::io::{Read, Write};
use std::path::Path;

use super::{TrainConfig, TrainState};
use crate::data::{read_u32, read_u64};
use crate::encoder::{EncoderPair, EncoderParams};
use crate::error::{Error, Result};
use crate::queue::NegativeQueue;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LORC";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: u32 = 8;
const MAX_CONFIG_BYTES: usize = 1 << 20;
const MAX_TENSOR_LEN: usize = 1 << 30;

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for &x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("tensor rank {rank} out of range")));
    }
    let shape = (0..rank)
        .map(|_| read_u64(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_TENSOR_LEN)
        .ok_or_else(|| Error::Format(format!("tensor shape {shape:?} too large")))?;
    let mut raw = vec![0u8; len * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(shape, data)
}

fn read_tensors(r: &mut impl Read, count: usize) -> Result<Vec<Tensor>> {
    (0..count).map(|_| read_tensor(r)).collect()
}

impl TrainState {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let cfg = self.config.to_toml();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        let q = self.pair.query.tensors();
        w.write_all(&(q.len() as u32).to_le_bytes())?;
        for t in q.into_iter().chain(self.pair.key.tensors()) {
            write_tensor(&mut w, t)?;
        }
        w.write_all(&(self.queue.head() as u64).to_le_bytes())?;
        w.write_all(&(self.queue.filled() as u64).to_le_bytes())?;
        write_tensor(&mut w, self.queue.store())?;
        w.write_all(&(self.velocity.len() as u32).to_le_bytes())?;
        for t in &self.velocity {
            write_tensor(&mut w, t)?;
        }
        // Views and shuffles come from counter-based streams, so the RNG
        // state is the seed plus the epoch counter.
        w.write_all(&self.config.seed.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u64(&mut r)? as usize;
        if len > MAX_CONFIG_BYTES {
            return Err(Error::Format(format!("config section of {len} bytes")));
        }
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|_| Error::Format("config text is not UTF-8".into()))?;
        let config = TrainConfig::from_toml(&text)?;
        let epoch = read_u64(&mut r)?;
        let step = read_u64(&mut r)?;

        let count = read_u32(&mut r)? as usize;
        let query = EncoderParams::from_tensors(read_tensors(&mut r, count)?)?;
        let key = EncoderParams::from_tensors(read_tensors(&mut r, count)?)?;
        let widths: Vec<usize> = query.layers.iter().map(|l| l.weight.cols()).collect();
        if widths != config.encoder.hidden || query.d_out() != config.encoder.d_out {
            return Err(Error::Format("encoder tensors do not match the stored config".into()));
        }
        let pair = EncoderPair::from_parts(query, key, config.optim.momentum_encoder)?;

        let head = read_u64(&mut r)? as usize;
        let filled = read_u64(&mut r)? as usize;
        let store = read_tensor(&mut r)?;
        if store.shape() != [config.queue_size, config.encoder.d_out] {
            return Err(Error::Format(format!("queue of shape {:?} does not match the config", store.shape())));
        }
        let queue = NegativeQueue::from_parts(store, head, filled)?;

        let count = read_u32(&mut r)? as usize;
        let velocity = read_tensors(&mut r, count)?;
        let shapes_match = velocity.len() == pair.query.tensors().len()
            && velocity.iter().zip(pair.query.tensors()).all(|(v, p)| v.shape() == p.shape());
        if !shapes_match {
            return Err(Error::Format("optimizer state does not match the encoder".into()));
        }

        let seed = read_u64(&mut r)?;
        let rng_epoch = read_u64(&mut r)?;
        if seed != config.seed || rng_epoch != epoch {
            return Err(Error::Format("RNG state disagrees with the config".into()));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
        }
        Ok(Self {
            config,
            pair,
            queue,
            velocity,
            epoch,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;
    use crate::trainer::{train, EncoderSection, Recorder};

    fn trained() -> TrainState {
        let cfg = TrainConfig {
            epochs: 1,
            views: 3,
            batch_size: 4,
            queue_size: 8,
            encoder: EncoderSection {
                hidden: vec![5, 6],
                d_out: 3,
            },
            ..TrainConfig::default()
        };
        let ds = gen_synthetic(2, 4, 4, 0.1, 1).unwrap();
        train(&cfg, ds.samples(), &mut Recorder::default()).unwrap()
    }

    #[test]
    fn save_load_save_is_identical() {
        let st = trained();
        let bytes = st.to_bytes();
        let back = TrainState::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, st);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_input_rejected() {
        let bytes = trained().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TrainState::read_from(bad.as_slice()), Err(Error::Format(_))));
        assert!(TrainState::read_from(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(TrainState::read_from(long.as_slice()), Err(Error::Format(_))));
    }
}
