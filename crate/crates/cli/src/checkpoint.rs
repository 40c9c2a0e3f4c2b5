//! Binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! | field | encoding |
//! |---|---|
//! | magic | `SWRCKPT\0` |
//! | version | u32 |
//! | architecture descriptor | u32 length + UTF-8 |
//! | run seed, next epoch | u64, u64 |
//! | layer count | u32 |
//! | per layer | flag byte, then weight, bias (f32 tensors), n_init (f64), running mean and variance (f32) for the flags set |
//! | optimizer | tag byte: 0 none, 1 Adam (lr, betas, eps, step, moments as f64 tensors), 2 SGD (lr) |
//!
//! A tensor is a u32 rank, u64 dimensions and the elements. The run seed and
//! next epoch are the whole random state: batch orders and re-initializations
//! derive from them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use swr_core::nn::{Architecture, LayerParams, Network};
use swr_core::optim::{Adam, Optimizer, Sgd};
use swr_core::tensor::ops::RunningStats;
use swr_core::tensor::Tensor;
use swr_core::Scalar;

use crate::error::{CliError, Result};

pub const MAGIC: [u8; 8] = *b"SWRCKPT\0";
pub const VERSION: u32 = 1;

const HAS_WEIGHT: u8 = 1;
const HAS_BIAS: u8 = 2;
const HAS_INIT_NORM: u8 = 4;
const HAS_RUNNING: u8 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub net: Network<T>,
    pub optimizer: Option<Optimizer<T>>,
    pub seed: u64,
    /// First epoch a resumed run trains.
    pub next_epoch: usize,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
        self.write(&mut w).map_err(|e| io_err(path, e))?;
        w.flush().map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
        Self::read(&mut r).map_err(|e| match e {
            CliError::Other(m) => CliError::Other(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let desc = self.net.architecture().to_string();
        w.write_all(&(desc.len() as u32).to_le_bytes())?;
        w.write_all(desc.as_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.next_epoch as u64).to_le_bytes())?;
        let parts = self.net.to_parts();
        w.write_all(&(parts.len() as u32).to_le_bytes())?;
        for p in &parts {
            let flags = [
                (p.weight.is_some(), HAS_WEIGHT),
                (p.bias.is_some(), HAS_BIAS),
                (p.init_norm.is_some(), HAS_INIT_NORM),
                (p.running.is_some(), HAS_RUNNING),
            ]
            .iter()
            .filter(|(set, _)| *set)
            .fold(0u8, |acc, (_, bit)| acc | bit);
            w.write_all(&[flags])?;
            if let Some(t) = &p.weight {
                write_tensor_f32(w, t)?;
            }
            if let Some(t) = &p.bias {
                write_tensor_f32(w, t)?;
            }
            if let Some(n) = p.init_norm {
                w.write_all(&n.as_f64().to_le_bytes())?;
            }
            if let Some(rs) = &p.running {
                w.write_all(&(rs.mean.len() as u32).to_le_bytes())?;
                for v in rs.mean.iter().chain(&rs.var) {
                    w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                }
            }
        }
        match &self.optimizer {
            None => w.write_all(&[0]),
            Some(Optimizer::Adam(a)) => {
                w.write_all(&[1])?;
                for v in [a.lr, a.beta1, a.beta2, a.eps] {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&a.step_count().to_le_bytes())?;
                w.write_all(&(a.first_moments().len() as u32).to_le_bytes())?;
                for t in a.first_moments().iter().chain(a.second_moments()) {
                    write_tensor_f64(w, t)?;
                }
                Ok(())
            }
            Some(Optimizer::Sgd(s)) => {
                w.write_all(&[2])?;
                w.write_all(&s.lr.to_le_bytes())
            }
        }
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if magic != MAGIC {
            return Err(CliError::Other("not a checkpoint file".into()));
        }
        let version = u32_le(r)?;
        if version != VERSION {
            return Err(CliError::Other(format!(
                "checkpoint format version {version} is not supported (expected {VERSION})"
            )));
        }
        let len = u32_le(r)? as usize;
        let mut desc = vec![0u8; len];
        r.read_exact(&mut desc).map_err(truncated)?;
        let desc = String::from_utf8(desc).map_err(|_| CliError::Other("descriptor is not UTF-8".into()))?;
        let arch: Architecture = desc.parse()?;
        let seed = u64_le(r)?;
        let next_epoch = u64_le(r)? as usize;

        let layers = u32_le(r)? as usize;
        let mut parts = Vec::with_capacity(layers.min(1024));
        for _ in 0..layers {
            let mut flags = [0u8];
            r.read_exact(&mut flags).map_err(truncated)?;
            let flags = flags[0];
            let weight = (flags & HAS_WEIGHT != 0).then(|| read_tensor(r, false)).transpose()?;
            let bias = (flags & HAS_BIAS != 0).then(|| read_tensor(r, false)).transpose()?;
            let init_norm = (flags & HAS_INIT_NORM != 0)
                .then(|| f64_le(r).map(T::lit))
                .transpose()?;
            let running = if flags & HAS_RUNNING != 0 {
                let c = u32_le(r)? as usize;
                let mean = (0..c).map(|_| f32_le(r).map(|v| T::lit(v as f64))).collect::<Result<_>>()?;
                let var = (0..c).map(|_| f32_le(r).map(|v| T::lit(v as f64))).collect::<Result<_>>()?;
                Some(RunningStats { mean, var })
            } else {
                None
            };
            parts.push(LayerParams {
                weight,
                bias,
                init_norm,
                running,
            });
        }
        let net = Network::from_parts(&arch, parts)?;

        let mut tag = [0u8];
        r.read_exact(&mut tag).map_err(truncated)?;
        let optimizer = match tag[0] {
            0 => None,
            1 => {
                let lr = f64_le(r)?;
                let (beta1, beta2, eps) = (f64_le(r)?, f64_le(r)?, f64_le(r)?);
                let step = u64_le(r)?;
                let n = u32_le(r)? as usize;
                let m = (0..n).map(|_| read_tensor(r, true)).collect::<Result<Vec<_>>>()?;
                let v = (0..n).map(|_| read_tensor(r, true)).collect::<Result<Vec<_>>>()?;
                let mut adam = Adam::from_state(lr, step, m, v)?;
                adam.beta1 = beta1;
                adam.beta2 = beta2;
                adam.eps = eps;
                Some(Optimizer::Adam(adam))
            }
            2 => Some(Optimizer::Sgd(Sgd { lr: f64_le(r)? })),
            t => return Err(CliError::Other(format!("unknown optimizer tag {t}"))),
        };
        let mut rest = [0u8];
        if r.read(&mut rest)? != 0 {
            return Err(CliError::Other("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            net,
            optimizer,
            seed,
            next_epoch,
        })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

fn truncated(e: std::io::Error) -> CliError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CliError::Other("checkpoint is truncated".into())
    } else {
        CliError::Other(e.to_string())
    }
}

fn write_shape(w: &mut impl Write, shape: &[usize]) -> std::io::Result<()> {
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn write_tensor_f32<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    write_shape(w, t.shape())?;
    for v in t.data() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

fn write_tensor_f64<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> std::io::Result<()> {
    write_shape(w, t.shape())?;
    for v in t.data() {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<T: Scalar>(r: &mut impl Read, wide: bool) -> Result<Tensor<T>> {
    let rank = u32_le(r)? as usize;
    if rank > 8 {
        return Err(CliError::Other(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank).map(|_| u64_le(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| CliError::Other(format!("implausible tensor shape {shape:?}")))?;
    let data = (0..len)
        .map(|_| if wide { f64_le(r) } else { f32_le(r).map(f64::from) }.map(T::lit))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_vec(&shape, data)?)
}

fn u32_le(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn u64_le(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn f32_le(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f32::from_le_bytes(b))
}

fn f64_le(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        let arch: Architecture = "seq:1x6x6|conv-nb(2,3)|bn|relu|flatten|dense(3)".parse().unwrap();
        Checkpoint {
            net: Network::build(&arch, 3).unwrap(),
            optimizer: Some(Optimizer::Sgd(Sgd { lr: 0.5 })),
            seed: 3,
            next_epoch: 7,
        }
    }

    fn bytes(c: &Checkpoint<f64>) -> Vec<u8> {
        let mut out = Vec::new();
        c.write(&mut out).unwrap();
        out
    }

    #[test]
    fn round_trip_keeps_everything_representable_in_f32() {
        let c = sample();
        let back = Checkpoint::<f64>::read(&mut bytes(&c).as_slice()).unwrap();
        assert_eq!(back.seed, 3);
        assert_eq!(back.next_epoch, 7);
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.net.architecture(), c.net.architecture());
        assert_eq!(back.net.weight_norms()[0].init, c.net.weight_norms()[0].init);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut b = bytes(&sample());
        b[8] = 9;
        let e = Checkpoint::<f64>::read(&mut b.as_slice()).unwrap_err();
        assert!(e.to_string().contains("version 9"), "{e}");
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let b = bytes(&sample());
        assert!(Checkpoint::<f64>::read(&mut &b[..b.len() - 3]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Checkpoint::<f64>::read(&mut extra.as_slice()).is_err());
        assert!(Checkpoint::<f64>::read(&mut &b"NOTACKPT"[..]).is_err());
    }
}
