//! Binary checkpoint container for a warping network, its reconstructor and
//! free-form run metadata.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      16 bytes  "WARPSPACE-CKPT\0\0"
//! version    u8
//! K, N, d    u64 × 3
//! flags      u8        bit0 bipolar, bit1/2/3 supports/weights/scales trainable
//! supports   f64 × K·N·d
//! weights    f64 × K·F          F = N/2 when bipolar, else N
//! log-scales f64 × K·F
//! tensors    u64 count, then per tensor:
//!              u64 name length, name bytes, u64 rank, u64 × rank dims, f64 data
//! metadata   u64 length, UTF-8 `key=value` lines
//! crc32      u32       over every preceding byte
//! ```

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::network::{Trainable, WarpingNetwork};
use crate::reconstructor::Reconstructor;
use std::path::Path;

pub const MAGIC: &[u8; 16] = b"WARPSPACE-CKPT\0\0";
pub const VERSION: u8 = 1;

const FLAG_BIPOLAR: u8 = 1;
const FLAG_SUPPORTS: u8 = 1 << 1;
const FLAG_WEIGHTS: u8 = 1 << 2;
const FLAG_SCALES: u8 = 1 << 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: WarpingNetwork,
    pub reconstructor: Reconstructor,
    /// Ordered `key=value` pairs; keys must not contain `=` or newlines.
    pub metadata: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn new(network: WarpingNetwork, reconstructor: Reconstructor) -> Self {
        Self {
            network,
            reconstructor,
            metadata: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.metadata.push((key.into(), value.to_string()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let net = &self.network;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        for v in [net.num_warpings(), net.supports_per_warping(), net.dim()] {
            put_u64(&mut out, v as u64);
        }
        let t = net.trainable();
        let flags = (net.is_bipolar() as u8 * FLAG_BIPOLAR)
            | (t.supports as u8 * FLAG_SUPPORTS)
            | (t.weights as u8 * FLAG_WEIGHTS)
            | (t.scales as u8 * FLAG_SCALES);
        out.push(flags);
        for tensor in [net.supports(), net.free_weights(), net.free_log_scales()] {
            put_f64s(&mut out, tensor.data());
        }

        let params = self.reconstructor.named_parameters();
        put_u64(&mut out, params.len() as u64);
        for (name, tensor) in params {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, tensor.shape().len() as u64);
            for &dim in tensor.shape() {
                put_u64(&mut out, dim as u64);
            }
            put_f64s(&mut out, tensor.data());
        }

        let mut text = String::new();
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("invalid metadata entry {k:?}")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        put_u64(&mut out, text.len() as u64);
        out.extend_from_slice(text.as_bytes());

        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint(
                "not a warpspace checkpoint (bad magic)".into(),
            ));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4-byte trailer"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }

        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let (k, n, d) = (r.usize()?, r.usize()?, r.usize()?);
        let flags = r.u8()?;
        let bipolar = flags & FLAG_BIPOLAR != 0;
        let free = if bipolar { n / 2 } else { n };
        let supports = r.f64s(k.checked_mul(n).and_then(|v| v.checked_mul(d)))?;
        let weights = r.f64s(k.checked_mul(free))?;
        let log_scales = r.f64s(k.checked_mul(free))?;
        let trainable = Trainable {
            supports: flags & FLAG_SUPPORTS != 0,
            weights: flags & FLAG_WEIGHTS != 0,
            scales: flags & FLAG_SCALES != 0,
        };
        let network = WarpingNetwork::from_free_parts(
            k, n, d, bipolar, supports, weights, log_scales, trainable,
        )
        .map_err(|e| Error::Checkpoint(format!("warping network: {e}")))?;

        let count = r.usize()?;
        let mut params = Vec::new();
        for _ in 0..count.min(1024) {
            let len = r.usize()?;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.usize()?;
            if rank > 8 {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has implausible rank {rank}"
                )));
            }
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &v| acc.checked_mul(v));
            let data = r.f64s(numel)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let reconstructor = Reconstructor::from_named(params)?;

        let len = r.usize()?;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let metadata = text
            .lines()
            .map(|line| {
                line.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Checkpoint(format!("malformed metadata line {line:?}")))
            })
            .collect::<Result<_>>()?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        if reconstructor.num_classes() != network.num_warpings() {
            return Err(Error::Checkpoint(format!(
                "reconstructor has {} classes for {} warpings",
                reconstructor.num_classes(),
                network.num_warpings()
            )));
        }
        Ok(Self {
            network,
            reconstructor,
            metadata,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("size {v} out of range")))
    }

    fn f64s(&mut self, n: Option<usize>) -> Result<Vec<f64>> {
        let bytes = n
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
