//! Binary checkpoint container and the network bundle stored in it.
//!
//! Layout (little endian): magic, `u32` version, `u32` config length, config
//! TOML, `u64` iteration, `u32` tensor count, then per tensor `u32` name
//! length, name, `u8` dtype tag, `u8` rank, `u64` dims, raw data; finally a
//! `u64` FNV-1a hash of every preceding byte.

use std::path::Path;

use crate::config::TrainConfig;
use crate::dft::DftWeights;
use crate::error::{Error, Result};
use crate::nets::{Decoder, Encoder, SegNet};
use crate::nn::ParamSet;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"ASHCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub config: TrainConfig,
    pub iteration: u64,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = self.config.to_toml_string();
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.tag());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let clen = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(clen)?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = TrainConfig::from_toml_str(text)?;
        let iteration = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
            if dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} stored as {dtype:?}, expected {:?}",
                    T::DTYPE
                )));
            }
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let nbytes = numel
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let raw = r.take(nbytes)?;
            let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self {
            config,
            iteration,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Tensors whose names start with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let lead = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&lead).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Every network a run may produce. Absent parts are not stored.
#[derive(Debug, Clone, Default)]
pub struct NetBundle {
    pub encoder: Option<Encoder<f32>>,
    pub decoder: Option<Decoder<f32>>,
    pub segmenter: Option<SegNet<f32>>,
    pub dft: Option<DftWeights<f32>>,
}

fn push_section(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, params: &ParamSet<f32>) {
    out.extend(params.to_named().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
}

impl NetBundle {
    pub fn to_checkpoint(&self, config: &TrainConfig, iteration: u64) -> Checkpoint<f32> {
        let mut tensors = Vec::new();
        if let Some(e) = &self.encoder {
            push_section(&mut tensors, "encoder", e.params());
        }
        if let Some(d) = &self.decoder {
            push_section(&mut tensors, "decoder", d.params());
        }
        if let Some(g) = &self.segmenter {
            push_section(&mut tensors, "segmenter", g.params());
        }
        if let Some(w) = &self.dft {
            push_section(&mut tensors, "dft", w.params());
        }
        Checkpoint {
            config: config.clone(),
            iteration,
            tensors,
        }
    }

    /// Rebuilds the networks present in `ckpt` using its own configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint<f32>) -> Result<Self> {
        let cfg = &ckpt.config;
        let arch = cfg.arch();
        let mut bundle = NetBundle::default();
        let known = ["encoder", "decoder", "segmenter", "dft"];
        if let Some((n, _)) = ckpt
            .tensors
            .iter()
            .find(|(n, _)| !known.iter().any(|k| n.starts_with(&format!("{k}."))))
        {
            return Err(Error::Checkpoint(format!("unexpected tensor {n}")));
        }
        let enc = ckpt.section("encoder");
        if !enc.is_empty() {
            let mut e = Encoder::new(&arch, 0);
            e.params_mut().load_named(&enc)?;
            bundle.encoder = Some(e);
        }
        let dec = ckpt.section("decoder");
        if !dec.is_empty() {
            let mut d = Decoder::new(&arch, 0);
            d.params_mut().load_named(&dec)?;
            bundle.decoder = Some(d);
        }
        let seg = ckpt.section("segmenter");
        if !seg.is_empty() {
            let mut g = SegNet::new(&arch, 0);
            g.params_mut().load_named(&seg)?;
            bundle.segmenter = Some(g);
        }
        let dft = ckpt.section("dft");
        if !dft.is_empty() {
            let mut w = DftWeights::new(arch.num_classes, cfg.embed_dim, arch.latent_channels(), cfg.alpha_max, 0)?;
            w.params_mut().load_named(&dft)?;
            bundle.dft = Some(w);
        }
        Ok(bundle)
    }

    pub fn save(&self, config: &TrainConfig, iteration: u64, path: &Path) -> Result<()> {
        self.to_checkpoint(config, iteration).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint<f32>)> {
        let ckpt = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&ckpt)?, ckpt))
    }
}
