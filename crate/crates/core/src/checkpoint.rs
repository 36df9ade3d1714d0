//! Checkpoint format: magic "DFV2", version u32 LE, tensor count u32 LE,
//! then per tensor: name length (u16 LE), name bytes, rank (u8), dims
//! (u32 LE each), raw little-endian f32 data.
//!
//! The model configuration rides along as small `meta/...` tensors so a
//! checkpoint is self-describing.

use std::fs;
use std::path::Path;

use crate::attention::DecayStrategy;
use crate::error::{Error, Result};
use crate::model::{AttentionPlacement, Model, ModelConfig};
use crate::prior::{FusionMode, PriorMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DFV2";
pub const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
    count: u32,
}

impl Writer {
    fn new() -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes()); // count patched at the end
        Writer { buf, count: 0 }
    }

    fn tensor(&mut self, name: &str, dims: &[usize], data: impl Iterator<Item = f32>) {
        let name_bytes = name.as_bytes();
        self.buf
            .extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(name_bytes);
        self.buf.push(dims.len() as u8);
        for &d in dims {
            self.buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self.count += 1;
    }

    fn finish(mut self) -> Vec<u8> {
        self.buf[8..12].copy_from_slice(&self.count.to_le_bytes());
        self.buf
    }
}

fn decay_meta(d: DecayStrategy) -> [f32; 3] {
    match d {
        DecayStrategy::Fixed(b) => [0.0, b as f32, 0.0],
        DecayStrategy::Linear { lo, hi } => [1.0, lo as f32, hi as f32],
    }
}

fn fusion_meta(f: FusionMode) -> f32 {
    match f {
        FusionMode::Memory => 0.0,
        FusionMode::Addition => 1.0,
        FusionMode::Hadamard => 2.0,
        FusionMode::Conv => 3.0,
    }
}

fn prior_meta(p: PriorMode) -> f32 {
    match p {
        PriorMode::None => 0.0,
        PriorMode::DepthOnly => 1.0,
        PriorMode::SpatialOnly => 2.0,
        PriorMode::Both => 3.0,
    }
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    let cfg = &model.config;
    let mut w = Writer::new();
    let usize4 = |a: &[usize; 4]| a.iter().map(|&v| v as f32).collect::<Vec<_>>();
    w.tensor("meta/stage_dims", &[4], usize4(&cfg.stage_dims).into_iter());
    w.tensor(
        "meta/stage_depths",
        &[4],
        usize4(&cfg.stage_depths).into_iter(),
    );
    w.tensor(
        "meta/stage_heads",
        &[4],
        usize4(&cfg.stage_heads).into_iter(),
    );
    w.tensor(
        "meta/scalars",
        &[4],
        [
            cfg.num_classes as f32,
            cfg.ffn_ratio as f32,
            cfg.decoder_dim as f32,
            match cfg.attention {
                AttentionPlacement::AxialFirstThree => 0.0,
                AttentionPlacement::FullEverywhere => 1.0,
            },
        ]
        .into_iter(),
    );
    w.tensor("meta/decay", &[3], decay_meta(cfg.decay).into_iter());
    w.tensor(
        "meta/modes",
        &[2],
        [fusion_meta(cfg.fusion), prior_meta(cfg.prior)].into_iter(),
    );
    model.visit_params(&mut |name, t| {
        w.tensor(
            name,
            t.shape(),
            t.data().iter().map(|&v| v.as_f64() as f32),
        );
    });
    fs::write(path, w.finish()).map_err(|e| Error::io(format!("{}: {e}", path.display())))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(format!(
                "{}: truncated checkpoint at byte {}",
                self.file, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16le(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32le(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// All tensors of a checkpoint, in file order.
pub fn read_raw(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let file = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| Error::io(format!("{file}: {e}")))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        file: &file,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::parse(format!("{file}: bad magic, expected DFV2")));
    }
    let version = r.u32le()?;
    if version != VERSION {
        return Err(Error::parse(format!(
            "{file}: unsupported checkpoint version {version}"
        )));
    }
    let count = r.u32le()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.u16le()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::parse(format!("{file}: non-utf8 tensor name")))?;
        let rank = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32le()? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, dims, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(format!(
            "{file}: {} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(tensors)
}

fn meta<'a>(
    tensors: &'a [(String, Vec<usize>, Vec<f32>)],
    name: &str,
    file: &str,
) -> Result<&'a [f32]> {
    tensors
        .iter()
        .find(|(n, _, _)| n == name)
        .map(|(_, _, d)| d.as_slice())
        .ok_or_else(|| Error::parse(format!("{file}: missing {name}")))
}

fn config_from_meta(tensors: &[(String, Vec<usize>, Vec<f32>)], file: &str) -> Result<ModelConfig> {
    let dims = meta(tensors, "meta/stage_dims", file)?;
    let depths = meta(tensors, "meta/stage_depths", file)?;
    let heads = meta(tensors, "meta/stage_heads", file)?;
    let scalars = meta(tensors, "meta/scalars", file)?;
    let decay = meta(tensors, "meta/decay", file)?;
    let modes = meta(tensors, "meta/modes", file)?;
    let to4 = |s: &[f32]| -> [usize; 4] { [0, 1, 2, 3].map(|i| s[i] as usize) };
    Ok(ModelConfig {
        stage_dims: to4(dims),
        stage_depths: to4(depths),
        stage_heads: to4(heads),
        num_classes: scalars[0] as usize,
        ffn_ratio: scalars[1] as usize,
        decoder_dim: scalars[2] as usize,
        attention: if scalars[3] == 0.0 {
            AttentionPlacement::AxialFirstThree
        } else {
            AttentionPlacement::FullEverywhere
        },
        decay: if decay[0] == 0.0 {
            DecayStrategy::Fixed(decay[1] as f64)
        } else {
            DecayStrategy::Linear {
                lo: decay[1] as f64,
                hi: decay[2] as f64,
            }
        },
        fusion: match modes[0] as usize {
            0 => FusionMode::Memory,
            1 => FusionMode::Addition,
            2 => FusionMode::Hadamard,
            _ => FusionMode::Conv,
        },
        prior: match modes[1] as usize {
            0 => PriorMode::None,
            1 => PriorMode::DepthOnly,
            2 => PriorMode::SpatialOnly,
            _ => PriorMode::Both,
        },
    })
}

/// Rebuild a model from a checkpoint. Every parameter must be present
/// with the right shape; unknown non-meta tensors are rejected.
pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let file = path.display().to_string();
    let tensors = read_raw(path)?;
    let cfg = config_from_meta(&tensors, &file)?;
    let mut model = Model::<T>::new(cfg, 0)?;
    let mut expected = std::collections::HashSet::new();
    model.visit_params(&mut |name, _| {
        expected.insert(name.to_string());
    });
    for (name, _, _) in &tensors {
        if !name.starts_with("meta/") && !expected.contains(name.as_str()) {
            return Err(Error::parse(format!("{file}: unexpected tensor `{name}`")));
        }
    }
    let mut err: Option<Error> = None;
    model.visit_params_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match tensors.iter().find(|(n, _, _)| n == name) {
            Some((_, dims, data)) => {
                if dims != t.shape() {
                    err = Some(Error::parse(format!(
                        "{file}: tensor `{name}` has shape {dims:?}, model expects {:?}",
                        t.shape()
                    )));
                    return;
                }
                let vals: Vec<T> = data.iter().map(|&v| T::from_f64(v as f64)).collect();
                *t = Tensor::from_vec(dims.clone(), vals)
                    .expect("checkpoint shape validated")
                    .with_grad();
            }
            None => err = Some(Error::parse(format!("{file}: missing tensor `{name}`"))),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(model),
    }
}
