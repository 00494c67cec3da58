//! Single-file model container.
//!
//! Layout, little-endian throughout: the magic `DAN1`; a `u32` manifest
//! length; a UTF-8 `key=value` manifest; the canonical shape as 136 `f64`;
//! every parameter array as `f32` in manifest order; a CRC-64 of all
//! preceding bytes.

use std::collections::HashMap;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use super::{DanModel, StageArch, StageParams};
use crate::error::{ContainerError, Error, Result};
use crate::geometry::{Shape, NUM_LANDMARKS};

pub const MAGIC: &[u8; 4] = b"DAN1";
const VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

fn malformed(msg: impl Into<String>) -> Error {
    ContainerError::Malformed(msg.into()).into()
}

/// Serializes `model` into the container layout.
pub fn write_model(model: &DanModel) -> Result<Vec<u8>> {
    model.validate()?;
    let arch = model.arch();
    let bn = &model.stages[0].convs[0].bn;
    let mut manifest = String::new();
    let mut line = |k: &str, v: String| {
        manifest.push_str(k);
        manifest.push('=');
        manifest.push_str(&v);
        manifest.push('\n');
    };
    line("version", VERSION.to_string());
    line("stages", model.stages.len().to_string());
    line("frame", model.frame().to_string());
    line("radius", model.radius.to_string());
    line("landmarks", NUM_LANDMARKS.to_string());
    line("widths", arch.widths.map(|w| w.to_string()).join(","));
    line("fc1", arch.fc1.to_string());
    line("bn_epsilon", bn.epsilon.to_string());
    line("bn_momentum", bn.momentum.to_string());
    for (i, stage) in model.stages.iter().enumerate() {
        for (name, shape, _) in stage.named_arrays() {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            line(&format!("s{i}.{name}"), dims.join("x"));
        }
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for v in model.canonical.to_interleaved() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for stage in &model.stages {
        for (_, _, data) in stage.named_arrays() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses a container produced by [`write_model`].
pub fn read_model(bytes: &[u8]) -> Result<DanModel> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ContainerError::BadMagic.into());
    }
    if bytes.len() < 16 {
        return Err(ContainerError::Checksum.into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if CRC64.checksum(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
        return Err(ContainerError::Checksum.into());
    }
    let mlen = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
    let text = body
        .get(8..8 + mlen)
        .ok_or_else(|| malformed("manifest runs past the end"))
        .and_then(|b| std::str::from_utf8(b).map_err(|_| malformed("manifest is not UTF-8")))?;
    let mut entries = Vec::new();
    for l in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = l.split_once('=').ok_or_else(|| malformed(format!("manifest line {l:?}")))?;
        entries.push((k, v));
    }
    let map: HashMap<&str, &str> = entries.iter().copied().collect();
    let get = |k: &str| map.get(k).copied().ok_or_else(|| malformed(format!("manifest lacks {k}")));
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| malformed(format!("bad {k} value {v:?}")))
    }

    let version: u32 = num("version", get("version")?)?;
    if version != VERSION {
        return Err(ContainerError::Version {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let n_stages: usize = num("stages", get("stages")?)?;
    let frame: usize = num("frame", get("frame")?)?;
    let landmarks: usize = num("landmarks", get("landmarks")?)?;
    if frame != super::FRAME || landmarks != NUM_LANDMARKS || n_stages == 0 {
        return Err(malformed("unsupported frame, landmark count or stage count"));
    }
    let radius: f64 = num("radius", get("radius")?)?;
    let widths: Vec<usize> = get("widths")?.split(',').map(|w| num("widths", w)).collect::<Result<_>>()?;
    let widths: [usize; 4] = widths.try_into().map_err(|_| malformed("widths needs four entries"))?;
    let arch = StageArch {
        widths,
        fc1: num("fc1", get("fc1")?)?,
    };
    if widths.contains(&0) || arch.fc1 == 0 {
        return Err(malformed("zero layer width"));
    }
    let epsilon: f32 = num("bn_epsilon", get("bn_epsilon")?)?;
    let momentum: f32 = num("bn_momentum", get("bn_momentum")?)?;

    let mut pos = 8 + mlen;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = body.get(pos..pos + n).ok_or_else(|| malformed("payload shorter than the manifest declares"))?;
        pos += n;
        Ok(s)
    };
    let canonical: Vec<f64> = take(16 * NUM_LANDMARKS)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let canonical = Shape::from_interleaved(&canonical).map_err(|_| malformed("canonical shape is not finite"))?;

    let mut stages = Vec::with_capacity(n_stages);
    for i in 0..n_stages {
        let mut stage = StageParams::zeroed(arch, i);
        let expected: Vec<(String, Vec<usize>)> =
            stage.named_arrays().into_iter().map(|(n, s, _)| (n, s)).collect();
        for ((name, shape), dst) in expected.iter().zip(stage.arrays_mut()) {
            let key = format!("s{i}.{name}");
            let declared = get(&key)?;
            let dims: Vec<usize> = declared.split('x').map(|d| num(&key, d)).collect::<Result<_>>()?;
            if &dims != shape {
                return Err(malformed(format!("{key} is {declared}, expected {shape:?}")));
            }
            let raw = take(4 * dst.len())?;
            for (d, c) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *d = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
        for bn in stage.convs.iter_mut().map(|c| &mut c.bn).chain([&mut stage.fc1.bn]) {
            bn.epsilon = epsilon;
            bn.momentum = momentum;
        }
        stages.push(stage);
    }
    if pos != body.len() {
        return Err(malformed("trailing bytes after the parameters"));
    }
    Ok(DanModel {
        canonical,
        stages,
        radius,
    })
}

pub fn save_model(model: &DanModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_model(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DanModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}
