//! Model checkpoint file.
//!
//! Layout: magic `RBCK`, little-endian `u32` format version, little-endian
//! `u32` manifest length, the UTF-8 manifest, then one RBT blob per
//! parameter. Manifest lines are either `config <key> <value>` or
//! `param <name> <d0,d1,..> <byte offset>`, offsets counted from the start
//! of the blob section. Parameters are stored as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{BicConfig, BicModel};
use super::tensor::Tensor;
use crate::imageops::PadMode;
use crate::rbt::{read_u32, RawTensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RBCK";
pub const VERSION: u32 = 1;

fn manifest(model: &BicModel) -> String {
    let c = model.config();
    let mut m = String::new();
    let mut kv = |k: &str, v: String| m.push_str(&format!("config {k} {v}\n"));
    kv("image_size", c.image_size.to_string());
    kv("pad", c.pad.to_string());
    kv("pad_mode", c.pad_mode.name().to_string());
    kv("channels", c.channels.to_string());
    kv("num_beams", c.num_beams.to_string());
    kv("beam_length", c.beam_length.to_string());
    kv("thickness", c.thickness.to_string());
    kv("latent_dim", c.latent_dim.to_string());
    kv("edge_factor", format!("{:?}", c.edge_factor));
    let mut offset = 0;
    for (name, p) in model.names().iter().zip(model.params()) {
        let dims: Vec<String> = p.shape().iter().map(usize::to_string).collect();
        m.push_str(&format!("param {name} {} {offset}\n", dims.join(",")));
        offset += 8 + 4 * p.rank() + 4 * p.len();
    }
    m
}

pub fn write_checkpoint<W: Write>(model: &BicModel, w: &mut W) -> Result<()> {
    let m = manifest(model);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(m.len() as u32).to_le_bytes())?;
    w.write_all(m.as_bytes())?;
    for p in model.params() {
        RawTensor::from_f64(p.shape(), p.data())?.write_to(w)?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &BicModel, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(key: &str, value: Option<&String>) -> Result<T> {
    value
        .ok_or_else(|| Error::Format(format!("checkpoint lacks config {key}")))?
        .parse()
        .map_err(|_| Error::Format(format!("bad checkpoint config {key}")))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<BicModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    let text = String::from_utf8(buf).map_err(|_| Error::Format("manifest is not UTF-8".into()))?;

    let mut config = std::collections::HashMap::new();
    let mut entries = Vec::new();
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["config", k, v] => {
                config.insert(k.to_string(), v.to_string());
            }
            ["param", name, dims, offset] => {
                let dims = dims
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Format(format!("bad dims for {name}")))?;
                let offset: usize = offset
                    .parse()
                    .map_err(|_| Error::Format(format!("bad offset for {name}")))?;
                entries.push((name.to_string(), dims, offset));
            }
            _ => return Err(Error::Format(format!("bad manifest line {line:?}"))),
        }
    }
    let pad_mode: PadMode = config
        .get("pad_mode")
        .ok_or_else(|| Error::Format("checkpoint lacks config pad_mode".into()))?
        .parse()?;
    let cfg = BicConfig {
        image_size: field("image_size", config.get("image_size"))?,
        pad: field("pad", config.get("pad"))?,
        pad_mode,
        channels: field("channels", config.get("channels"))?,
        num_beams: field("num_beams", config.get("num_beams"))?,
        beam_length: field("beam_length", config.get("beam_length"))?,
        thickness: field("thickness", config.get("thickness"))?,
        latent_dim: field("latent_dim", config.get("latent_dim"))?,
        edge_factor: field("edge_factor", config.get("edge_factor"))?,
    };
    let mut model = BicModel::new(cfg, 0)?;
    if entries.len() != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, model has {}",
            entries.len(),
            model.params().len()
        )));
    }
    let mut pos = 0;
    for (name, dims, offset) in entries {
        if offset != pos {
            return Err(Error::Format(format!("parameter {name} at offset {offset}, expected {pos}")));
        }
        let raw = RawTensor::read_from(r)?;
        if raw.dims_usize() != dims {
            return Err(Error::Format(format!("parameter {name}: manifest and blob shapes differ")));
        }
        pos += raw.encoded_len();
        model.set_param(&name, Tensor::from_vec(&dims, raw.to_f64())?)?;
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<BicModel> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}
