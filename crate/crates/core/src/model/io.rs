//! Versioned little-endian model file.
//!
//! ```text
//! magic            4 bytes  "IMSG"
//! format version   u32
//! backbone kind    u8       0 = fcn, 1 = unet
//! num_classes      u32
//! class names      num_classes × (u32 byte length, UTF-8 bytes)
//! tensor count     u32
//! shape table      tensor count × (u32 rank, rank × u32 dims)
//! payload          f32 values of every tensor, in table order
//! ```
//!
//! Tensor 0 is a metadata vector `[input_h, input_w, image_channels,
//! base_channels, levels, rows_prenormalized]`; the remaining tensors are
//! [`SegModel::parameters`] in canonical order.

use std::path::Path;

use thiserror::Error;

use super::{BackboneKind, ClassifierHead, ModelConfig, SegModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IMSG";
pub const FORMAT_VERSION: u32 = 1;
const META_LEN: usize = 6;

#[derive(Debug, Error)]
pub enum ModelFormatError {
    #[error("not a model file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("file truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("shape table inconsistent: {0}")]
    ShapeTable(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ModelFormatError> {
        let end = self.offset.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            ModelFormatError::Truncated {
                offset: self.offset,
                what,
            },
        )?;
        let out = &self.bytes[self.offset..end];
        self.offset = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ModelFormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn to_bytes(model: &SegModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.kind.code());
    out.extend_from_slice(&(model.num_classes() as u32).to_le_bytes());
    for name in &model.class_names {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    let c = &model.config;
    let meta = Tensor::new(
        vec![META_LEN],
        vec![
            c.input_height as f32,
            c.input_width as f32,
            c.image_channels as f32,
            c.base_channels as f32,
            c.levels as f32,
            if model.rows_prenormalized { 1.0 } else { 0.0 },
        ],
    )
    .expect("fixed meta length");
    let mut tensors = vec![&meta];
    tensors.extend(model.parameters());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for t in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<SegModel, ModelFormatError> {
    let mut r = Reader { bytes, offset: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(ModelFormatError::BadMagic(magic));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(ModelFormatError::Version(version));
    }
    let kind_code = r.take(1, "backbone kind")?[0];
    let kind = BackboneKind::from_code(kind_code)
        .ok_or_else(|| ModelFormatError::Header(format!("unknown backbone code {kind_code}")))?;
    let num_classes = r.u32("class count")? as usize;
    let mut class_names = Vec::with_capacity(num_classes.min(256));
    for _ in 0..num_classes {
        let len = r.u32("class name length")? as usize;
        let raw = r.take(len, "class name")?;
        let name = std::str::from_utf8(raw)
            .map_err(|e| ModelFormatError::Header(format!("class name is not UTF-8: {e}")))?;
        class_names.push(name.to_string());
    }
    let count = r.u32("tensor count")? as usize;
    let mut shapes = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = r.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32("tensor dims")? as usize);
        }
        shapes.push(dims);
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in shapes {
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4, "tensor payload")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| ModelFormatError::ShapeTable(e.to_string()))?;
        tensors.push(t);
    }
    if r.offset != bytes.len() {
        return Err(ModelFormatError::ShapeTable(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.offset
        )));
    }

    let mut tensors = tensors.into_iter();
    let meta = tensors
        .next()
        .filter(|m| m.shape() == [META_LEN])
        .ok_or_else(|| ModelFormatError::ShapeTable("missing metadata tensor".into()))?;
    let m = meta.data();
    let config = ModelConfig {
        input_height: m[0] as usize,
        input_width: m[1] as usize,
        image_channels: m[2] as usize,
        base_channels: m[3] as usize,
        levels: m[4] as usize,
        seed: 0,
    };
    let placeholder: Vec<String> = (0..num_classes.max(1)).map(|i| format!("#{i}")).collect();
    let mut model = SegModel::build(kind, config, placeholder)
        .map_err(|e| ModelFormatError::ShapeTable(format!("metadata does not describe a model: {e}")))?;
    let params: Vec<Tensor> = tensors.collect();
    {
        let slots = model.parameters_mut();
        if slots.len() != params.len() {
            return Err(ModelFormatError::ShapeTable(format!(
                "{} parameter tensors for a model with {}",
                params.len(),
                slots.len()
            )));
        }
        for (i, (slot, t)) in slots.into_iter().zip(params).enumerate() {
            if slot.shape() != t.shape() {
                return Err(ModelFormatError::ShapeTable(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    i + 1,
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
    }
    if model.heads.iter().any(|h: &ClassifierHead| h.num_classes() != num_classes) {
        return Err(ModelFormatError::ShapeTable("head rows disagree with class count".into()));
    }
    model.class_names = class_names;
    model.rows_prenormalized = m[5] != 0.0;
    Ok(model)
}

pub fn save(model: &SegModel, path: impl AsRef<Path>) -> Result<(), ModelFormatError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<SegModel, ModelFormatError> {
    from_bytes(&std::fs::read(path)?)
}

impl SegModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelFormatError> {
        from_bytes(bytes)
    }
}
