//! Model file: `"V2FP"`, `u32` version, then the main section and any number
//! of tagged extra sections. A section is a JSON metadata blob, a table of
//! named tensor shapes and a little-endian `f64` payload:
//!
//! ```text
//! u32 meta_len | meta (UTF-8 JSON)
//! u32 count    | count × (u32 name_len | name | u32 ndim | ndim × u64)
//! payload      | Σ numel × f64 LE
//! ```
//!
//! Extra sections are prefixed by a 4-byte tag such as `"LORA"`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::GeneratorConfig;
use super::mask::MaskConfig;
use super::model::GeneratorModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"V2FP";
pub const MODEL_VERSION: u32 = 1;
pub const LORA_TAG: &[u8; 4] = b"LORA";

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    generator: GeneratorConfig,
    mask: MaskConfig,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn encode_section(out: &mut Vec<u8>, s: &Section) {
    put_u32(out, s.meta.len());
    out.extend_from_slice(s.meta.as_bytes());
    put_u32(out, s.tensors.len());
    for (name, t) in &s.tensors {
        put_u32(out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape().len());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for (_, t) in &s.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.origin, "truncated model file"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::format(self.origin, "dimension overflow"))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.origin, "invalid UTF-8"))
    }

    fn section(&mut self) -> Result<Section> {
        let n = self.u32()?;
        let meta = self.string(n)?;
        let count = self.u32()?;
        let mut heads = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = self.u32()?;
            let name = self.string(n)?;
            let nd = self.u32()?;
            let shape = (0..nd).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
            heads.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(heads.len());
        for (name, shape) in heads {
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format(self.origin, "tensor size overflow"))?;
            let raw = self.take(numel.checked_mul(8).ok_or_else(|| Error::format(self.origin, "tensor size overflow"))?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(self.origin, format!("non-finite value in {name}")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Section { meta, tensors })
    }
}

/// Serialize a model plus tagged extra sections.
pub fn encode_model(model: &GeneratorModel, extra: &[([u8; 4], Section)]) -> Result<Vec<u8>> {
    let meta = serde_json::to_string(&ModelMeta {
        generator: model.config().clone(),
        mask: *model.mask_config(),
    })
    .map_err(|e| Error::invalid(e.to_string()))?;
    let tensors = model
        .config()
        .layer_shapes()
        .into_iter()
        .map(|(n, _)| n)
        .zip(model.params().iter().cloned())
        .collect();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    encode_section(&mut out, &Section { meta, tensors });
    for (tag, s) in extra {
        out.extend_from_slice(tag);
        encode_section(&mut out, s);
    }
    Ok(out)
}

/// Parse a model file, returning the model and its extra sections.
pub fn decode_model(bytes: &[u8], origin: &Path) -> Result<(GeneratorModel, Vec<([u8; 4], Section)>)> {
    let mut c = Cursor { bytes, pos: 0, origin };
    if c.take(4)? != MODEL_MAGIC {
        return Err(Error::format(origin, "bad model magic"));
    }
    let version = c.u32()? as u32;
    if version != MODEL_VERSION {
        return Err(Error::format(origin, format!("unsupported model version {version}")));
    }
    let main = c.section()?;
    let meta: ModelMeta =
        serde_json::from_str(&main.meta).map_err(|e| Error::format(origin, format!("model metadata: {e}")))?;
    let expected = meta.generator.layer_shapes();
    if expected.len() != main.tensors.len()
        || expected
            .iter()
            .zip(&main.tensors)
            .any(|((n, s), (m, t))| n != m || s.as_slice() != t.shape())
    {
        return Err(Error::format(origin, "layer table does not match the stored config"));
    }
    let params = main.tensors.into_iter().map(|(_, t)| t).collect();
    let model = GeneratorModel::from_params(meta.generator, meta.mask, params)?;
    let mut extra = Vec::new();
    while c.pos < bytes.len() {
        let tag: [u8; 4] = c.take(4)?.try_into().unwrap();
        extra.push((tag, c.section()?));
    }
    Ok((model, extra))
}

pub fn save_model(path: &Path, model: &GeneratorModel, extra: &[([u8; 4], Section)]) -> Result<()> {
    crate::io::write_atomic(path, &encode_model(model, extra)?)
}

pub fn load_model(path: &Path) -> Result<(GeneratorModel, Vec<([u8; 4], Section)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn model() -> GeneratorModel {
        GeneratorModel::new(GeneratorConfig::toy(), MaskConfig::default(), &mut rng::stream(2, "m", 0)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let extra = vec![(
            *LORA_TAG,
            Section {
                meta: "{}".into(),
                tensors: vec![("a".into(), Tensor::vector(vec![1.5, -2.0]))],
            },
        )];
        let bytes = encode_model(&m, &extra).unwrap();
        assert_eq!(&bytes[..4], b"V2FP");
        let (back, sections) = decode_model(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(sections, extra);
    }

    #[test]
    fn truncation_and_magic_detected() {
        let bytes = encode_model(&model(), &[]).unwrap();
        assert!(decode_model(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(decode_model(&bad, Path::new("mem")).is_err());
    }
}
