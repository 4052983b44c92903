//! Binary weight files.
//!
//! Layout (little-endian): magic `C2FW`, format version `u32`, flags `u32`
//! (bit 0 set when the payload is f32), tensor count `u32`; then per tensor:
//! name length `u32`, UTF-8 name, rank `u32`, dims `u32[rank]`, payload.

use std::path::Path;

use crate::binio::{put_u32, ByteReader};
use crate::error::{Error, FormatError, Result};
use crate::model::arch::C2FArchitecture;
use crate::model::store::{Block, WeightStore};
use crate::nn::LayerParams;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: [u8; 4] = *b"C2FW";
pub const WEIGHT_VERSION: u32 = 1;
const FLAG_F32: u32 = 1;

pub fn encode_weights<T: Scalar>(store: &WeightStore<T>) -> Vec<u8> {
    let tensors = store.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHT_MAGIC);
    put_u32(&mut out, WEIGHT_VERSION);
    put_u32(
        &mut out,
        if T::PRECISION == Precision::F32 { FLAG_F32 } else { 0 },
    );
    put_u32(&mut out, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

/// Decodes a weight file into a store shaped like `arch`, converting the
/// payload to `T` (widening f32 files into f64 is exact).
pub fn decode_weights<T: Scalar>(bytes: &[u8], arch: &C2FArchitecture) -> Result<WeightStore<T>> {
    decode(bytes, arch).map_err(Error::WeightFormat)
}

fn decode<T: Scalar>(bytes: &[u8], arch: &C2FArchitecture) -> Result<WeightStore<T>, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(&WEIGHT_MAGIC)?;
    let version = r.u32()?;
    if version != WEIGHT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let flags = r.u32()?;
    let payload_f32 = flags & FLAG_F32 != 0;
    let count = r.u32()? as usize;

    let mut store = WeightStore::<T> {
        alpha: Vec::new(),
        beta: Vec::new(),
    };
    let mut expected = Vec::new();
    for (i, lv) in arch.levels.iter().enumerate() {
        store.alpha.push(Vec::new());
        store.beta.push(Vec::new());
        for (block, layers) in [(Block::Alpha, &lv.transformer), (Block::Beta, &lv.classifier)] {
            for (li, layer) in layers.iter().enumerate() {
                store.block_mut(block, i).push(LayerParams::empty());
                for (ti, (_, shape)) in layer.param_shapes().into_iter().enumerate() {
                    expected.push((format!("{}.{i}.{li}.{ti}", block.prefix()), shape, block, i, li));
                }
            }
        }
    }
    if count != expected.len() {
        return Err(FormatError::ShapeTable(format!(
            "file holds {count} tensors, architecture needs {}",
            expected.len()
        )));
    }
    for (name, shape, block, level, li) in expected {
        let name_len = r.u32()? as usize;
        let found = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FormatError::Invalid("tensor name is not UTF-8".into()))?;
        if found != name {
            return Err(FormatError::ShapeTable(format!(
                "expected tensor `{name}`, found `{found}`"
            )));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if dims != shape {
            return Err(FormatError::ShapeTable(format!(
                "tensor `{name}` has shape {dims:?}, architecture needs {shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = if payload_f32 { r.f32()? as f64 } else { r.f64()? };
            data.push(T::of(v));
        }
        let tensor = Tensor::new(dims, data).map_err(|e| FormatError::Invalid(e.to_string()))?;
        store.block_mut(block, level)[li].tensors.push(tensor);
    }
    if !r.is_empty() {
        return Err(FormatError::Invalid("trailing bytes after last tensor".into()));
    }
    Ok(store)
}

pub fn save_weights<T: Scalar>(store: &WeightStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(store)).map_err(|e| Error::io(path, e))
}

pub fn load_weights<T: Scalar>(
    path: impl AsRef<Path>,
    arch: &C2FArchitecture,
) -> Result<WeightStore<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, arch)
}
