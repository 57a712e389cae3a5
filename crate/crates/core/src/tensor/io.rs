//! Binary PNM images and the raw `SGFT` tensor container.
//!
//! `SGFT` layout (little-endian): magic `SGFT`, version `u16 = 1`, dtype `u8`
//! (0 = float32, 1 = quant8), rank `u8`, `rank × u32` dims, then for quant8
//! `scale: f32, minimum: f32`, then the row-major payload.

use std::fs;
use std::path::Path;

use super::{DType, QuantParams, Tensor, TensorData};
use crate::error::{Error, Result};

const TENSOR_MAGIC: &[u8; 4] = b"SGFT";
const TENSOR_VERSION: u16 = 1;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * t.rank() + t.nbytes());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(t.dtype().code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t.data() {
        TensorData::F32(d) => {
            for v in d.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        TensorData::Q8 { quanta, params } => {
            out.extend_from_slice(&params.scale.to_le_bytes());
            out.extend_from_slice(&params.minimum.to_le_bytes());
            out.extend_from_slice(quanta);
        }
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let err = |m: String| Error::TensorFile(m);
    let take = |pos: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(pos..pos + n)
            .ok_or_else(|| err(format!("truncated: need {n} bytes at offset {pos}")))
    };
    if take(0, 4)? != TENSOR_MAGIC {
        return Err(err(format!("magic mismatch: {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let dtype_code = take(6, 1)?[0];
    let dtype = DType::from_code(dtype_code).ok_or_else(|| err(format!("unknown dtype code {dtype_code}")))?;
    let rank = take(7, 1)?[0] as usize;
    let mut pos = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let t = match dtype {
        DType::F32 => {
            let payload = take(pos, n * 4)?;
            pos += n * 4;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_f32(shape, data)?
        }
        DType::Q8 => {
            let scale = f32::from_le_bytes(take(pos, 4)?.try_into().unwrap());
            let minimum = f32::from_le_bytes(take(pos + 4, 4)?.try_into().unwrap());
            pos += 8;
            let payload = take(pos, n)?.to_vec();
            pos += n;
            Tensor::from_q8(shape, payload, QuantParams { scale, minimum })?
        }
    };
    if pos != bytes.len() {
        return Err(err(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(t)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Reads a binary P5 (grey) or P6 (RGB) image with maxval 255.
///
/// The result is a quant8 tensor with unit scale, so the raw bytes survive
/// unchanged and `get` yields the 0..=255 pixel value.
pub fn read_image_pnm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes)
}

pub(crate) fn parse_pnm(bytes: &[u8]) -> Result<Tensor> {
    let perr = |offset: usize, msg: &str| Error::Parse {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(perr(0, "missing PNM magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(perr(1, "unsupported PNM type (expected P5 or P6)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(_) => break,
                None => return Err(perr(pos, "unexpected end of header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(perr(pos, "expected decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| perr(start, "header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(perr(pos, "only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(perr(pos, "zero image dimension"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(perr(pos, "expected single whitespace after maxval")),
    }
    let n = w * h * channels;
    let payload = bytes
        .get(pos..pos + n)
        .ok_or_else(|| perr(bytes.len(), "truncated pixel data"))?;
    if pos + n != bytes.len() {
        return Err(perr(pos + n, "trailing bytes after pixel data"));
    }
    Tensor::from_q8(
        vec![h, w, channels],
        payload.to_vec(),
        QuantParams {
            scale: 1.0,
            minimum: 0.0,
        },
    )
}

/// Writes a P5 (C = 1) or P6 (C = 3) image. Quant8 tensors write their raw
/// quanta; float tensors are rounded and clamped to 0..=255.
pub fn write_image_pnm(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pnm(t)?).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode_pnm(t: &Tensor) -> Result<Vec<u8>> {
    let [h, w, c] = t.hwc()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::invalid(format!("PNM needs 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    match t.data() {
        TensorData::Q8 { quanta, .. } => out.extend_from_slice(quanta),
        TensorData::F32(d) => out.extend(d.iter().map(|v| v.round().clamp(0.0, 255.0) as u8)),
    }
    Ok(out)
}
