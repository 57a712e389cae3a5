//! Dense immutable tensors in H×W×C order.
//!
//! Values are either `f32` or affine-quantized 8-bit (`minimum + scale * q`).
//! Buffers are reference counted so graphs can be cloned and rewritten without
//! copying weight payloads.

mod io;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

pub use io::{read_image_pnm, read_tensor, write_image_pnm, write_tensor, decode_tensor, encode_tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    Q8,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::Q8 => 1,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::Q8 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::Q8),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "float32",
            DType::Q8 => "quant8",
        })
    }
}

/// Per-tensor affine quantization: quantum `q` represents `minimum + scale * q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub minimum: f32,
}

impl QuantParams {
    /// Parameters covering `[min, max]` with 256 levels.
    pub fn from_range(min: f32, max: f32) -> Self {
        let scale = if max > min { (max - min) / 255.0 } else { 0.0 };
        QuantParams {
            scale,
            minimum: min,
        }
    }

    #[inline]
    pub fn dequant(&self, q: u8) -> f32 {
        self.minimum + self.scale * q as f32
    }

    #[inline]
    pub fn quant(&self, x: f32) -> u8 {
        if self.scale == 0.0 {
            return 0;
        }
        ((x - self.minimum) / self.scale).round().clamp(0.0, 255.0) as u8
    }
}

#[derive(Clone, PartialEq)]
pub enum TensorData {
    F32(Arc<[f32]>),
    Q8 { quanta: Arc<[u8]>, params: QuantParams },
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape).field("dtype", &self.dtype());
        if let TensorData::Q8 { params, .. } = &self.data {
            s.field("quant", params);
        }
        if self.len() <= 16 {
            s.field("values", &self.to_f32_vec());
        }
        s.finish()
    }
}

impl Tensor {
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Tensor {
            shape,
            data: TensorData::F32(data.into()),
        })
    }

    pub fn from_q8(shape: Vec<usize>, quanta: Vec<u8>, params: QuantParams) -> Result<Self> {
        check_len(&shape, quanta.len())?;
        if !(params.scale >= 0.0) || !params.scale.is_finite() || !params.minimum.is_finite() {
            return Err(Error::invalid(format!(
                "invalid quantization parameters {params:?}"
            )));
        }
        Ok(Tensor {
            shape,
            data: TensorData::Q8 {
                quanta: quanta.into(),
                params,
            },
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: TensorData::F32(vec![0.0; n].into()),
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: TensorData::F32(vec![v].into()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(d) => d.len(),
            TensorData::Q8 { quanta, .. } => quanta.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::Q8 { .. } => DType::Q8,
        }
    }

    pub fn quant(&self) -> Option<QuantParams> {
        match self.data {
            TensorData::Q8 { params, .. } => Some(params),
            TensorData::F32(_) => None,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Payload size in bytes (4 per float, 1 per quantum).
    pub fn nbytes(&self) -> usize {
        self.len() * self.dtype().size_of()
    }

    /// The float buffer, if this is an `f32` tensor.
    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(d) => Some(d),
            TensorData::Q8 { .. } => None,
        }
    }

    pub fn as_q8(&self) -> Option<(&[u8], QuantParams)> {
        match &self.data {
            TensorData::Q8 { quanta, params } => Some((quanta, *params)),
            TensorData::F32(_) => None,
        }
    }

    pub fn get(&self, idx: usize) -> f32 {
        match &self.data {
            TensorData::F32(d) => d[idx],
            TensorData::Q8 { quanta, params } => params.dequant(quanta[idx]),
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match &self.data {
            TensorData::F32(d) => d.to_vec(),
            TensorData::Q8 { quanta, params } => quanta.iter().map(|&q| params.dequant(q)).collect(),
        }
    }

    /// Float view of this tensor; dequantizes `Q8` payloads.
    pub fn to_f32(&self) -> Tensor {
        match &self.data {
            TensorData::F32(_) => self.clone(),
            TensorData::Q8 { .. } => Tensor {
                shape: self.shape.clone(),
                data: TensorData::F32(self.to_f32_vec().into()),
            },
        }
    }

    /// Per-tensor min/max quantization.
    pub fn quantize(&self) -> Result<Tensor> {
        match &self.data {
            TensorData::Q8 { .. } => Ok(self.clone()),
            TensorData::F32(d) => {
                if let Some(bad) = d.iter().find(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("cannot quantize non-finite value {bad}")));
                }
                let (min, max) = d
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                let (min, max) = if d.is_empty() { (0.0, 0.0) } else { (min, max) };
                let params = QuantParams::from_range(min, max);
                let quanta: Vec<u8> = d.iter().map(|&v| params.quant(v)).collect();
                Tensor::from_q8(self.shape.clone(), quanta, params)
            }
        }
    }

    pub fn with_shape(&self, shape: Vec<usize>) -> Result<Tensor> {
        check_len(&shape, self.len())?;
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Bytes of the payload in little-endian element order.
    pub fn payload_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(d) => d.iter().flat_map(|v| v.to_le_bytes()).collect(),
            TensorData::Q8 { quanta, .. } => quanta.to_vec(),
        }
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0`, equal NaN payloads compare equal).
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (
                TensorData::Q8 { quanta: a, params: pa },
                TensorData::Q8 { quanta: b, params: pb },
            ) => {
                a == b
                    && pa.scale.to_bits() == pb.scale.to_bits()
                    && pa.minimum.to_bits() == pb.minimum.to_bits()
            }
            _ => false,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        let a = self.to_f32_vec();
        let b = other.to_f32_vec();
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    /// `[H, W, C]` of a rank-3 tensor.
    pub fn hwc(&self) -> Result<[usize; 3]> {
        match self.shape[..] {
            [h, w, c] => Ok([h, w, c]),
            _ => Err(Error::invalid(format!(
                "expected rank-3 H×W×C tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Interpret the tensor as a label map (integral values in 0..=255).
    pub fn to_labels(&self) -> Result<Vec<u8>> {
        match &self.data {
            TensorData::Q8 { quanta, params } if params.scale == 1.0 && params.minimum == 0.0 => {
                Ok(quanta.to_vec())
            }
            _ => self
                .to_f32_vec()
                .into_iter()
                .map(|v| {
                    if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                        Ok(v as u8)
                    } else {
                        Err(Error::invalid(format!("value {v} is not a valid label")))
                    }
                })
                .collect(),
        }
    }

    /// Label map stored losslessly as quanta with unit scale.
    pub fn from_labels(h: usize, w: usize, labels: Vec<u8>) -> Result<Tensor> {
        Tensor::from_q8(
            vec![h, w, 1],
            labels,
            QuantParams {
                scale: 1.0,
                minimum: 0.0,
            },
        )
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::invalid(format!(
            "shape {shape:?} needs {expected} elements, buffer has {len}"
        )));
    }
    Ok(())
}

/// Nearest-neighbour resize of an H×W×C tensor using the top-left index rule
/// `src = floor(dst * in / out)`. Quantized tensors stay quantized.
pub fn resize_nearest(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w, c] = t.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "resize target must be non-zero, got {out_h}×{out_w}"
        )));
    }
    let row_src: Vec<usize> = (0..out_h).map(|i| i * h / out_h).collect();
    let col_src: Vec<usize> = (0..out_w).map(|j| j * w / out_w).collect();
    fn gather<T: Copy>(src: &[T], rows: &[usize], cols: &[usize], w: usize, c: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(rows.len() * cols.len() * c);
        for &si in rows {
            for &sj in cols {
                let base = (si * w + sj) * c;
                out.extend_from_slice(&src[base..base + c]);
            }
        }
        out
    }
    let shape = vec![out_h, out_w, c];
    match &t.data {
        TensorData::F32(d) => Tensor::from_f32(shape, gather(d, &row_src, &col_src, w, c)),
        TensorData::Q8 { quanta, params } => {
            Tensor::from_q8(shape, gather(quanta, &row_src, &col_src, w, c), *params)
        }
    }
}
