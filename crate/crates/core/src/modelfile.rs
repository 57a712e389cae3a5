//! The `.sgm` model container.
//!
//! ```text
//! "SGFM"  version:u16 = 1
//! header  len:u32  { name:str  node_count:u32  output_count:u32  outputs:u32* }  crc32:u32
//! nodes   len:u32  { id:u32 kind:u8 name:str n_in:u32 in:u32* n_attr:u32 (key:str tag:u8 value)* }*  crc32:u32
//! blobs   len:u64  { id:u32 dtype:u8 rank:u8 dims:u32* [scale:f32 minimum:f32] payload }*  crc32:u32
//! ```
//!
//! All integers are little-endian; `str` is a `u32` byte length followed by
//! UTF-8. Nodes and attributes are written in ascending id/key order so equal
//! graphs serialize to equal bytes. Attribute tags: 0 int (`i64`), 1 float
//! (`f32`), 2 string, 3 int list (`u32` count + `i64`s), 4 bool (`u8`).
//!
//! Kind codes: 0 Const, 1 Input, 2 Conv2D, 3 ConvTranspose2D, 4 BiasAdd,
//! 5 Relu, 6 MaxPool2x2, 7 Add, 8 Identity, 9 Softmax, 10 ArgMax,
//! 11 ResizeNearest, 12 BatchNormFrozen, 13 FusedConvBiasRelu.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, ModelFileError, Result};
use crate::graph::{AttrValue, Attrs, Graph, Node, NodeId, OpKind};
use crate::tensor::{DType, QuantParams, Tensor, TensorData};

pub const MAGIC: &[u8; 4] = b"SGFM";
pub const VERSION: u16 = 1;
pub const EXTENSION: &str = "sgm";

/// Byte decomposition of a serialized model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSize {
    pub total: usize,
    pub payload: usize,
    pub structure: usize,
}

impl ModelSize {
    pub fn total_mb(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn encode_header(g: &Graph) -> Vec<u8> {
    let mut out = Vec::new();
    put_str(&mut out, &g.name);
    out.extend_from_slice(&(g.nodes.len() as u32).to_le_bytes());
    out.extend_from_slice(&(g.outputs.len() as u32).to_le_bytes());
    for o in &g.outputs {
        out.extend_from_slice(&o.0.to_le_bytes());
    }
    out
}

fn encode_nodes(g: &Graph) -> Vec<u8> {
    let mut out = Vec::new();
    for n in g.nodes.values() {
        out.extend_from_slice(&n.id.0.to_le_bytes());
        out.push(n.kind.code());
        put_str(&mut out, &n.name);
        out.extend_from_slice(&(n.inputs.len() as u32).to_le_bytes());
        for i in &n.inputs {
            out.extend_from_slice(&i.0.to_le_bytes());
        }
        out.extend_from_slice(&(n.attrs.len() as u32).to_le_bytes());
        for (k, v) in &n.attrs {
            put_str(&mut out, k);
            match v {
                AttrValue::Int(i) => {
                    out.push(0);
                    out.extend_from_slice(&i.to_le_bytes());
                }
                AttrValue::Float(f) => {
                    out.push(1);
                    out.extend_from_slice(&f.to_le_bytes());
                }
                AttrValue::Str(s) => {
                    out.push(2);
                    put_str(&mut out, s);
                }
                AttrValue::Ints(v) => {
                    out.push(3);
                    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
                    for i in v {
                        out.extend_from_slice(&i.to_le_bytes());
                    }
                }
                AttrValue::Bool(b) => {
                    out.push(4);
                    out.push(*b as u8);
                }
            }
        }
    }
    out
}

fn blob_header(id: NodeId, t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 4 * t.rank());
    out.extend_from_slice(&id.0.to_le_bytes());
    out.push(t.dtype().code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    if let Some(p) = t.quant() {
        out.extend_from_slice(&p.scale.to_le_bytes());
        out.extend_from_slice(&p.minimum.to_le_bytes());
    }
    out
}

fn consts(g: &Graph) -> impl Iterator<Item = (NodeId, &Tensor)> {
    g.nodes.values().filter_map(|n| n.payload.as_ref().map(|t| (n.id, t)))
}

/// File size of `g` without serializing it.
pub fn measure(g: &Graph) -> ModelSize {
    let header = encode_header(g).len();
    let nodes = encode_nodes(g).len();
    let blob_meta: usize = consts(g).map(|(id, t)| blob_header(id, t).len()).sum();
    let payload = g.payload_bytes();
    let total = 4 + 2 + (4 + header + 4) + (4 + nodes + 4) + (8 + blob_meta + payload + 4);
    ModelSize {
        total,
        payload,
        structure: total - payload,
    }
}

/// Streams the model to `w`; returns bytes written.
pub fn write_model<W: Write>(g: &Graph, w: &mut W) -> std::io::Result<usize> {
    let mut written = 0;
    let mut emit = |w: &mut W, bytes: &[u8]| -> std::io::Result<()> {
        written += bytes.len();
        w.write_all(bytes)
    };
    emit(w, MAGIC)?;
    emit(w, &VERSION.to_le_bytes())?;
    for section in [encode_header(g), encode_nodes(g)] {
        emit(w, &(section.len() as u32).to_le_bytes())?;
        emit(w, &section)?;
        emit(w, &crc32fast::hash(&section).to_le_bytes())?;
    }
    let blob_len: usize = consts(g).map(|(id, t)| blob_header(id, t).len() + t.nbytes()).sum();
    emit(w, &(blob_len as u64).to_le_bytes())?;
    let mut crc = crc32fast::Hasher::new();
    for (id, t) in consts(g) {
        let head = blob_header(id, t);
        crc.update(&head);
        emit(w, &head)?;
        match t.data() {
            TensorData::Q8 { quanta, .. } => {
                crc.update(quanta);
                emit(w, quanta)?;
            }
            TensorData::F32(d) => {
                for chunk in d.chunks(16 * 1024) {
                    let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
                    crc.update(&bytes);
                    emit(w, &bytes)?;
                }
            }
        }
    }
    emit(w, &crc.finalize().to_le_bytes())?;
    Ok(written)
}

pub fn to_bytes(g: &Graph) -> Vec<u8> {
    let mut out = Vec::with_capacity(measure(g).total);
    write_model(g, &mut out).expect("writing to a Vec cannot fail");
    out
}

/// Writes `g` to `path` and returns the number of bytes written.
pub fn save(g: &Graph, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    g.ensure_valid()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::with_capacity(1 << 20, file);
    let n = write_model(g, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(n)
}

pub fn load(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(from_bytes(&bytes)?.0)
}

/// Size decomposition of a model file on disk (validates the whole file).
pub fn model_size(path: impl AsRef<Path>) -> Result<ModelSize> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(from_bytes(&bytes)?.1)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelFileError> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or(ModelFileError::Truncated {
                offset: self.base + self.pos,
                needed: n,
            })?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelFileError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelFileError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, ModelFileError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, ModelFileError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String, ModelFileError> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| ModelFileError::Malformed("invalid UTF-8 string".into()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    /// A length-prefixed, checksummed section as a sub-reader.
    fn section(&mut self, name: &'static str, wide: bool) -> Result<Reader<'a>, ModelFileError> {
        let len = if wide { self.u64()? as usize } else { self.u32()? as usize };
        let start = self.base + self.pos;
        let body = self.take(len)?;
        let stored = self.u32()?;
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(ModelFileError::Checksum {
                section: name,
                stored,
                computed,
            });
        }
        Ok(Reader {
            buf: body,
            pos: 0,
            base: start,
        })
    }
}

fn malformed(msg: impl Into<String>) -> ModelFileError {
    ModelFileError::Malformed(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Graph, ModelSize)> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        base: 0,
    };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(ModelFileError::BadMagic(magic).into());
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(ModelFileError::VersionMismatch(version).into());
    }

    let mut h = r.section("header", false)?;
    let name = h.str()?;
    let node_count = h.u32()? as usize;
    let n_out = h.u32()? as usize;
    let outputs = (0..n_out).map(|_| h.u32().map(NodeId)).collect::<Result<Vec<_>, _>>()?;
    if !h.done() {
        return Err(malformed("trailing bytes in header").into());
    }

    let mut nr = r.section("nodes", false)?;
    let mut g = Graph::new(name);
    g.outputs = outputs;
    for _ in 0..node_count {
        let id = NodeId(nr.u32()?);
        let code = nr.u8()?;
        let kind = OpKind::from_code(code).ok_or_else(|| malformed(format!("unknown kind code {code}")))?;
        let name = nr.str()?;
        let n_in = nr.u32()? as usize;
        let inputs = (0..n_in).map(|_| nr.u32().map(NodeId)).collect::<Result<Vec<_>, _>>()?;
        let n_attr = nr.u32()? as usize;
        let mut attrs = Attrs::new();
        for _ in 0..n_attr {
            let key = nr.str()?;
            let value = match nr.u8()? {
                0 => AttrValue::Int(nr.i64()?),
                1 => AttrValue::Float(nr.f32()?),
                2 => AttrValue::Str(nr.str()?),
                3 => {
                    let n = nr.u32()? as usize;
                    AttrValue::Ints((0..n).map(|_| nr.i64()).collect::<Result<_, _>>()?)
                }
                4 => AttrValue::Bool(nr.u8()? != 0),
                t => return Err(malformed(format!("unknown attribute tag {t}")).into()),
            };
            attrs.insert(key, value);
        }
        if g.nodes.insert(id, Node { id, kind, name, inputs, attrs, payload: None }).is_some() {
            return Err(malformed(format!("duplicate node id {}", id.0)).into());
        }
    }
    if !nr.done() {
        return Err(malformed("trailing bytes in node table").into());
    }

    let mut br = r.section("blobs", true)?;
    let mut payload = 0;
    while !br.done() {
        let id = NodeId(br.u32()?);
        let code = br.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| malformed(format!("unknown dtype code {code}")))?;
        let rank = br.u8()? as usize;
        let shape = (0..rank).map(|_| br.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let tensor = match dtype {
            DType::F32 => {
                let raw = br.take(n * 4)?;
                let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_f32(shape, data)?
            }
            DType::Q8 => {
                let params = QuantParams {
                    scale: br.f32()?,
                    minimum: br.f32()?,
                };
                Tensor::from_q8(shape, br.take(n)?.to_vec(), params)?
            }
        };
        payload += tensor.nbytes();
        let node = g
            .nodes
            .get_mut(&id)
            .ok_or_else(|| malformed(format!("blob for unknown node {}", id.0)))?;
        if node.kind != OpKind::Const || node.payload.is_some() {
            return Err(malformed(format!("unexpected blob for node {}", id.0)).into());
        }
        node.payload = Some(tensor);
    }
    if !r.done() {
        return Err(malformed("trailing bytes after blob section").into());
    }
    if let Some(n) = g.nodes.values().find(|n| n.kind == OpKind::Const && n.payload.is_none()) {
        return Err(malformed(format!("Const node {} has no blob", n.id.0)).into());
    }
    let total = bytes.len();
    Ok((g, ModelSize { total, payload, structure: total - payload }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attrs;

    fn small_graph() -> Graph {
        let mut g = Graph::new("small");
        let x = g.add_input("x");
        let w = g.add_const("w", Tensor::from_f32(vec![1, 1, 2, 3], vec![0.5, -1.0, 2.0, 0.0, -0.0, 7.25]).unwrap());
        let c = g.add(
            OpKind::Conv2D,
            "conv",
            &[x, w],
            attrs! {
                "strides" => AttrValue::Int(1),
                "padding" => AttrValue::Str("same".into()),
                "kernel" => AttrValue::Ints(vec![1, 1]),
            },
        );
        let b = g.add_const("b", Tensor::from_f32(vec![3], vec![1.0, 2.0, 3.0]).unwrap().quantize().unwrap());
        let f = g.add(OpKind::BiasAdd, "bias", &[c, b], attrs! {});
        let bn = g.add(OpKind::Relu, "relu", &[f], attrs! { "relu" => AttrValue::Bool(true), "eps" => AttrValue::Float(1e-3) });
        g.outputs = vec![bn];
        g
    }

    #[test]
    fn round_trip_and_canonical_bytes() {
        let g = small_graph();
        let bytes = to_bytes(&g);
        let (back, size) = from_bytes(&bytes).unwrap();
        assert_eq!(back, g);
        for (a, b) in g.nodes.values().zip(back.nodes.values()) {
            if let (Some(x), Some(y)) = (&a.payload, &b.payload) {
                assert!(x.bitwise_eq(y));
            }
        }
        assert_eq!(to_bytes(&back), bytes);
        assert_eq!(size, measure(&g));
        assert_eq!(size.total, bytes.len());
        assert_eq!(size.payload, 6 * 4 + 3);
        assert_eq!(size.payload + size.structure, size.total);
    }

    #[test]
    fn distinct_errors() {
        let bytes = to_bytes(&small_graph());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Model(ModelFileError::BadMagic(_)))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(from_bytes(&bad), Err(Error::Model(ModelFileError::VersionMismatch(2)))));

        let mut bad = bytes.clone();
        let last_payload = bytes.len() - 5;
        bad[last_payload] ^= 0xff;
        assert!(matches!(
            from_bytes(&bad),
            Err(Error::Model(ModelFileError::Checksum { section: "blobs", .. }))
        ));

        let mut bad = bytes.clone();
        bad[20] ^= 0x01;
        assert!(matches!(
            from_bytes(&bad),
            Err(Error::Model(ModelFileError::Checksum { section: "header", .. }))
        ));

        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(from_bytes(&bytes[..cut]), Err(Error::Model(ModelFileError::Truncated { .. }))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn file_round_trip_and_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sgm");
        let g = small_graph();
        let n = save(&g, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len() as usize, n);
        assert_eq!(load(&p).unwrap(), g);
        let s = model_size(&p).unwrap();
        assert_eq!(s.total, n);
        assert_eq!(s.payload, g.payload_bytes());
    }
}
