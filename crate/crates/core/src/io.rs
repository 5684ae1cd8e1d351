//! Binary weight archives.
//!
//! Layout: the 4-byte magic `C2A1`, a little-endian `u32` header length, a
//! UTF-8 JSON header padded with spaces so the payload starts on a 64-byte
//! boundary, then the payload. Tensors are stored row-major, little-endian,
//! each at a 64-byte aligned offset relative to the payload start.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionHead, MhsaWeights, RelativeBiasTable};
use crate::construction::{BoundaryMode, ConvertedModel};
use crate::conv::ConvKernel;
use crate::error::{Error, Result};
use crate::scalar::{DType, Real};
use crate::tensor::Matrix;
use crate::two_phase::{AttnClassifier, ConvClassifier, LinearHead};

pub const MAGIC: &[u8; 4] = b"C2A1";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGNMENT: usize = 64;

/// Kind of model stored in an archive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ModelKind {
    Kernel,
    Mhsa,
    Converted,
    ConvClassifier,
    AttnClassifier,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Kernel => "kernel",
            ModelKind::Mhsa => "mhsa",
            ModelKind::Converted => "converted",
            ModelKind::ConvClassifier => "convClassifier",
            ModelKind::AttnClassifier => "attnClassifier",
        }
    }
}

/// Any model that can be archived.
#[derive(Clone, Debug, PartialEq)]
pub enum Model<T> {
    Kernel(ConvKernel<T>),
    Mhsa(MhsaWeights<T>),
    Converted(ConvertedModel<T>),
    ConvClassifier(ConvClassifier<T>),
    AttnClassifier(AttnClassifier<T>),
}

impl<T: Real> Model<T> {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Kernel(_) => ModelKind::Kernel,
            Model::Mhsa(_) => ModelKind::Mhsa,
            Model::Converted(_) => ModelKind::Converted,
            Model::ConvClassifier(_) => ModelKind::ConvClassifier,
            Model::AttnClassifier(_) => ModelKind::AttnClassifier,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

/// Model hyperparameters; fields that do not apply to a kind are `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    #[serde(rename = "P")]
    pub patch: Option<usize>,
    #[serde(rename = "K")]
    pub kernel_size: Option<usize>,
    #[serde(rename = "D_in")]
    pub in_channels: Option<usize>,
    #[serde(rename = "D_out")]
    pub out_channels: Option<usize>,
    #[serde(rename = "N_H")]
    pub num_heads: Option<usize>,
    #[serde(rename = "M")]
    pub bias_scale: Option<f64>,
    #[serde(rename = "boundaryMode")]
    pub boundary: Option<BoundaryMode>,
    /// Relative offset of each head, in head order.
    #[serde(rename = "headOffsetOrder")]
    pub head_offsets: Option<Vec<[isize; 2]>>,
    /// Phantom rings of an attention classifier.
    #[serde(rename = "rings", default, skip_serializing_if = "Option::is_none")]
    pub rings: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub version: u32,
    pub dtype: DType,
    pub kind: ModelKind,
    pub tensors: Vec<TensorEntry>,
    pub metadata: Metadata,
}

struct Tensor<'a, T> {
    name: String,
    shape: Vec<usize>,
    data: &'a [T],
}

fn tensor<'a, T>(name: impl Into<String>, shape: Vec<usize>, data: &'a [T]) -> Tensor<'a, T> {
    Tensor {
        name: name.into(),
        shape,
        data,
    }
}

fn mhsa_tensors<'a, T: Real>(w: &'a MhsaWeights<T>, out: &mut Vec<Tensor<'a, T>>) {
    let shape = |m: &Matrix<T>| vec![m.rows(), m.cols()];
    for (k, h) in w.heads().iter().enumerate() {
        out.push(tensor(format!("heads.{k}.wq"), shape(&h.w_q), h.w_q.as_slice()));
        out.push(tensor(format!("heads.{k}.wk"), shape(&h.w_k), h.w_k.as_slice()));
        out.push(tensor(format!("heads.{k}.wv"), shape(&h.w_v), h.w_v.as_slice()));
        let (r, c) = h.bias.shape();
        out.push(tensor(format!("heads.{k}.bias"), vec![r, c], h.bias.values()));
    }
    out.push(tensor("wo", shape(w.w_o()), w.w_o().as_slice()));
}

fn kernel_tensor<T: Real>(k: &ConvKernel<T>) -> Tensor<'_, T> {
    tensor(
        "kernel",
        vec![k.size(), k.size(), k.in_channels(), k.out_channels()],
        k.weights(),
    )
}

fn head_tensors<'a, T: Real>(h: &'a LinearHead<T>, out: &mut Vec<Tensor<'a, T>>) {
    out.push(tensor(
        "classifier.weight",
        vec![h.weight.rows(), h.weight.cols()],
        h.weight.as_slice(),
    ));
    out.push(tensor("classifier.bias", vec![h.bias.len()], &h.bias));
}

fn kernel_meta<T: Real>(k: &ConvKernel<T>) -> Metadata {
    Metadata {
        kernel_size: Some(k.size()),
        in_channels: Some(k.in_channels()),
        out_channels: Some(k.out_channels()),
        ..Metadata::default()
    }
}

fn layout<T: Real>(model: &Model<T>) -> (Vec<Tensor<'_, T>>, Metadata) {
    let mut tensors = Vec::new();
    let meta = match model {
        Model::Kernel(k) => {
            tensors.push(kernel_tensor(k));
            kernel_meta(k)
        }
        Model::Mhsa(w) => {
            mhsa_tensors(w, &mut tensors);
            Metadata {
                num_heads: Some(w.num_heads()),
                ..Metadata::default()
            }
        }
        Model::Converted(m) => {
            mhsa_tensors(m.weights(), &mut tensors);
            Metadata {
                patch: Some(m.patch()),
                kernel_size: Some(m.kernel_size()),
                in_channels: Some(m.in_channels()),
                out_channels: Some(m.out_channels()),
                num_heads: Some(m.num_heads()),
                bias_scale: Some(m.bias_scale()),
                boundary: Some(m.boundary()),
                head_offsets: Some(m.offsets().offsets().iter().map(|&(a, b)| [a, b]).collect()),
                rings: None,
            }
        }
        Model::ConvClassifier(c) => {
            tensors.push(kernel_tensor(&c.kernel));
            head_tensors(&c.head, &mut tensors);
            kernel_meta(&c.kernel)
        }
        Model::AttnClassifier(a) => {
            mhsa_tensors(&a.mhsa, &mut tensors);
            head_tensors(&a.head, &mut tensors);
            Metadata {
                patch: Some(a.patch),
                in_channels: Some(a.in_channels()),
                out_channels: Some(a.out_channels()),
                num_heads: Some(a.mhsa.num_heads()),
                boundary: Some(a.boundary),
                rings: Some(a.rings),
                ..Metadata::default()
            }
        }
    };
    (tensors, meta)
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

/// Serializes `model`. Non-finite values are rejected.
pub fn to_bytes<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let (tensors, metadata) = layout(model);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for t in &tensors {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("tensor {} has non-finite values", t.name)));
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            byte_offset: offset,
        });
        offset = align(offset + t.data.len() * T::DTYPE.size_of());
    }
    let header = Header {
        version: FORMAT_VERSION,
        dtype: T::DTYPE,
        kind: model.kind(),
        tensors: entries,
        metadata,
    };
    let mut json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let payload_start = align(8 + json.len());
    json.resize(payload_start - 8, b' ');
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Format("header too large".into()))?;

    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (t, e) in tensors.iter().zip(&header.tensors) {
        out.resize(payload_start + e.byte_offset, 0);
        for v in t.data {
            v.write_le(&mut out);
        }
    }
    out.resize(payload_start + offset, 0);
    Ok(out)
}

/// Parses and returns the header along with the payload slice.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Format("file too short for an archive".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic (not a C2A1 archive)".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let text = std::str::from_utf8(&bytes[8..end]).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let version = serde_json::from_str::<serde_json::Value>(text)
        .map_err(|e| Error::Format(format!("header JSON: {e}")))?
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format("header has no version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_str(text).map_err(|e| Error::Format(format!("header: {e}")))?;
    Ok((header, &bytes[end..]))
}

struct Reader<'a> {
    header: &'a Header,
    payload: &'a [u8],
}

impl Reader<'_> {
    fn get<T: Real>(&self, name: &str, shape: &[usize]) -> Result<Vec<T>> {
        let e = self
            .header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if e.shape != shape {
            return Err(Error::Format(format!("tensor {name} has shape {:?}, expected {shape:?}", e.shape)));
        }
        if e.byte_offset % ALIGNMENT != 0 {
            return Err(Error::Format(format!("tensor {name} is not {ALIGNMENT}-byte aligned")));
        }
        let size = T::DTYPE.size_of();
        let n: usize = shape.iter().product();
        let end = e.byte_offset + n * size;
        if end > self.payload.len() {
            return Err(Error::Format(format!("truncated payload in tensor {name}")));
        }
        Ok(self.payload[e.byte_offset..end].chunks_exact(size).map(T::read_le).collect())
    }

    fn shape(&self, name: &str) -> Result<&[usize]> {
        self.header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.shape.as_slice())
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    fn matrix<T: Real>(&self, name: &str) -> Result<Matrix<T>> {
        let s = self.shape(name)?.to_vec();
        if s.len() != 2 {
            return Err(Error::Format(format!("tensor {name} must be 2-D")));
        }
        Matrix::from_vec(s[0], s[1], self.get(name, &s)?)
    }

    fn kernel<T: Real>(&self) -> Result<ConvKernel<T>> {
        let s = self.shape("kernel")?.to_vec();
        if s.len() != 4 || s[0] != s[1] {
            return Err(Error::Format("kernel tensor must have shape [K, K, D_in, D_out]".into()));
        }
        ConvKernel::new(s[0], s[2], s[3], self.get("kernel", &s)?)
    }

    fn mhsa<T: Real>(&self) -> Result<MhsaWeights<T>> {
        let mut heads = Vec::new();
        while self.shape(&format!("heads.{}.wq", heads.len())).is_ok() {
            let k = heads.len();
            let bs = self.shape(&format!("heads.{k}.bias"))?.to_vec();
            if bs.len() != 2 || bs[0] % 2 == 0 || bs[1] % 2 == 0 {
                return Err(Error::Format(format!("head {k} bias table must have odd 2-D shape")));
            }
            heads.push(AttentionHead {
                w_q: self.matrix(&format!("heads.{k}.wq"))?,
                w_k: self.matrix(&format!("heads.{k}.wk"))?,
                w_v: self.matrix(&format!("heads.{k}.wv"))?,
                bias: RelativeBiasTable::new(bs[0] / 2, bs[1] / 2, self.get(&format!("heads.{k}.bias"), &bs)?)?,
            });
        }
        MhsaWeights::new(heads, self.matrix("wo")?)
    }

    fn head<T: Real>(&self) -> Result<LinearHead<T>> {
        let weight = self.matrix("classifier.weight")?;
        let n = weight.cols();
        LinearHead::new(weight, self.get("classifier.bias", &[n])?)
    }
}

fn required<V>(v: Option<V>, field: &str) -> Result<V> {
    v.ok_or_else(|| Error::Format(format!("metadata field {field} is required")))
}

fn check_meta(field: &str, stored: Option<usize>, actual: usize) -> Result<()> {
    match stored {
        Some(s) if s != actual => Err(Error::Invariant(format!("metadata {field} = {s} but tensors imply {actual}"))),
        _ => Ok(()),
    }
}

/// Parses an archive of element type `T` and validates its invariants.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let (header, payload) = read_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "archive holds {} data, requested {}",
            header.dtype.name(),
            T::DTYPE.name()
        )));
    }
    let r = Reader {
        header: &header,
        payload,
    };
    let meta = &header.metadata;
    let model = match header.kind {
        ModelKind::Kernel => {
            let k = r.kernel()?;
            check_meta("K", meta.kernel_size, k.size())?;
            Model::Kernel(k)
        }
        ModelKind::Mhsa => {
            let w = r.mhsa()?;
            check_meta("N_H", meta.num_heads, w.num_heads())?;
            Model::Mhsa(w)
        }
        ModelKind::Converted => {
            let w = r.mhsa()?;
            check_meta("N_H", meta.num_heads, w.num_heads())?;
            let m = ConvertedModel::from_parts(
                w,
                required(meta.patch, "P")?,
                required(meta.kernel_size, "K")?,
                required(meta.in_channels, "D_in")?,
                required(meta.out_channels, "D_out")?,
                required(meta.bias_scale, "M")?,
                required(meta.boundary, "boundaryMode")?,
            )?;
            let stored = required(meta.head_offsets.clone(), "headOffsetOrder")?;
            let expected: Vec<[isize; 2]> = m.offsets().offsets().iter().map(|&(a, b)| [a, b]).collect();
            if stored != expected {
                return Err(Error::Invariant("headOffsetOrder does not match the row-major offset set".into()));
            }
            Model::Converted(m)
        }
        ModelKind::ConvClassifier => {
            let k = r.kernel()?;
            check_meta("K", meta.kernel_size, k.size())?;
            Model::ConvClassifier(ConvClassifier::new(k, r.head()?)?)
        }
        ModelKind::AttnClassifier => {
            let w = r.mhsa()?;
            check_meta("N_H", meta.num_heads, w.num_heads())?;
            Model::AttnClassifier(AttnClassifier::new(
                w,
                r.head()?,
                required(meta.patch, "P")?,
                required(meta.boundary, "boundaryMode")?,
                required(meta.rings, "rings")?,
            )?)
        }
    };
    Ok(model)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::write(path.as_ref(), bytes).map_err(io_err(path.as_ref()))
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let bytes = std::fs::read(path.as_ref()).map_err(io_err(path.as_ref()))?;
    from_bytes(&bytes)
}

/// Reads only the header of an archive on disk.
pub fn peek(path: impl AsRef<Path>) -> Result<Header> {
    let bytes = std::fs::read(path.as_ref()).map_err(io_err(path.as_ref()))?;
    Ok(read_header(&bytes)?.0)
}
