//! Versioned, checksummed model file.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"EDGEOPT\0"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      8     header length H, u64 little-endian
//! 20      H     UTF-8 JSON header
//! 20+H    B     weight blob, B = header.blob.length
//! ```
//!
//! The header describes topology, attributes and quantization parameters;
//! every tensor is a `(dtype, shape, offset, length)` reference into the
//! blob. f32 and i32 values are stored little-endian, u8 values as raw bytes.
//! `header.blob.sha256` is the hex SHA-256 of the blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Graph, GraphRole, InputSpec, LayerQuant, LayerSpec, Op};
use crate::error::{Error, Result};
use crate::quant::QuantParams;
use crate::tensor::{DType, Tensor, TensorData};

pub const MAGIC: &[u8; 8] = b"EDGEOPT\0";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 20;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    name: String,
    role: GraphRole,
    num_classes: usize,
    input: InputSpec,
    output: String,
    layers: Vec<LayerHeader>,
    blob: BlobInfo,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobInfo {
    length: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    name: String,
    op: Op,
    inputs: Vec<String>,
    output: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    weight: Option<TensorRef>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    bias: Option<TensorRef>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    quant: Option<QuantHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
enum QuantHeader {
    Static {
        inputs: Vec<QuantParams>,
        output: QuantParams,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        bias_i32: Option<BlobRef>,
    },
    Dynamic,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRef {
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    quant: Option<QuantParams>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BlobRef {
    offset: u64,
    length: u64,
}

struct BlobWriter(Vec<u8>);

impl BlobWriter {
    fn tensor(&mut self, t: &Tensor) -> TensorRef {
        let offset = self.0.len() as u64;
        match t.data() {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| self.0.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8 { values, .. } => self.0.extend_from_slice(values),
        }
        TensorRef {
            dtype: t.dtype(),
            shape: t.shape().to_vec(),
            offset,
            length: self.0.len() as u64 - offset,
            quant: t.quant(),
        }
    }

    fn i32s(&mut self, v: &[i32]) -> BlobRef {
        let offset = self.0.len() as u64;
        v.iter()
            .for_each(|x| self.0.extend_from_slice(&x.to_le_bytes()));
        BlobRef {
            offset,
            length: self.0.len() as u64 - offset,
        }
    }
}

/// Serializes `graph` into the on-disk byte layout.
pub fn to_bytes(graph: &Graph) -> Result<Vec<u8>> {
    let mut blob = BlobWriter(Vec::new());
    let layers = graph
        .layers
        .iter()
        .map(|l| LayerHeader {
            name: l.name.clone(),
            op: l.op.clone(),
            inputs: l.inputs.clone(),
            output: l.output.clone(),
            weight: l.weight.as_ref().map(|t| blob.tensor(t)),
            bias: l.bias.as_ref().map(|t| blob.tensor(t)),
            quant: l.quant.as_ref().map(|q| match q {
                LayerQuant::Static {
                    inputs,
                    output,
                    bias_i32,
                } => QuantHeader::Static {
                    inputs: inputs.clone(),
                    output: *output,
                    bias_i32: bias_i32.as_ref().map(|b| blob.i32s(b)),
                },
                LayerQuant::Dynamic => QuantHeader::Dynamic,
            }),
        })
        .collect();
    let blob = blob.0;
    let header = Header {
        format_version: FORMAT_VERSION,
        name: graph.name.clone(),
        role: graph.role,
        num_classes: graph.num_classes,
        input: graph.input.clone(),
        output: graph.output.clone(),
        layers,
        blob: BlobInfo {
            length: blob.len() as u64,
            sha256: hex::encode(Sha256::digest(&blob)),
        },
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn slice(blob: &[u8], offset: u64, length: u64) -> Result<&[u8]> {
    let (start, end) = (offset as usize, (offset + length) as usize);
    blob.get(start..end)
        .ok_or_else(|| Error::MalformedModel(format!("blob range {start}..{end} out of bounds")))
}

fn read_tensor(blob: &[u8], r: &TensorRef) -> Result<Tensor> {
    let bytes = slice(blob, r.offset, r.length)?;
    match (r.dtype, r.quant) {
        (DType::F32, None) => {
            if bytes.len() % 4 != 0 {
                return Err(Error::MalformedModel(
                    "f32 tensor length not a multiple of 4".into(),
                ));
            }
            let v = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::from_f32(r.shape.clone(), v)
        }
        (DType::U8, Some(qp)) => Tensor::from_u8(r.shape.clone(), bytes.to_vec(), qp),
        _ => Err(Error::MalformedModel(
            "u8 tensors need quant params, f32 tensors none".into(),
        )),
    }
}

/// Parses the on-disk byte layout.
pub fn from_bytes(bytes: &[u8]) -> Result<Graph> {
    if bytes.len() < PREAMBLE {
        return Err(Error::MalformedModel("file shorter than preamble".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::MalformedModel("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or(Error::ChecksumMismatch)?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::MalformedModel(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let blob = &bytes[header_end..];
    if blob.len() as u64 != header.blob.length
        || hex::encode(Sha256::digest(blob)) != header.blob.sha256
    {
        return Err(Error::ChecksumMismatch);
    }
    let layers = header
        .layers
        .into_iter()
        .map(|l| {
            let quant = match l.quant {
                None => None,
                Some(QuantHeader::Dynamic) => Some(LayerQuant::Dynamic),
                Some(QuantHeader::Static {
                    inputs,
                    output,
                    bias_i32,
                }) => {
                    let bias_i32 = bias_i32
                        .map(|r| {
                            let b = slice(blob, r.offset, r.length)?;
                            Ok::<_, Error>(
                                b.chunks_exact(4)
                                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                                    .collect(),
                            )
                        })
                        .transpose()?;
                    Some(LayerQuant::Static {
                        inputs,
                        output,
                        bias_i32,
                    })
                }
            };
            Ok(LayerSpec {
                name: l.name,
                op: l.op,
                inputs: l.inputs,
                output: l.output,
                weight: l
                    .weight
                    .as_ref()
                    .map(|r| read_tensor(blob, r))
                    .transpose()?,
                bias: l.bias.as_ref().map(|r| read_tensor(blob, r)).transpose()?,
                quant,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let graph = Graph {
        name: header.name,
        role: header.role,
        input: header.input,
        layers,
        output: header.output,
        num_classes: header.num_classes,
    };
    graph.validate()?;
    Ok(graph)
}

/// Writes `graph` to `path`; returns the number of bytes written.
pub fn save_model(graph: &Graph, path: impl AsRef<Path>) -> Result<u64> {
    graph.validate()?;
    let bytes = to_bytes(graph)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Graph> {
    from_bytes(&fs::read(path)?)
}

/// Serialized size in bytes.
pub fn model_bytes(graph: &Graph) -> Result<u64> {
    Ok(to_bytes(graph)?.len() as u64)
}
