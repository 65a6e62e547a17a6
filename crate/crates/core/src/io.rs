//! The `FFWT` weight container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "FFWT"
//! 4       4     version, u32 little-endian (currently 1)
//! 8       8     header_len, u64 little-endian
//! 16      n     header: compact UTF-8 JSON with sorted keys
//! p       ...   payload, p = 16 + header_len rounded up to 64
//! ```
//!
//! The header holds `config` (the model config) and `tensors`, a map from
//! tensor name to `{dtype, shape, offset, nbytes}` plus `scale` for int8
//! tensors. Offsets are relative to the payload start and 64-byte aligned;
//! tensor bytes are row-major little-endian. Tensor names are
//! `<layer path>.<field>` with fields `weight`/`bias` (linear, conv),
//! `gamma`/`beta` (LayerNorm), `gamma`/`beta`/`running_mean`/`running_var`
//! (BatchNorm). Any other top-level header key is carried through untouched.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, FormatError, Result};
use crate::model::{layout, Model, ModelConfig, Param, ParamShape, WeightStore};
use crate::quant::{QuantizedDepthwiseConv, QuantizedLinear};
use crate::tensor::{
    BatchNormParams, Conv2dParams, DType, DepthwiseConvParams, Element, LayerNormParams,
    LinearParams, Tensor,
};

pub const MAGIC: [u8; 4] = *b"FFWT";
pub const VERSION: u32 = 1;
pub const ALIGN: u64 = 64;
const PREAMBLE: u64 = 16;

fn align(n: u64) -> u64 {
    n.div_ceil(ALIGN) * ALIGN
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
    scale: Option<f32>,
}

fn float_entry<E: Element>(name: String, t: &Tensor<E>) -> Entry {
    let mut bytes = Vec::with_capacity(t.len() * E::DTYPE.size());
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    Entry {
        name,
        dtype: E::DTYPE,
        shape: t.shape().to_vec(),
        bytes,
        scale: None,
    }
}

fn int8_entry(name: String, shape: Vec<usize>, q: &[i8], scale: f32) -> Entry {
    Entry {
        name,
        dtype: DType::I8,
        shape,
        bytes: q.iter().map(|&v| v as u8).collect(),
        scale: Some(scale),
    }
}

fn entries<E: Element>(model: &Model<E>) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for spec in layout(&model.config) {
        let p = &spec.path;
        let param = model
            .weights
            .get(p)
            .ok_or_else(|| Error::WeightStore(format!("missing `{p}`")))?;
        let mut float = |field: &str, t: &Tensor<E>| out.push(float_entry(format!("{p}.{field}"), t));
        match param {
            Param::Linear(l) => {
                float("weight", l.weight());
                float("bias", l.bias());
            }
            Param::DepthwiseConv(c) => {
                float("weight", &c.weight);
                float("bias", &c.bias);
            }
            Param::Conv2d(c) => {
                float("weight", c.weight());
                float("bias", c.bias());
            }
            Param::LayerNorm(n) => {
                float("gamma", &n.gamma);
                float("beta", &n.beta);
            }
            Param::BatchNorm(n) => {
                float("gamma", &n.gamma);
                float("beta", &n.beta);
                float("running_mean", &n.running_mean);
                float("running_var", &n.running_var);
            }
            Param::Embedding(t) => float("weight", t),
            Param::QuantLinear(q) => {
                out.push(int8_entry(format!("{p}.weight"), vec![q.out_dim, q.in_dim], &q.q_weight, q.w_scale));
                out.push(float_entry(format!("{p}.bias"), &q.bias));
            }
            Param::QuantDepthwiseConv(q) => {
                out.push(int8_entry(format!("{p}.weight"), vec![q.channels, q.kernel], &q.q_weight, q.w_scale));
                out.push(float_entry(format!("{p}.bias"), &q.bias));
            }
        }
    }
    Ok(out)
}

/// Serializes a model to container bytes. Identical models give identical
/// bytes.
pub fn to_bytes<E: Element>(model: &Model<E>) -> Result<Vec<u8>> {
    let entries = entries(model)?;
    let mut tensors = Map::new();
    let mut offsets = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for e in &entries {
        let nbytes = e.bytes.len() as u64;
        let mut rec = json!({
            "dtype": e.dtype.as_str(),
            "shape": e.shape,
            "offset": offset,
            "nbytes": nbytes,
        });
        if let Some(scale) = e.scale {
            rec["scale"] = json!(scale as f64);
        }
        tensors.insert(e.name.clone(), rec);
        offsets.push(offset);
        offset = align(offset + nbytes);
    }
    let mut header = Map::new();
    for (k, v) in &model.metadata {
        if k != "config" && k != "tensors" {
            header.insert(k.clone(), v.clone());
        }
    }
    header.insert("config".into(), serde_json::to_value(&model.config)?);
    header.insert("tensors".into(), Value::Object(tensors));
    let header = serde_json::to_vec(&canonical(Value::Object(header)))?;

    let payload_start = align(PREAMBLE + header.len() as u64) as usize;
    let mut out = Vec::with_capacity(payload_start + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (e, &off) in entries.iter().zip(&offsets) {
        out.resize(payload_start + off as usize, 0);
        out.extend_from_slice(&e.bytes);
    }
    Ok(out)
}

/// Rebuilds a value with every object's keys in sorted order.
fn canonical(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let sorted: BTreeMap<String, Value> = m.into_iter().map(|(k, v)| (k, canonical(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonical).collect()),
        other => other,
    }
}

#[derive(Clone, Debug)]
struct TensorRecord {
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
    scale: Option<f32>,
}

/// Parsed header of a container.
#[derive(Clone, Debug)]
pub struct Header {
    pub version: u32,
    pub config: ModelConfig,
    /// Raw JSON header bytes exactly as stored.
    pub raw: Vec<u8>,
    pub payload_offset: u64,
    tensors: BTreeMap<String, TensorRecord>,
    extra: BTreeMap<String, Value>,
}

impl Header {
    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }
}

fn truncated(what: impl Into<String>, needed: u64, available: u64) -> Error {
    FormatError::Truncated {
        what: what.into(),
        needed,
        available,
    }
    .into()
}

fn header_err(msg: impl Into<String>) -> Error {
    FormatError::Header(msg.into()).into()
}

fn parse_dtype(s: &str) -> Option<DType> {
    [DType::F32, DType::F64, DType::I8].into_iter().find(|d| d.as_str() == s)
}

/// Validates the preamble, header and tensor table of container bytes.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    let avail = bytes.len() as u64;
    if avail < 4 {
        return Err(truncated("magic", 4, avail));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic }.into());
    }
    if avail < PREAMBLE {
        return Err(truncated("preamble", PREAMBLE, avail));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = PREAMBLE
        .checked_add(header_len)
        .ok_or_else(|| header_err("header length overflows"))?;
    if avail < header_end {
        return Err(truncated("header", header_end, avail));
    }
    let raw = bytes[PREAMBLE as usize..header_end as usize].to_vec();
    let value: Value = serde_json::from_slice(&raw).map_err(|e| header_err(format!("invalid JSON: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(header_err("header is not a JSON object"));
    };
    let config: ModelConfig = serde_json::from_value(
        obj.remove("config").ok_or_else(|| header_err("missing `config`"))?,
    )
    .map_err(|e| header_err(format!("config: {e}")))?;
    let Some(Value::Object(table)) = obj.remove("tensors") else {
        return Err(header_err("missing `tensors` object"));
    };
    let payload_offset = align(header_end);
    let payload_len = avail.saturating_sub(payload_offset);

    let mut tensors = BTreeMap::new();
    for (name, rec) in table {
        let field = |k: &str| rec.get(k).ok_or_else(|| header_err(format!("`{name}` lacks `{k}`")));
        let dtype_name = field("dtype")?.as_str().unwrap_or_default();
        let dtype = parse_dtype(dtype_name).ok_or_else(|| FormatError::DType {
            name: name.clone(),
            found: dtype_name.to_string(),
            expected: "f32, f64 or i8".into(),
        })?;
        let shape: Vec<usize> = serde_json::from_value(field("shape")?.clone())
            .map_err(|e| header_err(format!("`{name}` shape: {e}")))?;
        let offset = field("offset")?.as_u64().ok_or_else(|| header_err(format!("`{name}` offset")))?;
        let nbytes = field("nbytes")?.as_u64().ok_or_else(|| header_err(format!("`{name}` nbytes")))?;
        let scale = rec.get("scale").and_then(Value::as_f64).map(|s| s as f32);
        let expected = (dtype.size() * shape.iter().product::<usize>()) as u64;
        if nbytes != expected {
            return Err(FormatError::SizeMismatch { name, nbytes, expected }.into());
        }
        if offset % ALIGN != 0 {
            return Err(FormatError::Misaligned { name, offset }.into());
        }
        if offset.saturating_add(nbytes) > payload_len {
            return Err(truncated(format!("tensor `{name}`"), payload_offset + offset + nbytes, avail));
        }
        if dtype == DType::I8 && !scale.is_some_and(|s| s.is_finite() && s > 0.0) {
            return Err(header_err(format!("int8 tensor `{name}` needs a positive `scale`")));
        }
        tensors.insert(
            name,
            TensorRecord {
                dtype,
                shape,
                offset,
                nbytes,
                scale,
            },
        );
    }
    let mut spans: Vec<(&String, u64, u64)> = tensors
        .iter()
        .filter(|(_, r)| r.nbytes > 0)
        .map(|(n, r)| (n, r.offset, r.offset + r.nbytes))
        .collect();
    spans.sort_by_key(|s| s.1);
    for w in spans.windows(2) {
        if w[1].1 < w[0].2 {
            return Err(FormatError::OffsetOverlap {
                first: w[0].0.clone(),
                second: w[1].0.clone(),
            }
            .into());
        }
    }
    Ok(Header {
        version,
        config,
        raw,
        payload_offset,
        tensors,
        extra: obj.into_iter().collect(),
    })
}

struct Reader<'a> {
    header: Header,
    payload: &'a [u8],
    used: usize,
}

impl<'a> Reader<'a> {
    fn record(&self, name: &str, dtype: DType, shape: &[usize]) -> Result<&TensorRecord> {
        let rec = self
            .header
            .tensors
            .get(name)
            .ok_or_else(|| Error::WeightStore(format!("container lacks tensor `{name}`")))?;
        if rec.dtype != dtype {
            return Err(FormatError::DType {
                name: name.to_string(),
                found: rec.dtype.as_str().into(),
                expected: dtype.as_str().into(),
            }
            .into());
        }
        if rec.shape != shape {
            return Err(Error::WeightStore(format!(
                "tensor `{name}` has shape {:?}, config expects {shape:?}",
                rec.shape
            )));
        }
        Ok(rec)
    }

    fn bytes(&self, rec: &TensorRecord) -> &'a [u8] {
        &self.payload[rec.offset as usize..(rec.offset + rec.nbytes) as usize]
    }

    fn float<E: Element>(&mut self, name: String, shape: &[usize]) -> Result<Tensor<E>> {
        let rec = self.record(&name, E::DTYPE, shape)?;
        let data = self
            .bytes(rec)
            .chunks_exact(E::DTYPE.size())
            .map(E::read_le)
            .collect();
        self.used += 1;
        Tensor::new(shape.to_vec(), data)
    }

    fn is_int8(&self, name: &str) -> bool {
        self.header.tensors.get(name).is_some_and(|r| r.dtype == DType::I8)
    }

    fn int8(&mut self, name: String, shape: &[usize]) -> Result<(Vec<i8>, f32)> {
        let rec = self.record(&name, DType::I8, shape)?;
        let data = self.bytes(rec).iter().map(|&b| b as i8).collect();
        let scale = rec.scale.expect("checked when parsing the header");
        self.used += 1;
        Ok((data, scale))
    }
}

/// Parses container bytes into a model of element type `E`.
pub fn from_bytes<E: Element>(bytes: &[u8]) -> Result<Model<E>> {
    let header = read_header(bytes)?;
    header.config.validate()?;
    let payload = &bytes[(header.payload_offset as usize).min(bytes.len())..];
    let mut r = Reader {
        header,
        payload,
        used: 0,
    };
    let config = r.header.config.clone();
    let eps = config.norm_eps;
    let mut store = WeightStore::new();
    for spec in layout(&config) {
        let p = spec.path;
        let param = match spec.shape {
            ParamShape::Linear { in_dim, out_dim } => {
                let w = format!("{p}.weight");
                if r.is_int8(&w) {
                    let (q_weight, w_scale) = r.int8(w, &[out_dim, in_dim])?;
                    Param::QuantLinear(QuantizedLinear {
                        q_weight,
                        out_dim,
                        in_dim,
                        w_scale,
                        bias: r.float(format!("{p}.bias"), &[out_dim])?,
                    })
                } else {
                    Param::Linear(LinearParams::new(
                        r.float(w, &[out_dim, in_dim])?,
                        r.float(format!("{p}.bias"), &[out_dim])?,
                    )?)
                }
            }
            ParamShape::DepthwiseConv { channels, kernel } => {
                let w = format!("{p}.weight");
                if r.is_int8(&w) {
                    let (q_weight, w_scale) = r.int8(w, &[channels, kernel])?;
                    Param::QuantDepthwiseConv(QuantizedDepthwiseConv {
                        q_weight,
                        channels,
                        kernel,
                        w_scale,
                        bias: r.float(format!("{p}.bias"), &[channels])?,
                    })
                } else {
                    Param::DepthwiseConv(DepthwiseConvParams::new(
                        r.float(w, &[channels, kernel])?,
                        r.float(format!("{p}.bias"), &[channels])?,
                    )?)
                }
            }
            ParamShape::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Param::Conv2d(Conv2dParams::new(
                r.float(format!("{p}.weight"), &[out_channels, kernel, kernel, in_channels])?,
                r.float(format!("{p}.bias"), &[out_channels])?,
                stride,
                padding,
            )?),
            ParamShape::LayerNorm { dim } => Param::LayerNorm(LayerNormParams::new(
                r.float(format!("{p}.gamma"), &[dim])?,
                r.float(format!("{p}.beta"), &[dim])?,
                eps,
            )?),
            ParamShape::BatchNorm { channels } => Param::BatchNorm(BatchNormParams::new(
                r.float(format!("{p}.gamma"), &[channels])?,
                r.float(format!("{p}.beta"), &[channels])?,
                r.float(format!("{p}.running_mean"), &[channels])?,
                r.float(format!("{p}.running_var"), &[channels])?,
                eps,
            )?),
            ParamShape::Embedding { vocab, dim } => {
                Param::Embedding(r.float(format!("{p}.weight"), &[vocab, dim])?)
            }
        };
        store.insert(p, param);
    }
    if r.used != r.header.tensors.len() {
        return Err(Error::WeightStore(format!(
            "container holds {} tensors, config uses {}",
            r.header.tensors.len(),
            r.used
        )));
    }
    let mut model = Model::new(config, store)?;
    model.metadata = r.header.extra;
    Ok(model)
}

pub fn save_model<E: Element>(model: &Model<E>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model<E: Element>(path: impl AsRef<Path>) -> Result<Model<E>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Flavor};

    fn tiny() -> Model {
        build_model(ModelConfig::tiny(Flavor::ConformerBn), 1).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = tiny();
        let bytes = to_bytes(&m).unwrap();
        let back: Model = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn layout_is_aligned_and_header_sorted() {
        let bytes = to_bytes(&tiny()).unwrap();
        let h = read_header(&bytes).unwrap();
        assert_eq!(h.payload_offset % ALIGN, 0);
        for r in h.tensors.values() {
            assert_eq!(r.offset % ALIGN, 0);
        }
        let text = std::str::from_utf8(&h.raw).unwrap();
        assert!(text.starts_with("{\"config\":{"));
        assert!(!text.contains(' '));
    }

    #[test]
    fn distinct_corruption_errors() {
        let bytes = to_bytes(&tiny()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            from_bytes::<f32>(&bad),
            Err(Error::Format(FormatError::VersionMismatch { found: 2, .. }))
        ));

        let bad = &bytes[..bytes.len() - 1];
        assert!(matches!(from_bytes::<f32>(bad), Err(Error::Format(FormatError::Truncated { .. }))));
        assert!(matches!(from_bytes::<f32>(&bytes[..10]), Err(Error::Format(FormatError::Truncated { .. }))));
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let bytes = to_bytes(&tiny()).unwrap();
        let h = read_header(&bytes).unwrap();
        let mut v: Value = serde_json::from_slice(&h.raw).unwrap();
        let tensors = v["tensors"].as_object_mut().unwrap();
        let names: Vec<String> = tensors.keys().cloned().collect();
        let first_offset = tensors[&names[0]]["offset"].clone();
        tensors.get_mut(&names[1]).unwrap()["offset"] = first_offset;
        let header = serde_json::to_vec(&v).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(align(out.len() as u64) as usize, 0);
        out.extend_from_slice(&bytes[h.payload_offset as usize..]);
        assert!(matches!(from_bytes::<f32>(&out), Err(Error::Format(FormatError::OffsetOverlap { .. }))));
    }

    #[test]
    fn unknown_header_keys_survive() {
        let mut m = tiny();
        m.metadata.insert("note".into(), json!({"b": 1, "a": [1, 2]}));
        let bytes = to_bytes(&m).unwrap();
        let back: Model = from_bytes(&bytes).unwrap();
        assert_eq!(back.metadata, m.metadata);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }
}
