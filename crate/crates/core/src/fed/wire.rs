//! Little-endian upload format and payload accounting.
//!
//! Header: `u32 magic, u32 round, u32 client_id, u16 tensor_count`; then per
//! tensor `u16 name_id, u32 len, f32 scale, i32 zero_point` followed by the
//! codes (`i8`, or `i32` for masked uploads). `name_id` indexes the schema.

use serde::Serialize;

use super::{FedError, QuantizedDelta, QuantizedTensor, Result};
use crate::model::ParamGroup;
use crate::secure::{MaskedTensor, MaskedUpload};

pub const MAGIC_DELTA: u32 = 0x00FE_DC17;
/// Same layout with flag bit 0 of the top byte set and 32-bit codes.
pub const MAGIC_MASKED: u32 = 0x01FE_DC17;

/// Ordered tensor names and shapes shared by sender and receiver.
pub type Schema = Vec<(String, Vec<usize>)>;

const HEADER: usize = 14;
const TENSOR_HEADER: usize = 14;

struct Meta<'a> {
    name: &'a str,
    len: usize,
    scale: f32,
    zero_point: i32,
}

fn write_header(
    out: &mut Vec<u8>,
    magic: u32,
    round: u32,
    client: u32,
    count: usize,
) -> Result<()> {
    let count =
        u16::try_from(count).map_err(|_| FedError::Wire(format!("{count} tensors exceed u16")))?;
    out.extend_from_slice(&magic.to_le_bytes());
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&client.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    Ok(())
}

fn write_meta(out: &mut Vec<u8>, schema: &Schema, m: &Meta) -> Result<()> {
    let id = schema
        .iter()
        .position(|(n, _)| n == m.name)
        .ok_or_else(|| FedError::Wire(format!("tensor {} not in schema", m.name)))?;
    let want: usize = schema[id].1.iter().product();
    if want != m.len {
        return Err(FedError::Wire(format!(
            "{} has {} codes, schema says {want}",
            m.name, m.len
        )));
    }
    out.extend_from_slice(&(id as u16).to_le_bytes());
    out.extend_from_slice(&(m.len as u32).to_le_bytes());
    out.extend_from_slice(&m.scale.to_le_bytes());
    out.extend_from_slice(&m.zero_point.to_le_bytes());
    Ok(())
}

pub fn encode_delta(q: &QuantizedDelta, schema: &Schema) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER + q.tensors.len() * TENSOR_HEADER + q.code_bytes());
    write_header(&mut out, MAGIC_DELTA, q.round, q.client_id, q.tensors.len())?;
    for t in &q.tensors {
        let meta = Meta {
            name: &t.name,
            len: t.codes.len(),
            scale: t.scale,
            zero_point: t.zero_point,
        };
        write_meta(&mut out, schema, &meta)?;
        out.extend(t.codes.iter().map(|&c| c as u8));
    }
    Ok(out)
}

pub fn encode_masked(u: &MaskedUpload, schema: &Schema) -> Result<Vec<u8>> {
    let n: usize = u.tensors.iter().map(|t| t.codes.len()).sum();
    let mut out = Vec::with_capacity(HEADER + u.tensors.len() * TENSOR_HEADER + 4 * n);
    write_header(
        &mut out,
        MAGIC_MASKED,
        u.round,
        u.client_id,
        u.tensors.len(),
    )?;
    for t in &u.tensors {
        let meta = Meta {
            name: &t.name,
            len: t.codes.len(),
            scale: t.scale,
            zero_point: t.zero_point,
        };
        write_meta(&mut out, schema, &meta)?;
        for c in &t.codes {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| FedError::Wire(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Name, shape, scale, zero point and raw code bytes.
type RawTensor<'a> = (String, Vec<usize>, f32, i32, &'a [u8]);

struct Decoded<'a> {
    round: u32,
    client: u32,
    tensors: Vec<RawTensor<'a>>,
}

fn decode_raw<'a>(
    bytes: &'a [u8],
    schema: &Schema,
    magic: u32,
    width: usize,
) -> Result<Decoded<'a>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let m = r.u32()?;
    if m != magic {
        return Err(FedError::Wire(format!(
            "bad magic {m:#010x}, want {magic:#010x}"
        )));
    }
    let round = r.u32()?;
    let client = r.u32()?;
    let count = r.u16()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u16()? as usize;
        let len = r.u32()? as usize;
        let scale = f32::from_bits(r.u32()?);
        let zero_point = r.u32()? as i32;
        let (name, shape) = schema.get(id).ok_or_else(|| {
            FedError::Wire(format!("name id {id} outside schema of {}", schema.len()))
        })?;
        if shape.iter().product::<usize>() != len {
            return Err(FedError::Wire(format!(
                "{name}: length {len} does not match shape {shape:?}"
            )));
        }
        let codes = r.take(
            len.checked_mul(width)
                .ok_or_else(|| FedError::Wire("length overflow".into()))?,
        )?;
        tensors.push((name.clone(), shape.clone(), scale, zero_point, codes));
    }
    if r.pos != bytes.len() {
        return Err(FedError::Wire(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Decoded {
        round,
        client,
        tensors,
    })
}

pub fn decode_delta(bytes: &[u8], schema: &Schema) -> Result<QuantizedDelta> {
    let d = decode_raw(bytes, schema, MAGIC_DELTA, 1)?;
    Ok(QuantizedDelta {
        round: d.round,
        client_id: d.client,
        tensors: d
            .tensors
            .into_iter()
            .map(|(name, shape, scale, zero_point, raw)| QuantizedTensor {
                name,
                shape,
                scale,
                zero_point,
                codes: raw.iter().map(|&b| b as i8).collect(),
            })
            .collect(),
    })
}

pub fn decode_masked(bytes: &[u8], schema: &Schema) -> Result<MaskedUpload> {
    let d = decode_raw(bytes, schema, MAGIC_MASKED, 4)?;
    Ok(MaskedUpload {
        round: d.round,
        client_id: d.client,
        tensors: d
            .tensors
            .into_iter()
            .map(|(name, shape, scale, zero_point, raw)| MaskedTensor {
                name,
                shape,
                scale,
                zero_point,
                codes: raw
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentBytes {
    pub component: String,
    pub params: usize,
    pub bytes: usize,
    pub mb: f64,
}

/// Upload size broken down by parameter group; MB means 10^6 bytes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PayloadReport {
    pub components: Vec<ComponentBytes>,
    pub overhead_bytes: usize,
    pub overhead_mb: f64,
    pub total_bytes: usize,
    pub total_mb: f64,
}

impl PayloadReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("payload report serializes")
    }
}

const MB: f64 = 1e6;

/// One byte per uploaded parameter plus a fixed overhead.
pub fn account_payload(sizes: &[(ParamGroup, usize)], overhead_bytes: usize) -> PayloadReport {
    let components: Vec<ComponentBytes> = sizes
        .iter()
        .map(|&(g, n)| ComponentBytes {
            component: g.label().to_string(),
            params: n,
            bytes: n,
            mb: n as f64 / MB,
        })
        .collect();
    let total_bytes = components.iter().map(|c| c.bytes).sum::<usize>() + overhead_bytes;
    PayloadReport {
        components,
        overhead_bytes,
        overhead_mb: overhead_bytes as f64 / MB,
        total_bytes,
        total_mb: total_bytes as f64 / MB,
    }
}

/// Parameter counts per uploaded group in a schema.
pub(crate) fn group_sizes(schema: &Schema) -> Vec<(ParamGroup, usize)> {
    [
        ParamGroup::DaeAdapters,
        ParamGroup::Head,
        ParamGroup::TokenEmbeddings,
    ]
    .into_iter()
    .map(|g| {
        let n = schema
            .iter()
            .filter(|(name, _)| ParamGroup::of(name) == g)
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        (g, n)
    })
    .collect()
}
