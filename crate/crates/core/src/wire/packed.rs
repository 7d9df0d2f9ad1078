//! Bit-exact tensor serialization.
//!
//! ```text
//! offset  size  field
//! 0       4     tensor_id  u32
//! 4       4     step       u32
//! 8       1     role       u8   0 fwd_act, 1 bwd_grad, 2 lora_weights, 3 raw_f32
//! 9       1     granularity u8  0 tensor, 1 channel, 2 group, 3 token
//! 10      1     ndim       u8
//! 11      1     version    u8   1
//! 12      2     C          u16  unit count (0 for raw payloads)
//! 14      2     group      u16  entries per group (granularity 2), else 0
//! 16      4*ndim dims      u32 each
//! then C records of 9 bytes: wire_bits u8, zmin f32, delta f32
//! then the payload
//! then crc32 of every preceding byte, u32
//! ```
//!
//! Quantized payloads are unit-major: each unit's indices in increasing
//! flat-index order, packed least significant bit first at `wire_bits` each,
//! and every unit's stream padded to a whole byte. `lora_weights` and
//! `raw_f32` payloads are plain f32 values. All integers are little-endian.
//!
//! `tensor_id` carries the site index in its low 30 bits. Bit 31 marks a
//! delta-coded payload and bit 30 an evaluation pass with no backward.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::quant::{Granularity, QuantAxis, QuantPacket, UnitLayout};

pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 9;
pub const CRC_LEN: usize = 4;
pub const FORMAT_VERSION: u8 = 1;

pub const ID_DELTA: u32 = 1 << 31;
pub const ID_EVAL: u32 = 1 << 30;
pub const ID_MASK: u32 = ID_EVAL - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    FwdAct = 0,
    BwdGrad = 1,
    LoraWeights = 2,
    RawF32 = 3,
}

impl Role {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Role::FwdAct,
            1 => Role::BwdGrad,
            2 => Role::LoraWeights,
            3 => Role::RawF32,
            _ => return Err(Error::Framing(format!("unknown tensor role {v}"))),
        })
    }

    pub fn is_raw(self) -> bool {
        matches!(self, Role::LoraWeights | Role::RawF32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PackedMeta {
    pub tensor_id: u32,
    pub step: u32,
    pub role: Role,
}

/// A decoded tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Unpacked {
    Raw(Tensor),
    Quantized(QuantPacket),
}

fn granularity_code(layout: &UnitLayout) -> Result<(u8, u16)> {
    let group = |g: usize| u16::try_from(g).map_err(|_| Error::Invalid(format!("group size {g} exceeds u16")));
    match (layout.granularity, layout.axis) {
        (Granularity::Tensor, _) => Ok((0, 0)),
        (Granularity::Channel, QuantAxis::Channel) => Ok((1, 0)),
        (Granularity::Group(g), QuantAxis::Channel) => Ok((2, group(g)?)),
        (Granularity::Channel, QuantAxis::Token) => Ok((3, 0)),
        (Granularity::Group(_), QuantAxis::Token) => Err(Error::Invalid(
            "group granularity along the token axis has no wire encoding".into(),
        )),
    }
}

fn layout_from_code(code: u8, group: u16, shape: &[usize]) -> Result<UnitLayout> {
    let (g, axis) = match code {
        0 => (Granularity::Tensor, QuantAxis::Channel),
        1 => (Granularity::Channel, QuantAxis::Channel),
        2 => (Granularity::Group(group as usize), QuantAxis::Channel),
        3 => (Granularity::Channel, QuantAxis::Token),
        _ => return Err(Error::Framing(format!("unknown granularity code {code}"))),
    };
    UnitLayout::new(shape, g, axis).map_err(|e| Error::Framing(e.to_string()))
}

/// Elements per unit, without allocating.
fn unit_count(layout: &UnitLayout, numel: usize, u: usize) -> usize {
    if layout.units == 1 {
        return numel;
    }
    let outer = numel / layout.axis_len.max(1);
    let entries = (layout.axis_len - u * layout.group).min(layout.group);
    outer * entries
}

fn payload_len(layout: &UnitLayout, numel: usize, bits: impl Iterator<Item = u8>) -> usize {
    bits.enumerate()
        .map(|(u, w)| (unit_count(layout, numel, u) * w as usize).div_ceil(8))
        .sum()
}

/// Exact encoded size of a quantized tensor.
pub fn predicted_size(shape: &[usize], layout: &UnitLayout, wire_bits: &[u8]) -> usize {
    let numel: usize = shape.iter().product();
    HEADER_LEN
        + 4 * shape.len()
        + RECORD_LEN * layout.units
        + payload_len(layout, numel, wire_bits.iter().copied())
        + CRC_LEN
}

/// Exact encoded size of a raw f32 tensor.
pub fn predicted_size_raw(shape: &[usize]) -> usize {
    HEADER_LEN + 4 * shape.len() + 4 * shape.iter().product::<usize>() + CRC_LEN
}

fn header(out: &mut Vec<u8>, meta: PackedMeta, gran: u8, shape: &[usize], c: u16, group: u16) -> Result<()> {
    let ndim = u8::try_from(shape.len()).map_err(|_| Error::Invalid("too many dimensions".into()))?;
    out.extend_from_slice(&meta.tensor_id.to_le_bytes());
    out.extend_from_slice(&meta.step.to_le_bytes());
    out.extend_from_slice(&[meta.role as u8, gran, ndim, FORMAT_VERSION]);
    out.extend_from_slice(&c.to_le_bytes());
    out.extend_from_slice(&group.to_le_bytes());
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(())
}

fn finish(mut out: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Serializes already-computed indices; nothing is re-rounded.
pub fn pack(p: &QuantPacket, meta: PackedMeta) -> Result<Vec<u8>> {
    if meta.role.is_raw() {
        return Err(Error::Invalid(format!(
            "role {:?} carries raw f32, use pack_raw",
            meta.role
        )));
    }
    p.validate()?;
    let c = u16::try_from(p.layout.units).map_err(|_| Error::Invalid("more than 65535 units".into()))?;
    let (gran, group) = granularity_code(&p.layout)?;
    let numel = p.indices.len();
    let mut out = Vec::with_capacity(predicted_size(&p.shape, &p.layout, &p.wire_bits));
    header(&mut out, meta, gran, &p.shape, c, group)?;
    for u in 0..p.layout.units {
        out.push(p.wire_bits[u]);
        out.extend_from_slice(&p.zmin[u].to_le_bytes());
        out.extend_from_slice(&p.delta[u].to_le_bytes());
    }
    let base = out.len();
    // byte offset and bit cursor of every unit stream
    let mut cursor = Vec::with_capacity(p.layout.units);
    let mut off = base;
    for u in 0..p.layout.units {
        cursor.push((off, 0usize));
        off += (unit_count(&p.layout, numel, u) * p.wire_bits[u] as usize).div_ceil(8);
    }
    out.resize(off, 0);
    for (i, &n) in p.indices.iter().enumerate() {
        let u = p.layout.unit_of(i);
        let w = p.wire_bits[u] as usize;
        let (start, bit) = cursor[u];
        let shifted = n << (bit % 8);
        let first = start + bit / 8;
        for k in 0..(bit % 8 + w).div_ceil(8) {
            out[first + k] |= (shifted >> (8 * k)) as u8;
        }
        cursor[u].1 += w;
    }
    Ok(finish(out))
}

/// Serializes a full-precision tensor (`lora_weights` or `raw_f32`).
pub fn pack_raw(t: &Tensor, meta: PackedMeta) -> Result<Vec<u8>> {
    if !meta.role.is_raw() {
        return Err(Error::Invalid(format!(
            "role {:?} carries quantized indices, use pack",
            meta.role
        )));
    }
    let mut out = Vec::with_capacity(predicted_size_raw(t.shape()));
    header(&mut out, meta, 0, t.shape(), 0, 0)?;
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(finish(out))
}

struct Header {
    meta: PackedMeta,
    gran: u8,
    c: usize,
    group: u16,
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn read_f32(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn truncated(need: usize, have: usize) -> Error {
    Error::Framing(format!("packed tensor truncated: need {need} bytes, have {have}"))
}

/// Decodes a packed tensor. Sizes are checked from the header, then the
/// checksum, and only then is any output allocated.
pub fn unpack(buf: &[u8]) -> Result<(Unpacked, PackedMeta)> {
    if buf.len() < HEADER_LEN + CRC_LEN {
        return Err(truncated(HEADER_LEN + CRC_LEN, buf.len()));
    }
    let h = Header {
        meta: PackedMeta {
            tensor_id: read_u32(buf, 0),
            step: read_u32(buf, 4),
            role: Role::from_u8(buf[8])?,
        },
        gran: buf[9],
        c: u16::from_le_bytes([buf[12], buf[13]]) as usize,
        group: u16::from_le_bytes([buf[14], buf[15]]),
    };
    let ndim = buf[10] as usize;
    if buf[11] != FORMAT_VERSION {
        return Err(Error::Framing(format!("unsupported format version {}", buf[11])));
    }
    let dims_end = HEADER_LEN + 4 * ndim;
    if buf.len() < dims_end + CRC_LEN {
        return Err(truncated(dims_end + CRC_LEN, buf.len()));
    }
    let mut shape = [0usize; 255];
    let mut numel = 1usize;
    for (k, s) in shape.iter_mut().take(ndim).enumerate() {
        *s = read_u32(buf, HEADER_LEN + 4 * k) as usize;
        numel = numel
            .checked_mul(*s)
            .ok_or_else(|| Error::Framing("element count overflows".into()))?;
    }
    let shape = &shape[..ndim];
    let expected = if h.meta.role.is_raw() {
        if h.c != 0 {
            return Err(Error::Framing(format!("raw payload with {} unit records", h.c)));
        }
        numel
            .checked_mul(4)
            .and_then(|p| p.checked_add(dims_end + CRC_LEN))
            .ok_or_else(|| Error::Framing("payload size overflows".into()))?
    } else {
        let layout = layout_from_code(h.gran, h.group, shape)?;
        if layout.units != h.c {
            return Err(Error::Framing(format!(
                "header declares {} units, shape {shape:?} implies {}",
                h.c, layout.units
            )));
        }
        let rec_end = dims_end + RECORD_LEN * h.c;
        if buf.len() < rec_end + CRC_LEN {
            return Err(truncated(rec_end + CRC_LEN, buf.len()));
        }
        let bits = (0..h.c).map(|u| buf[dims_end + RECORD_LEN * u]);
        if let Some(w) = bits.clone().find(|w| !(1..=16).contains(w)) {
            return Err(Error::Framing(format!("wire bits {w} outside [1, 16]")));
        }
        rec_end + payload_len(&layout, numel, bits) + CRC_LEN
    };
    if buf.len() != expected {
        return Err(if buf.len() < expected {
            truncated(expected, buf.len())
        } else {
            Error::Framing(format!("{} trailing bytes after packed tensor", buf.len() - expected))
        });
    }
    let body = &buf[..buf.len() - CRC_LEN];
    if crc32fast::hash(body) != read_u32(buf, body.len()) {
        return Err(Error::Integrity("packed tensor checksum mismatch".into()));
    }

    let shape = shape.to_vec();
    if h.meta.role.is_raw() {
        let data = body[dims_end..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        return Ok((Unpacked::Raw(Tensor::new(shape, data)?), h.meta));
    }
    let layout = layout_from_code(h.gran, h.group, &shape)?;
    let mut wire_bits = Vec::with_capacity(h.c);
    let mut zmin = Vec::with_capacity(h.c);
    let mut delta = Vec::with_capacity(h.c);
    let mut cursor = Vec::with_capacity(h.c);
    let mut off = dims_end + RECORD_LEN * h.c;
    for u in 0..h.c {
        let r = dims_end + RECORD_LEN * u;
        wire_bits.push(buf[r]);
        zmin.push(read_f32(buf, r + 1));
        delta.push(read_f32(buf, r + 5));
        cursor.push((off, 0usize));
        off += (unit_count(&layout, numel, u) * buf[r] as usize).div_ceil(8);
    }
    let mut indices = Vec::with_capacity(numel);
    for i in 0..numel {
        let u = layout.unit_of(i);
        let w = wire_bits[u] as usize;
        let (start, bit) = cursor[u];
        let first = start + bit / 8;
        let mut acc = 0u32;
        for k in 0..(bit % 8 + w).div_ceil(8) {
            acc |= (body[first + k] as u32) << (8 * k);
        }
        indices.push((acc >> (bit % 8)) & ((1u32 << w) - 1));
        cursor[u].1 += w;
    }
    let packet = QuantPacket {
        shape,
        layout,
        wire_bits,
        zmin,
        delta,
        indices,
    };
    Ok((Unpacked::Quantized(packet), h.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> PackedMeta {
        PackedMeta {
            tensor_id: 7,
            step: 3,
            role: Role::FwdAct,
        }
    }

    fn one_channel(indices: Vec<u32>, w: u8) -> QuantPacket {
        let shape = vec![indices.len(), 1];
        QuantPacket {
            layout: UnitLayout::new(&shape, Granularity::Channel, QuantAxis::Channel).unwrap(),
            shape,
            wire_bits: vec![w],
            zmin: vec![0.0],
            delta: vec![1.0],
            indices,
        }
    }

    #[test]
    fn lsb_first_bit_order() {
        let bytes = pack(&one_channel(vec![1, 0, 1], 1), meta()).unwrap();
        let payload_at = HEADER_LEN + 8 + RECORD_LEN;
        assert_eq!(bytes[payload_at], 0b0000_0101);
        assert_eq!(bytes.len(), payload_at + 1 + CRC_LEN);

        let mut hand = pack(&one_channel(vec![0, 0, 0], 1), meta()).unwrap();
        hand[payload_at] = 0b0000_0101;
        let n = hand.len();
        let crc = crc32fast::hash(&hand[..n - 4]);
        hand[n - 4..].copy_from_slice(&crc.to_le_bytes());
        match unpack(&hand).unwrap().0 {
            Unpacked::Quantized(p) => assert_eq!(p.indices, vec![1, 0, 1]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn sixteen_bit_indices_span_three_bytes() {
        let p = one_channel(vec![0xFFFF, 0x1234, 0x8001, 5], 16);
        let bytes = pack(&p, meta()).unwrap();
        assert_eq!(unpack(&bytes).unwrap().0, Unpacked::Quantized(p));
        let q = one_channel(vec![0x1FFF, 0, 0x1ABC], 13);
        assert_eq!(unpack(&pack(&q, meta()).unwrap()).unwrap().0, Unpacked::Quantized(q));
    }

    #[test]
    fn corrupt_payload_is_integrity_error() {
        let mut bytes = pack(&one_channel(vec![3, 1, 2, 0], 2), meta()).unwrap();
        let at = bytes.len() - CRC_LEN - 1;
        bytes[at] ^= 0x10;
        assert!(matches!(unpack(&bytes), Err(Error::Integrity(_))));
    }

    #[test]
    fn truncated_is_framing_error() {
        let bytes = pack(&one_channel(vec![3, 1, 2, 0], 2), meta()).unwrap();
        assert!(matches!(unpack(&bytes[..bytes.len() - 1]), Err(Error::Framing(_))));
        assert!(matches!(unpack(&bytes[..10]), Err(Error::Framing(_))));
    }

    #[test]
    fn raw_payload_is_plain_f32() {
        let t = Tensor::new(vec![2], vec![1.5, -0.25]).unwrap();
        let m = PackedMeta {
            role: Role::RawF32,
            ..meta()
        };
        let bytes = pack_raw(&t, m).unwrap();
        assert_eq!(bytes.len(), predicted_size_raw(&[2]));
        assert_eq!(&bytes[HEADER_LEN + 4..HEADER_LEN + 8], &1.5f32.to_le_bytes());
        assert_eq!(unpack(&bytes).unwrap(), (Unpacked::Raw(t), m));
    }

    #[test]
    fn size_for_eight_channels_of_sixteen() {
        let shape = [16, 8];
        let layout = UnitLayout::new(&shape, Granularity::Channel, QuantAxis::Channel).unwrap();
        // 16 header + 8 dims + 72 records + 64 payload + 4 crc
        assert_eq!(predicted_size(&shape, &layout, &[4; 8]), 164);
    }
}
