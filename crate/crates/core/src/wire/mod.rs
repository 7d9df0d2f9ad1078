//! Wire format and client/server protocol.
//!
//! - [`packed`]: bit-exact serialization of quantized and raw tensors.
//! - [`frame`]: length-prefixed framing over any byte stream.
//! - [`session`]: the lockstep training session over TCP.

pub mod frame;
pub mod packed;
pub mod session;

pub use frame::{read_frame, write_frame, Frame, Tag, FRAME_OVERHEAD};
pub use packed::{
    pack, pack_raw, predicted_size, predicted_size_raw, unpack, PackedMeta, Role, Unpacked, ID_DELTA, ID_EVAL, ID_MASK,
};
pub use session::{
    run_client, run_client_with, run_server, run_server_with, ClientSession, ErrorBody, Hello, PROTOCOL_VERSION,
};

use crate::error::{Error, Result};
use crate::nets::Payload;

/// Exact encoded size of a stage payload.
pub fn payload_size(p: &Payload) -> usize {
    match p {
        Payload::Raw(t) => predicted_size_raw(t.shape()),
        Payload::Quantized(q) | Payload::Delta(q) => predicted_size(&q.shape, &q.layout, &q.wire_bits),
    }
}

/// Encodes a stage payload. `site` indexes the model's site list.
pub fn encode_payload(p: &Payload, site: u32, step: u32, role: Role, eval: bool) -> Result<Vec<u8>> {
    if site > ID_MASK {
        return Err(Error::Invalid(format!("site index {site} too large")));
    }
    let mut id = site;
    if eval {
        id |= ID_EVAL;
    }
    match p {
        Payload::Raw(t) => pack_raw(
            t,
            PackedMeta {
                tensor_id: id,
                step,
                role: Role::RawF32,
            },
        ),
        Payload::Quantized(q) => pack(
            q,
            PackedMeta {
                tensor_id: id,
                step,
                role,
            },
        ),
        Payload::Delta(q) => pack(
            q,
            PackedMeta {
                tensor_id: id | ID_DELTA,
                step,
                role,
            },
        ),
    }
}

/// Inverse of [`encode_payload`].
pub fn decode_payload(bytes: &[u8]) -> Result<(Payload, PackedMeta)> {
    let (u, meta) = unpack(bytes)?;
    let p = match u {
        Unpacked::Raw(t) => Payload::Raw(t),
        Unpacked::Quantized(q) if meta.tensor_id & ID_DELTA != 0 => Payload::Delta(q),
        Unpacked::Quantized(q) => Payload::Quantized(q),
    };
    Ok((p, meta))
}
