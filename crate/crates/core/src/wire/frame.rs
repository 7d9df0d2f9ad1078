//! Length-prefixed frames: `u32` body length, `u8` tag, body.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME: usize = 1 << 28;
pub const FRAME_OVERHEAD: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Hello = 1,
    HelloAck = 2,
    FwdAct = 3,
    BwdGrad = 4,
    LoraSync = 5,
    Metrics = 6,
    Bye = 7,
    Error = 8,
}

impl Tag {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Tag::Hello,
            2 => Tag::HelloAck,
            3 => Tag::FwdAct,
            4 => Tag::BwdGrad,
            5 => Tag::LoraSync,
            6 => Tag::Metrics,
            7 => Tag::Bye,
            8 => Tag::Error,
            _ => return Err(Error::Protocol(format!("unknown frame tag {v}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub tag: Tag,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(tag: Tag, body: Vec<u8>) -> Self {
        Frame { tag, body }
    }

    /// Bytes on the wire including the prefix.
    pub fn wire_len(&self) -> usize {
        FRAME_OVERHEAD + self.body.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.push(self.tag as u8);
        out.extend_from_slice(&self.body);
        out
    }
}

/// Writes one frame; returns the number of bytes written.
pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<usize> {
    if frame.body.len() > MAX_FRAME {
        return Err(Error::Framing(format!(
            "frame body of {} bytes exceeds limit",
            frame.body.len()
        )));
    }
    let bytes = frame.to_bytes();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == ErrorKind::UnexpectedEof {
            Error::Framing(format!("connection closed while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

/// Reads one frame.
pub fn read_frame(r: &mut impl Read) -> Result<Frame> {
    let mut head = [0u8; FRAME_OVERHEAD];
    read_exact_or(r, &mut head, "frame header")?;
    let len = u32::from_le_bytes(head[..4].try_into().unwrap()) as usize;
    let tag = Tag::from_u8(head[4])?;
    if len > MAX_FRAME {
        return Err(Error::Framing(format!("frame length {len} exceeds limit")));
    }
    let mut body = vec![0u8; len];
    read_exact_or(r, &mut body, "frame body")?;
    Ok(Frame { tag, body })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let f = Frame::new(Tag::Metrics, b"{}".to_vec());
        let mut buf = Vec::new();
        assert_eq!(write_frame(&mut buf, &f).unwrap(), 7);
        assert_eq!(&buf[..5], &[2, 0, 0, 0, 6]);
        assert_eq!(read_frame(&mut buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn unknown_tag_and_truncation() {
        assert!(matches!(
            read_frame(&mut [0u8, 0, 0, 0, 99].as_slice()),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            read_frame(&mut [4u8, 0, 0, 0, 3, 1].as_slice()),
            Err(Error::Framing(_))
        ));
    }
}
