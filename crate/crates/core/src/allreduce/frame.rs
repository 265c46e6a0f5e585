//! Wire frames:
//!
//! ```text
//! "ART1" | op u8 | round u64 LE | payload length u64 LE | payload
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ART1";
pub const HEADER_LEN: usize = 4 + 1 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum OpCode {
    Broadcast = 1,
    Reduce = 2,
    Gather = 3,
    Barrier = 4,
    Shutdown = 5,
}

impl OpCode {
    pub const ALL: [OpCode; 5] = [OpCode::Broadcast, OpCode::Reduce, OpCode::Gather, OpCode::Barrier, OpCode::Shutdown];

    pub fn from_u8(b: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|op| *op as u8 == b)
            .ok_or_else(|| Error::Protocol(format!("unknown op code {b}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub op: OpCode,
    pub round: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(op: OpCode, round: u64, payload: Vec<u8>) -> Self {
        Frame { op, round, payload }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.push(self.op as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    fn parse_header(header: &[u8; HEADER_LEN]) -> Result<(OpCode, u64, u64)> {
        if &header[..4] != MAGIC {
            return Err(Error::Protocol(format!("bad frame magic {:?}", &header[..4])));
        }
        let op = OpCode::from_u8(header[4])?;
        let round = u64::from_le_bytes(header[5..13].try_into().expect("8 bytes"));
        let len = u64::from_le_bytes(header[13..21].try_into().expect("8 bytes"));
        Ok((op, round, len))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Frame> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        let (op, round, len) = Self::parse_header(&header)?;
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload)?;
        Ok(Frame { op, round, payload })
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Protocol("frame shorter than its header".into()));
        }
        let (op, round, len) = Self::parse_header(bytes[..HEADER_LEN].try_into().expect("header"))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() as u64 != len {
            return Err(Error::Protocol(format!("frame declares {len} payload bytes, has {}", payload.len())));
        }
        Ok(Frame { op, round, payload: payload.to_vec() })
    }
}

pub fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn bytes_to_f64s(b: &[u8]) -> Result<Vec<f64>> {
    if b.len() % 8 != 0 {
        return Err(Error::Protocol(format!("{} bytes is not a whole number of f64", b.len())));
    }
    Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_op() {
        let mut bytes = Frame::new(OpCode::Barrier, 3, vec![]).encode();
        bytes[0] = b'X';
        assert!(matches!(Frame::decode(&bytes), Err(Error::Protocol(_))));
        let mut bytes = Frame::new(OpCode::Barrier, 3, vec![]).encode();
        bytes[4] = 9;
        assert!(matches!(Frame::decode(&bytes), Err(Error::Protocol(_))));
        let mut bytes = Frame::new(OpCode::Reduce, 3, vec![1, 2]).encode();
        bytes.pop();
        assert!(Frame::decode(&bytes).is_err());
    }

    #[test]
    fn header_layout() {
        let bytes = Frame::new(OpCode::Gather, 0x0102, vec![0xaa]).encode();
        assert_eq!(&bytes[..4], b"ART1");
        assert_eq!(bytes[4], 3);
        assert_eq!(&bytes[5..13], &0x0102u64.to_le_bytes());
        assert_eq!(&bytes[13..21], &1u64.to_le_bytes());
        assert_eq!(bytes[21], 0xaa);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(op in 0usize..5, round in any::<u64>(), payload in proptest::collection::vec(any::<u8>(), 0..256)) {
            let frame = Frame::new(OpCode::ALL[op], round, payload);
            let bytes = frame.encode();
            prop_assert_eq!(&Frame::decode(&bytes).unwrap(), &frame);
            prop_assert_eq!(&Frame::read_from(&mut &bytes[..]).unwrap(), &frame);
        }

        #[test]
        fn f64_payload_round_trip(v in proptest::collection::vec(any::<f64>(), 0..64)) {
            let back = bytes_to_f64s(&f64s_to_bytes(&v)).unwrap();
            prop_assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
