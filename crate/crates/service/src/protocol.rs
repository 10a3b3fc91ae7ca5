//! Binary framing of streamed frames.
//!
//! Every frame message is a 36-byte little-endian header followed by the
//! payload:
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! |      0 |    4 | magic `WCFR`                            |
//! |      4 |    8 | frame index (u64)                       |
//! |     12 |    8 | timestamp, ms since session start (u64) |
//! |     20 |    4 | width (u32)                             |
//! |     24 |    4 | height (u32)                            |
//! |     28 |    1 | encoding: 0 PNG, 1 raw RGB8             |
//! |     29 |    3 | zero                                    |
//! |     32 |    4 | payload length (u32)                    |

use serde::{Deserialize, Serialize};

pub const FRAME_MAGIC: [u8; 4] = *b"WCFR";
pub const FRAME_HEADER_LEN: usize = 36;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// Lossless PNG, 8 bits per channel.
    #[default]
    Png,
    /// Row-major RGB bytes, no compression.
    Rgb,
}

impl Encoding {
    pub fn code(self) -> u8 {
        match self {
            Encoding::Png => 0,
            Encoding::Rgb => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Encoding::Png),
            1 => Some(Encoding::Rgb),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub index: u64,
    pub timestamp_ms: u64,
    pub width: u32,
    pub height: u32,
    pub encoding: Encoding,
    pub payload_len: u32,
}

impl FrameHeader {
    pub fn encode(&self, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
        out.extend_from_slice(&FRAME_MAGIC);
        out.extend_from_slice(&self.index.to_le_bytes());
        out.extend_from_slice(&self.timestamp_ms.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.encoding.code());
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(payload);
        out
    }

    /// Splits a frame message into its header and payload.
    pub fn decode(msg: &[u8]) -> Result<(FrameHeader, &[u8]), String> {
        if msg.len() < FRAME_HEADER_LEN {
            return Err(format!("frame message of {} bytes is shorter than its header", msg.len()));
        }
        if msg[..4] != FRAME_MAGIC {
            return Err("bad frame magic".into());
        }
        let u64_at = |o: usize| u64::from_le_bytes(msg[o..o + 8].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(msg[o..o + 4].try_into().unwrap());
        let encoding = Encoding::from_code(msg[28]).ok_or_else(|| format!("unknown encoding {}", msg[28]))?;
        let header = FrameHeader {
            index: u64_at(4),
            timestamp_ms: u64_at(12),
            width: u32_at(20),
            height: u32_at(24),
            encoding,
            payload_len: u32_at(32),
        };
        let payload = &msg[FRAME_HEADER_LEN..];
        if payload.len() != header.payload_len as usize {
            return Err(format!("payload is {} bytes, header says {}", payload.len(), header.payload_len));
        }
        Ok((header, payload))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trips() {
        let h = FrameHeader {
            index: 7,
            timestamp_ms: 1234,
            width: 3,
            height: 2,
            encoding: Encoding::Rgb,
            payload_len: 18,
        };
        let payload: Vec<u8> = (0..18).collect();
        let msg = h.encode(&payload);
        assert_eq!(msg.len(), FRAME_HEADER_LEN + 18);
        let (back, p) = FrameHeader::decode(&msg).unwrap();
        assert_eq!(back, h);
        assert_eq!(p, &payload[..]);
        assert!(FrameHeader::decode(&msg[..msg.len() - 1]).is_err());
        let mut bad = msg.clone();
        bad[0] = b'X';
        assert!(FrameHeader::decode(&bad).is_err());
    }
}
