//! Frame bitstream container.
//!
//! One frame record is a fixed 39-byte header followed by the entropy-coded
//! payload; multi-byte fields are little-endian. Records are self-delimiting
//! through `payload_len`, so a stream file is plain concatenation.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "4DAC"
//!      4     1  version (currently 1)
//!      5     1  frame_type: 0 = intra, 1 = predicted
//!      6     1  octree depth
//!      7     4  qstep, IEEE-754 binary32
//!     11     4  point_count
//!     15     8  model_hash (0 when no model is involved)
//!     23    12  quantized DC, 3 × i32
//!     35     4  payload_len
//!     39     …  payload
//! ```

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"4DAC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 39;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameType {
    Intra,
    Predicted,
}

impl FrameType {
    fn as_u8(self) -> u8 {
        match self {
            FrameType::Intra => 0,
            FrameType::Predicted => 1,
        }
    }

    fn from_u8(v: u8) -> Result<FrameType> {
        match v {
            0 => Ok(FrameType::Intra),
            1 => Ok(FrameType::Predicted),
            other => Err(Error::ParseError(format!("unknown frame type {other}"))),
        }
    }
}

/// Everything the decoder needs before touching the payload.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameHeader {
    pub frame_type: FrameType,
    pub depth: u8,
    pub qstep: f32,
    pub point_count: u32,
    /// Hash of the model parameters both sides must share; 0 for frames
    /// coded without any model.
    pub model_hash: u64,
    /// Quantized DC coefficient per channel, carried in the header so the
    /// payload holds exactly `point_count - 1` high-band 3-vectors.
    pub dc: [i32; 3],
}

/// Serializes one frame record.
pub fn write_frame(header: &FrameHeader, payload: &[u8]) -> Vec<u8> {
    debug_assert!(header.depth >= 1 && header.depth <= crate::frame::MAX_DEPTH);
    debug_assert!(header.point_count >= 1);
    debug_assert!(header.qstep > 0.0);
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(header.frame_type.as_u8());
    out.push(header.depth);
    out.extend_from_slice(&header.qstep.to_le_bytes());
    out.extend_from_slice(&header.point_count.to_le_bytes());
    out.extend_from_slice(&header.model_hash.to_le_bytes());
    for c in 0..3 {
        out.extend_from_slice(&header.dc[c].to_le_bytes());
    }
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Parses one frame record from the front of `bytes`; returns the header,
/// the payload slice, and the total bytes consumed.
pub fn read_frame(bytes: &[u8]) -> Result<(FrameHeader, &[u8], usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload(format!(
            "frame header needs {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::BadMagic(format!(
            "expected 4DAC, found {:02x?}",
            &bytes[0..4]
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(format!(
            "version {} (supported: {VERSION})",
            bytes[4]
        )));
    }
    let frame_type = FrameType::from_u8(bytes[5])?;
    let depth = bytes[6];
    if depth < 1 || depth > crate::frame::MAX_DEPTH {
        return Err(Error::ParseError(format!("depth {depth} out of range")));
    }
    let qstep = f32::from_le_bytes(bytes[7..11].try_into().unwrap());
    if !(qstep > 0.0 && qstep.is_finite()) {
        return Err(Error::ParseError(format!("qstep {qstep} must be positive")));
    }
    let point_count = u32::from_le_bytes(bytes[11..15].try_into().unwrap());
    if point_count == 0 {
        return Err(Error::ParseError("point_count is zero".into()));
    }
    let model_hash = u64::from_le_bytes(bytes[15..23].try_into().unwrap());
    let mut dc = [0i32; 3];
    for c in 0..3 {
        dc[c] = i32::from_le_bytes(bytes[23 + 4 * c..27 + 4 * c].try_into().unwrap());
    }
    let payload_len = u32::from_le_bytes(bytes[35..39].try_into().unwrap()) as usize;
    if bytes.len() - HEADER_LEN < payload_len {
        return Err(Error::TruncatedPayload(format!(
            "payload declares {payload_len} bytes, {} available",
            bytes.len() - HEADER_LEN
        )));
    }
    let header = FrameHeader {
        frame_type,
        depth,
        qstep,
        point_count,
        model_hash,
        dc,
    };
    Ok((
        header,
        &bytes[HEADER_LEN..HEADER_LEN + payload_len],
        HEADER_LEN + payload_len,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_header() -> FrameHeader {
        FrameHeader {
            frame_type: FrameType::Predicted,
            depth: 9,
            qstep: 10.0,
            point_count: 5,
            model_hash: 0x0123_4567_89AB_CDEF,
            dc: [1000, -2, 0],
        }
    }

    #[test]
    fn layout_is_pinned_byte_for_byte() {
        let bytes = write_frame(&sample_header(), &[0xAA, 0xBB]);
        let mut expect = Vec::new();
        expect.extend_from_slice(b"4DAC");
        expect.push(1); // version
        expect.push(1); // predicted
        expect.push(9); // depth
        expect.extend_from_slice(&10.0f32.to_le_bytes());
        expect.extend_from_slice(&5u32.to_le_bytes());
        expect.extend_from_slice(&0x0123_4567_89AB_CDEFu64.to_le_bytes());
        expect.extend_from_slice(&1000i32.to_le_bytes());
        expect.extend_from_slice(&(-2i32).to_le_bytes());
        expect.extend_from_slice(&0i32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&[0xAA, 0xBB]);
        assert_eq!(bytes, expect);
        assert_eq!(bytes.len(), HEADER_LEN + 2);
    }

    #[test]
    fn roundtrip_and_concatenation() {
        let h1 = sample_header();
        let mut h2 = sample_header();
        h2.frame_type = FrameType::Intra;
        h2.model_hash = 0;
        let mut stream = write_frame(&h1, &[1, 2, 3]);
        stream.extend_from_slice(&write_frame(&h2, &[]));

        let (got1, payload1, used1) = read_frame(&stream).unwrap();
        assert_eq!(got1, h1);
        assert_eq!(payload1, &[1, 2, 3]);
        let (got2, payload2, used2) = read_frame(&stream[used1..]).unwrap();
        assert_eq!(got2, h2);
        assert!(payload2.is_empty());
        assert_eq!(used1 + used2, stream.len());
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let good = write_frame(&sample_header(), &[7]);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_frame(&bad), Err(Error::BadMagic(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(read_frame(&bad), Err(Error::UnsupportedVersion(_))));

        let mut bad = good.clone();
        bad[5] = 7;
        assert!(matches!(read_frame(&bad), Err(Error::ParseError(_))));

        let mut bad = good.clone();
        bad[6] = 40;
        assert!(matches!(read_frame(&bad), Err(Error::ParseError(_))));

        let mut bad = good.clone();
        bad[11..15].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_frame(&bad), Err(Error::ParseError(_))));

        let mut bad = good.clone();
        bad[7..11].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert!(matches!(read_frame(&bad), Err(Error::ParseError(_))));

        assert!(matches!(
            read_frame(&good[..good.len() - 1]),
            Err(Error::TruncatedPayload(_))
        ));
        assert!(matches!(
            read_frame(&good[..10]),
            Err(Error::TruncatedPayload(_))
        ));
    }
}
