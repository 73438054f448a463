//! Wire framing for the identification sub-layer.
//!
//! Header: `"DIDL"` magic, version byte, frame type, flow id, 4-byte
//! big-endian payload length. Frames from the two flows never interleave
//! within a frame; any prefix of the stream parses as whole frames plus at
//! most one partial.

use std::io::Read;

use thiserror::Error;

pub const FRAME_MAGIC: [u8; 4] = *b"DIDL";
pub const FRAME_VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 11;
pub const MAX_PAYLOAD_LEN: u32 = 8 * 1024 * 1024;

pub const FT_PRESENTATION_REQUEST: u8 = 0x01;
pub const FT_PRESENTATION: u8 = 0x02;
pub const FT_RESULT: u8 = 0x03;
pub const FT_ERROR: u8 = 0x04;
pub const FT_NEGOTIATION_PREAMBLE: u8 = 0x05;
pub const FT_IDENTIFICATION_COMPLETE: u8 = 0x06;

/// Flow 0: the client verifies the server. Flow 1: the server verifies the
/// client.
pub const FLOW_CLIENT_VERIFIES: u8 = 0;
pub const FLOW_SERVER_VERIFIES: u8 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad frame magic")]
    BadMagic,
    #[error("unsupported frame version {0:#04x}")]
    UnsupportedVersion(u8),
    #[error("truncated frame")]
    Truncated,
    #[error("frame payload exceeds limit")]
    Oversize,
}

/// One identification sub-layer frame. The type byte is kept raw so that
/// unknown types can be answered with a protocol error frame instead of
/// failing the decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: u8,
    pub flow_id: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: u8, flow_id: u8, payload: Vec<u8>) -> Self {
        Self {
            frame_type,
            flow_id,
            payload,
        }
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + frame.payload.len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.push(frame.frame_type);
    out.push(frame.flow_id);
    out.extend_from_slice(&(frame.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&frame.payload);
    out
}

/// Decodes one frame from the front of `bytes`, returning it and the number
/// of bytes consumed (exactly header + length).
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    if bytes.len() < HEADER_LEN {
        return Err(FrameError::Truncated);
    }
    if bytes[..4] != FRAME_MAGIC {
        return Err(FrameError::BadMagic);
    }
    if bytes[4] != FRAME_VERSION {
        return Err(FrameError::UnsupportedVersion(bytes[4]));
    }
    let frame_type = bytes[5];
    let flow_id = bytes[6];
    let len = u32::from_be_bytes([bytes[7], bytes[8], bytes[9], bytes[10]]);
    if len > MAX_PAYLOAD_LEN {
        return Err(FrameError::Oversize);
    }
    let total = HEADER_LEN + len as usize;
    if bytes.len() < total {
        return Err(FrameError::Truncated);
    }
    Ok((
        Frame {
            frame_type,
            flow_id,
            payload: bytes[HEADER_LEN..total].to_vec(),
        },
        total,
    ))
}

/// Reads exactly one frame from a stream.
pub fn read_frame(reader: &mut impl Read) -> Result<Frame, std::io::Error> {
    let mut header = [0u8; HEADER_LEN];
    reader.read_exact(&mut header)?;
    let mut probe = decode_frame(&header);
    let len = u32::from_be_bytes([header[7], header[8], header[9], header[10]]);
    if let Err(e) = &probe {
        if *e != FrameError::Truncated {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()));
        }
        if len > MAX_PAYLOAD_LEN {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                FrameError::Oversize.to_string(),
            ));
        }
        let mut full = header.to_vec();
        full.resize(HEADER_LEN + len as usize, 0);
        reader.read_exact(&mut full[HEADER_LEN..])?;
        probe = decode_frame(&full);
    }
    match probe {
        Ok((frame, _)) => Ok(frame),
        Err(e) => Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_inverse() {
        let frame = Frame::new(FT_PRESENTATION, FLOW_SERVER_VERIFIES, vec![1, 2, 3, 4]);
        let bytes = encode_frame(&frame);
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        let (back, used) = decode_frame(&bytes).unwrap();
        assert_eq!(back, frame);
        assert_eq!(used, bytes.len());
    }

    #[test]
    fn decode_consumes_exactly_one_frame() {
        let a = encode_frame(&Frame::new(FT_RESULT, 0, b"aa".to_vec()));
        let b = encode_frame(&Frame::new(FT_ERROR, 1, b"bbb".to_vec()));
        let mut stream = a.clone();
        stream.extend_from_slice(&b);
        let (first, used) = decode_frame(&stream).unwrap();
        assert_eq!(first.frame_type, FT_RESULT);
        assert_eq!(used, a.len());
        let (second, used2) = decode_frame(&stream[used..]).unwrap();
        assert_eq!(second.frame_type, FT_ERROR);
        assert_eq!(used + used2, stream.len());
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut bytes = encode_frame(&Frame::new(FT_RESULT, 0, vec![]));
        bytes[0] = b'X';
        assert_eq!(decode_frame(&bytes), Err(FrameError::BadMagic));
    }

    #[test]
    fn unsupported_version_rejected() {
        let mut bytes = encode_frame(&Frame::new(FT_RESULT, 0, vec![]));
        bytes[4] = 0x02;
        assert_eq!(decode_frame(&bytes), Err(FrameError::UnsupportedVersion(0x02)));
    }

    #[test]
    fn declared_length_beyond_available_is_truncated() {
        let bytes = encode_frame(&Frame::new(FT_RESULT, 0, vec![0u8; 32]));
        assert_eq!(
            decode_frame(&bytes[..bytes.len() - 1]),
            Err(FrameError::Truncated)
        );
        assert_eq!(decode_frame(&bytes[..5]), Err(FrameError::Truncated));
    }

    #[test]
    fn oversize_length_rejected() {
        let mut bytes = encode_frame(&Frame::new(FT_RESULT, 0, vec![]));
        bytes[7..11].copy_from_slice(&(MAX_PAYLOAD_LEN + 1).to_be_bytes());
        assert_eq!(decode_frame(&bytes), Err(FrameError::Oversize));
    }

    #[test]
    fn stream_reader_round_trip() {
        let frame = Frame::new(FT_PRESENTATION_REQUEST, 1, vec![9; 100]);
        let bytes = encode_frame(&frame);
        let mut cursor = std::io::Cursor::new(bytes);
        assert_eq!(read_frame(&mut cursor).unwrap(), frame);
    }
}
