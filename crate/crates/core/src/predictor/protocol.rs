//! Framed request/response protocol spoken with external predictor
//! processes over their standard input and output.
//!
//! ```text
//! frame   = "TTA1" | header_len: u32 LE | header: UTF-8 JSON | payload
//! payload = little-endian f32 values; length implied by the header
//! ```
//!
//! The child speaks first with a `hello` frame. Each `predict` request
//! (channel-major image, x fastest) is answered by one `probs` frame
//! (class-major probabilities, x fastest) or one `error` frame.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"TTA1";
pub const PROTOCOL_VERSION: u32 = 1;
pub const DTYPE: &str = "f32le";
/// Upper bound on the JSON header size.
pub const MAX_HEADER_LEN: u32 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Header {
    Hello { protocol: u32, classes: usize, channels: usize, name: String },
    Predict { dims: [usize; 3], channels: usize, spacing: [f64; 3], dtype: String },
    Probs { dims: [usize; 3], classes: usize, dtype: String },
    Error { message: String },
}

impl Header {
    /// Number of payload bytes that follow this header.
    pub fn payload_len(&self) -> Result<usize, ProtocolError> {
        let floats = match self {
            Header::Hello { .. } | Header::Error { .. } => 0,
            Header::Predict { dims, channels, dtype, .. } => {
                check_dtype(dtype)?;
                dims.iter().product::<usize>() * channels
            }
            Header::Probs { dims, classes, dtype } => {
                check_dtype(dtype)?;
                dims.iter().product::<usize>() * classes
            }
        };
        floats
            .checked_mul(4)
            .ok_or_else(|| ProtocolError::MalformedPayload("payload size overflows".into()))
    }
}

fn check_dtype(dtype: &str) -> Result<(), ProtocolError> {
    if dtype != DTYPE {
        return Err(ProtocolError::MalformedPayload(format!("unsupported dtype {dtype:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub header: Header,
    pub payload: Vec<u8>,
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("could not launch predictor {command:?}: {source}")]
    Spawn {
        command: String,
        #[source]
        source: io::Error,
    },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("protocol version mismatch: expected {expected}, child speaks {actual}")]
    VersionMismatch { expected: u32, actual: u32 },
    #[error("malformed frame: {0}")]
    MalformedPayload(String),
    #[error("predictor process died: {0}")]
    ChildDied(String),
    #[error("no response within {secs:.1} s")]
    Timeout { secs: f64 },
    #[error("predictor reported an error: {0}")]
    Remote(String),
    #[error("invalid probabilities at voxel {voxel:?}: {reason}")]
    Validation { voxel: [usize; 3], reason: String },
    #[error("unexpected {0} frame")]
    Unexpected(&'static str),
    #[error("pipe error: {0}")]
    Io(String),
    /// The stream ended cleanly at a frame boundary.
    #[error("stream closed")]
    Closed,
}

impl Header {
    pub fn kind(&self) -> &'static str {
        match self {
            Header::Hello { .. } => "hello",
            Header::Predict { .. } => "predict",
            Header::Probs { .. } => "probs",
            Header::Error { .. } => "error",
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, header: &Header, payload: &[u8]) -> io::Result<()> {
    let json = serde_json::to_vec(header).map_err(io::Error::other)?;
    w.write_all(&MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(payload)?;
    w.flush()
}

/// Fills `buf`; `Ok(false)` if the stream ended before the first byte.
fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<bool, ProtocolError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => {
                return Err(ProtocolError::MalformedPayload(format!(
                    "truncated {what}: got {filled} of {} bytes",
                    buf.len()
                )))
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ProtocolError::Io(e.to_string())),
        }
    }
    Ok(true)
}

fn read_required<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), ProtocolError> {
    if buf.is_empty() || read_exact_or_eof(r, buf, what)? {
        Ok(())
    } else {
        Err(ProtocolError::MalformedPayload(format!("truncated frame: missing {what}")))
    }
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, ProtocolError> {
    let mut magic = [0u8; 4];
    if !read_exact_or_eof(r, &mut magic, "magic")? {
        return Err(ProtocolError::Closed);
    }
    if magic != MAGIC {
        return Err(ProtocolError::MalformedPayload(format!("bad magic {magic:02x?}")));
    }
    let mut len = [0u8; 4];
    read_required(r, &mut len, "header length")?;
    let len = u32::from_le_bytes(len);
    if len == 0 || len > MAX_HEADER_LEN {
        return Err(ProtocolError::MalformedPayload(format!("header length {len}")));
    }
    let mut json = vec![0u8; len as usize];
    read_required(r, &mut json, "header")?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| ProtocolError::MalformedPayload(format!("header: {e}")))?;
    let mut payload = vec![0u8; header.payload_len()?];
    read_required(r, &mut payload, "payload")?;
    Ok(Frame { header, payload })
}

pub fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Result<Vec<f32>, ProtocolError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(ProtocolError::MalformedPayload(format!("payload of {} bytes", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_json_is_tagged() {
        let h = Header::Hello { protocol: 1, classes: 4, channels: 1, name: "x".into() };
        assert_eq!(
            serde_json::to_string(&h).unwrap(),
            r#"{"type":"hello","protocol":1,"classes":4,"channels":1,"name":"x"}"#
        );
        let p = Header::Predict { dims: [2, 3, 4], channels: 2, spacing: [1.0, 1.0, 2.5], dtype: DTYPE.into() };
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"type":"predict","dims":[2,3,4],"channels":2,"spacing":[1.0,1.0,2.5],"dtype":"f32le"}"#
        );
    }

    #[test]
    fn frame_bytes_are_exact() {
        let mut buf = Vec::new();
        let h = Header::Probs { dims: [1, 1, 1], classes: 2, dtype: DTYPE.into() };
        write_frame(&mut buf, &h, &encode_f32(&[0.25, 0.75])).unwrap();
        let json = br#"{"type":"probs","dims":[1,1,1],"classes":2,"dtype":"f32le"}"#;
        assert_eq!(&buf[..4], b"TTA1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize, json.len());
        assert_eq!(&buf[8..8 + json.len()], json);
        assert_eq!(&buf[8 + json.len()..], &[0, 0, 0x80, 0x3e, 0, 0, 0x40, 0x3f]);
        let frame = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(frame.header, h);
        assert_eq!(decode_f32(&frame.payload).unwrap(), vec![0.25, 0.75]);
    }

    #[test]
    fn truncation_and_garbage() {
        let mut buf = Vec::new();
        let h = Header::Probs { dims: [2, 1, 1], classes: 2, dtype: DTYPE.into() };
        write_frame(&mut buf, &h, &encode_f32(&[1.0, 0.0, 0.0, 1.0])).unwrap();
        for cut in [2, 6, 12, buf.len() - 1] {
            assert!(matches!(read_frame(&mut &buf[..cut]), Err(ProtocolError::MalformedPayload(_))), "cut {cut}");
        }
        assert!(matches!(read_frame(&mut &b""[..]), Err(ProtocolError::Closed)));
        assert!(matches!(read_frame(&mut &b"XXXX\0\0\0\0"[..]), Err(ProtocolError::MalformedPayload(_))));
        let mut bad_json = Vec::new();
        bad_json.extend_from_slice(b"TTA1");
        bad_json.extend_from_slice(&3u32.to_le_bytes());
        bad_json.extend_from_slice(b"{x}");
        assert!(matches!(read_frame(&mut bad_json.as_slice()), Err(ProtocolError::MalformedPayload(_))));
    }
}
