//! Inference frames.
//!
//! Request: `version u8 | payload length u32 (big-endian) | 784 × f32 (little-endian)`.
//! Response: `status u8`, and when status is 0 also `label u8 | 10 × f32 (little-endian)`.
//! The request carries no field that distinguishes raw from obfuscated samples.

use std::io::{self, Read};

use crate::dataset::IMAGE_LEN;
use crate::error::{Error, Result};
use crate::nn::NUM_CLASSES;

pub const PROTOCOL_VERSION: u8 = 1;
pub const PAYLOAD_BYTES: usize = IMAGE_LEN * 4;
pub const STATUS_OK: u8 = 0;
pub const STATUS_MALFORMED: u8 = 1;
const RESPONSE_BODY: usize = 1 + NUM_CLASSES * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: u8,
    pub probabilities: [f32; NUM_CLASSES],
}

/// Encodes any payload, including malformed lengths (useful for testing).
pub fn encode_request_raw(version: u8, values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + values.len() * 4);
    out.push(version);
    out.extend_from_slice(&((values.len() * 4) as u32).to_be_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_request(sample: &[f32]) -> Result<Vec<u8>> {
    if sample.len() != IMAGE_LEN {
        return Err(Error::ShapeMismatch {
            layer: 0,
            expected: vec![IMAGE_LEN],
            found: vec![sample.len()],
        });
    }
    Ok(encode_request_raw(PROTOCOL_VERSION, sample))
}

pub fn encode_response(prediction: &Prediction) -> Vec<u8> {
    let mut out = Vec::with_capacity(1 + RESPONSE_BODY);
    out.push(STATUS_OK);
    out.push(prediction.label);
    for p in prediction.probabilities {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// Reads one response. A truncated frame is an error and yields nothing.
pub fn read_response<R: Read>(reader: &mut R) -> Result<Prediction> {
    let mut status = [0u8; 1];
    reader.read_exact(&mut status).map_err(truncated)?;
    if status[0] != STATUS_OK {
        return Err(Error::Rejected(status[0]));
    }
    let mut body = [0u8; RESPONSE_BODY];
    reader.read_exact(&mut body).map_err(truncated)?;
    let label = body[0];
    let mut probabilities = [0.0f32; NUM_CLASSES];
    for (p, chunk) in probabilities.iter_mut().zip(body[1..].chunks_exact(4)) {
        *p = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    if label as usize >= NUM_CLASSES {
        return Err(Error::Protocol(format!("malformed response: label {label}")));
    }
    let sum: f32 = probabilities.iter().sum();
    if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > 1e-5 {
        return Err(Error::Protocol(format!("malformed response: probabilities sum to {sum}")));
    }
    Ok(Prediction { label, probabilities })
}

fn truncated(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Protocol("truncated response frame".into())
    } else {
        Error::Io(e)
    }
}

/// What the server makes of one incoming frame.
#[derive(Debug, PartialEq)]
pub(crate) enum Incoming {
    Sample(Vec<f32>),
    /// Well-framed but invalid: answer with status 1 and keep the connection.
    Malformed,
    /// Declared length above the limit: drop the connection.
    Oversized,
    /// Peer closed or the frame was cut short.
    Closed,
}

pub(crate) fn read_request<R: Read>(reader: &mut R) -> Incoming {
    let mut head = [0u8; 5];
    if reader.read_exact(&mut head).is_err() {
        return Incoming::Closed;
    }
    let version = head[0];
    let len = u32::from_be_bytes(head[1..5].try_into().expect("4 bytes")) as usize;
    if len > PAYLOAD_BYTES {
        return Incoming::Oversized;
    }
    let mut payload = vec![0u8; len];
    if reader.read_exact(&mut payload).is_err() {
        return Incoming::Closed;
    }
    if version != PROTOCOL_VERSION || len != PAYLOAD_BYTES {
        return Incoming::Malformed;
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Incoming::Malformed;
    }
    Incoming::Sample(values)
}
