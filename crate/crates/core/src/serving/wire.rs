//! Length-prefixed JSON framing shared by every service.
//!
//! A frame is a 4-byte big-endian payload length followed by that many bytes
//! of UTF-8 JSON.

use std::io;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME: usize = 64 << 20;

/// Reads one frame. Returns `Ok(None)` on a clean end of stream at a frame
/// boundary.
pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).await?;
    Ok(Some(buf))
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "frame too large"));
    }
    let mut buf = Vec::with_capacity(4 + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    buf.extend_from_slice(payload);
    w.write_all(&buf).await?;
    w.flush().await
}

pub fn encode(v: &Value) -> Vec<u8> {
    serde_json::to_vec(v).expect("json values always serialize")
}

pub fn decode(bytes: &[u8]) -> serde_json::Result<Value> {
    serde_json::from_slice(bytes)
}

/// An error reported by a service in its response body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ServiceError {
    pub code: String,
    pub message: String,
}

impl ServiceError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new("bad_request", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new("internal", message)
    }
}

pub fn request_id_of(v: &Value) -> Option<&str> {
    v.get("request_id").and_then(Value::as_str)
}

/// `{"request_id": .., "error": {"code": .., "message": ..}}`; the id is
/// omitted when the request carried none.
pub fn error_body(request_id: Option<&str>, err: &ServiceError) -> Value {
    let mut body = json!({ "error": { "code": err.code, "message": err.message } });
    if let Some(id) = request_id {
        body["request_id"] = json!(id);
    }
    body
}

/// Splits a response into its success body or the carried error.
pub fn into_result(v: Value) -> Result<Value, ServiceError> {
    match v.get("error") {
        Some(e) => Err(serde_json::from_value(e.clone())
            .unwrap_or_else(|_| ServiceError::new("internal", format!("malformed error body: {e}")))),
        None => Ok(v),
    }
}
