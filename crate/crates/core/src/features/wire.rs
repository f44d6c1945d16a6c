//! FMV1 feature-server framing.
//!
//! Little-endian throughout. A frame is `u32 length` (bytes after the length
//! field), the magic `FMV1`, a `u8` message type and a type-specific payload.
//! Tensors are `u8 ndim`, `ndim x u32` extents, then `f32` values row-major.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub const MAGIC: &[u8; 4] = b"FMV1";
pub const PROTOCOL_VERSION: u32 = 1;

/// Frames larger than this are rejected before allocation.
const MAX_FRAME: u32 = 1 << 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    ForwardReq = 0x01,
    ForwardResp = 0x02,
    VjpReq = 0x03,
    VjpResp = 0x04,
    HelloReq = 0x10,
    HelloResp = 0x11,
    Error = 0x7F,
}

impl MessageType {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0x01 => Self::ForwardReq,
            0x02 => Self::ForwardResp,
            0x03 => Self::VjpReq,
            0x04 => Self::VjpResp,
            0x10 => Self::HelloReq,
            0x11 => Self::HelloResp,
            0x7F => Self::Error,
            other => return Err(Error::Remote(format!("unknown message type 0x{other:02x}"))),
        })
    }
}

/// Server-side error codes.
pub mod codes {
    pub const MALFORMED: u16 = 0x01;
    pub const SHAPE_MISMATCH: u16 = 0x02;
    pub const MODEL_FAILURE: u16 = 0x03;
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    HelloReq,
    HelloResp {
        latent_dim: u32,
        protocol_version: u32,
    },
    ForwardReq {
        image: Tensor,
    },
    ForwardResp {
        latent: Tensor,
    },
    VjpReq {
        image: Tensor,
        cotangent: Tensor,
    },
    VjpResp {
        gradient: Tensor,
    },
    Error {
        code: u16,
        message: String,
    },
}

impl Message {
    pub fn kind(&self) -> MessageType {
        match self {
            Self::HelloReq => MessageType::HelloReq,
            Self::HelloResp { .. } => MessageType::HelloResp,
            Self::ForwardReq { .. } => MessageType::ForwardReq,
            Self::ForwardResp { .. } => MessageType::ForwardResp,
            Self::VjpReq { .. } => MessageType::VjpReq,
            Self::VjpResp { .. } => MessageType::VjpResp,
            Self::Error { .. } => MessageType::Error,
        }
    }

    /// Full frame bytes, including the length prefix.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        body.extend_from_slice(MAGIC);
        body.push(self.kind() as u8);
        match self {
            Self::HelloReq => {}
            Self::HelloResp {
                latent_dim,
                protocol_version,
            } => {
                body.extend_from_slice(&latent_dim.to_le_bytes());
                body.extend_from_slice(&protocol_version.to_le_bytes());
            }
            Self::ForwardReq { image: t }
            | Self::ForwardResp { latent: t }
            | Self::VjpResp { gradient: t } => encode_tensor(t, &mut body)?,
            Self::VjpReq { image, cotangent } => {
                encode_tensor(image, &mut body)?;
                encode_tensor(cotangent, &mut body)?;
            }
            Self::Error { code, message } => {
                let bytes = message.as_bytes();
                let len = u16::try_from(bytes.len())
                    .map_err(|_| Error::Remote("error message longer than 65535 bytes".into()))?;
                body.extend_from_slice(&code.to_le_bytes());
                body.extend_from_slice(&len.to_le_bytes());
                body.extend_from_slice(bytes);
            }
        }
        let len = u32::try_from(body.len())
            .ok()
            .filter(|&l| l <= MAX_FRAME)
            .ok_or_else(|| Error::Remote("frame too large".into()))?;
        let mut frame = Vec::with_capacity(body.len() + 4);
        frame.extend_from_slice(&len.to_le_bytes());
        frame.extend_from_slice(&body);
        Ok(frame)
    }

    /// Decodes a frame body (everything after the length prefix).
    pub fn decode(body: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: body, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Remote("bad magic (expected FMV1)".into()));
        }
        let kind = MessageType::from_byte(cur.u8()?)?;
        let msg = match kind {
            MessageType::HelloReq => Self::HelloReq,
            MessageType::HelloResp => Self::HelloResp {
                latent_dim: cur.u32()?,
                protocol_version: cur.u32()?,
            },
            MessageType::ForwardReq => Self::ForwardReq {
                image: cur.tensor()?,
            },
            MessageType::ForwardResp => Self::ForwardResp {
                latent: cur.tensor()?,
            },
            MessageType::VjpReq => Self::VjpReq {
                image: cur.tensor()?,
                cotangent: cur.tensor()?,
            },
            MessageType::VjpResp => Self::VjpResp {
                gradient: cur.tensor()?,
            },
            MessageType::Error => {
                let code = cur.u16()?;
                let len = cur.u16()? as usize;
                let message = String::from_utf8(cur.take(len)?.to_vec())
                    .map_err(|_| Error::Remote("error message is not UTF-8".into()))?;
                Self::Error { code, message }
            }
        };
        if cur.pos != body.len() {
            return Err(Error::Remote(format!(
                "{} trailing bytes after {kind:?} payload",
                body.len() - cur.pos
            )));
        }
        Ok(msg)
    }
}

fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    let ndim = u8::try_from(t.dims().len())
        .map_err(|_| Error::Remote("tensor has more than 255 dimensions".into()))?;
    out.push(ndim);
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Remote("tensor extent exceeds u32".into()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Remote("truncated frame".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Remote("tensor extents overflow".into()))?;
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Remote("tensor too large".into()))?,
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        Tensor::new(dims, data).map_err(|e| Error::Remote(format!("bad tensor: {e}")))
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<()> {
    w.write_all(&msg.encode()?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` on a clean end of stream before a frame.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len);
    if !(5..=MAX_FRAME).contains(&len) {
        return Err(Error::Remote(format!("implausible frame length {len}")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Message::decode(&body).map(Some)
}

/// Answers FMV1 requests with an in-process extractor until the peer closes
/// the stream. This is the loopback responder used to validate clients.
pub fn respond<R: Read, W: Write>(
    extractor: &dyn crate::features::FeatureExtractor,
    reader: &mut R,
    writer: &mut W,
) -> Result<()> {
    use crate::features::LatentVector;
    use crate::percept::ImagePlane;

    let reply_err = |code: u16, e: &dyn std::fmt::Display| Message::Error {
        code,
        message: e.to_string(),
    };
    while let Some(req) = read_message(reader)? {
        let resp = match req {
            Message::HelloReq => Message::HelloResp {
                latent_dim: extractor.latent_dim() as u32,
                protocol_version: PROTOCOL_VERSION,
            },
            Message::ForwardReq { image } => match ImagePlane::from_tensor(image) {
                Err(e) => reply_err(codes::SHAPE_MISMATCH, &e),
                Ok(x) => match extractor.forward(&x) {
                    Ok(z) => Message::ForwardResp {
                        latent: Tensor::vector(z.into_values()),
                    },
                    Err(e) => reply_err(codes::SHAPE_MISMATCH, &e),
                },
            },
            Message::VjpReq { image, cotangent } => {
                let parsed = ImagePlane::from_tensor(image)
                    .and_then(|x| LatentVector::new(cotangent.into_data()).map(|g| (x, g)));
                match parsed {
                    Err(e) => reply_err(codes::SHAPE_MISMATCH, &e),
                    Ok((x, g)) => match extractor.input_vjp(&x, &g) {
                        Ok(gx) => Message::VjpResp {
                            gradient: gx.into_tensor(),
                        },
                        Err(e) => reply_err(codes::SHAPE_MISMATCH, &e),
                    },
                }
            }
            other => reply_err(
                codes::MALFORMED,
                &format!("unexpected request {:?}", other.kind()),
            ),
        };
        write_message(writer, &resp)?;
    }
    Ok(())
}
