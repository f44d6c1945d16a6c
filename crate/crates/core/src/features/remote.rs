use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use super::wire::{read_message, write_message, Message, PROTOCOL_VERSION};
use super::{FeatureExtractor, LatentVector};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::percept::ImagePlane;

/// Byte streams to a feature server.
pub struct Transport {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: BufWriter<Box<dyn Write + Send>>,
    child: Option<Child>,
}

impl Transport {
    pub fn from_streams(reader: Box<dyn Read + Send>, writer: Box<dyn Write + Send>) -> Self {
        Self {
            reader: BufReader::new(reader),
            writer: BufWriter::new(writer),
            child: None,
        }
    }

    /// Opens `tcp://HOST:PORT`, a bare `HOST:PORT`, or `stdio:COMMAND ARGS...`
    /// (spawns the command and talks over its stdin/stdout).
    pub fn open(endpoint: &str) -> Result<Self> {
        if let Some(cmd) = endpoint.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace();
            let prog = parts
                .next()
                .ok_or_else(|| Error::Remote("empty stdio command".into()))?;
            let mut child = Command::new(prog)
                .args(parts)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()
                .map_err(|e| Error::Remote(format!("cannot spawn `{cmd}`: {e}")))?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            let mut t = Self::from_streams(Box::new(stdout), Box::new(stdin));
            t.child = Some(child);
            return Ok(t);
        }
        let addr = endpoint.strip_prefix("tcp://").unwrap_or(endpoint);
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Remote(format!("cannot connect to {addr}: {e}")))?;
        stream.set_nodelay(true).ok();
        let read_half = stream
            .try_clone()
            .map_err(|e| Error::Remote(format!("socket clone failed: {e}")))?;
        Ok(Self::from_streams(Box::new(read_half), Box::new(stream)))
    }

    fn call(&mut self, req: &Message) -> Result<Message> {
        let remote = |e: Error| match e {
            Error::Remote(_) => e,
            other => Error::Remote(other.to_string()),
        };
        write_message(&mut self.writer, req).map_err(remote)?;
        match read_message(&mut self.reader).map_err(remote)? {
            None => Err(Error::Remote("server closed the connection".into())),
            Some(Message::Error { code, message }) => Err(Error::Remote(format!(
                "server error 0x{code:02x}: {message}"
            ))),
            Some(m) => Ok(m),
        }
    }
}

impl Drop for Transport {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            let _ = self.writer.flush();
            self.writer = BufWriter::new(Box::new(std::io::sink()));
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Extractor served over FMV1. Wire precision is f32.
pub struct RemoteExtractor {
    dim: usize,
    conn: Mutex<Transport>,
}

impl RemoteExtractor {
    pub fn connect(endpoint: &str, dim: usize) -> Result<Self> {
        Self::with_transport(Transport::open(endpoint)?, dim)
    }

    /// Performs the HELLO handshake and checks version and latent dimension.
    pub fn with_transport(mut transport: Transport, dim: usize) -> Result<Self> {
        match transport.call(&Message::HelloReq)? {
            Message::HelloResp {
                latent_dim,
                protocol_version,
            } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Err(Error::Remote(format!(
                        "protocol version {protocol_version}, expected {PROTOCOL_VERSION}"
                    )));
                }
                if latent_dim as usize != dim {
                    return Err(Error::Remote(format!(
                        "server latent dim {latent_dim} != requested {dim}"
                    )));
                }
            }
            other => {
                return Err(Error::Remote(format!(
                    "expected HELLO_RESP, got {:?}",
                    other.kind()
                )))
            }
        }
        Ok(Self {
            dim,
            conn: Mutex::new(transport),
        })
    }

    fn call(&self, req: &Message) -> Result<Message> {
        self.conn
            .lock()
            .map_err(|_| Error::Remote("connection poisoned by an earlier panic".into()))?
            .call(req)
    }
}

impl FeatureExtractor for RemoteExtractor {
    fn latent_dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, x: &ImagePlane) -> Result<LatentVector> {
        let req = Message::ForwardReq {
            image: x.as_tensor().clone(),
        };
        match self.call(&req)? {
            Message::ForwardResp { latent } => {
                if latent.len() != self.dim {
                    return Err(Error::Remote(format!(
                        "latent of length {} from a {}-dim server",
                        latent.len(),
                        self.dim
                    )));
                }
                LatentVector::new(latent.into_data())
                    .map_err(|e| Error::Remote(format!("bad latent: {e}")))
            }
            other => Err(Error::Remote(format!(
                "expected FORWARD_RESP, got {:?}",
                other.kind()
            ))),
        }
    }

    fn input_vjp(&self, x: &ImagePlane, g: &LatentVector) -> Result<ImagePlane> {
        g.check_dim(self.dim)?;
        let req = Message::VjpReq {
            image: x.as_tensor().clone(),
            cotangent: Tensor::vector(g.values().to_vec()),
        };
        match self.call(&req)? {
            Message::VjpResp { gradient } => {
                if gradient.dims() != x.as_tensor().dims() {
                    return Err(Error::Remote(format!(
                        "gradient shape {:?} for image {:?}",
                        gradient.dims(),
                        x.as_tensor().dims()
                    )));
                }
                ImagePlane::from_tensor(gradient)
            }
            other => Err(Error::Remote(format!(
                "expected VJP_RESP, got {:?}",
                other.kind()
            ))),
        }
    }
}
