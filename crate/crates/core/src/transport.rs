//! Blocking, ordered message links between the client and server roles.
//!
//! Both transports carry complete serialised frames, so the in-process link
//! exercises exactly the bytes a TCP peer would see.

use std::fmt;
use std::io::{self, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wire::{self, Dtype, Message};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    InProcess,
    Tcp,
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::InProcess => "inprocess",
            TransportKind::Tcp => "tcp",
        })
    }
}

impl FromStr for TransportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "inprocess" | "local" => Ok(TransportKind::InProcess),
            "tcp" => Ok(TransportKind::Tcp),
            _ => Err(Error::Config(format!("unknown transport `{s}`"))),
        }
    }
}

/// Raw frame carrier.
pub trait Link: Send {
    fn send_frame(&mut self, frame: Vec<u8>) -> io::Result<()>;
    /// `Ok(None)` once the peer has gone away cleanly.
    fn recv_frame(&mut self) -> io::Result<Option<Vec<u8>>>;
}

struct ChannelLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl Link for ChannelLink {
    fn send_frame(&mut self, frame: Vec<u8>) -> io::Result<()> {
        self.tx
            .send(frame)
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer hung up"))
    }

    fn recv_frame(&mut self) -> io::Result<Option<Vec<u8>>> {
        Ok(self.rx.recv().ok())
    }
}

struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Link for TcpLink {
    fn send_frame(&mut self, frame: Vec<u8>) -> io::Result<()> {
        self.writer.write_all(&frame)?;
        self.writer.flush()
    }

    fn recv_frame(&mut self) -> io::Result<Option<Vec<u8>>> {
        wire::read_frame(&mut self.reader)
    }
}

/// One side of a link, speaking whole messages.
pub struct Endpoint {
    link: Box<dyn Link>,
    dtype: Dtype,
    iteration: u32,
}

impl fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Endpoint")
            .field("dtype", &self.dtype)
            .field("iteration", &self.iteration)
            .finish_non_exhaustive()
    }
}

impl Endpoint {
    pub fn new(link: Box<dyn Link>, dtype: Dtype) -> Self {
        Self {
            link,
            dtype,
            iteration: 0,
        }
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn set_dtype(&mut self, dtype: Dtype) {
        self.dtype = dtype;
    }

    /// Iteration reported in transport errors.
    pub fn set_iteration(&mut self, iteration: u32) {
        self.iteration = iteration;
    }

    fn failure(&self, message: impl Into<String>) -> Error {
        Error::Transport {
            iteration: self.iteration,
            message: message.into(),
        }
    }

    pub fn send(&mut self, msg: &Message) -> Result<()> {
        let frame = wire::encode(msg, self.dtype);
        self.link
            .send_frame(frame)
            .map_err(|e| self.failure(format!("sending {}: {e}", msg.name())))
    }

    pub fn recv(&mut self) -> Result<Message> {
        let frame = self
            .link
            .recv_frame()
            .map_err(|e| self.failure(format!("receiving: {e}")))?
            .ok_or_else(|| self.failure("connection closed by peer"))?;
        Ok(wire::decode(&frame)?.0)
    }
}

/// Two connected endpoints backed by channels.
pub fn in_process_pair(dtype: Dtype) -> (Endpoint, Endpoint) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        Endpoint::new(Box::new(ChannelLink { tx: a_tx, rx: a_rx }), dtype),
        Endpoint::new(Box::new(ChannelLink { tx: b_tx, rx: b_rx }), dtype),
    )
}

fn tcp_endpoint(stream: TcpStream, dtype: Dtype) -> io::Result<Endpoint> {
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    Ok(Endpoint::new(Box::new(TcpLink { reader, writer: stream }), dtype))
}

/// Connects to a listening server, retrying refused connections until
/// `patience` has elapsed.
pub fn tcp_connect(addr: &str, dtype: Dtype, patience: Duration) -> Result<Endpoint> {
    let fail = |e: io::Error| Error::Transport {
        iteration: 0,
        message: format!("connecting to {addr}: {e}"),
    };
    let targets: Vec<SocketAddr> = addr.to_socket_addrs().map_err(fail)?.collect();
    let start = Instant::now();
    loop {
        match TcpStream::connect(&targets[..]) {
            Ok(stream) => return tcp_endpoint(stream, dtype).map_err(fail),
            Err(_) if start.elapsed() < patience => {
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(fail(e)),
        }
    }
}

/// Listening socket for the server role.
#[derive(Debug)]
pub struct TcpServer {
    listener: TcpListener,
}

impl TcpServer {
    pub fn bind(addr: &str) -> Result<Self> {
        let listener = TcpListener::bind(addr).map_err(|e| Error::Transport {
            iteration: 0,
            message: format!("binding {addr}: {e}"),
        })?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        self.listener.local_addr().map_err(|e| Error::Transport {
            iteration: 0,
            message: e.to_string(),
        })
    }

    pub fn accept(&self, dtype: Dtype) -> Result<Endpoint> {
        let fail = |e: io::Error| Error::Transport {
            iteration: 0,
            message: format!("accepting: {e}"),
        };
        let (stream, _) = self.listener.accept().map_err(fail)?;
        tcp_endpoint(stream, dtype).map_err(fail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn channel_preserves_order() {
        let (mut a, mut b) = in_process_pair(Dtype::F32);
        for i in 0..1000u32 {
            a.send(&Message::EvalResponse {
                iteration: i,
                logits: Tensor::scalar(i as f64),
            })
            .unwrap();
        }
        for i in 0..1000u32 {
            match b.recv().unwrap() {
                Message::EvalResponse { iteration, .. } => assert_eq!(iteration, i),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn hang_up_is_a_transport_error() {
        let (mut a, b) = in_process_pair(Dtype::F32);
        drop(b);
        a.set_iteration(12);
        match a.recv() {
            Err(Error::Transport { iteration: 12, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transport_names() {
        assert_eq!("tcp".parse::<TransportKind>().unwrap(), TransportKind::Tcp);
        assert_eq!("in-process".parse::<TransportKind>().unwrap(), TransportKind::InProcess);
        assert!("udp".parse::<TransportKind>().is_err());
    }
}
