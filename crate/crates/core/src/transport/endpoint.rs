use std::io::{BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::frame::{read_frame, Frame};
use crate::error::{Error, Result};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Device,
    Aggregator,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteCounters {
    pub sent: u64,
    pub received: u64,
}

/// A framed, counted, blocking message pipe.
pub trait Endpoint {
    fn role(&self) -> Role;
    fn address(&self) -> String;
    fn send(&mut self, frame: &Frame) -> Result<()>;
    fn recv(&mut self) -> Result<Frame>;
    fn counters(&self) -> ByteCounters;
}

/// In-process endpoint. Frames are encoded on send and decoded on receive,
/// exactly as on a socket.
pub struct Loopback {
    role: Role,
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    counters: ByteCounters,
    timeout: Duration,
}

/// Connected (device, aggregator) loopback endpoints.
pub fn loopback_pair() -> (Loopback, Loopback) {
    let (to_agg, from_dev) = channel();
    let (to_dev, from_agg) = channel();
    let mk = |role, tx, rx| Loopback {
        role,
        tx,
        rx,
        counters: ByteCounters::default(),
        timeout: DEFAULT_TIMEOUT,
    };
    (mk(Role::Device, to_agg, from_agg), mk(Role::Aggregator, to_dev, from_dev))
}

impl Loopback {
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

impl Endpoint for Loopback {
    fn role(&self) -> Role {
        self.role
    }

    fn address(&self) -> String {
        format!("loopback:{:?}", self.role).to_lowercase()
    }

    fn send(&mut self, frame: &Frame) -> Result<()> {
        let bytes = frame.encode();
        let n = bytes.len() as u64;
        self.tx
            .send(bytes)
            .map_err(|_| Error::protocol(0, "loopback peer hung up"))?;
        self.counters.sent += n;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame> {
        let bytes = self.rx.recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Timeout(format!("no frame within {:?}", self.timeout)),
            RecvTimeoutError::Disconnected => Error::protocol(0, "loopback peer hung up"),
        })?;
        let frame = Frame::decode(&bytes)?;
        self.counters.received += bytes.len() as u64;
        Ok(frame)
    }

    fn counters(&self) -> ByteCounters {
        self.counters
    }
}

/// Socket endpoint with a read timeout.
pub struct TcpEndpoint {
    role: Role,
    peer: String,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    counters: ByteCounters,
}

impl TcpEndpoint {
    fn from_stream(role: Role, stream: TcpStream, timeout: Duration) -> Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
        Ok(Self {
            role,
            peer,
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            counters: ByteCounters::default(),
        })
    }

    pub fn connect<A: ToSocketAddrs>(addr: A, timeout: Duration) -> Result<Self> {
        let mut last = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(s) => return Self::from_stream(Role::Device, s, timeout),
                Err(e) => last = Some(e),
            }
        }
        Err(last.map(Error::from).unwrap_or_else(|| Error::config("address resolved to nothing")))
    }

    /// Blocks for one incoming session.
    pub fn accept(listener: &TcpListener, timeout: Duration) -> Result<Self> {
        let (stream, _) = listener.accept()?;
        Self::from_stream(Role::Aggregator, stream, timeout)
    }
}

impl Endpoint for TcpEndpoint {
    fn role(&self) -> Role {
        self.role
    }

    fn address(&self) -> String {
        self.peer.clone()
    }

    fn send(&mut self, frame: &Frame) -> Result<()> {
        let bytes = frame.encode();
        self.writer.write_all(&bytes)?;
        self.writer.flush()?;
        self.counters.sent += bytes.len() as u64;
        Ok(())
    }

    fn recv(&mut self) -> Result<Frame> {
        let (frame, n) = read_frame(&mut self.reader)?;
        self.counters.received += n as u64;
        Ok(frame)
    }

    fn counters(&self) -> ByteCounters {
        self.counters
    }
}
