//! Framed TCP connections with short read timeouts, so one thread can poll
//! several peers in turn.

use std::io::{self, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::Duration;

use super::codec::DecodeError;
use super::wire::{pump, write_message, Frame, FrameBuffer, WireMessage};

pub const POLL: Duration = Duration::from_millis(2);

pub struct Link {
    stream: TcpStream,
    frames: FrameBuffer,
    pub peer: SocketAddr,
}

#[derive(Debug)]
pub enum Polled {
    Frames(Vec<Frame>),
    /// Peer closed the connection or the stream failed.
    Closed(Option<io::Error>),
    /// Stream carried bytes that do not frame; the connection is unusable.
    Corrupt(DecodeError),
}

impl Link {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_read_timeout(Some(POLL))?;
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        Ok(Link {
            stream,
            frames: FrameBuffer::new(),
            peer,
        })
    }

    pub fn connect(addr: SocketAddr) -> io::Result<Self> {
        Self::new(TcpStream::connect_timeout(&addr, Duration::from_millis(500))?)
    }

    pub fn send(&mut self, msg: &WireMessage) -> io::Result<()> {
        write_message(&mut self.stream, msg)
    }

    pub fn send_all(&mut self, msgs: &[WireMessage]) -> io::Result<()> {
        let mut bytes = Vec::new();
        for m in msgs {
            bytes.extend_from_slice(&m.encode());
        }
        self.stream.write_all(&bytes)?;
        self.stream.flush()
    }

    /// Reads whatever arrived within the poll timeout and returns the
    /// complete frames.
    pub fn poll(&mut self) -> Polled {
        let open = match pump(&mut self.stream, &mut self.frames) {
            Ok(open) => open,
            Err(e) => return Polled::Closed(Some(e)),
        };
        let mut out = Vec::new();
        loop {
            match self.frames.next_frame() {
                Ok(Some(f)) => out.push(f),
                Ok(None) => break,
                Err(e) => return Polled::Corrupt(e),
            }
        }
        if !open && out.is_empty() {
            return Polled::Closed(None);
        }
        Polled::Frames(out)
    }
}

/// Listener whose `accept` never blocks.
pub struct Acceptor {
    listener: TcpListener,
}

impl Acceptor {
    pub fn bind(addr: SocketAddr) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(Acceptor { listener })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn try_accept(&self) -> io::Result<Option<Link>> {
        match self.listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                Ok(Some(Link::new(stream)?))
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => Ok(None),
            Err(e) => Err(e),
        }
    }
}
