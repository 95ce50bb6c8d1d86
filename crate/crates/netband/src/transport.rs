//! Frame transports: TCP streams and in-memory channels carrying identical bytes.

use std::io::{BufReader, ErrorKind};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use crate::error::{NetError, NetResult};
use crate::frame::{decode_frame, encode_frame, read_frame, Frame, DEFAULT_MAX_PAYLOAD};

pub trait FrameTx: Send {
    /// Sends one frame and returns the bytes written.
    fn send(&mut self, frame: &Frame) -> NetResult<u64>;
    fn close(&mut self);
}

pub trait FrameRx: Send {
    /// Next frame, `Ok(None)` on orderly close.
    fn recv(&mut self, timeout: Option<Duration>) -> NetResult<Option<Frame>>;
}

pub struct Conn {
    pub tx: Box<dyn FrameTx>,
    pub rx: Box<dyn FrameRx>,
}

struct TcpTx(TcpStream);

impl FrameTx for TcpTx {
    fn send(&mut self, frame: &Frame) -> NetResult<u64> {
        let bytes = encode_frame(frame);
        std::io::Write::write_all(&mut self.0, &bytes)?;
        Ok(bytes.len() as u64)
    }

    fn close(&mut self) {
        let _ = self.0.shutdown(Shutdown::Both);
    }
}

struct TcpRx {
    reader: BufReader<TcpStream>,
    max_payload: u64,
}

impl FrameRx for TcpRx {
    fn recv(&mut self, timeout: Option<Duration>) -> NetResult<Option<Frame>> {
        self.reader.get_ref().set_read_timeout(timeout)?;
        match read_frame(&mut self.reader, self.max_payload) {
            Err(NetError::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                Err(NetError::Timeout {
                    phase: "receive".into(),
                    secs: timeout.map_or(0, |t| t.as_secs()),
                })
            }
            Err(NetError::Io(e))
                if matches!(
                    e.kind(),
                    ErrorKind::ConnectionReset | ErrorKind::ConnectionAborted | ErrorKind::BrokenPipe
                ) =>
            {
                Ok(None)
            }
            other => other,
        }
    }
}

pub fn tcp_conn(stream: TcpStream, max_payload: u64) -> NetResult<Conn> {
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    Ok(Conn {
        tx: Box::new(TcpTx(stream)),
        rx: Box::new(TcpRx { reader, max_payload }),
    })
}

struct MemTx(Option<Sender<Vec<u8>>>);

impl FrameTx for MemTx {
    fn send(&mut self, frame: &Frame) -> NetResult<u64> {
        let bytes = encode_frame(frame);
        let n = bytes.len() as u64;
        match &self.0 {
            Some(s) => s.send(bytes).map_err(|_| NetError::Closed)?,
            None => return Err(NetError::Closed),
        }
        Ok(n)
    }

    fn close(&mut self) {
        self.0 = None;
    }
}

struct MemRx(Receiver<Vec<u8>>);

impl FrameRx for MemRx {
    fn recv(&mut self, timeout: Option<Duration>) -> NetResult<Option<Frame>> {
        let bytes = match timeout {
            None => match self.0.recv() {
                Ok(b) => b,
                Err(_) => return Ok(None),
            },
            Some(t) => match self.0.recv_timeout(t) {
                Ok(b) => b,
                Err(RecvTimeoutError::Disconnected) => return Ok(None),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(NetError::Timeout {
                        phase: "receive".into(),
                        secs: t.as_secs(),
                    })
                }
            },
        };
        decode_frame(&bytes, DEFAULT_MAX_PAYLOAD).map(Some)
    }
}

/// Two connected in-memory endpoints.
pub fn mem_pair() -> (Conn, Conn) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        Conn {
            tx: Box::new(MemTx(Some(a_tx))),
            rx: Box::new(MemRx(a_rx)),
        },
        Conn {
            tx: Box::new(MemTx(Some(b_tx))),
            rx: Box::new(MemRx(b_rx)),
        },
    )
}
