//! Message channels between a prover and a verifier. Every send passes an
//! [`Interposer`] that may deliver, drop, replace or delay it, and lands in
//! the channel's [`Transcript`].

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

/// Frames above this size are refused.
pub const MAX_FRAME: usize = 16 << 20;
pub const DEFAULT_STEP_BUDGET: u32 = 4;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("channel closed")]
    ChannelClosed,
    #[error("frame of {0} bytes exceeds limit")]
    FrameTooLarge(usize),
    #[error("truncated frame")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    ToVerifier,
    ToProver,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Deliver,
    Drop,
    Replace(Vec<u8>),
    Delay(u32),
}

pub trait Interposer {
    fn intercept(&mut self, step: u64, direction: Direction, bytes: &[u8]) -> Action;
}

impl<F: FnMut(u64, Direction, &[u8]) -> Action> Interposer for F {
    fn intercept(&mut self, step: u64, direction: Direction, bytes: &[u8]) -> Action {
        self(step, direction, bytes)
    }
}

/// Delivers everything untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl Interposer for Passthrough {
    fn intercept(&mut self, _: u64, _: Direction, _: &[u8]) -> Action {
        Action::Deliver
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub step: u64,
    pub direction: Direction,
    pub original: Vec<u8>,
    /// `None` when dropped.
    pub delivered: Option<Vec<u8>>,
    pub delay: u32,
}

impl Event {
    pub fn untouched(&self) -> bool {
        self.delivered.as_deref() == Some(&self.original[..])
    }
}

/// Append-only log of channel traversals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    events: Vec<Event>,
}

impl Transcript {
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    fn push(&mut self, event: Event) {
        self.events.push(event);
    }
}

pub trait Channel {
    fn send(&mut self, direction: Direction, bytes: &[u8]) -> Result<(), TransportError>;
    /// Wait up to the step budget for a message travelling in `direction`.
    fn recv(&mut self, direction: Direction) -> Result<Option<Vec<u8>>, TransportError>;
    fn transcript(&self) -> &Transcript;
    fn close(&mut self);
}

fn interpose(
    interposer: &mut dyn Interposer,
    transcript: &mut Transcript,
    step: u64,
    direction: Direction,
    bytes: &[u8],
) -> Option<(Vec<u8>, u32)> {
    let action = interposer.intercept(step, direction, bytes);
    let (delivered, delay) = match action {
        Action::Deliver => (Some(bytes.to_vec()), 0),
        Action::Drop => (None, 0),
        Action::Replace(b) => (Some(b), 0),
        Action::Delay(d) => (Some(bytes.to_vec()), d),
    };
    transcript.push(Event {
        step,
        direction,
        original: bytes.to_vec(),
        delivered: delivered.clone(),
        delay,
    });
    delivered.map(|d| (d, delay))
}

/// Deterministic in-process channel driven by a step counter.
pub struct MemoryChannel<'a> {
    interposer: Box<dyn Interposer + 'a>,
    step: u64,
    budget: u32,
    queue: VecDeque<(u64, Direction, Vec<u8>)>,
    transcript: Transcript,
    closed: bool,
}

impl<'a> MemoryChannel<'a> {
    pub fn new(interposer: impl Interposer + 'a) -> Self {
        Self::with_budget(interposer, DEFAULT_STEP_BUDGET)
    }

    pub fn with_budget(interposer: impl Interposer + 'a, budget: u32) -> Self {
        Self {
            interposer: Box::new(interposer),
            step: 0,
            budget,
            queue: VecDeque::new(),
            transcript: Transcript::default(),
            closed: false,
        }
    }

    pub fn honest() -> Self {
        Self::new(Passthrough)
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }
}

impl Channel for MemoryChannel<'_> {
    fn send(&mut self, direction: Direction, bytes: &[u8]) -> Result<(), TransportError> {
        if self.closed {
            return Err(TransportError::ChannelClosed);
        }
        self.step += 1;
        if let Some((bytes, delay)) = interpose(self.interposer.as_mut(), &mut self.transcript, self.step, direction, bytes) {
            self.queue.push_back((self.step + delay as u64, direction, bytes));
        }
        Ok(())
    }

    fn recv(&mut self, direction: Direction) -> Result<Option<Vec<u8>>, TransportError> {
        if self.closed {
            return Err(TransportError::ChannelClosed);
        }
        for waited in 0..=self.budget {
            if waited > 0 {
                self.step += 1;
            }
            let ready = self
                .queue
                .iter()
                .position(|(at, d, _)| *d == direction && *at <= self.step);
            if let Some(i) = ready {
                return Ok(self.queue.remove(i).map(|(_, _, b)| b));
            }
        }
        Ok(None)
    }

    fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    fn close(&mut self) {
        self.closed = true;
    }
}

pub fn write_frame(w: &mut impl Write, bytes: &[u8]) -> Result<(), TransportError> {
    if bytes.len() > MAX_FRAME {
        return Err(TransportError::FrameTooLarge(bytes.len()));
    }
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Vec<u8>, TransportError> {
    let mut len = [0u8; 4];
    read_exact(r, &mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(TransportError::FrameTooLarge(len));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), TransportError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TransportError::Truncated,
        _ => TransportError::Io(e),
    })
}

/// Loopback TCP connection carrying length-prefixed frames, prover on one
/// end and verifier on the other.
pub struct SocketChannel<'a> {
    prover_end: TcpStream,
    verifier_end: TcpStream,
    interposer: Box<dyn Interposer + 'a>,
    step: u64,
    step_time: Duration,
    budget: u32,
    transcript: Transcript,
    closed: bool,
}

/// Bind `address`, connect to it and accept the connection.
pub fn open_socket_transport(address: impl ToSocketAddrs) -> Result<SocketChannel<'static>, TransportError> {
    let listener = TcpListener::bind(address)?;
    let prover_end = TcpStream::connect(listener.local_addr()?)?;
    let (verifier_end, _) = listener.accept()?;
    prover_end.set_nodelay(true)?;
    verifier_end.set_nodelay(true)?;
    Ok(SocketChannel {
        prover_end,
        verifier_end,
        interposer: Box::new(Passthrough),
        step: 0,
        step_time: Duration::from_millis(250),
        budget: DEFAULT_STEP_BUDGET,
        transcript: Transcript::default(),
        closed: false,
    })
}

impl<'a> SocketChannel<'a> {
    pub fn with_interposer<'b>(self, interposer: impl Interposer + 'b) -> SocketChannel<'b> {
        SocketChannel {
            prover_end: self.prover_end,
            verifier_end: self.verifier_end,
            interposer: Box::new(interposer),
            step: self.step,
            step_time: self.step_time,
            budget: self.budget,
            transcript: self.transcript,
            closed: self.closed,
        }
    }

    /// Wall time standing in for one channel step.
    pub fn with_step_time(mut self, step_time: Duration) -> Self {
        self.step_time = step_time;
        self
    }

    pub fn local_addr(&self) -> io::Result<std::net::SocketAddr> {
        self.verifier_end.local_addr()
    }

    fn ends(&mut self, direction: Direction) -> (&mut TcpStream, &mut TcpStream) {
        match direction {
            Direction::ToVerifier => (&mut self.prover_end, &mut self.verifier_end),
            Direction::ToProver => (&mut self.verifier_end, &mut self.prover_end),
        }
    }

    /// Write raw bytes onto the stream, bypassing framing.
    pub fn send_raw(&mut self, direction: Direction, bytes: &[u8]) -> Result<(), TransportError> {
        let (tx, _) = self.ends(direction);
        tx.write_all(bytes)?;
        Ok(())
    }
}

impl Channel for SocketChannel<'_> {
    fn send(&mut self, direction: Direction, bytes: &[u8]) -> Result<(), TransportError> {
        if self.closed {
            return Err(TransportError::ChannelClosed);
        }
        self.step += 1;
        let Some((bytes, delay)) = interpose(self.interposer.as_mut(), &mut self.transcript, self.step, direction, bytes) else {
            return Ok(());
        };
        if delay > self.budget {
            return Ok(());
        }
        std::thread::sleep(self.step_time * delay);
        let (tx, _) = self.ends(direction);
        write_frame(tx, &bytes)
    }

    fn recv(&mut self, direction: Direction) -> Result<Option<Vec<u8>>, TransportError> {
        if self.closed {
            return Err(TransportError::ChannelClosed);
        }
        let wait = self.step_time * (self.budget + 1);
        let (_, rx) = self.ends(direction);
        rx.set_read_timeout(Some(wait))?;
        match read_frame(rx) {
            Ok(frame) => Ok(Some(frame)),
            Err(TransportError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    fn close(&mut self) {
        self.closed = true;
        let _ = self.prover_end.shutdown(std::net::Shutdown::Both);
    }
}
