//! Nonblocking connection buffers shared by both server modes.

use std::io::{self, ErrorKind, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use crate::wire::{Request, WireError};

const READ_CHUNK: usize = 64 * 1024;

pub struct Conn {
    stream: TcpStream,
    inbuf: Vec<u8>,
    start: usize,
    eof: bool,
}

impl Conn {
    pub fn new(stream: TcpStream) -> io::Result<Conn> {
        stream.set_nonblocking(true)?;
        stream.set_nodelay(true)?;
        Ok(Conn {
            stream,
            inbuf: Vec::with_capacity(READ_CHUNK),
            start: 0,
            eof: false,
        })
    }

    pub fn eof(&self) -> bool {
        self.eof
    }

    /// Reads whatever the socket has buffered; returns the byte count.
    pub fn fill(&mut self) -> io::Result<usize> {
        if self.start > 0 && self.start == self.inbuf.len() {
            self.inbuf.clear();
            self.start = 0;
        } else if self.start > READ_CHUNK {
            self.inbuf.drain(..self.start);
            self.start = 0;
        }
        let mut total = 0;
        loop {
            let at = self.inbuf.len();
            self.inbuf.resize(at + READ_CHUNK, 0);
            match self.stream.read(&mut self.inbuf[at..]) {
                Ok(0) => {
                    self.inbuf.truncate(at);
                    self.eof = true;
                    return Ok(total);
                }
                Ok(n) => {
                    self.inbuf.truncate(at + n);
                    total += n;
                    if n < READ_CHUNK {
                        return Ok(total);
                    }
                }
                Err(e) => {
                    self.inbuf.truncate(at);
                    return match e.kind() {
                        ErrorKind::WouldBlock => Ok(total),
                        ErrorKind::Interrupted => continue,
                        _ => Err(e),
                    };
                }
            }
        }
    }

    /// Next complete request in the input buffer.
    pub fn next_request(&mut self) -> Result<Option<Request>, WireError> {
        match Request::decode(&self.inbuf[self.start..])? {
            Some((req, n)) => {
                self.start += n;
                Ok(Some(req))
            }
            None => Ok(None),
        }
    }

    /// True when bytes of an incomplete frame are buffered.
    pub fn partial(&self) -> bool {
        self.start < self.inbuf.len()
    }

    /// Writes as much of `out` as the socket accepts and removes it.
    pub fn flush(&mut self, out: &mut Vec<u8>) -> io::Result<()> {
        let mut written = 0;
        while written < out.len() {
            match self.stream.write(&out[written..]) {
                Ok(0) => return Err(ErrorKind::WriteZero.into()),
                Ok(n) => written += n,
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        out.drain(..written);
        Ok(())
    }
}

/// Escalating pause for loops that poll sockets.
#[derive(Default)]
pub struct Idle {
    rounds: u32,
}

impl Idle {
    pub fn reset(&mut self) {
        self.rounds = 0;
    }

    pub fn pause(&mut self) {
        self.rounds = self.rounds.saturating_add(1);
        if self.rounds < 64 {
            std::hint::spin_loop();
        } else if self.rounds < 4096 {
            std::thread::yield_now();
        } else {
            std::thread::sleep(Duration::from_micros(100));
        }
    }
}
