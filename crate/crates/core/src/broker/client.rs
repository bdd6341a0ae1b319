use std::io::{self, BufReader};
use std::net::{TcpStream, ToSocketAddrs};

use crate::error::{Error, Result};

use super::protocol::{Request, Response, read_frame, write_frame};

/// Blocking connection to a broker: one request in flight at a time.
pub struct Client {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Client> {
        let stream = TcpStream::connect(addr).map_err(|e| Error::Unavailable(format!("connect: {e}")))?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Client { writer: stream, reader })
    }

    /// Sends a request and returns the reply, error replies included.
    pub fn call(&mut self, req: &Request) -> Result<Response> {
        let body =
            self.call_raw(&req.encode())?.ok_or_else(|| Error::Unavailable("broker closed the connection".into()))?;
        Response::decode(req.opcode(), &body).map_err(|e| Error::Corrupt(format!("bad reply: {e}")))
    }

    /// Sends an arbitrary frame body and reads one reply frame, if the
    /// broker sends one before closing.
    pub fn call_raw(&mut self, body: &[u8]) -> io::Result<Option<Vec<u8>>> {
        write_frame(&mut self.writer, body)?;
        read_frame(&mut self.reader)
    }

    /// Writes raw bytes with no framing.
    pub fn send_bytes(&mut self, bytes: &[u8]) -> io::Result<()> {
        use std::io::Write;
        self.writer.write_all(bytes)
    }

    pub fn read_reply(&mut self) -> io::Result<Option<Vec<u8>>> {
        read_frame(&mut self.reader)
    }
}
