//! Minimal client for the broker's newline-delimited JSON protocol.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;

use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("cannot connect to {addr}: {reason}")]
    Connect { addr: String, reason: String },
    #[error("connection lost: {0}")]
    Io(String),
    #[error("malformed server reply: {0}")]
    BadReply(String),
    #[error("server error {code}: {message}")]
    Server { code: String, message: String },
}

pub struct Client {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Client {
    /// Connect and introduce the caller's DN.
    pub fn connect(addr: &str, dn: &str) -> Result<Client, WireError> {
        let stream = TcpStream::connect(addr).map_err(|e| WireError::Connect {
            addr: addr.to_string(),
            reason: e.to_string(),
        })?;
        let writer = stream.try_clone().map_err(|e| WireError::Io(e.to_string()))?;
        let mut client = Client {
            writer,
            reader: BufReader::new(stream),
        };
        client.call(json!({"verb": "hello", "dn": dn}))?;
        Ok(client)
    }

    /// One request line, one reply line. `ok: false` replies become
    /// [`WireError::Server`] with the server's stable code.
    pub fn call(&mut self, message: Value) -> Result<Value, WireError> {
        writeln!(self.writer, "{message}").map_err(|e| WireError::Io(e.to_string()))?;
        let mut line = String::new();
        let n = self.reader.read_line(&mut line).map_err(|e| WireError::Io(e.to_string()))?;
        if n == 0 {
            return Err(WireError::Io("server closed the connection".into()));
        }
        let reply: Value =
            serde_json::from_str(&line).map_err(|e| WireError::BadReply(e.to_string()))?;
        if reply.get("ok").and_then(Value::as_bool) == Some(true) {
            Ok(reply)
        } else {
            Err(WireError::Server {
                code: reply
                    .get("code")
                    .and_then(Value::as_str)
                    .unwrap_or("UNKNOWN")
                    .to_string(),
                message: reply
                    .get("error")
                    .and_then(Value::as_str)
                    .unwrap_or("unspecified server error")
                    .to_string(),
            })
        }
    }
}
