//! Client wire protocol: newline-delimited JSON over TCP.
//!
//! Each request line is an object with a `verb`; each response line has
//! `ok` plus verb-specific fields, or `ok: false` with a stable `code`.
//! A connection must `hello` with its DN before submitting; the DN is the
//! authenticated identity for everything that follows on the connection.
//!
//! Verbs: `hello`, `submit`, `status`, `fetch`, `admin`.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bdb_core::intake::IntakeError;
use serde_json::{json, Value};

use crate::{Broker, SubmitError};

pub struct Server {
    broker: Arc<Broker>,
    listener: TcpListener,
    shutdown: Arc<AtomicBool>,
}

/// How the pump thread maps real time onto the logical clock: each pump
/// interval advances logical time by one collation interval, so queued
/// work is collated and driven promptly no matter how large the
/// configured interval is.
const PUMP_SLEEP: Duration = Duration::from_millis(5);

impl Server {
    pub fn bind(broker: Arc<Broker>, addr: &str) -> std::io::Result<Server> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(Server {
            broker,
            listener,
            shutdown: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<std::net::SocketAddr> {
        self.listener.local_addr()
    }

    pub fn shutdown_handle(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }

    /// Accept loop plus the clock pump. Returns when shut down via the
    /// handle or the `admin shutdown` verb.
    pub fn run(&self) -> std::io::Result<()> {
        let pump_broker = self.broker.clone();
        let pump_stop = self.shutdown.clone();
        let interval = self.broker.config().collation_interval_ms;
        let pump = std::thread::spawn(move || {
            while !pump_stop.load(Ordering::SeqCst) {
                pump_broker.advance(interval);
                pump_broker.tick();
                std::thread::sleep(PUMP_SLEEP);
            }
        });

        let mut workers = Vec::new();
        while !self.shutdown.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    let broker = self.broker.clone();
                    let stop = self.shutdown.clone();
                    workers.push(std::thread::spawn(move || {
                        let _ = serve_connection(broker, stream, stop);
                    }));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(PUMP_SLEEP);
                }
                Err(e) => return Err(e),
            }
        }
        for worker in workers {
            let _ = worker.join();
        }
        let _ = pump.join();
        Ok(())
    }
}

fn error_reply(code: &str, message: &str) -> Value {
    json!({"ok": false, "code": code, "error": message})
}

fn receipt_reply(receipt: &bdb_core::intake::Receipt) -> Value {
    json!({
        "ok": true,
        "receipt": receipt.receipt_id,
        "state": receipt.state.name(),
        "history": receipt.history.iter().map(|(s, t)| json!([s.name(), t])).collect::<Vec<_>>(),
        "location": receipt.result_location,
        "detail": receipt.detail,
    })
}

fn serve_connection(
    broker: Arc<Broker>,
    stream: TcpStream,
    shutdown: Arc<AtomicBool>,
) -> std::io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    let mut dn: Option<String> = None;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle_line(&broker, &mut dn, &shutdown, &line);
        writeln!(writer, "{reply}")?;
        if shutdown.load(Ordering::SeqCst) {
            break;
        }
    }
    Ok(())
}

fn handle_line(
    broker: &Arc<Broker>,
    dn: &mut Option<String>,
    shutdown: &AtomicBool,
    line: &str,
) -> Value {
    let Ok(message) = serde_json::from_str::<Value>(line) else {
        return error_reply("BAD_MESSAGE", "request is not a JSON object");
    };
    let Some(verb) = message.get("verb").and_then(Value::as_str) else {
        return error_reply("BAD_MESSAGE", "missing verb");
    };
    match verb {
        "hello" => match message.get("dn").and_then(Value::as_str) {
            Some(who) => {
                *dn = Some(who.to_string());
                json!({"ok": true, "server": "bdb", "version": 1})
            }
            None => error_reply("BAD_MESSAGE", "hello requires dn"),
        },
        "submit" => {
            let Some(dn) = dn.as_deref() else {
                return error_reply("NO_HELLO", "submit before hello");
            };
            let Some(document) = message.get("document").and_then(Value::as_str) else {
                return error_reply("BAD_MESSAGE", "submit requires document");
            };
            match broker.submit(document, dn) {
                Ok(receipt) => json!({"ok": true, "receipt": receipt.receipt_id, "state": receipt.state.name()}),
                Err(SubmitError::Parse(e)) => error_reply("BAD_DOCUMENT", &e.to_string()),
                Err(SubmitError::Intake(IntakeError::IdentityMismatch)) => {
                    error_reply("IDENTITY_MISMATCH", "requester does not match connection dn")
                }
                Err(SubmitError::Intake(IntakeError::QueueFull)) => {
                    error_reply("QUEUE_FULL", "intake backlog is full; retry later")
                }
                Err(SubmitError::Intake(e)) => error_reply("SERVER_ERROR", &e.to_string()),
            }
        }
        "status" => {
            let Some(receipt_id) = message.get("receipt").and_then(Value::as_str) else {
                return error_reply("BAD_MESSAGE", "status requires receipt");
            };
            match broker.status(receipt_id) {
                Ok(receipt) => receipt_reply(&receipt),
                Err(IntakeError::UnknownReceipt(_)) => {
                    error_reply("UNKNOWN_RECEIPT", receipt_id)
                }
                Err(e) => error_reply("SERVER_ERROR", &e.to_string()),
            }
        }
        "fetch" => {
            let Some(receipt_id) = message.get("receipt").and_then(Value::as_str) else {
                return error_reply("BAD_MESSAGE", "fetch requires receipt");
            };
            let receipt = match broker.status(receipt_id) {
                Ok(receipt) => receipt,
                Err(IntakeError::UnknownReceipt(_)) => {
                    return error_reply("UNKNOWN_RECEIPT", receipt_id)
                }
                Err(e) => return error_reply("SERVER_ERROR", &e.to_string()),
            };
            let Some(location) = receipt.result_location.clone() else {
                return error_reply("NOT_DONE", &format!("receipt is {}", receipt.state.name()));
            };
            let Some((site, path)) = location.split_once(':') else {
                return error_reply("SERVER_ERROR", "malformed result location");
            };
            let Some(file) = broker.delivered_path(site, path) else {
                return error_reply("SERVER_ERROR", "result site no longer configured");
            };
            match std::fs::read(&file) {
                Ok(bytes) => json!({
                    "ok": true,
                    "location": location,
                    "content_hex": hex::encode(bytes),
                }),
                Err(e) => error_reply("SERVER_ERROR", &format!("read result: {e}")),
            }
        }
        "admin" => match message.get("action").and_then(Value::as_str) {
            Some("stats") => json!({
                "ok": true,
                "now_ms": broker.now_ms(),
                "pending": broker.intake.pending_count(),
                "scheduled": broker.scheduler.pending_count(),
                "running": broker.scheduler.running_count(),
                "extractions": broker.extraction_count(),
                "cache_entries": broker.cache.entry_count(),
                "cache_bytes": broker.cache.resident_bytes(),
            }),
            Some("tick") => {
                broker.advance(broker.config().collation_interval_ms);
                broker.tick();
                json!({"ok": true, "now_ms": broker.now_ms()})
            }
            Some("shutdown") => {
                shutdown.store(true, Ordering::SeqCst);
                json!({"ok": true})
            }
            _ => error_reply("BAD_ADMIN", "unknown admin action"),
        },
        other => error_reply("BAD_MESSAGE", &format!("unknown verb {other:?}")),
    }
}
