//! Line-based TCP replay of position messages.
//!
//! Wire grammar: one JSON object per LF-terminated line with keys exactly
//! `id`, `ts`, `x`, `y`, `z` (same as the position JSONL log). The layout is
//! modelled loosely on a simple location message protocol export; it is this
//! crate's own grammar, not a vendor format.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Arc, RwLock};

use serde::Serialize;

use super::{parse_position_json, IngestError, PositionSample, Rejection};

/// Single writer half of an append-only sample log.
#[derive(Debug)]
pub struct SeriesWriter<T> {
    shared: Arc<RwLock<Vec<T>>>,
}

/// Read half; any number of clones may snapshot the completed prefix.
#[derive(Debug, Clone)]
pub struct SeriesReader<T> {
    shared: Arc<RwLock<Vec<T>>>,
}

pub fn series_sink<T>() -> (SeriesWriter<T>, SeriesReader<T>) {
    let shared = Arc::new(RwLock::new(Vec::new()));
    (
        SeriesWriter {
            shared: Arc::clone(&shared),
        },
        SeriesReader { shared },
    )
}

impl<T> SeriesWriter<T> {
    pub fn append(&mut self, item: T) {
        self.shared
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .push(item);
    }
}

impl<T: Clone> SeriesReader<T> {
    pub fn snapshot(&self) -> Vec<T> {
        self.shared
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn len(&self) -> usize {
        self.shared.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SessionSummary {
    pub accepted: u64,
    pub rejected: u64,
    pub rejections: Vec<Rejection>,
}

pub struct LocationListener {
    listener: TcpListener,
}

impl LocationListener {
    pub fn bind(endpoint: &str) -> Result<Self, IngestError> {
        let bind_err = |source| IngestError::BindFailure {
            endpoint: endpoint.to_string(),
            source,
        };
        let addrs: Vec<SocketAddr> = endpoint.to_socket_addrs().map_err(bind_err)?.collect();
        let listener = TcpListener::bind(&addrs[..]).map_err(bind_err)?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accept one connection and consume it until the peer closes.
    pub fn accept_session(
        &self,
        sink: &mut SeriesWriter<PositionSample>,
    ) -> Result<SessionSummary, IngestError> {
        let (stream, peer) = self.listener.accept()?;
        log::info!("location stream connected from {peer}");
        let summary = consume_lines(stream, sink)?;
        log::info!(
            "location stream closed: {} accepted, {} rejected",
            summary.accepted,
            summary.rejected
        );
        Ok(summary)
    }
}

fn consume_lines(
    stream: impl Read,
    sink: &mut SeriesWriter<PositionSample>,
) -> Result<SessionSummary, IngestError> {
    let mut reader = BufReader::new(stream);
    let mut summary = SessionSummary::default();
    let mut buf = Vec::new();
    let mut line = 0u64;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        line += 1;
        if buf.last() == Some(&b'\n') {
            buf.pop();
        }
        let parsed = match std::str::from_utf8(&buf) {
            Ok(text) if text.trim().is_empty() => Err("blank line".to_string()),
            Ok(text) => parse_position_json(text),
            Err(e) => Err(format!("invalid UTF-8: {e}")),
        };
        match parsed {
            Ok(sample) => {
                sink.append(sample);
                summary.accepted += 1;
            }
            Err(reason) => {
                summary.rejected += 1;
                summary.rejections.push(Rejection { line, reason });
            }
        }
    }
    Ok(summary)
}

/// Bind `endpoint`, accept a single replay session and append every valid
/// message to `sink`. Returns once the peer closes the connection.
pub fn listen_location_stream(
    endpoint: &str,
    sink: &mut SeriesWriter<PositionSample>,
) -> Result<SessionSummary, IngestError> {
    LocationListener::bind(endpoint)?.accept_session(sink)
}

/// Client side: send the lines of `source` to a listening endpoint.
/// Each line is LF-terminated on the wire. Returns the number of lines sent.
pub fn replay_position_stream(addr: impl ToSocketAddrs, source: impl Read) -> io::Result<u64> {
    let mut stream = TcpStream::connect(addr)?;
    let mut reader = BufReader::new(source);
    let mut buf = Vec::new();
    let mut sent = 0;
    loop {
        buf.clear();
        if reader.read_until(b'\n', &mut buf)? == 0 {
            break;
        }
        if buf.last() != Some(&b'\n') {
            buf.push(b'\n');
        }
        stream.write_all(&buf)?;
        sent += 1;
    }
    stream.flush()?;
    stream.shutdown(std::net::Shutdown::Write)?;
    Ok(sent)
}
