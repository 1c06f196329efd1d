use std::io::{self, Read, Write};

use thiserror::Error;

use crate::orchestrator::{ExperimentConfig, MetricRecord};
use crate::params::{Entry, LayerTag, ParameterSet};
use crate::strategies::UploadPayload;

pub const JOIN: u8 = 1;
pub const WELCOME: u8 = 2;
pub const GLOBAL: u8 = 3;
pub const UPDATE: u8 = 4;
pub const METRIC: u8 = 5;
pub const SHUTDOWN: u8 = 6;

/// Length prefix plus type byte.
pub const FRAME_HEADER: usize = 5;
/// Largest accepted `length` field.
pub const MAX_FRAME: u32 = 1 << 30;

/// Every message the protocol can carry. None of them can hold a raw
/// sequence; the only bulk payload is a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Join { client_id: u32, n_train: u32 },
    Welcome { round: u32, config: Box<ExperimentConfig> },
    Global { round: u32, params: ParameterSet },
    Update(UploadPayload),
    Metric(MetricRecord),
    Shutdown { reason: String },
}

impl Message {
    pub fn type_code(&self) -> u8 {
        match self {
            Message::Join { .. } => JOIN,
            Message::Welcome { .. } => WELCOME,
            Message::Global { .. } => GLOBAL,
            Message::Update(_) => UPDATE,
            Message::Metric(_) => METRIC,
            Message::Shutdown { .. } => SHUTDOWN,
        }
    }

    pub fn kind(&self) -> &'static str {
        type_name(self.type_code()).unwrap_or("?")
    }
}

pub fn type_name(code: u8) -> Option<&'static str> {
    Some(match code {
        JOIN => "JOIN",
        WELCOME => "WELCOME",
        GLOBAL => "GLOBAL",
        UPDATE => "UPDATE",
        METRIC => "METRIC",
        SHUTDOWN => "SHUTDOWN",
        _ => return None,
    })
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("malformed frame at byte {offset}: {reason}")]
    MalformedFrame { offset: usize, reason: String },
    #[error("unknown message type {code}")]
    UnknownType { code: u8 },
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Encoded size of a parameter-set block.
pub fn params_len(p: &ParameterSet) -> usize {
    4 + p
        .entries()
        .iter()
        .map(|e| 2 + e.name.len() + 1 + 1 + 4 * e.shape.len() + 8 * e.values.len())
        .sum::<usize>()
}

/// Size of the UPDATE frame carrying `payload`, without building it.
pub fn update_frame_len(payload: &UploadPayload) -> usize {
    FRAME_HEADER + 12 + params_len(&payload.delta)
}

pub fn encode_params(out: &mut Vec<u8>, p: &ParameterSet) {
    put_u32(out, p.len() as u32);
    for e in p.entries() {
        put_u16(out, e.name.len() as u16);
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.tag.code());
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            put_u32(out, d as u32);
        }
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn config_text(c: &ExperimentConfig) -> String {
    c.to_toml()
}

fn record_text(r: &MetricRecord) -> String {
    toml::to_string(r).expect("metric record serializes")
}

/// Frame bytes: `u32 length | u8 type | body`, where length counts the
/// type byte and the body.
pub fn encode_message(m: &Message) -> Vec<u8> {
    let mut body = Vec::new();
    match m {
        Message::Join { client_id, n_train } => {
            put_u32(&mut body, *client_id);
            put_u32(&mut body, *n_train);
        }
        Message::Welcome { round, config } => {
            put_u32(&mut body, *round);
            body.extend_from_slice(config_text(config).as_bytes());
        }
        Message::Global { round, params } => {
            put_u32(&mut body, *round);
            encode_params(&mut body, params);
        }
        Message::Update(p) => {
            put_u32(&mut body, p.round);
            put_u32(&mut body, p.client_id);
            put_u32(&mut body, p.n_i);
            encode_params(&mut body, &p.delta);
        }
        Message::Metric(r) => body.extend_from_slice(record_text(r).as_bytes()),
        Message::Shutdown { reason } => body.extend_from_slice(reason.as_bytes()),
    }
    let mut out = Vec::with_capacity(FRAME_HEADER + body.len());
    put_u32(&mut out, body.len() as u32 + 1);
    out.push(m.type_code());
    out.extend_from_slice(&body);
    out
}

/// Bounds-checked reader over one frame; offsets are frame-absolute.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bad(&self, reason: impl Into<String>) -> DecodeError {
        DecodeError::MalformedFrame {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(self.bad(format!(
                "{what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn utf8(&mut self, what: &str) -> Result<&'a str, DecodeError> {
        let start = self.pos;
        let bytes = self.rest();
        std::str::from_utf8(bytes).map_err(|e| DecodeError::MalformedFrame {
            offset: start + e.valid_up_to(),
            reason: format!("{what}: invalid UTF-8"),
        })
    }

    fn params(&mut self) -> Result<ParameterSet, DecodeError> {
        let count = self.u32("entry count")? as usize;
        // Each entry needs at least 8 bytes, so this bounds the allocation.
        if count > self.remaining() / 8 {
            return Err(self.bad(format!("entry count {count} exceeds frame")));
        }
        let mut entries: Vec<Entry> = Vec::with_capacity(count);
        for _ in 0..count {
            let at = self.pos;
            let name_len = self.u16("name length")? as usize;
            let name = std::str::from_utf8(self.take(name_len, "name")?)
                .map_err(|_| DecodeError::MalformedFrame {
                    offset: at + 2,
                    reason: "name is not UTF-8".into(),
                })?
                .to_string();
            if let Some(prev) = entries.last() {
                if prev.name >= name {
                    return Err(DecodeError::MalformedFrame {
                        offset: at,
                        reason: format!("entry `{name}` out of order or duplicated"),
                    });
                }
            }
            let tag_code = self.u8("tag")?;
            let tag = LayerTag::from_code(tag_code).ok_or_else(|| DecodeError::MalformedFrame {
                offset: self.pos - 1,
                reason: format!("unknown tag code {tag_code}"),
            })?;
            let rank = self.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel: u64 = 1;
            for _ in 0..rank {
                let d = self.u32("dim")?;
                numel = numel.saturating_mul(d as u64);
                shape.push(d as usize);
            }
            if numel > (self.remaining() / 8) as u64 {
                return Err(self.bad(format!("`{name}` declares {numel} values, frame too short")));
            }
            let raw = self.take(8 * numel as usize, "values")?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let entry = Entry::new(name, tag, shape, values).map_err(|e| DecodeError::MalformedFrame {
                offset: at,
                reason: e.to_string(),
            })?;
            entries.push(entry);
        }
        ParameterSet::from_entries(entries).map_err(|e| self.bad(e.to_string()))
    }
}

/// Strict inverse of [`encode_message`]. The slice must hold exactly one
/// frame; text bodies must be in the canonical form the encoder emits.
pub fn decode_message(bytes: &[u8]) -> Result<Message, DecodeError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let len = c.u32("length prefix")? as usize;
    if len == 0 {
        return Err(DecodeError::MalformedFrame {
            offset: 0,
            reason: "zero length".into(),
        });
    }
    if bytes.len() - 4 != len {
        return Err(DecodeError::MalformedFrame {
            offset: 0,
            reason: format!("declared length {len}, frame carries {}", bytes.len() - 4),
        });
    }
    let code = c.u8("type")?;
    let msg = match code {
        JOIN => Message::Join {
            client_id: c.u32("client_id")?,
            n_train: c.u32("n_train")?,
        },
        WELCOME => {
            let round = c.u32("round")?;
            let start = c.pos;
            let text = c.utf8("config")?;
            let config = ExperimentConfig::from_toml(text).map_err(|e| DecodeError::MalformedFrame {
                offset: start,
                reason: e.to_string(),
            })?;
            if config_text(&config) != text {
                return Err(DecodeError::MalformedFrame {
                    offset: start,
                    reason: "config text is not canonical".into(),
                });
            }
            Message::Welcome {
                round,
                config: Box::new(config),
            }
        }
        GLOBAL => Message::Global {
            round: c.u32("round")?,
            params: c.params()?,
        },
        UPDATE => {
            let round = c.u32("round")?;
            let client_id = c.u32("client_id")?;
            let n_i = c.u32("n_i")?;
            Message::Update(UploadPayload {
                client_id,
                n_i,
                round,
                delta: c.params()?,
            })
        }
        METRIC => {
            let start = c.pos;
            let text = c.utf8("metric")?;
            let record: MetricRecord = toml::from_str(text).map_err(|e| DecodeError::MalformedFrame {
                offset: start,
                reason: e.to_string(),
            })?;
            if record_text(&record) != text {
                return Err(DecodeError::MalformedFrame {
                    offset: start,
                    reason: "metric text is not canonical".into(),
                });
            }
            Message::Metric(record)
        }
        SHUTDOWN => Message::Shutdown {
            reason: c.utf8("reason")?.to_string(),
        },
        code => return Err(DecodeError::UnknownType { code }),
    };
    if c.remaining() != 0 {
        return Err(c.bad(format!("{} trailing bytes", c.remaining())));
    }
    Ok(msg)
}

/// Reads one raw frame (prefix included) from a stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Vec<u8>> {
    let mut prefix = [0u8; 4];
    r.read_exact(&mut prefix)?;
    let len = u32::from_le_bytes(prefix);
    if len == 0 || len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame length {len} out of range"),
        ));
    }
    // Grow with the bytes that actually arrive, not the declared length.
    let mut frame = prefix.to_vec();
    r.take(len as u64).read_to_end(&mut frame)?;
    if frame.len() != 4 + len as usize {
        return Err(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("frame truncated: {} of {len} bytes", frame.len() - 4),
        ));
    }
    Ok(frame)
}

pub fn write_message(w: &mut impl Write, m: &Message) -> io::Result<usize> {
    let bytes = encode_message(m);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}
