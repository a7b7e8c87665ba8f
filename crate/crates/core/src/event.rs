//! Interface events and the line-oriented trace file.
//!
//! A trace file is UTF-8 text. The first line is `ISCTRACE 1`; every
//! following line is one event:
//!
//! ```text
//! seq,cycle,enclave_id,dir,call_id,param_bytes,aux
//! ```
//!
//! `dir` is `E` (ECALL) or `O` (OCALL) and `aux` is `-` when absent. Lines end
//! with LF and carry no trailing whitespace.

use std::fmt;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TRACE_HEADER: &str = "ISCTRACE 1";

/// OCALL table layout shared by every VNF enclave.
pub const OCALL_DELIVER: u32 = 0;
pub const OCALL_WRITE: u32 = 1;
pub const OCALL_REJECT: u32 = 2;

/// The single packet-processing ECALL each VNF exports.
pub const ECALL_PROCESS: u32 = 0;

pub type EnclaveId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Ecall,
    Ocall,
}

impl Direction {
    fn code(self) -> char {
        match self {
            Direction::Ecall => 'E',
            Direction::Ocall => 'O',
        }
    }
}

/// One observed ECALL or OCALL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InterfaceEvent {
    pub seq_no: u64,
    pub cycle: u64,
    pub enclave_id: EnclaveId,
    pub direction: Direction,
    pub call_id: u32,
    pub param_bytes: u64,
    pub aux: Option<u32>,
}

impl fmt::Display for InterfaceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},",
            self.seq_no,
            self.cycle,
            self.enclave_id,
            self.direction.code(),
            self.call_id,
            self.param_bytes
        )?;
        match self.aux {
            Some(a) => write!(f, "{a}"),
            None => f.write_str("-"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("write failed at event {event} (byte offset {offset}): {source}")]
    Io {
        event: usize,
        offset: u64,
        #[source]
        source: io::Error,
    },
    #[error("read failed at line {line}: {source}")]
    Read {
        line: usize,
        #[source]
        source: io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
}

/// Writes `events` in trace-file format and returns the number of bytes written.
pub fn write_trace<W: Write>(events: &[InterfaceEvent], mut sink: W) -> Result<u64, TraceError> {
    let mut offset = 0u64;
    let mut emit = |line: String, event: usize, offset: &mut u64| {
        sink.write_all(line.as_bytes())
            .and_then(|_| sink.write_all(b"\n"))
            .map_err(|source| TraceError::Io {
                event,
                offset: *offset,
                source,
            })?;
        *offset += line.len() as u64 + 1;
        Ok::<(), TraceError>(())
    };
    emit(TRACE_HEADER.to_string(), 0, &mut offset)?;
    for (i, ev) in events.iter().enumerate() {
        emit(ev.to_string(), i, &mut offset)?;
    }
    sink.flush().map_err(|source| TraceError::Io {
        event: events.len(),
        offset,
        source,
    })?;
    Ok(offset)
}

/// Parses a trace file, enforcing the header and the ordering invariants.
pub fn read_trace<R: BufRead>(source: R) -> Result<Vec<InterfaceEvent>, TraceError> {
    let mut events: Vec<InterfaceEvent> = Vec::new();
    let mut saw_header = false;
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| TraceError::Read {
            line: line_no,
            source,
        })?;
        if !saw_header {
            if line != TRACE_HEADER {
                return Err(TraceError::Parse {
                    line: line_no,
                    column: 1,
                    message: format!("expected header `{TRACE_HEADER}`"),
                });
            }
            saw_header = true;
            continue;
        }
        let ev = parse_line(&line, line_no)?;
        if let Some(prev) = events.last() {
            if ev.seq_no <= prev.seq_no {
                return Err(TraceError::Validation {
                    line: line_no,
                    message: format!("seq_no {} does not follow {}", ev.seq_no, prev.seq_no),
                });
            }
            if ev.cycle < prev.cycle {
                return Err(TraceError::Validation {
                    line: line_no,
                    message: format!("cycle {} precedes {}", ev.cycle, prev.cycle),
                });
            }
        }
        events.push(ev);
    }
    if !saw_header {
        return Err(TraceError::Parse {
            line: 1,
            column: 1,
            message: "empty trace (missing header)".into(),
        });
    }
    Ok(events)
}

fn parse_line(line: &str, line_no: usize) -> Result<InterfaceEvent, TraceError> {
    let mut fields = Vec::with_capacity(7);
    let mut column = 1;
    for part in line.split(',') {
        fields.push((column, part));
        column += part.len() + 1;
    }
    if fields.len() != 7 {
        return Err(TraceError::Parse {
            line: line_no,
            column: 1,
            message: format!("expected 7 fields, found {}", fields.len()),
        });
    }
    let err = |column: usize, message: String| TraceError::Parse {
        line: line_no,
        column,
        message,
    };
    let uint = |(col, text): (usize, &str), name: &str| -> Result<u64, TraceError> {
        text.parse::<u64>()
            .map_err(|e| err(col, format!("bad {name} `{text}`: {e}")))
    };
    let seq_no = uint(fields[0], "seq")?;
    let cycle = uint(fields[1], "cycle")?;
    let enclave_id = u32::try_from(uint(fields[2], "enclave_id")?)
        .map_err(|_| err(fields[2].0, "enclave_id out of range".into()))?;
    let direction = match fields[3].1 {
        "E" => Direction::Ecall,
        "O" => Direction::Ocall,
        other => return Err(err(fields[3].0, format!("bad dir `{other}`"))),
    };
    let call_id = u32::try_from(uint(fields[4], "call_id")?)
        .map_err(|_| err(fields[4].0, "call_id out of range".into()))?;
    let (pcol, ptext) = fields[5];
    let param = ptext
        .parse::<i64>()
        .map_err(|e| err(pcol, format!("bad param_bytes `{ptext}`: {e}")))?;
    if param < 0 {
        return Err(TraceError::Validation {
            line: line_no,
            message: format!("param_bytes {param} is negative"),
        });
    }
    let aux = match fields[6].1 {
        "-" => None,
        text => Some(
            text.parse::<u32>()
                .map_err(|e| err(fields[6].0, format!("bad aux `{text}`: {e}")))?,
        ),
    };
    Ok(InterfaceEvent {
        seq_no,
        cycle,
        enclave_id,
        direction,
        call_id,
        param_bytes: param as u64,
        aux,
    })
}
