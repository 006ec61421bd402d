//! Append-only audit journal (`audit.jsonl`), one event per line.
//!
//! The journal doubles as the recovery log: state is rebuilt by folding it.
//! A torn final line (crash mid-write) is cut off on open; it was never
//! acknowledged to any client.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ci_protocol::{decode_str, encode, AuditEvent};

use crate::error::{BrokerError, Result};

pub struct Journal {
    path: PathBuf,
    file: File,
    next_seq: u64,
    fsync: bool,
}

impl Journal {
    /// Opens (creating if needed) and returns every intact event on disk.
    pub fn open(path: &Path, fsync: bool) -> Result<(Self, Vec<AuditEvent>)> {
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)?;
        let (events, intact_len) = read_events(&mut file, path)?;
        let total_len = file.metadata()?.len();
        if intact_len < total_len {
            tracing::warn!(
                path = %path.display(),
                dropped = total_len - intact_len,
                "discarding torn tail of audit journal"
            );
            file.set_len(intact_len)?;
        }
        file.seek(SeekFrom::End(0))?;
        let next_seq = events.last().map_or(1, |e| e.seq + 1);
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
                next_seq,
                fsync,
            },
            events,
        ))
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes the batch with a single write call, then optionally syncs.
    pub fn append(&mut self, events: &[AuditEvent]) -> Result<()> {
        let mut buf = Vec::new();
        for event in events {
            if event.seq != self.next_seq {
                return Err(BrokerError::Storage(format!(
                    "journal expected seq {}, got {}",
                    self.next_seq, event.seq
                )));
            }
            buf.extend_from_slice(&encode(event));
            buf.push(b'\n');
            self.next_seq += 1;
        }
        self.file.write_all(&buf)?;
        if self.fsync {
            self.file.sync_data()?;
        }
        Ok(())
    }
}

/// Reads all well-formed lines; returns them with the byte length they span.
fn read_events(file: &mut File, path: &Path) -> Result<(Vec<AuditEvent>, u64)> {
    file.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::new(file);
    let mut events: Vec<AuditEvent> = Vec::new();
    let mut intact = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        if !line.ends_with('\n') {
            // torn tail
            break;
        }
        let event: AuditEvent = match decode_str(line.trim_end()) {
            Ok(event) => event,
            Err(err) => {
                // Only the very last line may be damaged.
                let mut rest = String::new();
                if reader.read_line(&mut rest)? == 0 {
                    tracing::warn!(%err, "unparseable final journal line");
                    break;
                }
                return Err(BrokerError::Storage(format!(
                    "{}: corrupt journal line after seq {}: {err}",
                    path.display(),
                    events.last().map_or(0, |e| e.seq)
                )));
            }
        };
        let expected = events.last().map_or(1, |e| e.seq + 1);
        if event.seq != expected {
            return Err(BrokerError::Storage(format!(
                "{}: journal sequence gap, expected {expected} found {}",
                path.display(),
                event.seq
            )));
        }
        events.push(event);
        intact += n as u64;
    }
    Ok((events, intact))
}
