//! Append-only command journal: one canonical JSON record per line.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::docstore::b64;
use crate::error::Error;
use crate::ids::{NodeId, Timestamp};
use crate::model::{AnnotationKind, ModuleKind, TaskStatus};

pub const JOURNAL_FILE: &str = "journal.ndjson";

/// Every state mutation a node can commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Command {
    CreateWorkspace {
        slug: String,
        title: String,
        creator: String,
    },
    AddMember {
        workspace_id: String,
        actor: String,
        member: String,
    },
    CreateModule {
        workspace_id: String,
        kind: ModuleKind,
        slug: String,
        shared: bool,
    },
    CreateObject {
        module_id: String,
        title: String,
        body: String,
        context: BTreeMap<String, String>,
        actor: String,
    },
    UpdateObject {
        object_id: String,
        title: Option<String>,
        body: Option<String>,
        context: Option<BTreeMap<String, String>>,
        actor: String,
    },
    AddAnnotation {
        object_id: String,
        kind: AnnotationKind,
        text: String,
        author: String,
        assignee: Option<String>,
    },
    ResolveAction {
        object_id: String,
        annotation_id: String,
        actor: String,
    },
    CreateEvent {
        workspace_id: String,
        title: String,
        start: Timestamp,
        end: Timestamp,
        participants: Vec<String>,
    },
    CreateTask {
        project_id: String,
        title: String,
        assignee: String,
        due: Option<String>,
    },
    SetTaskStatus {
        task_id: String,
        status: TaskStatus,
    },
    RegisterWatch {
        owner: String,
        raw_query: String,
    },
    CreateDocument {
        module_id: String,
        name: String,
        #[serde(with = "b64")]
        content: Vec<u8>,
        author: String,
    },
    PushVersion {
        origin: NodeId,
        doc_id: String,
        base_version: u64,
        #[serde(with = "b64")]
        content: Vec<u8>,
        author: String,
        source_node: NodeId,
    },
    RecordFetch {
        doc_id: String,
        version: u64,
        actor: String,
        node: NodeId,
    },
    DeliverMessage {
        from_node: NodeId,
        from_actor: Option<String>,
        to_actor: Option<String>,
        body: String,
    },
    RosterChange {
        peer: NodeId,
        state: String,
    },
    AckInbox {
        entry_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub seq: u64,
    pub at: Timestamp,
    pub cmd: Command,
}

impl JournalRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("journal records always serialize")
    }
}

/// Where committed records go.
#[derive(Debug)]
pub enum JournalSink {
    Memory(Vec<String>),
    File { path: PathBuf, file: File },
}

impl JournalSink {
    pub fn append(&mut self, record: &JournalRecord) -> Result<(), Error> {
        let line = record.to_line();
        match self {
            JournalSink::Memory(lines) => lines.push(line),
            JournalSink::File { file, .. } => {
                file.write_all(line.as_bytes())?;
                file.write_all(b"\n")?;
                file.sync_data()?;
            }
        }
        Ok(())
    }

    pub fn memory_lines(&self) -> Option<&[String]> {
        match self {
            JournalSink::Memory(lines) => Some(lines),
            JournalSink::File { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JournalScan {
    pub records: Vec<JournalRecord>,
    /// Byte length of the valid prefix.
    pub valid_len: usize,
    pub discarded_tail: bool,
}

/// Parses journal bytes. An unparseable final line is a torn write and is
/// dropped; unparseable earlier lines are corruption.
pub fn scan(bytes: &[u8]) -> Result<JournalScan, Error> {
    let mut out = JournalScan::default();
    let mut offset = 0;
    let mut line_no = 0;
    while offset < bytes.len() {
        line_no += 1;
        let (line, next, terminated) = match bytes[offset..].iter().position(|b| *b == b'\n') {
            Some(i) => (&bytes[offset..offset + i], offset + i + 1, true),
            None => (&bytes[offset..], bytes.len(), false),
        };
        let is_last = next >= bytes.len();
        let parsed = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|text| serde_json::from_str::<JournalRecord>(text).map_err(|e| e.to_string()));
        match parsed {
            Ok(record) if terminated => {
                let expected = out.records.len() as u64 + 1;
                if record.seq != expected {
                    return Err(Error::JournalCorrupt {
                        line: line_no,
                        message: format!("sequence {} where {expected} was expected", record.seq),
                    });
                }
                out.records.push(record);
                out.valid_len = next;
            }
            Ok(_) | Err(_) if is_last => {
                tracing::warn!(line = line_no, "discarding torn journal tail");
                out.discarded_tail = true;
            }
            Err(message) => {
                return Err(Error::JournalCorrupt {
                    line: line_no,
                    message,
                })
            }
            Ok(_) => unreachable!("only the last line can lack a terminator"),
        }
        offset = next;
    }
    Ok(out)
}

/// Reads the journal under `data_dir`, truncates a torn tail, and returns
/// the records together with an append handle.
pub fn open_dir(data_dir: &Path) -> Result<(JournalScan, JournalSink), Error> {
    fs::create_dir_all(data_dir)?;
    let path = data_dir.join(JOURNAL_FILE);
    let scan = match fs::read(&path) {
        Ok(bytes) => scan(&bytes)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => JournalScan::default(),
        Err(e) => return Err(e.into()),
    };
    let file = OpenOptions::new().create(true).append(true).open(&path)?;
    if scan.discarded_tail {
        file.set_len(scan.valid_len as u64)?;
    }
    Ok((scan, JournalSink::File { path, file }))
}
