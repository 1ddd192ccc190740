//! File-backed session persistence: an append-only event journal per
//! session plus a periodic snapshot. Every event is fsynced before the
//! request that produced it is answered.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use prism_core::clarifier::{
    apply_user_response, install_table, ClarificationTable, SessionState, SessionStatus, UserResponse,
};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredReply {
    pub status: u16,
    pub body: Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created { state: Box<SessionState> },
    TableInstalled { table: ClarificationTable },
    ResponseApplied { response: UserResponse },
    Finalized { output: String },
    Aborted,
    Idempotent { key: String, reply: StoredReply },
}

/// In-memory session plus the bookkeeping the service needs around it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionEntry {
    pub state: SessionState,
    #[serde(default)]
    pub replies: HashMap<String, StoredReply>,
    /// Events recorded so far, including those folded into a snapshot.
    #[serde(default)]
    pub events: usize,
}

impl SessionEntry {
    pub fn apply(&mut self, event: &Event) -> Result<(), String> {
        match event {
            Event::Created { state } => self.state = (**state).clone(),
            Event::TableInstalled { table } => {
                install_table(&mut self.state, table.clone()).map_err(|e| e.to_string())?;
            }
            Event::ResponseApplied { response } => {
                apply_user_response(&mut self.state, response.clone()).map_err(|e| e.to_string())?;
            }
            Event::Finalized { output } => {
                self.state.trajectory.final_output = Some(output.clone());
                self.state.status = SessionStatus::Completed;
            }
            Event::Aborted => {
                self.state.status = SessionStatus::Aborted;
                self.state.pending = None;
            }
            Event::Idempotent { key, reply } => {
                self.replies.insert(key.clone(), reply.clone());
            }
        }
        self.events += 1;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Journal {
    dir: PathBuf,
    snapshot_every: usize,
}

impl Journal {
    pub fn open(dir: &Path, snapshot_every: usize) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Journal {
            dir: dir.to_path_buf(),
            snapshot_every: snapshot_every.max(1),
        })
    }

    fn journal_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.journal.jsonl"))
    }

    fn snapshot_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.snapshot.json"))
    }

    /// Append events durably, then snapshot if due.
    pub fn append(&self, entry: &SessionEntry, events: &[Event]) -> io::Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        let mut f = OpenOptions::new().create(true).append(true).open(self.journal_path(&entry.state.id))?;
        let mut buf = Vec::new();
        for e in events {
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
        }
        f.write_all(&buf)?;
        f.sync_data()?;
        let before = entry.events - events.len();
        if before / self.snapshot_every != entry.events / self.snapshot_every {
            self.snapshot(entry)?;
        }
        Ok(())
    }

    fn snapshot(&self, entry: &SessionEntry) -> io::Result<()> {
        let path = self.snapshot_path(&entry.state.id);
        let tmp = path.with_extension("json.tmp");
        let mut f = File::create(&tmp)?;
        serde_json::to_writer(&mut f, entry)?;
        f.sync_data()?;
        fs::rename(tmp, path)
    }

    /// Rebuild every journaled session. A torn final line is ignored.
    pub fn recover(&self) -> io::Result<Vec<SessionEntry>> {
        let mut out = Vec::new();
        for dirent in fs::read_dir(&self.dir)? {
            let path = dirent?.path();
            let Some(id) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_suffix(".journal.jsonl"))
            else {
                continue;
            };
            match self.recover_one(id) {
                Ok(Some(e)) => out.push(e),
                Ok(None) => {}
                Err(e) => log::warn!("session {id} not recovered: {e}"),
            }
        }
        out.sort_by(|a, b| a.state.id.cmp(&b.state.id));
        Ok(out)
    }

    fn recover_one(&self, id: &str) -> io::Result<Option<SessionEntry>> {
        let mut entry: Option<SessionEntry> = match fs::read(self.snapshot_path(id)) {
            Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(e),
        };
        let skip = entry.as_ref().map_or(0, |e| e.events);
        let reader = BufReader::new(File::open(self.journal_path(id))?);
        for (i, line) in reader.lines().enumerate().skip(skip) {
            let line = line?;
            let event: Event = match serde_json::from_str(&line) {
                Ok(ev) => ev,
                Err(e) => {
                    log::warn!("session {id}: journal line {} unreadable ({e}); stopping replay", i + 1);
                    break;
                }
            };
            match (&mut entry, &event) {
                (None, Event::Created { state }) => {
                    entry = Some(SessionEntry {
                        state: (**state).clone(),
                        replies: HashMap::new(),
                        events: 1,
                    })
                }
                (None, _) => return Err(io::Error::other("journal does not start with a created event")),
                (Some(e), ev) => e.apply(ev).map_err(io::Error::other)?,
            }
        }
        Ok(entry)
    }
}
