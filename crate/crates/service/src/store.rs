//! Event-sourced session state.
//!
//! Every mutation is an [`Event`] appended to `events.jsonl` before it is
//! applied. The snapshot is a pure function of the log: [`replay`] over the
//! same events yields the same items field for field. `snapshot.json` only
//! shortens startup.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::item::{AnnotationRecord, AnswerSource, Delivery, Regeneration, ReviewItem, Status};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const EXPORT_FORMAT: &str = "expert-cfg-session";
pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Created { item: Box<ReviewItem> },
    Annotated { id: String, record: AnnotationRecord },
    Regenerated { id: String, regeneration: Box<Regeneration> },
    Delivered { id: String, delivery: Delivery },
}

impl EventKind {
    pub fn item_id(&self) -> &str {
        match self {
            EventKind::Created { item } => &item.id,
            EventKind::Annotated { id, .. } | EventKind::Regenerated { id, .. } | EventKind::Delivered { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub event: EventKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Snapshot {
    pub last_seq: u64,
    pub items: BTreeMap<String, ReviewItem>,
}

impl Snapshot {
    /// Applies one event, enforcing the item state machine.
    pub fn apply(&mut self, event: &Event) -> Result<()> {
        if event.seq != self.last_seq + 1 {
            return Err(ServiceError::validation(format!(
                "event sequence gap: expected {}, got {}",
                self.last_seq + 1,
                event.seq
            )));
        }
        match &event.event {
            EventKind::Created { item } => {
                if self.items.contains_key(&item.id) {
                    return Err(ServiceError::Conflict(format!("item {} already exists", item.id)));
                }
                if !matches!(item.status, Status::Pending | Status::Delivered) {
                    return Err(ServiceError::validation("items are created pending or delivered"));
                }
                self.items.insert(item.id.clone(), (**item).clone());
            }
            EventKind::Annotated { id, record } => {
                let item = self.transition(id, Status::Annotated)?;
                item.annotation = Some(record.clone());
            }
            EventKind::Regenerated { id, regeneration } => {
                let item = self.transition(id, Status::Regenerated)?;
                item.regeneration = Some((**regeneration).clone());
            }
            EventKind::Delivered { id, delivery } => {
                let item = self.transition(id, Status::Delivered)?;
                item.delivered = Some(delivery.clone());
            }
        }
        self.last_seq = event.seq;
        Ok(())
    }

    fn transition(&mut self, id: &str, next: Status) -> Result<&mut ReviewItem> {
        let item = self
            .items
            .get_mut(id)
            .ok_or_else(|| ServiceError::NotFound(format!("item {id}")))?;
        check_transition(item, next)?;
        item.status = next;
        Ok(item)
    }
}

pub fn check_transition(item: &ReviewItem, next: Status) -> Result<()> {
    if item.status.can_move_to(next) {
        Ok(())
    } else {
        Err(ServiceError::Conflict(format!(
            "item {} is {}; cannot move to {}",
            item.id, item.status, next
        )))
    }
}

/// Rebuilds the snapshot from a complete event log.
pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<Snapshot> {
    let mut snap = Snapshot::default();
    for e in events {
        snap.apply(e)?;
    }
    Ok(snap)
}

fn io_err(path: &Path, e: std::io::Error) -> ServiceError {
    expert_cfg::Error::io(path, e).into()
}

fn json_err(path: &Path, line: usize, e: serde_json::Error) -> ServiceError {
    expert_cfg::Error::Format(format!("{}:{line}: {e}", path.display())).into()
}

pub fn read_events(path: &Path) -> Result<Vec<Event>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| json_err(path, n + 1, e))?);
    }
    Ok(out)
}

struct LogWriter {
    dir: PathBuf,
    out: BufWriter<File>,
}

pub struct SessionStore {
    snapshot: Snapshot,
    events: Vec<Event>,
    log: Option<LogWriter>,
    snapshot_every: u64,
    created: u64,
}

impl SessionStore {
    pub fn in_memory() -> Self {
        Self {
            snapshot: Snapshot::default(),
            events: Vec::new(),
            log: None,
            snapshot_every: 0,
            created: 0,
        }
    }

    /// Opens or creates a session directory. Events after the stored
    /// snapshot are replayed on top of it. `snapshot_every = 0` disables
    /// periodic snapshots.
    pub fn open(dir: impl AsRef<Path>, snapshot_every: u64) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let events_path = dir.join(EVENTS_FILE);
        let events = if events_path.exists() {
            read_events(&events_path)?
        } else {
            Vec::new()
        };
        let snap_path = dir.join(SNAPSHOT_FILE);
        let mut snapshot = if snap_path.exists() {
            let text = std::fs::read_to_string(&snap_path).map_err(|e| io_err(&snap_path, e))?;
            serde_json::from_str(&text).map_err(|e| json_err(&snap_path, 1, e))?
        } else {
            Snapshot::default()
        };
        if snapshot.last_seq > events.len() as u64 {
            return Err(ServiceError::validation(format!(
                "snapshot at seq {} is ahead of the log ({} events)",
                snapshot.last_seq,
                events.len()
            )));
        }
        for e in &events[snapshot.last_seq as usize..] {
            snapshot.apply(e)?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&events_path)
            .map_err(|e| io_err(&events_path, e))?;
        let created = events
            .iter()
            .filter(|e| matches!(e.event, EventKind::Created { .. }))
            .count() as u64;
        Ok(Self {
            snapshot,
            events,
            log: Some(LogWriter {
                dir,
                out: BufWriter::new(file),
            }),
            snapshot_every,
            created,
        })
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn get(&self, id: &str) -> Option<&ReviewItem> {
        self.snapshot.items.get(id)
    }

    pub fn items(&self) -> impl Iterator<Item = &ReviewItem> {
        self.snapshot.items.values()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.snapshot.items.contains_key(id)
    }

    /// Next unused `item-NNNNNN` id, skipping any taken by callers.
    pub fn fresh_id(&self, reserved: &BTreeSet<String>) -> String {
        let mut n = self.created + 1;
        loop {
            let id = format!("item-{n:06}");
            if !self.contains(&id) && !reserved.contains(&id) {
                return id;
            }
            n += 1;
        }
    }

    /// Validates, persists and applies one event.
    pub fn commit(&mut self, kind: EventKind) -> Result<&ReviewItem> {
        let event = Event {
            seq: self.snapshot.last_seq + 1,
            event: kind,
        };
        // Dry run on the item alone so a rejected event never reaches the log.
        let mut probe = Snapshot {
            last_seq: self.snapshot.last_seq,
            items: BTreeMap::new(),
        };
        if let Some(item) = self.snapshot.items.get(event.event.item_id()) {
            probe.items.insert(item.id.clone(), item.clone());
        }
        probe.apply(&event)?;
        if let Some(log) = &mut self.log {
            let path = log.dir.join(EVENTS_FILE);
            serde_json::to_writer(&mut log.out, &event).map_err(expert_cfg::Error::from)?;
            log.out.write_all(b"\n").map_err(|e| io_err(&path, e))?;
            log.out.flush().map_err(|e| io_err(&path, e))?;
        }
        self.snapshot.apply(&event)?;
        if matches!(event.event, EventKind::Created { .. }) {
            self.created += 1;
        }
        let id = event.event.item_id().to_string();
        self.events.push(event);
        if self.snapshot_every > 0 && self.snapshot.last_seq.is_multiple_of(self.snapshot_every) {
            self.checkpoint()?;
        }
        Ok(&self.snapshot.items[&id])
    }

    /// Writes `snapshot.json` atomically. No-op for in-memory stores.
    pub fn checkpoint(&mut self) -> Result<()> {
        let Some(log) = &self.log else { return Ok(()) };
        let path = log.dir.join(SNAPSHOT_FILE);
        let tmp = log.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let text = serde_json::to_string(&self.snapshot).map_err(expert_cfg::Error::from)?;
        std::fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        Ok(())
    }
}

/// Aggregate figures appended to an export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub items: usize,
    pub by_status: BTreeMap<Status, usize>,
    /// Fraction of items routed to review at creation.
    pub review_rate: f64,
    pub mean_normalized_pe: f64,
    pub annotated: usize,
    pub regenerated: usize,
    /// Regenerations whose answer differs from the initial one.
    pub answers_changed: usize,
    pub delivered_regenerated: usize,
}

pub fn session_metrics(items: &BTreeMap<String, ReviewItem>, reviewed_at_creation: usize) -> Option<SessionMetrics> {
    if items.is_empty() {
        return None;
    }
    let mut by_status = BTreeMap::new();
    for item in items.values() {
        *by_status.entry(item.status).or_insert(0) += 1;
    }
    let n = items.len();
    let regens: Vec<&ReviewItem> = items.values().filter(|i| i.regeneration.is_some()).collect();
    Some(SessionMetrics {
        items: n,
        by_status,
        review_rate: reviewed_at_creation as f64 / n as f64,
        mean_normalized_pe: items.values().map(|i| i.entropy.normalized_pe).sum::<f64>() / n as f64,
        annotated: items.values().filter(|i| i.annotation.is_some()).count(),
        regenerated: regens.len(),
        answers_changed: regens
            .iter()
            .filter(|i| i.regeneration.as_ref().is_some_and(|r| r.answer.text != i.initial.text))
            .count(),
        delivered_regenerated: items
            .values()
            .filter(|i| i.delivered.as_ref().is_some_and(|d| d.source == AnswerSource::Regenerated))
            .count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub format: String,
    pub version: u32,
    pub from_seq: u64,
    pub to_seq: u64,
    pub events: usize,
}

/// One line of an export archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExportLine {
    Header(ExportHeader),
    Event(Event),
    Metrics(SessionMetrics),
}

/// JSONL archive of events with `from <= seq <= to`: a header, the events,
/// then metrics over the items those events produce. A session without
/// events exports the header alone.
pub fn export_jsonl(events: &[Event], from: Option<u64>, to: Option<u64>) -> Result<String> {
    let from = from.unwrap_or(1).max(1);
    let to = to.unwrap_or(u64::MAX);
    let selected: Vec<&Event> = events.iter().filter(|e| e.seq >= from && e.seq <= to).collect();
    let mut lines = vec![ExportLine::Header(ExportHeader {
        format: EXPORT_FORMAT.into(),
        version: EXPORT_VERSION,
        from_seq: selected.first().map_or(0, |e| e.seq),
        to_seq: selected.last().map_or(0, |e| e.seq),
        events: selected.len(),
    })];
    if !selected.is_empty() {
        // Metrics cover every item whose history is fully inside the range.
        let mut items: BTreeMap<String, ReviewItem> = BTreeMap::new();
        let mut reviewed = 0;
        for e in &selected {
            match &e.event {
                EventKind::Created { item } => {
                    reviewed += usize::from(item.status == Status::Pending);
                    items.insert(item.id.clone(), (**item).clone());
                }
                other => {
                    if let Some(item) = items.get_mut(other.item_id()) {
                        apply_unchecked(item, other);
                    }
                }
            }
        }
        lines.extend(selected.iter().map(|e| ExportLine::Event((*e).clone())));
        if let Some(m) = session_metrics(&items, reviewed) {
            lines.push(ExportLine::Metrics(m));
        }
    }
    let mut out = String::new();
    for line in &lines {
        out.push_str(&serde_json::to_string(line).map_err(expert_cfg::Error::from)?);
        out.push('\n');
    }
    Ok(out)
}

fn apply_unchecked(item: &mut ReviewItem, kind: &EventKind) {
    match kind {
        EventKind::Created { .. } => {}
        EventKind::Annotated { record, .. } => {
            item.status = Status::Annotated;
            item.annotation = Some(record.clone());
        }
        EventKind::Regenerated { regeneration, .. } => {
            item.status = Status::Regenerated;
            item.regeneration = Some((**regeneration).clone());
        }
        EventKind::Delivered { delivery, .. } => {
            item.status = Status::Delivered;
            item.delivered = Some(delivery.clone());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedExport {
    pub header: ExportHeader,
    pub events: Vec<Event>,
    pub metrics: Option<SessionMetrics>,
}

pub fn parse_export(text: &str) -> Result<ParsedExport> {
    let mut header = None;
    let mut events = Vec::new();
    let mut metrics = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ExportLine = serde_json::from_str(line).map_err(|e| json_err(Path::new("<export>"), n + 1, e))?;
        match parsed {
            ExportLine::Header(h) if n == 0 => header = Some(h),
            ExportLine::Event(e) => events.push(e),
            ExportLine::Metrics(m) => metrics = Some(m),
            ExportLine::Header(_) => return Err(ServiceError::validation("header must be the first line")),
        }
    }
    let header = header.ok_or_else(|| ServiceError::validation("export has no header"))?;
    if header.format != EXPORT_FORMAT || header.version != EXPORT_VERSION {
        return Err(ServiceError::validation(format!(
            "unsupported export {} v{}",
            header.format, header.version
        )));
    }
    Ok(ParsedExport { header, events, metrics })
}
