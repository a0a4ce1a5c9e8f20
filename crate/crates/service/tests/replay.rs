mod common;

use chrono::DateTime;
use expert_cfg::GatePolicy;
use expert_cfg_service::engine::{AnnotationInput, DeliverInput, RegenerateInput};
use expert_cfg_service::item::AnswerSource;
use expert_cfg_service::store::{parse_export, read_events, EventKind, EVENTS_FILE, SNAPSHOT_FILE};
use expert_cfg_service::{replay, ReviewService, SessionStore, Status};

use common::*;

/// Drives items into every status: two full loops, one annotated, one
/// delivered unreviewed, the rest left pending.
fn script(svc: &ReviewService, w: &expert_cfg::scenario::SyntheticWorld) {
    svc.answer_batch(requests(w), Some(GatePolicy::FixedThreshold(0.0))).unwrap();
    for (n, it) in w.steering_items().take(3).enumerate() {
        let id = it.row.id.as_deref().unwrap();
        let caption = w.record(&it.reference_id).unwrap().caption.clone();
        let input = AnnotationInput {
            reference_text: caption,
            spans: w.expert_spans(it),
            editor: "expert".into(),
            timestamp: DateTime::from_timestamp(1_700_000_000 + n as i64, 0),
        };
        svc.submit_annotation(id, input).unwrap();
        if n < 2 {
            svc.regenerate(id, RegenerateInput::default()).unwrap();
            svc.deliver(id, DeliverInput::default()).unwrap();
        }
    }
    let last = w.items.last().unwrap().row.id.as_deref().unwrap();
    if svc.get(last).unwrap().status == Status::Pending {
        svc.deliver(last, DeliverInput::default()).unwrap();
    }
}

#[test]
fn reopened_session_equals_live() {
    let w = world(4, 2, 2);
    let dir = tempfile::tempdir().unwrap();
    let live = {
        let svc = service_with(&w, SessionStore::open(dir.path(), 5).unwrap(), |_| {});
        script(&svc, &w);
        svc.snapshot()
    };
    assert_eq!(live.items.len(), 8);
    assert!(dir.path().join(SNAPSHOT_FILE).exists());
    let statuses: Vec<Status> = live.items.values().map(|i| i.status).collect();
    for s in [Status::Pending, Status::Annotated, Status::Delivered] {
        assert!(statuses.contains(&s));
    }

    let reopened = SessionStore::open(dir.path(), 5).unwrap();
    assert_eq!(*reopened.snapshot(), live);

    let events = read_events(&dir.path().join(EVENTS_FILE)).unwrap();
    assert_eq!(replay(&events).unwrap(), live);

    // Without the snapshot file the log alone rebuilds the same state.
    std::fs::remove_file(dir.path().join(SNAPSHOT_FILE)).unwrap();
    assert_eq!(*SessionStore::open(dir.path(), 0).unwrap().snapshot(), live);
}

#[test]
fn session_continues_after_reopen() {
    let w = world(3, 0, 0);
    let dir = tempfile::tempdir().unwrap();
    {
        let svc = service_with(&w, SessionStore::open(dir.path(), 0).unwrap(), |_| {});
        svc.answer_batch(requests(&w), Some(GatePolicy::FixedThreshold(0.0))).unwrap();
    }
    let svc = service_with(&w, SessionStore::open(dir.path(), 0).unwrap(), |_| {});
    let id = w.items[0].row.id.as_deref().unwrap();
    let out = svc.deliver(id, DeliverInput { source: Some(AnswerSource::Initial) }).unwrap();
    assert_eq!(out.status, Status::Delivered);
    let events = read_events(&dir.path().join(EVENTS_FILE)).unwrap();
    assert_eq!(events.len(), 4);
    assert_eq!(replay(&events).unwrap(), svc.snapshot());
}

#[test]
fn export_round_trips_through_replay() {
    let w = world(4, 2, 2);
    let svc = service(&w);
    script(&svc, &w);
    let text = svc.export(None, None).unwrap();
    let parsed = parse_export(&text).unwrap();
    assert_eq!(parsed.header.events, svc.events().len());
    assert_eq!(parsed.header.from_seq, 1);
    assert_eq!(parsed.events, svc.events());
    assert_eq!(replay(&parsed.events).unwrap(), svc.snapshot());

    let m = parsed.metrics.unwrap();
    assert_eq!(m.items, 8);
    assert_eq!(m.review_rate, 1.0);
    assert_eq!((m.annotated, m.regenerated, m.delivered_regenerated), (3, 2, 2));
    assert_eq!(m.answers_changed, 2);

    // Regeneration events carry the knobs they used.
    let cfgs: Vec<_> = parsed
        .events
        .iter()
        .filter_map(|e| match &e.event {
            EventKind::Regenerated { regeneration, .. } => Some(regeneration.cfg),
            _ => None,
        })
        .collect();
    assert_eq!(cfgs.len(), 2);
    assert!(cfgs.iter().all(|c| *c == svc.config().guidance));
    assert!(text.lines().any(|l| l.contains("\"gamma\":1.3")));
}

#[test]
fn ranged_export_and_empty_session() {
    let w = world(2, 0, 0);
    let svc = service(&w);
    let empty = parse_export(&svc.export(None, None).unwrap()).unwrap();
    assert_eq!((empty.header.events, empty.header.from_seq, empty.header.to_seq), (0, 0, 0));
    assert!(empty.events.is_empty() && empty.metrics.is_none());
    assert_eq!(svc.export(None, None).unwrap().lines().count(), 1);

    script(&svc, &w);
    let total = svc.events().len() as u64;
    let tail = parse_export(&svc.export(Some(3), None).unwrap()).unwrap();
    assert_eq!(tail.header.from_seq, 3);
    assert_eq!(tail.header.to_seq, total);
    assert!(tail.events.iter().all(|e| e.seq >= 3));
    // A tail without the creation events cannot be replayed from scratch.
    assert!(replay(&tail.events).is_err());
    let head = parse_export(&svc.export(None, Some(2)).unwrap()).unwrap();
    assert_eq!(head.events.len(), 2);
    assert_eq!(head.metrics.unwrap().items, 2);
}

#[test]
fn corrupt_logs_are_rejected() {
    let w = world(2, 0, 0);
    let dir = tempfile::tempdir().unwrap();
    {
        let svc = service_with(&w, SessionStore::open(dir.path(), 0).unwrap(), |_| {});
        script(&svc, &w);
    }
    let path = dir.path().join(EVENTS_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.remove(1);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(SessionStore::open(dir.path(), 0).is_err());
    std::fs::write(&path, "{not json}\n").unwrap();
    assert!(SessionStore::open(dir.path(), 0).is_err());
    assert!(parse_export("").is_err());
    assert!(parse_export("{\"kind\":\"header\",\"format\":\"other\",\"version\":1,\"from_seq\":0,\"to_seq\":0,\"events\":0}").is_err());
}
