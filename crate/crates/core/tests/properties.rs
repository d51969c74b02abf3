mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use tiertest::agents::client::{scan_log, MonitorState};
use tiertest::agents::repository::SuiteStore;
use tiertest::bus::{Agent, Ctx, Inbox, LinkFaults, SimBus, SimConfig};
use tiertest::domain::{AgentId, DefectReport, Fields, Origin, TestCase, TestSuite, TestingType, Value};
use tiertest::parallel::partition;
use tiertest::protocol::{dedup_defects, deserialize, encode_frame, read_frame, serialize, Envelope, MessageBody};
use tiertest::sut::{LogEntry, LogOutcome, SutModel};

fn shop_store() -> SuiteStore {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/models/webshop.json");
    SuiteStore::from_model(&SutModel::load(std::path::Path::new(path)).unwrap()).unwrap()
}

fn small_report() -> impl Strategy<Value = DefectReport> {
    (0usize..4, 0usize..5, 0u64..1000, 0u32..3).prop_map(|(d, o, t, who)| {
        let defect_type = [
            "link_failure",
            "registration_defect",
            "output_mismatch",
            "middleware_function",
        ][d];
        let op = format!("op{o}");
        DefectReport {
            operation_name: op.clone(),
            defect_type: defect_type.to_owned(),
            provoking_case: TestCase::new(format!("case{t}"), op, Fields::new())
                .discovered(defect_type, Origin::DiscoveredByCCA),
            discovered_by: AgentId::cca(who + 1),
            context: Fields::new(),
            timestamp: t,
        }
    })
}

fn log_entry() -> impl Strategy<Value = LogEntry> {
    (0u64..100, 0usize..3, 0usize..4, prop::option::of(0usize..3)).prop_map(|(tick, s, o, err)| LogEntry {
        tick,
        session: format!("s{s}"),
        operation_name: format!("op{o}"),
        input: [("n".to_owned(), Value::Int(tick as i64))].into(),
        outcome: match err {
            None => LogOutcome::Ok,
            Some(e) => LogOutcome::Error {
                defect_type: format!("defect{e}"),
                context: Fields::new(),
            },
        },
    })
}

proptest! {
    #[test]
    fn envelope_round_trip(e in common::arb_envelope()) {
        let bytes = serialize(&e);
        let back = deserialize(&bytes).unwrap();
        prop_assert_eq!(&back, &e);
        prop_assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn canonical_bytes_ignore_key_order(e in common::arb_envelope()) {
        let bytes = serialize(&e);
        let tree: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        let reordered = common::reversed_json(&tree);
        let back = deserialize(reordered.as_bytes()).unwrap();
        prop_assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn frames_round_trip(payloads in prop::collection::vec(prop::collection::vec(any::<u8>(), 0..64), 0..5)) {
        let mut wire = Vec::new();
        for p in &payloads {
            wire.extend(encode_frame(p));
        }
        let mut r = wire.as_slice();
        for p in &payloads {
            let frame = read_frame(&mut r).unwrap();
            prop_assert_eq!(frame.as_ref(), Some(p));
        }
        prop_assert_eq!(read_frame(&mut r).unwrap(), None);
    }

    #[test]
    fn store_keeps_one_case_per_key(reports in prop::collection::vec(small_report(), 0..60)) {
        let mut store = shop_store();
        let before = store.len();
        let keys: BTreeSet<_> = reports.iter().map(|r| (r.defect_type.clone(), r.operation_name.clone())).collect();
        for r in &reports {
            store.ingest_forwarded_case(r).unwrap();
        }
        prop_assert_eq!(store.len() - before, keys.len());
        prop_assert_eq!(dedup_defects(&reports).len(), keys.len());
    }

    #[test]
    fn partition_is_round_robin(n in 0usize..40, k in 1u32..7) {
        let cases = (0..n).map(|i| TestCase::new(format!("c{i}"), "op", Fields::new())).collect();
        let suite = TestSuite::new("s", TestingType::Integration, cases).unwrap();
        let executors: Vec<_> = (1..=k).map(AgentId::cca).collect();
        let plan = partition("r", &suite, &executors).unwrap();
        let sizes = plan.sizes();
        prop_assert_eq!(sizes.len(), k as usize);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        for (j, s) in plan.streams.iter().enumerate() {
            prop_assert_eq!(s.executor, executors[j]);
            for (m, c) in s.cases.iter().enumerate() {
                prop_assert_eq!(&c.id, &format!("c{}", m * k as usize + j));
            }
        }
    }

    #[test]
    fn incremental_scan_equals_batch(
        entries in prop::collection::vec(log_entry(), 0..30),
        cuts in prop::collection::vec(any::<prop::sample::Index>(), 0..6),
    ) {
        let log: Vec<u8> = entries.iter().flat_map(|e| e.to_line().into_bytes()).collect();
        let mut batch_state = MonitorState::default();
        let batch = scan_log(&mut batch_state, &log, AgentId::cca(1));
        prop_assert!(batch.error.is_none());

        let mut points: Vec<usize> = cuts.iter().map(|i| i.index(log.len() + 1)).collect();
        points.push(log.len());
        points.sort();
        let mut state = MonitorState::default();
        let mut reports = Vec::new();
        for p in points {
            let out = scan_log(&mut state, &log[..p], AgentId::cca(1));
            prop_assert!(out.error.is_none());
            reports.extend(out.reports);
        }
        prop_assert_eq!(&reports, &batch.reports);
        prop_assert_eq!(&state, &batch_state);
        prop_assert_eq!(state.entries, entries.len() as u64);

        let errors: BTreeSet<_> = entries
            .iter()
            .filter_map(|e| match &e.outcome {
                LogOutcome::Error { defect_type, .. } => Some((e.session.clone(), defect_type.clone(), e.operation_name.clone())),
                LogOutcome::Ok => None,
            })
            .collect();
        prop_assert_eq!(reports.len(), errors.len());
    }
}

/// Sends `count` numbered messages to a peer when started.
struct Burst {
    me: AgentId,
    to: AgentId,
    count: i64,
}

impl Agent for Burst {
    fn id(&self) -> AgentId {
        self.me
    }

    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        for i in 0..self.count {
            ctx.send(self.to, MessageBody::Rejected { reason: i.to_string() });
        }
    }

    fn handle(&mut self, _env: Envelope, _ctx: &mut Ctx<'_>) {}
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sim_delivers_each_message_once_in_order(
        seed in any::<u64>(),
        count in 1i64..25,
        drop in prop::collection::btree_set(0u64..25, 0..5),
        duplicate in prop::collection::btree_set(0u64..25, 0..5),
    ) {
        let mut bus = SimBus::new(SimConfig { seed, max_jitter: 6, ..SimConfig::default() });
        bus.set_link_faults(LinkFaults { drop, duplicate });
        let (inbox, received) = Inbox::new(AgentId::cca(1));
        bus.register(Box::new(inbox)).unwrap();
        bus.register(Box::new(Burst { me: AgentId::MCA, to: AgentId::cca(1), count })).unwrap();
        prop_assert!(bus.run_until_idle());
        let got: Vec<String> = received
            .take()
            .into_iter()
            .map(|e| match e.body {
                MessageBody::Rejected { reason } => reason,
                other => panic!("unexpected {other:?}"),
            })
            .collect();
        let want: Vec<String> = (0..count).map(|i| i.to_string()).collect();
        prop_assert_eq!(got, want);
    }
}

/// Arms a long timer and a short one; the short one cancels the long one.
struct Canceller {
    fired: std::sync::Arc<std::sync::Mutex<Vec<u64>>>,
}

impl Agent for Canceller {
    fn id(&self) -> AgentId {
        AgentId::MCA
    }

    fn on_start(&mut self, ctx: &mut Ctx<'_>) {
        ctx.set_timer(1000, 1);
        ctx.set_timer(5, 2);
    }

    fn handle(&mut self, _env: Envelope, _ctx: &mut Ctx<'_>) {}

    fn on_timer(&mut self, token: u64, ctx: &mut Ctx<'_>) {
        self.fired.lock().unwrap().push(token);
        if token == 2 {
            ctx.cancel_timer(1);
        }
    }
}

#[test]
fn cancelled_timer_neither_fires_nor_keeps_bus_busy() {
    let fired = std::sync::Arc::new(std::sync::Mutex::new(Vec::new()));
    let mut bus = SimBus::with_seed(1);
    bus.register(Box::new(Canceller { fired: fired.clone() })).unwrap();
    assert!(bus.run_until_idle());
    assert_eq!(*fired.lock().unwrap(), vec![2]);
    assert!(bus.now() < 1000, "idle at {}", bus.now());
    bus.advance(2000);
    assert_eq!(*fired.lock().unwrap(), vec![2]);
}

#[test]
fn dedup_keeps_first_occurrence() {
    let mk = |d: &str, o: &str, t: u64| DefectReport {
        operation_name: o.into(),
        defect_type: d.into(),
        provoking_case: TestCase::new("c", o, Fields::new()).discovered(d, Origin::DiscoveredByCCA),
        discovered_by: AgentId::cca(1),
        context: BTreeMap::new(),
        timestamp: t,
    };
    let out = dedup_defects(&[mk("a", "x", 1), mk("a", "x", 2), mk("b", "x", 3), mk("", "x", 4)]);
    assert_eq!(out.iter().map(|d| d.timestamp).collect::<Vec<_>>(), vec![1, 3]);
}
