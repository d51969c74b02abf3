//! Test support shared by the integration test targets: a brute-force
//! coverage oracle, a seeded family of small graphs, and proptest strategies
//! for protocol values.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tiertest::coverage::{ComponentGraph, CoverageItem, ExecutionTrace, GraphSpec};
use tiertest::domain::{
    AgentId, DedupKey, DefectReport, ExpectedOutput, Fields, Origin, Role, TestCase, TestResult, TestSuite,
    TestingType, Tier, Value, Verdict,
};
use tiertest::protocol::{
    Attribution, Envelope, FinalReport, Header, IngestOutcome, IngestRecord, MessageBody, MessageId, RepositorySummary,
    ResultReport, TestRequest,
};
use tiertest::reliability::ReliabilityEstimate;

// ---------------------------------------------------------------------------
// Graph family

pub const VARS: [&str; 3] = ["x", "y", "z"];

pub struct GeneratedGraph {
    pub graph: ComponentGraph,
    pub traces: Vec<ExecutionTrace>,
}

/// Graph number `seed` of the family: 2 to 8 nodes, a spine from entry to
/// exit plus random forward, backward and self edges, random def/use
/// annotations over three variables, and up to four random walks.
pub fn generated_graph(seed: u64) -> GeneratedGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 2 + (seed % 7) as usize;
    let nodes: Vec<String> = (0..k).map(|i| format!("n{i}")).collect();
    let mut edges = Vec::new();
    for i in 0..k - 1 {
        edges.push((nodes[i].clone(), nodes[i + 1].clone()));
    }
    let density = rng.gen_range(0.1..0.5);
    for a in 0..k - 1 {
        for b in 1..k {
            if b != a + 1 && rng.gen_bool(density) {
                edges.push((nodes[a].clone(), nodes[b].clone()));
            }
        }
    }
    let mut defs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut uses: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for n in &nodes {
        for v in VARS {
            if rng.gen_bool(0.3) {
                defs.entry(n.clone()).or_default().push(v.to_owned());
            }
            if rng.gen_bool(0.35) {
                uses.entry(n.clone()).or_default().push(v.to_owned());
            }
        }
    }
    let graph = ComponentGraph::new(GraphSpec {
        entry: nodes[0].clone(),
        exit: nodes[k - 1].clone(),
        nodes: nodes.clone(),
        edges: edges.clone(),
        defs,
        uses,
    })
    .expect("family graphs are well formed");

    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (a, b) in &edges {
        succ.entry(a.as_str()).or_default().push(b.as_str());
    }
    let walks = rng.gen_range(0..=4);
    let traces = (0..walks)
        .map(|w| {
            let mut path = vec![nodes[0].clone()];
            let limit = rng.gen_range(1..=3 * k);
            while path.len() < limit {
                let Some(next) = succ.get(path.last().unwrap().as_str()) else {
                    break;
                };
                path.push(next[rng.gen_range(0..next.len())].to_owned());
            }
            ExecutionTrace::new(format!("w{w}"), path)
        })
        .collect();
    GeneratedGraph { graph, traces }
}

// ---------------------------------------------------------------------------
// Brute-force coverage oracle

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSummary {
    pub covered: u64,
    pub total: u64,
    pub ratio: f64,
    pub uncovered: BTreeSet<CoverageItem>,
}

fn summary(total: usize, uncovered: BTreeSet<CoverageItem>) -> OracleSummary {
    let covered = total - uncovered.len();
    OracleSummary {
        covered: covered as u64,
        total: total as u64,
        ratio: if total == 0 { 1.0 } else { covered as f64 / total as f64 },
        uncovered,
    }
}

pub fn oracle_nodes(g: &ComponentGraph, traces: &[ExecutionTrace]) -> OracleSummary {
    let uncovered = g
        .nodes()
        .iter()
        .filter(|n| !traces.iter().any(|t| t.path.contains(n)))
        .map(|n| CoverageItem::Node { node: n.clone() })
        .collect();
    summary(g.nodes().len(), uncovered)
}

pub fn oracle_edges(g: &ComponentGraph, traces: &[ExecutionTrace]) -> OracleSummary {
    let uncovered = g
        .edges()
        .iter()
        .filter(|(a, b)| {
            !traces
                .iter()
                .any(|t| (1..t.path.len()).any(|i| t.path[i - 1] == *a && t.path[i] == *b))
        })
        .map(|(a, b)| CoverageItem::Edge {
            from: a.clone(),
            to: b.clone(),
        })
        .collect();
    summary(g.edges().len(), uncovered)
}

/// Every simple path from `from` to `to` with at least one edge.
pub fn simple_paths(g: &ComponentGraph, from: &str, to: &str) -> Vec<Vec<String>> {
    fn go(g: &ComponentGraph, path: &mut Vec<String>, to: &str, out: &mut Vec<Vec<String>>) {
        let last = path.last().unwrap().clone();
        for next in g.successors(&last) {
            if next == to {
                let mut done = path.clone();
                done.push(next.clone());
                out.push(done);
            } else if !path.contains(next) {
                path.push(next.clone());
                go(g, path, to, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    if from != to {
        go(g, &mut vec![from.to_owned()], to, &mut out);
    }
    out
}

/// Def-use triples (var, def, use) reachable along a def-clear simple path.
pub fn oracle_pairs(g: &ComponentGraph) -> BTreeSet<(String, String, String)> {
    let mut out = BTreeSet::new();
    for d in g.nodes() {
        for u in g.nodes() {
            for v in VARS {
                if !g.defines(d, v) || !g.uses_var(u, v) {
                    continue;
                }
                let clear = simple_paths(g, d, u)
                    .iter()
                    .any(|p| p[1..p.len() - 1].iter().all(|n| !g.defines(n, v)));
                if clear {
                    out.insert((v.to_owned(), d.clone(), u.clone()));
                }
            }
        }
    }
    out
}

fn exercised(g: &ComponentGraph, var: &str, def: &str, use_node: &str, traces: &[ExecutionTrace]) -> bool {
    traces.iter().any(|t| {
        let p = &t.path;
        (0..p.len()).any(|i| {
            (i + 1..p.len()).any(|j| p[i] == def && p[j] == use_node && p[i + 1..j].iter().all(|n| !g.defines(n, var)))
        })
    })
}

pub fn oracle_all_uses(g: &ComponentGraph, traces: &[ExecutionTrace]) -> OracleSummary {
    let pairs = oracle_pairs(g);
    let uncovered = pairs
        .iter()
        .filter(|(v, d, u)| !exercised(g, v, d, u, traces))
        .map(|(v, d, u)| CoverageItem::DefUse {
            var: v.clone(),
            def: d.clone(),
            r#use: u.clone(),
        })
        .collect();
    summary(pairs.len(), uncovered)
}

pub fn oracle_all_defs(g: &ComponentGraph, traces: &[ExecutionTrace]) -> OracleSummary {
    let pairs = oracle_pairs(g);
    let defs: BTreeSet<(&str, &str)> = pairs.iter().map(|(v, d, _)| (d.as_str(), v.as_str())).collect();
    let uncovered = defs
        .iter()
        .filter(|(d, v)| {
            !pairs
                .iter()
                .any(|(pv, pd, pu)| pv == v && pd == d && exercised(g, v, d, pu, traces))
        })
        .map(|(d, v)| CoverageItem::Def {
            node: (*d).to_owned(),
            var: (*v).to_owned(),
        })
        .collect();
    summary(defs.len(), uncovered)
}

// ---------------------------------------------------------------------------
// Protocol strategies

pub fn arb_value() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(Value::Int),
        any::<f64>()
            .prop_filter("finite", |x| x.is_finite())
            .prop_map(Value::Float),
        "\\PC{0,8}".prop_map(Value::Str),
    ];
    leaf.prop_recursive(2, 12, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::List),
            prop::collection::btree_map("[a-z_]{1,5}", inner, 0..4).prop_map(Value::Map),
        ]
    })
}

pub fn arb_fields() -> impl Strategy<Value = Fields> {
    prop::collection::btree_map("[a-z_]{1,6}", arb_value(), 0..4)
}

pub fn arb_agent() -> impl Strategy<Value = AgentId> {
    (
        prop_oneof![
            Just(Role::Dra),
            Just(Role::Mca),
            Just(Role::Cca),
            Just(Role::Mua),
            Just(Role::Tester)
        ],
        0u32..5,
    )
        .prop_map(|(role, instance)| AgentId { role, instance })
}

pub fn arb_testing_type() -> impl Strategy<Value = TestingType> {
    prop::sample::select(TestingType::ALL.to_vec())
}

fn arb_name() -> impl Strategy<Value = String> {
    "[a-z][a-z_]{0,9}"
}

pub fn arb_expected() -> impl Strategy<Value = ExpectedOutput> {
    (arb_name(), arb_fields(), arb_value()).prop_map(|(operation_name, for_input, value)| ExpectedOutput {
        operation_name,
        for_input,
        value,
    })
}

pub fn arb_case() -> impl Strategy<Value = TestCase> {
    (
        arb_name(),
        arb_name(),
        arb_fields(),
        prop::option::of(arb_name()),
        prop::option::of(arb_expected()),
        prop_oneof![
            Just(Origin::InitialSuite),
            Just(Origin::DiscoveredByCCA),
            Just(Origin::DiscoveredByMUA),
            Just(Origin::GeneratedByDRA)
        ],
    )
        .prop_map(|(id, op, input, defect_type, expected_output, origin)| {
            let mut case = TestCase::new(id, op, input);
            case.expected_output = expected_output;
            case.origin = origin;
            case.defect_type = match (origin.is_discovered(), defect_type) {
                (true, None) => Some("defect".into()),
                (_, d) => d,
            };
            case
        })
}

pub fn arb_suite() -> impl Strategy<Value = TestSuite> {
    (arb_name(), arb_testing_type(), prop::collection::vec(arb_case(), 0..4)).prop_map(|(id, ty, cases)| {
        let cases = cases
            .into_iter()
            .enumerate()
            .map(|(i, mut c)| {
                c.id = format!("{}-{i}", c.id);
                c
            })
            .collect();
        TestSuite::new(id, ty, cases).expect("ids are unique")
    })
}

pub fn arb_defect() -> impl Strategy<Value = DefectReport> {
    (
        arb_name(),
        arb_name(),
        arb_case(),
        arb_agent(),
        arb_fields(),
        any::<u64>(),
    )
        .prop_map(
            |(operation_name, defect_type, provoking_case, discovered_by, context, timestamp)| DefectReport {
                operation_name,
                defect_type,
                provoking_case,
                discovered_by,
                context,
                timestamp,
            },
        )
}

pub fn arb_result() -> impl Strategy<Value = TestResult> {
    (
        arb_name(),
        prop_oneof![Just(Verdict::Pass), Just(Verdict::Fail), Just(Verdict::Error)],
        prop::option::of(arb_value()),
        prop::option::of(arb_defect()),
        prop::option::of("\\PC{0,10}"),
    )
        .prop_map(|(case_id, verdict, observed_output, defect, note)| TestResult {
            case_id,
            verdict,
            observed_output,
            defect,
            note,
        })
}

pub fn arb_key() -> impl Strategy<Value = DedupKey> {
    (arb_name(), arb_name()).prop_map(|(d, o)| DedupKey::new(d, o))
}

pub fn arb_coverage() -> impl Strategy<Value = tiertest::coverage::CoverageSummary> {
    use tiertest::coverage::{CoverageSummary, Criterion};
    (
        prop_oneof![
            Just(Criterion::NodeCoverage),
            Just(Criterion::EdgeCoverage),
            Just(Criterion::AllDefs),
            Just(Criterion::AllUses)
        ],
        0u64..20,
        0u64..20,
        prop::collection::vec(
            prop_oneof![
                arb_name().prop_map(|node| CoverageItem::Node { node }),
                (arb_name(), arb_name()).prop_map(|(from, to)| CoverageItem::Edge { from, to }),
                (arb_name(), arb_name()).prop_map(|(node, var)| CoverageItem::Def { node, var }),
                (arb_name(), arb_name(), arb_name()).prop_map(|(var, def, u)| CoverageItem::DefUse {
                    var,
                    def,
                    r#use: u
                }),
            ],
            0..3,
        ),
    )
        .prop_map(|(criterion, covered, extra, uncovered_items)| {
            let total = covered + extra;
            CoverageSummary {
                criterion,
                covered,
                total,
                ratio: if total == 0 { 1.0 } else { covered as f64 / total as f64 },
                uncovered_items,
            }
        })
}

pub fn arb_request() -> impl Strategy<Value = TestRequest> {
    (arb_suite(), arb_fields()).prop_map(|(suite, params)| TestRequest {
        testing_type: suite.testing_type,
        suite,
        params,
    })
}

pub fn arb_report() -> impl Strategy<Value = FinalReport> {
    let reliability = (1u64..5, prop::collection::vec(0u64..10, 0..5)).prop_map(|(intervals, counts)| {
        let lambda = counts.iter().sum::<u64>() as f64 / intervals as f64;
        ReliabilityEstimate {
            intervals,
            defects_per_interval: counts,
            failure_intensity: lambda,
            reliability_one_interval: (-lambda).exp(),
        }
    });
    let attribution = (
        arb_key(),
        prop::option::of(prop_oneof![
            Just(Tier::Client),
            Just(Tier::Middleware),
            Just(Tier::Server)
        ]),
        "\\PC{0,10}",
    )
        .prop_map(|(key, tier, evidence)| Attribution { key, tier, evidence });
    let repository = (
        any::<u64>(),
        any::<u64>(),
        prop::collection::vec(
            (arb_key(), any::<bool>()).prop_map(|(key, stored)| IngestRecord {
                key,
                outcome: if stored {
                    IngestOutcome::Stored
                } else {
                    IngestOutcome::Discarded
                },
            }),
            0..3,
        ),
        prop::collection::vec(arb_name(), 0..3),
    )
        .prop_map(
            |(stored_cases, expected_outputs, ingested, removed)| RepositorySummary {
                stored_cases,
                expected_outputs,
                ingested,
                removed,
            },
        );
    (
        (
            arb_name(),
            prop::option::of(arb_testing_type()),
            prop::collection::btree_map(arb_agent(), prop::collection::vec(arb_result(), 0..3), 0..3),
            prop::collection::btree_map(arb_agent(), arb_coverage(), 0..2),
            prop::collection::vec(arb_defect(), 0..3),
            prop::option::of(reliability),
        ),
        (
            any::<u64>(),
            any::<u64>(),
            any::<bool>(),
            prop::collection::btree_set(arb_agent(), 0..3),
            prop::collection::vec(arb_agent(), 0..3),
            prop::collection::vec(attribution, 0..3),
            prop::option::of(repository),
        ),
    )
        .prop_map(
            |(
                (run_id, testing_type, per_agent_results, coverage, defects, reliability),
                (started, finished, partial, missing_agents, dispatched_muas, attributions, repository),
            )| FinalReport {
                run_id,
                testing_type,
                per_agent_results,
                coverage,
                defects,
                reliability,
                started,
                finished,
                partial,
                missing_agents,
                dispatched_muas,
                attributions,
                repository,
            },
        )
}

pub fn arb_body() -> impl Strategy<Value = MessageBody> {
    prop_oneof![
        arb_request().prop_map(MessageBody::TestRequest),
        arb_defect().prop_map(|report| MessageBody::DefectNotice { report }),
        arb_defect().prop_map(|report| MessageBody::TestCaseForward { report }),
        (arb_testing_type(), arb_fields()).prop_map(|(testing_type, constraints)| MessageBody::SuiteRequest {
            testing_type,
            constraints
        }),
        arb_suite().prop_map(|suite| MessageBody::SuiteResponse { suite }),
        (
            prop::collection::vec(arb_result(), 0..4),
            prop::option::of(arb_coverage()),
            any::<bool>()
        )
            .prop_map(|(results, coverage, partial)| MessageBody::ResultReport(ResultReport {
                results,
                coverage,
                partial
            })),
        Just(MessageBody::StatusQuery {}),
        any::<bool>().prop_map(|busy| MessageBody::StatusReply { busy }),
        (arb_name(), arb_request())
            .prop_map(|(target_client, task)| MessageBody::DispatchAgent { target_client, task }),
        arb_report().prop_map(|report| MessageBody::AggregateReport { report }),
        "\\PC{0,16}".prop_map(|reason| MessageBody::Rejected { reason }),
    ]
}

pub fn arb_envelope() -> impl Strategy<Value = Envelope> {
    (
        any::<u64>(),
        arb_agent(),
        arb_agent(),
        prop::option::of(any::<u64>()),
        any::<u64>(),
        arb_body(),
    )
        .prop_map(|(id, sender, recipient, corr, timestamp, body)| Envelope {
            header: Header {
                message_id: MessageId(id),
                sender,
                recipient,
                correlation_id: corr.map(MessageId),
                timestamp,
            },
            body,
        })
}

/// JSON text of `v` with every object's keys written in reverse order.
pub fn reversed_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(m) => {
            let parts: Vec<String> = m
                .iter()
                .rev()
                .map(|(k, x)| format!("{}:{}", serde_json::to_string(k).unwrap(), reversed_json(x)))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        serde_json::Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(reversed_json).collect();
            format!("[{}]", parts.join(","))
        }
        other => serde_json::to_string(other).unwrap(),
    }
}
