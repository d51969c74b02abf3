//! Inter-agent message envelope and its canonical wire encoding.
//!
//! An envelope is a JSON object with a `header` and a `body`; the body carries
//! a `kind` discriminator naming the message variant. The canonical form is a
//! single UTF-8 line with object keys sorted lexicographically and absent
//! optional fields omitted (never `null`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::coverage::CoverageSummary;
use crate::domain::{
    AgentId, DedupKey, DefectReport, Fields, Keyed, TestResult, TestSuite, TestingType, Tick, Tier, Verdict,
};
use crate::reliability::ReliabilityEstimate;

/// Upper bound on a single framed envelope.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    MalformedMessage(String),
    #[error("unknown body kind `{0}`")]
    UnknownBodyKind(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte limit")]
    FrameTooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageId(pub u64);

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub message_id: MessageId,
    pub sender: AgentId,
    pub recipient: AgentId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_id: Option<MessageId>,
    pub timestamp: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub header: Header,
    pub body: MessageBody,
}

impl Envelope {
    pub fn kind(&self) -> &'static str {
        self.body.kind()
    }
}

/// A request to execute a suite. `params` carries workflow parameters such
/// as stress `volume` and `intervals`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRequest {
    pub testing_type: TestingType,
    pub suite: TestSuite,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: Fields,
}

impl TestRequest {
    pub fn new(suite: TestSuite) -> Self {
        TestRequest {
            testing_type: suite.testing_type,
            suite,
            params: Fields::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultReport {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub results: Vec<TestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<CoverageSummary>,
    /// Set when the executor ran out of time before finishing the suite.
    #[serde(default, skip_serializing_if = "is_false")]
    pub partial: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IngestOutcome {
    Stored,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestRecord {
    pub key: DedupKey,
    pub outcome: IngestOutcome,
}

/// State of the repository agent's test-suite database.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RepositorySummary {
    pub stored_cases: u64,
    pub expected_outputs: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ingested: Vec<IngestRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removed: Vec<String>,
}

/// Which tier a defect was traced to, and how.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribution {
    pub key: DedupKey,
    /// Absent when no diagnosis step reproduced the failure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<Tier>,
    pub evidence: String,
}

/// Tester-facing report. Test runs fill `testing_type`; reports triggered by
/// log monitoring or repository summaries leave it absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub testing_type: Option<TestingType>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_agent_results: BTreeMap<AgentId, Vec<TestResult>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub coverage: BTreeMap<AgentId, CoverageSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defects: Vec<DefectReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reliability: Option<ReliabilityEstimate>,
    pub started: Tick,
    pub finished: Tick,
    #[serde(default, skip_serializing_if = "is_false")]
    pub partial: bool,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub missing_agents: BTreeSet<AgentId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dispatched_muas: Vec<AgentId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributions: Vec<Attribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repository: Option<RepositorySummary>,
}

impl FinalReport {
    pub fn new(run_id: impl Into<String>, testing_type: Option<TestingType>, started: Tick) -> Self {
        FinalReport {
            run_id: run_id.into(),
            testing_type,
            per_agent_results: BTreeMap::new(),
            coverage: BTreeMap::new(),
            defects: Vec::new(),
            reliability: None,
            started,
            finished: started,
            partial: false,
            missing_agents: BTreeSet::new(),
            dispatched_muas: Vec::new(),
            attributions: Vec::new(),
            repository: None,
        }
    }

    /// Recomputes `defects` as the Fail-verdict defects of all per-agent
    /// results, first occurrence per dedup key, in agent then result order.
    pub fn collect_defects(&mut self) {
        self.defects = dedup_defects(
            self.per_agent_results
                .values()
                .flatten()
                .filter(|r| r.verdict == Verdict::Fail)
                .filter_map(|r| r.defect.as_ref()),
        );
    }

    pub fn defect_keys(&self) -> Vec<DedupKey> {
        self.defects.iter().filter_map(|d| d.dedup_key().ok()).collect()
    }

    pub fn all_results(&self) -> impl Iterator<Item = &TestResult> {
        self.per_agent_results.values().flatten()
    }

    /// Number of Fail verdicts, counting repeats of the same key.
    pub fn failure_count(&self) -> usize {
        self.all_results().filter(|r| r.verdict == Verdict::Fail).count()
    }
}

pub fn dedup_defects<'a>(reports: impl IntoIterator<Item = &'a DefectReport>) -> Vec<DefectReport> {
    let mut seen = BTreeSet::new();
    reports
        .into_iter()
        .filter(|d| match d.dedup_key() {
            Ok(key) => seen.insert(key),
            Err(_) => false,
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum MessageBody {
    /// Ask an executor to run a suite of the given testing type.
    TestRequest(TestRequest),
    /// An executor reports a newly discovered defect and its provoking case.
    DefectNotice {
        report: DefectReport,
    },
    /// The controller relays a defect notice to the repository.
    TestCaseForward {
        report: DefectReport,
    },
    SuiteRequest {
        testing_type: TestingType,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        constraints: Fields,
    },
    SuiteResponse {
        suite: TestSuite,
    },
    ResultReport(ResultReport),
    StatusQuery {},
    StatusReply {
        busy: bool,
    },
    DispatchAgent {
        target_client: String,
        task: TestRequest,
    },
    AggregateReport {
        report: FinalReport,
    },
    /// A request could not be served.
    Rejected {
        reason: String,
    },
}

/// Every body kind a conforming peer understands.
pub const BODY_KINDS: [&str; 11] = [
    "TestRequest",
    "DefectNotice",
    "TestCaseForward",
    "SuiteRequest",
    "SuiteResponse",
    "ResultReport",
    "StatusQuery",
    "StatusReply",
    "DispatchAgent",
    "AggregateReport",
    "Rejected",
];

impl MessageBody {
    pub fn kind(&self) -> &'static str {
        match self {
            MessageBody::TestRequest(_) => "TestRequest",
            MessageBody::DefectNotice { .. } => "DefectNotice",
            MessageBody::TestCaseForward { .. } => "TestCaseForward",
            MessageBody::SuiteRequest { .. } => "SuiteRequest",
            MessageBody::SuiteResponse { .. } => "SuiteResponse",
            MessageBody::ResultReport(_) => "ResultReport",
            MessageBody::StatusQuery {} => "StatusQuery",
            MessageBody::StatusReply { .. } => "StatusReply",
            MessageBody::DispatchAgent { .. } => "DispatchAgent",
            MessageBody::AggregateReport { .. } => "AggregateReport",
            MessageBody::Rejected { .. } => "Rejected",
        }
    }
}

/// Canonical encoding of any serializable value: compact, keys sorted.
pub fn to_canonical<T: Serialize>(value: &T) -> Result<Vec<u8>, serde_json::Error> {
    // Routing through `serde_json::Value` sorts every object's keys.
    let tree = serde_json::to_value(value)?;
    serde_json::to_vec(&tree)
}

/// Canonical encoding as text, for values known to serialize.
pub fn canonical_text<T: Serialize>(value: &T) -> String {
    let bytes = to_canonical(value).expect("value serializes to JSON");
    String::from_utf8(bytes).expect("serde_json emits UTF-8")
}

pub fn serialize(env: &Envelope) -> Vec<u8> {
    to_canonical(env).expect("envelopes contain only finite numbers and string keys")
}

pub fn deserialize(bytes: &[u8]) -> Result<Envelope, ProtocolError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ProtocolError::MalformedMessage(format!("not UTF-8: {e}")))?;
    let tree: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ProtocolError::MalformedMessage(e.to_string()))?;
    let root = tree
        .as_object()
        .ok_or_else(|| ProtocolError::SchemaViolation("envelope is not an object".into()))?;
    if !root.contains_key("header") {
        return Err(ProtocolError::SchemaViolation("missing `header`".into()));
    }
    let body = root
        .get("body")
        .and_then(|b| b.as_object())
        .ok_or_else(|| ProtocolError::SchemaViolation("missing `body` object".into()))?;
    let kind = body
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| ProtocolError::SchemaViolation("body has no `kind`".into()))?;
    if !BODY_KINDS.contains(&kind) {
        return Err(ProtocolError::UnknownBodyKind(kind.to_owned()));
    }
    serde_json::from_value(tree).map_err(|e| ProtocolError::SchemaViolation(e.to_string()))
}

/// Writes a 4-byte big-endian length prefix followed by the payload.
pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> Result<(), ProtocolError> {
    if payload.len() > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(payload.len()));
    }
    w.write_all(&(payload.len() as u32).to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. Returns `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, ProtocolError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}

pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 4);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{TestCase, Value};

    fn env(body: MessageBody) -> Envelope {
        Envelope {
            header: Header {
                message_id: MessageId(7),
                sender: AgentId::MCA,
                recipient: AgentId::cca(1),
                correlation_id: None,
                timestamp: 12,
            },
            body,
        }
    }

    fn unit_request() -> MessageBody {
        let mut input = Fields::new();
        input.insert("id".into(), Value::Int(1));
        let suite = TestSuite::new("s1", TestingType::Unit, vec![TestCase::new("c1", "get_user", input)]).unwrap();
        MessageBody::TestRequest(TestRequest::new(suite))
    }

    #[test]
    fn round_trip_and_kind() {
        let e = env(unit_request());
        let bytes = serialize(&e);
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, e);
        assert_eq!(serialize(&back), bytes);
        match back.body {
            MessageBody::TestRequest(req) => assert_eq!(req.testing_type, TestingType::Unit),
            other => panic!("unexpected body {other:?}"),
        }
    }

    #[test]
    fn canonical_form_is_single_line_sorted_and_null_free() {
        let e = env(MessageBody::StatusQuery {});
        let text = String::from_utf8(serialize(&e)).unwrap();
        assert_eq!(
            text,
            r#"{"body":{"kind":"StatusQuery"},"header":{"message_id":7,"recipient":"CCA-1","sender":"MCA-0","timestamp":12}}"#
        );
        let mut with_newline = env(MessageBody::Rejected { reason: "a\nb".into() });
        with_newline.header.correlation_id = Some(MessageId(3));
        let text = String::from_utf8(serialize(&with_newline)).unwrap();
        assert!(!text.contains('\n'));
        assert!(!text.contains("null"));
    }

    #[test]
    fn map_insertion_order_does_not_matter() {
        let build = |keys: &[&str]| {
            let mut constraints = Fields::new();
            for (i, k) in keys.iter().enumerate() {
                constraints.insert(k.to_string(), Value::Int(keys.len() as i64 - i as i64));
            }
            constraints
        };
        let a = build(&["volume", "alpha", "zeta"]);
        let mut b = Fields::new();
        b.insert("zeta".into(), a["zeta"].clone());
        b.insert("alpha".into(), a["alpha"].clone());
        b.insert("volume".into(), a["volume"].clone());
        let ea = env(MessageBody::SuiteRequest {
            testing_type: TestingType::Stress,
            constraints: a,
        });
        let eb = env(MessageBody::SuiteRequest {
            testing_type: TestingType::Stress,
            constraints: b,
        });
        assert_eq!(serialize(&ea), serialize(&eb));
    }

    #[test]
    fn unknown_kind_and_schema_errors() {
        let bad = br#"{"header":{"message_id":1,"sender":"MCA-0","recipient":"DRA-0","timestamp":0},"body":{"kind":"FooBar"}}"#;
        assert!(matches!(deserialize(bad), Err(ProtocolError::UnknownBodyKind(k)) if k == "FooBar"));
        let missing = br#"{"header":{"message_id":1,"sender":"MCA-0","recipient":"DRA-0","timestamp":0},"body":{"kind":"TestRequest","testing_type":"Unit"}}"#;
        assert!(matches!(deserialize(missing), Err(ProtocolError::SchemaViolation(_))));
        assert!(matches!(
            deserialize(b"{not json"),
            Err(ProtocolError::MalformedMessage(_))
        ));
        assert!(matches!(
            deserialize(&[0xff, 0xfe]),
            Err(ProtocolError::MalformedMessage(_))
        ));
        assert!(matches!(deserialize(b"[1]"), Err(ProtocolError::SchemaViolation(_))));
    }

    #[test]
    fn frames() {
        let payload = serialize(&env(MessageBody::StatusReply { busy: true }));
        let framed = encode_frame(&payload);
        assert_eq!(&framed[..4], &(payload.len() as u32).to_be_bytes());
        let mut cursor = io::Cursor::new(framed);
        assert_eq!(read_frame(&mut cursor).unwrap().unwrap(), payload);
        assert!(read_frame(&mut cursor).unwrap().is_none());
        let mut huge = io::Cursor::new(u32::MAX.to_be_bytes().to_vec());
        assert!(matches!(read_frame(&mut huge), Err(ProtocolError::FrameTooLarge(_))));
    }
}
