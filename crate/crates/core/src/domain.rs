//! Value types shared by every agent, the wire protocol and the simulated SUT.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Logical clock tick. Every timestamp in the framework is measured in ticks.
pub type Tick = u64;

/// Key-value input map handed to SUT operations.
pub type Fields = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DomainError {
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("duplicate test case id `{0}` in suite")]
    DuplicateCaseId(String),
    #[error("test case `{0}` was discovered but carries no defect type")]
    DiscoveredWithoutDefect(String),
    #[error("invalid agent id `{0}`")]
    InvalidAgentId(String),
}

/// Scalar or structured value. Maps compare structurally, so key order never
/// matters. Floats compare exactly; the simulated SUT is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

impl Value {
    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    /// Text form used for dataset lookups and pattern triggers: strings are
    /// taken verbatim, everything else in its canonical encoding.
    pub fn key_text(&self) -> String {
        match self {
            Value::Str(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = serde_json::to_string(self).map_err(|_| fmt::Error)?;
        f.write_str(&text)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_owned())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Bool(b) => serializer.serialize_bool(*b),
            Value::Int(i) => serializer.serialize_i64(*i),
            Value::Float(x) => serializer.serialize_f64(*x),
            Value::Str(s) => serializer.serialize_str(s),
            Value::List(items) => items.serialize(serializer),
            Value::Map(map) => map.serialize(serializer),
        }
    }
}

struct ValueVisitor;

impl<'de> Visitor<'de> for ValueVisitor {
    type Value = Value;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a string, number, boolean, list or map")
    }

    fn visit_bool<E: de::Error>(self, v: bool) -> Result<Value, E> {
        Ok(Value::Bool(v))
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Value, E> {
        Ok(Value::Int(v))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Value, E> {
        i64::try_from(v)
            .map(Value::Int)
            .map_err(|_| E::custom(format!("integer {v} out of range")))
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<Value, E> {
        Ok(Value::Float(v))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Value, E> {
        Ok(Value::Str(v.to_owned()))
    }

    fn visit_string<E: de::Error>(self, v: String) -> Result<Value, E> {
        Ok(Value::Str(v))
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Value, A::Error> {
        let mut items = Vec::new();
        while let Some(item) = seq.next_element()? {
            items.push(item);
        }
        Ok(Value::List(items))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Value, A::Error> {
        let mut map = BTreeMap::new();
        while let Some((k, v)) = access.next_entry::<String, Value>()? {
            map.insert(k, v);
        }
        Ok(Value::Map(map))
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(ValueVisitor)
    }
}

/// Canonical text of a field map; used as a lookup key for expected outputs.
pub fn canonical_fields(fields: &Fields) -> String {
    serde_json::to_string(fields).expect("field maps always serialize")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TestingType {
    Unit,
    Integration,
    Regression,
    Stress,
}

impl TestingType {
    pub const ALL: [TestingType; 4] = [
        TestingType::Unit,
        TestingType::Integration,
        TestingType::Regression,
        TestingType::Stress,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TestingType::Unit => "unit",
            TestingType::Integration => "integration",
            TestingType::Regression => "regression",
            TestingType::Stress => "stress",
        }
    }
}

impl fmt::Display for TestingType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Tiers of the system under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Client,
    Middleware,
    Server,
}

impl Tier {
    pub fn label(self) -> &'static str {
        match self {
            Tier::Client => "client",
            Tier::Middleware => "middleware",
            Tier::Server => "server",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Origin {
    InitialSuite,
    DiscoveredByCCA,
    DiscoveredByMUA,
    GeneratedByDRA,
}

impl Origin {
    pub fn is_discovered(self) -> bool {
        matches!(self, Origin::DiscoveredByCCA | Origin::DiscoveredByMUA)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedOutput {
    pub operation_name: String,
    pub for_input: Fields,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTestCase")]
pub struct TestCase {
    pub id: String,
    pub operation_name: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub input: Fields,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defect_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_output: Option<ExpectedOutput>,
    pub origin: Origin,
}

#[derive(Deserialize)]
struct RawTestCase {
    id: String,
    operation_name: String,
    #[serde(default)]
    input: Fields,
    #[serde(default)]
    defect_type: Option<String>,
    #[serde(default)]
    expected_output: Option<ExpectedOutput>,
    origin: Origin,
}

impl TryFrom<RawTestCase> for TestCase {
    type Error = DomainError;

    fn try_from(raw: RawTestCase) -> Result<Self, Self::Error> {
        if raw.origin.is_discovered() && raw.defect_type.is_none() {
            return Err(DomainError::DiscoveredWithoutDefect(raw.id));
        }
        Ok(TestCase {
            id: raw.id,
            operation_name: raw.operation_name,
            input: raw.input,
            defect_type: raw.defect_type,
            expected_output: raw.expected_output,
            origin: raw.origin,
        })
    }
}

impl TestCase {
    pub fn new(id: impl Into<String>, operation_name: impl Into<String>, input: Fields) -> Self {
        TestCase {
            id: id.into(),
            operation_name: operation_name.into(),
            input,
            defect_type: None,
            expected_output: None,
            origin: Origin::InitialSuite,
        }
    }

    /// Marks this case as the provoking case of a discovered defect.
    pub fn discovered(mut self, defect_type: impl Into<String>, origin: Origin) -> Self {
        self.defect_type = Some(defect_type.into());
        self.origin = origin;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTestSuite")]
pub struct TestSuite {
    pub id: String,
    pub testing_type: TestingType,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cases: Vec<TestCase>,
}

#[derive(Deserialize)]
struct RawTestSuite {
    id: String,
    testing_type: TestingType,
    #[serde(default)]
    cases: Vec<TestCase>,
}

impl TryFrom<RawTestSuite> for TestSuite {
    type Error = DomainError;

    fn try_from(raw: RawTestSuite) -> Result<Self, Self::Error> {
        TestSuite::new(raw.id, raw.testing_type, raw.cases)
    }
}

impl TestSuite {
    pub fn new(id: impl Into<String>, testing_type: TestingType, cases: Vec<TestCase>) -> Result<Self, DomainError> {
        let mut seen = std::collections::BTreeSet::new();
        for case in &cases {
            if !seen.insert(case.id.as_str()) {
                return Err(DomainError::DuplicateCaseId(case.id.clone()));
            }
        }
        Ok(TestSuite {
            id: id.into(),
            testing_type,
            cases,
        })
    }

    pub fn empty(id: impl Into<String>, testing_type: TestingType) -> Self {
        TestSuite {
            id: id.into(),
            testing_type,
            cases: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Dra,
    Mca,
    Cca,
    Mua,
    /// The human (or scripted) tester driving the deployment.
    Tester,
}

impl Role {
    pub fn code(self) -> &'static str {
        match self {
            Role::Dra => "DRA",
            Role::Mca => "MCA",
            Role::Cca => "CCA",
            Role::Mua => "MUA",
            Role::Tester => "TESTER",
        }
    }
}

impl FromStr for Role {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "DRA" => Ok(Role::Dra),
            "MCA" => Ok(Role::Mca),
            "CCA" => Ok(Role::Cca),
            "MUA" => Ok(Role::Mua),
            "TESTER" => Ok(Role::Tester),
            other => Err(DomainError::InvalidAgentId(other.to_owned())),
        }
    }
}

/// Agent address. Encoded on the wire as `ROLE-instance`, e.g. `CCA-2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId {
    pub role: Role,
    pub instance: u32,
}

impl AgentId {
    pub const DRA: AgentId = AgentId {
        role: Role::Dra,
        instance: 0,
    };
    pub const MCA: AgentId = AgentId {
        role: Role::Mca,
        instance: 0,
    };
    pub const TESTER: AgentId = AgentId {
        role: Role::Tester,
        instance: 0,
    };

    pub fn cca(instance: u32) -> Self {
        AgentId {
            role: Role::Cca,
            instance,
        }
    }

    pub fn mua(instance: u32) -> Self {
        AgentId {
            role: Role::Mua,
            instance,
        }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.role.code(), self.instance)
    }
}

impl FromStr for AgentId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (role, instance) = s
            .rsplit_once('-')
            .ok_or_else(|| DomainError::InvalidAgentId(s.to_owned()))?;
        let role = role
            .parse::<Role>()
            .map_err(|_| DomainError::InvalidAgentId(s.to_owned()))?;
        let instance = instance
            .parse::<u32>()
            .map_err(|_| DomainError::InvalidAgentId(s.to_owned()))?;
        Ok(AgentId { role, instance })
    }
}

impl Serialize for AgentId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AgentId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub operation_name: String,
    pub defect_type: String,
    pub provoking_case: TestCase,
    pub discovered_by: AgentId,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub context: Fields,
    pub timestamp: Tick,
}

/// The (defect type, operation name) pair that decides whether two
/// discovered cases are the same.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DedupKey {
    pub defect_type: String,
    pub operation_name: String,
}

impl DedupKey {
    pub fn new(defect_type: impl Into<String>, operation_name: impl Into<String>) -> Self {
        DedupKey {
            defect_type: defect_type.into(),
            operation_name: operation_name.into(),
        }
    }
}

impl fmt::Display for DedupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.defect_type, self.operation_name)
    }
}

/// Anything that carries a dedup key.
pub trait Keyed {
    fn dedup_key(&self) -> Result<DedupKey, DomainError>;
}

fn key_from(defect_type: Option<&str>, operation_name: &str) -> Result<DedupKey, DomainError> {
    let defect_type = defect_type
        .filter(|s| !s.is_empty())
        .ok_or(DomainError::MissingField("defect_type"))?;
    if operation_name.is_empty() {
        return Err(DomainError::MissingField("operation_name"));
    }
    Ok(DedupKey::new(defect_type, operation_name))
}

impl Keyed for DefectReport {
    fn dedup_key(&self) -> Result<DedupKey, DomainError> {
        key_from(Some(&self.defect_type), &self.operation_name)
    }
}

impl Keyed for TestCase {
    fn dedup_key(&self) -> Result<DedupKey, DomainError> {
        key_from(self.defect_type.as_deref(), &self.operation_name)
    }
}

/// Dedup key of a report or case.
pub fn dedup_key<K: Keyed + ?Sized>(item: &K) -> Result<DedupKey, DomainError> {
    item.dedup_key()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Pass,
    Fail,
    Error,
}

/// Compares an observed output with the expected one. Structural equality,
/// so map key order is irrelevant.
pub fn verdict_of(observed: &Value, expected: &ExpectedOutput) -> Verdict {
    if *observed == expected.value {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub case_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_output: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defect: Option<DefectReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl TestResult {
    pub fn pass(case_id: impl Into<String>, observed: Option<Value>) -> Self {
        TestResult {
            case_id: case_id.into(),
            verdict: Verdict::Pass,
            observed_output: observed,
            defect: None,
            note: None,
        }
    }

    pub fn fail(case_id: impl Into<String>, observed: Option<Value>, defect: DefectReport) -> Self {
        TestResult {
            case_id: case_id.into(),
            verdict: Verdict::Fail,
            observed_output: observed,
            defect: Some(defect),
            note: None,
        }
    }

    pub fn error(case_id: impl Into<String>, note: impl Into<String>) -> Self {
        TestResult {
            case_id: case_id.into(),
            verdict: Verdict::Error,
            observed_output: None,
            defect: None,
            note: Some(note.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(defect: &str, op: &str, input: Fields) -> DefectReport {
        DefectReport {
            operation_name: op.into(),
            defect_type: defect.into(),
            provoking_case: TestCase::new("c1", op, input).discovered(defect, Origin::DiscoveredByCCA),
            discovered_by: AgentId::cca(1),
            context: Fields::new(),
            timestamp: 3,
        }
    }

    fn fields(pairs: &[(&str, Value)]) -> Fields {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn dedup_key_is_defect_type_then_operation() {
        let r = report("link_failure", "home_page", Fields::new());
        assert_eq!(dedup_key(&r).unwrap(), DedupKey::new("link_failure", "home_page"));
    }

    #[test]
    fn case_without_defect_type_has_no_key() {
        let case = TestCase::new("c", "home_page", Fields::new());
        assert_eq!(dedup_key(&case), Err(DomainError::MissingField("defect_type")));
        let mut r = report("x", "", Fields::new());
        assert_eq!(dedup_key(&r), Err(DomainError::MissingField("operation_name")));
        r.operation_name = "op".into();
        r.defect_type.clear();
        assert_eq!(dedup_key(&r), Err(DomainError::MissingField("defect_type")));
    }

    #[test]
    fn key_ignores_provoking_input() {
        let a = report("e", "op", fields(&[("x", 1.into())]));
        let b = report("e", "op", fields(&[("x", 2.into()), ("y", "z".into())]));
        // field-by-field oracle: keys are equal iff both key fields are equal
        let oracle = a.defect_type == b.defect_type && a.operation_name == b.operation_name;
        assert!(oracle);
        assert_eq!(dedup_key(&a).unwrap() == dedup_key(&b).unwrap(), oracle);
    }

    #[test]
    fn verdicts() {
        let exp = |v: Value| ExpectedOutput {
            operation_name: "op".into(),
            for_input: Fields::new(),
            value: v,
        };
        assert_eq!(verdict_of(&Value::Int(42), &exp(Value::Int(42))), Verdict::Pass);
        assert_eq!(verdict_of(&Value::Int(41), &exp(Value::Int(42))), Verdict::Fail);
        let observed: Value = serde_json::from_str(r#"{"a":1,"b":2}"#).unwrap();
        let expected: Value = serde_json::from_str(r#"{"b":2,"a":1}"#).unwrap();
        assert_eq!(verdict_of(&observed, &exp(expected)), Verdict::Pass);
        // integers and floats are distinct values
        assert_eq!(verdict_of(&Value::Int(1), &exp(Value::Float(1.0))), Verdict::Fail);
    }

    #[test]
    fn agent_id_text_form() {
        let id: AgentId = "CCA-12".parse().unwrap();
        assert_eq!(id, AgentId::cca(12));
        assert_eq!(AgentId::TESTER.to_string(), "TESTER-0");
        assert!("XYZ-1".parse::<AgentId>().is_err());
        assert!("CCA".parse::<AgentId>().is_err());
    }

    #[test]
    fn suites_reject_duplicate_ids() {
        let case = TestCase::new("a", "op", Fields::new());
        let err = TestSuite::new("s", TestingType::Unit, vec![case.clone(), case]).unwrap_err();
        assert_eq!(err, DomainError::DuplicateCaseId("a".into()));
        let json = r#"{"id":"s","testing_type":"Unit","cases":[
            {"id":"a","operation_name":"op","origin":"InitialSuite"},
            {"id":"a","operation_name":"op","origin":"InitialSuite"}]}"#;
        assert!(serde_json::from_str::<TestSuite>(json).is_err());
    }

    #[test]
    fn discovered_case_requires_defect_type() {
        let json = r#"{"id":"a","operation_name":"op","origin":"DiscoveredByCCA"}"#;
        assert!(serde_json::from_str::<TestCase>(json).is_err());
    }

    #[test]
    fn value_keeps_int_and_float_apart() {
        let v: Value = serde_json::from_str("[1, 1.0, -3, \"s\", true]").unwrap();
        assert_eq!(
            v,
            Value::List(vec![
                Value::Int(1),
                Value::Float(1.0),
                Value::Int(-3),
                Value::Str("s".into()),
                Value::Bool(true)
            ])
        );
        assert!(serde_json::from_str::<Value>("null").is_err());
    }
}
