//! Simulated three-tier system under test.
//!
//! A [`SutModel`] is the machine-readable design document: client and
//! middleware components with their control-flow graphs, server datasets,
//! declared operations with their behavior rules, and injectable faults.
//! [`Sut`] is the live system built from a model; it owns the fault flags and
//! evaluates calls tier by tier.

pub mod expr;
pub mod session;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::coverage::{ComponentGraph, ExecutionTrace};
use crate::domain::{Fields, TestCase, TestingType, Tier, Value};

pub use session::{run_user_session, LogEntry, LogOutcome, SessionAction, UserSessionScript};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("model parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("operation `{op}` has no declared behavior for input {input}: {source}")]
    Behavior {
        op: String,
        input: String,
        source: EvalError,
    },
}

fn invalid(msg: impl Into<String>) -> ModelError {
    ModelError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("no table entry matches the input")]
    UndeclaredInput,
    #[error(transparent)]
    Expr(#[from] expr::ExprError),
    #[error("dataset `{dataset}` has no record `{key}`")]
    NotFound { dataset: String, key: String },
    #[error("input field `{0}` is missing")]
    MissingField(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SutError {
    #[error("unknown operation `{0}`")]
    UnknownOperation(String),
    #[error("unknown fault `{0}`")]
    UnknownFault(String),
    #[error("unknown client `{0}`")]
    UnknownClient(String),
    #[error("{0} tier is unreachable")]
    Unreachable(Tier),
    #[error("operation `{op}` does not traverse the {tier} tier")]
    NotOnPath { op: String, tier: Tier },
    #[error("operation `{op}` failed to evaluate: {source}")]
    Behavior { op: String, source: EvalError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub id: String,
    pub component: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub tier: Tier,
    pub graph: ComponentGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub input: Fields,
    pub output: Value,
}

/// Declarative input→output behavior of an operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Behavior {
    /// First entry whose input fields all match wins; extra input fields are ignored.
    Table {
        entries: Vec<TableEntry>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        default: Option<Value>,
    },
    /// Arithmetic over numeric input fields.
    Expr { expr: String },
    /// Record lookup in a server dataset keyed by an input field.
    Fetch { dataset: String, key: String },
}

/// Deterministic predicate over a call's input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "when", rename_all = "snake_case")]
pub enum Predicate {
    Always,
    FieldEquals {
        field: String,
        value: Value,
    },
    FieldMatches {
        field: String,
        pattern: String,
    },
    /// Integer field is a positive multiple of `n`.
    EveryNth {
        field: String,
        n: u64,
    },
}

impl Predicate {
    pub fn matches(&self, input: &Fields) -> bool {
        match self {
            Predicate::Always => true,
            Predicate::FieldEquals { field, value } => input.get(field) == Some(value),
            Predicate::FieldMatches { field, pattern } => match input.get(field) {
                Some(v) => Regex::new(pattern).is_ok_and(|re| re.is_match(&v.key_text())),
                None => false,
            },
            Predicate::EveryNth { field, n } => input
                .get(field)
                .and_then(Value::as_i64)
                .is_some_and(|v| v > 0 && *n > 0 && (v as u64) % n == 0),
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            Predicate::FieldMatches { pattern, .. } => Regex::new(pattern)
                .map(|_| ())
                .map_err(|e| format!("bad pattern `{pattern}`: {e}")),
            Predicate::EveryNth { n: 0, .. } => Err("every_nth needs n > 0".into()),
            _ => Ok(()),
        }
    }
}

/// Path taken through one component; the first walk whose guard holds is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Walk {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub when: Option<Predicate>,
    pub path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationSpec {
    pub name: String,
    /// Tiers a call traverses, starting at the client.
    pub tiers: Vec<Tier>,
    /// Client that hosts the operation; any client when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<String>,
    pub behavior: Behavior,
    #[serde(default)]
    pub examples: Vec<Fields>,
    #[serde(default)]
    pub walks: BTreeMap<String, Vec<Walk>>,
}

impl OperationSpec {
    pub fn traverses(&self, tier: Tier) -> bool {
        self.tiers.contains(&tier)
    }

    pub fn hosted_on(&self, client: &str) -> bool {
        self.client.as_deref().is_none_or(|c| c == client)
    }

    fn walk_for(&self, component: &str, input: &Fields) -> Option<&Walk> {
        self.walks
            .get(component)?
            .iter()
            .find(|w| w.when.as_ref().is_none_or(|p| p.matches(input)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalCause {
    /// The middleware retrieval function itself misbehaves.
    MiddlewareFunction,
    /// The server holds data that disagrees with the design document.
    InconsistentData,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    LinkFailure,
    InputValidationError,
    RetrievalError { cause: RetrievalCause },
}

impl FaultKind {
    pub fn default_defect_type(self) -> &'static str {
        match self {
            FaultKind::LinkFailure => "link_failure",
            FaultKind::InputValidationError => "registration_defect",
            FaultKind::RetrievalError { .. } => "retrieval_error",
        }
    }

    pub fn tier(self) -> Tier {
        match self {
            FaultKind::LinkFailure | FaultKind::InputValidationError => Tier::Client,
            FaultKind::RetrievalError {
                cause: RetrievalCause::MiddlewareFunction,
            } => Tier::Middleware,
            FaultKind::RetrievalError {
                cause: RetrievalCause::InconsistentData,
            } => Tier::Server,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: FaultKind,
    pub operation: String,
    pub trigger: Predicate,
    #[serde(default)]
    pub active: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defect_type: Option<String>,
    /// Extra diagnostic context attached to the error, e.g. form and page names.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub context: Fields,
    /// Value served instead of the stored record by an inconsistent-data fault.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrupt_value: Option<Value>,
}

impl FaultSpec {
    pub fn defect_type(&self) -> &str {
        self.defect_type.as_deref().unwrap_or(self.kind.default_defect_type())
    }
}

/// A test case declared directly in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub id: String,
    pub operation_name: String,
    #[serde(default)]
    pub input: Fields,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SutModel {
    pub name: String,
    pub clients: Vec<ClientSpec>,
    pub middleware: String,
    pub components: BTreeMap<String, ComponentSpec>,
    #[serde(default)]
    pub datasets: BTreeMap<String, BTreeMap<String, Value>>,
    #[serde(default)]
    pub operations: Vec<OperationSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    /// Explicit initial suites; types not listed are derived from examples.
    #[serde(default)]
    pub suites: BTreeMap<TestingType, Vec<CaseSpec>>,
}

impl SutModel {
    /// Parses and validates a model document.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let model: SutModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.clients.is_empty() {
            return Err(invalid("at least one client is required"));
        }
        let mut client_ids = BTreeSet::new();
        for c in &self.clients {
            if !client_ids.insert(c.id.as_str()) {
                return Err(invalid(format!("duplicate client `{}`", c.id)));
            }
            self.expect_component(&c.component, Tier::Client)
                .map_err(|e| invalid(format!("client `{}`: {e}", c.id)))?;
        }
        self.expect_component(&self.middleware, Tier::Middleware)
            .map_err(|e| invalid(format!("middleware: {e}")))?;

        let mut op_names = BTreeSet::new();
        for op in &self.operations {
            if !op_names.insert(op.name.as_str()) {
                return Err(invalid(format!("duplicate operation `{}`", op.name)));
            }
            self.validate_operation(op)
                .map_err(|e| invalid(format!("operation `{}`: {e}", op.name)))?;
            for example in &op.examples {
                self.evaluate(&op.name, example).map_err(|e| match e {
                    SutError::Behavior { op, source } => ModelError::Behavior {
                        op,
                        input: crate::domain::canonical_fields(example),
                        source,
                    },
                    other => invalid(other.to_string()),
                })?;
            }
        }

        let mut fault_ids = BTreeSet::new();
        for f in &self.faults {
            if !fault_ids.insert(f.id.as_str()) {
                return Err(invalid(format!("duplicate fault `{}`", f.id)));
            }
            let op = self
                .operation(&f.operation)
                .ok_or_else(|| invalid(format!("fault `{}` targets unknown operation `{}`", f.id, f.operation)))?;
            f.trigger
                .validate()
                .map_err(|e| invalid(format!("fault `{}`: {e}", f.id)))?;
            if let FaultKind::RetrievalError { .. } = f.kind {
                if !matches!(op.behavior, Behavior::Fetch { .. }) {
                    return Err(invalid(format!(
                        "fault `{}`: retrieval faults need an operation that fetches server data",
                        f.id
                    )));
                }
            }
        }

        for (ty, cases) in &self.suites {
            let mut ids = BTreeSet::new();
            for c in cases {
                if !ids.insert(c.id.as_str()) {
                    return Err(invalid(format!("{ty} suite: duplicate case `{}`", c.id)));
                }
                if self.operation(&c.operation_name).is_none() {
                    return Err(invalid(format!(
                        "{ty} suite: case `{}` targets unknown operation `{}`",
                        c.id, c.operation_name
                    )));
                }
            }
        }
        Ok(())
    }

    fn expect_component(&self, name: &str, tier: Tier) -> Result<(), String> {
        match self.components.get(name) {
            None => Err(format!("unknown component `{name}`")),
            Some(c) if c.tier != tier => Err(format!("component `{name}` is not a {tier} component")),
            Some(_) => Ok(()),
        }
    }

    fn validate_operation(&self, op: &OperationSpec) -> Result<(), String> {
        if op.tiers.first() != Some(&Tier::Client) {
            return Err("tier path must start at the client tier".into());
        }
        if op.tiers.windows(2).any(|w| w[0] >= w[1]) {
            return Err("tier path must list client, middleware, server in order".into());
        }
        if let Some(c) = &op.client {
            if !self.clients.iter().any(|s| &s.id == c) {
                return Err(format!("unknown client `{c}`"));
            }
        }
        match &op.behavior {
            Behavior::Table { entries, default } => {
                if entries.is_empty() && default.is_none() {
                    return Err("table behavior declares no entries".into());
                }
            }
            Behavior::Expr { expr } => {
                expr::parse(expr).map_err(|e| format!("expression `{expr}`: {e}"))?;
            }
            Behavior::Fetch { dataset, .. } => {
                if !self.datasets.contains_key(dataset) {
                    return Err(format!("unknown dataset `{dataset}`"));
                }
                if !op.traverses(Tier::Server) {
                    return Err("fetch behavior requires the server tier".into());
                }
            }
        }
        for (component, walks) in &op.walks {
            let spec = self
                .components
                .get(component)
                .ok_or_else(|| format!("walk over unknown component `{component}`"))?;
            if !op.traverses(spec.tier) {
                return Err(format!(
                    "walk over `{component}` but the {} tier is not on the path",
                    spec.tier
                ));
            }
            for w in walks {
                if let Some(p) = &w.when {
                    p.validate()?;
                }
                spec.graph
                    .check_walk(&w.path)
                    .map_err(|e| format!("walk over `{component}`: {e}"))?;
                if w.path.last().map(String::as_str) != Some(spec.graph.exit()) {
                    return Err(format!("walk over `{component}` does not end at exit"));
                }
            }
        }
        Ok(())
    }

    pub fn operation(&self, name: &str) -> Option<&OperationSpec> {
        self.operations.iter().find(|o| o.name == name)
    }

    pub fn fault(&self, id: &str) -> Option<&FaultSpec> {
        self.faults.iter().find(|f| f.id == id)
    }

    pub fn client(&self, id: &str) -> Option<&ClientSpec> {
        self.clients.iter().find(|c| c.id == id)
    }

    pub fn client_ids(&self) -> Vec<String> {
        self.clients.iter().map(|c| c.id.clone()).collect()
    }

    pub fn graph(&self, component: &str) -> Option<&ComponentGraph> {
        self.components.get(component).map(|c| &c.graph)
    }

    pub fn client_graph(&self, client: &str) -> Option<&ComponentGraph> {
        self.graph(&self.client(client)?.component)
    }

    pub fn middleware_graph(&self) -> &ComponentGraph {
        &self.components[&self.middleware].graph
    }

    /// Every declared (operation, example input) pair.
    pub fn declared_examples(&self) -> impl Iterator<Item = (&OperationSpec, &Fields)> {
        self.operations
            .iter()
            .flat_map(|op| op.examples.iter().map(move |ex| (op, ex)))
    }

    /// Reference behavior: the operation's rule evaluated with every fault off.
    pub fn evaluate(&self, op_name: &str, input: &Fields) -> Result<Value, SutError> {
        let op = self
            .operation(op_name)
            .ok_or_else(|| SutError::UnknownOperation(op_name.to_owned()))?;
        eval_behavior(op, input, |dataset, key| self.record(dataset, key)).map_err(|source| SutError::Behavior {
            op: op_name.to_owned(),
            source,
        })
    }

    pub fn record(&self, dataset: &str, key: &str) -> Option<Value> {
        self.datasets.get(dataset)?.get(key).cloned()
    }

    /// Initial suite for a testing type: explicitly declared cases, or else
    /// every example of every operation that qualifies for the type.
    pub fn initial_suite(&self, ty: TestingType) -> Vec<TestCase> {
        if let Some(cases) = self.suites.get(&ty) {
            return cases
                .iter()
                .map(|c| TestCase::new(c.id.clone(), c.operation_name.clone(), c.input.clone()))
                .collect();
        }
        let mut out = Vec::new();
        for op in &self.operations {
            let qualifies = match ty {
                // end-to-end cases need all three tiers
                TestingType::Integration => op.tiers.len() == 3,
                _ => true,
            };
            if !qualifies {
                continue;
            }
            for (k, ex) in op.examples.iter().enumerate() {
                out.push(TestCase::new(
                    format!("{}-{}-{k}", ty.label(), op.name),
                    op.name.clone(),
                    ex.clone(),
                ));
            }
        }
        out
    }
}

fn eval_behavior(
    op: &OperationSpec,
    input: &Fields,
    mut fetch: impl FnMut(&str, &str) -> Option<Value>,
) -> Result<Value, EvalError> {
    match &op.behavior {
        Behavior::Table { entries, default } => entries
            .iter()
            .find(|e| e.input.iter().all(|(k, v)| input.get(k) == Some(v)))
            .map(|e| e.output.clone())
            .or_else(|| default.clone())
            .ok_or(EvalError::UndeclaredInput),
        Behavior::Expr { expr } => Ok(expr::parse(expr)?.eval(input)?),
        Behavior::Fetch { dataset, key } => {
            let k = input
                .get(key)
                .ok_or_else(|| EvalError::MissingField(key.clone()))?
                .key_text();
            fetch(dataset, &k).ok_or(EvalError::NotFound {
                dataset: dataset.clone(),
                key: k,
            })
        }
    }
}

/// How much of the stack a call exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    /// Client tier through server, as a user would hit it.
    EndToEnd,
    /// Client tier alone; the middleware answers with reference outputs.
    ClientOnly,
    /// Middleware tier alone; the server answers from the design datasets.
    MiddlewareOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Call<'a> {
    pub op: &'a str,
    pub input: &'a Fields,
    pub scope: Scope,
    pub client: Option<&'a str>,
    pub faults_active: bool,
}

impl<'a> Call<'a> {
    pub fn new(op: &'a str, input: &'a Fields) -> Self {
        Call {
            op,
            input,
            scope: Scope::EndToEnd,
            client: None,
            faults_active: true,
        }
    }

    pub fn scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    pub fn client(mut self, client: &'a str) -> Self {
        self.client = Some(client);
        self
    }

    pub fn faults(mut self, active: bool) -> Self {
        self.faults_active = active;
        self
    }
}

/// Trace through one component of the stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentTrace {
    pub component: String,
    pub trace: ExecutionTrace,
}

/// A triggered fault, tagged with the tier where it surfaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SutFault {
    pub fault_id: String,
    pub tier: Tier,
    pub defect_type: String,
    pub context: Fields,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub outcome: Result<Value, SutFault>,
    pub traces: Vec<ComponentTrace>,
}

/// Result of comparing served server data with the design datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct DataCheck {
    pub consistent: bool,
    pub expected: Option<Value>,
    pub observed: Option<Value>,
}

/// Live system under test. Cheap to share behind an `Arc`.
#[derive(Debug)]
pub struct Sut {
    model: RwLock<Arc<SutModel>>,
    faults: RwLock<BTreeMap<String, bool>>,
    unreachable: RwLock<BTreeSet<Tier>>,
}

fn fault_flags(model: &SutModel) -> BTreeMap<String, bool> {
    model.faults.iter().map(|f| (f.id.clone(), f.active)).collect()
}

impl Sut {
    pub fn new(model: SutModel) -> Self {
        let faults = fault_flags(&model);
        Sut {
            model: RwLock::new(Arc::new(model)),
            faults: RwLock::new(faults),
            unreachable: RwLock::new(BTreeSet::new()),
        }
    }

    pub fn model(&self) -> Arc<SutModel> {
        self.model.read().expect("model lock").clone()
    }

    /// Swaps in a new design (system maintenance). Fault flags are reset to
    /// the new model's declared state.
    pub fn replace_model(&self, model: SutModel) {
        *self.faults.write().expect("fault lock") = fault_flags(&model);
        *self.model.write().expect("model lock") = Arc::new(model);
    }

    pub fn set_fault(&self, id: &str, active: bool) -> Result<(), SutError> {
        let mut faults = self.faults.write().expect("fault lock");
        match faults.get_mut(id) {
            Some(flag) => {
                *flag = active;
                Ok(())
            }
            None => Err(SutError::UnknownFault(id.to_owned())),
        }
    }

    pub fn fault_states(&self) -> BTreeMap<String, bool> {
        self.faults.read().expect("fault lock").clone()
    }

    pub fn set_reachable(&self, tier: Tier, reachable: bool) {
        let mut down = self.unreachable.write().expect("reachability lock");
        if reachable {
            down.remove(&tier);
        } else {
            down.insert(tier);
        }
    }

    /// Active faults of a kind family on an operation whose trigger fires.
    fn triggered<'m>(
        &self,
        model: &'m SutModel,
        op: &str,
        input: &Fields,
        active: bool,
        pick: impl Fn(FaultKind) -> bool,
    ) -> Option<&'m FaultSpec> {
        if !active {
            return None;
        }
        let flags = self.faults.read().expect("fault lock");
        model.faults.iter().find(|f| {
            f.operation == op && pick(f.kind) && flags.get(&f.id).copied().unwrap_or(false) && f.trigger.matches(input)
        })
    }

    /// End-to-end call with the operation's default client.
    pub fn invoke(&self, op: &str, input: &Fields, faults_active: bool) -> Result<Invocation, SutError> {
        self.call(&Call::new(op, input).faults(faults_active))
    }

    pub fn call(&self, call: &Call<'_>) -> Result<Invocation, SutError> {
        let model = self.model();
        let op = model
            .operation(call.op)
            .ok_or_else(|| SutError::UnknownOperation(call.op.to_owned()))?;
        let client = match call.client {
            Some(c) => model.client(c).ok_or_else(|| SutError::UnknownClient(c.to_owned()))?,
            None => op
                .client
                .as_deref()
                .and_then(|c| model.client(c))
                .unwrap_or(&model.clients[0]),
        };

        let tiers: Vec<Tier> = match call.scope {
            Scope::EndToEnd => op.tiers.clone(),
            Scope::ClientOnly => vec![Tier::Client],
            Scope::MiddlewareOnly => {
                if !op.traverses(Tier::Middleware) {
                    return Err(SutError::NotOnPath {
                        op: op.name.clone(),
                        tier: Tier::Middleware,
                    });
                }
                vec![Tier::Middleware]
            }
        };
        {
            let down = self.unreachable.read().expect("reachability lock");
            if let Some(t) = tiers.iter().find(|t| down.contains(t)) {
                return Err(SutError::Unreachable(*t));
            }
        }

        let case_id = String::new();
        let mut traces = Vec::new();
        for tier in &tiers {
            let component = match tier {
                Tier::Client => &client.component,
                Tier::Middleware => &model.middleware,
                Tier::Server => continue,
            };
            if let Some(w) = op.walk_for(component, call.input) {
                traces.push(ComponentTrace {
                    component: component.clone(),
                    trace: ExecutionTrace::new(case_id.clone(), w.path.clone()),
                });
            }
        }

        let fault_here =
            |tier: Tier| self.triggered(&model, &op.name, call.input, call.faults_active, |k| k.tier() == tier);
        let raise = |f: &FaultSpec| {
            let mut context = f.context.clone();
            context.insert("tier".into(), Value::from(f.kind.tier().label()));
            if f.kind == FaultKind::InputValidationError {
                context.insert("boundary".into(), Value::from("client/middleware"));
            }
            Ok(Invocation {
                outcome: Err(SutFault {
                    fault_id: f.id.clone(),
                    tier: f.kind.tier(),
                    defect_type: f.defect_type().to_owned(),
                    context,
                }),
                traces: traces.clone(),
            })
        };

        if tiers.contains(&Tier::Client) {
            if let Some(f) = fault_here(Tier::Client) {
                return raise(f);
            }
        }
        if tiers.contains(&Tier::Middleware) {
            if let Some(f) = fault_here(Tier::Middleware) {
                return raise(f);
            }
        }

        let serve_live = tiers.contains(&Tier::Server);
        let value = eval_behavior(op, call.input, |dataset, key| {
            if serve_live {
                self.serve_record(&model, op, call.input, dataset, key, call.faults_active)
            } else {
                model.record(dataset, key)
            }
        })
        .map_err(|source| SutError::Behavior {
            op: op.name.clone(),
            source,
        })?;
        Ok(Invocation {
            outcome: Ok(value),
            traces,
        })
    }

    /// Server-tier read; inconsistent-data faults replace the stored record.
    fn serve_record(
        &self,
        model: &SutModel,
        op: &OperationSpec,
        input: &Fields,
        dataset: &str,
        key: &str,
        faults_active: bool,
    ) -> Option<Value> {
        let stored = model.record(dataset, key)?;
        match self.triggered(model, &op.name, input, faults_active, |k| k.tier() == Tier::Server) {
            Some(f) => Some(f.corrupt_value.clone().unwrap_or_else(|| Value::from("<inconsistent>"))),
            None => Some(stored),
        }
    }

    /// Compares what the server serves for this call with the design datasets.
    pub fn check_data(&self, op_name: &str, input: &Fields) -> Result<DataCheck, SutError> {
        let model = self.model();
        let op = model
            .operation(op_name)
            .ok_or_else(|| SutError::UnknownOperation(op_name.to_owned()))?;
        let Behavior::Fetch { dataset, key } = &op.behavior else {
            return Ok(DataCheck {
                consistent: true,
                expected: None,
                observed: None,
            });
        };
        if self
            .unreachable
            .read()
            .expect("reachability lock")
            .contains(&Tier::Server)
        {
            return Err(SutError::Unreachable(Tier::Server));
        }
        let k = match input.get(key) {
            Some(v) => v.key_text(),
            None => {
                return Err(SutError::Behavior {
                    op: op_name.to_owned(),
                    source: EvalError::MissingField(key.clone()),
                })
            }
        };
        let expected = model.record(dataset, &k);
        let observed = self.serve_record(&model, op, input, dataset, &k, true);
        Ok(DataCheck {
            consistent: expected == observed,
            expected,
            observed,
        })
    }
}
