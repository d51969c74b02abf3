//! Scripted user sessions and the append-only logs they leave behind.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Call, Sut, SutError, SutModel};
use crate::domain::{Fields, Tick, Value};

/// Outcome of one user action as recorded in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LogOutcome {
    Ok,
    Error {
        defect_type: String,
        #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
        context: Fields,
    },
}

/// One line of a client's user log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub tick: Tick,
    pub session: String,
    pub operation_name: String,
    #[serde(default)]
    pub input: Fields,
    pub outcome: LogOutcome,
}

impl LogEntry {
    /// Canonical single-line encoding, newline included.
    pub fn to_line(&self) -> String {
        let mut line = crate::protocol::canonical_text(self);
        line.push('\n');
        line
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionAction {
    pub operation_name: String,
    #[serde(default)]
    pub input: Fields,
    pub tick: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSessionScript {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    pub actions: Vec<SessionAction>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("action {index} at tick {tick} does not follow tick {previous}")]
    TicksNotIncreasing { index: usize, tick: Tick, previous: Tick },
}

impl UserSessionScript {
    pub fn session_id(&self) -> String {
        self.session.clone().unwrap_or_else(|| format!("s{}", self.seed))
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        for (i, w) in self.actions.windows(2).enumerate() {
            if w[1].tick <= w[0].tick {
                return Err(SessionError::TicksNotIncreasing {
                    index: i + 1,
                    tick: w[1].tick,
                    previous: w[0].tick,
                });
            }
        }
        Ok(())
    }

    /// Random session of `count` actions drawn from the declared examples of
    /// operations hosted on `client`, one action per tick from `start`.
    pub fn generate(model: &SutModel, client: &str, seed: u64, count: usize, start: Tick) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool: Vec<(&str, &Fields)> = model
            .declared_examples()
            .filter(|(op, _)| op.hosted_on(client))
            .map(|(op, ex)| (op.name.as_str(), ex))
            .collect();
        let actions = (0..count)
            .filter_map(|i| {
                pool.choose(&mut rng).map(|(op, input)| SessionAction {
                    operation_name: (*op).to_owned(),
                    input: (*input).clone(),
                    tick: start + i as Tick,
                })
            })
            .collect();
        UserSessionScript {
            seed,
            session: None,
            actions,
        }
    }
}

/// Replays a session against one client's stack and returns the log lines it
/// appends, in tick order.
pub fn run_user_session(
    sut: &Sut,
    client: &str,
    script: &UserSessionScript,
    faults_active: bool,
) -> Result<Vec<u8>, SessionError> {
    script.validate()?;
    let session = script.session_id();
    let mut out = Vec::new();
    for action in &script.actions {
        let call = Call::new(&action.operation_name, &action.input)
            .client(client)
            .faults(faults_active);
        let outcome = match sut.call(&call) {
            Ok(inv) => match inv.outcome {
                Ok(_) => LogOutcome::Ok,
                Err(fault) => LogOutcome::Error {
                    defect_type: fault.defect_type,
                    context: fault.context,
                },
            },
            Err(e) => LogOutcome::Error {
                defect_type: error_type(&e).to_owned(),
                context: [("detail".to_owned(), Value::from(e.to_string()))].into(),
            },
        };
        let entry = LogEntry {
            tick: action.tick,
            session: session.clone(),
            operation_name: action.operation_name.clone(),
            input: action.input.clone(),
            outcome,
        };
        out.extend_from_slice(entry.to_line().as_bytes());
    }
    Ok(out)
}

fn error_type(e: &SutError) -> &'static str {
    match e {
        SutError::UnknownOperation(_) => "unknown_operation",
        SutError::UnknownFault(_) | SutError::UnknownClient(_) => "configuration_error",
        SutError::Unreachable(_) => "unreachable",
        SutError::NotOnPath { .. } => "misrouted",
        SutError::Behavior { .. } => "behavior_error",
    }
}
