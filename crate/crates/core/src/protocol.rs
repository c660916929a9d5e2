//! Wire frames for out-of-process policies: one JSON object per line, tagged
//! by `"type"`.
//!
//! ```text
//! engine -> policy  {"type":"hello","version":1,"system_prompt":"...","max_response_chars":256}
//! policy -> engine  {"type":"hello","version":1,"name":"my-policy"}
//! engine -> policy  {"type":"request","version":1,"episode":7,"tick":0,"agent_id":"A01",
//!                    "prompt":"...","observation":{...},"seed":123,"deadline_ms":1000}
//! policy -> engine  {"type":"response","agent_id":"A01","tick":0,"text":"The recommended action is: Hold."}
//! policy -> engine  {"type":"error","agent_id":"A01","tick":0,"message":"backend timeout"}
//! engine -> policy  {"type":"bye"}
//! ```
//!
//! Responses are matched to requests by `(tick, agent_id)`.

use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::agent::Action;
use crate::observation::RawObservation;

pub const PROTOCOL_VERSION: u32 = 1;

pub const DEFAULT_DEADLINE_MS: u64 = 1000;

fn default_deadline() -> u64 {
    DEFAULT_DEADLINE_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Frame {
    Hello(Hello),
    Request(Request),
    Response(Response),
    Error(ErrorFrame),
    Bye,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_response_chars: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub version: u32,
    pub episode: u64,
    pub tick: u64,
    pub agent_id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<RawObservation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_deadline")]
    pub deadline_ms: u64,
}

/// Tie-break assignment for another agent, for policies that make them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartnerAssignment {
    pub agent_id: String,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub agent_id: String,
    pub tick: u64,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<PartnerAssignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFrame {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tick: Option<u64>,
    pub message: String,
}

impl Request {
    /// Structural checks a receiver applies before answering.
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.version != PROTOCOL_VERSION {
            return Err("unsupported protocol version");
        }
        if self.prompt.is_empty() {
            return Err("empty prompt");
        }
        if self.deadline_ms == 0 {
            return Err("deadline must be positive");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> Request {
        Request {
            version: PROTOCOL_VERSION,
            episode: 7,
            tick: 0,
            agent_id: "A01".into(),
            prompt: "p".into(),
            observation: None,
            seed: Some(123),
            deadline_ms: DEFAULT_DEADLINE_MS,
        }
    }

    #[test]
    fn request_checks() {
        assert!(request().validate().is_ok());
        let mut r = request();
        r.version = 2;
        assert!(r.validate().is_err());
        let mut r = request();
        r.prompt.clear();
        assert!(r.validate().is_err());
        let mut r = request();
        r.deadline_ms = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn partner_assignment_is_optional() {
        let a = Response {
            agent_id: "A01".into(),
            tick: 3,
            text: "Hold".into(),
            partner: None,
        };
        let b = Response {
            partner: Some(PartnerAssignment {
                agent_id: "B02".into(),
                action: Action::Decelerate,
            }),
            ..a.clone()
        };
        assert_ne!(a, b);
    }
}
