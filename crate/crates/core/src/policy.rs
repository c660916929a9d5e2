//! Uniform decision-maker interface shared by built-in and external policies.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Action, PolicyTag};
use crate::observation::RawObservation;
use crate::rules::{decide, RuleBranch, RuleParams};
use crate::seed;

/// One agent's query for one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRequest {
    pub episode: u64,
    pub tick: u64,
    pub agent_id: String,
    /// Rendered user prompt; empty when the policy does not ask for one.
    pub prompt: String,
    pub observation: RawObservation,
    pub decision_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Reply {
    /// A structured decision. `partner` carries a tie-break assignment for
    /// another agent; `branch` is set by the rule policy.
    Action {
        action: Action,
        partner: Option<(String, Action)>,
        branch: Option<RuleBranch>,
        overridden: bool,
    },
    /// Free text to be run through the response parser.
    Text {
        text: String,
        partner: Option<(String, Action)>,
    },
    /// No usable answer (deadline, transport or protocol failure).
    Failed { reason: String },
}

impl Reply {
    pub fn action(action: Action) -> Self {
        Reply::Action {
            action,
            partner: None,
            branch: None,
            overridden: false,
        }
    }
}

pub trait Policy {
    fn name(&self) -> &str;

    /// Tag given to agents this policy flies.
    fn tag(&self) -> PolicyTag;

    /// Whether requests need a rendered prompt.
    fn needs_prompt(&self) -> bool {
        false
    }

    /// Answer every request of one tick, in order. Implementations must
    /// return exactly one reply per request.
    fn decide_batch(&mut self, requests: &[PolicyRequest]) -> Vec<Reply>;

    fn begin_episode(&mut self, _episode: u64) {}

    fn end_episode(&mut self) {}
}

/// Which policy (by index into the engine's policy list) flies each agent.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PolicyAssignment {
    pub default: usize,
    pub by_agent: BTreeMap<String, usize>,
}

impl PolicyAssignment {
    pub fn all(index: usize) -> Self {
        Self {
            default: index,
            by_agent: BTreeMap::new(),
        }
    }

    pub fn assign(&mut self, agent_id: impl Into<String>, index: usize) {
        self.by_agent.insert(agent_id.into(), index);
    }

    pub fn index_for(&self, agent_id: &str) -> usize {
        self.by_agent.get(agent_id).copied().unwrap_or(self.default)
    }

    pub fn max_index(&self) -> usize {
        self.by_agent.values().copied().fold(self.default, usize::max)
    }
}

/// The built-in rule policy.
#[derive(Debug, Clone)]
pub struct RulePolicy {
    pub params: RuleParams,
}

impl RulePolicy {
    pub fn new(params: RuleParams) -> Self {
        Self { params }
    }

    pub fn reply(&self, req: &PolicyRequest) -> Reply {
        match decide(&req.observation, &self.params, req.decision_seed) {
            Ok(d) => Reply::Action {
                action: d.action,
                partner: d.partner_action,
                branch: Some(d.fired_rule),
                overridden: d.overridden.is_some(),
            },
            Err(e) => Reply::Failed {
                reason: alloc::format!("{e}"),
            },
        }
    }
}

impl Policy for RulePolicy {
    fn name(&self) -> &str {
        "rule"
    }

    fn tag(&self) -> PolicyTag {
        PolicyTag::RuleBased
    }

    fn decide_batch(&mut self, requests: &[PolicyRequest]) -> Vec<Reply> {
        requests.iter().map(|r| self.reply(r)).collect()
    }
}

/// Replays fixed action lists indexed by tick. Ticks past the end of a
/// script repeat its last entry; an agent with no script holds.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    pub default_script: Vec<Action>,
    pub per_agent: BTreeMap<String, Vec<Action>>,
    pub tag: Option<PolicyTag>,
}

impl ScriptedPolicy {
    pub fn new(script: Vec<Action>) -> Self {
        Self {
            default_script: script,
            ..Self::default()
        }
    }

    pub fn action_at(&self, agent_id: &str, tick: u64) -> Action {
        let script = self.per_agent.get(agent_id).unwrap_or(&self.default_script);
        let i = usize::try_from(tick).unwrap_or(usize::MAX);
        script
            .get(i)
            .or(script.last())
            .copied()
            .unwrap_or(Action::Hold)
    }
}

impl Policy for ScriptedPolicy {
    fn name(&self) -> &str {
        "scripted"
    }

    fn tag(&self) -> PolicyTag {
        self.tag.clone().unwrap_or_else(|| PolicyTag::External("scripted".into()))
    }

    fn decide_batch(&mut self, requests: &[PolicyRequest]) -> Vec<Reply> {
        requests
            .iter()
            .map(|r| Reply::action(self.action_at(&r.agent_id, r.tick)))
            .collect()
    }
}

/// Uniformly random actions; each draw is a function of this policy's seed
/// and the request's decision seed.
#[derive(Debug, Clone)]
pub struct UniformRandomPolicy {
    pub seed: u64,
    pub tag: PolicyTag,
}

impl UniformRandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            tag: PolicyTag::External("uniform-random".into()),
        }
    }
}

impl Policy for UniformRandomPolicy {
    fn name(&self) -> &str {
        "uniform-random"
    }

    fn tag(&self) -> PolicyTag {
        self.tag.clone()
    }

    fn decide_batch(&mut self, requests: &[PolicyRequest]) -> Vec<Reply> {
        requests
            .iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed::combine(&[self.seed, r.decision_seed]));
                Reply::action(Action::ALL[rng.random_range(0..3)])
            })
            .collect()
    }
}

/// Always the same action.
#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    pub action: Action,
    pub tag: PolicyTag,
}

impl ConstantPolicy {
    pub fn new(action: Action) -> Self {
        Self {
            action,
            tag: PolicyTag::External(alloc::format!("always-{}", action.as_lower())),
        }
    }
}

impl Policy for ConstantPolicy {
    fn name(&self) -> &str {
        "constant"
    }

    fn tag(&self) -> PolicyTag {
        self.tag.clone()
    }

    fn decide_batch(&mut self, requests: &[PolicyRequest]) -> Vec<Reply> {
        requests.iter().map(|_| Reply::action(self.action)).collect()
    }
}
