//! Out-of-process policies over newline-delimited JSON frames.
//!
//! The engine side is [`BridgePolicy`]: it sends a whole tick's requests,
//! then collects responses keyed by `(tick, agent_id)` until the deadline.
//! Anything missing, late, wrongly keyed or answered with an error frame
//! falls back to Hold and is counted.

pub mod server;
pub mod transport;

use std::collections::BTreeMap;
use std::io;
use std::time::{Duration, Instant};

use deconflict_core::policy::{Policy, PolicyRequest, Reply};
use deconflict_core::protocol::{Frame, Hello, Request, DEFAULT_DEADLINE_MS, PROTOCOL_VERSION};
use deconflict_core::PolicyTag;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use server::{serve, serve_lines, serve_tcp, ServeOptions, ServeStats};
pub use transport::{ChannelSink, Connection, Recv};

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error("protocol version mismatch: expected {expected}, peer speaks {got}")]
    Version { expected: u32, got: u32 },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("peer closed the connection")]
    Closed,
    #[error("no handshake reply within the deadline")]
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeOptions {
    pub deadline_ms: u64,
    pub handshake_timeout_ms: u64,
    /// Attach the raw observation to every request.
    pub send_observation: bool,
    /// Tag for agents this policy flies; defaults to `External(<peer name>)`.
    pub tag: Option<PolicyTag>,
    pub system_prompt: Option<String>,
    pub max_response_chars: Option<usize>,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        Self {
            deadline_ms: DEFAULT_DEADLINE_MS,
            handshake_timeout_ms: 10_000,
            send_observation: true,
            tag: None,
            system_prompt: None,
            max_response_chars: Some(256),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeStats {
    pub requests: u64,
    pub responses: u64,
    /// Error frames answering a request.
    pub error_frames: u64,
    /// Wrongly keyed, duplicate, unexpected or unparseable frames.
    pub protocol_errors: u64,
    pub timeouts: u64,
    /// Requests lost to a closed or broken connection.
    pub disconnected: u64,
}

impl BridgeStats {
    pub fn fallbacks(&self) -> u64 {
        self.error_frames + self.timeouts + self.disconnected
    }
}

pub struct BridgePolicy {
    conn: Option<Connection>,
    peer_name: String,
    tag: PolicyTag,
    opts: BridgeOptions,
    stats: BridgeStats,
    dead: Option<String>,
}

fn encode(f: &Frame) -> String {
    serde_json::to_string(f).expect("frames always serialize")
}

impl BridgePolicy {
    /// Handshake over `conn`.
    pub fn connect(mut conn: Connection, opts: BridgeOptions) -> Result<Self, BridgeError> {
        let hello = Frame::Hello(Hello {
            version: PROTOCOL_VERSION,
            name: None,
            system_prompt: opts.system_prompt.clone(),
            max_response_chars: opts.max_response_chars,
        });
        conn.send(&encode(&hello))?;
        conn.flush()?;
        let deadline = Instant::now() + Duration::from_millis(opts.handshake_timeout_ms);
        let peer_name = match conn.recv(deadline) {
            Recv::Line(l) => match serde_json::from_str::<Frame>(&l) {
                Ok(Frame::Hello(h)) if h.version == PROTOCOL_VERSION => h.name.unwrap_or_else(|| "external".into()),
                Ok(Frame::Hello(h)) => {
                    return Err(BridgeError::Version {
                        expected: PROTOCOL_VERSION,
                        got: h.version,
                    })
                }
                Ok(Frame::Error(e)) => return Err(BridgeError::Handshake(e.message)),
                Ok(_) => return Err(BridgeError::Handshake("expected hello".into())),
                Err(e) => return Err(BridgeError::Handshake(format!("malformed hello: {e}"))),
            },
            Recv::Timeout => return Err(BridgeError::Timeout),
            Recv::Closed => return Err(BridgeError::Closed),
        };
        let tag = opts.tag.clone().unwrap_or_else(|| PolicyTag::External(peer_name.clone()));
        Ok(Self {
            conn: Some(conn),
            peer_name,
            tag,
            opts,
            stats: BridgeStats::default(),
            dead: None,
        })
    }

    pub fn peer_name(&self) -> &str {
        &self.peer_name
    }

    pub fn stats(&self) -> BridgeStats {
        self.stats
    }

    /// Why the session stopped answering, if it did.
    pub fn failure(&self) -> Option<&str> {
        self.dead.as_deref()
    }

    /// Say goodbye and reap the peer.
    pub fn close(mut self) {
        if let Some(mut conn) = self.conn.take() {
            let _ = conn.send(&encode(&Frame::Bye));
            conn.shutdown(Duration::from_millis(2000));
        }
    }

    fn fail_all(&mut self, n: usize, reason: &str) -> Vec<Reply> {
        self.stats.disconnected += n as u64;
        (0..n)
            .map(|_| Reply::Failed {
                reason: reason.to_string(),
            })
            .collect()
    }
}

impl Policy for BridgePolicy {
    fn name(&self) -> &str {
        &self.peer_name
    }

    fn tag(&self) -> PolicyTag {
        self.tag.clone()
    }

    fn needs_prompt(&self) -> bool {
        true
    }

    fn decide_batch(&mut self, requests: &[PolicyRequest]) -> Vec<Reply> {
        if let Some(reason) = self.dead.clone() {
            return self.fail_all(requests.len(), &reason);
        }
        let Some(conn) = self.conn.as_mut() else {
            return self.fail_all(requests.len(), "session closed");
        };
        let mut pending: BTreeMap<(u64, String), usize> = BTreeMap::new();
        let mut sent = Ok(());
        for (i, r) in requests.iter().enumerate() {
            let frame = Frame::Request(Request {
                version: PROTOCOL_VERSION,
                episode: r.episode,
                tick: r.tick,
                agent_id: r.agent_id.clone(),
                prompt: r.prompt.clone(),
                observation: self.opts.send_observation.then(|| r.observation.clone()),
                seed: Some(r.decision_seed),
                deadline_ms: self.opts.deadline_ms,
            });
            pending.insert((r.tick, r.agent_id.clone()), i);
            sent = sent.and_then(|_| conn.send(&encode(&frame)));
        }
        if let Err(e) = sent.and_then(|_| conn.flush()) {
            let reason = format!("send failed: {e}");
            self.dead = Some(reason.clone());
            return self.fail_all(requests.len(), &reason);
        }
        self.stats.requests += requests.len() as u64;

        let mut replies: Vec<Option<Reply>> = vec![None; requests.len()];
        let deadline = Instant::now() + Duration::from_millis(self.opts.deadline_ms);
        while !pending.is_empty() {
            match conn.recv(deadline) {
                Recv::Line(line) => match serde_json::from_str::<Frame>(&line) {
                    Ok(Frame::Response(resp)) => match pending.remove(&(resp.tick, resp.agent_id)) {
                        Some(i) => {
                            self.stats.responses += 1;
                            replies[i] = Some(Reply::Text {
                                text: resp.text,
                                partner: resp.partner.map(|p| (p.agent_id, p.action)),
                            });
                        }
                        None => self.stats.protocol_errors += 1,
                    },
                    Ok(Frame::Error(e)) => {
                        let key = e.tick.zip(e.agent_id);
                        match key.and_then(|k| pending.remove(&k)) {
                            Some(i) => {
                                self.stats.error_frames += 1;
                                replies[i] = Some(Reply::Failed { reason: e.message });
                            }
                            None => self.stats.protocol_errors += 1,
                        }
                    }
                    _ => self.stats.protocol_errors += 1,
                },
                Recv::Timeout => {
                    self.stats.timeouts += pending.len() as u64;
                    break;
                }
                Recv::Closed => {
                    self.stats.disconnected += pending.len() as u64;
                    self.dead = Some("peer closed the connection".into());
                    break;
                }
            }
        }
        let fallback = if self.dead.is_some() { "peer closed the connection" } else { "deadline exceeded" };
        replies
            .into_iter()
            .map(|r| {
                r.unwrap_or_else(|| Reply::Failed {
                    reason: fallback.into(),
                })
            })
            .collect()
    }
}

impl Drop for BridgePolicy {
    fn drop(&mut self) {
        if let Some(mut conn) = self.conn.take() {
            let _ = conn.send(&encode(&Frame::Bye));
            let _ = conn.flush();
        }
    }
}

/// Serve `policy` over an in-process channel pair and connect to it.
pub fn loopback(
    policy: Box<dyn Policy + Send>,
    serve_opts: ServeOptions,
    opts: BridgeOptions,
) -> Result<BridgePolicy, BridgeError> {
    let conn = Connection::in_process(move |rx, mut sink| {
        let mut policy = policy;
        let _ = serve_lines(policy.as_mut(), &serve_opts, rx.into_iter().map(Ok), &mut sink);
    });
    BridgePolicy::connect(conn, opts)
}
