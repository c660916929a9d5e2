//! Answer bridge requests with any built-in policy. Used by the
//! `serve-policy` command and by the in-process loopback transport.

use std::io::{self, BufRead, Write};
use std::net::TcpListener;

use deconflict_core::policy::{Policy, PolicyRequest, Reply};
use deconflict_core::prompt::{target_text, PromptTemplate};
use deconflict_core::protocol::{ErrorFrame, Frame, Hello, PartnerAssignment, Request, Response, PROTOCOL_VERSION};

use super::BridgeError;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Name announced in the handshake.
    pub name: String,
    /// Renders structured replies as text.
    pub template: PromptTemplate,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            name: "deconflict".into(),
            template: PromptTemplate::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: u64,
    pub responses: u64,
    pub errors: u64,
}

fn write_frame(out: &mut dyn Write, f: &Frame) -> io::Result<()> {
    let line = serde_json::to_string(f).map_err(io::Error::other)?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()
}

fn error_frame(agent_id: Option<String>, tick: Option<u64>, message: impl Into<String>) -> Frame {
    Frame::Error(ErrorFrame {
        agent_id,
        tick,
        message: message.into(),
    })
}

fn answer(policy: &mut dyn Policy, opts: &ServeOptions, req: Request) -> Frame {
    let key = (Some(req.agent_id.clone()), Some(req.tick));
    if let Err(e) = req.validate() {
        return error_frame(key.0, key.1, e);
    }
    let Some(observation) = req.observation else {
        return error_frame(key.0, key.1, "request carries no observation");
    };
    let preq = PolicyRequest {
        episode: req.episode,
        tick: req.tick,
        agent_id: req.agent_id.clone(),
        prompt: req.prompt,
        observation,
        decision_seed: req.seed.unwrap_or(0),
    };
    let reply = policy.decide_batch(std::slice::from_ref(&preq)).pop();
    let (text, partner) = match reply {
        Some(Reply::Action { action, partner, .. }) => (target_text(&opts.template, action), partner),
        Some(Reply::Text { text, partner }) => (text, partner),
        Some(Reply::Failed { reason }) => return error_frame(key.0, key.1, reason),
        None => return error_frame(key.0, key.1, "policy gave no reply"),
    };
    Frame::Response(Response {
        agent_id: req.agent_id,
        tick: req.tick,
        text,
        partner: partner.map(|(agent_id, action)| PartnerAssignment { agent_id, action }),
    })
}

/// Serve one session: handshake, then one reply per request until `bye` or
/// end of input. Malformed lines get an error frame and the session goes on.
pub fn serve_lines<I>(
    policy: &mut dyn Policy,
    opts: &ServeOptions,
    lines: I,
    out: &mut dyn Write,
) -> Result<ServeStats, BridgeError>
where
    I: IntoIterator<Item = io::Result<String>>,
{
    let mut lines = lines.into_iter();
    let mut stats = ServeStats::default();
    let first = match lines.next() {
        Some(l) => l?,
        None => return Err(BridgeError::Closed),
    };
    match serde_json::from_str::<Frame>(&first) {
        Ok(Frame::Hello(h)) if h.version == PROTOCOL_VERSION => {
            write_frame(
                out,
                &Frame::Hello(Hello {
                    version: PROTOCOL_VERSION,
                    name: Some(opts.name.clone()),
                    system_prompt: None,
                    max_response_chars: None,
                }),
            )?;
        }
        Ok(Frame::Hello(h)) => {
            write_frame(out, &error_frame(None, None, format!("unsupported protocol version {}", h.version)))?;
            return Err(BridgeError::Version {
                expected: PROTOCOL_VERSION,
                got: h.version,
            });
        }
        _ => {
            write_frame(out, &error_frame(None, None, "expected hello"))?;
            return Err(BridgeError::Handshake("first frame was not hello".into()));
        }
    }

    let mut episode = None;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame = match serde_json::from_str::<Frame>(&line) {
            Ok(f) => f,
            Err(e) => {
                stats.errors += 1;
                write_frame(out, &error_frame(None, None, format!("malformed frame: {e}")))?;
                continue;
            }
        };
        match frame {
            Frame::Request(req) => {
                stats.requests += 1;
                if episode != Some(req.episode) {
                    if episode.is_some() {
                        policy.end_episode();
                    }
                    policy.begin_episode(req.episode);
                    episode = Some(req.episode);
                }
                let f = answer(policy, opts, req);
                match f {
                    Frame::Response(_) => stats.responses += 1,
                    _ => stats.errors += 1,
                }
                write_frame(out, &f)?;
            }
            Frame::Bye => break,
            _ => {
                stats.errors += 1;
                write_frame(out, &error_frame(None, None, "unexpected frame"))?;
            }
        }
    }
    if episode.is_some() {
        policy.end_episode();
    }
    Ok(stats)
}

pub fn serve<R: BufRead, W: Write>(
    policy: &mut dyn Policy,
    opts: &ServeOptions,
    reader: R,
    mut writer: W,
) -> Result<ServeStats, BridgeError> {
    serve_lines(policy, opts, reader.lines(), &mut writer)
}

/// Accept connections one at a time and serve each with a fresh policy.
/// Stops after `max_sessions` sessions when given.
pub fn serve_tcp(
    listener: &TcpListener,
    make_policy: &mut dyn FnMut() -> Box<dyn Policy>,
    opts: &ServeOptions,
    max_sessions: Option<usize>,
) -> Result<(), BridgeError> {
    let mut served = 0;
    for stream in listener.incoming() {
        let stream = stream?;
        stream.set_nodelay(true)?;
        let reader = io::BufReader::new(stream.try_clone()?);
        let mut policy = make_policy();
        if let Err(e) = serve(policy.as_mut(), opts, reader, io::BufWriter::new(stream)) {
            eprintln!("session ended: {e}");
        }
        served += 1;
        if max_sessions.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}
