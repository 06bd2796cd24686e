//! Transport-independent session state machine.
//!
//! ```text
//! Idle --start--> Active --(text | step | add_agent | transcript)*--> Active --stop--> Closed
//! ```
//!
//! Every inbound message yields at least one outbound message; failures are
//! reported as `error` messages and never end the session.

use std::f64::consts::PI;
use std::sync::Arc;

use hint_core::synth::rest_pose;
use hint_core::FrameBlock;
use hint_model::engine::{GenerationSession, SessionConfig, TextScope, WindowOutput};
use hint_model::pipeline::Models;
use hint_model::ModelError;

use crate::protocol::{AgentJoints, ClientMessage, ErrorCode, Pose, Scope, ServerMessage};

#[derive(Debug, Clone, PartialEq)]
pub struct HandlerConfig {
    pub max_agents: usize,
    pub max_windows_per_step: usize,
    /// Reverse-diffusion steps per window; `None` uses the full schedule.
    pub sampler_steps: Option<usize>,
}

impl Default for HandlerConfig {
    fn default() -> Self {
        Self {
            max_agents: hint_model::engine::DEFAULT_MAX_AGENTS,
            max_windows_per_step: 32,
            sampler_steps: None,
        }
    }
}

enum State {
    Idle,
    Active { session: Box<GenerationSession>, features: bool },
    Closed { session: Box<GenerationSession> },
}

pub struct SessionHandler {
    models: Arc<Models>,
    config: HandlerConfig,
    session_id: String,
    state: State,
}

/// Default placement: agents evenly spaced on a unit circle, facing its centre.
pub fn ring_pose(models: &Models, index: usize, count: usize) -> Result<FrameBlock, ModelError> {
    let angle = 2.0 * PI * index as f64 / count.max(1) as f64;
    let (x, z) = (angle.sin(), angle.cos());
    let heading = (-x).atan2(-z);
    Ok(rest_pose(&models.layout, x, z, heading)?)
}

fn error_code(e: &ModelError) -> ErrorCode {
    match e {
        ModelError::Exhausted { .. } => ErrorCode::Exhausted,
        ModelError::UnknownAgent(_) => ErrorCode::UnknownAgent,
        ModelError::TooManyAgents { .. } => ErrorCode::TooManyAgents,
        ModelError::SessionClosed => ErrorCode::SessionClosed,
        ModelError::InvalidArgument(_) | ModelError::DuplicateAgent(_) | ModelError::Shape { .. } => ErrorCode::BadMessage,
        ModelError::Core(c) if !matches!(c, hint_core::Error::Io(_)) => ErrorCode::BadMessage,
        _ => ErrorCode::Internal,
    }
}

fn model_error(e: ModelError) -> ServerMessage {
    ServerMessage::error(error_code(&e), e.to_string())
}

impl SessionHandler {
    pub fn new(models: Arc<Models>, config: HandlerConfig, session_id: impl Into<String>) -> Self {
        Self {
            models,
            config,
            session_id: session_id.into(),
            state: State::Idle,
        }
    }

    pub fn session(&self) -> Option<&GenerationSession> {
        match &self.state {
            State::Idle => None,
            State::Active { session, .. } | State::Closed { session } => Some(session),
        }
    }

    pub fn is_closed(&self) -> bool {
        matches!(self.state, State::Closed { .. })
    }

    /// Parses and handles one raw text message.
    pub fn handle_text(&mut self, raw: &str) -> Vec<ServerMessage> {
        match serde_json::from_str::<ClientMessage>(raw) {
            Ok(msg) => self.handle(msg),
            Err(e) => vec![ServerMessage::error(ErrorCode::BadMessage, format!("unreadable message: {e}"))],
        }
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        match (&mut self.state, msg) {
            (State::Idle, ClientMessage::Start { agents, layout, text, seed, total_frames, features }) => {
                self.start(agents, &layout, &text, seed, total_frames, features)
            }
            (State::Idle, other) => vec![ServerMessage::error(
                ErrorCode::NoSession,
                format!("'{}' before 'start'", other.kind()),
            )],
            (State::Closed { session }, ClientMessage::Transcript) => vec![ServerMessage::Transcript {
                events: session.transcript().to_vec(),
            }],
            (State::Closed { .. }, other) => vec![ServerMessage::error(
                ErrorCode::SessionClosed,
                format!("'{}' after 'stop': session closed", other.kind()),
            )],
            (State::Active { .. }, ClientMessage::Start { .. }) => {
                vec![ServerMessage::error(ErrorCode::Protocol, "session already started")]
            }
            (State::Active { session, .. }, ClientMessage::Text { text, scope, agent }) => {
                let scope = match (scope, agent) {
                    (Scope::Global, None) => TextScope::Global,
                    (Scope::Agent, Some(id)) => TextScope::Agent(id),
                    (Scope::Global, Some(_)) => {
                        return vec![ServerMessage::error(ErrorCode::BadMessage, "global text takes no agent")]
                    }
                    (Scope::Agent, None) => {
                        return vec![ServerMessage::error(ErrorCode::BadMessage, "agent scope needs an agent id")]
                    }
                };
                let agent = match &scope {
                    TextScope::Agent(id) => Some(id.clone()),
                    TextScope::Global => None,
                };
                match session.update_text(&text, scope) {
                    Ok(window_index) => vec![ServerMessage::Ack {
                        of: "text".into(),
                        window_index,
                        agent,
                    }],
                    Err(e) => vec![model_error(e)],
                }
            }
            (State::Active { features, .. }, ClientMessage::Step { windows }) => {
                let features = *features;
                self.step(windows, features)
            }
            (State::Active { session, .. }, ClientMessage::AddAgent { pose, text }) => {
                let pose = match pose {
                    Some(Pose::Ground([x, z, yaw])) => rest_pose(&self.models.layout, x, z, yaw).map_err(ModelError::from),
                    Some(Pose::Frames(rows)) => FrameBlock::from_rows(&rows).map_err(ModelError::from),
                    None => {
                        let n = session.agent_ids().len();
                        ring_pose(&self.models, n, n + 1)
                    }
                };
                match pose.and_then(|p| session.add_agent(&p, text.as_deref())) {
                    Ok(id) => vec![ServerMessage::Ack {
                        of: "add_agent".into(),
                        window_index: session.window_index(),
                        agent: Some(id),
                    }],
                    Err(e) => vec![model_error(e)],
                }
            }
            (State::Active { session, .. }, ClientMessage::Transcript) => vec![ServerMessage::Transcript {
                events: session.transcript().to_vec(),
            }],
            (State::Active { .. }, ClientMessage::Stop) => {
                let State::Active { mut session, .. } = std::mem::replace(&mut self.state, State::Idle) else {
                    unreachable!("matched active state")
                };
                let result = session.stop();
                let window_index = session.window_index();
                self.state = State::Closed { session };
                match result {
                    Ok(()) => vec![ServerMessage::Ack {
                        of: "stop".into(),
                        window_index,
                        agent: None,
                    }],
                    Err(e) => vec![model_error(e)],
                }
            }
        }
    }

    fn start(
        &mut self,
        agents: usize,
        layout: &str,
        text: &str,
        seed: u64,
        total_frames: Option<usize>,
        features: bool,
    ) -> Vec<ServerMessage> {
        let m = &self.models;
        if layout != m.layout.name {
            return vec![ServerMessage::error(
                ErrorCode::BadMessage,
                format!("layout '{layout}' is not served; the checkpoint uses '{}'", m.layout.name),
            )];
        }
        if agents == 0 {
            return vec![ServerMessage::error(ErrorCode::BadMessage, "a session needs at least one agent")];
        }
        if agents > self.config.max_agents {
            return vec![ServerMessage::error(
                ErrorCode::TooManyAgents,
                format!("at most {} agents per session", self.config.max_agents),
            )];
        }
        let seeds = match (0..agents)
            .map(|i| Ok((format!("agent{i}"), ring_pose(m, i, agents)?)))
            .collect::<Result<Vec<_>, ModelError>>()
        {
            Ok(s) => s,
            Err(e) => return vec![model_error(e)],
        };
        let config = SessionConfig {
            seed,
            total_frames,
            max_agents: self.config.max_agents,
            sampler_steps: self.config.sampler_steps,
        };
        match GenerationSession::new(m.clone(), seeds, text, config) {
            Ok(session) => {
                let msg = ServerMessage::Session {
                    session_id: self.session_id.clone(),
                    h: m.history(),
                    k: m.future(),
                    fps: m.layout.frame_rate,
                    layout: m.layout.name.clone(),
                    agents: session.agent_ids(),
                    window_limit: session.window_limit(),
                };
                self.state = State::Active {
                    session: Box::new(session),
                    features,
                };
                vec![msg]
            }
            Err(e) => vec![model_error(e)],
        }
    }

    fn step(&mut self, windows: usize, features: bool) -> Vec<ServerMessage> {
        let State::Active { session, .. } = &mut self.state else {
            unreachable!("step is only routed in the active state")
        };
        if windows == 0 || windows > self.config.max_windows_per_step {
            return vec![ServerMessage::error(
                ErrorCode::BadMessage,
                format!("windows must lie in 1..={}", self.config.max_windows_per_step),
            )];
        }
        if let Some(limit) = session.window_limit() {
            let left = limit - session.window_index();
            if windows > left {
                return vec![ServerMessage::error(
                    ErrorCode::Exhausted,
                    format!("{windows} windows requested but only {left} remain of {limit}"),
                )];
            }
        }
        let mut out = Vec::with_capacity(windows + 1);
        for _ in 0..windows {
            match session.roll_window() {
                Ok(w) => out.push(frames_message(&self.models, &w, features)),
                Err(e) => {
                    out.push(model_error(e));
                    return out;
                }
            }
        }
        out.push(ServerMessage::Ack {
            of: "step".into(),
            window_index: session.window_index(),
            agent: None,
        });
        out
    }
}

pub fn frames_message(models: &Models, w: &WindowOutput, features: bool) -> ServerMessage {
    let layout = &models.layout;
    ServerMessage::Frames {
        window_index: w.window_index,
        agents: w
            .agents
            .iter()
            .map(|a| AgentJoints {
                id: a.id.clone(),
                joints: a
                    .frames
                    .iter_rows()
                    .map(|r| layout.joint_positions(r).iter().map(|p| [p[0], p[1], p[2]]).collect())
                    .collect(),
                features: features.then(|| a.frames.iter_rows().map(<[f64]>::to_vec).collect()),
            })
            .collect(),
    }
}
