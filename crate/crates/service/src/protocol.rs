//! JSON messages exchanged over a session channel, one object per message.

use hint_model::engine::TranscriptEvent;
use serde::{Deserialize, Serialize};

fn default_layout() -> String {
    hint_core::FeatureLayout::synthetic8().name
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    #[default]
    Global,
    Agent,
}

/// A new agent's seed pose: a ground placement `[x, z, yaw]` or explicit feature frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Pose {
    Ground([f64; 3]),
    Frames(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Start {
        agents: usize,
        #[serde(default = "default_layout")]
        layout: String,
        text: String,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        total_frames: Option<usize>,
        /// Ship full feature vectors alongside joint positions.
        #[serde(default)]
        features: bool,
    },
    Text {
        text: String,
        #[serde(default)]
        scope: Scope,
        #[serde(default)]
        agent: Option<String>,
    },
    Step {
        windows: usize,
    },
    AddAgent {
        #[serde(default)]
        pose: Option<Pose>,
        #[serde(default)]
        text: Option<String>,
    },
    Stop,
    /// Requests the session transcript.
    Transcript,
}

impl ClientMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ClientMessage::Start { .. } => "start",
            ClientMessage::Text { .. } => "text",
            ClientMessage::Step { .. } => "step",
            ClientMessage::AddAgent { .. } => "add_agent",
            ClientMessage::Stop => "stop",
            ClientMessage::Transcript => "transcript",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentJoints {
    pub id: String,
    /// `K` frames of world-frame joint positions.
    pub joints: Vec<Vec<[f64; 3]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Session {
        session_id: String,
        h: usize,
        k: usize,
        fps: f64,
        layout: String,
        agents: Vec<String>,
        #[serde(default)]
        window_limit: Option<usize>,
    },
    Frames {
        window_index: usize,
        agents: Vec<AgentJoints>,
    },
    /// `window_index` is the first window the acknowledged change affects.
    Ack {
        of: String,
        window_index: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        agent: Option<String>,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
    Transcript {
        events: Vec<TranscriptEvent>,
    },
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not valid JSON, unknown type, or invalid field values.
    BadMessage,
    /// Message not legal in the current state (e.g. a second start).
    Protocol,
    NoSession,
    SessionClosed,
    Exhausted,
    UnknownAgent,
    TooManyAgents,
    TooManySessions,
    IdleTimeout,
    Internal,
}
