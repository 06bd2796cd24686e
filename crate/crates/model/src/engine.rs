//! Multi-agent autoregressive generation sessions.
//!
//! Every window each agent is re-canonicalized at its last history frame,
//! conditioned on all partners' histories from the same window boundary,
//! sampled with its own RNG stream and decoded back to world coordinates.
//! The last `H` emitted frames become the next history.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use hint_core::{apply_transform_frames, FeatureLayout, FrameBlock};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{ModelError, Result};
use crate::pipeline::{assemble_conditions, EncodedText, Models};

pub const DEFAULT_MAX_AGENTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub seed: u64,
    /// Target length; `None` runs open-ended.
    pub total_frames: Option<usize>,
    pub max_agents: usize,
    /// Reverse-diffusion steps per window; `None` uses the full schedule.
    pub sampler_steps: Option<usize>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_frames: None,
            max_agents: DEFAULT_MAX_AGENTS,
            sampler_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scope", content = "agent", rename_all = "lowercase")]
pub enum TextScope {
    Global,
    Agent(String),
}

#[derive(Debug, Clone)]
struct AgentState {
    id: String,
    /// Last `H` world-frame frames.
    history: FrameBlock,
    text: Option<String>,
    /// Every generated world-frame frame, in window order.
    trajectory: Vec<FrameBlock>,
}

/// One agent's world-frame output for a window.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentFrames {
    pub id: String,
    pub frames: FrameBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutput {
    pub window_index: usize,
    /// Agents in session order.
    pub agents: Vec<AgentFrames>,
    /// Text each agent was conditioned on.
    pub texts: BTreeMap<String, String>,
}

impl WindowOutput {
    /// SHA-256 over agent ids (sorted) and their frames as f64 LE.
    pub fn digest(&self) -> String {
        let mut sorted: Vec<&AgentFrames> = self.agents.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let mut h = Sha256::new();
        for a in sorted {
            h.update((a.id.len() as u64).to_le_bytes());
            h.update(a.id.as_bytes());
            for v in a.frames.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub event: String,
    pub window_index: usize,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InitPayload {
    config: SessionConfig,
    layout: String,
    text: String,
    agents: Vec<SeedAgent>,
    vae_checksum: String,
    diffusion_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SeedAgent {
    id: String,
    pose: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

fn block_rows(b: &FrameBlock) -> Vec<Vec<f64>> {
    b.iter_rows().map(<[f64]>::to_vec).collect()
}

/// Seed for one agent's sampler in one window.
pub fn agent_seed(seed: u64, agent: &str, window: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((agent.len() as u64).to_le_bytes());
    h.update(agent.as_bytes());
    h.update((window as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub struct GenerationSession {
    models: Arc<Models>,
    config: SessionConfig,
    agents: Vec<AgentState>,
    global_text: String,
    window_index: usize,
    texts: HashMap<String, EncodedText>,
    transcript: Vec<TranscriptEvent>,
    next_agent: usize,
    closed: bool,
}

impl GenerationSession {
    /// Starts a session from world-frame seed poses (1..=H frames each).
    pub fn new(models: Arc<Models>, agents: Vec<(String, FrameBlock)>, text: &str, config: SessionConfig) -> Result<Self> {
        if agents.is_empty() {
            return Err(ModelError::InvalidArgument("a session needs at least one agent".into()));
        }
        if config.max_agents == 0 || agents.len() > config.max_agents {
            return Err(ModelError::TooManyAgents { max: config.max_agents });
        }
        if config.total_frames == Some(0) || config.sampler_steps == Some(0) {
            return Err(ModelError::InvalidArgument("total frames and sampler steps must be positive".into()));
        }
        let init = InitPayload {
            config: config.clone(),
            layout: models.layout.name.clone(),
            text: text.to_string(),
            agents: agents
                .iter()
                .map(|(id, pose)| SeedAgent {
                    id: id.clone(),
                    pose: block_rows(pose),
                    text: None,
                })
                .collect(),
            vae_checksum: models.vae_checksum.clone(),
            diffusion_checksum: models.diffusion_checksum.clone(),
        };
        let mut session = Self {
            models,
            config,
            agents: Vec::new(),
            global_text: text.to_string(),
            window_index: 0,
            texts: HashMap::new(),
            transcript: Vec::new(),
            next_agent: 0,
            closed: false,
        };
        for (id, pose) in agents {
            session.push_agent(id, &pose, None)?;
        }
        session.record("init", serde_json::to_value(init)?);
        Ok(session)
    }

    fn record(&mut self, event: &str, payload: Value) {
        self.transcript.push(TranscriptEvent {
            event: event.to_string(),
            window_index: self.window_index,
            payload,
        });
    }

    fn layout(&self) -> &FeatureLayout {
        &self.models.layout
    }

    fn seed_history(&self, pose: &FrameBlock) -> Result<FrameBlock> {
        let h = self.models.history();
        if pose.rows() == 0 {
            return Err(ModelError::InvalidArgument("empty seed pose".into()));
        }
        if pose.dim() != self.layout().dim() {
            return Err(ModelError::shape(format!("{} features", self.layout().dim()), pose.dim()));
        }
        if !pose.is_finite() {
            return Err(ModelError::InvalidArgument("seed pose is not finite".into()));
        }
        Ok(if pose.rows() >= h { pose.tail(h) } else { pose.pad_head(h) })
    }

    fn push_agent(&mut self, id: String, pose: &FrameBlock, text: Option<String>) -> Result<()> {
        if id.is_empty() {
            return Err(ModelError::InvalidArgument("agent ids must be non-empty".into()));
        }
        if self.agents.iter().any(|a| a.id == id) {
            return Err(ModelError::DuplicateAgent(id));
        }
        let history = self.seed_history(pose)?;
        self.agents.push(AgentState {
            id,
            history,
            text,
            trajectory: Vec::new(),
        });
        self.next_agent = self.next_agent.max(self.agents.len());
        Ok(())
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn window_index(&self) -> usize {
        self.window_index
    }

    pub fn agent_ids(&self) -> Vec<String> {
        self.agents.iter().map(|a| a.id.clone()).collect()
    }

    pub fn transcript(&self) -> &[TranscriptEvent] {
        &self.transcript
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Current world-frame history of an agent.
    pub fn history(&self, id: &str) -> Option<&FrameBlock> {
        self.agents.iter().find(|a| a.id == id).map(|a| &a.history)
    }

    /// All generated frames of an agent, windows concatenated.
    pub fn trajectory(&self, id: &str) -> Option<FrameBlock> {
        let agent = self.agents.iter().find(|a| a.id == id)?;
        let mut out = FrameBlock::zeros(0, self.layout().dim());
        for w in &agent.trajectory {
            out = out.concat(w).expect("equal widths");
        }
        Some(out)
    }

    /// Number of windows this session may roll, if bounded.
    pub fn window_limit(&self) -> Option<usize> {
        let k = self.models.future();
        self.config.total_frames.map(|n| n.div_ceil(k))
    }

    pub fn is_exhausted(&self) -> bool {
        self.window_limit().is_some_and(|l| self.window_index >= l)
    }

    /// Total length fed to the model: the target, or a rolling estimate.
    pub fn total_frames_estimate(&self) -> usize {
        let k = self.models.future();
        self.config.total_frames.unwrap_or(self.window_index * k + k)
    }

    fn check_open(&self) -> Result<()> {
        if self.closed {
            return Err(ModelError::SessionClosed);
        }
        Ok(())
    }

    fn encoded(&mut self, text: &str) -> Result<EncodedText> {
        if let Some(e) = self.texts.get(text) {
            return Ok(e.clone());
        }
        let e = self.models.encode_text(text)?;
        self.texts.insert(text.to_string(), e.clone());
        Ok(e)
    }

    /// Text each agent will be conditioned on in the next window.
    pub fn effective_texts(&self) -> BTreeMap<String, String> {
        self.agents
            .iter()
            .map(|a| (a.id.clone(), a.text.clone().unwrap_or_else(|| self.global_text.clone())))
            .collect()
    }

    /// Replaces the global or one agent's text from the next window on and
    /// returns that window's index. A global update also clears every
    /// per-agent override, so the most recent update always wins.
    pub fn update_text(&mut self, text: &str, scope: TextScope) -> Result<usize> {
        self.check_open()?;
        match &scope {
            TextScope::Global => {
                self.global_text = text.to_string();
                for a in &mut self.agents {
                    a.text = None;
                }
            }
            TextScope::Agent(id) => {
                let agent = self
                    .agents
                    .iter_mut()
                    .find(|a| &a.id == id)
                    .ok_or_else(|| ModelError::UnknownAgent(id.clone()))?;
                agent.text = Some(text.to_string());
            }
        }
        self.record("text", json!({ "text": text, "scope": scope }));
        Ok(self.window_index)
    }

    /// Adds an agent that joins from the next window; returns its id.
    pub fn add_agent(&mut self, pose: &FrameBlock, text: Option<&str>) -> Result<String> {
        self.check_open()?;
        if self.agents.len() >= self.config.max_agents {
            return Err(ModelError::TooManyAgents { max: self.config.max_agents });
        }
        let mut n = self.next_agent;
        let id = loop {
            let id = format!("agent{n}");
            if self.agents.iter().all(|a| a.id != id) {
                break id;
            }
            n += 1;
        };
        self.next_agent = n + 1;
        self.push_agent(id.clone(), pose, text.map(str::to_string))?;
        self.record(
            "add_agent",
            serde_json::to_value(SeedAgent {
                id: id.clone(),
                pose: block_rows(pose),
                text: text.map(str::to_string),
            })?,
        );
        Ok(id)
    }

    /// Generates the next window for every agent.
    pub fn roll_window(&mut self) -> Result<WindowOutput> {
        self.check_open()?;
        if self.is_exhausted() {
            return Err(ModelError::Exhausted {
                windows: self.window_limit().unwrap_or(0),
            });
        }
        let t = self.window_index;
        let h = self.models.history();
        let total = self.total_frames_estimate();
        let texts = self.effective_texts();

        // partners appear sorted by id, independent of insertion order
        let mut order: Vec<usize> = (0..self.agents.len()).collect();
        order.sort_by(|&a, &b| self.agents[a].id.cmp(&self.agents[b].id));
        let histories: Vec<FrameBlock> = order.iter().map(|&i| self.agents[i].history.clone()).collect();
        let encoded = order
            .iter()
            .map(|&i| self.encoded(&texts[&self.agents[i].id]))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&EncodedText> = encoded.iter().collect();
        let conditions = assemble_conditions(self.layout(), &histories, &refs, t, total)?;

        let pipeline = self.models.pipeline();
        let steps = match self.config.sampler_steps {
            Some(n) => self.models.schedule.strided(n),
            None => pipeline.full_steps(),
        };
        let mut outputs: Vec<Option<FrameBlock>> = vec![None; self.agents.len()];
        for (cond, &i) in conditions.iter().zip(&order) {
            let mut rng = ChaCha8Rng::seed_from_u64(agent_seed(self.config.seed, &self.agents[i].id, t));
            let canonical = pipeline
                .sample_futures(&[&cond.bundle], &steps, &mut rng)?
                .pop()
                .expect("one window per bundle");
            let mut world = apply_transform_frames(&canonical, self.layout(), &cond.transform.inverse())?;
            binarize_contacts(self.layout(), &mut world);
            outputs[i] = Some(world);
        }
        let mut agents = Vec::with_capacity(self.agents.len());
        for (agent, out) in self.agents.iter_mut().zip(outputs) {
            let frames = out.expect("every agent sampled");
            agent.history = frames.tail(h);
            agent.trajectory.push(frames.clone());
            agents.push(AgentFrames {
                id: agent.id.clone(),
                frames,
            });
        }
        let output = WindowOutput {
            window_index: t,
            agents,
            texts,
        };
        self.record(
            "window",
            json!({ "frames_sha256": output.digest(), "texts": output.texts, "total_frames": total }),
        );
        self.window_index += 1;
        Ok(output)
    }

    pub fn stop(&mut self) -> Result<()> {
        self.check_open()?;
        self.record("stop", json!({}));
        self.closed = true;
        Ok(())
    }

    pub fn write_transcript(&self, w: &mut impl Write) -> Result<()> {
        for e in &self.transcript {
            serde_json::to_writer(&mut *w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_transcript(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_transcript(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

fn binarize_contacts(layout: &FeatureLayout, frames: &mut FrameBlock) {
    if let Some(s) = layout.contact_slice() {
        let range = s.range();
        for t in 0..frames.rows() {
            for v in &mut frames.row_mut(t)[range.clone()] {
                *v = if *v >= 0.5 { 1.0 } else { 0.0 };
            }
        }
    }
}

pub fn read_transcript(r: impl BufRead) -> Result<Vec<TranscriptEvent>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

pub fn load_transcript(path: &Path) -> Result<Vec<TranscriptEvent>> {
    read_transcript(std::io::BufReader::new(std::fs::File::open(path)?))
}

fn block_from_rows(rows: &[Vec<f64>]) -> Result<FrameBlock> {
    Ok(FrameBlock::from_rows(rows)?)
}

/// Re-runs a transcript, checking every window digest; returns the session
/// and every regenerated window.
pub fn replay(models: Arc<Models>, events: &[TranscriptEvent]) -> Result<(GenerationSession, Vec<WindowOutput>)> {
    let mismatch = |window: usize, detail: String| ModelError::ReplayMismatch { window, detail };
    let first = events
        .first()
        .filter(|e| e.event == "init")
        .ok_or_else(|| mismatch(0, "transcript must start with an init event".into()))?;
    let init: InitPayload = serde_json::from_value(first.payload.clone())?;
    if init.layout != models.layout.name {
        return Err(mismatch(0, format!("transcript layout '{}' differs from '{}'", init.layout, models.layout.name)));
    }
    if init.vae_checksum != models.vae_checksum || init.diffusion_checksum != models.diffusion_checksum {
        return Err(mismatch(0, "transcript was recorded with different model checkpoints".into()));
    }
    let agents = init
        .agents
        .iter()
        .map(|a| Ok((a.id.clone(), block_from_rows(&a.pose)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut session = GenerationSession::new(models, agents, &init.text, init.config)?;
    let mut windows = Vec::new();
    for e in &events[1..] {
        if e.window_index != session.window_index() {
            return Err(mismatch(
                e.window_index,
                format!("event '{}' recorded at window {} but replay is at {}", e.event, e.window_index, session.window_index()),
            ));
        }
        match e.event.as_str() {
            "text" => {
                let text = e.payload["text"].as_str().unwrap_or_default().to_string();
                let scope: TextScope = serde_json::from_value(e.payload["scope"].clone())?;
                session.update_text(&text, scope)?;
            }
            "add_agent" => {
                let a: SeedAgent = serde_json::from_value(e.payload.clone())?;
                let id = session.add_agent(&block_from_rows(&a.pose)?, a.text.as_deref())?;
                if id != a.id {
                    return Err(mismatch(e.window_index, format!("agent id {id} replayed as {}", a.id)));
                }
            }
            "window" => {
                let out = session.roll_window()?;
                let want = e.payload["frames_sha256"].as_str().unwrap_or_default();
                if out.digest() != want {
                    return Err(mismatch(e.window_index, format!("frames digest {} != recorded {want}", out.digest())));
                }
                windows.push(out);
            }
            "stop" => session.stop()?,
            other => return Err(mismatch(e.window_index, format!("unknown event '{other}'"))),
        }
    }
    Ok((session, windows))
}

/// Continues a scene from each agent's first `H` frames: returns those seed
/// frames followed by generated frames, `frames` rows per agent in total.
pub fn continue_scene(
    models: Arc<Models>,
    agents: &[(String, FrameBlock)],
    text: &str,
    frames: usize,
    seed: u64,
    sampler_steps: Option<usize>,
) -> Result<Vec<FrameBlock>> {
    let h = models.history();
    if frames <= h {
        return Err(ModelError::InvalidArgument(format!("need more than {h} frames to continue a scene")));
    }
    let seeds: Vec<(String, FrameBlock)> = agents
        .iter()
        .map(|(id, f)| (id.clone(), f.slice_rows(0, h.min(f.rows()))))
        .collect();
    let config = SessionConfig {
        seed,
        total_frames: Some(frames - h),
        max_agents: agents.len().max(DEFAULT_MAX_AGENTS),
        sampler_steps,
    };
    let mut session = GenerationSession::new(models, seeds.clone(), text, config)?;
    while !session.is_exhausted() {
        session.roll_window()?;
    }
    seeds
        .iter()
        .map(|(id, s)| {
            let generated = session.trajectory(id).expect("agent exists").slice_rows(0, frames - h);
            Ok(s.pad_head(h).concat(&generated)?)
        })
        .collect()
}
