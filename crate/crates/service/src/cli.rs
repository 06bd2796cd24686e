//! The `hint` command-line tool.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 model error.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hint_core::dataset::{write_record_file, Dataset, Scene};
use hint_core::metrics::eval_protocol;
use hint_core::synth::{synth_generate, Script, SynthConfig};
use hint_core::{FrameBlock, MotionSequence};
use hint_model::checkpoint::{load_vae, DIFFUSION_FILE, VAE_FILE};
use hint_model::denoiser::DenoiserConfig;
use hint_model::engine::{continue_scene, load_transcript, replay, GenerationSession, SessionConfig};
use hint_model::evaluator::{dataset_scenes, score, train_evaluator, EvaluatorConfig};
use hint_model::pipeline::Models;
use hint_model::train::{train_diffusion, train_vae, TrainingConfig};
use hint_model::vae::VaeConfig;
use hint_model::ModelError;

use crate::handler::{ring_pose, HandlerConfig};
use crate::server::{serve, ServeConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_MODEL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "hint", version, about = "Text-driven multi-agent motion generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic interaction dataset.
    MakeData(MakeData),
    /// Train the motion VAE.
    TrainVae(TrainArgs),
    /// Train the latent denoiser against a frozen VAE.
    TrainDiffusion(TrainArgs),
    /// Roll out a multi-agent session.
    Generate(Generate),
    /// Score generated scenes against a reference set.
    Eval(Eval),
    /// Run the streaming session server.
    Serve(Serve),
    /// Re-run a session transcript and verify every window.
    Replay(Replay),
}

#[derive(Debug, Args)]
pub struct MakeData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub sequences: usize,
    #[arg(long, default_value_t = 2)]
    pub agents: usize,
    #[arg(long, default_value_t = 68)]
    pub min_frames: usize,
    #[arg(long, default_value_t = 100)]
    pub max_frames: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    /// Small models and 2000-step stages.
    Desk,
    /// Full-size models and schedules.
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory (holds vae.ckpt and diffusion.ckpt).
    #[arg(long, env = "HINT_CHECKPOINT_DIR")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Scale::Desk)]
    pub scale: Scale,
    /// Overrides the step count of all three stages.
    #[arg(long)]
    pub stage_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Metrics log; defaults to `<checkpoint>/<model>_metrics.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Generate {
    #[arg(long, env = "HINT_CHECKPOINT_DIR")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub agents: usize,
    #[arg(long, default_value = "")]
    pub text: String,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output record file, or dataset directory with `--conditions`.
    #[arg(long)]
    pub out: PathBuf,
    /// Transcript path; defaults to the output path with `.transcript.jsonl` appended.
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Continue every scene of this dataset from its first frames and text.
    #[arg(long)]
    pub conditions: Option<PathBuf>,
    /// Reverse-diffusion steps per window (default: all).
    #[arg(long)]
    pub sampler_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Eval {
    /// Generated dataset directory.
    #[arg(long)]
    pub gen: PathBuf,
    /// Reference dataset directory.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Dataset used to fit the evaluator; defaults to the reference set.
    #[arg(long)]
    pub evaluator_data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub evaluator_steps: Option<usize>,
    /// Metrics JSON; the table is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long, env = "HINT_CHECKPOINT_DIR")]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8765")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = 16)]
    pub max_sessions: usize,
    #[arg(long, default_value_t = hint_model::engine::DEFAULT_MAX_AGENTS)]
    pub max_agents: usize,
    /// Seconds without a client message before a session is closed.
    #[arg(long, default_value_t = 300)]
    pub idle_timeout: u64,
    #[arg(long)]
    pub sampler_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Replay {
    #[arg(long)]
    pub transcript: PathBuf,
    #[arg(long, env = "HINT_CHECKPOINT_DIR")]
    pub checkpoint: PathBuf,
    /// Write the replayed frames as a record file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Model(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Model(_) => EXIT_MODEL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Model(m) => write!(f, "model error: {m}"),
        }
    }
}

impl From<hint_core::Error> for CliError {
    fn from(e: hint_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Core(c) => c.into(),
            e if e.is_data_error() => CliError::Data(e.to_string()),
            e => CliError::Model(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn io_data(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("hint: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::MakeData(a) => make_data(a),
        Command::TrainVae(a) => train_vae_cmd(a),
        Command::TrainDiffusion(a) => train_diffusion_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Replay(a) => replay_cmd(a),
    }
}

fn make_data(a: MakeData) -> CliResult {
    if a.sequences == 0 || a.agents == 0 {
        return Err(CliError::Usage("--sequences and --agents must be positive".into()));
    }
    let ds = synth_generate(&SynthConfig {
        n_sequences: a.sequences,
        agents: a.agents,
        min_frames: a.min_frames,
        max_frames: a.max_frames,
        seed: a.seed,
        scripts: Script::ALL.to_vec(),
    })?;
    ds.write(&a.out)?;
    println!("wrote {} sequences to {}", ds.scenes.len(), a.out.display());
    Ok(())
}

fn training_config(a: &TrainArgs) -> CliResult<TrainingConfig> {
    let mut cfg = match a.scale {
        Scale::Desk => TrainingConfig::desk(),
        Scale::Full => TrainingConfig::default(),
    };
    cfg.seed = a.seed;
    if let Some(n) = a.stage_steps {
        cfg.stage1_steps = n;
        cfg.stage2_steps = n;
        cfg.stage3_steps = n;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train_vae_cmd(a: TrainArgs) -> CliResult {
    let cfg = training_config(&a)?;
    let ds = Dataset::read(&a.data)?;
    let vae_cfg = match a.scale {
        Scale::Desk => VaeConfig::desk(),
        Scale::Full => VaeConfig::default(),
    };
    let log = a.log.clone().unwrap_or_else(|| a.checkpoint.join("vae_metrics.jsonl"));
    let trained = train_vae(&ds, &cfg, &vae_cfg, Some(&log))?;
    let header = trained.save(&a.checkpoint.join(VAE_FILE))?;
    println!("vae checkpoint {} ({})", a.checkpoint.join(VAE_FILE).display(), header.checksum);
    Ok(())
}

fn train_diffusion_cmd(a: TrainArgs) -> CliResult {
    let cfg = training_config(&a)?;
    let ds = Dataset::read(&a.data)?;
    let vae_path = a.checkpoint.join(VAE_FILE);
    let loaded = load_vae(&vae_path, hint_model::DType::F32)?;
    let den_cfg = match a.scale {
        Scale::Desk => DenoiserConfig::desk(),
        Scale::Full => DenoiserConfig::default(),
    };
    let log = a.log.clone().unwrap_or_else(|| a.checkpoint.join("diffusion_metrics.jsonl"));
    let trained = train_diffusion(&loaded.vae, &loaded.normalizer, &loaded.layout, &ds, &cfg, &den_cfg, Some(&log))?;
    let header = trained.save(&a.checkpoint.join(DIFFUSION_FILE))?;
    println!(
        "diffusion checkpoint {} ({})",
        a.checkpoint.join(DIFFUSION_FILE).display(),
        header.checksum
    );
    Ok(())
}

fn load_models(dir: &Path) -> CliResult<Arc<Models>> {
    for f in [VAE_FILE, DIFFUSION_FILE] {
        if !dir.join(f).is_file() {
            return Err(CliError::Data(format!("{} not found", dir.join(f).display())));
        }
    }
    Models::load(dir).map(Arc::new).map_err(|e| CliError::Model(e.to_string()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn generate(a: Generate) -> CliResult {
    if a.frames == 0 || a.agents == 0 {
        return Err(CliError::Usage("--frames and --agents must be positive".into()));
    }
    let models = load_models(&a.checkpoint)?;
    if let Some(dir) = &a.conditions {
        return generate_from(models, dir, &a);
    }
    let seeds = (0..a.agents)
        .map(|i| Ok((format!("agent{i}"), ring_pose(&models, i, a.agents)?)))
        .collect::<Result<Vec<_>, ModelError>>()?;
    let config = SessionConfig {
        seed: a.seed,
        total_frames: Some(a.frames),
        max_agents: a.agents.max(hint_model::engine::DEFAULT_MAX_AGENTS),
        sampler_steps: a.sampler_steps,
    };
    let mut session = GenerationSession::new(models, seeds, &a.text, config)?;
    while !session.is_exhausted() {
        session.roll_window()?;
    }
    write_trajectories(&session, a.frames, &a.out)?;
    let transcript = a.transcript.clone().unwrap_or_else(|| with_suffix(&a.out, ".transcript.jsonl"));
    session.save_transcript(&transcript).map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "wrote {} agents × {} frames to {} (transcript {})",
        a.agents,
        a.frames,
        a.out.display(),
        transcript.display()
    );
    Ok(())
}

fn write_trajectories(session: &GenerationSession, frames: usize, out: &Path) -> CliResult {
    let blocks: Vec<FrameBlock> = session
        .agent_ids()
        .iter()
        .map(|id| {
            let t = session.trajectory(id).expect("agent exists");
            t.slice_rows(0, frames.min(t.rows()))
        })
        .collect();
    let refs: Vec<&FrameBlock> = blocks.iter().collect();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_data(dir))?;
    }
    write_record_file(out, &refs)?;
    Ok(())
}

fn generate_from(models: Arc<Models>, dir: &Path, a: &Generate) -> CliResult {
    let reference = Dataset::read(dir)?;
    if reference.layout.name != models.layout.name {
        return Err(CliError::Data(format!(
            "dataset layout '{}' differs from checkpoint layout '{}'",
            reference.layout.name, models.layout.name
        )));
    }
    let mut scenes = Vec::with_capacity(reference.scenes.len());
    for (i, s) in reference.scenes.iter().enumerate() {
        let agents: Vec<(String, FrameBlock)> = s.agents.iter().map(|m| (m.agent_id.clone(), m.frames.clone())).collect();
        let out = continue_scene(models.clone(), &agents, &s.text, s.frames(), a.seed.wrapping_add(i as u64), a.sampler_steps)?;
        let motions = agents
            .iter()
            .zip(out)
            .map(|((id, _), f)| MotionSequence::new(reference.layout.clone(), f, id.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        scenes.push(Scene {
            id: s.id.clone(),
            script: s.script.clone(),
            text: s.text.clone(),
            window_texts: Vec::new(),
            agents: motions,
        });
    }
    let ds = Dataset {
        layout: reference.layout.clone(),
        scenes,
        synth: None,
    };
    ds.write(&a.out)?;
    println!("wrote {} generated scenes to {}", ds.scenes.len(), a.out.display());
    Ok(())
}

fn eval(a: Eval) -> CliResult {
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be positive".into()));
    }
    let generated = Dataset::read(&a.gen)?;
    let reference = Dataset::read(&a.reference)?;
    let fit = match &a.evaluator_data {
        Some(p) => Dataset::read(p)?,
        None => reference.clone(),
    };
    if generated.layout.name != reference.layout.name {
        return Err(CliError::Data("generated and reference layouts differ".into()));
    }
    let mut ecfg = EvaluatorConfig {
        seed: a.seed,
        ..EvaluatorConfig::default()
    };
    if let Some(s) = a.evaluator_steps {
        ecfg.steps = s;
    }
    let evaluator = train_evaluator(&fit, &ecfg)?;
    let (gen_scenes, gen_texts) = dataset_scenes(&generated);
    let (ref_scenes, _) = dataset_scenes(&reference);
    let seeds: Vec<u64> = (0..a.repeats as u64).map(|i| a.seed.wrapping_add(i)).collect();
    let table = eval_protocol(&seeds, |s| {
        score(&evaluator, &gen_scenes, &gen_texts, &ref_scenes, s).map_err(|e| hint_core::Error::InvalidArgument(e.to_string()))
    })?;
    print!("{}", table.render());
    if let Some(out) = &a.out {
        std::fs::write(out, table.to_json()?).map_err(io_data(out))?;
    }
    Ok(())
}

fn serve_cmd(a: Serve) -> CliResult {
    let models = load_models(&a.checkpoint)?;
    let config = ServeConfig {
        addr: a.addr,
        max_sessions: a.max_sessions,
        idle_timeout: Duration::from_secs(a.idle_timeout),
        handler: HandlerConfig {
            max_agents: a.max_agents,
            sampler_steps: a.sampler_steps,
            ..HandlerConfig::default()
        },
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Model(e.to_string()))?;
    rt.block_on(serve(models, config, None))
        .map_err(|e| CliError::Data(format!("server failed: {e}")))
}

fn replay_cmd(a: Replay) -> CliResult {
    let models = load_models(&a.checkpoint)?;
    let events = load_transcript(&a.transcript).map_err(|e| CliError::Data(e.to_string()))?;
    let (session, windows) = replay(models, &events)?;
    if let Some(out) = &a.out {
        let frames = session
            .config()
            .total_frames
            .unwrap_or(windows.len() * session_future(&windows));
        write_trajectories(&session, frames, out)?;
    }
    println!("replayed {} windows; every frame digest matched", windows.len());
    Ok(())
}

fn session_future(windows: &[hint_model::engine::WindowOutput]) -> usize {
    windows
        .first()
        .and_then(|w| w.agents.first())
        .map(|a| a.frames.rows())
        .unwrap_or(0)
}
