mod common;

use std::collections::BTreeMap;

use hint_core::FrameBlock;
use hint_model::engine::{read_transcript, replay, GenerationSession, SessionConfig, TextScope, WindowOutput};
use hint_model::ModelError;

fn config(seed: u64) -> SessionConfig {
    SessionConfig {
        seed,
        total_frames: None,
        sampler_steps: Some(8),
        ..SessionConfig::default()
    }
}

fn roll(session: &mut GenerationSession, n: usize) -> Vec<WindowOutput> {
    (0..n).map(|_| session.roll_window().unwrap()).collect()
}

fn frames_by_id(w: &WindowOutput) -> BTreeMap<String, FrameBlock> {
    w.agents.iter().map(|a| (a.id.clone(), a.frames.clone())).collect()
}

#[test]
fn windows_chain_without_gaps() {
    let models = common::toy_models(1);
    let (h, k) = (models.history(), models.future());
    let mut s = GenerationSession::new(models.clone(), common::ring(&models, 2), "two people walk", config(3)).unwrap();
    let mut emitted: BTreeMap<String, Vec<FrameBlock>> = BTreeMap::new();
    for t in 0..8 {
        let w = s.roll_window().unwrap();
        assert_eq!(w.window_index, t);
        for a in &w.agents {
            assert_eq!(a.frames.rows(), k);
            assert!(a.frames.is_finite());
            // the history the next window conditions on is the tail of this one, bitwise
            assert_eq!(s.history(&a.id).unwrap(), &a.frames.tail(h));
            emitted.entry(a.id.clone()).or_default().push(a.frames.clone());
        }
    }
    for (id, windows) in emitted {
        let traj = s.trajectory(&id).unwrap();
        assert_eq!(traj.rows(), 8 * k);
        let mut stitched = FrameBlock::zeros(0, traj.dim());
        for w in &windows {
            stitched = stitched.concat(w).unwrap();
        }
        assert_eq!(traj, stitched);
    }
}

#[test]
fn same_seed_same_rollout_and_other_seeds_differ() {
    let models = common::toy_models(1);
    let run = |seed| {
        let mut s = GenerationSession::new(models.clone(), common::ring(&models, 2), "wave", config(seed)).unwrap();
        roll(&mut s, 8).iter().map(WindowOutput::digest).collect::<Vec<_>>()
    };
    assert_eq!(run(5), run(5));
    assert_ne!(run(5), run(6));
}

#[test]
fn transcript_replay_is_bitwise() {
    let models = common::toy_models(2);
    let mut s = GenerationSession::new(models.clone(), common::ring(&models, 2), "approach", config(9)).unwrap();
    let mut windows = roll(&mut s, 3);
    s.update_text("circle around", TextScope::Global).unwrap();
    windows.extend(roll(&mut s, 2));
    s.update_text("wave", TextScope::Agent("agent1".into())).unwrap();
    let pose = hint_core::synth::rest_pose(&models.layout, 0.0, 3.0, 1.0).unwrap();
    s.add_agent(&pose, Some("walk")).unwrap();
    windows.extend(roll(&mut s, 3));
    s.stop().unwrap();

    let mut buf = Vec::new();
    s.write_transcript(&mut buf).unwrap();
    let events = read_transcript(buf.as_slice()).unwrap();
    let (again, replayed) = replay(models.clone(), &events).unwrap();
    assert!(again.is_closed());
    assert_eq!(replayed.len(), windows.len());
    for (a, b) in windows.iter().zip(&replayed) {
        assert_eq!(frames_by_id(a), frames_by_id(b));
    }

    let mut tampered = events.clone();
    let w = tampered.iter_mut().find(|e| e.event == "window").unwrap();
    w.payload["frames_sha256"] = "00".into();
    assert!(matches!(replay(models, &tampered), Err(ModelError::ReplayMismatch { .. })));
}

#[test]
fn permuting_agents_at_init_permutes_outputs() {
    let models = common::toy_models(3);
    let agents = common::ring(&models, 3);
    let mut reversed = agents.clone();
    reversed.reverse();
    let mut a = GenerationSession::new(models.clone(), agents, "dance", config(4)).unwrap();
    let mut b = GenerationSession::new(models.clone(), reversed, "dance", config(4)).unwrap();
    for _ in 0..8 {
        let (wa, wb) = (a.roll_window().unwrap(), b.roll_window().unwrap());
        assert_eq!(frames_by_id(&wa), frames_by_id(&wb));
    }
}

#[test]
fn three_agents_on_a_two_agent_model() {
    let models = common::toy_models(4);
    let before = (models.vae.checksum().unwrap(), models.denoiser.checksum().unwrap());
    let mut s = GenerationSession::new(models.clone(), common::ring(&models, 3), "three friends", config(1)).unwrap();
    for w in roll(&mut s, 8) {
        assert_eq!(w.agents.len(), 3);
        assert!(w.agents.iter().all(|a| a.frames.is_finite()));
    }
    assert_eq!(before, (models.vae.checksum().unwrap(), models.denoiser.checksum().unwrap()));
}

#[test]
fn one_seed_frame_is_padded_to_a_full_history() {
    let models = common::toy_models(1);
    let agents: Vec<_> = common::ring(&models, 2).into_iter().map(|(id, p)| (id, p.slice_rows(0, 1))).collect();
    let s = GenerationSession::new(models.clone(), agents.clone(), "x", config(0)).unwrap();
    for (id, p) in &agents {
        let h = s.history(id).unwrap();
        assert_eq!(h.rows(), models.history());
        assert!(h.iter_rows().all(|r| r == p.row(0)));
    }
}

#[test]
fn init_rejects_bad_agent_sets() {
    let models = common::toy_models(1);
    let mut dup = common::ring(&models, 2);
    dup[1].0 = dup[0].0.clone();
    assert!(matches!(
        GenerationSession::new(models.clone(), dup, "x", config(0)),
        Err(ModelError::DuplicateAgent(_))
    ));
    assert!(GenerationSession::new(models.clone(), vec![], "x", config(0)).is_err());
    let empty = vec![("a".to_string(), FrameBlock::zeros(0, models.layout.dim()))];
    assert!(GenerationSession::new(models, empty, "x", config(0)).is_err());
}

#[test]
fn latest_text_update_wins() {
    let models = common::toy_models(1);
    let mut s = GenerationSession::new(models.clone(), common::ring(&models, 2), "walk", config(0)).unwrap();
    roll(&mut s, 1);
    assert_eq!(s.update_text("wave", TextScope::Agent("agent0".into())).unwrap(), 1);
    s.update_text("sit", TextScope::Global).unwrap();
    let w = s.roll_window().unwrap();
    assert!(w.texts.values().all(|t| t == "sit"));

    s.update_text("run", TextScope::Global).unwrap();
    s.update_text("jump", TextScope::Agent("agent1".into())).unwrap();
    s.update_text("hop", TextScope::Agent("agent1".into())).unwrap();
    let w = s.roll_window().unwrap();
    assert_eq!(w.texts["agent0"], "run");
    assert_eq!(w.texts["agent1"], "hop");

    assert!(matches!(
        s.update_text("x", TextScope::Agent("nobody".into())),
        Err(ModelError::UnknownAgent(_))
    ));
}

#[test]
fn text_changes_the_conditioning() {
    let models = common::toy_models(5);
    let run = |text: &str| {
        let mut s = GenerationSession::new(models.clone(), common::ring(&models, 2), "walk", config(2)).unwrap();
        roll(&mut s, 1);
        s.update_text(text, TextScope::Global).unwrap();
        s.roll_window().unwrap().digest()
    };
    assert_eq!(run("walk"), run("walk"));
    assert_ne!(run("walk"), run("wave both hands"));
}

#[test]
fn added_agent_joins_the_next_window() {
    let models = common::toy_models(1);
    let mut s = GenerationSession::new(models.clone(), common::ring(&models, 2), "walk", config(0)).unwrap();
    roll(&mut s, 2);
    let pose = hint_core::synth::rest_pose(&models.layout, 2.0, 0.0, 0.0).unwrap();
    let id = s.add_agent(&pose, None).unwrap();
    assert_eq!(id, "agent2");
    let w = s.roll_window().unwrap();
    assert_eq!(w.agents.len(), 3);
    assert_eq!(s.trajectory(&id).unwrap().rows(), models.future());
    assert_eq!(s.trajectory("agent0").unwrap().rows(), 3 * models.future());

    let small = SessionConfig { max_agents: 2, ..config(0) };
    let mut s = GenerationSession::new(models.clone(), common::ring(&models, 2), "walk", small).unwrap();
    assert!(matches!(s.add_agent(&pose, None), Err(ModelError::TooManyAgents { .. })));
}

#[test]
fn bounded_sessions_exhaust() {
    let models = common::toy_models(1);
    let cfg = SessionConfig {
        total_frames: Some(40),
        ..config(0)
    };
    let mut s = GenerationSession::new(models.clone(), common::ring(&models, 2), "walk", cfg).unwrap();
    assert_eq!(s.window_limit(), Some(3));
    roll(&mut s, 3);
    assert!(s.is_exhausted());
    assert!(matches!(s.roll_window(), Err(ModelError::Exhausted { .. })));
    s.stop().unwrap();
    assert!(matches!(s.roll_window(), Err(ModelError::SessionClosed)));
    assert!(matches!(s.update_text("x", TextScope::Global), Err(ModelError::SessionClosed)));
}

#[test]
fn open_ended_length_estimate_grows() {
    let models = common::toy_models(1);
    let mut s = GenerationSession::new(models.clone(), common::ring(&models, 1), "walk", config(0)).unwrap();
    let k = models.future();
    assert_eq!(s.total_frames_estimate(), k);
    roll(&mut s, 2);
    assert_eq!(s.total_frames_estimate(), 3 * k);
    assert_eq!(s.window_limit(), None);
}
