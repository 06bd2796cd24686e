mod common;

use hint_service::handler::SessionHandler;
use hint_service::protocol::{ErrorCode, ServerMessage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn send(h: &mut SessionHandler, msg: serde_json::Value) -> Vec<ServerMessage> {
    h.handle_text(&msg.to_string())
}

fn handler() -> SessionHandler {
    SessionHandler::new(common::toy_models(), common::fast_handler(), "s1")
}

fn started(total_frames: Option<usize>) -> SessionHandler {
    let mut h = handler();
    let r = send(&mut h, json!({"type": "start", "agents": 2, "layout": "synthetic-8", "text": "two people bow", "seed": 7, "total_frames": total_frames}));
    assert!(matches!(r.as_slice(), [ServerMessage::Session { .. }]), "{r:?}");
    h
}

fn error_code(r: &[ServerMessage]) -> Option<ErrorCode> {
    match r {
        [ServerMessage::Error { code, .. }] => Some(*code),
        _ => None,
    }
}

#[test]
fn scripted_session_streams_gap_free_windows() {
    let mut h = handler();
    let r = send(&mut h, json!({"type": "start", "agents": 2, "layout": "synthetic-8", "text": "two people bow", "seed": 7, "total_frames": null}));
    let [ServerMessage::Session { h: hist, k, agents, window_limit, .. }] = r.as_slice() else {
        panic!("{r:?}")
    };
    assert_eq!((*hist, *k, agents.len(), *window_limit), (4, 16, 2, None));

    let mut script = vec![json!({"type": "text", "text": "they shake hands", "scope": "global"})];
    script.extend(std::iter::repeat_n(json!({"type": "step", "windows": 1}), 3));
    script.push(json!({"type": "add_agent", "pose": [0.0, 2.0, 3.1], "text": "walk over"}));
    script.push(json!({"type": "step", "windows": 1}));
    script.push(json!({"type": "stop"}));

    let mut frames = Vec::new();
    let mut acks = Vec::new();
    for m in script {
        let r = send(&mut h, m);
        assert!(!r.is_empty());
        for out in r {
            match out {
                ServerMessage::Frames { window_index, agents } => {
                    assert!(agents.iter().all(|a| a.joints.len() == 16 && a.joints.iter().all(|f| f.len() == 8)));
                    assert!(agents.iter().all(|a| a.features.is_none()));
                    frames.push((window_index, agents.len()));
                }
                ServerMessage::Ack { of, window_index, agent } => acks.push((of, window_index, agent)),
                other => panic!("unexpected {other:?}"),
            }
        }
    }
    assert_eq!(frames, vec![(0, 2), (1, 2), (2, 2), (3, 3)]);
    let kinds: Vec<(&str, usize)> = acks.iter().map(|(o, w, _)| (o.as_str(), *w)).collect();
    assert_eq!(
        kinds,
        vec![("text", 0), ("step", 1), ("step", 2), ("step", 3), ("add_agent", 3), ("step", 4), ("stop", 4)]
    );
    assert_eq!(acks[4].2.as_deref(), Some("agent2"));
    assert!(h.is_closed());

    let r = send(&mut h, json!({"type": "step", "windows": 1}));
    let [ServerMessage::Error { code, message }] = r.as_slice() else { panic!("{r:?}") };
    assert_eq!(*code, ErrorCode::SessionClosed);
    assert!(message.contains("session closed"));
}

#[test]
fn multi_window_step_emits_one_frames_message_per_window() {
    let mut h = started(Some(64));
    let r = send(&mut h, json!({"type": "step", "windows": 2}));
    let idx: Vec<usize> = r
        .iter()
        .filter_map(|m| match m {
            ServerMessage::Frames { window_index, .. } => Some(*window_index),
            _ => None,
        })
        .collect();
    assert_eq!(idx, vec![0, 1]);
    assert!(matches!(r.last(), Some(ServerMessage::Ack { of, window_index: 2, .. }) if of == "step"));
    // 64 frames allow 4 windows: 3 more is over budget and generates nothing
    let r = send(&mut h, json!({"type": "step", "windows": 3}));
    assert_eq!(error_code(&r), Some(ErrorCode::Exhausted));
    let r = send(&mut h, json!({"type": "step", "windows": 2}));
    assert_eq!(r.len(), 3);
    assert_eq!(error_code(&send(&mut h, json!({"type": "step", "windows": 1}))), Some(ErrorCode::Exhausted));
}

#[test]
fn text_update_shows_up_in_the_transcript_at_the_next_window() {
    let mut h = started(None);
    send(&mut h, json!({"type": "step", "windows": 1}));
    let r = send(&mut h, json!({"type": "text", "text": "wave", "scope": "agent", "agent": "agent1"}));
    assert!(matches!(r.as_slice(), [ServerMessage::Ack { window_index: 1, agent: Some(a), .. }] if a == "agent1"));
    send(&mut h, json!({"type": "step", "windows": 1}));
    let r = send(&mut h, json!({"type": "transcript"}));
    let [ServerMessage::Transcript { events }] = r.as_slice() else { panic!("{r:?}") };
    let kinds: Vec<(&str, usize)> = events.iter().map(|e| (e.event.as_str(), e.window_index)).collect();
    assert_eq!(kinds, vec![("init", 0), ("window", 0), ("text", 1), ("window", 1)]);
    assert_eq!(events[3].payload["texts"]["agent1"], "wave");
    assert_eq!(events[3].payload["texts"]["agent0"], "two people bow");
}

#[test]
fn feature_vectors_are_opt_in() {
    let mut h = handler();
    send(&mut h, json!({"type": "start", "agents": 1, "text": "walk", "features": true}));
    let r = send(&mut h, json!({"type": "step", "windows": 1}));
    let ServerMessage::Frames { agents, .. } = &r[0] else { panic!("{r:?}") };
    let f = agents[0].features.as_ref().unwrap();
    assert_eq!(f.len(), 16);
    assert_eq!(f[0].len(), hint_core::FeatureLayout::synthetic8().dim());
}

#[test]
fn same_seed_same_stream() {
    let run = || {
        let mut h = started(None);
        serde_json::to_string(&send(&mut h, json!({"type": "step", "windows": 2}))).unwrap()
    };
    assert_eq!(run(), run());
}

/// One illegal message for the given handler state.
fn illegal(rng: &mut ChaCha8Rng, state: u8) -> serde_json::Value {
    let garbage = [
        json!("not an object"),
        json!({"type": "teleport"}),
        json!({"no_type": 1}),
        json!({"type": "step"}),
        json!({"type": "step", "windows": "two"}),
        json!({"type": "start", "agents": -1, "text": "x"}),
        json!({"type": "text", "scope": "global"}),
        json!({"type": "text", "text": 5}),
        json!({"type": "add_agent", "pose": "here"}),
        json!(null),
        json!([1, 2, 3]),
    ];
    if rng.random_bool(0.3) {
        return garbage[rng.random_range(0..garbage.len())].clone();
    }
    match state {
        // idle: anything but start
        0 => match rng.random_range(0..6) {
            0 => json!({"type": "text", "text": "hi"}),
            1 => json!({"type": "step", "windows": rng.random_range(1..4)}),
            2 => json!({"type": "add_agent"}),
            3 => json!({"type": "stop"}),
            4 => json!({"type": "start", "agents": 0, "text": "x"}),
            _ => json!({"type": "start", "agents": 99, "text": "x"}),
        },
        // active
        1 => match rng.random_range(0..8) {
            0 => json!({"type": "start", "agents": 2, "text": "again"}),
            1 => json!({"type": "step", "windows": 0}),
            2 => json!({"type": "step", "windows": 33 + rng.random_range(0..100)}),
            3 => json!({"type": "text", "text": "x", "scope": "agent", "agent": format!("ghost{}", rng.random::<u16>())}),
            4 => json!({"type": "text", "text": "x", "scope": "agent"}),
            5 => json!({"type": "text", "text": "x", "scope": "global", "agent": "agent0"}),
            6 => json!({"type": "add_agent", "pose": [[0.0, 1.0]]}),
            _ => json!({"type": "step", "windows": 5}),
        },
        // closed: everything but a transcript request
        _ => match rng.random_range(0..5) {
            0 => json!({"type": "step", "windows": 1}),
            1 => json!({"type": "text", "text": "x"}),
            2 => json!({"type": "stop"}),
            3 => json!({"type": "add_agent"}),
            _ => json!({"type": "start", "agents": 1, "text": "x"}),
        },
    }
}

#[test]
fn fuzzed_illegal_messages_only_produce_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut idle = handler();
    // bounded to four windows and fully used, so any further step is illegal
    let mut active = started(Some(64));
    assert_eq!(send(&mut active, json!({"type": "step", "windows": 4})).len(), 5);
    let mut closed = started(None);
    send(&mut closed, json!({"type": "stop"}));

    let mut errors = 0;
    for i in 0..1000 {
        let state = (i % 3) as u8;
        let msg = illegal(&mut rng, state);
        let h = match state {
            0 => &mut idle,
            1 => &mut active,
            _ => &mut closed,
        };
        let r = send(h, msg.clone());
        assert!(error_code(&r).is_some(), "message {msg} in state {state} gave {r:?}");
        errors += 1;
    }
    assert_eq!(errors, 1000);

    // every session is still alive and in its original state
    assert!(matches!(send(&mut idle, json!({"type": "start", "agents": 1, "text": "x"})).as_slice(), [ServerMessage::Session { .. }]));
    assert!(matches!(send(&mut active, json!({"type": "transcript"})).as_slice(), [ServerMessage::Transcript { .. }]));
    assert!(matches!(send(&mut closed, json!({"type": "transcript"})).as_slice(), [ServerMessage::Transcript { .. }]));
}
