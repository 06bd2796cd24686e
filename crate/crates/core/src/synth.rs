//! Scripted multi-agent interactions on the 8-joint stick figure.
//!
//! Every scene is a pure function of `(seed, scene index)`. Roots follow a
//! scripted ground-plane path, feet are placed by a fixed-duration footstep
//! planner (stance feet are exactly stationary), and texts are filled from
//! templates that name the script and its parameters.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Scene, TextSpan};
use crate::error::{Error, Result};
use crate::layout::{ChannelRole, FeatureLayout};
use crate::motion::{foot_contacts, FrameBlock, MotionSequence, CONTACT_SPEED_THRESHOLD};
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Script {
    Approach,
    Circle,
    Follow,
    BackAway,
    Wave,
}

impl Script {
    pub const ALL: [Script; 5] = [Script::Approach, Script::Circle, Script::Follow, Script::BackAway, Script::Wave];

    pub fn name(self) -> &'static str {
        match self {
            Script::Approach => "approach",
            Script::Circle => "circle",
            Script::Follow => "follow",
            Script::BackAway => "back-away",
            Script::Wave => "wave",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_sequences: usize,
    pub agents: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
    pub scripts: Vec<Script>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sequences: 10,
            agents: 2,
            min_frames: 68,
            max_frames: 100,
            seed: 7,
            scripts: Script::ALL.to_vec(),
        }
    }
}

const ROOT_HEIGHT: f64 = 0.9;
const HIP_HEIGHT: f64 = 0.85;
const FOOT_HEIGHT: f64 = 0.05;
const HIP_HALF_WIDTH: f64 = 0.1;
const CHEST_RISE: f64 = 0.45;
const SWING_FRAMES: usize = 8;
const STEP_LIFT: f64 = 0.08;
const MIN_STEP: f64 = 0.02;

/// Scripted ground-plane state of one agent.
#[derive(Debug, Clone, Default)]
pub struct AgentTrack {
    /// Root `(x, z)` per frame.
    pub root: Vec<(f64, f64)>,
    /// Yaw; forward is `(sin ψ, 0, cos ψ)`.
    pub heading: Vec<f64>,
    /// Right-hand wave amplitude in `[0, 1]`.
    pub wave: Vec<f64>,
}

impl AgentTrack {
    fn standing(frames: usize, x: f64, z: f64, heading: f64) -> Self {
        Self {
            root: vec![(x, z); frames],
            heading: vec![heading; frames],
            wave: vec![0.0; frames],
        }
    }

    fn len(&self) -> usize {
        self.root.len()
    }

    fn place(&mut self, yaw: f64, offset: (f64, f64)) {
        let (s, c) = yaw.sin_cos();
        for p in &mut self.root {
            let (x, z) = *p;
            *p = (c * x + s * z + offset.0, -s * x + c * z + offset.1);
        }
        for h in &mut self.heading {
            *h += yaw;
        }
    }
}

fn left_of(heading: f64) -> Vec3 {
    Vec3::new(heading.cos(), 0.0, -heading.sin())
}

fn forward_of(heading: f64) -> Vec3 {
    Vec3::new(heading.sin(), 0.0, heading.cos())
}

fn foot_rest(track: &AgentTrack, t: usize, side: usize) -> Vec3 {
    let (x, z) = track.root[t];
    let sign = if side == 0 { 1.0 } else { -1.0 };
    Vec3::new(x, FOOT_HEIGHT, z) + left_of(track.heading[t]) * (sign * HIP_HALF_WIDTH)
}

/// Footstep planner: alternating fixed-duration swings toward the rest
/// placement the root will have when the swing lands.
fn plan_feet(track: &AgentTrack) -> Vec<[Vec3; 2]> {
    let n = track.len();
    let mut feet = [foot_rest(track, 0, 0), foot_rest(track, 0, 1)];
    let mut swing: Option<(usize, usize, Vec3, Vec3)> = None;
    let mut next = 0usize;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        if let Some((side, start, from, to)) = swing {
            let k = t - start;
            if k >= SWING_FRAMES {
                feet[side] = to;
                swing = None;
                next = 1 - side;
            } else {
                let a = k as f64 / SWING_FRAMES as f64;
                let mut p = from + (to - from) * a;
                p[1] = FOOT_HEIGHT + STEP_LIFT * (PI * a).sin();
                feet[side] = p;
            }
        }
        if swing.is_none() {
            let land = (t + SWING_FRAMES).min(n - 1);
            let mut pick = None;
            for side in [next, 1 - next] {
                let target = foot_rest(track, land, side);
                if (target - feet[side]).norm() > MIN_STEP {
                    pick = Some((side, target));
                    break;
                }
            }
            if let Some((side, target)) = pick {
                if t + 1 < n {
                    swing = Some((side, t, feet[side], target));
                }
            }
        }
        out.push(feet);
    }
    out
}

/// Rest-pose bone directions in the root frame (parent → joint).
fn rest_pose_local() -> [Vec3; 8] {
    [
        Vec3::new(0.0, ROOT_HEIGHT, 0.0),
        Vec3::new(HIP_HALF_WIDTH, HIP_HEIGHT, 0.0),
        Vec3::new(-HIP_HALF_WIDTH, HIP_HEIGHT, 0.0),
        Vec3::new(HIP_HALF_WIDTH, FOOT_HEIGHT, 0.0),
        Vec3::new(-HIP_HALF_WIDTH, FOOT_HEIGHT, 0.0),
        Vec3::new(0.0, ROOT_HEIGHT + CHEST_RISE, 0.0),
        Vec3::new(0.3, ROOT_HEIGHT + 0.1, 0.0),
        Vec3::new(-0.3, ROOT_HEIGHT + 0.1, 0.0),
    ]
}

/// World joint positions of every frame.
pub fn pose_track(track: &AgentTrack) -> Vec<Vec<Vec3>> {
    let feet = plan_feet(track);
    (0..track.len())
        .map(|t| {
            let (x, z) = track.root[t];
            let psi = track.heading[t];
            let left = left_of(psi);
            let fwd = forward_of(psi);
            let root = Vec3::new(x, ROOT_HEIGHT, z);
            let chest = root + Vec3::new(0.0, CHEST_RISE, 0.0);
            // arms counter-swing with the feet
            let stride = (feet[t][0] - feet[t][1]).dot(&fwd);
            let lhand = chest + left * 0.3 + Vec3::new(0.0, -0.35, 0.0) - fwd * (0.5 * stride);
            let w = track.wave[t];
            let rest_r = chest - left * 0.3 + Vec3::new(0.0, -0.35, 0.0) + fwd * (0.5 * stride);
            let raised = chest - left * (0.25 + 0.12 * (0.4 * t as f64).sin()) + Vec3::new(0.0, 0.45, 0.0) + fwd * 0.1;
            let rhand = rest_r * (1.0 - w) + raised * w;
            vec![
                root,
                Vec3::new(x, HIP_HEIGHT, z) + left * HIP_HALF_WIDTH,
                Vec3::new(x, HIP_HEIGHT, z) - left * HIP_HALF_WIDTH,
                feet[t][0],
                feet[t][1],
                chest,
                lhand,
                rhand,
            ]
        })
        .collect()
}

/// Builds interhuman-style feature frames from world joint positions.
pub fn frames_from_joints(layout: &FeatureLayout, joints: &[Vec<Vec3>]) -> Result<FrameBlock> {
    let n = layout.joint_count;
    if joints.iter().any(|j| j.len() != n) {
        return Err(Error::shape(format!("{n} joints"), "other"));
    }
    let (pos, vel, rot, con) = (
        layout.first_slice(ChannelRole::Position),
        layout.first_slice(ChannelRole::Velocity),
        layout.first_slice(ChannelRole::JointRotation6d),
        layout.first_slice(ChannelRole::Contact),
    );
    let (Some(pos), Some(vel), Some(rot), Some(con)) = (pos, vel, rot, con) else {
        return Err(Error::Config("joint-based frames need an interhuman-style layout".into()));
    };
    let contacts = foot_contacts(layout, joints, CONTACT_SPEED_THRESHOLD)?;
    let rest = rest_local_for(layout);
    let d = layout.dim();
    let frames = joints.len();
    let mut data = vec![0.0; frames * d];
    for t in 0..frames {
        let row = &mut data[t * d..(t + 1) * d];
        let (a, b) = if frames < 2 {
            (0, 0)
        } else if t + 1 < frames {
            (t, t + 1)
        } else {
            (frames - 2, frames - 1)
        };
        for j in 0..n {
            let p = joints[t][j];
            row[pos.offset + 3 * j..pos.offset + 3 * j + 3].copy_from_slice(p.as_slice());
            let v = joints[b][j] - joints[a][j];
            row[vel.offset + 3 * j..vel.offset + 3 * j + 3].copy_from_slice(v.as_slice());
        }
        let heading = crate::geometry::facing_direction(layout, row)?.unwrap_or(Vec3::z());
        let to_local = crate::geometry::RotationMatrix3::from_yaw(-heading[0].atan2(heading[2]));
        for j in 1..n {
            let parent = layout.parents[j].unwrap_or(0);
            let bone = to_local.rotate(&(joints[t][j] - joints[t][parent]));
            let rest_bone = rest[j] - rest[parent];
            let r = bone_rotation(&rest_bone, &bone);
            let six = crate::geometry::RotationMatrix3::new(*r.matrix())?.to_rot6d();
            let o = rot.offset + 6 * (j - 1);
            row[o..o + 6].copy_from_slice(&six.0);
        }
        row[con.range()].copy_from_slice(&contacts[t]);
    }
    FrameBlock::new(frames, d, data)
}

/// Shortest-arc rotation taking direction `from` onto `to`; antiparallel
/// inputs turn half a revolution about an axis perpendicular to `from`.
fn bone_rotation(from: &Vec3, to: &Vec3) -> nalgebra::Rotation3<f64> {
    let (a, b) = (from.normalize(), to.normalize());
    if !b.iter().all(|v| v.is_finite()) {
        return nalgebra::Rotation3::identity();
    }
    let axis = a.cross(&b);
    let (sin, cos) = (axis.norm(), a.dot(&b));
    if sin > 1e-9 {
        return nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), sin.atan2(cos));
    }
    if cos > 0.0 {
        return nalgebra::Rotation3::identity();
    }
    let helper = if a[0].abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(a.cross(&helper)), PI)
}

fn rest_local_for(layout: &FeatureLayout) -> Vec<Vec3> {
    if layout.joint_count == 8 {
        rest_pose_local().to_vec()
    } else {
        (0..layout.joint_count)
            .map(|j| Vec3::new(0.0, 1.0 - 0.05 * j as f64, 0.0))
            .collect()
    }
}

fn quantize(block: FrameBlock) -> FrameBlock {
    let (rows, dim) = (block.rows(), block.dim());
    let data = block.into_vec().into_iter().map(|v| v as f32 as f64).collect();
    FrameBlock::new(rows, dim, data).expect("shape preserved")
}

/// Renders a track into a feature sequence on the synthetic-8 layout.
pub fn render_track(layout: &Arc<FeatureLayout>, track: &AgentTrack, agent_id: &str) -> Result<MotionSequence> {
    let joints = pose_track(track);
    MotionSequence::new(layout.clone(), quantize(frames_from_joints(layout, &joints)?), agent_id)
}

/// One standing frame with the root at ground position `(x, z)` and yaw `heading`.
pub fn rest_pose(layout: &FeatureLayout, x: f64, z: f64, heading: f64) -> Result<FrameBlock> {
    let track = AgentTrack::standing(1, x, z, heading);
    Ok(quantize(frames_from_joints(layout, &pose_track(&track))?))
}

/// A single agent walking straight along `+z` at `speed` m/frame, with the
/// generator's ground-truth stance mask (1 where the foot does not move to
/// the next frame) in contact-channel order.
pub fn straight_walk(frames: usize, speed: f64) -> (Vec<Vec<Vec3>>, Vec<[f64; 4]>) {
    let mut track = AgentTrack::standing(frames, 0.0, 0.0, 0.0);
    for t in 0..frames {
        track.root[t] = (0.0, speed * t as f64);
    }
    let joints = pose_track(&track);
    let mask = (0..frames)
        .map(|t| {
            let (a, b) = if t + 1 < frames { (t, t + 1) } else { (t.saturating_sub(1), t) };
            let still = |j: usize| if joints[a][j] == joints[b][j] { 1.0 } else { 0.0 };
            [still(3), still(3), still(4), still(4)]
        })
        .collect();
    (joints, mask)
}

struct ScriptedScene {
    tracks: Vec<AgentTrack>,
    text: String,
    spans: Vec<TextSpan>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn face(from: (f64, f64), to: (f64, f64)) -> f64 {
    (to.0 - from.0).atan2(to.1 - from.1)
}

fn script_scene(script: Script, frames: usize, agents: usize, rng: &mut ChaCha8Rng) -> ScriptedScene {
    let mut tracks: Vec<AgentTrack>;
    let text;
    let mut spans = Vec::new();
    match script {
        Script::Approach => {
            let dist = uniform(rng, 2.5, 4.0);
            let speed = uniform(rng, 0.025, 0.04);
            let gap = uniform(rng, 0.8, 1.2);
            let mut a = AgentTrack::standing(frames, -dist / 2.0, 0.0, FRAC_PI_2);
            let mut b = AgentTrack::standing(frames, dist / 2.0, 0.0, -FRAC_PI_2);
            let mut x = dist / 2.0;
            let mut stop = frames;
            for t in 0..frames {
                a.root[t].0 = -x;
                b.root[t].0 = x;
                if 2.0 * x - 2.0 * speed >= gap {
                    x -= speed;
                } else if stop == frames {
                    stop = t + 1;
                }
            }
            tracks = vec![a, b];
            text = format!("two people walk toward each other and stop {gap:.1} meters apart");
            spans.push(TextSpan { start: 0, end: stop.min(frames), text: "two people walk toward each other".into() });
            if stop < frames {
                spans.push(TextSpan { start: stop, end: frames, text: "two people stand face to face".into() });
            }
        }
        Script::Circle => {
            let radius = uniform(rng, 1.2, 2.0);
            let omega = uniform(rng, 0.02, 0.035);
            let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let phase = uniform(rng, 0.0, 2.0 * PI);
            let mut a = AgentTrack::standing(frames, 0.0, 0.0, 0.0);
            let mut b = AgentTrack::standing(frames, 0.0, 0.0, 0.0);
            for t in 0..frames {
                let phi = phase + dir * omega * t as f64;
                a.root[t] = (radius * phi.cos(), radius * phi.sin());
                let (vx, vz) = (-dir * phi.sin(), dir * phi.cos());
                a.heading[t] = vx.atan2(vz);
                b.heading[t] = face(b.root[t], a.root[t]);
            }
            tracks = vec![a, b];
            let sense = if dir > 0.0 { "counterclockwise" } else { "clockwise" };
            text = format!("one person walks {sense} around the other in a circle of radius {radius:.1} meters");
        }
        Script::Follow => {
            let speed = uniform(rng, 0.025, 0.04);
            let turn = uniform(rng, -0.008, 0.008);
            let behind = uniform(rng, 1.0, 1.6);
            let lag = (behind / speed).round() as usize;
            let total = frames + lag;
            let mut path = Vec::with_capacity(total);
            let (mut x, mut z, mut psi) = (0.0, 0.0, 0.0f64);
            for _ in 0..total {
                path.push((x, z, psi));
                x += speed * psi.sin();
                z += speed * psi.cos();
                psi += turn;
            }
            let mut a = AgentTrack::standing(frames, 0.0, 0.0, 0.0);
            let mut b = AgentTrack::standing(frames, 0.0, 0.0, 0.0);
            for t in 0..frames {
                let (x, z, h) = path[t + lag];
                a.root[t] = (x, z);
                a.heading[t] = h;
                let (x, z, h) = path[t];
                b.root[t] = (x, z);
                b.heading[t] = h;
            }
            tracks = vec![a, b];
            text = format!("one person walks ahead while the other follows {behind:.1} meters behind");
        }
        Script::BackAway => {
            let speed = uniform(rng, 0.02, 0.035);
            let gap = uniform(rng, 0.8, 1.4);
            let mut a = AgentTrack::standing(frames, 0.0, -gap, 0.0);
            let mut b = AgentTrack::standing(frames, 0.0, 0.0, PI);
            for t in 0..frames {
                let dz = speed * t as f64;
                a.root[t] = (0.0, -gap + dz);
                b.root[t] = (0.0, dz);
            }
            tracks = vec![a, b];
            text = format!("one person walks forward while the other backs away keeping {gap:.1} meters");
        }
        Script::Wave => {
            let dist = uniform(rng, 1.5, 3.0);
            let start = rng.random_range(8..24usize).min(frames);
            let reply = (start + 20).min(frames);
            let mut a = AgentTrack::standing(frames, -dist / 2.0, 0.0, FRAC_PI_2);
            let mut b = AgentTrack::standing(frames, dist / 2.0, 0.0, -FRAC_PI_2);
            for t in 0..frames {
                a.wave[t] = ((t as f64 - start as f64) / 6.0).clamp(0.0, 1.0);
                b.wave[t] = ((t as f64 - reply as f64) / 6.0).clamp(0.0, 1.0);
            }
            tracks = vec![a, b];
            text = format!("two people stand {dist:.1} meters apart and wave at each other");
            spans.push(TextSpan { start: 0, end: start, text: "two people stand face to face".into() });
            spans.push(TextSpan { start, end: frames, text: "they wave at each other".into() });
        }
    }
    // extra agents watch from the side
    for k in 2..agents {
        let angle = 2.0 * PI * k as f64 / agents as f64 + 0.3;
        let spot = (3.0 * angle.cos(), 3.0 * angle.sin());
        let heading = face(spot, tracks[0].root[0]);
        tracks.push(AgentTrack::standing(frames, spot.0, spot.1, heading));
    }
    tracks.truncate(agents.max(1));
    ScriptedScene { tracks, text, spans }
}

/// Deterministic synthetic dataset.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    if config.agents == 0 || config.min_frames == 0 || config.min_frames > config.max_frames {
        return Err(Error::InvalidArgument("invalid synthetic dataset configuration".into()));
    }
    let scripts = if config.scripts.is_empty() {
        Script::ALL.to_vec()
    } else {
        config.scripts.clone()
    };
    let layout = Arc::new(FeatureLayout::synthetic8());
    let mut scenes = Vec::with_capacity(config.n_sequences);
    for i in 0..config.n_sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        let script = scripts[i % scripts.len()];
        let frames = rng.random_range(config.min_frames..=config.max_frames);
        let mut scene = script_scene(script, frames, config.agents, &mut rng);
        let yaw = uniform(&mut rng, -PI, PI);
        let offset = (uniform(&mut rng, -2.0, 2.0), uniform(&mut rng, -2.0, 2.0));
        for tr in &mut scene.tracks {
            tr.place(yaw, offset);
        }
        let agents = scene
            .tracks
            .iter()
            .enumerate()
            .map(|(a, tr)| render_track(&layout, tr, &format!("a{a}")))
            .collect::<Result<Vec<_>>>()?;
        scenes.push(Scene {
            id: format!("seq{i:05}"),
            script: script.name().to_string(),
            text: scene.text,
            window_texts: scene.spans,
            agents,
        });
    }
    Ok(Dataset {
        layout,
        scenes,
        synth: Some(config.clone()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_walk_contacts_match_stance() {
        let layout = FeatureLayout::synthetic8();
        let (joints, mask) = straight_walk(120, 0.06);
        let labels = foot_contacts(&layout, &joints, CONTACT_SPEED_THRESHOLD).unwrap();
        assert_eq!(labels, mask);
        // both stance and swing phases actually occur
        assert!(mask.iter().any(|m| m[0] == 0.0));
        assert!(mask.iter().any(|m| m[0] == 1.0));
    }

    #[test]
    fn rest_frames_are_valid() {
        let layout = Arc::new(FeatureLayout::synthetic8());
        let track = AgentTrack::standing(5, 1.0, 2.0, 0.4);
        let seq = render_track(&layout, &track, "x").unwrap();
        assert_eq!(seq.dim(), 94);
        let c = layout.contact_slice().unwrap();
        assert!(seq.frames.iter_rows().all(|r| r[c.range()].iter().all(|&v| v == 1.0)));
    }
}
