//! Per-frame feature layouts.
//!
//! A layout names every channel of a frame vector with a role so that rigid
//! transforms know which values are points, which are free vectors, which
//! are rotations and which must be left alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutKind {
    /// `[joint positions, joint velocities, root-relative 6D joint rotations, foot contacts]`
    InterhumanStyle,
    /// `[6D joint rotations (joint 0 global), root position, root velocity]`
    InterxStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelRole {
    /// Points: `R x + T`.
    Position,
    /// Free vectors: `R x`.
    Velocity,
    /// Global 6D rotations, left-composed with `R`.
    RootRotation6d,
    /// 6D rotations expressed relative to the root; invariant under rigid motion.
    JointRotation6d,
    /// Binary foot-ground contacts.
    Contact,
}

impl ChannelRole {
    fn unit(self) -> usize {
        match self {
            ChannelRole::Position | ChannelRole::Velocity => 3,
            ChannelRole::RootRotation6d | ChannelRole::JointRotation6d => 6,
            ChannelRole::Contact => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSlice {
    pub name: String,
    pub role: ChannelRole,
    pub offset: usize,
    pub width: usize,
}

impl ChannelSlice {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.width
    }
}

/// How the heading of an agent is read from a frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum FacingRule {
    /// Forward is the root rotation's local +z axis.
    RootRotation,
    /// Forward is `across × up`, with `across` pointing from the right to the
    /// left side of the body (summed over the listed joint pairs).
    Across { pairs: Vec<(usize, usize)> },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub name: String,
    pub kind: LayoutKind,
    pub joint_count: usize,
    pub frame_rate: f64,
    pub slices: Vec<ChannelSlice>,
    pub joint_names: Vec<String>,
    /// Parent of each joint in the position channels; `None` for the root.
    pub parents: Vec<Option<usize>>,
    pub facing: FacingRule,
    /// Left heel, left toe, right heel, right toe (position-channel joint indices).
    pub contact_joints: Option<[usize; 4]>,
}

const SMPL_NAMES: [&str; 22] = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar",
    "right_collar", "head", "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist",
];
const SMPL_PARENTS: [i32; 22] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19,
];

/// Joint names of the default stick figure.
pub const SYNTH8_JOINTS: [&str; 8] = [
    "root", "left_hip", "right_hip", "left_foot", "right_foot", "chest", "left_hand", "right_hand",
];
const SYNTH8_PARENTS: [i32; 8] = [-1, 0, 0, 1, 2, 0, 5, 5];

fn parents_from(raw: &[i32]) -> Vec<Option<usize>> {
    raw.iter().map(|&p| usize::try_from(p).ok()).collect()
}

/// Builds the canonical layout of a representation family.
pub fn make_layout(kind: LayoutKind, joint_count: usize) -> Result<FeatureLayout> {
    if joint_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "a layout needs at least 2 joints, got {joint_count}"
        )));
    }
    let n = joint_count;
    let (joint_names, parents): (Vec<String>, Vec<Option<usize>>) = match n {
        22 => (
            SMPL_NAMES.iter().map(|s| s.to_string()).collect(),
            parents_from(&SMPL_PARENTS),
        ),
        8 => (
            SYNTH8_JOINTS.iter().map(|s| s.to_string()).collect(),
            parents_from(&SYNTH8_PARENTS),
        ),
        _ => (
            (0..n).map(|j| format!("joint{j}")).collect(),
            (0..n).map(|j| if j == 0 { None } else { Some(j - 1) }).collect(),
        ),
    };
    let layout = match kind {
        LayoutKind::InterhumanStyle => {
            let slices = vec![
                slice("positions", ChannelRole::Position, 0, 3 * n),
                slice("velocities", ChannelRole::Velocity, 3 * n, 3 * n),
                slice("rotations", ChannelRole::JointRotation6d, 6 * n, 6 * (n - 1)),
                slice("contacts", ChannelRole::Contact, 6 * n + 6 * (n - 1), 4),
            ];
            let (facing, contact_joints) = match n {
                22 => (
                    FacingRule::Across { pairs: vec![(1, 2), (16, 17)] },
                    Some([7, 10, 8, 11]),
                ),
                8 => (FacingRule::Across { pairs: vec![(1, 2)] }, Some([3, 3, 4, 4])),
                _ if n >= 3 => (FacingRule::Across { pairs: vec![(1, 2)] }, None),
                _ => (FacingRule::None, None),
            };
            FeatureLayout {
                name: if n == 8 {
                    "synthetic-8".to_string()
                } else {
                    format!("interhuman-{n}")
                },
                kind,
                joint_count: n,
                frame_rate: 30.0,
                slices,
                joint_names,
                parents,
                facing,
                contact_joints,
            }
        }
        LayoutKind::InterxStyle => {
            let slices = vec![
                slice("root_rotation", ChannelRole::RootRotation6d, 0, 6),
                slice("rotations", ChannelRole::JointRotation6d, 6, 6 * (n - 1)),
                slice("root_position", ChannelRole::Position, 6 * n, 3),
                slice("root_velocity", ChannelRole::Velocity, 6 * n + 3, 3),
            ];
            FeatureLayout {
                name: format!("interx-{n}"),
                kind,
                joint_count: n,
                frame_rate: 20.0,
                slices,
                joint_names,
                parents,
                facing: FacingRule::RootRotation,
                contact_joints: None,
            }
        }
    };
    layout.validate()?;
    Ok(layout)
}

fn slice(name: &str, role: ChannelRole, offset: usize, width: usize) -> ChannelSlice {
    ChannelSlice {
        name: name.to_string(),
        role,
        offset,
        width,
    }
}

impl FeatureLayout {
    /// The default reduced stick figure (`N_j = 8`, interhuman-style).
    pub fn synthetic8() -> Self {
        make_layout(LayoutKind::InterhumanStyle, 8).expect("static layout is valid")
    }

    /// Resolves a layout by its registered name (`synthetic-8`, `interhuman-22`, `interx-55`, ...).
    pub fn by_name(name: &str) -> Result<Self> {
        let parse = |prefix: &str| -> Option<usize> { name.strip_prefix(prefix)?.parse().ok() };
        if name == "synthetic-8" {
            return Ok(Self::synthetic8());
        }
        if let Some(n) = parse("interhuman-") {
            return make_layout(LayoutKind::InterhumanStyle, n);
        }
        if let Some(n) = parse("interx-") {
            return make_layout(LayoutKind::InterxStyle, n);
        }
        Err(Error::Config(format!("unknown layout '{name}'")))
    }

    /// Frame dimension `d`.
    pub fn dim(&self) -> usize {
        self.slices.iter().map(|s| s.offset + s.width).max().unwrap_or(0)
    }

    /// Checks that slices are well-formed and partition `[0, d)` exactly.
    pub fn validate(&self) -> Result<()> {
        if self.slices.is_empty() {
            return Err(Error::Config(format!(
                "layout '{}' has no channel-role annotations",
                self.name
            )));
        }
        let mut sorted: Vec<&ChannelSlice> = self.slices.iter().collect();
        sorted.sort_by_key(|s| s.offset);
        let mut cursor = 0;
        for s in sorted {
            if s.offset != cursor {
                return Err(Error::Config(format!(
                    "layout '{}': slice '{}' starts at {} but previous slice ends at {}",
                    self.name, s.name, s.offset, cursor
                )));
            }
            if s.width == 0 || s.width % s.role.unit() != 0 {
                return Err(Error::Config(format!(
                    "layout '{}': slice '{}' width {} is not a multiple of {}",
                    self.name,
                    s.name,
                    s.width,
                    s.role.unit()
                )));
            }
            cursor += s.width;
        }
        if self.slices.iter().filter(|s| s.role == ChannelRole::RootRotation6d).map(|s| s.width).sum::<usize>() > 6 {
            return Err(Error::Config("at most one root rotation is allowed".into()));
        }
        let positions = self.position_count();
        if positions == 0 {
            return Err(Error::Config(format!("layout '{}' has no position channels", self.name)));
        }
        if let Some(cj) = self.contact_joints {
            if cj.iter().any(|&j| j >= positions) {
                return Err(Error::Config("contact joint out of range".into()));
            }
        }
        if let FacingRule::Across { pairs } = &self.facing {
            if pairs.iter().any(|&(l, r)| l >= positions || r >= positions) {
                return Err(Error::Config("facing joint out of range".into()));
            }
        }
        Ok(())
    }

    pub fn slices_with(&self, role: ChannelRole) -> impl Iterator<Item = &ChannelSlice> {
        self.slices.iter().filter(move |s| s.role == role)
    }

    pub fn first_slice(&self, role: ChannelRole) -> Option<&ChannelSlice> {
        self.slices_with(role).next()
    }

    /// Number of 3D points carried by the position channels.
    pub fn position_count(&self) -> usize {
        self.slices_with(ChannelRole::Position).map(|s| s.width / 3).sum()
    }

    /// Frame-vector offsets of every position triple, in order.
    pub fn position_offsets(&self) -> Vec<usize> {
        self.slices_with(ChannelRole::Position)
            .flat_map(|s| (0..s.width / 3).map(move |k| s.offset + 3 * k))
            .collect()
    }

    pub fn joint_positions(&self, frame: &[f64]) -> Vec<crate::Vec3> {
        self.position_offsets()
            .into_iter()
            .map(|o| crate::Vec3::new(frame[o], frame[o + 1], frame[o + 2]))
            .collect()
    }

    /// Root position (first position triple).
    pub fn root_position(&self, frame: &[f64]) -> crate::Vec3 {
        let o = self.position_offsets()[0];
        crate::Vec3::new(frame[o], frame[o + 1], frame[o + 2])
    }

    pub fn root_rotation_offset(&self) -> Option<usize> {
        self.first_slice(ChannelRole::RootRotation6d).map(|s| s.offset)
    }

    pub fn contact_slice(&self) -> Option<&ChannelSlice> {
        self.first_slice(ChannelRole::Contact)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interhuman_22_dimension() {
        let l = make_layout(LayoutKind::InterhumanStyle, 22).unwrap();
        assert_eq!(l.dim(), 3 * 22 + 3 * 22 + 6 * 21 + 4);
        assert_eq!(l.dim(), 262);
    }

    #[test]
    fn interx_55_dimension() {
        let l = make_layout(LayoutKind::InterxStyle, 55).unwrap();
        assert_eq!(l.dim(), 6 * 55 + 3 + 3);
        assert_eq!(l.dim(), 336);
        assert_eq!(l.position_count(), 1);
    }

    #[test]
    fn too_few_joints() {
        assert!(make_layout(LayoutKind::InterhumanStyle, 1).is_err());
        assert!(make_layout(LayoutKind::InterxStyle, 0).is_err());
    }

    #[test]
    fn slices_partition_for_many_sizes() {
        for n in 2..70 {
            for kind in [LayoutKind::InterhumanStyle, LayoutKind::InterxStyle] {
                let l = make_layout(kind, n).unwrap();
                let mut covered = vec![0u8; l.dim()];
                for s in &l.slices {
                    for i in s.range() {
                        covered[i] += 1;
                    }
                }
                assert!(covered.iter().all(|&c| c == 1), "{kind:?} {n}");
            }
        }
    }

    #[test]
    fn missing_roles_rejected() {
        let mut l = FeatureLayout::synthetic8();
        l.slices.clear();
        assert!(matches!(l.validate(), Err(Error::Config(_))));
        let mut l = FeatureLayout::synthetic8();
        l.slices[1].offset += 1;
        assert!(l.validate().is_err());
    }

    #[test]
    fn names_resolve() {
        assert_eq!(FeatureLayout::by_name("synthetic-8").unwrap().dim(), 94);
        assert_eq!(FeatureLayout::by_name("interx-55").unwrap().dim(), 336);
        assert!(FeatureLayout::by_name("smplx").is_err());
    }
}
