//! Rotation representations and the canonicalization algebra.
//!
//! The vertical axis is `+y`. Canonical frames face `+z` with the root on the
//! ground-plane origin, so canonical rotations are pure yaw and gravity is
//! preserved.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{ChannelRole, FacingRule, FeatureLayout};
use crate::motion::{FrameBlock, MotionSequence};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Tolerance for accepting a matrix as a proper rotation.
pub const ORTHONORMAL_TOL: f64 = 1e-6;
const HEADING_EPS: f64 = 1e-6;

/// First two columns of a rotation matrix, column-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub fn from_slice(values: &[f64]) -> Self {
        let mut v = [0.0; 6];
        v.copy_from_slice(&values[..6]);
        Rot6D(v)
    }
}

/// A proper rotation (orthonormal, det = +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix3(Matrix3<f64>);

impl RotationMatrix3 {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let error = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !m.iter().all(|v| v.is_finite()) || error > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::NotOrthonormal { error, det });
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Rotation about `+y` by `angle` radians; maps `+z` to `(sin a, 0, cos a)`.
    pub fn from_yaw(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Yaw angle of the rotated `+z` axis.
    pub fn yaw(&self) -> f64 {
        let f = self.0.column(2);
        f[0].atan2(f[2])
    }

    /// Geodesic angle in radians between two rotations.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let c = ((self.0.transpose() * other.0).trace() - 1.0) / 2.0;
        c.clamp(-1.0, 1.0).acos()
    }

    pub fn to_rot6d(&self) -> Rot6D {
        let m = &self.0;
        Rot6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
    }
}

impl std::ops::Mul for RotationMatrix3 {
    type Output = RotationMatrix3;
    fn mul(self, rhs: Self) -> Self {
        RotationMatrix3(self.0 * rhs.0)
    }
}

/// Gram–Schmidt orthonormalization of the two stored columns.
pub fn rot6d_to_matrix(r: &Rot6D) -> Result<RotationMatrix3> {
    let v = &r.0;
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::DegenerateRotation("non-finite 6D values".into()));
    }
    let a1 = Vec3::new(v[0], v[1], v[2]);
    let a2 = Vec3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if n1 < 1e-12 {
        return Err(Error::DegenerateRotation("first column is zero".into()));
    }
    if a1.cross(&a2).norm() <= 1e-9 * n1 * a2.norm().max(1e-300) {
        return Err(Error::DegenerateRotation("columns are parallel".into()));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let b2 = u2 / u2.norm();
    let b3 = b1.cross(&b2);
    Ok(RotationMatrix3(Matrix3::from_columns(&[b1, b2, b3])))
}

pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<Rot6D> {
    Ok(RotationMatrix3::new(*m)?.to_rot6d())
}

/// Yaw rotation plus translation mapping world coordinates into an agent's
/// canonical frame: `x ↦ R x + T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanonicalTransform {
    pub rotation: RotationMatrix3,
    pub translation: Vec3,
}

impl CanonicalTransform {
    pub fn identity() -> Self {
        Self {
            rotation: RotationMatrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_yaw(angle: f64, translation: Vec3) -> Self {
        Self {
            rotation: RotationMatrix3::from_yaw(angle),
            translation,
        }
    }

    /// Validates that `rotation` keeps the vertical axis fixed.
    pub fn new(rotation: RotationMatrix3, translation: Vec3) -> Result<Self> {
        let up = rotation.rotate(&Vec3::y());
        if (up - Vec3::y()).norm() > ORTHONORMAL_TOL {
            return Err(Error::InvalidArgument("canonical rotations must be yaw-only".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn is_identity(&self) -> bool {
        *self.rotation.matrix() == Matrix3::identity() && self.translation == Vec3::zeros()
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation.rotate(v)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -rt.rotate(&self.translation),
        }
    }

    /// `self ∘ inner`: applies `inner` first.
    pub fn compose(&self, inner: &Self) -> Self {
        Self {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation.rotate(&inner.translation) + self.translation,
        }
    }
}

pub fn invert_transform(x: &CanonicalTransform) -> CanonicalTransform {
    x.inverse()
}

pub fn compose_transforms(outer: &CanonicalTransform, inner: &CanonicalTransform) -> CanonicalTransform {
    outer.compose(inner)
}

/// Transform taking agent `j`'s canonical coordinates into agent `i`'s:
/// `R = R_i R_jᵀ`, `T = T_i − R T_j`.
pub fn relative_transform(xi: &CanonicalTransform, xj: &CanonicalTransform) -> CanonicalTransform {
    let rotation = xi.rotation * xj.rotation.transpose();
    let translation = xi.translation - rotation.rotate(&xj.translation);
    CanonicalTransform { rotation, translation }
}

/// Applies a rigid transform to a frame block according to the layout's channel roles.
pub fn apply_transform_frames(
    frames: &FrameBlock,
    layout: &FeatureLayout,
    x: &CanonicalTransform,
) -> Result<FrameBlock> {
    layout.validate()?;
    if frames.dim() != layout.dim() {
        return Err(Error::shape(layout.dim(), frames.dim()));
    }
    if x.is_identity() {
        return Ok(frames.clone());
    }
    let mut out = frames.clone();
    for t in 0..out.rows() {
        let row = out.row_mut(t);
        for s in &layout.slices {
            match s.role {
                ChannelRole::Position | ChannelRole::Velocity => {
                    for c in row[s.range()].chunks_exact_mut(3) {
                        let v = Vec3::new(c[0], c[1], c[2]);
                        let w = if s.role == ChannelRole::Position {
                            x.apply_point(&v)
                        } else {
                            x.apply_vector(&v)
                        };
                        c.copy_from_slice(w.as_slice());
                    }
                }
                ChannelRole::RootRotation6d => {
                    for c in row[s.range()].chunks_exact_mut(6) {
                        let a = x.apply_vector(&Vec3::new(c[0], c[1], c[2]));
                        let b = x.apply_vector(&Vec3::new(c[3], c[4], c[5]));
                        c[..3].copy_from_slice(a.as_slice());
                        c[3..].copy_from_slice(b.as_slice());
                    }
                }
                ChannelRole::JointRotation6d | ChannelRole::Contact => {}
            }
        }
    }
    Ok(out)
}

pub fn apply_transform(seq: &MotionSequence, x: &CanonicalTransform) -> Result<MotionSequence> {
    Ok(MotionSequence {
        frames: apply_transform_frames(&seq.frames, &seq.layout, x)?,
        layout: seq.layout.clone(),
        agent_id: seq.agent_id.clone(),
    })
}

/// Ground-plane forward direction of a frame, or `None` when the heading is vertical.
pub fn facing_direction(layout: &FeatureLayout, frame: &[f64]) -> Result<Option<Vec3>> {
    let forward = match &layout.facing {
        FacingRule::RootRotation => {
            let offset = layout
                .root_rotation_offset()
                .ok_or_else(|| Error::Config("facing rule needs a root rotation channel".into()))?;
            let r = rot6d_to_matrix(&Rot6D::from_slice(&frame[offset..offset + 6]))?;
            r.matrix().column(2).into_owned()
        }
        FacingRule::Across { pairs } => {
            let joints = layout.joint_positions(frame);
            let across = pairs
                .iter()
                .fold(Vec3::zeros(), |acc, &(l, r)| acc + (joints[l] - joints[r]));
            across.cross(&Vec3::y())
        }
        FacingRule::None => {
            return Err(Error::Config(format!("layout '{}' declares no facing rule", layout.name)))
        }
    };
    let norm = forward.norm();
    if !(norm > 0.0) {
        return Ok(None);
    }
    let ground = Vec3::new(forward[0], 0.0, forward[2]);
    if ground.norm() < HEADING_EPS * norm {
        return Ok(None);
    }
    Ok(Some(ground / ground.norm()))
}

/// Heading at `anchor`, walking back to earlier frames while it is degenerate.
fn heading_at(frames: &FrameBlock, layout: &FeatureLayout, anchor: usize) -> Result<Vec3> {
    for t in (0..=anchor).rev() {
        if let Some(f) = facing_direction(layout, frames.row(t))? {
            return Ok(f);
        }
    }
    Err(Error::DegenerateHeading { frame: anchor })
}

/// Transform that puts the root of frame `anchor` on the ground-plane origin facing `+z`.
pub fn canonical_transform_at(
    frames: &FrameBlock,
    layout: &FeatureLayout,
    anchor: usize,
) -> Result<CanonicalTransform> {
    if anchor >= frames.rows() {
        return Err(Error::InvalidArgument(format!(
            "anchor {anchor} outside a sequence of {} frames",
            frames.rows()
        )));
    }
    if frames.dim() != layout.dim() {
        return Err(Error::shape(layout.dim(), frames.dim()));
    }
    let f = heading_at(frames, layout, anchor)?;
    let rotation = RotationMatrix3::from_yaw(-f[0].atan2(f[2]));
    let root = rotation.rotate(&layout.root_position(frames.row(anchor)));
    Ok(CanonicalTransform {
        rotation,
        translation: Vec3::new(-root[0], 0.0, -root[2]),
    })
}

pub fn canonicalize_frames(
    frames: &FrameBlock,
    layout: &FeatureLayout,
    anchor: usize,
) -> Result<(FrameBlock, CanonicalTransform)> {
    let x = canonical_transform_at(frames, layout, anchor)?;
    Ok((apply_transform_frames(frames, layout, &x)?, x))
}

pub fn canonicalize(seq: &MotionSequence, anchor: usize) -> Result<(MotionSequence, CanonicalTransform)> {
    let (frames, x) = canonicalize_frames(&seq.frames, &seq.layout, anchor)?;
    Ok((
        MotionSequence {
            frames,
            layout: seq.layout.clone(),
            agent_id: seq.agent_id.clone(),
        },
        x,
    ))
}
