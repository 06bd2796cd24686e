//! Frame matrices, windows, foot contacts and feature normalization.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::FeatureLayout;
use crate::Vec3;

/// Row-major `rows × dim` matrix of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBlock {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FrameBlock {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::shape(format!("{rows}x{dim}"), format!("{} values", data.len())));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::shape(format!("rows of width {dim}"), format!("row of width {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Copy of rows `start..start + len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> FrameBlock {
        FrameBlock {
            rows: len,
            dim: self.dim,
            data: self.data[start * self.dim..(start + len) * self.dim].to_vec(),
        }
    }

    /// Last `len` rows.
    pub fn tail(&self, len: usize) -> FrameBlock {
        self.slice_rows(self.rows - len, len)
    }

    pub fn concat(&self, other: &FrameBlock) -> Result<FrameBlock> {
        if self.dim != other.dim {
            return Err(Error::shape(format!("width {}", self.dim), format!("width {}", other.dim)));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(FrameBlock {
            rows: self.rows + other.rows,
            dim: self.dim,
            data,
        })
    }

    /// Prepends copies of the first row until the block has `rows` rows.
    pub fn pad_head(&self, rows: usize) -> FrameBlock {
        if self.rows >= rows || self.rows == 0 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(rows * self.dim);
        for _ in 0..rows - self.rows {
            data.extend_from_slice(self.row(0));
        }
        data.extend_from_slice(&self.data);
        FrameBlock {
            rows,
            dim: self.dim,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One agent's motion with its declared layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: FrameBlock,
    pub layout: Arc<FeatureLayout>,
    pub agent_id: String,
}

impl MotionSequence {
    pub fn new(layout: Arc<FeatureLayout>, frames: FrameBlock, agent_id: impl Into<String>) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::InvalidArgument("a motion sequence needs at least one frame".into()));
        }
        if frames.dim() != layout.dim() {
            return Err(Error::LayoutMismatch(format!(
                "layout '{}' has dimension {}, frames have {}",
                layout.name,
                layout.dim(),
                frames.dim()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::InvalidArgument("non-finite frame values".into()));
        }
        if let Some(c) = layout.contact_slice() {
            for row in frames.iter_rows() {
                if row[c.range()].iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidArgument("contact channels must be 0 or 1".into()));
                }
            }
        }
        Ok(Self {
            frames,
            layout,
            agent_id: agent_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.dim()
    }

    /// Joint positions of every frame.
    pub fn joint_positions(&self) -> Vec<Vec<Vec3>> {
        self.frames.iter_rows().map(|r| self.layout.joint_positions(r)).collect()
    }
}

/// A history/future training window cut from a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub history: FrameBlock,
    pub future: FrameBlock,
    /// First frame of the history within the (padded) source sequence.
    pub start: usize,
    pub window_index: usize,
    pub total_frames: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub history: usize,
    pub future: usize,
    pub stride: usize,
    /// Repeat the first frame at the head when the sequence is shorter than one window.
    pub pad: bool,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            history: 4,
            future: 16,
            stride: 16,
            pad: true,
        }
    }
}

/// Number of windows for a sequence of `frames` frames.
pub fn window_count(frames: usize, history: usize, future: usize, stride: usize) -> usize {
    if frames < history + future || stride == 0 {
        0
    } else {
        (frames - history - future) / stride + 1
    }
}

/// Cuts overlapping `(history, future)` windows advancing by `stride` frames.
///
/// `text_at(start)` supplies the text for the window whose future starts at
/// frame `start + history`.
pub fn extract_windows(
    frames: &FrameBlock,
    spec: WindowSpec,
    text_at: impl Fn(usize) -> String,
) -> Result<Vec<WindowSample>> {
    let WindowSpec { history, future, stride, pad } = spec;
    if history == 0 || future == 0 || stride == 0 {
        return Err(Error::InvalidArgument("history, future and stride must be positive".into()));
    }
    let total = frames.rows();
    let need = history + future;
    let source = if total < need {
        if !pad || total == 0 {
            return Err(Error::InvalidArgument(format!(
                "sequence of {total} frames is shorter than one window ({need})"
            )));
        }
        frames.pad_head(need)
    } else {
        frames.clone()
    };
    let count = window_count(source.rows(), history, future, stride);
    Ok((0..count)
        .map(|i| {
            let start = i * stride;
            WindowSample {
                history: source.slice_rows(start, history),
                future: source.slice_rows(start + history, future),
                start,
                window_index: i,
                total_frames: total,
                text: text_at(start + history),
            }
        })
        .collect())
}

/// Default contact speed threshold in meters per frame interval.
pub const CONTACT_SPEED_THRESHOLD: f64 = 0.05;

/// Per-joint speed by forward difference; the last frame reuses the previous interval.
fn joint_speed(joints: &[Vec<Vec3>], t: usize, j: usize) -> f64 {
    let n = joints.len();
    if n < 2 {
        return 0.0;
    }
    let (a, b) = if t + 1 < n { (t, t + 1) } else { (n - 2, n - 1) };
    (joints[b][j] - joints[a][j]).norm()
}

/// Binary contact labels (left heel, left toe, right heel, right toe) for every frame.
pub fn foot_contacts(layout: &FeatureLayout, joints: &[Vec<Vec3>], threshold: f64) -> Result<Vec<[f64; 4]>> {
    let feet = layout
        .contact_joints
        .ok_or_else(|| Error::Config(format!("layout '{}' exposes no foot joints", layout.name)))?;
    Ok((0..joints.len())
        .map(|t| {
            let mut c = [0.0; 4];
            for (k, &j) in feet.iter().enumerate() {
                c[k] = if joint_speed(joints, t, j) < threshold { 1.0 } else { 0.0 };
            }
            c
        })
        .collect())
}

/// Per-channel z-score normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        for row in rows {
            if count == 0 {
                mean = vec![0.0; row.len()];
                m2 = vec![0.0; row.len()];
            } else if row.len() != mean.len() {
                return Err(Error::shape(format!("rows of width {}", mean.len()), row.len()));
            }
            count += 1;
            // Welford update
            for (i, &x) in row.iter().enumerate() {
                let delta = x - mean[i];
                mean[i] += delta / count as f64;
                m2[i] += delta * (x - mean[i]);
            }
        }
        if count == 0 {
            return Err(Error::InsufficientSamples { needed: 1, found: 0 });
        }
        let std = m2
            .iter()
            .map(|&s| (s / count as f64).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
    }

    pub fn invert_row(&self, row: &mut [f64]) {
        for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = *x * s + m;
        }
    }

    pub fn apply(&self, block: &FrameBlock) -> FrameBlock {
        let mut out = block.clone();
        for t in 0..out.rows() {
            self.apply_row(out.row_mut(t));
        }
        out
    }

    pub fn invert(&self, block: &FrameBlock) -> FrameBlock {
        let mut out = block.clone();
        for t in 0..out.rows() {
            self.invert_row(out.row_mut(t));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn ramp(rows: usize, dim: usize) -> FrameBlock {
        FrameBlock::new(rows, dim, (0..rows * dim).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn single_window_when_exact_length() {
        let w = extract_windows(&ramp(20, 3), WindowSpec::default(), |_| String::new()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].history.rows(), 4);
        assert_eq!(w[0].future.rows(), 16);
    }

    #[test]
    fn second_window_history_indices() {
        let f = ramp(36, 2);
        let w = extract_windows(&f, WindowSpec::default(), |_| String::new()).unwrap();
        assert_eq!(w.len(), 2);
        // frames 16..19
        assert_eq!(w[1].history, f.slice_rows(16, 4));
        assert_eq!(w[1].history.row(0)[0], 32.0);
        assert_eq!(w[1].future, f.slice_rows(20, 16));
    }

    #[test]
    fn short_sequence_without_padding_errors() {
        let spec = WindowSpec { pad: false, ..WindowSpec::default() };
        assert!(extract_windows(&ramp(19, 2), spec, |_| String::new()).is_err());
    }

    #[test]
    fn short_sequence_is_head_padded() {
        let f = ramp(5, 2);
        let w = extract_windows(&f, WindowSpec::default(), |_| String::new()).unwrap();
        assert_eq!(w.len(), 1);
        for t in 0..15 {
            assert_eq!(w[0].history.concat(&w[0].future).unwrap().row(t), f.row(0));
        }
        assert_eq!(w[0].future.tail(5), f);
        assert_eq!(w[0].total_frames, 5);
    }

    #[test]
    fn contacts_stationary_and_moving() {
        let layout = FeatureLayout::synthetic8();
        let still: Vec<Vec<Vec3>> = (0..10).map(|_| vec![Vec3::new(0.1, 0.0, 0.2); 8]).collect();
        let c = foot_contacts(&layout, &still, CONTACT_SPEED_THRESHOLD).unwrap();
        assert!(c.iter().all(|f| f.iter().all(|&v| v == 1.0)));
        let moving: Vec<Vec<Vec3>> = (0..10)
            .map(|t| vec![Vec3::new(0.1 * t as f64, 0.0, 0.0); 8])
            .collect();
        let c = foot_contacts(&layout, &moving, CONTACT_SPEED_THRESHOLD).unwrap();
        assert!(c.iter().all(|f| f.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn contacts_need_foot_joints() {
        let layout = crate::make_layout(crate::LayoutKind::InterxStyle, 10).unwrap();
        assert!(matches!(foot_contacts(&layout, &[], 0.05), Err(Error::Config(_))));
    }

    #[test]
    fn normalizer_constant_channel() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![3.0, i as f64]).collect();
        let n = Normalizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        assert_eq!(n.std[0], Normalizer::STD_FLOOR);
        let mut r = rows[7].clone();
        n.apply_row(&mut r);
        assert_eq!(r[0], 0.0);
    }

    #[test]
    fn normalizer_fits_standard_normal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<Vec<f64>> = (0..10_000)
            .map(|_| vec![StandardNormal.sample(&mut rng)])
            .collect();
        let n = Normalizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        assert!(n.mean[0].abs() < 0.05);
        assert!((n.std[0] - 1.0).abs() < 0.05);
    }

    #[test]
    fn normalizer_round_trip_and_empty() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.37 - 2.0, (i * i) as f64]).collect();
        let n = Normalizer::fit(rows.iter().map(|r| r.as_slice())).unwrap();
        for r in &rows {
            let mut x = r.clone();
            n.apply_row(&mut x);
            n.invert_row(&mut x);
            for (a, b) in x.iter().zip(r) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        assert!(Normalizer::fit(std::iter::empty::<&[f64]>()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn window_count_matches_index_arithmetic(t in 1usize..200, h in 1usize..8, k in 1usize..24, stride in 1usize..30) {
            let spec = WindowSpec { history: h, future: k, stride, pad: false };
            let f = ramp(t, 1);
            match extract_windows(&f, spec, |_| String::new()) {
                Ok(w) => {
                    proptest::prop_assert!(t >= h + k);
                    proptest::prop_assert_eq!(w.len(), (t - h - k) / stride + 1);
                    for (i, win) in w.iter().enumerate() {
                        proptest::prop_assert_eq!(&win.history, &f.slice_rows(i * stride, h));
                        proptest::prop_assert_eq!(&win.future, &f.slice_rows(i * stride + h, k));
                    }
                }
                Err(_) => proptest::prop_assert!(t < h + k),
            }
        }
    }
}
