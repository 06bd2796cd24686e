//! Denoising loss, interaction regularizers and the history schedule.
//!
//! Joint tensors are `[B, F, J, 3]` positions of both people in one common
//! frame. Regularizers sum over cross-person joint pairs and average over
//! frames, giving one value per batch row.

use candle_core::{Tensor, D};

use crate::error::{ModelError, Result};
use crate::train::TrainingConfig;

const DIST_EPS: f64 = 1e-12;

/// `[B, F, J, J]` distances between joints of `a` and joints of `b`.
pub fn cross_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (bs, f, ja, _) = a.dims4()?;
    let jb = b.dim(2)?;
    let diff = a
        .unsqueeze(3)?
        .broadcast_as((bs, f, ja, jb, 3))?
        .sub(&b.unsqueeze(2)?.broadcast_as((bs, f, ja, jb, 3))?)?;
    Ok(diff.sqr()?.sum(D::Minus1)?.affine(1.0, DIST_EPS)?.sqrt()?)
}

fn check4(ts: [&Tensor; 4]) -> Result<()> {
    let dims = ts[0].dims();
    if dims.len() != 4 || dims[3] != 3 || ts.iter().any(|t| t.dims() != dims) {
        return Err(ModelError::shape(
            format!("four [B, F, J, 3] tensors like {dims:?}"),
            format!("{:?}", ts.iter().map(|t| t.dims().to_vec()).collect::<Vec<_>>()),
        ));
    }
    Ok(())
}

fn masked_pair_loss(gt: &Tensor, pred: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let sq = gt.sub(pred)?.sqr()?.mul(mask)?;
    Ok(sq.sum(D::Minus1)?.sum(D::Minus1)?.mean(D::Minus1)?)
}

/// Affinity loss: distance-matrix error on pairs whose ground-truth distance is below `d1`.
pub fn loss_aff(gt_a: &Tensor, gt_b: &Tensor, pred_a: &Tensor, pred_b: &Tensor, d1: f64) -> Result<Tensor> {
    check4([gt_a, gt_b, pred_a, pred_b])?;
    let gt = cross_distances(gt_a, gt_b)?;
    let pred = cross_distances(pred_a, pred_b)?;
    let mask = gt.lt(d1)?.to_dtype(gt.dtype())?;
    masked_pair_loss(&gt, &pred, &mask)
}

/// Distance loss: distance-matrix error on pairs whose predicted distance is below `d2`.
pub fn loss_dist(gt_a: &Tensor, gt_b: &Tensor, pred_a: &Tensor, pred_b: &Tensor, d2: f64) -> Result<Tensor> {
    check4([gt_a, gt_b, pred_a, pred_b])?;
    let gt = cross_distances(gt_a, gt_b)?;
    let pred = cross_distances(pred_a, pred_b)?;
    let mask = pred.lt(d2)?.to_dtype(pred.dtype())?;
    masked_pair_loss(&gt, &pred, &mask)
}

/// Ground-plane facing `[B, F, 2]` as unnormalized `(x, z)` from hip/shoulder
/// pairs: `forward = Σ(left − right) × up`.
pub fn facing_from_joints(joints: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(ModelError::Config("facing needs at least one joint pair".into()));
    }
    let mut across: Option<Tensor> = None;
    for &(l, r) in pairs {
        let d = joints.narrow(2, l, 1)?.sub(&joints.narrow(2, r, 1)?)?.squeeze(2)?;
        across = Some(match across {
            Some(a) => a.add(&d)?,
            None => d,
        });
    }
    let a = across.expect("non-empty pairs");
    let ax = a.narrow(D::Minus1, 0, 1)?;
    let az = a.narrow(D::Minus1, 2, 1)?;
    Ok(Tensor::cat(&[az.neg()?, ax], D::Minus1)?)
}

/// Ground-plane facing `[B, F, 2]` from a root 6D rotation `[B, F, 6]`:
/// the `(x, z)` part of `c1 × c2`, the rotated `+z` axis.
pub fn facing_from_rot6d(r6: &Tensor) -> Result<Tensor> {
    let c = |i| r6.narrow(D::Minus1, i, 1);
    let (ax, ay, az, bx, by, bz) = (c(0)?, c(1)?, c(2)?, c(3)?, c(4)?, c(5)?);
    let fx = ay.mul(&bz)?.sub(&az.mul(&by)?)?;
    let fz = ax.mul(&by)?.sub(&ay.mul(&bx)?)?;
    Ok(Tensor::cat(&[fx, fz], D::Minus1)?)
}

/// `(cos δ, sin δ)` of the yaw from A's facing to B's facing, `[B, F, 2]`.
fn relative_yaw(fa: &Tensor, fb: &Tensor) -> Result<Tensor> {
    let unit = |f: &Tensor| -> Result<Tensor> {
        let n = f.sqr()?.sum_keepdim(D::Minus1)?.affine(1.0, DIST_EPS)?.sqrt()?;
        Ok(f.broadcast_div(&n)?)
    };
    let (a, b) = (unit(fa)?, unit(fb)?);
    let (ax, az) = (a.narrow(D::Minus1, 0, 1)?, a.narrow(D::Minus1, 1, 1)?);
    let (bx, bz) = (b.narrow(D::Minus1, 0, 1)?, b.narrow(D::Minus1, 1, 1)?);
    let cos = ax.mul(&bx)?.add(&az.mul(&bz)?)?;
    let sin = bx.mul(&az)?.sub(&bz.mul(&ax)?)?;
    Ok(Tensor::cat(&[cos, sin], D::Minus1)?)
}

/// 6D of a yaw rotation from `(cos, sin)`: columns `(cos, 0, −sin)` and `(0, 1, 0)`.
fn yaw_rot6d(cs: &Tensor) -> Result<Tensor> {
    let cos = cs.narrow(D::Minus1, 0, 1)?;
    let sin = cs.narrow(D::Minus1, 1, 1)?;
    let zero = cos.zeros_like()?;
    let one = cos.ones_like()?;
    Ok(Tensor::cat(&[cos, zero.clone(), sin.neg()?, zero.clone(), one, zero], D::Minus1)?)
}

/// Orientation loss on facing tensors `[B, F, 2]`: squared 6D error of the
/// relative root rotation, averaged over frames.
pub fn loss_ori(gt_a: &Tensor, gt_b: &Tensor, pred_a: &Tensor, pred_b: &Tensor) -> Result<Tensor> {
    let dims = gt_a.dims();
    if dims.len() != 3 || dims[2] != 2 || [gt_b, pred_a, pred_b].iter().any(|t| t.dims() != dims) {
        return Err(ModelError::shape("four [B, F, 2] facing tensors", format!("{dims:?}")));
    }
    let gt = yaw_rot6d(&relative_yaw(gt_a, gt_b)?)?;
    let pred = yaw_rot6d(&relative_yaw(pred_a, pred_b)?)?;
    Ok(gt.sub(&pred)?.sqr()?.sum(D::Minus1)?.mean(D::Minus1)?)
}

/// Mean squared error between predicted and true clean latents.
pub fn diffusion_loss(pred: &Tensor, z0: &Tensor) -> Result<Tensor> {
    if pred.dims() != z0.dims() {
        return Err(ModelError::shape(format!("{:?}", z0.dims()), format!("{:?}", pred.dims())));
    }
    Ok(pred.sub(z0)?.sqr()?.mean_all()?)
}

/// Per-row mean squared error, `[B]`.
pub fn diffusion_loss_rows(pred: &Tensor, z0: &Tensor) -> Result<Tensor> {
    Ok(pred.sub(z0)?.sqr()?.mean(D::Minus1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub diff: f64,
    pub aff: f64,
    pub dist: f64,
    pub ori: f64,
}

/// Whether interaction regularizers apply at diffusion step `t_diff`.
pub fn regularizers_active(t_diff: usize, diffusion_steps: usize, rho: f64) -> bool {
    t_diff as f64 <= rho * diffusion_steps as f64
}

pub fn total_loss(parts: &LossParts, t_diff: usize, diffusion_steps: usize, config: &TrainingConfig) -> f64 {
    if regularizers_active(t_diff, diffusion_steps, config.rho) {
        parts.diff + config.lambda_aff * parts.aff + config.lambda_dist * parts.dist + config.lambda_ori * parts.ori
    } else {
        parts.diff
    }
}

/// Probability of feeding model-predicted history at a given stage and
/// within-stage progress.
pub fn history_schedule(stage: u8, progress: f64) -> Result<f64> {
    match stage {
        1 => Ok(0.0),
        2 => Ok(progress.clamp(0.0, 1.0)),
        3 => Ok(1.0),
        _ => Err(ModelError::InvalidArgument(format!("training stage {stage} is not one of 1, 2, 3"))),
    }
}
