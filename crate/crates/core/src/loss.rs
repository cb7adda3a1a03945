//! Training objective: confidence-weighted pointmap regression plus pose
//! and photometric terms.

use serde::{Deserialize, Serialize};

use crate::decode_heads::{CameraPose, HeadOutput};
use crate::error::{Error, Result};
use crate::illumination::blend_confidence;
use crate::numerics::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the `-log C` bonus.
    pub reg: f64,
    pub pose: f64,
    pub rgb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reg: 0.2,
            pose: 1.0,
            rgb: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.reg, self.pose, self.rgb].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be >= 0: {self:?}")))
        }
    }
}

/// Ground truth for one frame.
#[derive(Clone, Debug)]
pub struct FrameTarget<S> {
    /// `[3, H, W]` in the reference frame.
    pub pointmap: Tensor<S>,
    /// Pixels with a surface hit.
    pub valid: Vec<bool>,
    pub pose: CameraPose,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<S>,
}

/// `[H, W]` Euclidean norm over the leading channel axis.
fn channel_norm<S: Scalar>(g: &Graph<'_, S>, x: Var) -> Result<Var> {
    Ok(g.sqrt(g.sum_axis(g.square(x), 0)?))
}

/// Mean over valid pixels of `C ||X / s_X - Y / s_Y|| - reg log C`, with
/// `s` the mean point norm over valid pixels.
pub fn loss_conf<S: Scalar>(
    g: &Graph<'_, S>,
    pred: Var,
    gt: &Tensor<S>,
    valid: &[bool],
    confidence: Var,
    reg: f64,
) -> Result<Var> {
    let (ps, cs) = (g.shape(pred), g.shape(confidence));
    if ps != gt.shape() || ps.len() != 3 || ps[0] != 3 || cs != ps[1..] || valid.len() != cs[0] * cs[1] {
        return Err(Error::dim("loss_conf", &ps, gt.shape()));
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::Degenerate("ground-truth pointmap has no valid pixel".into()));
    }
    let inv_count = S::one() / S::lit(count as f64);
    let mask = g.constant(Tensor::from_vec(
        &cs,
        valid.iter().map(|&v| if v { S::one() } else { S::zero() }).collect(),
    )?);
    let masked_mean = |x: Var| -> Result<Var> { Ok(g.scale(g.sum(g.mul(x, mask)?), inv_count)) };

    let gt_v = g.constant(gt.clone());
    let s_gt = masked_mean(channel_norm(g, gt_v)?)?;
    let s_pred = masked_mean(channel_norm(g, pred)?)?;
    if !(g.value(s_gt).item() > S::zero()) {
        return Err(Error::Degenerate("ground-truth pointmap has zero scale".into()));
    }
    let diff = g.sub(g.div_bcast(pred, s_pred)?, g.div_bcast(gt_v, s_gt)?)?;
    let err = channel_norm(g, diff)?;
    let term = g.sub(g.mul(confidence, err)?, g.scale(g.ln(confidence), S::lit(reg)))?;
    masked_mean(term)
}

/// `||t - t_gt|| + min(||q - q_gt||, ||q + q_gt||)`.
pub fn loss_pose<S: Scalar>(g: &Graph<'_, S>, rotation: Var, translation: Var, gt: &CameraPose) -> Result<Var> {
    let q_gt = g.constant(Tensor::from_f64(&[4], &gt.q)?);
    let t_gt = g.constant(Tensor::from_f64(&[3], &gt.t)?);
    let norm = |x: Var| g.sqrt(g.sum(g.square(x)));
    let dt = norm(g.sub(translation, t_gt)?);
    let minus = norm(g.sub(rotation, q_gt)?);
    let plus = norm(g.add(rotation, q_gt)?);
    let dq = if g.value(plus).item() < g.value(minus).item() { plus } else { minus };
    g.add(dt, dq)
}

pub fn loss_rgb<S: Scalar>(g: &Graph<'_, S>, rgb: Var, image: Var) -> Result<Var> {
    Ok(g.mean(g.square(g.sub(rgb, image)?)))
}

/// Graph handles of each term.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub conf: Var,
    pub pose: Var,
    pub rgb: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub conf: f64,
    pub pose: f64,
    pub rgb: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn report<S: Scalar>(&self, g: &Graph<'_, S>) -> LossReport {
        let v = |x: Var| g.value(x).item().as_f64();
        LossReport {
            conf: v(self.conf),
            pose: v(self.pose),
            rgb: v(self.rgb),
            total: v(self.total),
        }
    }
}

/// `L_conf(X, blend(C, L, alpha)) + w_pose L_pose + w_rgb L_rgb`. `light`
/// is expected to be a constant (frozen illumination model).
pub fn total_loss<S: Scalar>(
    g: &Graph<'_, S>,
    out: &HeadOutput,
    target: &FrameTarget<S>,
    light: Var,
    alpha_raw: Var,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let blended = blend_confidence(g, out.confidence, light, alpha_raw)?;
    let conf = loss_conf(g, out.pointmap, &target.pointmap, &target.valid, blended, weights.reg)?;
    let pose = loss_pose(g, out.rotation, out.translation, &target.pose)?;
    let rgb = loss_rgb(g, out.rgb, g.constant(target.image.clone()))?;
    let total = g.add(conf, g.scale(pose, S::lit(weights.pose)))?;
    let total = g.add(total, g.scale(rgb, S::lit(weights.rgb)))?;
    Ok(LossTerms { conf, pose, rgb, total })
}
