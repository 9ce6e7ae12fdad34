//! Training losses: soft Dice, binary cross-entropy, and their weighted sum.
//!
//! All losses reduce by the batch mean and return rank-0 tensors so they can
//! be differentiated by candle's autograd.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing added to the numerator and denominator of the soft Dice.
pub const DICE_SMOOTHING: f64 = 1e-6;
/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Weights of the two cross-entropy terms relative to the Dice term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_seg: f64,
    pub w_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_seg: 1.0,
            w_cls: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w_seg", self.w_seg), ("w_cls", self.w_cls)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `1 - (2Σxg + s)/(Σx + Σg + s)` per batch item, averaged over the batch.
///
/// The first dimension is the batch; any remaining dimensions are summed.
pub fn dice_loss(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    same_shape(x, g, "dice_loss")?;
    if x.rank() == 0 {
        return Err(Error::Shape("dice_loss needs a batch dimension".into()));
    }
    let g = g.to_dtype(x.dtype())?;
    let (x, g) = if x.rank() == 1 {
        (x.unsqueeze(1)?, g.unsqueeze(1)?)
    } else {
        (x.flatten_from(1)?, g.flatten_from(1)?)
    };
    let inter = (&x * &g)?.sum(1)?;
    let num = inter.affine(2.0, DICE_SMOOTHING)?;
    let den = (x.sum(1)? + g.sum(1)?)?.affine(1.0, DICE_SMOOTHING)?;
    let ratio = (num / den)?;
    Ok(ratio.affine(-1.0, 1.0)?.mean_all()?)
}

/// Mean of `-[t ln p + (1-t) ln(1-p)]` with `p` clamped away from 0 and 1.
pub fn bce_loss(p: &Tensor, t: &Tensor) -> Result<Tensor> {
    same_shape(p, t, "bce_loss")?;
    let t = t.to_dtype(p.dtype())?;
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = (&t * p.log()?)?;
    let neg = (t.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

/// A total loss together with its components.
#[derive(Debug, Clone)]
pub struct LossTerms {
    /// Differentiable weighted sum.
    pub total: Tensor,
    pub dice: Tensor,
    pub bce_seg: Tensor,
    pub bce_cls: Tensor,
    pub weights: LossWeights,
}

/// Scalar values of [`LossTerms`], as written to training logs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub dice: f64,
    pub bce_seg: f64,
    pub bce_cls: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl LossTerms {
    /// Component values; `total` is recombined from them in `f64` so the
    /// logged row is internally consistent regardless of tensor precision.
    pub fn values(&self) -> Result<LossValues> {
        let dice = scalar(&self.dice)?;
        let bce_seg = scalar(&self.bce_seg)?;
        let bce_cls = scalar(&self.bce_cls)?;
        Ok(LossValues {
            total: dice + self.weights.w_seg * bce_seg + self.weights.w_cls * bce_cls,
            dice,
            bce_seg,
            bce_cls,
        })
    }
}

/// `dice(x,g) + w_seg·bce(x,g) + w_cls·bce(c,y)`.
///
/// `x`, `g` are `N×…` masks; `c`, `y` are length-`N` classifier outputs and labels.
pub fn total_loss(x: &Tensor, g: &Tensor, c: &Tensor, y: &Tensor, w: LossWeights) -> Result<LossTerms> {
    w.validate()?;
    let dice = dice_loss(x, g)?;
    let bce_seg = bce_loss(x, g)?;
    let bce_cls = bce_loss(c, y)?;
    let total = ((&dice + bce_seg.affine(w.w_seg, 0.0)?)? + bce_cls.affine(w.w_cls, 0.0)?)?;
    Ok(LossTerms {
        total,
        dice,
        bce_seg,
        bce_cls,
        weights: w,
    })
}
