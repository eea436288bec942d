//! Stack-level soft Dice energy with a per-slice L2 regulariser.
//!
//! For a `k`-slice prediction `p` and label `y`:
//!
//! ```text
//! dice(p, y)  = 1 - (2 Σ p·y + ε) / (Σ p + Σ y + ε)
//! L_v         = dice(p, y)                      whole stack
//! L_s         = sqrt(Σ_m dice(p^m, y^m)^2)      L2 norm over slices
//! L_t         = λ_v L_v + λ_s L_s               averaged over a batch
//! ```
//!
//! The gradient with respect to slice `m` is
//! `λ_v ∂L_v/∂p^m + λ_s ∂dice(p^m, y^m)/∂p^m · dice(p^m, y^m) / (L_s + ε_norm)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Predictions are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before the loss.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_v: f64,
    pub lambda_s: f64,
    pub epsilon_smooth: f64,
    pub epsilon_norm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_v: 0.5, lambda_s: 0.5, epsilon_smooth: 1.0, epsilon_norm: 1e-8 }
    }
}

impl LossWeights {
    pub fn new(lambda_v: f64, lambda_s: f64) -> Result<Self> {
        let w = LossWeights { lambda_v, lambda_s, ..Default::default() };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_v >= 0.0
            && self.lambda_s >= 0.0
            && self.lambda_v + self.lambda_s > 0.0
            && self.epsilon_smooth > 0.0
            && self.epsilon_norm > 0.0
            && [self.lambda_v, self.lambda_s, self.epsilon_smooth, self.epsilon_norm].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid loss weights {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackLossValue {
    pub total: f64,
    pub l_v: f64,
    pub l_s: f64,
    pub per_slice_losses: Vec<f64>,
}

/// `(Σ p·y, Σ p + Σ y)`
fn overlap_and_mass(pred: &[f64], label: &[f64]) -> (f64, f64) {
    pred.iter().zip(label).fold((0.0, 0.0), |(i, s), (&p, &y)| (i + p * y, s + p + y))
}

fn dice_from(inter: f64, mass: f64, eps: f64) -> f64 {
    1.0 - (2.0 * inter + eps) / (mass + eps)
}

/// Adds `scale * ∂dice/∂p` into `out`.
fn add_dice_grad(pred: &[f64], label: &[f64], eps: f64, scale: f64, out: &mut [f64]) {
    let (inter, mass) = overlap_and_mass(pred, label);
    let denom = mass + eps;
    let a = scale * (2.0 * inter + eps) / (denom * denom);
    let b = scale * 2.0 / denom;
    for (o, &y) in out.iter_mut().zip(label) {
        *o += a - b * y;
    }
}

fn check_pair(pred: &Tensor, label: &Tensor) -> Result<(usize, usize)> {
    pred.same_shape(label, "stack loss")?;
    let (k, h, w) = pred.dims3("stack loss")?;
    pred.check_finite("prediction")?;
    if let Some(v) = label.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Invalid(format!("label contains non-binary value {v}")));
    }
    Ok((k, h * w))
}

/// Soft Dice loss of a probability block against a binary label.
pub fn soft_dice_loss(pred: &[f64], label: &[f64], eps: f64) -> Result<f64> {
    if pred.len() != label.len() {
        return Err(Error::shape("soft_dice_loss", "length", format!("{} vs {}", pred.len(), label.len())));
    }
    let (inter, mass) = overlap_and_mass(pred, label);
    Ok(dice_from(inter, mass, eps))
}

/// `∂ soft_dice_loss / ∂ pred`.
pub fn soft_dice_gradient(pred: &[f64], label: &[f64], eps: f64) -> Result<Vec<f64>> {
    if pred.len() != label.len() {
        return Err(Error::shape("soft_dice_gradient", "length", format!("{} vs {}", pred.len(), label.len())));
    }
    let mut out = vec![0.0; pred.len()];
    add_dice_grad(pred, label, eps, 1.0, &mut out);
    Ok(out)
}

/// `(L_s, per-slice Dice losses)` for `[k, h, w]` blocks.
pub fn slice_regularizer(pred: &Tensor, label: &Tensor, eps: f64) -> Result<(f64, Vec<f64>)> {
    let (k, _) = check_pair(pred, label)?;
    let per_slice: Vec<f64> = (0..k)
        .map(|m| {
            let (i, s) = overlap_and_mass(pred.channel(m), label.channel(m));
            dice_from(i, s, eps)
        })
        .collect();
    let norm = per_slice.iter().map(|l| l * l).sum::<f64>().sqrt();
    Ok((norm, per_slice))
}

/// Unaveraged energy of one stack.
pub fn stack_loss(pred: &Tensor, label: &Tensor, weights: &LossWeights) -> Result<StackLossValue> {
    check_pair(pred, label)?;
    let l_v = soft_dice_loss(pred.data(), label.data(), weights.epsilon_smooth)?;
    let (l_s, per_slice_losses) = slice_regularizer(pred, label, weights.epsilon_smooth)?;
    Ok(StackLossValue { total: weights.lambda_v * l_v + weights.lambda_s * l_s, l_v, l_s, per_slice_losses })
}

/// Batch-averaged energy. Per-slice losses are averaged position-wise.
pub fn total_loss(batch: &[(Tensor, Tensor)], weights: &LossWeights) -> Result<StackLossValue> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    let n = batch.len() as f64;
    let mut acc: Option<StackLossValue> = None;
    for (pred, label) in batch {
        let v = stack_loss(pred, label, weights)?;
        match acc.as_mut() {
            None => acc = Some(v),
            Some(a) => {
                if a.per_slice_losses.len() != v.per_slice_losses.len() {
                    return Err(Error::shape("total_loss", "slices", "stacks in a batch must share k"));
                }
                a.total += v.total;
                a.l_v += v.l_v;
                a.l_s += v.l_s;
                for (x, y) in a.per_slice_losses.iter_mut().zip(&v.per_slice_losses) {
                    *x += y;
                }
            }
        }
    }
    let mut a = acc.expect("non-empty batch");
    a.total /= n;
    a.l_v /= n;
    a.l_s /= n;
    a.per_slice_losses.iter_mut().for_each(|x| *x /= n);
    Ok(a)
}

/// `∂(λ_v L_v + λ_s L_s)/∂p` for one stack.
pub fn loss_gradient(pred: &Tensor, label: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    let (k, plane) = check_pair(pred, label)?;
    let eps = weights.epsilon_smooth;
    let mut grad = Tensor::zeros(pred.shape());
    if weights.lambda_v != 0.0 {
        add_dice_grad(pred.data(), label.data(), eps, weights.lambda_v, grad.data_mut());
    }
    if weights.lambda_s != 0.0 {
        let (norm, per_slice) = slice_regularizer(pred, label, eps)?;
        let denom = norm + weights.epsilon_norm;
        for (m, &d) in per_slice.iter().enumerate() {
            let out = &mut grad.data_mut()[m * plane..(m + 1) * plane];
            add_dice_grad(pred.channel(m), label.channel(m), eps, weights.lambda_s * d / denom, out);
        }
    }
    debug_assert_eq!(grad.len(), k * plane);
    grad.check_finite("loss gradient")?;
    Ok(grad)
}

/// Gradients of the batch-averaged energy: each stack's gradient scaled by `1/N`.
pub fn batch_loss_gradient(batch: &[(Tensor, Tensor)], weights: &LossWeights) -> Result<Vec<Tensor>> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    let n = batch.len() as f64;
    batch
        .iter()
        .map(|(p, y)| {
            let mut g = loss_gradient(p, y, weights)?;
            g.scale(1.0 / n);
            Ok(g)
        })
        .collect()
}

/// Clamps into `[PROB_CLAMP, 1 - PROB_CLAMP]`; the mask marks entries left
/// untouched, which are the only ones that pass gradient back.
pub fn clamp_probabilities(pred: &Tensor) -> (Tensor, Vec<bool>) {
    let mask = pred.data().iter().map(|&v| (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&v)).collect();
    (pred.map(|v| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)), mask)
}
