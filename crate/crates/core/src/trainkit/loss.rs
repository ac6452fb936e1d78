use candle_core::{Device, Tensor, D};

use crate::error::{Error, Result};

/// Target distribution: `1 - eps + eps/C` on the true class, `eps/C` elsewhere.
pub fn smoothed_target(num_classes: usize, target: usize, eps: f64) -> Vec<f64> {
    let off = eps / num_classes as f64;
    (0..num_classes)
        .map(|c| if c == target { 1.0 - eps + off } else { off })
        .collect()
}

fn check(num_classes: usize, target: usize, eps: f64) -> Result<()> {
    if target >= num_classes {
        return Err(Error::Config(format!("target {target} out of range for {num_classes} classes")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::field("train.label_smoothing", "must lie in [0, 1)"));
    }
    Ok(())
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|v| v - lse).collect()
}

/// Cross-entropy of `logits` against the smoothed target distribution.
pub fn smoothed_loss(logits: &[f64], target: usize, eps: f64) -> Result<f64> {
    check(logits.len(), target, eps)?;
    let q = smoothed_target(logits.len(), target, eps);
    Ok(-log_softmax(logits).iter().zip(&q).map(|(l, q)| l * q).sum::<f64>())
}

/// Analytic gradient of [`smoothed_loss`]: `softmax(logits) - target`.
pub fn smoothed_loss_grad(logits: &[f64], target: usize, eps: f64) -> Result<Vec<f64>> {
    check(logits.len(), target, eps)?;
    let q = smoothed_target(logits.len(), target, eps);
    Ok(log_softmax(logits).iter().zip(&q).map(|(l, q)| l.exp() - q).collect())
}

/// Batch mean of the smoothed loss for `B x C` logits.
pub fn smoothed_loss_batch(logits: &Tensor, targets: &[usize], eps: f64) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if targets.len() != b {
        return Err(Error::Shape(format!("{} targets for {b} logit rows", targets.len())));
    }
    let mut q = Vec::with_capacity(b * c);
    for t in targets {
        check(c, *t, eps)?;
        q.extend(smoothed_target(c, *t, eps));
    }
    let q = Tensor::from_vec(q, (b, c), &Device::Cpu)?.to_dtype(logits.dtype())?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok((logp * q)?.sum(D::Minus1)?.mean_all()?.neg()?)
}
