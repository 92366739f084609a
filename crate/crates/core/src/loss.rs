//! Weighted cross-entropy over sparse label maps, plus the L2 penalty.

use crate::annotation::{LabelMap, WeightMap, LABEL_IGNORE, LABEL_POSITIVE};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Guard on the total weight of a patch.
pub const WEIGHT_SUM_EPS: f64 = 1e-12;
/// Default multiplier of the squared-kernel penalty.
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-5;

/// Class index the network predicts for a label value: lymphocyte (2) is
/// class 1, non-lymphocyte (1) is class 0.
#[inline]
pub fn class_of(label: u8) -> usize {
    usize::from(label == LABEL_POSITIVE)
}

fn check_shapes<T: Scalar>(t: &Tensor<T>, labels: &LabelMap, weights: &WeightMap) -> Result<()> {
    if t.channels != 2
        || (t.height, t.width) != (labels.height(), labels.width())
        || (labels.height(), labels.width()) != (weights.height(), weights.width())
    {
        return Err(Error::Shape(format!(
            "prediction {}x{}x{} vs labels {}x{} vs weights {}x{}",
            t.channels,
            t.height,
            t.width,
            labels.height(),
            labels.width(),
            weights.height(),
            weights.width()
        )));
    }
    Ok(())
}

/// Data term `Σ w·(−ln p[class]) / max(Σ w, ε)` evaluated on a probability
/// map (channel 0 background, channel 1 lymphocyte). Unlabelled pixels never
/// contribute.
pub fn weighted_cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &LabelMap, weights: &WeightMap) -> Result<f64> {
    check_shapes(probs, labels, weights)?;
    let plane = probs.plane();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..plane {
        let label = labels.as_slice()[i];
        let w = weights.as_slice()[i] as f64;
        if label == LABEL_IGNORE || w == 0.0 {
            continue;
        }
        let p = probs.data[class_of(label) * plane + i].as_f64();
        num += w * -p.max(f64::MIN_POSITIVE).ln();
        den += w;
    }
    Ok(num / den.max(WEIGHT_SUM_EPS))
}

/// Per-pixel softmax of two-channel logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let plane = logits.plane();
    let mut out = logits.clone();
    for i in 0..plane {
        let (a, b) = (logits.data[i], logits.data[plane + i]);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        let s = ea + eb;
        out.data[i] = ea / s;
        out.data[plane + i] = eb / s;
    }
    out
}

/// Data term and its gradient with respect to the logits, computed with a
/// log-sum-exp so the loss stays finite for saturated predictions.
pub fn data_loss_and_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &LabelMap,
    weights: &WeightMap,
) -> Result<(f64, Tensor<T>)> {
    check_shapes(logits, labels, weights)?;
    let plane = logits.plane();
    let total: f64 = labels
        .as_slice()
        .iter()
        .zip(weights.as_slice())
        .filter(|(&l, _)| l != LABEL_IGNORE)
        .map(|(_, &w)| w as f64)
        .sum();
    let norm = total.max(WEIGHT_SUM_EPS);
    let mut grad = Tensor::zeros(2, logits.height, logits.width);
    let mut loss = 0.0;
    for i in 0..plane {
        let label = labels.as_slice()[i];
        let w = weights.as_slice()[i] as f64;
        if label == LABEL_IGNORE || w == 0.0 {
            continue;
        }
        let z = [logits.data[i].as_f64(), logits.data[plane + i].as_f64()];
        let m = z[0].max(z[1]);
        let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
        let cls = class_of(label);
        loss += w * (lse - z[cls]);
        let scale = w / norm;
        for k in 0..2 {
            let p = (z[k] - lse).exp();
            let target = if k == cls { 1.0 } else { 0.0 };
            grad.data[k * plane + i] = T::from_f64(scale * (p - target));
        }
    }
    Ok((loss / norm, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn maps(labels: Vec<u8>, weights: Vec<f32>) -> (LabelMap, WeightMap) {
        let n = labels.len();
        (LabelMap::from_vec(1, n, labels).unwrap(), WeightMap::from_vec(1, n, weights).unwrap())
    }

    fn probs(p_lymph: &[f64]) -> Tensor<f64> {
        let mut data: Vec<f64> = p_lymph.iter().map(|p| 1.0 - p).collect();
        data.extend_from_slice(p_lymph);
        Tensor::from_vec(2, 1, p_lymph.len(), data)
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let (l, w) = maps(vec![2, 1, 0], vec![1.0, 0.5, 0.0]);
        assert_eq!(weighted_cross_entropy(&probs(&[1.0, 0.0, 0.3]), &l, &w).unwrap(), 0.0);
    }

    #[test]
    fn uniform_prediction_gives_ln2() {
        let (l, w) = maps(vec![2, 1, 1, 0], vec![1.0, 0.5, 1.0, 0.0]);
        let loss = weighted_cross_entropy(&probs(&[0.5; 4]), &l, &w).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn weighted_average_arithmetic() {
        let (l, w) = maps(vec![2, 1], vec![1.0, 0.5]);
        let p = probs(&[0.7, 0.2]);
        let (a, b) = (-(0.7f64).ln(), -(0.8f64).ln());
        let loss = weighted_cross_entropy(&p, &l, &w).unwrap();
        assert!((loss - (a + 0.5 * b) / 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let (l, w) = maps(vec![0, 0], vec![0.0, 0.0]);
        assert_eq!(weighted_cross_entropy(&probs(&[0.1, 0.9]), &l, &w).unwrap(), 0.0);
        let logits = Tensor::from_vec(2, 1, 2, vec![0.3, -1.0, 2.0, 0.1]);
        let (loss, g) = data_loss_and_grad(&logits, &l, &w).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logit_path_agrees_with_probability_path() {
        let (l, w) = maps(vec![2, 1, 2, 0], vec![1.0, 1.0, 0.5, 0.0]);
        let logits = Tensor::from_vec(2, 1, 4, vec![0.3, -1.0, 2.0, 0.1, -0.4, 0.8, 1.5, 3.0]);
        let (a, _) = data_loss_and_grad(&logits, &l, &w).unwrap();
        let b = weighted_cross_entropy(&softmax(&logits), &l, &w).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let (l, w) = maps(vec![2, 1], vec![1.0, 1.0]);
        assert!(weighted_cross_entropy(&probs(&[0.5; 3]), &l, &w).is_err());
    }
}
