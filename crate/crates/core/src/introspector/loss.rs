use introspect_nn::Tensor;

use crate::error::{Error, Result};

/// Inverse-frequency class weights `N / (2 N_c)` as `(w_noerror, w_error)`.
pub fn compute_class_weights(labels: &[u8]) -> Result<(f64, f64)> {
    let n = labels.len();
    let n_err = labels.iter().filter(|&&l| l == 1).count();
    let n_ok = labels.iter().filter(|&&l| l == 0).count();
    if n_err + n_ok != n {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    if n_err == 0 || n_ok == 0 {
        return Err(Error::Invalid(format!(
            "class weights need both classes, got {n_ok} NoError and {n_err} Error"
        )));
    }
    Ok((
        n as f64 / (2.0 * n_ok as f64),
        n as f64 / (2.0 * n_err as f64),
    ))
}

/// `-w_y (1 - p_y)^gamma ln p_y` for one probability pair.
pub fn focal_loss(probs: [f64; 2], label: u8, gamma: f64, weights: (f64, f64)) -> Result<f64> {
    if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (probs[0] + probs[1] - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "probabilities {probs:?} are not a normalised pair"
        )));
    }
    if label > 1 {
        return Err(Error::Invalid(format!("label must be 0 or 1, got {label}")));
    }
    let p = probs[label as usize];
    if p == 0.0 {
        return Err(Error::Invalid(
            "probability of the true class must be positive".into(),
        ));
    }
    let w = if label == 1 { weights.1 } else { weights.0 };
    if p == 1.0 {
        return Ok(0.0);
    }
    Ok(-w * (1.0 - p).powf(gamma) * p.ln())
}

/// Two-class softmax computed in f64.
pub fn softmax2(z0: f64, z1: f64) -> [f64; 2] {
    let m = z0.max(z1);
    let e0 = (z0 - m).exp();
    let e1 = (z1 - m).exp();
    let s = e0 + e1;
    [e0 / s, e1 / s]
}

/// Mean focal loss over a batch of `[N, 2]` logits and its gradient with
/// respect to the logits.
pub fn focal_loss_logits(
    logits: &[f64],
    labels: &[u8],
    gamma: f64,
    weights: (f64, f64),
) -> (f64, Vec<f64>) {
    let n = labels.len();
    assert_eq!(logits.len(), 2 * n, "logits must be N x 2");
    let mut grad = vec![0.0; 2 * n];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (z0, z1) = (logits[2 * i], logits[2 * i + 1]);
        let m = z0.max(z1);
        let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
        let logp = [z0 - lse, z1 - lse];
        let p = [logp[0].exp(), logp[1].exp()];
        let y = y as usize;
        let w = if y == 1 { weights.1 } else { weights.0 };
        let (py, lpy) = (p[y], logp[y]);
        let q = (1.0 - py).max(0.0);
        total += -w * q.powf(gamma) * lpy;
        // dL/dlog p_y, then chain through d log p_y / dz_j = delta_jy - p_j.
        let dq = if gamma == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * py * lpy
        };
        let dl_dlogp = -w * (q.powf(gamma) - dq);
        for j in 0..2 {
            let delta = if j == y { 1.0 } else { 0.0 };
            grad[2 * i + j] = dl_dlogp * (delta - p[j]) / n as f64;
        }
    }
    (total / n.max(1) as f64, grad)
}

pub(crate) fn logits_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}
