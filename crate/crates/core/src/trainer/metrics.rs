use crate::error::{Error, Result};

/// Sample Pearson correlation coefficient.
pub fn pearson(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::Argument(format!(
            "pearson needs equal lengths, got {} and {}",
            preds.len(),
            targets.len()
        )));
    }
    if preds.len() < 2 {
        return Err(Error::Argument("pearson needs at least two points".into()));
    }
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let mt = targets.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (&p, &t) in preds.iter().zip(targets) {
        let (dp, dt) = (p - mp, t - mt);
        cov += dp * dt;
        vp += dp * dp;
        vt += dt * dt;
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::UndefinedMetric("pearson with zero variance".into()));
    }
    Ok((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

/// Fraction of positions where the labels agree.
pub fn accuracy(pred_labels: &[usize], labels: &[usize]) -> Result<f64> {
    if pred_labels.len() != labels.len() {
        return Err(Error::Argument(format!(
            "accuracy needs equal lengths, got {} and {}",
            pred_labels.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = pred_labels
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
