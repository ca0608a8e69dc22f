use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    pub probs: Vec<Vec<f64>>,
    /// `∂loss/∂z` per sample: `(p - onehot(y)) / N`.
    pub seeds: Vec<Vec<f64>>,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Numerically stable softmax cross-entropy, averaged over the batch.
pub fn loss_ce(logits: &[Vec<f64>], labels: &[u8]) -> Result<LossOutput> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(logits.len());
    let mut seeds = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        let y = y as usize;
        if y >= z.len() {
            return Err(Error::Label {
                label: y,
                classes: z.len(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite logit".into()));
        }
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - z[y];
        let p = softmax(z);
        let mut g: Vec<f64> = p.iter().map(|&v| v / n).collect();
        g[y] -= 1.0 / n;
        probs.push(p);
        seeds.push(g);
    }
    Ok(LossOutput {
        loss: loss / n,
        probs,
        seeds,
    })
}
