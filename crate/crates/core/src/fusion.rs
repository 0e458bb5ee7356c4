//! Confidence-weighted fusion of expert streams, the classification head and
//! the loss bookkeeping.

use crate::error::{Error, Result};
use crate::experts::{softmax, Priors};
use crate::linalg::Matrix;

/// Softmax over per-stream confidences `exp(log p / d)`, one row per sample.
pub fn stream_weights(log_likelihoods: &Matrix, dim: usize) -> Matrix {
    let d = dim.max(1) as f64;
    let mut out = Matrix::zeros(log_likelihoods.rows(), log_likelihoods.cols());
    for i in 0..out.rows() {
        let c: Vec<f64> = log_likelihoods.row(i).iter().map(|lp| (lp / d).exp()).collect();
        out.row_mut(i).copy_from_slice(&softmax(&c));
    }
    out
}

/// Intermediate values of [`confidence_fuse`] needed by its backward pass.
#[derive(Clone, Debug)]
pub struct FusionCache {
    pub weights: Matrix,
    confidences: Matrix,
}

/// Streams are ordered `ĥ_s⁰ … ĥ_s^{M−1}, ĥ_c⁰ … ĥ_c^{M−1}`; both streams of
/// modality `m` are scored under `pᵐ`.
pub fn confidence_fuse(specific: &[Matrix], cross: &[Matrix], priors: &Priors) -> Result<(Matrix, FusionCache)> {
    let m = priors.num_modalities();
    if specific.len() != m || cross.len() != m {
        return Err(Error::dims("confidence_fuse modalities", m, format!("{}/{}", specific.len(), cross.len())));
    }
    let streams: Vec<&Matrix> = specific.iter().chain(cross).collect();
    let (n, d) = streams[0].shape();
    let mut lp = Matrix::zeros(n, 2 * m);
    for (k, s) in streams.iter().enumerate() {
        if s.shape() != (n, d) {
            return Err(Error::dims("confidence_fuse stream", format!("{:?}", (n, d)), format!("{:?}", s.shape())));
        }
        for (i, v) in priors.modality[k % m].log_density_rows(s)?.into_iter().enumerate() {
            lp[(i, k)] = v;
        }
    }
    let scale = d.max(1) as f64;
    let confidences = lp.map(|v| (v / scale).exp());
    let weights = stream_weights(&lp, d);
    let mut fused = Matrix::zeros(n, d);
    for (k, s) in streams.iter().enumerate() {
        for i in 0..n {
            let a = weights[(i, k)];
            for (f, v) in fused.row_mut(i).iter_mut().zip(s.row(i)) {
                *f += a * v;
            }
        }
    }
    Ok((fused, FusionCache { weights, confidences }))
}

/// Gradients of `⟨df, f⟩` with respect to every stream, including the path
/// through the confidence weights. Returns `(d_specific, d_cross)`.
pub fn confidence_fuse_backward(
    specific: &[Matrix],
    cross: &[Matrix],
    priors: &Priors,
    cache: &FusionCache,
    df: &Matrix,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let m = priors.num_modalities();
    let streams: Vec<&Matrix> = specific.iter().chain(cross).collect();
    let (n, d) = df.shape();
    let scale = d.max(1) as f64;
    let mut dc = Matrix::zeros(n, 2 * m);
    for i in 0..n {
        let da: Vec<f64> = streams.iter().map(|s| crate::linalg::dot(df.row(i), s.row(i))).collect();
        let a = cache.weights.row(i);
        let mean: f64 = a.iter().zip(&da).map(|(a, g)| a * g).sum();
        for k in 0..2 * m {
            dc[(i, k)] = a[k] * (da[k] - mean);
        }
    }
    let mut grads = Vec::with_capacity(2 * m);
    for (k, s) in streams.iter().enumerate() {
        let a = cache.weights.column(k);
        let mut g = df.scale_rows(&a)?;
        // d log p / ds = −Σ⁻¹(s − μ); d c / d log p = c / d.
        let coef: Vec<f64> = (0..n).map(|i| -dc[(i, k)] * cache.confidences[(i, k)] / scale).collect();
        let grad_lp = priors.modality[k % m].mahalanobis_grad_rows(s)?;
        g.axpy(1.0, &grad_lp.scale_rows(&coef)?)?;
        grads.push(g);
    }
    let d_cross = grads.split_off(m);
    Ok((grads, d_cross))
}

/// Plain average of per-modality features, used when the experts are disabled.
pub fn mean_fuse(hs: &[Matrix]) -> Result<Matrix> {
    let first = hs.first().ok_or_else(|| Error::invalid("mean_fuse", "no modalities"))?;
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for h in hs {
        out.axpy(1.0 / hs.len() as f64, h)?;
    }
    Ok(out)
}

/// Class scores for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub class: usize,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probabilities = softmax(&logits);
        let class = argmax(&logits);
        Prediction {
            logits,
            probabilities,
            class,
        }
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn predictions(logits: &Matrix) -> Vec<Prediction> {
    (0..logits.rows()).map(|i| Prediction::from_logits(logits.row(i).to_vec())).collect()
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::dims("cross_entropy labels", n, labels.len()));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(n, c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid("labels", format!("label {y} at row {i} is outside [0, {c})")));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        for k in 0..c {
            grad[(i, k)] = ((row[k] - lse).exp() - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n.max(1) as f64, grad))
}

/// Every term of the training objective for one batch or epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub orthogonality: f64,
    pub alignment: f64,
    pub nll_specific: f64,
    pub nll_cross: f64,
    pub reconstruction: f64,
    pub classification: f64,
}

impl LossBreakdown {
    pub fn assa(&self) -> f64 {
        self.orthogonality + self.alignment
    }

    pub fn saca(&self) -> f64 {
        self.nll_specific + self.nll_cross
    }

    /// `L_assa + L_saca + L_re + L_cls`
    pub fn total(&self) -> f64 {
        self.assa() + self.saca() + self.reconstruction + self.classification
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.orthogonality += w * other.orthogonality;
        self.alignment += w * other.alignment;
        self.nll_specific += w * other.nll_specific;
        self.nll_cross += w * other.nll_cross;
        self.reconstruction += w * other.reconstruction;
        self.classification += w * other.classification;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::estimate_priors;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identical_streams_fuse_to_themselves() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fit: Vec<Matrix> = (0..2).map(|_| random(&mut rng, 30, 3)).collect();
        let p = estimate_priors(&fit).unwrap();
        let s = random(&mut rng, 5, 3);
        let (f, cache) = confidence_fuse(&[s.clone(), s.clone()], &[s.clone(), s.clone()], &p).unwrap();
        for (a, b) in f.as_slice().iter().zip(s.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        for i in 0..5 {
            assert!((cache.weights.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_weights() {
        let lp = Matrix::from_rows(&[vec![0.4, 0.2, 0.1, 0.3]]).unwrap();
        let w = stream_weights(&lp, 1);
        let c: Vec<f64> = [0.4f64, 0.2, 0.1, 0.3].iter().map(|v| v.exp()).collect();
        let z: f64 = c.iter().map(|v| v.exp()).sum();
        for k in 0..4 {
            assert!((w[(0, k)] - c[k].exp() / z).abs() < 1e-14);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, _) = cross_entropy(&Matrix::zeros(3, 4), &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let sat = Matrix::from_rows(&[vec![50.0, -50.0]]).unwrap();
        assert!(cross_entropy(&sat, &[0]).unwrap().0 < 1e-20);
        assert!(cross_entropy(&sat, &[2]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let p = Prediction::from_logits(vec![0.0, 0.0]);
        assert_eq!(p.class, 0);
        assert!((p.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn breakdown_total_is_sum() {
        let b = LossBreakdown {
            orthogonality: 0.1,
            alignment: 0.2,
            nll_specific: -1.0,
            nll_cross: 2.0,
            reconstruction: 0.5,
            classification: 1.3,
        };
        assert_eq!(b.total() - (b.assa() + b.saca() + b.reconstruction + b.classification), 0.0);
        assert_eq!(LossBreakdown::default().total(), 0.0);
    }
}
