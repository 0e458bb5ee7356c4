//! Instance-level denoising: Gaussian priors estimated from the globally
//! filtered features, per-sample mask experts that split a feature into kept
//! signal and removed noise, the prior-guided NLL alignment losses and the
//! confidence weights that steer the cross-modality experts.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{self, GaussianPrior, Matrix};
use crate::nn::{Mlp, Tape};

/// Modality-wise priors `pᵐ` and discrepancy priors `p^{m−m'}` for every ordered pair.
#[derive(Clone, Debug)]
pub struct Priors {
    pub modality: Vec<GaussianPrior>,
    pub pairs: BTreeMap<(usize, usize), GaussianPrior>,
}

impl Priors {
    /// Discrepancy priors composed as `μ^{m−m'} = μᵐ − μᵐ'`, `Σ^{m−m'} = Σᵐ + Σᵐ'`.
    pub fn from_modalities(modality: Vec<GaussianPrior>) -> Result<Self> {
        let m = modality.len();
        let mut pairs = BTreeMap::new();
        for a in 0..m {
            for b in 0..m {
                if a == b {
                    continue;
                }
                let mean: Vec<f64> = modality[a].mean().iter().zip(modality[b].mean()).map(|(x, y)| x - y).collect();
                let cov = modality[a].cov().add(modality[b].cov())?;
                pairs.insert((a, b), GaussianPrior::new(mean, cov)?);
            }
        }
        Ok(Priors { modality, pairs })
    }

    pub fn from_moments(means: Vec<Vec<f64>>, covs: Vec<Matrix>) -> Result<Self> {
        let modality = means
            .into_iter()
            .zip(covs)
            .map(|(mu, cov)| GaussianPrior::new(mu, cov))
            .collect::<Result<Vec<_>>>()?;
        Self::from_modalities(modality)
    }

    /// Rebuilds every prior with ridge at least `floor`.
    pub fn with_ridge_floor(&self, floor: f64) -> Result<Self> {
        let rebuild = |p: &GaussianPrior| GaussianPrior::with_ridge(p.mean().to_vec(), p.cov().clone(), p.ridge().max(floor));
        Ok(Priors {
            modality: self.modality.iter().map(rebuild).collect::<Result<_>>()?,
            pairs: self
                .pairs
                .iter()
                .map(|(k, p)| Ok((*k, rebuild(p)?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.modality.len()
    }

    pub fn pair(&self, a: usize, b: usize) -> &GaussianPrior {
        &self.pairs[&(a, b)]
    }
}

/// Maximum-likelihood priors from the filtered features of every modality.
pub fn estimate_priors(hs: &[Matrix]) -> Result<Priors> {
    let modality = hs.iter().map(GaussianPrior::fit).collect::<Result<Vec<_>>>()?;
    Priors::from_modalities(modality)
}

/// Output of one expert: `ĥ = h ⊙ w`, `n = h ⊙ (1 − w)`.
#[derive(Clone, Debug)]
pub struct ExpertSplit {
    pub kept: Matrix,
    pub noise: Matrix,
    pub mask: Matrix,
}

pub fn expert_split(expert: &Mlp, h: &Matrix) -> Result<(ExpertSplit, Tape)> {
    let (mask, tape) = expert.forward(h)?;
    Ok((split_with_mask(h, mask)?, tape))
}

pub fn split_with_mask(h: &Matrix, mask: Matrix) -> Result<ExpertSplit> {
    let kept = h.hadamard(&mask)?;
    let noise = h.zip_map(&mask, "expert noise", |x, w| x * (1.0 - w))?;
    Ok(ExpertSplit { kept, noise, mask })
}

/// Expert outputs of every modality.
#[derive(Clone, Debug)]
pub struct ExpertOutput {
    pub specific: Vec<ExpertSplit>,
    pub cross: Vec<ExpertSplit>,
}

/// NLL terms of the instance-level alignment and their gradients w.r.t. the
/// expert outputs (batch-mean normalised).
#[derive(Clone, Debug)]
pub struct SacaLoss {
    pub nll_specific: f64,
    pub nll_cross: f64,
    pub d_specific: Vec<Matrix>,
    pub d_cross: Vec<Matrix>,
}

impl SacaLoss {
    pub fn total(&self) -> f64 {
        self.nll_specific + self.nll_cross
    }
}

/// `L_nll^s = −Σ_m mean_i log pᵐ(ĥ_s,iᵐ)`.
pub fn nll_specific(kept: &[Matrix], priors: &Priors) -> Result<(f64, Vec<Matrix>)> {
    if kept.len() != priors.num_modalities() {
        return Err(Error::dims("nll_specific modalities", priors.num_modalities(), kept.len()));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(kept.len());
    for (x, p) in kept.iter().zip(&priors.modality) {
        let n = x.rows().max(1) as f64;
        total -= p.log_density_rows(x)?.iter().sum::<f64>() / n;
        grads.push(p.mahalanobis_grad_rows(x)?.scale(1.0 / n));
    }
    Ok((total, grads))
}

/// `L_nll^c = −Σ_{m<m'} mean_i log p^{m−m'}(ĥ_c,iᵐ − ĥ_c,iᵐ')`.
pub fn nll_cross(kept: &[Matrix], priors: &Priors) -> Result<(f64, Vec<Matrix>)> {
    let m = kept.len();
    if m != priors.num_modalities() {
        return Err(Error::dims("nll_cross modalities", priors.num_modalities(), m));
    }
    let mut total = 0.0;
    let mut grads: Vec<Matrix> = kept.iter().map(|x| Matrix::zeros(x.rows(), x.cols())).collect();
    for a in 0..m {
        for b in (a + 1)..m {
            let p = priors.pair(a, b);
            let diff = kept[a].sub(&kept[b])?;
            let n = diff.rows().max(1) as f64;
            total -= p.log_density_rows(&diff)?.iter().sum::<f64>() / n;
            let g = p.mahalanobis_grad_rows(&diff)?;
            grads[a].axpy(1.0 / n, &g)?;
            grads[b].axpy(-1.0 / n, &g)?;
        }
    }
    Ok((total, grads))
}

pub fn loss_saca(specific: &[Matrix], cross: &[Matrix], priors: &Priors) -> Result<SacaLoss> {
    let (nll_specific, d_specific) = nll_specific(specific, priors)?;
    let (nll_cross, d_cross) = nll_cross(cross, priors)?;
    Ok(SacaLoss {
        nll_specific,
        nll_cross,
        d_specific,
        d_cross,
    })
}

/// Strict alignment used as an ablation of the NLL slack term:
/// `Σ_{m<m'} mean_i (1 − cos(ĥ_c,iᵐ, ĥ_c,iᵐ'))`.
pub fn cosine_alignment(cross: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
    let m = cross.len();
    let mut total = 0.0;
    let mut grads: Vec<Matrix> = cross.iter().map(|x| Matrix::zeros(x.rows(), x.cols())).collect();
    for a in 0..m {
        for b in (a + 1)..m {
            if cross[a].shape() != cross[b].shape() {
                return Err(Error::dims("cosine_alignment", format!("{:?}", cross[a].shape()), format!("{:?}", cross[b].shape())));
            }
            let n = cross[a].rows().max(1) as f64;
            for i in 0..cross[a].rows() {
                let (u, v) = (cross[a].row(i), cross[b].row(i));
                let nu = linalg::dot(u, u).sqrt().max(1e-12);
                let nv = linalg::dot(v, v).sqrt().max(1e-12);
                let cos = linalg::dot(u, v) / (nu * nv);
                total += (1.0 - cos) / n;
                for j in 0..u.len() {
                    let du = -(v[j] / (nu * nv) - cos * u[j] / (nu * nu)) / n;
                    let dv = -(u[j] / (nu * nv) - cos * v[j] / (nv * nv)) / n;
                    grads[a][(i, j)] += du;
                    grads[b][(i, j)] += dv;
                }
            }
        }
    }
    Ok((total, grads))
}

/// Per-sample confidence `c = exp(log p(h) / d)`: the per-dimension geometric
/// mean of the density.
pub fn confidence_rows(prior: &GaussianPrior, x: &Matrix) -> Result<Vec<f64>> {
    let d = prior.dim().max(1) as f64;
    Ok(prior.log_density_rows(x)?.into_iter().map(|lp| (lp / d).exp()).collect())
}

/// Row-stochastic `N × M` weights that grow as a modality's confidence falls.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceWeights(pub Matrix);

impl ConfidenceWeights {
    /// Every entry `1/M`.
    pub fn uniform(n: usize, m: usize) -> Self {
        ConfidenceWeights(Matrix::filled(n, m, 1.0 / m.max(1) as f64))
    }

    /// `¬confᵢᵐ = softmax_m(1 − tanh(cᵢᵐ))` from a confidence table `c` (N × M).
    pub fn from_confidence(c: &Matrix) -> Self {
        let mut out = Matrix::zeros(c.rows(), c.cols());
        for i in 0..c.rows() {
            let logits: Vec<f64> = c.row(i).iter().map(|v| 1.0 - v.tanh()).collect();
            out.row_mut(i).copy_from_slice(&softmax(&logits));
        }
        ConfidenceWeights(out)
    }

    pub fn column(&self, m: usize) -> Vec<f64> {
        self.0.column(m)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn neg_confidence(hs: &[Matrix], priors: &Priors) -> Result<ConfidenceWeights> {
    if hs.len() != priors.num_modalities() {
        return Err(Error::dims("neg_confidence modalities", priors.num_modalities(), hs.len()));
    }
    let n = hs.first().map_or(0, Matrix::rows);
    let mut c = Matrix::zeros(n, hs.len());
    for (m, (h, p)) in hs.iter().zip(&priors.modality).enumerate() {
        for (i, v) in confidence_rows(p, h)?.into_iter().enumerate() {
            c[(i, m)] = v;
        }
    }
    Ok(ConfidenceWeights::from_confidence(&c))
}

/// Per-sample weighted gradient accumulation for the cross-modality expert of
/// modality `m`: rows of `d_cross` (already batch-averaged) are multiplied by
/// `¬confᵢᵐ` before the expert backward pass.
pub fn confidence_scaled(d_cross: &Matrix, weights: &ConfidenceWeights, m: usize) -> Result<Matrix> {
    d_cross.scale_rows(&weights.column(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn scalar_prior(mean: f64, var: f64) -> GaussianPrior {
        GaussianPrior::with_ridge(vec![mean], Matrix::from_rows(&[vec![var]]).unwrap(), 0.0).unwrap()
    }

    #[test]
    fn identical_modalities_have_centered_discrepancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = random(&mut rng, 30, 3);
        let p = estimate_priors(&[h.clone(), h]).unwrap();
        let pair = p.pair(0, 1);
        assert!(pair.mean().iter().all(|v| *v == 0.0));
        assert_eq!(pair.cov(), &p.modality[0].cov().scale(2.0));
    }

    #[test]
    fn scalar_discrepancy_prior() {
        let p = Priors::from_modalities(vec![scalar_prior(2.0, 1.0), scalar_prior(5.0, 4.0)]).unwrap();
        assert_eq!(p.pair(0, 1).mean(), &[-3.0]);
        assert_eq!(p.pair(0, 1).cov()[(0, 0)], 5.0);
        assert_eq!(p.pair(1, 0).mean(), &[3.0]);
    }

    #[test]
    fn saturated_expert_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[3, 3], Activation::Relu, Activation::Sigmoid, &mut rng);
        net.layers_mut()[0].weight = Matrix::zeros(3, 3);
        net.layers_mut()[0].bias = vec![50.0; 3];
        let h = random(&mut rng, 4, 3);
        let (s, _) = expert_split(&net, &h).unwrap();
        assert_eq!(s.kept, h);
        assert!(s.noise.max_abs() == 0.0);
    }

    #[test]
    fn zero_features_split_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 8, 3], Activation::Relu, Activation::Sigmoid, &mut rng);
        let (s, _) = expert_split(&net, &Matrix::zeros(5, 3)).unwrap();
        assert!(s.kept.max_abs() == 0.0 && s.noise.max_abs() == 0.0);
    }

    #[test]
    fn split_is_exactly_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[4, 8, 4], Activation::Relu, Activation::Sigmoid, &mut rng);
        let h = random(&mut rng, 20, 4).scale(10.0);
        let (s, _) = expert_split(&net, &h).unwrap();
        let gap = s.kept.add(&s.noise).unwrap().sub(&h).unwrap().max_abs();
        assert!(gap < 1e-12);
        assert!(s.mask.as_slice().iter().all(|&w| w > 0.0 && w < 1.0));
    }

    #[test]
    fn nll_at_the_mean_is_normaliser() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random(&mut rng, 20, 3);
        let p = estimate_priors(&[h.clone(), h.clone()]).unwrap();
        let mean = p.modality[0].mean().to_vec();
        let at_mean = Matrix::from_rows(&vec![mean; 7]).unwrap();
        let (l, _) = nll_specific(&[at_mean.clone(), at_mean], &p).unwrap();
        let expected = 0.5 * (p.modality[0].logdet() + 3.0 * (2.0 * PI).ln());
        assert!((l - 2.0 * expected).abs() < 1e-10);
    }

    #[test]
    fn scalar_cross_nll_at_prior_mean() {
        let p = Priors::from_modalities(vec![scalar_prior(2.0, 1.0), scalar_prior(5.0, 4.0)]).unwrap();
        // discrepancy equals μ^{1−2} = −3 exactly
        let a = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![4.0], vec![3.0]]).unwrap();
        let (l, _) = nll_cross(&[a, b], &p).unwrap();
        let ridge = p.pair(0, 1).ridge();
        let expected = 0.5 * ((5.0 + ridge).ln() + (2.0 * PI).ln());
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_nll_is_slack_not_strict() {
        let p = Priors::from_modalities(vec![scalar_prior(2.0, 1.0), scalar_prior(5.0, 4.0)]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let loss_at = |gap: f64| nll_cross(&[Matrix::from_rows(&[vec![gap]]).unwrap(), b.clone()], &p).unwrap().0;
        let at_mu = loss_at(-3.0);
        assert!(loss_at(-2.0) > at_mu);
        assert!(loss_at(0.0) > loss_at(-2.0));
        assert!(loss_at(-4.0) > at_mu);
    }

    #[test]
    fn equal_confidence_is_uniform() {
        let c = Matrix::from_rows(&[vec![0.3, 0.3], vec![2.0, 2.0]]).unwrap();
        let w = ConfidenceWeights::from_confidence(&c);
        for v in w.0.as_slice() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn hand_softmax_of_confidence() {
        let c = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let w = ConfidenceWeights::from_confidence(&c);
        let e0 = 1f64.exp();
        let e1 = (1.0 - 1f64.tanh()).exp();
        assert!((w.0[(0, 0)] - e0 / (e0 + e1)).abs() < 1e-15);
        assert!((w.0[(0, 0)] - 0.6817).abs() < 1e-4);
        assert!((w.0[(0, 1)] - 0.3183).abs() < 1e-4);
    }

    #[test]
    fn less_likely_modality_gets_larger_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random(&mut rng, 40, 3);
        let p = estimate_priors(&[h.clone(), h.clone()]).unwrap();
        let far = h.map(|v| v * 4.0 + 3.0);
        let w = neg_confidence(&[h, far], &p).unwrap();
        for i in 0..40 {
            assert!(w.0[(i, 0)] < w.0[(i, 1)]);
            assert!((w.0[(i, 0)] + w.0[(i, 1)] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_accumulation_hand_case() {
        // two samples, weights (1, 0): only the first sample survives, still halved
        let d = Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 3.0]]).unwrap();
        let w = ConfidenceWeights(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let s = confidence_scaled(&d, &w, 0).unwrap();
        assert_eq!(s.to_rows(), vec![vec![0.5, -1.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn cosine_alignment_zero_for_parallel() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        let (l, _) = cosine_alignment(&[a.clone(), a.scale(3.0)]).unwrap();
        assert!(l.abs() < 1e-12);
    }
}
