//! Label-free test-time cooperative enhancement.
//!
//! Each iteration refines the globally filtered features `h↑` by gradient
//! descent on the decoder reconstruction error (with the expert noise held
//! fixed), blends fresh statistics of `h↑` into the priors, then moves the
//! expert outputs `ĥ_s↑`, `ĥ_c↑` one step down the prior NLL.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{self, Priors};
use crate::linalg::{mean_and_covariance, Matrix};
use crate::nn::Mlp;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtceConfig {
    pub iterations: usize,
    /// Weight of the previous prior mean in the blend.
    pub alpha: f64,
    /// Weight of the previous prior covariance in the blend.
    pub beta: f64,
    pub step: f64,
    /// Halve the global step while it would increase the reconstruction error.
    pub backtracking: bool,
    /// Floor the prior ridge at `M·step` so instance steps stay contractive.
    pub stable_priors: bool,
}

impl Default for TtceConfig {
    fn default() -> Self {
        TtceConfig {
            iterations: 30,
            alpha: 0.4,
            beta: 0.4,
            step: 1e-2,
            backtracking: true,
            stable_priors: true,
        }
    }
}

impl TtceConfig {
    pub fn with_iterations(self, iterations: usize) -> Self {
        TtceConfig { iterations, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid("beta", "must lie in [0, 1]"));
        }
        if !(self.step >= 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("step", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `h↑ + n_s + n_c`
pub fn reconstruction_input(h_up: &Matrix, noise_s: &Matrix, noise_c: &Matrix) -> Result<Matrix> {
    h_up.add(noise_s)?.add(noise_c)
}

/// `L_re = (1/M) Σ_m ‖Ψᵐ(h↑ᵐ + n_sᵐ + n_cᵐ) − xᵐ‖²_F / N`
pub fn loss_reconstruction(decoders: &[Mlp], h_up: &[Matrix], noise_s: &[Matrix], noise_c: &[Matrix], xs: &[Matrix]) -> Result<f64> {
    let m = decoders.len();
    if [h_up.len(), noise_s.len(), noise_c.len(), xs.len()].iter().any(|&k| k != m) {
        return Err(Error::dims("loss_reconstruction modalities", m, "mismatched slices"));
    }
    let mut total = 0.0;
    for k in 0..m {
        let input = reconstruction_input(&h_up[k], &noise_s[k], &noise_c[k])?;
        let out = decoders[k].predict(&input)?;
        if out.shape() != xs[k].shape() {
            return Err(Error::dims("loss_reconstruction target", format!("{:?}", out.shape()), format!("{:?}", xs[k].shape())));
        }
        total += out.sub(&xs[k])?.frobenius_sq() / xs[k].rows().max(1) as f64;
    }
    Ok(total / m.max(1) as f64)
}

/// `h↑ ← h↑ − 2η J_Ψ(I)ᵀ(Ψ(I) − x)` with `I = h↑ + n_s + n_c`; the
/// Jacobian-transpose product comes from the decoder's backward pass.
///
/// Returns the updated features and `‖Ψ(I) − x‖²_F` at the pre-update point.
pub fn enhance_global(decoder: &Mlp, h_up: &Matrix, noise_s: &Matrix, noise_c: &Matrix, x: &Matrix, step: f64) -> Result<(Matrix, f64)> {
    let input = reconstruction_input(h_up, noise_s, noise_c)?;
    let (out, tape) = decoder.forward(&input)?;
    let residual = out.sub(x)?;
    let sq = residual.frobenius_sq();
    let (_, jt_r) = decoder.backward(&tape, &residual)?;
    let mut next = h_up.clone();
    next.axpy(-2.0 * step, &jt_r)?;
    if !next.is_finite() {
        return Err(Error::NonFinite("global enhancement step".into()));
    }
    Ok((next, sq))
}

/// [`enhance_global`] with step halving: the step is halved (at most
/// `max_halvings` times) until the reconstruction error does not increase;
/// if no tried step helps, `h↑` is returned unchanged.
///
/// Returns the new features, the pre-update `‖Ψ(I) − x‖²_F` and the step used.
pub fn enhance_global_guarded(
    decoder: &Mlp,
    h_up: &Matrix,
    noise_s: &Matrix,
    noise_c: &Matrix,
    x: &Matrix,
    step: f64,
    max_halvings: usize,
) -> Result<(Matrix, f64, f64)> {
    let input = reconstruction_input(h_up, noise_s, noise_c)?;
    let (out, tape) = decoder.forward(&input)?;
    let residual = out.sub(x)?;
    let before = residual.frobenius_sq();
    let (_, jt_r) = decoder.backward(&tape, &residual)?;
    let mut eta = step;
    for _ in 0..=max_halvings {
        let mut next = h_up.clone();
        next.axpy(-2.0 * eta, &jt_r)?;
        if next.is_finite() {
            let after = decoder.predict(&reconstruction_input(&next, noise_s, noise_c)?)?.sub(x)?.frobenius_sq();
            if after <= before {
                return Ok((next, before, eta));
            }
        }
        eta *= 0.5;
    }
    Ok((h_up.clone(), before, 0.0))
}

/// Ridge that keeps every instance-level step contractive: with `δ ≥ Mη`
/// the update factor `1 − η/(λ+δ)` of the specific step stays in `(0, 1)`
/// and the coupled cross-modality step cannot overshoot.
pub fn stable_ridge(num_modalities: usize, step: f64) -> f64 {
    num_modalities as f64 * step
}

/// `μ↑ = αμ + (1−α)Δμ↑`, `Σ↑ = βΣ + (1−β)ΔΣ↑` with `Δμ↑, ΔΣ↑` the moments of
/// `h↑`; discrepancy priors are recomposed from the blended moments.
pub fn update_priors(priors: &Priors, h_up: &[Matrix], alpha: f64, beta: f64) -> Result<Priors> {
    if h_up.len() != priors.num_modalities() {
        return Err(Error::dims("update_priors modalities", priors.num_modalities(), h_up.len()));
    }
    let mut means = Vec::with_capacity(h_up.len());
    let mut covs = Vec::with_capacity(h_up.len());
    for (p, h) in priors.modality.iter().zip(h_up) {
        let (dmu, dsigma) = mean_and_covariance(h)?;
        let mu: Vec<f64> = p.mean().iter().zip(&dmu).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let mut sigma = p.cov().scale(beta);
        sigma.axpy(1.0 - beta, &dsigma)?;
        means.push(mu);
        covs.push(sigma);
    }
    Priors::from_moments(means, covs)
}

/// One simultaneous instance-level step:
/// `ĥ_sᵐ ← ĥ_sᵐ − η Σᵐ⁻¹(ĥ_sᵐ − μᵐ)` and
/// `ĥ_cᵐ ← ĥ_cᵐ − η Σ_{m'≠m} (Σ^{m−m'})⁻¹(ĥ_cᵐ − ĥ_cᵐ' − μ^{m−m'})`,
/// all right-hand sides taken from the previous iterate. With `strict` the
/// discrepancy target is zero instead of `μ^{m−m'}`.
pub fn enhance_instance(specific: &[Matrix], cross: &[Matrix], priors: &Priors, step: f64, strict: bool) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let m = priors.num_modalities();
    if specific.len() != m || cross.len() != m {
        return Err(Error::dims("enhance_instance modalities", m, format!("{}/{}", specific.len(), cross.len())));
    }
    let mut new_s = Vec::with_capacity(m);
    for (x, p) in specific.iter().zip(&priors.modality) {
        let mut next = x.clone();
        next.axpy(-step, &p.mahalanobis_grad_rows(x)?)?;
        new_s.push(next);
    }
    let mut new_c: Vec<Matrix> = cross.to_vec();
    for a in 0..m {
        for b in 0..m {
            if a == b {
                continue;
            }
            let p = priors.pair(a, b);
            let diff = cross[a].sub(&cross[b])?;
            let g = if strict { p.precision_apply_rows(&diff)? } else { p.mahalanobis_grad_rows(&diff)? };
            new_c[a].axpy(-step, &g)?;
        }
    }
    if new_s.iter().chain(&new_c).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("instance enhancement step".into()));
    }
    Ok((new_s, new_c))
}

/// Transpose of the linear part of [`enhance_instance`], for back-propagating
/// through a step whose priors are held fixed.
pub fn enhance_instance_transpose(d_specific: &[Matrix], d_cross: &[Matrix], priors: &Priors, step: f64) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let m = priors.num_modalities();
    let mut out_s = Vec::with_capacity(m);
    for (d, p) in d_specific.iter().zip(&priors.modality) {
        let mut next = d.clone();
        next.axpy(-step, &p.precision_apply_rows(d)?)?;
        out_s.push(next);
    }
    let mut out_c: Vec<Matrix> = d_cross.to_vec();
    for a in 0..m {
        for b in 0..m {
            if a == b {
                continue;
            }
            let diff = d_cross[a].sub(&d_cross[b])?;
            out_c[a].axpy(-step, &priors.pair(a, b).precision_apply_rows(&diff)?)?;
        }
    }
    Ok((out_s, out_c))
}

/// One row of the per-iteration trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub l_re: f64,
    pub nll_specific: f64,
    pub nll_cross: f64,
    pub accuracy: Option<f64>,
}

/// Evolving features and priors of one enhancement run.
#[derive(Clone, Debug)]
pub struct TtceState {
    pub h_up: Vec<Matrix>,
    pub specific: Vec<Matrix>,
    pub cross: Vec<Matrix>,
    pub noise_s: Vec<Matrix>,
    pub noise_c: Vec<Matrix>,
    pub priors: Priors,
    pub iteration: usize,
    /// Losses before any iteration.
    pub initial: TraceRow,
    /// One row per completed iteration.
    pub trace: Vec<TraceRow>,
    pub strict: bool,
}

impl TtceState {
    pub fn new(
        h: Vec<Matrix>,
        specific: Vec<Matrix>,
        cross: Vec<Matrix>,
        noise_s: Vec<Matrix>,
        noise_c: Vec<Matrix>,
        priors: Priors,
        decoders: Option<(&[Mlp], &[Matrix])>,
        strict: bool,
    ) -> Result<Self> {
        let mut state = TtceState {
            h_up: h,
            specific,
            cross,
            noise_s,
            noise_c,
            priors,
            iteration: 0,
            initial: TraceRow {
                iteration: 0,
                l_re: f64::NAN,
                nll_specific: 0.0,
                nll_cross: 0.0,
                accuracy: None,
            },
            trace: Vec::new(),
            strict,
        };
        let l_re = match decoders {
            Some((dec, xs)) => loss_reconstruction(dec, &state.h_up, &state.noise_s, &state.noise_c, xs)?,
            None => f64::NAN,
        };
        let (nll_specific, nll_cross) = state.nll()?;
        state.initial = TraceRow {
            iteration: 0,
            l_re,
            nll_specific,
            nll_cross,
            accuracy: None,
        };
        Ok(state)
    }

    /// `(L_nll^s, L_nll^c)` of the current features under the current priors.
    pub fn nll(&self) -> Result<(f64, f64)> {
        let (s, _) = experts::nll_specific(&self.specific, &self.priors)?;
        let (c, _) = experts::nll_cross(&self.cross, &self.priors)?;
        Ok((s, c))
    }

    /// One full iteration: reconstruction loss, global step, prior blend, instance step.
    pub fn step(&mut self, decoders: &[Mlp], xs: &[Matrix], cfg: &TtceConfig) -> Result<TraceRow> {
        let m = self.h_up.len();
        if decoders.len() != m || xs.len() != m {
            return Err(Error::dims("TtceState::step modalities", m, format!("{}/{}", decoders.len(), xs.len())));
        }
        let mut sq_total = 0.0;
        let mut next_h = Vec::with_capacity(m);
        for k in 0..m {
            let (h, sq) = global_step(&decoders[k], &self.h_up[k], &self.noise_s[k], &self.noise_c[k], &xs[k], cfg)?;
            sq_total += sq / xs[k].rows().max(1) as f64;
            next_h.push(h);
        }
        self.h_up = next_h;
        self.priors = blend_priors(&self.priors, &self.h_up, cfg)?;
        let (s, c) = enhance_instance(&self.specific, &self.cross, &self.priors, cfg.step, self.strict)?;
        self.specific = s;
        self.cross = c;
        self.iteration += 1;
        let (nll_specific, nll_cross) = self.nll()?;
        let row = TraceRow {
            iteration: self.iteration,
            l_re: sq_total / m.max(1) as f64,
            nll_specific,
            nll_cross,
            accuracy: None,
        };
        self.trace.push(row);
        Ok(row)
    }

    /// Writes `iteration,l_re,nll_s,nll_c,accuracy` with the initial state as iteration 0.
    pub fn write_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_trace_csv(path, &self.initial, &self.trace)
    }
}

/// One global step as configured: plain closed form or with step halving.
pub fn global_step(decoder: &Mlp, h_up: &Matrix, noise_s: &Matrix, noise_c: &Matrix, x: &Matrix, cfg: &TtceConfig) -> Result<(Matrix, f64)> {
    if cfg.backtracking {
        let (h, sq, _) = enhance_global_guarded(decoder, h_up, noise_s, noise_c, x, cfg.step, 10)?;
        Ok((h, sq))
    } else {
        enhance_global(decoder, h_up, noise_s, noise_c, x, cfg.step)
    }
}

/// [`update_priors`] followed by the ridge floor when `stable_priors` is set.
pub fn blend_priors(priors: &Priors, h_up: &[Matrix], cfg: &TtceConfig) -> Result<Priors> {
    let p = update_priors(priors, h_up, cfg.alpha, cfg.beta)?;
    if cfg.stable_priors {
        p.with_ridge_floor(stable_ridge(h_up.len(), cfg.step))
    } else {
        Ok(p)
    }
}

pub fn write_trace_csv(path: impl AsRef<Path>, initial: &TraceRow, rows: &[TraceRow]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration,l_re,l_nll_s,l_nll_c,accuracy")?;
    for r in std::iter::once(initial).chain(rows) {
        let acc = r.accuracy.map_or(String::new(), |a| format!("{a}"));
        writeln!(w, "{},{},{},{},{}", r.iteration, r.l_re, r.nll_specific, r.nll_cross, acc)?;
    }
    w.flush()?;
    Ok(())
}
