//! The full denoising classifier: per-modality encoder (ending in a
//! parameter-free layer normalisation), spectral mask, two noise experts and
//! decoder, plus a shared linear classifier.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{self, TtceConfig, TtceState};
use crate::error::{Error, Result};
use crate::experts::{self, ConfidenceWeights, ExpertSplit, Priors};
use crate::fusion::{self, FusionCache, LossBreakdown};
use crate::linalg::{Matrix, SymEigen};
use crate::nn::{self, read_f64s, Activation, Mlp, MlpGrads, Tape};
use crate::subspace;

/// Which components are active. Disabling the experts also disables test-time
/// enhancement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub assa: bool,
    pub saca: bool,
    pub ttce: bool,
    pub confidence_guidance: bool,
    /// Replace the prior-based cross-modality term by cosine alignment.
    pub strict_alignment: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::full()
    }
}

impl Ablation {
    pub fn full() -> Self {
        Ablation {
            assa: true,
            saca: true,
            ttce: true,
            confidence_guidance: true,
            strict_alignment: false,
        }
    }

    pub fn without_ttce() -> Self {
        Ablation { ttce: false, ..Self::full() }
    }

    pub fn without_ttce_saca() -> Self {
        Ablation {
            saca: false,
            ttce: false,
            ..Self::full()
        }
    }

    pub fn none() -> Self {
        Ablation {
            assa: false,
            saca: false,
            ttce: false,
            ..Self::full()
        }
    }

    pub fn normalized(self) -> Self {
        if self.saca {
            self
        } else {
            Ablation { ttce: false, ..self }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub ablation: Ablation,
    /// Enhancement settings; `ttce.iterations` is the test-time count.
    pub ttce: TtceConfig,
    pub train_iterations: usize,
    /// Fuse the enhanced (rather than the raw) expert outputs during training.
    pub fuse_after_ttce: bool,
    /// Multiplier on `L_a`; `None` means `1 / latent_dim`.
    pub alignment_weight: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 32,
            hidden_dim: 64,
            ablation: Ablation::full(),
            ttce: TtceConfig::default(),
            train_iterations: 5,
            fuse_after_ttce: true,
            alignment_weight: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent_dim", "must be positive"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim", "must be positive"));
        }
        if let Some(w) = self.alignment_weight {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid("alignment_weight", "must be finite and non-negative"));
            }
        }
        self.ttce.validate()
    }

    pub fn alignment_weight(&self) -> f64 {
        self.alignment_weight.unwrap_or(1.0 / self.latent_dim.max(1) as f64)
    }
}

/// How the cross-modality expert gradients of the NLL term are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrossWeighting {
    /// Per-sample `¬conf` weights.
    Confidence,
    /// `1/M` for every sample.
    Uniform,
    /// No weighting and no stop-gradient at the filtered features: the exact
    /// gradient of the total loss.
    Unit,
}

/// Networks of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub encoder: Mlp,
    pub mask_net: Mlp,
    pub expert_specific: Mlp,
    pub expert_cross: Mlp,
    pub decoder: Mlp,
}

pub const NETS_PER_BRANCH: usize = 5;

impl Branch {
    fn nets(&self) -> [&Mlp; NETS_PER_BRANCH] {
        [&self.encoder, &self.mask_net, &self.expert_specific, &self.expert_cross, &self.decoder]
    }

    fn nets_mut(&mut self) -> [&mut Mlp; NETS_PER_BRANCH] {
        [
            &mut self.encoder,
            &mut self.mask_net,
            &mut self.expert_specific,
            &mut self.expert_cross,
            &mut self.decoder,
        ]
    }
}

/// Gradients for every network, ordered as [`Model::nets`].
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub nets: Vec<MlpGrads>,
}

impl ModelGrads {
    pub fn zeros(model: &Model) -> Self {
        ModelGrads {
            nets: model.nets().into_iter().map(MlpGrads::zeros_like).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.nets.iter().flat_map(|g| g.iter()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.nets.iter().all(MlpGrads::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.nets.iter().map(|g| g.norm().powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub input_dims: Vec<usize>,
    pub num_classes: usize,
    pub branches: Vec<Branch>,
    pub classifier: Mlp,
    /// Eigenbasis of each modality's training latents; empty until refreshed.
    pub subspaces: Vec<SymEigen>,
    /// Priors of the training features; `None` until refreshed.
    pub priors: Option<Priors>,
}

/// Latent and globally filtered features of one batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub z: Vec<Matrix>,
    pub h: Vec<Matrix>,
    pub masks: Vec<Vec<f64>>,
    enc_tapes: Vec<Tape>,
    norm_scales: Vec<Vec<f64>>,
    mask_tapes: Vec<Option<Tape>>,
}

/// Result of the label-free inference pipeline.
#[derive(Clone, Debug)]
pub struct Inference {
    pub logits: Matrix,
    pub fused: Matrix,
    pub encoded: Encoded,
    /// Enhancement state, present when the experts are active.
    pub state: Option<TtceState>,
    pub fusion_weights: Option<Matrix>,
}

impl Inference {
    pub fn predicted(&self) -> Vec<usize> {
        (0..self.logits.rows()).map(|i| fusion::argmax(self.logits.row(i))).collect()
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        accuracy(&self.predicted(), labels)
    }
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Loss values, gradients and bookkeeping of one training batch.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub losses: LossBreakdown,
    pub grads: ModelGrads,
    pub correct: usize,
    /// Priors used by each training-time enhancement iteration.
    pub schedule: Vec<Priors>,
}

impl Model {
    pub fn new(input_dims: &[usize], num_classes: usize, config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dims.is_empty() || input_dims.contains(&0) {
            return Err(Error::invalid("input_dims", "need at least one modality with positive width"));
        }
        if num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least two classes"));
        }
        let config = ModelConfig {
            ablation: config.ablation.normalized(),
            ..config
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, k) = (config.latent_dim, config.hidden_dim);
        let branches = input_dims
            .iter()
            .map(|&dm| Branch {
                encoder: Mlp::new(&[dm, k, d], Activation::Relu, Activation::Linear, &mut rng),
                mask_net: Mlp::new(&[d, k, d], Activation::Relu, Activation::Sigmoid, &mut rng),
                expert_specific: Mlp::new(&[d, k, d], Activation::Relu, Activation::Sigmoid, &mut rng),
                expert_cross: Mlp::new(&[d, k, d], Activation::Relu, Activation::Sigmoid, &mut rng),
                decoder: Mlp::new(&[d, k, dm], Activation::Relu, Activation::Linear, &mut rng),
            })
            .collect();
        let classifier = Mlp::new(&[d, num_classes], Activation::Linear, Activation::Linear, &mut rng);
        Ok(Model {
            config,
            input_dims: input_dims.to_vec(),
            num_classes,
            branches,
            classifier,
            subspaces: Vec::new(),
            priors: None,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.branches.len()
    }

    pub fn ablation(&self) -> Ablation {
        self.config.ablation
    }

    /// Every network: per modality encoder, mask, specific expert, cross
    /// expert, decoder; then the classifier.
    pub fn nets(&self) -> Vec<&Mlp> {
        let mut out: Vec<&Mlp> = self.branches.iter().flat_map(|b| b.nets()).collect();
        out.push(&self.classifier);
        out
    }

    pub fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        let mut out: Vec<&mut Mlp> = self.branches.iter_mut().flat_map(|b| b.nets_mut()).collect();
        out.push(&mut self.classifier);
        out
    }

    pub fn params(&self) -> Vec<f64> {
        self.nets().into_iter().flat_map(|n| n.params()).collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.nets().iter().map(|n| n.num_params()).sum();
        if values.len() != total {
            return Err(Error::dims("Model::set_params", total, values.len()));
        }
        let mut offset = 0;
        for net in self.nets_mut() {
            let k = net.num_params();
            net.set_params(&values[offset..offset + k])?;
            offset += k;
        }
        Ok(())
    }

    fn check_inputs(&self, xs: &[Matrix]) -> Result<usize> {
        if xs.len() != self.num_modalities() {
            return Err(Error::dims("model inputs", self.num_modalities(), xs.len()));
        }
        let n = xs[0].rows();
        for (m, (x, &dm)) in xs.iter().zip(&self.input_dims).enumerate() {
            if x.cols() != dm || x.rows() != n {
                return Err(Error::dims(
                    "model input",
                    format!("modality {m}: {n}x{dm}"),
                    format!("{}x{}", x.rows(), x.cols()),
                ));
            }
        }
        Ok(n)
    }

    /// Encodes `xs` and applies the spectral filter with the cached subspaces.
    pub fn encode(&self, xs: &[Matrix]) -> Result<Encoded> {
        self.check_inputs(xs)?;
        let assa = self.ablation().assa;
        if assa && self.subspaces.len() != self.num_modalities() {
            return Err(Error::invalid("subspaces", "model has no cached eigenbasis; refresh or train first"));
        }
        let mut enc = Encoded {
            z: Vec::new(),
            h: Vec::new(),
            masks: Vec::new(),
            enc_tapes: Vec::new(),
            norm_scales: Vec::new(),
            mask_tapes: Vec::new(),
        };
        for (m, (x, br)) in xs.iter().zip(&self.branches).enumerate() {
            let (y, tape) = subspace::encode(&br.encoder, x)?;
            let (z, inv) = nn::layer_norm(&y);
            enc.norm_scales.push(inv);
            if assa {
                let mf = subspace::mask_and_filter(&z, &self.subspaces[m], &br.mask_net)?;
                enc.h.push(mf.h);
                enc.masks.push(mf.mask);
                enc.mask_tapes.push(Some(mf.tape));
            } else {
                enc.h.push(z.clone());
                enc.masks.push(Vec::new());
                enc.mask_tapes.push(None);
            }
            enc.z.push(z);
            enc.enc_tapes.push(tape);
        }
        Ok(enc)
    }

    /// Recomputes the eigenbasis and the priors from the full training inputs.
    pub fn refresh(&mut self, xs: &[Matrix]) -> Result<()> {
        self.check_inputs(xs)?;
        if self.ablation().assa {
            self.subspaces = xs
                .iter()
                .zip(&self.branches)
                .map(|(x, br)| subspace::build_subspace(&nn::layer_norm(&br.encoder.predict(x)?).0))
                .collect::<Result<_>>()?;
        }
        if self.ablation().saca {
            let enc = self.encode(xs)?;
            self.priors = Some(experts::estimate_priors(&enc.h)?);
        }
        Ok(())
    }

    fn split_all(&self, h: &[Matrix]) -> Result<(Vec<(ExpertSplit, Tape)>, Vec<(ExpertSplit, Tape)>)> {
        let mut s = Vec::new();
        let mut c = Vec::new();
        for (h, br) in h.iter().zip(&self.branches) {
            s.push(experts::expert_split(&br.expert_specific, h)?);
            c.push(experts::expert_split(&br.expert_cross, h)?);
        }
        Ok((s, c))
    }

    fn decoders(&self) -> Vec<Mlp> {
        self.branches.iter().map(|b| b.decoder.clone()).collect()
    }

    /// Label-free inference: filter, estimate priors on the batch itself, run
    /// the experts, enhance for `iterations` rounds, fuse and classify. When
    /// `labels` are given the trace records accuracy per iteration.
    pub fn infer(&self, xs: &[Matrix], iterations: usize, labels: Option<&[usize]>) -> Result<Inference> {
        let encoded = self.encode(xs)?;
        if !self.ablation().saca {
            let fused = fusion::mean_fuse(&encoded.h)?;
            let logits = self.classifier.predict(&fused)?;
            return Ok(Inference {
                logits,
                fused,
                encoded,
                state: None,
                fusion_weights: None,
            });
        }
        let priors = experts::estimate_priors(&encoded.h)?;
        let (s, c) = self.split_all(&encoded.h)?;
        let decoders = self.decoders();
        let mut state = TtceState::new(
            encoded.h.clone(),
            s.iter().map(|(e, _)| e.kept.clone()).collect(),
            c.iter().map(|(e, _)| e.kept.clone()).collect(),
            s.iter().map(|(e, _)| e.noise.clone()).collect(),
            c.iter().map(|(e, _)| e.noise.clone()).collect(),
            priors,
            Some((&decoders, xs)),
            self.ablation().strict_alignment,
        )?;
        let classify = |st: &TtceState| -> Result<(Matrix, Matrix, Matrix)> {
            let (f, cache) = fusion::confidence_fuse(&st.specific, &st.cross, &st.priors)?;
            let logits = self.classifier.predict(&f)?;
            Ok((f, logits, cache.weights))
        };
        let mut current = classify(&state)?;
        if let Some(y) = labels {
            state.initial.accuracy = Some(accuracy(&argmax_rows(&current.1), y));
        }
        let iterations = if self.ablation().ttce { iterations } else { 0 };
        let cfg = self.config.ttce;
        for _ in 0..iterations {
            state.step(&decoders, xs, &cfg)?;
            current = classify(&state)?;
            if let Some(y) = labels {
                let last = state.trace.last_mut().expect("just pushed");
                last.accuracy = Some(accuracy(&argmax_rows(&current.1), y));
            }
        }
        let (fused, logits, weights) = current;
        Ok(Inference {
            logits,
            fused,
            encoded,
            state: Some(state),
            fusion_weights: Some(weights),
        })
    }

    /// Priors used by each training-time enhancement iteration, computed
    /// from the detached batch features.
    pub fn ttce_schedule(&self, xs: &[Matrix], h: &[Matrix], noise_s: &[Matrix], noise_c: &[Matrix], priors: &Priors) -> Result<Vec<Priors>> {
        let cfg = self.config.ttce;
        let mut h_up = h.to_vec();
        let mut p = priors.clone();
        let mut out = Vec::with_capacity(self.config.train_iterations);
        for _ in 0..self.config.train_iterations {
            for m in 0..h_up.len() {
                let (next, _) = adapt::global_step(&self.branches[m].decoder, &h_up[m], &noise_s[m], &noise_c[m], &xs[m], &cfg)?;
                h_up[m] = next;
            }
            p = adapt::blend_priors(&p, &h_up, &cfg)?;
            out.push(p.clone());
        }
        Ok(out)
    }

    /// Total loss and its gradient for one batch. Requires cached subspaces
    /// and priors (see [`Model::refresh`]). Passing a `schedule` fixes the
    /// priors of the training-time enhancement instead of recomputing them.
    pub fn batch_gradients(&self, xs: &[Matrix], labels: &[usize], weighting: CrossWeighting, schedule: Option<&[Priors]>) -> Result<BatchOutput> {
        let n = self.check_inputs(xs)?;
        if labels.len() != n {
            return Err(Error::dims("batch labels", n, labels.len()));
        }
        let ab = self.ablation();
        let mm = self.num_modalities();
        let nets = self.nets();
        let mut grads = ModelGrads::zeros(self);
        let gi = |m: usize, k: usize| m * NETS_PER_BRANCH + k;
        let mut losses = LossBreakdown::default();
        let enc = self.encode(xs)?;

        // Global level.
        let mut dh: Vec<Matrix> = enc.h.iter().map(|h| Matrix::zeros(h.rows(), h.cols())).collect();
        let mut dz: Vec<Matrix> = enc.z.iter().map(|z| Matrix::zeros(z.rows(), z.cols())).collect();
        let mut dmask: Vec<Vec<f64>> = enc.masks.iter().map(|w| vec![0.0; w.len()]).collect();
        if ab.assa {
            let (lo, dho) = subspace::loss_orthogonality(&enc.h, labels, self.num_classes)?;
            losses.orthogonality = lo;
            for (a, b) in dh.iter_mut().zip(&dho) {
                a.add_assign(b)?;
            }
            let bases: Vec<&Matrix> = self.subspaces.iter().map(|s| &s.basis).collect();
            let (la, ag) = subspace::loss_subspace_alignment(&enc.z, &bases, &enc.masks)?;
            let wa = self.config.alignment_weight();
            losses.alignment = wa * la;
            for m in 0..mm {
                dz[m].axpy(wa, &ag.dz[m])?;
                for (a, b) in dmask[m].iter_mut().zip(&ag.dmask[m]) {
                    *a += wa * b;
                }
            }
        }

        let logits;
        let mut schedule_out = Vec::new();
        if ab.saca {
            let priors = self.priors.as_ref().ok_or_else(|| Error::invalid("priors", "model has no cached priors; refresh or train first"))?;
            let (s, c) = self.split_all(&enc.h)?;
            let kept_s: Vec<Matrix> = s.iter().map(|(e, _)| e.kept.clone()).collect();
            let kept_c: Vec<Matrix> = c.iter().map(|(e, _)| e.kept.clone()).collect();
            let noise_s: Vec<Matrix> = s.iter().map(|(e, _)| e.noise.clone()).collect();
            let noise_c: Vec<Matrix> = c.iter().map(|(e, _)| e.noise.clone()).collect();

            // Instance-level losses; gradients reach the experts only.
            let (ls, d_saca_s) = experts::nll_specific(&kept_s, priors)?;
            let (lc, d_saca_c) = if ab.strict_alignment {
                experts::cosine_alignment(&kept_c)?
            } else {
                experts::nll_cross(&kept_c, priors)?
            };
            losses.nll_specific = ls;
            losses.nll_cross = lc;
            let weights = match weighting {
                CrossWeighting::Confidence if ab.confidence_guidance => Some(experts::neg_confidence(&enc.h, priors)?),
                CrossWeighting::Confidence | CrossWeighting::Uniform => Some(ConfidenceWeights::uniform(n, mm)),
                CrossWeighting::Unit => None,
            };

            // Training-time enhancement with a fixed prior schedule.
            let run_ttce = ab.ttce && self.config.train_iterations > 0;
            let sched: Vec<Priors> = if !run_ttce {
                Vec::new()
            } else if let Some(given) = schedule {
                given.to_vec()
            } else {
                self.ttce_schedule(xs, &enc.h, &noise_s, &noise_c, priors)?
            };
            let step = self.config.ttce.step;
            let (mut up_s, mut up_c) = (kept_s.clone(), kept_c.clone());
            let fuse_up = run_ttce && self.config.fuse_after_ttce;
            if fuse_up {
                for p in &sched {
                    let (a, b) = adapt::enhance_instance(&up_s, &up_c, p, step, ab.strict_alignment)?;
                    up_s = a;
                    up_c = b;
                }
            }
            let fuse_priors = if fuse_up { sched.last().unwrap_or(priors) } else { priors };
            let (f, cache): (Matrix, FusionCache) = fusion::confidence_fuse(&up_s, &up_c, fuse_priors)?;
            let (lg, ctape) = self.classifier.forward(&f)?;
            let (lcls, dlogits) = fusion::cross_entropy(&lg, labels)?;
            losses.classification = lcls;
            let (gcls, df) = self.classifier.backward(&ctape, &dlogits)?;
            grads.nets[nets.len() - 1] = gcls;
            let (mut ds, mut dc) = fusion::confidence_fuse_backward(&up_s, &up_c, fuse_priors, &cache, &df)?;
            if fuse_up {
                for p in sched.iter().rev() {
                    let (a, b) = adapt::enhance_instance_transpose(&ds, &dc, p, step)?;
                    ds = a;
                    dc = b;
                }
            }
            logits = lg;

            // Reconstruction of the inputs from the initial split.
            let mut d_input: Vec<Matrix> = enc.h.iter().map(|h| Matrix::zeros(h.rows(), h.cols())).collect();
            if run_ttce {
                let mut total = 0.0;
                for m in 0..mm {
                    let input = adapt::reconstruction_input(&enc.h[m], &noise_s[m], &noise_c[m])?;
                    let (out, tape) = self.branches[m].decoder.forward(&input)?;
                    let r = out.sub(&xs[m])?;
                    total += r.frobenius_sq() / n as f64;
                    let (g, di) = self.branches[m].decoder.backward(&tape, &r.scale(2.0 / (mm * n) as f64))?;
                    grads.nets[gi(m, 4)] = g;
                    d_input[m] = di;
                }
                losses.reconstruction = total / mm as f64;
            }

            for m in 0..mm {
                dh[m].add_assign(&d_input[m])?;
                let experts_grads = [
                    (&s[m], &ds[m], d_saca_s[m].clone(), 2usize),
                    (&c[m], &dc[m], match &weights {
                        Some(w) => experts::confidence_scaled(&d_saca_c[m], w, m)?,
                        None => d_saca_c[m].clone(),
                    }, 3usize),
                ];
                for ((split, tape), d_flow, d_saca, k) in experts_grads {
                    let h = &enc.h[m];
                    // ĥ = h⊙w, n = h⊙(1−w): ∂/∂w = (dĥ − dn)⊙h.
                    let dw_flow = d_flow.sub(&d_input[m])?.hadamard(h)?;
                    let dw_saca = d_saca.hadamard(h)?;
                    let net = nets[gi(m, k)];
                    let (mut g, dx) = net.backward(tape, &dw_flow)?;
                    let (g2, dx2) = net.backward(tape, &dw_saca)?;
                    g.add_assign(&g2);
                    if weighting == CrossWeighting::Unit {
                        dh[m].add_assign(&dx2)?;
                        dh[m].add_assign(&d_saca.hadamard(&split.mask)?)?;
                    }
                    grads.nets[gi(m, k)] = g;
                    dh[m].add_assign(&dx)?;
                    dh[m].add_assign(&d_flow.hadamard(&split.mask)?)?;
                    dh[m].add_assign(&d_input[m].zip_map(&split.mask, "noise grad", |g, w| g * (1.0 - w))?)?;
                }
            }
            schedule_out = sched;
        } else {
            let f = fusion::mean_fuse(&enc.h)?;
            let (lg, ctape) = self.classifier.forward(&f)?;
            let (lcls, dlogits) = fusion::cross_entropy(&lg, labels)?;
            losses.classification = lcls;
            let (gcls, df) = self.classifier.backward(&ctape, &dlogits)?;
            grads.nets[nets.len() - 1] = gcls;
            for d in dh.iter_mut() {
                d.axpy(1.0 / mm as f64, &df)?;
            }
            logits = lg;
        }

        // Back through the spectral filter and the encoders.
        for m in 0..mm {
            let dzm = if ab.assa {
                let basis = &self.subspaces[m].basis;
                let (dzf, dwf) = subspace::filter_backward(&enc.z[m], basis, &enc.masks[m], &dh[m])?;
                let dw: Vec<f64> = dwf.iter().zip(&dmask[m]).map(|(a, b)| a + b).collect();
                let tape = enc.mask_tapes[m].as_ref().expect("mask tape present with ASSA");
                let (g, _) = nets[gi(m, 1)].backward(tape, &Matrix::row_vector(&dw))?;
                grads.nets[gi(m, 1)] = g;
                dzf.add(&dz[m])?
            } else {
                dh[m].clone()
            };
            let dy = nn::layer_norm_backward(&enc.z[m], &enc.norm_scales[m], &dzm)?;
            let (g, _) = nets[gi(m, 0)].backward(&enc.enc_tapes[m], &dy)?;
            grads.nets[gi(m, 0)] = g;
        }

        let predicted = argmax_rows(&logits);
        let correct = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(BatchOutput {
            losses,
            grads,
            correct,
            schedule: schedule_out,
        })
    }

    /// Loss of one batch without gradients, used by finite-difference checks.
    pub fn batch_loss(&self, xs: &[Matrix], labels: &[usize], schedule: Option<&[Priors]>) -> Result<LossBreakdown> {
        Ok(self.batch_gradients(xs, labels, CrossWeighting::Unit, schedule)?.losses)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }

    /// `mmdenoise-model 1`, the TOML config with its byte length, shape line,
    /// every network, then each cached eigenbasis.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        writeln!(w, "mmdenoise-model 1")?;
        writeln!(w, "config {}", cfg.len())?;
        w.write_all(cfg.as_bytes())?;
        let dims: Vec<String> = self.input_dims.iter().map(usize::to_string).collect();
        writeln!(w, "shape {} {}", self.num_classes, dims.join(" "))?;
        for net in self.nets() {
            net.write_to(w)?;
        }
        writeln!(w, "subspaces {}", self.subspaces.len())?;
        for s in &self.subspaces {
            writeln!(w, "eigen {}", s.dim())?;
            for v in s.basis.as_slice().iter().chain(&s.eigenvalues) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl BufRead) -> Result<Self> {
        let line = read_line(r)?;
        if line != "mmdenoise-model 1" {
            return Err(Error::Checkpoint(format!("unrecognised header `{line}`")));
        }
        let len: usize = field(&read_line(r)?, "config")?;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(|e| Error::Checkpoint(format!("truncated config: {e}")))?;
        let text = String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config: ModelConfig = toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let shape = read_line(r)?;
        let nums: Vec<usize> = shape
            .strip_prefix("shape ")
            .ok_or_else(|| Error::Checkpoint(format!("expected shape line, got `{shape}`")))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Checkpoint(format!("bad shape entry `{t}`"))))
            .collect::<Result<_>>()?;
        if nums.len() < 2 {
            return Err(Error::Checkpoint("shape line needs classes and at least one modality".into()));
        }
        let mut model = Model::new(&nums[1..], nums[0], config, 0)?;
        for net in model.nets_mut() {
            let loaded = Mlp::read_from(r)?;
            if loaded.header() != net.header() {
                return Err(Error::Checkpoint(format!("network `{}` does not match expected `{}`", loaded.header(), net.header())));
            }
            *net = loaded;
        }
        let count: usize = field(&read_line(r)?, "subspaces")?;
        for _ in 0..count {
            let d: usize = field(&read_line(r)?, "eigen")?;
            let basis = Matrix::from_vec(d, d, read_f64s(r, d * d)?)?;
            let eigenvalues = read_f64s(r, d)?;
            model.subspaces.push(SymEigen { basis, eigenvalues });
        }
        Ok(model)
    }
}

pub fn argmax_rows(x: &Matrix) -> Vec<usize> {
    (0..x.rows()).map(|i| fusion::argmax(x.row(i))).collect()
}

fn read_line(r: &mut impl BufRead) -> Result<String> {
    let mut s = String::new();
    r.read_line(&mut s)?;
    Ok(s.trim_end().to_string())
}

fn field<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    line.strip_prefix(key)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("expected `{key} <n>`, got `{line}`")))
}
