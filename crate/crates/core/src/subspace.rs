//! Global-level denoising: a learned soft mask over the covariance eigenbasis of
//! each modality's latent features, plus the inter-class orthogonality and
//! subspace-projection alignment losses that shape it.

use log::warn;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SymEigen};
use crate::nn::{Mlp, Tape};

pub fn encode(encoder: &Mlp, x: &Matrix) -> Result<(Matrix, Tape)> {
    encoder.forward(x)
}

/// Eigendecomposition of the ridged covariance of `z`, eigenvalues descending.
pub fn build_subspace(z: &Matrix) -> Result<SymEigen> {
    let (_, mut cov) = linalg::mean_and_covariance(z)?;
    let ridge = linalg::default_ridge(&cov);
    for i in 0..cov.rows() {
        cov[(i, i)] += ridge;
    }
    linalg::sym_eigendecompose(&cov)
}

/// `w = σ(φ_λ(λ))`; the mask network ends in a sigmoid.
pub fn spectral_mask(mask_net: &Mlp, eigenvalues: &[f64]) -> Result<(Vec<f64>, Tape)> {
    let (w, tape) = mask_net.forward(&Matrix::row_vector(eigenvalues))?;
    Ok((w.into_vec(), tape))
}

/// `U diag(w) Uᵀ`
pub fn projector(basis: &Matrix, mask: &[f64]) -> Result<Matrix> {
    basis.scale_columns(mask)?.matmul_t(basis)
}

/// `h = z U diag(w) Uᵀ`
pub fn filter(z: &Matrix, basis: &Matrix, mask: &[f64]) -> Result<Matrix> {
    if z.cols() != basis.rows() {
        return Err(Error::dims("filter", basis.rows(), z.cols()));
    }
    z.matmul(&projector(basis, mask)?)
}

/// Gradients of a loss through [`filter`]: returns `(∂L/∂z, ∂L/∂w)`.
pub fn filter_backward(z: &Matrix, basis: &Matrix, mask: &[f64], dh: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let p = projector(basis, mask)?;
    let dz = dh.matmul(&p)?;
    let zu = z.matmul(basis)?;
    let du = dh.matmul(basis)?;
    let dw = (0..mask.len())
        .map(|k| (0..z.rows()).map(|i| zu[(i, k)] * du[(i, k)]).sum())
        .collect();
    Ok((dz, dw))
}

/// Mask and filtered features of one modality.
#[derive(Clone, Debug)]
pub struct MaskedFilter {
    pub mask: Vec<f64>,
    pub h: Matrix,
    pub tape: Tape,
}

pub fn mask_and_filter(z: &Matrix, eigen: &SymEigen, mask_net: &Mlp) -> Result<MaskedFilter> {
    if eigen.dim() != mask_net.input_dim() {
        return Err(Error::dims("mask_and_filter eigenvalues", mask_net.input_dim(), eigen.dim()));
    }
    let (mask, tape) = spectral_mask(mask_net, &eigen.eigenvalues)?;
    let h = filter(z, &eigen.basis, &mask)?;
    Ok(MaskedFilter { mask, h, tape })
}

/// Value and per-modality `∂L/∂h` of the inter-class orthogonality loss.
///
/// Per modality, class means of `h` are normalised and their Gram matrix is
/// compared with the identity on off-diagonal entries:
/// `L_m = Σ_{c≠c'} (ûᶜ·ûᶜ')² / (C(C−1))`. The loss is the mean of `L_m` over
/// modalities. Classes absent from the batch are skipped.
pub fn loss_orthogonality(hs: &[Matrix], labels: &[usize], num_classes: usize) -> Result<(f64, Vec<Matrix>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(hs.len());
    let m_count = hs.len().max(1) as f64;
    for h in hs {
        if h.rows() != labels.len() {
            return Err(Error::dims("loss_orthogonality labels", h.rows(), labels.len()));
        }
        let d = h.cols();
        let mut sums = Matrix::zeros(num_classes, d);
        let mut counts = vec![0usize; num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::invalid("labels", format!("label {y} outside [0, {num_classes})")));
            }
            counts[y] += 1;
            for (s, v) in sums.row_mut(y).iter_mut().zip(h.row(i)) {
                *s += v;
            }
        }
        let present: Vec<usize> = (0..num_classes).filter(|&c| counts[c] > 0).collect();
        if present.len() < num_classes {
            warn!("orthogonality loss: {} classes absent from batch", num_classes - present.len());
        }
        let mut grad = Matrix::zeros(h.rows(), d);
        let c = present.len();
        if c < 2 {
            grads.push(grad);
            continue;
        }
        let norm = 1.0 / (c * (c - 1)) as f64;
        let means: Vec<Vec<f64>> = present
            .iter()
            .map(|&k| sums.row(k).iter().map(|s| s / counts[k] as f64).collect())
            .collect();
        let radii: Vec<f64> = means.iter().map(|v| linalg::dot(v, v).sqrt().max(1e-12)).collect();
        let units: Vec<Vec<f64>> = means
            .iter()
            .zip(&radii)
            .map(|(v, r)| v.iter().map(|x| x / r).collect())
            .collect();
        let mut loss = 0.0;
        let mut d_units = vec![vec![0.0; d]; c];
        for a in 0..c {
            for b in 0..c {
                if a == b {
                    continue;
                }
                let g = linalg::dot(&units[a], &units[b]);
                loss += g * g;
                // Each ordered pair contributes 2g to both ends.
                for j in 0..d {
                    d_units[a][j] += 2.0 * g * units[b][j] * norm;
                    d_units[b][j] += 2.0 * g * units[a][j] * norm;
                }
            }
        }
        total += loss * norm;
        for (slot, &k) in present.iter().enumerate() {
            let u = &units[slot];
            let gu = &d_units[slot];
            let proj = linalg::dot(u, gu);
            let d_mean: Vec<f64> = (0..d).map(|j| (gu[j] - u[j] * proj) / radii[slot] / m_count).collect();
            let inv_n = 1.0 / counts[k] as f64;
            for (i, &y) in labels.iter().enumerate() {
                if y == k {
                    for (g, dm) in grad.row_mut(i).iter_mut().zip(&d_mean) {
                        *g += dm * inv_n;
                    }
                }
            }
        }
        grads.push(grad);
    }
    Ok((total / m_count, grads))
}

/// Gradients of the subspace-projection alignment loss.
#[derive(Clone, Debug)]
pub struct AlignmentGrads {
    pub dz: Vec<Matrix>,
    pub dmask: Vec<Vec<f64>>,
}

/// `L_a = Σ_{m≠m'} ‖zᵐUᵐdiag(wᵐ) − zᵐ'Uᵐ'diag(wᵐ')‖²_F / N` over ordered pairs.
pub fn loss_subspace_alignment(zs: &[Matrix], bases: &[&Matrix], masks: &[Vec<f64>]) -> Result<(f64, AlignmentGrads)> {
    let m = zs.len();
    if bases.len() != m || masks.len() != m {
        return Err(Error::dims("loss_subspace_alignment modalities", m, format!("{}/{}", bases.len(), masks.len())));
    }
    let zero_grads = || AlignmentGrads {
        dz: zs.iter().map(|z| Matrix::zeros(z.rows(), z.cols())).collect(),
        dmask: masks.iter().map(|w| vec![0.0; w.len()]).collect(),
    };
    if m < 2 {
        warn!("subspace alignment needs two modalities; returning 0");
        return Ok((0.0, zero_grads()));
    }
    let n = zs[0].rows();
    let d = zs[0].cols();
    for z in zs {
        if z.shape() != (n, d) {
            return Err(Error::dims("loss_subspace_alignment latent", format!("({n}, {d})"), format!("{:?}", z.shape())));
        }
    }
    let rotated: Vec<Matrix> = zs.iter().zip(bases).map(|(z, u)| z.matmul(u)).collect::<Result<_>>()?;
    let projected: Vec<Matrix> = rotated
        .iter()
        .zip(masks)
        .map(|(r, w)| r.scale_columns(w))
        .collect::<Result<_>>()?;
    let inv_n = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut d_proj: Vec<Matrix> = (0..m).map(|_| Matrix::zeros(n, d)).collect();
    for a in 0..m {
        for b in 0..m {
            if a == b {
                continue;
            }
            let diff = projected[a].sub(&projected[b])?;
            loss += diff.frobenius_sq() * inv_n;
            d_proj[a].axpy(2.0 * inv_n, &diff)?;
            d_proj[b].axpy(-2.0 * inv_n, &diff)?;
        }
    }
    let mut grads = zero_grads();
    for k in 0..m {
        let scaled = d_proj[k].scale_columns(&masks[k])?;
        grads.dz[k] = scaled.matmul_t(bases[k])?;
        for j in 0..d {
            grads.dmask[k][j] = (0..n).map(|i| rotated[k][(i, j)] * d_proj[k][(i, j)]).sum();
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_encoder_passes_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = Mlp::new(&[3, 3], Activation::Relu, Activation::Linear, &mut rng);
        enc.layers_mut()[0].weight = Matrix::identity(3);
        let x = random(&mut rng, 4, 3);
        let (z, _) = encode(&enc, &x).unwrap();
        assert_eq!(z, x);
        enc.layers_mut()[0].weight = random(&mut rng, 3, 3);
        let (z, _) = encode(&enc, &Matrix::zeros(2, 3)).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_varying_axis_is_top_eigenvector() {
        let mut z = Matrix::zeros(10, 3);
        for i in 0..10 {
            z[(i, 1)] = i as f64;
        }
        let e = build_subspace(&z).unwrap();
        let top = e.basis.column(0);
        assert!((top[1] - 1.0).abs() < 1e-12 && top[0].abs() < 1e-12 && top[2].abs() < 1e-12);
    }

    #[test]
    fn isotropic_latent_has_flat_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Matrix::from_vec(
            4000,
            4,
            (0..16000).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect(),
        )
        .unwrap();
        let e = build_subspace(&z).unwrap();
        for l in &e.eigenvalues {
            assert!((l - 1.0).abs() < 0.1, "{:?}", e.eigenvalues);
        }
    }

    #[test]
    fn full_and_empty_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random(&mut rng, 8, 4);
        let e = build_subspace(&z).unwrap();
        let h = filter(&z, &e.basis, &[1.0; 4]).unwrap();
        assert!(h.sub(&z).unwrap().max_abs() < 1e-6);
        let h = filter(&z, &e.basis, &[0.0; 4]).unwrap();
        assert!(h.max_abs() == 0.0);
    }

    #[test]
    fn saturated_mask_net_is_identity_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random(&mut rng, 6, 3);
        let e = build_subspace(&z).unwrap();
        let mut net = Mlp::new(&[3, 3], Activation::Relu, Activation::Sigmoid, &mut rng);
        net.layers_mut()[0].weight = Matrix::zeros(3, 3);
        net.layers_mut()[0].bias = vec![40.0; 3];
        let out = mask_and_filter(&z, &e, &net).unwrap();
        assert!(out.h.sub(&z).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn hand_two_dim_filter() {
        let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let h = filter(&z, &Matrix::identity(2), &[1.0, 0.0]).unwrap();
        assert_eq!(h, z);
        let z = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let h = filter(&z, &Matrix::identity(2), &[1.0, 0.0]).unwrap();
        assert_eq!(h.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn orthonormal_means_have_zero_loss() {
        let h = Matrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let (l, _) = loss_orthogonality(&[h], &[0, 1, 2], 3).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn identical_means_cost_one_per_pair() {
        let h = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let (l, _) = loss_orthogonality(&[h], &[0, 1], 2).unwrap();
        // both ordered pairs have Gram entry 1; averaged over C(C-1) = 2
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forty_five_degree_means() {
        let h = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let (l, _) = loss_orthogonality(&[h], &[0, 1], 2).unwrap();
        assert!((l - 0.5).abs() < 1e-12);
    }

    #[test]
    fn alignment_identical_modalities_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random(&mut rng, 5, 3);
        let u = Matrix::identity(3);
        let w = vec![0.3, 0.7, 0.9];
        let (l, _) = loss_subspace_alignment(&[z.clone(), z], &[&u, &u], &[w.clone(), w]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn alignment_offset_counts_both_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random(&mut rng, 4, 3);
        let delta = random(&mut rng, 4, 3);
        let u = Matrix::identity(3);
        let w = vec![1.0; 3];
        let (l, _) = loss_subspace_alignment(&[p.clone(), p.add(&delta).unwrap()], &[&u, &u], &[w.clone(), w]).unwrap();
        assert!((l - 2.0 * delta.frobenius_sq() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn alignment_zero_masks_and_single_modality() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b) = (random(&mut rng, 4, 3), random(&mut rng, 4, 3));
        let u = Matrix::identity(3);
        let (l, _) = loss_subspace_alignment(&[a.clone(), b], &[&u, &u], &[vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = loss_subspace_alignment(&[a], &[&u], &[vec![1.0; 3]]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn binary_mask_filter_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = random(&mut rng, 6, 4);
        let e = build_subspace(&z).unwrap();
        let w = [1.0, 0.0, 1.0, 0.0];
        let once = filter(&z, &e.basis, &w).unwrap();
        let twice = filter(&once, &e.basis, &w).unwrap();
        assert!(once.sub(&twice).unwrap().max_abs() < 1e-12);
    }
}
