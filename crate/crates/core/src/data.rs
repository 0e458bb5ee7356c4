//! Multimodal datasets: synthetic generation, CSV ingestion, standardisation,
//! stratified splitting and the two noise-injection operators.
//!
//! Every sample carries a stable `id` (its row in the source data). Per-entry
//! noise is drawn from a generator keyed by `(seed, modality, id)`, so injecting
//! noise before or after a split yields the same corrupted values.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seed::mix;

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    pub modalities: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub ids: Vec<u64>,
}

impl MultimodalDataset {
    pub fn new(modalities: Vec<Matrix>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ids = (0..labels.len() as u64).collect();
        let ds = MultimodalDataset {
            modalities,
            labels,
            num_classes,
            ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.modalities.is_empty() {
            return Err(Error::invalid("modalities", "at least one modality is required"));
        }
        for (m, x) in self.modalities.iter().enumerate() {
            if x.rows() != n {
                return Err(Error::dims("modality rows", n, format!("{} (modality {m})", x.rows())));
            }
            if !x.is_finite() {
                return Err(Error::NonFinite(format!("modality {m} features")));
            }
        }
        if self.ids.len() != n {
            return Err(Error::dims("sample ids", n, self.ids.len()));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least two classes"));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::invalid("labels", format!("label {y} outside [0, {})", self.num_classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality_dims(&self) -> Vec<usize> {
        self.modalities.iter().map(Matrix::cols).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn subset(&self, idx: &[usize]) -> MultimodalDataset {
        MultimodalDataset {
            modalities: self.modalities.iter().map(|x| x.select_rows(idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub num_classes: usize,
    pub modality_dims: Vec<usize>,
    pub latent_dim: usize,
    /// Weight of the `tanh` term in `f = L + s·tanh(L)`.
    pub nonlinearity: f64,
    /// Std-dev of the i.i.d. jitter added after standardisation.
    pub jitter: f64,
    /// Norm of each class mean in latent space.
    pub class_separation: f64,
    /// Std-dev of the within-class latent spread.
    pub within_class_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 600,
            num_classes: 4,
            modality_dims: vec![20, 30],
            latent_dim: 8,
            nonlinearity: 0.3,
            jitter: 0.05,
            class_separation: 3.0,
            within_class_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "need at least two classes"));
        }
        if self.modality_dims.is_empty() {
            return Err(Error::invalid("modality_dims", "need at least one modality"));
        }
        if self.latent_dim == 0 || self.modality_dims.iter().any(|&d| d < self.latent_dim) {
            return Err(Error::invalid("latent_dim", "must be positive and not exceed any modality dimension"));
        }
        if self.n < 2 * self.num_classes {
            return Err(Error::invalid("n", "every class needs at least two samples"));
        }
        for (field, v) in [
            ("nonlinearity", self.nonlinearity),
            ("jitter", self.jitter),
            ("class_separation", self.class_separation),
            ("within_class_std", self.within_class_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(field, "must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Class-conditioned latent factors shared by all modalities, pushed through a
/// fixed random linear map per modality with a mild `tanh` bend, standardised
/// per feature and jittered.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultimodalDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x5a17));
    let (n, c, k) = (spec.n, spec.num_classes, spec.latent_dim);

    let mut means = Matrix::zeros(c, k);
    for class in 0..c {
        let v: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for (j, x) in v.iter().enumerate() {
            means[(class, j)] = spec.class_separation * x / norm;
        }
    }

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    let mut latent = Matrix::zeros(n, k);
    for (i, &y) in labels.iter().enumerate() {
        for j in 0..k {
            let e: f64 = rng.sample(StandardNormal);
            latent[(i, j)] = means[(y, j)] + spec.within_class_std * e;
        }
    }

    let mut modalities = Vec::with_capacity(spec.modality_dims.len());
    for &d in &spec.modality_dims {
        let scale = 1.0 / (k as f64).sqrt();
        let map = Matrix::from_vec(
            k,
            d,
            (0..k * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
        )?;
        let lin = latent.matmul(&map)?;
        let bent = lin.map(|v| v + spec.nonlinearity * v.tanh());
        let mut x = Standardizer::fit(&bent).transform(&bent)?;
        for v in x.as_mut_slice() {
            let e: f64 = rng.sample(StandardNormal);
            *v += spec.jitter * e;
        }
        modalities.push(x);
    }
    MultimodalDataset::new(modalities, labels, c)
}

/// Per-feature z-score using population statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let mean = x.column_means();
        let n = x.rows().max(1) as f64;
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::dims("Standardizer::transform", self.mean.len(), x.cols()));
        }
        let inv: Vec<f64> = self.std.iter().map(|s| 1.0 / s).collect();
        x.sub_row_vector(&self.mean)?.scale_columns(&inv)
    }
}

/// Standardises every modality of `train` and `test` with statistics of `train`.
pub fn standardize_pair(train: &MultimodalDataset, test: &MultimodalDataset) -> Result<(MultimodalDataset, MultimodalDataset)> {
    let mut tr = train.clone();
    let mut te = test.clone();
    for m in 0..train.num_modalities() {
        let s = Standardizer::fit(&train.modalities[m]);
        tr.modalities[m] = s.transform(&train.modalities[m])?;
        te.modalities[m] = s.transform(&test.modalities[m])?;
    }
    Ok((tr, te))
}

fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: display.clone(),
            reason: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            path: display.clone(),
            reason: e.to_string(),
        })?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>().map_err(|_| Error::Csv {
                    path: display.clone(),
                    reason: format!("non-numeric cell `{cell}` at row {} column {}", r + 1, c + 1),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows).map_err(|e| Error::Csv {
        path: display,
        reason: e.to_string(),
    })
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::Csv {
        path: display.clone(),
        reason: e.to_string(),
    })?;
    let mut labels = Vec::new();
    for (r, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        labels.push(t.parse::<usize>().map_err(|_| Error::Csv {
            path: display.clone(),
            reason: format!("non-integer label `{t}` at line {}", r + 1),
        })?);
    }
    Ok(labels)
}

/// Reads one feature CSV (header row, decimals) per modality and a label file
/// with one integer per line. Values are returned unnormalised; see
/// [`standardize_pair`] for train-fitted normalisation.
pub fn load_csv<P: AsRef<Path>>(paths: &[P], label_path: impl AsRef<Path>) -> Result<MultimodalDataset> {
    let labels = read_labels(label_path.as_ref())?;
    let mut modalities = Vec::with_capacity(paths.len());
    for p in paths {
        let x = read_matrix_csv(p.as_ref())?;
        if x.rows() != labels.len() {
            return Err(Error::Csv {
                path: p.as_ref().display().to_string(),
                reason: format!("row count mismatch: {} feature rows vs {} labels", x.rows(), labels.len()),
            });
        }
        modalities.push(x);
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    MultimodalDataset::new(modalities, labels, num_classes)
}

/// Writes a matrix as CSV with `f0,f1,...` headers. Values use Rust's shortest
/// round-trip float formatting, so a write/read cycle is lossless.
pub fn write_matrix_csv(path: impl AsRef<Path>, x: &Matrix) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..x.cols()).map(|j| format!("f{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_lines<T: std::fmt::Display>(path: impl AsRef<Path>, values: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path)?);
    for v in values {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Severity of additive Gaussian noise.
    pub epsilon: f64,
    /// Fraction of samples whose cross-modality correspondence is broken.
    pub eta: f64,
    /// Modalities that receive noise; empty means all.
    pub target_modalities: Vec<usize>,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            epsilon: 0.0,
            eta: 0.0,
            target_modalities: Vec::new(),
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn clean() -> Self {
        NoiseSpec::default()
    }

    pub fn new(epsilon: f64, eta: f64, seed: u64) -> Self {
        NoiseSpec {
            epsilon,
            eta,
            seed,
            ..NoiseSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid("epsilon", "must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid("eta", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn targets(&self, m: usize) -> Vec<usize> {
        if self.target_modalities.is_empty() {
            (0..m).collect()
        } else {
            self.target_modalities.iter().copied().filter(|&t| t < m).collect()
        }
    }
}

/// `x + ε·g`, `g ~ N(0, I)` per entry, for each target modality.
pub fn inject_modality_noise(ds: &MultimodalDataset, spec: &NoiseSpec) -> Result<MultimodalDataset> {
    spec.validate()?;
    let mut out = ds.clone();
    if spec.epsilon == 0.0 {
        return Ok(out);
    }
    for m in spec.targets(ds.num_modalities()) {
        let x = &mut out.modalities[m];
        for (i, &id) in ds.ids.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(spec.seed, 0xe751 + m as u64), id));
            for v in x.row_mut(i) {
                let g: f64 = rng.sample(StandardNormal);
                *v += spec.epsilon * g;
            }
        }
    }
    Ok(out)
}

/// Like [`inject_modality_noise`] but only on the listed feature columns of one modality.
pub fn inject_column_noise(ds: &MultimodalDataset, modality: usize, columns: &[usize], epsilon: f64, seed: u64) -> Result<MultimodalDataset> {
    if modality >= ds.num_modalities() {
        return Err(Error::invalid("modality", format!("{modality} out of range")));
    }
    let mut out = ds.clone();
    let x = &mut out.modalities[modality];
    let d = x.cols();
    if let Some(&c) = columns.iter().find(|&&c| c >= d) {
        return Err(Error::invalid("columns", format!("column {c} out of range for width {d}")));
    }
    for (i, &id) in ds.ids.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, 0xc01 + modality as u64), id));
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for &c in columns {
            x[(i, c)] += epsilon * g[c];
        }
    }
    Ok(out)
}

/// Breaks correspondence for `⌊ηN⌋` samples: inside the selected subset, rows
/// of every target modality except the label anchor (modality 0) are moved by a
/// random cyclic permutation, so no selected row stays in place.
///
/// Returns the corrupted dataset and the sorted indices of affected samples.
pub fn inject_cross_modality_noise(ds: &MultimodalDataset, spec: &NoiseSpec) -> Result<(MultimodalDataset, Vec<usize>)> {
    spec.validate()?;
    let n = ds.len();
    let count = (spec.eta * n as f64 + 1e-9).floor() as usize;
    if spec.eta == 0.0 {
        return Ok((ds.clone(), Vec::new()));
    }
    if count <= 1 {
        warn!("cross-modality noise skipped: ⌊ηN⌋ = {count} rows cannot be permuted");
        return Ok((ds.clone(), Vec::new()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x5f0f));
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(&mut rng);
    let mut chosen: Vec<usize> = all[..count].to_vec();
    chosen.sort_unstable();

    let mut out = ds.clone();
    for m in spec.targets(ds.num_modalities()).into_iter().filter(|&m| m != 0) {
        // Sattolo's algorithm: a uniformly random single cycle, hence no fixed points.
        let mut perm: Vec<usize> = (0..count).collect();
        for i in (1..count).rev() {
            let j = rng.random_range(0..i);
            perm.swap(i, j);
        }
        let src = &ds.modalities[m];
        let dst = &mut out.modalities[m];
        for (k, &target) in chosen.iter().enumerate() {
            dst.row_mut(target).copy_from_slice(src.row(chosen[perm[k]]));
        }
    }
    Ok((out, chosen))
}

/// Modality-specific noise followed by cross-modality shuffling.
pub fn inject_noise(ds: &MultimodalDataset, spec: &NoiseSpec) -> Result<(MultimodalDataset, Vec<usize>)> {
    let noisy = inject_modality_noise(ds, spec)?;
    inject_cross_modality_noise(&noisy, spec)
}

/// Stratified split; within each class `round(fraction · n_c)` samples (at least
/// one on each side) go to training. Both parts keep the original row order.
pub fn split(ds: &MultimodalDataset, train_fraction: f64, seed: u64) -> Result<(MultimodalDataset, MultimodalDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid("train_fraction", "must lie strictly between 0 and 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5b1e));
    let mut train = BTreeSet::new();
    for class in 0..ds.num_classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.len() < 2 {
            return Err(Error::invalid(
                "labels",
                format!("class {class} has {} samples; a split needs at least 2", members.len()),
            ));
        }
        members.shuffle(&mut rng);
        let k = ((train_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train.extend(members[..k].iter().copied());
    }
    let train_idx: Vec<usize> = train.iter().copied().collect();
    let test_idx: Vec<usize> = (0..ds.len()).filter(|i| !train.contains(i)).collect();
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MultimodalDataset {
        generate_synthetic(&SyntheticSpec {
            n: 100,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn synthetic_shapes_and_balance() {
        let ds = generate_synthetic(&SyntheticSpec::default()).unwrap();
        assert_eq!(ds.len(), 600);
        assert_eq!(ds.modality_dims(), vec![20, 30]);
        assert_eq!(ds.class_counts(), vec![150; 4]);
    }

    #[test]
    fn synthetic_rejects_large_latent() {
        let spec = SyntheticSpec {
            latent_dim: 25,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let ds = small();
        let out = inject_modality_noise(&ds, &NoiseSpec::new(0.0, 0.0, 3)).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn modality_noise_variance() {
        let ds = generate_synthetic(&SyntheticSpec {
            n: 500,
            modality_dims: vec![20, 20],
            ..SyntheticSpec::default()
        })
        .unwrap();
        let noisy = inject_modality_noise(&ds, &NoiseSpec::new(5.0, 0.0, 9)).unwrap();
        let diff = noisy.modalities[0].sub(&ds.modalities[0]).unwrap();
        let n = diff.as_slice().len() as f64;
        let mean = diff.as_slice().iter().sum::<f64>() / n;
        let var = diff.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 25.0).abs() < 0.05 * 25.0, "variance {var}");
        assert_eq!(noisy.labels, ds.labels);
    }

    #[test]
    fn modality_noise_respects_targets() {
        let ds = small();
        let spec = NoiseSpec {
            epsilon: 1.0,
            target_modalities: vec![1],
            ..NoiseSpec::default()
        };
        let noisy = inject_modality_noise(&ds, &spec).unwrap();
        assert_eq!(noisy.modalities[0], ds.modalities[0]);
        assert_ne!(noisy.modalities[1], ds.modalities[1]);
        assert_eq!(noisy, inject_modality_noise(&ds, &spec).unwrap());
    }

    #[test]
    fn cross_noise_zero_eta() {
        let ds = small();
        let (out, idx) = inject_cross_modality_noise(&ds, &NoiseSpec::new(0.0, 0.0, 1)).unwrap();
        assert_eq!(out, ds);
        assert!(idx.is_empty());
    }

    #[test]
    fn cross_noise_counts_and_moves_rows() {
        let ds = generate_synthetic(&SyntheticSpec {
            n: 500,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (out, idx) = inject_cross_modality_noise(&ds, &NoiseSpec::new(0.0, 0.1, 4)).unwrap();
        assert_eq!(idx.len(), 50);
        for &i in &idx {
            assert_ne!(out.modalities[1].row(i), ds.modalities[1].row(i));
            assert_eq!(out.modalities[0].row(i), ds.modalities[0].row(i));
        }
        let untouched: Vec<usize> = (0..500).filter(|i| !idx.contains(i)).collect();
        for i in untouched {
            assert_eq!(out.modalities[1].row(i), ds.modalities[1].row(i));
        }
    }

    #[test]
    fn cross_noise_full_ratio_keeps_labels() {
        let ds = small();
        let (out, idx) = inject_cross_modality_noise(&ds, &NoiseSpec::new(0.0, 1.0, 2)).unwrap();
        assert_eq!(idx.len(), 100);
        assert_eq!(out.labels, ds.labels);
    }

    #[test]
    fn cross_noise_single_row_is_skipped() {
        let ds = small();
        let (out, idx) = inject_cross_modality_noise(&ds, &NoiseSpec::new(0.0, 0.015, 2)).unwrap();
        assert_eq!(out, ds);
        assert!(idx.is_empty());
    }

    #[test]
    fn invalid_eta_is_rejected() {
        assert!(inject_cross_modality_noise(&small(), &NoiseSpec::new(0.0, 1.5, 0)).is_err());
    }

    #[test]
    fn stratified_split_counts() {
        let ds = small();
        let (train, test) = split(&ds, 0.8, 5).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        assert_eq!(train.class_counts(), vec![20; 4]);
        assert_eq!(test.class_counts(), vec![5; 4]);
        let tr: BTreeSet<u64> = train.ids.iter().copied().collect();
        assert!(test.ids.iter().all(|id| !tr.contains(id)));
        assert_eq!(tr.len() + test.len(), 100);
        let (train2, _) = split(&ds, 0.8, 5).unwrap();
        assert_eq!(train, train2);
    }

    #[test]
    fn split_rejects_singleton_class() {
        let x = Matrix::zeros(3, 2);
        let ds = MultimodalDataset::new(vec![x], vec![0, 0, 1], 2).unwrap();
        assert!(split(&ds, 0.5, 0).is_err());
    }

    #[test]
    fn noise_commutes_with_split() {
        let ds = small();
        let spec = NoiseSpec::new(2.0, 0.0, 77);
        let (a, _) = split(&inject_modality_noise(&ds, &spec).unwrap(), 0.7, 1).unwrap();
        let (b, _) = split(&ds, 0.7, 1).unwrap();
        let b = inject_modality_noise(&b, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn standardizer_hand_case() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let z = Standardizer::fit(&x).transform(&x).unwrap();
        let expected = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (v, e) in z.as_slice().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        let y = dir.path().join("y.txt");
        std::fs::write(&a, "x,y\n1,2\n3,4\n5,6\n").unwrap();
        std::fs::write(&b, "z\n0.5\n-1\n2.25\n").unwrap();
        std::fs::write(&y, "0\n1\n1\n").unwrap();
        let ds = load_csv(&[&a, &b], &y).unwrap();
        assert_eq!(ds.modalities[0].to_rows(), vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(ds.modalities[1].column(0), vec![0.5, -1.0, 2.25]);
        assert_eq!(ds.labels, vec![0, 1, 1]);

        std::fs::write(&b, "z\n0.5\n-1\n").unwrap();
        let err = load_csv(&[&a, &b], &y).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('3'), "{err}");

        std::fs::write(&b, "z\n0.5\nfoo\n1\n").unwrap();
        let err = load_csv(&[&a, &b], &y).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("column 1"), "{err}");
    }
}
