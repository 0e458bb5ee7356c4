//! Experiment protocols behind the command-line tool: data preparation,
//! training, evaluation with and without enhancement, the ablation grid and
//! noise materialization.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::{DataSource, ExperimentConfig};
use crate::data::{self, MultimodalDataset, NoiseSpec};
use crate::error::{Error, Result};
use crate::experts::softmax;
use crate::metrics::{self, EvalReport};
use crate::model::{Ablation, Inference, Model};
use crate::seed::{mix, SeedStreams};
use crate::train::{self, History};

/// Standardized train/test splits of one seed after noise injection.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: MultimodalDataset,
    pub test: MultimodalDataset,
    pub clean_test: MultimodalDataset,
    pub corrupted_train: Vec<usize>,
    pub corrupted_test: Vec<usize>,
}

fn load_source(source: &DataSource, seed: u64) -> Result<MultimodalDataset> {
    match source {
        DataSource::Synthetic(spec) => data::generate_synthetic(&data::SyntheticSpec {
            seed: mix(spec.seed, seed),
            ..spec.clone()
        }),
        DataSource::Csv { modalities, labels } => data::load_csv(modalities, labels),
    }
}

fn seeded(spec: &NoiseSpec, stream: u64) -> NoiseSpec {
    NoiseSpec {
        seed: mix(stream, spec.seed),
        ..spec.clone()
    }
}

/// Generate or load, split, standardize on the training part, then corrupt
/// each part with its own noise specification.
pub fn prepare(source: &DataSource, train_fraction: f64, train_noise: &NoiseSpec, test_noise: &NoiseSpec, seed: u64) -> Result<RunData> {
    let streams = SeedStreams::new(seed);
    let ds = load_source(source, streams.data())?;
    let (train, test) = data::split(&ds, train_fraction, streams.data())?;
    let (train, test) = data::standardize_pair(&train, &test)?;
    let (noisy_train, corrupted_train) = data::inject_noise(&train, &seeded(train_noise, streams.noise()))?;
    let (noisy_test, corrupted_test) = data::inject_noise(&test, &seeded(test_noise, mix(streams.noise(), 1)))?;
    Ok(RunData {
        train: noisy_train,
        test: noisy_test,
        clean_test: test,
        corrupted_train,
        corrupted_test,
    })
}

pub fn prepare_from_config(cfg: &ExperimentConfig, seed: u64) -> Result<RunData> {
    prepare(&cfg.data, cfg.train_fraction, &cfg.train_noise, &cfg.test_noise, seed)
}

/// Builds and trains a model with the config's model and optimizer settings.
pub fn train_model(cfg: &ExperimentConfig, ablation: Ablation, train_set: &MultimodalDataset, seed: u64) -> Result<(Model, History)> {
    let streams = SeedStreams::new(seed);
    let model_cfg = crate::model::ModelConfig {
        ablation,
        ..cfg.model.clone()
    };
    let mut model = Model::new(&train_set.modality_dims(), train_set.num_classes, model_cfg, streams.init())?;
    let history = train::train(&mut model, train_set, &cfg.train, streams.shuffle())?;
    Ok((model, history))
}

/// Positive-class probabilities for two-class problems.
fn positive_scores(inf: &Inference) -> Option<Vec<f64>> {
    (inf.logits.cols() == 2).then(|| (0..inf.logits.rows()).map(|i| softmax(inf.logits.row(i))[1]).collect())
}

/// Runs inference with `iterations` enhancement steps and scores it.
pub fn evaluate_model(model: &Model, test: &MultimodalDataset, iterations: usize) -> Result<(EvalReport, Inference)> {
    let inf = model.infer(&test.modalities, iterations, Some(&test.labels))?;
    let scores = positive_scores(&inf);
    let report = metrics::evaluate(&inf.predicted(), &test.labels, model.num_classes, scores.as_deref())?;
    Ok((report, inf))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Metric names and accessors shared by the summary tables.
fn metric_columns(reports: &[&EvalReport]) -> Vec<(&'static str, Vec<f64>)> {
    let mut cols = vec![
        ("accuracy", reports.iter().map(|r| r.accuracy).collect()),
        ("weighted_f1", reports.iter().map(|r| r.weighted_f1).collect()),
        ("macro_f1", reports.iter().map(|r| r.macro_f1).collect()),
    ];
    if reports.iter().all(|r| r.binary_f1.is_some()) {
        cols.push(("f1", reports.iter().map(|r| r.binary_f1.unwrap_or(f64::NAN)).collect()));
    }
    if reports.iter().all(|r| r.auc.is_some()) {
        cols.push(("auc", reports.iter().map(|r| r.auc.unwrap_or(f64::NAN)).collect()));
    }
    cols
}

/// A labelled group of per-seed reports rendered as one table row.
pub struct SummaryRow<'a> {
    pub label: Vec<String>,
    pub reports: Vec<&'a EvalReport>,
}

/// Markdown and CSV tables of `mean ± std` over seeds.
pub fn summary_tables(label_names: &[&str], rows: &[SummaryRow]) -> (String, String) {
    let metric_names: Vec<&str> = rows
        .first()
        .map(|r| metric_columns(&r.reports).into_iter().map(|(n, _)| n).collect())
        .unwrap_or_default();
    let mut md = String::new();
    let header: Vec<String> = label_names.iter().map(|s| s.to_string()).chain(metric_names.iter().map(|s| s.to_string())).collect();
    let _ = writeln!(md, "| {} |", header.join(" | "));
    let _ = writeln!(md, "|{}", "---|".repeat(header.len()));
    let mut csv = label_names.join(",");
    for m in &metric_names {
        let _ = write!(csv, ",{m}_mean,{m}_std");
    }
    csv.push_str(",seeds\n");
    for row in rows {
        let cols = metric_columns(&row.reports);
        let mut cells = row.label.clone();
        let mut csv_cells = row.label.clone();
        for (_, values) in &cols {
            let (m, s) = mean_std(values);
            cells.push(format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s));
            csv_cells.push(format!("{m:.6}"));
            csv_cells.push(format!("{s:.6}"));
        }
        csv_cells.push(row.reports.len().to_string());
        let _ = writeln!(md, "| {} |", cells.join(" | "));
        csv.push_str(&csv_cells.join(","));
        csv.push('\n');
    }
    (md, csv)
}

fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("seed_{seed}"))
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

pub fn checkpoint_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("model.ckpt")
}

/// Trains one model per seed; writes `seed_<s>/model.ckpt` and `seed_<s>/history.csv`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    create_dir(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let run = prepare_from_config(cfg, seed)?;
        let (model, history) = train_model(cfg, cfg.model.ablation, &run.train, seed)?;
        let dir = seed_dir(cfg, seed);
        create_dir(&dir)?;
        history.write_csv(dir.join("history.csv"))?;
        let path = checkpoint_path(cfg, seed);
        model.save(&path)?;
        info!("seed {seed}: checkpoint written to {}", path.display());
        out.push(path);
    }
    Ok(out)
}

/// Per-seed reports at `E = 0` and at the configured `E`.
pub struct EvalSummary {
    pub seeds: Vec<u64>,
    pub without: Vec<EvalReport>,
    pub with: Vec<EvalReport>,
    pub markdown: String,
}

/// Evaluates saved checkpoints (or `checkpoint` for every seed) on each
/// seed's test split, without and with enhancement. Writes per-seed
/// reports and traces plus `eval_summary.{md,csv}`.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    create_dir(&cfg.out_dir)?;
    let e = cfg.model.ttce.iterations;
    let mut without = Vec::new();
    let mut with = Vec::new();
    for &seed in &cfg.seeds {
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| checkpoint_path(cfg, seed));
        let model = Model::load(&path).map_err(|err| match err {
            Error::Io(io) => Error::Config {
                field: "checkpoint".into(),
                reason: format!("{}: {io} (run `train` first)", path.display()),
            },
            other => other,
        })?;
        let run = prepare_from_config(cfg, seed)?;
        let (r0, _) = evaluate_model(&model, &run.test, 0)?;
        let (re, inf) = evaluate_model(&model, &run.test, e)?;
        let dir = seed_dir(cfg, seed);
        create_dir(&dir)?;
        let mut csv = format!("iterations,{}\n", EvalReport::CSV_HEADER);
        csv.push_str(&format!("0,{}\n{e},{}\n", r0.csv_row(), re.csv_row()));
        std::fs::write(dir.join("eval.csv"), csv)?;
        std::fs::write(dir.join("eval.txt"), format!("E = 0\n{}\nE = {e}\n{}", r0.table(), re.table()))?;
        if let Some(state) = &inf.state {
            state.write_trace_csv(dir.join("trace.csv"))?;
        }
        info!("seed {seed}: accuracy {:.4} (E = 0) -> {:.4} (E = {e})", r0.accuracy, re.accuracy);
        without.push(r0);
        with.push(re);
    }
    let rows = [
        SummaryRow {
            label: vec!["0".into()],
            reports: without.iter().collect(),
        },
        SummaryRow {
            label: vec![e.to_string()],
            reports: with.iter().collect(),
        },
    ];
    let (md, csv) = summary_tables(&["iterations"], &rows);
    std::fs::write(cfg.out_dir.join("eval_summary.md"), &md)?;
    std::fs::write(cfg.out_dir.join("eval_summary.csv"), csv)?;
    Ok(EvalSummary {
        seeds: cfg.seeds.clone(),
        without,
        with,
        markdown: md,
    })
}

/// The four rows of the ablation grid, in table order.
pub fn ablation_grid() -> [(&'static str, Ablation); 4] {
    [
        ("full", Ablation::full()),
        ("-TTCE", Ablation::without_ttce()),
        ("-TTCE-SACA", Ablation::without_ttce_saca()),
        ("none", Ablation::none()),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Train and test both corrupted by the test noise specification.
    SameNoise,
    /// Clean training, corrupted test.
    UnseenNoise,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::SameNoise => "same-noise",
            Protocol::UnseenNoise => "unseen-noise",
        }
    }

    pub fn prepare(&self, cfg: &ExperimentConfig, seed: u64) -> Result<RunData> {
        let train_noise = match self {
            Protocol::SameNoise => cfg.test_noise.clone(),
            Protocol::UnseenNoise => NoiseSpec::clean(),
        };
        prepare(&cfg.data, cfg.train_fraction, &train_noise, &cfg.test_noise, seed)
    }
}

pub struct AblationResult {
    pub protocol: Protocol,
    pub variant: &'static str,
    pub reports: Vec<EvalReport>,
}

/// Trains and evaluates the four-row grid under both protocols. Writes
/// `ablation.md` and `ablation.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<Vec<AblationResult>> {
    create_dir(&cfg.out_dir)?;
    let mut results = Vec::new();
    for protocol in [Protocol::SameNoise, Protocol::UnseenNoise] {
        for (variant, ablation) in ablation_grid() {
            let mut reports = Vec::new();
            for &seed in &cfg.seeds {
                let run = protocol.prepare(cfg, seed)?;
                let (model, _) = train_model(cfg, ablation, &run.train, seed)?;
                let (report, _) = evaluate_model(&model, &run.test, cfg.model.ttce.iterations)?;
                info!("{} {variant} seed {seed}: accuracy {:.4}", protocol.name(), report.accuracy);
                reports.push(report);
            }
            results.push(AblationResult { protocol, variant, reports });
        }
    }
    let flag = |b: bool| if b { "✓" } else { "" }.to_string();
    let rows: Vec<SummaryRow> = results
        .iter()
        .map(|r| {
            let ab = ablation_grid().iter().find(|(n, _)| *n == r.variant).map(|(_, a)| *a).unwrap_or_default();
            SummaryRow {
                label: vec![r.protocol.name().into(), r.variant.into(), flag(ab.assa), flag(ab.saca), flag(ab.ttce)],
                reports: r.reports.iter().collect(),
            }
        })
        .collect();
    let (md, csv) = summary_tables(&["protocol", "variant", "ASSA", "SACA", "TTCE"], &rows);
    std::fs::write(cfg.out_dir.join("ablation.md"), md)?;
    std::fs::write(cfg.out_dir.join("ablation.csv"), csv.replace('✓', "1"))?;
    Ok(results)
}

/// Writes clean and corrupted standardized splits per seed under
/// `noise/seed_<s>/`, plus the corrupted index sets.
pub fn cmd_noise(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for &seed in &cfg.seeds {
        let streams = SeedStreams::new(seed);
        let ds = load_source(&cfg.data, streams.data())?;
        let (train, test) = data::split(&ds, cfg.train_fraction, streams.data())?;
        let (train, test) = data::standardize_pair(&train, &test)?;
        let run = prepare_from_config(cfg, seed)?;
        let dir = cfg.out_dir.join("noise").join(format!("seed_{seed}"));
        create_dir(&dir)?;
        for (part, clean, noisy, index) in [("train", &train, &run.train, &run.corrupted_train), ("test", &test, &run.test, &run.corrupted_test)] {
            for m in 0..clean.num_modalities() {
                data::write_matrix_csv(dir.join(format!("{part}_clean_m{m}.csv")), &clean.modalities[m])?;
                data::write_matrix_csv(dir.join(format!("{part}_noisy_m{m}.csv")), &noisy.modalities[m])?;
            }
            data::write_lines(dir.join(format!("{part}_labels.txt")), &noisy.labels)?;
            data::write_lines(dir.join(format!("{part}_corrupted.txt")), index)?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Collects whatever summaries exist under `out_dir` into `report.md`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let mut md = String::from("# Results\n\n");
    let mut found = false;
    for (title, file) in [("Evaluation", "eval_summary.md"), ("Ablation", "ablation.md")] {
        if let Ok(text) = std::fs::read_to_string(cfg.out_dir.join(file)) {
            let _ = write!(md, "## {title}\n\n{text}\n");
            found = true;
        }
    }
    let mut hist = String::new();
    for &seed in &cfg.seeds {
        let path = seed_dir(cfg, seed).join("history.csv");
        let Ok(text) = std::fs::read_to_string(&path) else { continue };
        let lines: Vec<&str> = text.lines().collect();
        if let (Some(first), Some(last)) = (lines.get(1), lines.last()) {
            let cls = |l: &str| l.split(',').nth(8).unwrap_or("").to_string();
            let acc = |l: &str| l.split(',').nth(9).unwrap_or("").to_string();
            let _ = writeln!(hist, "| {seed} | {} | {} | {} | {} |", lines.len() - 1, cls(first), cls(last), acc(last));
        }
    }
    if !hist.is_empty() {
        found = true;
        md.push_str("## Training\n\n| seed | epochs | first L_cls | last L_cls | train acc |\n|---|---|---|---|---|\n");
        md.push_str(&hist);
        md.push('\n');
    }
    if !found {
        return Err(Error::Config {
            field: "out_dir".into(),
            reason: format!("no results under {}; run train, eval or ablate first", cfg.out_dir.display()),
        });
    }
    create_dir(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("report.md"), &md)?;
    Ok(md)
}
