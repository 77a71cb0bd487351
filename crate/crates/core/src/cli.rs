//! Command-line pipeline: simulate -> build-dataset -> train -> predict ->
//! conformal -> evaluate -> rqa, plus the end-to-end `report` orchestrator.
//! Exit codes: 0 success, 1 validation error, 2 I/O error. All stdout
//! diagnostics are `key=value` lines.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::airspace::DEFAULT_EDGE_THRESHOLD;
use crate::baselines::{self, MlpConfig};
use crate::commrqa;
use crate::conformal::{self, Method, PredictionRecord, QHat};
use crate::dataset::{self, DatasetSplit, GraphWindow, Scenario, SplitMode, TrialData};
use crate::egcn::{self, TrainConfig, Variant};
use crate::evalkit::{self, TimelineRow};
use crate::numkit::Matrix;
use crate::simgen;

const USAGE: &str = "usage: atcwl <subcommand> [--config FILE] [--key value ...]
subcommands:
  simulate       generate synthetic trials (kind, trials, seed, out)
  build-dataset  build moving-window dataset (corpus, scenario, kappa, stride, edge-threshold, out)
  train          train a graph model (corpus, scenario, windows, variant, epochs, lr, dropout,
                 dim, layers, batch, seed, split-seed, split-mode, out, history)
  predict        class probabilities for windows (corpus, scenario, windows, checkpoint,
                 subset, split-seed, split-mode, out)
  conformal      prediction sets from probabilities (cal, test, alpha, method, guard, out)
  evaluate       metrics + coverage report (predictions, probs, cal, corpus, scenario, out)
  rqa            transcript recurrence analysis (corpus, rho, lmin, out)
  report         full pipeline into a report directory (corpus, out, trials, seed, kappa,
                 stride, epochs, dim, layers, alpha, method)
environment: EGCN_THREADS caps worker count (default 1)";

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Io(m) => m,
        }
    }

    fn stage(self, stage: &str) -> CliError {
        match self {
            CliError::Validation(m) => CliError::Validation(format!("{stage}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{stage}: {m}")),
        }
    }
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(e.to_string())
}

fn val_err(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

impl From<simgen::SimError> for CliError {
    fn from(e: simgen::SimError) -> CliError {
        match e {
            simgen::SimError::Io(e) => io_err(e),
            other => val_err(other),
        }
    }
}

impl From<dataset::DatasetError> for CliError {
    fn from(e: dataset::DatasetError) -> CliError {
        match e {
            dataset::DatasetError::Io(e) => io_err(e),
            other => val_err(other),
        }
    }
}

impl From<crate::airspace::AirspaceError> for CliError {
    fn from(e: crate::airspace::AirspaceError) -> CliError {
        match e {
            crate::airspace::AirspaceError::Io(e) => io_err(e),
            other => val_err(other),
        }
    }
}

impl From<egcn::EgcnError> for CliError {
    fn from(e: egcn::EgcnError) -> CliError {
        match e {
            egcn::EgcnError::Io(e) => io_err(e),
            other => val_err(other),
        }
    }
}

impl From<conformal::ConformalError> for CliError {
    fn from(e: conformal::ConformalError) -> CliError {
        match e {
            conformal::ConformalError::Io(e) => io_err(e),
            other => val_err(other),
        }
    }
}

impl From<evalkit::EvalError> for CliError {
    fn from(e: evalkit::EvalError) -> CliError {
        match e {
            evalkit::EvalError::Io(e) => io_err(e),
            evalkit::EvalError::Conformal(c) => c.into(),
            other => val_err(other),
        }
    }
}

impl From<commrqa::CommError> for CliError {
    fn from(e: commrqa::CommError) -> CliError {
        match e {
            commrqa::CommError::Io(e) => io_err(e),
            other => val_err(other),
        }
    }
}

impl From<baselines::BaselineError> for CliError {
    fn from(e: baselines::BaselineError) -> CliError {
        val_err(e)
    }
}

impl From<crate::numkit::NumError> for CliError {
    fn from(e: crate::numkit::NumError) -> CliError {
        val_err(e)
    }
}

/// Flat key=value settings merged from an optional config file (paths
/// relative to the config location) and command-line flags (paths relative
/// to the working directory).
pub struct Args {
    values: BTreeMap<String, String>,
    bases: BTreeMap<String, PathBuf>,
}

impl Args {
    pub fn parse(tokens: &[String], allowed: &[&str]) -> Result<Args, CliError> {
        let mut values = BTreeMap::new();
        let mut bases = BTreeMap::new();
        let mut i = 0;
        while i < tokens.len() {
            let flag = &tokens[i];
            let key = flag
                .strip_prefix("--")
                .ok_or_else(|| val_err(format!("expected --flag, got `{flag}`")))?;
            let value = tokens
                .get(i + 1)
                .ok_or_else(|| val_err(format!("flag --{key} needs a value")))?;
            if key == "config" {
                let path = PathBuf::from(value);
                let text = std::fs::read_to_string(&path).map_err(io_err)?;
                let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
                for (ln, line) in text.lines().enumerate() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    let (k, v) = line.split_once('=').ok_or_else(|| {
                        val_err(format!("{}:{}: expected `key = value`", path.display(), ln + 1))
                    })?;
                    let k = k.trim().to_string();
                    if !allowed.contains(&k.as_str()) {
                        return Err(val_err(format!(
                            "{}:{}: unknown key `{k}`",
                            path.display(),
                            ln + 1
                        )));
                    }
                    values.insert(k.clone(), v.trim().to_string());
                    bases.insert(k, base.clone());
                }
            } else {
                if !allowed.contains(&key) {
                    return Err(val_err(format!("unknown flag --{key}")));
                }
                values.insert(key.to_string(), value.clone());
                bases.remove(key);
            }
            i += 2;
        }
        Ok(Args { values, bases })
    }

    pub fn str_opt(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn str_req(&self, key: &str) -> Result<&str, CliError> {
        self.str_opt(key).ok_or_else(|| val_err(format!("missing required key `{key}`")))
    }

    pub fn path_opt(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).map(|v| {
            let p = PathBuf::from(v);
            match (p.is_relative(), self.bases.get(key)) {
                (true, Some(base)) => base.join(p),
                _ => p,
            }
        })
    }

    pub fn path_req(&self, key: &str) -> Result<PathBuf, CliError> {
        self.path_opt(key).ok_or_else(|| val_err(format!("missing required key `{key}`")))
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, CliError> {
        match self.str_opt(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| val_err(format!("key `{key}`: bad integer `{v}`"))),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, CliError> {
        match self.str_opt(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| val_err(format!("key `{key}`: bad integer `{v}`"))),
        }
    }

    pub fn f64_opt(&self, key: &str) -> Result<Option<f64>, CliError> {
        match self.str_opt(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| val_err(format!("key `{key}`: bad number `{v}`"))),
        }
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, CliError> {
        Ok(self.f64_opt(key)?.unwrap_or(default))
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.str_opt(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(val_err(format!("key `{key}`: expected true/false, got `{v}`"))),
        }
    }
}

fn parse_scenario(s: &str) -> Result<Scenario, CliError> {
    Scenario::parse(s).map_err(val_err)
}

fn parse_split_mode(args: &Args) -> Result<SplitMode, CliError> {
    match args.str_opt("split-mode").unwrap_or("contiguous") {
        "contiguous" => Ok(SplitMode::Contiguous),
        "random" => Ok(SplitMode::Random),
        other => Err(val_err(format!("unknown split-mode `{other}`"))),
    }
}

/// One probability row with its ground-truth label, the handoff format
/// between predict, conformal and evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbsRecord {
    pub trial_id: String,
    pub end_t: usize,
    pub label: u8,
    pub probs: Vec<f64>,
}

fn write_probs_jsonl(path: &Path, records: &[ProbsRecord]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(io_err)?;
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
    }
    dataset::write_atomic(path, &buf).map_err(io_err)
}

fn read_probs_jsonl(path: &Path) -> Result<Vec<ProbsRecord>, CliError> {
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProbsRecord = serde_json::from_str(&line)
            .map_err(|e| val_err(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if rec.probs.len() != egcn::NUM_CLASSES {
            return Err(val_err(format!("{}:{}: expected 7 probabilities", path.display(), i + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Loads every trial under a corpus directory, sorted by trial id,
/// optionally filtered by scenario.
pub fn load_trials(
    corpus: &Path,
    filter: Option<Scenario>,
    edge_threshold: f64,
) -> Result<Vec<TrialData>, CliError> {
    let mut trials = Vec::new();
    for dir in simgen::corpus_trial_dirs(corpus)? {
        let traffic = dir.join("traffic.csv");
        let reports = dir.join("reports.json");
        if !traffic.exists() || !reports.exists() {
            continue;
        }
        let (trial_id, snapshots) = crate::airspace::read_traffic_csv_path(&traffic)?;
        let reports = dataset::read_reports_path(&reports)?;
        if let Some(kind) = filter {
            if reports.scenario != kind {
                continue;
            }
        }
        trials.push(TrialData::from_snapshots(
            &trial_id,
            reports.scenario,
            &snapshots,
            &reports.reports,
            edge_threshold,
        )?);
    }
    if trials.is_empty() {
        return Err(val_err(format!("no trials found under {}", corpus.display())));
    }
    Ok(trials)
}

fn all_windows(
    trials: &[TrialData],
    kappa: usize,
    stride: usize,
) -> Result<Vec<GraphWindow>, CliError> {
    let mut out = Vec::new();
    for (ti, trial) in trials.iter().enumerate() {
        out.extend(dataset::make_windows(ti, &trial.series, kappa, stride)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_simulate(args: &Args) -> Result<(), CliError> {
    let out = args.path_req("out")?;
    let trials = args.usize_or("trials", 1)?;
    let seed = args.u64_or("seed", 0)?;
    let kinds: Vec<Scenario> = match args.str_opt("kind").unwrap_or("all") {
        "all" => Scenario::ALL.to_vec(),
        k => vec![parse_scenario(k)?],
    };
    let manifest = simgen::generate_corpus_kinds(&out, &kinds, trials, seed)?;
    println!("kinds={}", kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("+"));
    println!("trials={}", trials * kinds.len());
    println!("files={}", manifest.files.len());
    println!("out={}", out.display());
    Ok(())
}

fn cmd_build_dataset(args: &Args) -> Result<(), CliError> {
    let corpus = args.path_req("corpus")?;
    let out = args.path_req("out")?;
    let kappa = args.usize_or("kappa", dataset::DEFAULT_KAPPA)?;
    let stride = args.usize_or("stride", 1)?;
    let threshold = args.f64_or("edge-threshold", DEFAULT_EDGE_THRESHOLD)?;
    let filter = args.str_opt("scenario").map(parse_scenario).transpose()?;
    let trials = load_trials(&corpus, filter, threshold)?;
    let windows = all_windows(&trials, kappa, stride)?;
    let mut buf = Vec::new();
    dataset::write_windows_jsonl(&mut buf, &windows, &trials)?;
    dataset::write_atomic(&out, &buf).map_err(io_err)?;
    println!("trials={}", trials.len());
    println!("windows={}", windows.len());
    println!("kappa={kappa}");
    println!("stride={stride}");
    println!("out={}", out.display());
    Ok(())
}

fn train_config_from_args(args: &Args, scenario: Scenario) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::profile(scenario);
    if let Some(layers) = args.str_opt("layers") {
        let n: usize =
            layers.parse().map_err(|_| val_err(format!("key `layers`: bad integer `{layers}`")))?;
        if n == 0 {
            return Err(val_err("key `layers`: need at least 1 layer"));
        }
        cfg.layer_dims = vec![cfg.layer_dims[0]; n];
    }
    if let Some(dim) = args.str_opt("dim") {
        let d: usize =
            dim.parse().map_err(|_| val_err(format!("key `dim`: bad integer `{dim}`")))?;
        if d == 0 {
            return Err(val_err("key `dim`: must be positive"));
        }
        cfg.layer_dims = vec![d; cfg.layer_dims.len()];
    }
    cfg.kappa = args.usize_or("kappa", cfg.kappa)?;
    cfg.epochs = args.usize_or("epochs", cfg.epochs)?;
    cfg.learning_rate = args.f64_or("lr", cfg.learning_rate)?;
    cfg.dropout = args.f64_or("dropout", cfg.dropout)?;
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(val_err(format!("dropout {} outside [0, 1)", cfg.dropout)));
    }
    cfg.seed = args.u64_or("seed", cfg.seed)?;
    cfg.batch_size = args.usize_or("batch", cfg.batch_size)?;
    Ok(cfg)
}

fn load_windows_checked(
    path: &Path,
    trials: &[TrialData],
) -> Result<Vec<GraphWindow>, CliError> {
    let file = std::fs::File::open(path).map_err(io_err)?;
    let windows = dataset::read_windows_jsonl(file)?;
    for w in &windows {
        if w.trial >= trials.len() || w.end_t >= trials[w.trial].graphs.len() {
            return Err(val_err(format!(
                "window (trial {}, end_t {}) does not fit the loaded corpus",
                w.trial, w.end_t
            )));
        }
    }
    Ok(windows)
}

fn cmd_train(args: &Args) -> Result<(), CliError> {
    let corpus = args.path_req("corpus")?;
    let scenario = parse_scenario(args.str_req("scenario")?)?;
    let windows_path = args.path_req("windows")?;
    let out = args.path_req("out")?;
    let variant_name = args.str_opt("variant").unwrap_or("evolvegcn-o");
    let variant = Variant::parse(variant_name)
        .ok_or_else(|| val_err(format!("unknown variant `{variant_name}`")))?;
    let threshold = args.f64_or("edge-threshold", DEFAULT_EDGE_THRESHOLD)?;
    let trials = load_trials(&corpus, Some(scenario), threshold)?;
    let windows = load_windows_checked(&windows_path, &trials)?;
    let cfg = train_config_from_args(args, scenario)?;
    if let Some(w) = windows.first() {
        if w.kappa != cfg.kappa {
            return Err(val_err(format!(
                "windows built with kappa {}, config says {}",
                w.kappa, cfg.kappa
            )));
        }
    }
    let split = dataset::split(
        &windows,
        dataset::SPLIT_RATIOS,
        args.u64_or("split-seed", 0)?,
        parse_split_mode(args)?,
    )?;
    let (model, history) = egcn::train(variant, &trials, &windows, &split, &cfg)?;
    egcn::save_checkpoint_path(&out, &model)?;
    if let Some(hist_path) = args.path_opt("history") {
        let mut buf = Vec::new();
        egcn::write_history_csv(&mut buf, &history).map_err(io_err)?;
        dataset::write_atomic(&hist_path, &buf).map_err(io_err)?;
    }
    let best = history
        .iter()
        .max_by(|a, b| a.val_micro_f1.total_cmp(&b.val_micro_f1).then(b.epoch.cmp(&a.epoch)))
        .expect("nonzero epochs");
    println!("variant={}", variant.as_str());
    println!("scenario={}", scenario.as_str());
    println!("epochs={}", cfg.epochs);
    println!("train_windows={}", split.train.len());
    println!("val_windows={}", split.validation.len());
    println!("best_epoch={}", best.epoch);
    println!("best_val_microf1={}", best.val_micro_f1);
    println!("checkpoint={}", out.display());
    Ok(())
}

fn subset_indices<'a>(
    split: &'a DatasetSplit,
    subset: &str,
    total: usize,
) -> Result<Vec<usize>, CliError> {
    Ok(match subset {
        "all" => (0..total).collect(),
        "train" => split.train.clone(),
        "validation" => split.validation.clone(),
        "test" => split.test.clone(),
        other => return Err(val_err(format!("unknown subset `{other}`"))),
    })
}

fn cmd_predict(args: &Args) -> Result<(), CliError> {
    let corpus = args.path_req("corpus")?;
    let scenario = parse_scenario(args.str_req("scenario")?)?;
    let windows_path = args.path_req("windows")?;
    let checkpoint = args.path_req("checkpoint")?;
    let out = args.path_req("out")?;
    let threshold = args.f64_or("edge-threshold", DEFAULT_EDGE_THRESHOLD)?;
    let trials = load_trials(&corpus, Some(scenario), threshold)?;
    let windows = load_windows_checked(&windows_path, &trials)?;
    let model = egcn::load_checkpoint_path(&checkpoint)?;
    let split = dataset::split(
        &windows,
        dataset::SPLIT_RATIOS,
        args.u64_or("split-seed", 0)?,
        parse_split_mode(args)?,
    )?;
    let subset = args.str_opt("subset").unwrap_or("all");
    let indices = subset_indices(&split, subset, windows.len())?;
    let mut records = Vec::with_capacity(indices.len());
    for &i in &indices {
        let w = &windows[i];
        let probs = egcn::forward(&model, w.graphs(&trials))?;
        records.push(ProbsRecord {
            trial_id: trials[w.trial].trial_id.clone(),
            end_t: w.end_t,
            label: w.label,
            probs: probs.data().to_vec(),
        });
    }
    write_probs_jsonl(&out, &records)?;
    println!("subset={subset}");
    println!("records={}", records.len());
    println!("out={}", out.display());
    Ok(())
}

fn probs_matrices(records: &[ProbsRecord]) -> (Vec<Matrix>, Vec<u8>) {
    let probs = records
        .iter()
        .map(|r| Matrix::from_vec(1, egcn::NUM_CLASSES, r.probs.clone()))
        .collect();
    let labels = records.iter().map(|r| r.label).collect();
    (probs, labels)
}

fn cmd_conformal(args: &Args) -> Result<(), CliError> {
    let cal_path = args.path_req("cal")?;
    let test_path = args.path_req("test")?;
    let out = args.path_req("out")?;
    let alpha = args.f64_or("alpha", 0.1)?;
    let method_name = args.str_opt("method").unwrap_or("plain");
    let method = Method::parse(method_name)
        .ok_or_else(|| val_err(format!("unknown method `{method_name}`")))?;
    let guard = args.bool_or("guard", true)?;
    let cal_records = read_probs_jsonl(&cal_path)?;
    let test_records = read_probs_jsonl(&test_path)?;
    let (cal_probs, cal_labels) = probs_matrices(&cal_records);
    let calib = conformal::calibrate(&cal_probs, &cal_labels, alpha, method)?;
    let mut predictions = Vec::with_capacity(test_records.len());
    let mut covered = 0usize;
    let mut range_covered = 0usize;
    let mut size_sum = 0usize;
    for r in &test_records {
        let probs = Matrix::from_vec(1, egcn::NUM_CLASSES, r.probs.clone());
        let set = conformal::predict_set_with_guard(&probs, &calib, guard)?;
        let range = if set.classes.is_empty() {
            [0, 0]
        } else {
            let (lo, hi) = set.fill_range();
            [lo, hi]
        };
        if set.contains(r.label) {
            covered += 1;
        }
        if !set.classes.is_empty() && set.range_contains(r.label) {
            range_covered += 1;
        }
        size_sum += set.size();
        predictions.push(PredictionRecord {
            trial_id: r.trial_id.clone(),
            end_t: r.end_t,
            probs: r.probs.clone(),
            set: set.classes,
            range,
            alpha,
            method: method.as_str().to_string(),
        });
    }
    let mut buf = Vec::new();
    conformal::write_predictions_jsonl(&mut buf, &predictions)?;
    dataset::write_atomic(&out, &buf).map_err(io_err)?;
    println!("method={}", method.as_str());
    println!("alpha={alpha}");
    println!("n_cal={}", calib.n);
    match calib.q_hat {
        QHat::Value(q) => println!("qhat={q}"),
        QHat::FullSet => println!("qhat=full-set"),
    }
    let n = test_records.len().max(1) as f64;
    println!("coverage={}", covered as f64 / n);
    println!("range_coverage={}", range_covered as f64 / n);
    println!("mean_set_size={}", size_sum as f64 / n);
    println!("out={}", out.display());
    Ok(())
}

/// Default significance grid for the calibration curve.
const EPS_GRID: [f64; 5] = [0.05, 0.1, 0.15, 0.2, 0.3];

fn cmd_evaluate(args: &Args) -> Result<(), CliError> {
    let pred_path = args.path_req("predictions")?;
    let probs_path = args.path_req("probs")?;
    let out = args.path_req("out")?;
    let file = std::fs::File::open(&pred_path).map_err(io_err)?;
    let predictions = conformal::read_predictions_jsonl(std::io::BufReader::new(file))?;
    let test_records = read_probs_jsonl(&probs_path)?;
    if predictions.len() != test_records.len() {
        return Err(val_err(format!(
            "{} predictions but {} probability records",
            predictions.len(),
            test_records.len()
        )));
    }
    for (p, r) in predictions.iter().zip(&test_records) {
        if p.trial_id != r.trial_id || p.end_t != r.end_t {
            return Err(val_err(format!(
                "prediction ({}, {}) does not match probability record ({}, {})",
                p.trial_id, p.end_t, r.trial_id, r.end_t
            )));
        }
    }
    let truths: Vec<u8> = test_records.iter().map(|r| r.label).collect();
    let point_preds: Vec<u8> = test_records
        .iter()
        .map(|r| egcn::argmax_class(&Matrix::from_vec(1, egcn::NUM_CLASSES, r.probs.clone())))
        .collect();
    let metrics = evalkit::metric_report(&point_preds, &truths)?;
    let sets: Vec<conformal::PredictionSet> = predictions
        .iter()
        .map(|p| conformal::PredictionSet { classes: p.set.clone() })
        .collect();
    if sets.iter().any(|s| s.classes.is_empty()) {
        return Err(val_err("evaluation requires nonempty prediction sets (guard=true)"));
    }
    let curve = match args.path_opt("cal") {
        Some(cal_path) => {
            let cal_records = read_probs_jsonl(&cal_path)?;
            let (cal_probs, cal_labels) = probs_matrices(&cal_records);
            let (test_probs, test_labels) = probs_matrices(&test_records);
            let method = predictions
                .first()
                .and_then(|p| Method::parse(&p.method))
                .unwrap_or(Method::Plain);
            evalkit::calibration_curve(
                &cal_probs,
                &cal_labels,
                &test_probs,
                &test_labels,
                &EPS_GRID,
                method,
            )?
        }
        None => Vec::new(),
    };
    let coverage = evalkit::coverage_report(&sets, &truths, curve)?;

    // per-trial timelines need the traffic densities from the corpus
    let mut timelines: Vec<(String, Vec<TimelineRow>)> = Vec::new();
    if let Some(corpus) = args.path_opt("corpus") {
        let filter = args.str_opt("scenario").map(parse_scenario).transpose()?;
        let trials = load_trials(&corpus, filter, DEFAULT_EDGE_THRESHOLD)?;
        for trial in &trials {
            let mut rows = Vec::new();
            for (p, r) in predictions.iter().zip(&test_records) {
                if r.trial_id == trial.trial_id {
                    rows.push(TimelineRow {
                        t: r.end_t,
                        density: trial.graphs[r.end_t].features.rows(),
                        true_label: r.label,
                        range_lo: p.range[0],
                        range_hi: p.range[1],
                    });
                }
            }
            if !rows.is_empty() {
                rows.sort_by_key(|r| r.t);
                timelines.push((trial.trial_id.clone(), rows));
            }
        }
    }
    evalkit::emit_report(&out, &metrics, &coverage, &timelines)?;
    println!("micro_f1={}", metrics.micro_f1);
    println!("macro_f1={}", metrics.macro_f1);
    println!("coverage={}", coverage.marginal);
    println!("range_coverage={}", coverage.range_marginal);
    println!("min_ssc_2={}", coverage.ssc_two.min_coverage);
    println!("min_ssc_5={}", coverage.ssc_five.min_coverage);
    println!("out={}", out.display());
    Ok(())
}

fn cmd_rqa(args: &Args) -> Result<(), CliError> {
    let corpus = args.path_req("corpus")?;
    let out = args.path_req("out")?;
    let rho = args.f64_or("rho", commrqa::DEFAULT_RHO)?;
    let l_min = args.usize_or("lmin", commrqa::DEFAULT_L_MIN)?;
    let mut rows = Vec::new();
    for dir in simgen::corpus_trial_dirs(&corpus)? {
        let path = dir.join("transcript.csv");
        if !path.exists() {
            continue;
        }
        let file = std::fs::File::open(&path).map_err(io_err)?;
        let mut events = commrqa::parse_transcript(std::io::BufReader::new(file))?;
        if events.is_empty() {
            continue;
        }
        let trial_id = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        rows.push(commrqa::analyze_transcript(&trial_id, &mut events, rho, l_min)?);
    }
    let mut buf = Vec::new();
    commrqa::write_rqa_csv(&mut buf, &rows)?;
    dataset::write_atomic(&out, &buf).map_err(io_err)?;
    println!("rows={}", rows.len());
    println!("out={}", out.display());
    Ok(())
}

/// Per-method test MicroF1/MacroF1 on one scenario, for the comparison table.
fn evaluate_methods(
    trials: &[TrialData],
    windows: &[GraphWindow],
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<Vec<(String, f64, f64)>, CliError> {
    let gather = |idx: &[usize]| -> Vec<GraphWindow> { idx.iter().map(|&i| windows[i].clone()).collect() };
    let train_w = gather(&split.train);
    let test_w = gather(&split.test);
    let truths: Vec<u8> = test_w.iter().map(|w| w.label).collect();
    let mut rows = Vec::new();

    let train_counts = baselines::counts_for_windows(trials, &train_w);
    let train_labels: Vec<u8> = train_w.iter().map(|w| w.label).collect();
    let lr = baselines::fit_lr_density(&train_counts, &train_labels)?;
    let preds: Vec<u8> =
        test_w.iter().map(|w| lr.predict(baselines::window_count(trials, w))).collect();
    rows.push((
        "lr-density".to_string(),
        evalkit::micro_f1(&preds, &truths)?,
        evalkit::macro_f1(&preds, &truths)?,
    ));

    let train_feats = baselines::features_for_windows(trials, &train_w);
    let test_feats = baselines::features_for_windows(trials, &test_w);
    let lrg = baselines::fit_lr_graphfeat(&train_feats, &train_labels)?;
    let preds: Vec<u8> = test_feats.iter().map(|f| lrg.predict(f)).collect();
    rows.push((
        "lr-graphfeat".to_string(),
        evalkit::micro_f1(&preds, &truths)?,
        evalkit::macro_f1(&preds, &truths)?,
    ));

    let mlp_cfg = MlpConfig { epochs: cfg.epochs.max(50), seed: cfg.seed, ..MlpConfig::default() };
    let mlp = baselines::fit_mlp(&train_feats, &train_labels, &mlp_cfg)?;
    let preds: Vec<u8> = test_feats.iter().map(|f| mlp.predict(f)).collect();
    rows.push((
        "mlp".to_string(),
        evalkit::micro_f1(&preds, &truths)?,
        evalkit::macro_f1(&preds, &truths)?,
    ));

    for variant in [Variant::Gcn, Variant::EvolveO, Variant::EvolveH] {
        let (model, _) = egcn::train(variant, trials, windows, split, cfg)?;
        let preds = egcn::predict_labels(&model, trials, &test_w)?;
        rows.push((
            variant.as_str().to_string(),
            evalkit::micro_f1(&preds, &truths)?,
            evalkit::macro_f1(&preds, &truths)?,
        ));
    }
    Ok(rows)
}

fn cmd_report(args: &Args) -> Result<(), CliError> {
    let out = args.path_req("out")?;
    std::fs::create_dir_all(&out).map_err(io_err)?;
    let seed = args.u64_or("seed", 0)?;
    let corpus = match args.path_opt("corpus") {
        Some(c) => c,
        None => {
            let c = out.join("corpus");
            let trials = args.usize_or("trials", 2)?;
            simgen::generate_corpus(&c, trials, seed).map_err(|e| CliError::from(e).stage("simulate"))?;
            c
        }
    };
    let kappa = args.usize_or("kappa", 12)?;
    let stride = args.usize_or("stride", 6)?;
    let alpha = args.f64_or("alpha", 0.1)?;
    let method_name = args.str_opt("method").unwrap_or("plain");
    let method = Method::parse(method_name)
        .ok_or_else(|| val_err(format!("unknown method `{method_name}`")))?;

    let mut table: Vec<(String, String, u64, f64, f64)> = Vec::new();
    let mut conformal_inputs: Option<(Vec<TrialData>, Vec<GraphWindow>, DatasetSplit, TrainConfig)> =
        None;
    for scenario in Scenario::ALL {
        let trials = load_trials(&corpus, Some(scenario), DEFAULT_EDGE_THRESHOLD)
            .map_err(|e| e.stage("build-dataset"))?;
        let windows =
            all_windows(&trials, kappa, stride).map_err(|e| e.stage("build-dataset"))?;
        let split = dataset::split(&windows, dataset::SPLIT_RATIOS, seed, SplitMode::Contiguous)
            .map_err(|e| CliError::from(e).stage("build-dataset"))?;
        let mut cfg = train_config_from_args(args, scenario).map_err(|e| e.stage("train"))?;
        cfg.kappa = kappa;
        // desk-scale defaults unless overridden
        if args.str_opt("epochs").is_none() {
            cfg.epochs = 8;
        }
        if args.str_opt("dim").is_none() {
            cfg.layer_dims = vec![16; cfg.layer_dims.len().min(2)];
        }
        if args.str_opt("layers").is_none() {
            cfg.layer_dims.truncate(2);
        }
        let rows = evaluate_methods(&trials, &windows, &split, &cfg)
            .map_err(|e| e.stage("train"))?;
        for (method_name, micro, macro_) in rows {
            println!("microf1_{}_{}={micro}", method_name, scenario.as_str());
            table.push((method_name, scenario.as_str().to_string(), cfg.seed, micro, macro_));
        }
        if scenario == Scenario::HighNominal {
            conformal_inputs = Some((trials, windows, split, cfg));
        }
    }
    table.sort_by(|a, b| (&a.1, &a.0).cmp(&(&b.1, &b.0)));
    let mut buf = Vec::new();
    evalkit::write_comparison_csv(&mut buf, &table).map_err(io_err)?;
    dataset::write_atomic(&out.join("metrics.csv"), &buf).map_err(io_err)?;

    // conformal diagnostics on the high-nominal scenario
    let (trials, windows, split, cfg) = conformal_inputs.expect("high-nominal processed");
    let (model, _) =
        egcn::train(Variant::EvolveO, &trials, &windows, &split, &cfg).map_err(|e| CliError::from(e).stage("train"))?;
    let records_for = |idx: &[usize]| -> Result<Vec<ProbsRecord>, CliError> {
        idx.iter()
            .map(|&i| {
                let w = &windows[i];
                let probs = egcn::forward(&model, w.graphs(&trials))?;
                Ok(ProbsRecord {
                    trial_id: trials[w.trial].trial_id.clone(),
                    end_t: w.end_t,
                    label: w.label,
                    probs: probs.data().to_vec(),
                })
            })
            .collect()
    };
    let cal_records = records_for(&split.validation).map_err(|e| e.stage("predict"))?;
    let test_records = records_for(&split.test).map_err(|e| e.stage("predict"))?;
    let (cal_probs, cal_labels) = probs_matrices(&cal_records);
    let (test_probs, test_labels) = probs_matrices(&test_records);
    let calib = conformal::calibrate(&cal_probs, &cal_labels, alpha, method)
        .map_err(|e| CliError::from(e).stage("conformal"))?;
    let mut sets = Vec::new();
    let mut predictions = Vec::new();
    for r in &test_records {
        let probs = Matrix::from_vec(1, egcn::NUM_CLASSES, r.probs.clone());
        let set = conformal::predict_set_with_guard(&probs, &calib, true)
            .map_err(|e| CliError::from(e).stage("conformal"))?;
        predictions.push(PredictionRecord {
            trial_id: r.trial_id.clone(),
            end_t: r.end_t,
            probs: r.probs.clone(),
            set: set.classes.clone(),
            range: {
                let (lo, hi) = set.fill_range();
                [lo, hi]
            },
            alpha,
            method: method.as_str().to_string(),
        });
        sets.push(set);
    }
    let mut buf = Vec::new();
    conformal::write_predictions_jsonl(&mut buf, &predictions)
        .map_err(|e| CliError::from(e).stage("conformal"))?;
    dataset::write_atomic(&out.join("predictions.jsonl"), &buf).map_err(io_err)?;

    let truths: Vec<u8> = test_records.iter().map(|r| r.label).collect();
    let point_preds: Vec<u8> = test_records
        .iter()
        .map(|r| egcn::argmax_class(&Matrix::from_vec(1, egcn::NUM_CLASSES, r.probs.clone())))
        .collect();
    let metrics =
        evalkit::metric_report(&point_preds, &truths).map_err(|e| CliError::from(e).stage("evaluate"))?;
    let curve = evalkit::calibration_curve(
        &cal_probs,
        &cal_labels,
        &test_probs,
        &test_labels,
        &EPS_GRID,
        method,
    )
    .map_err(|e| CliError::from(e).stage("evaluate"))?;
    let coverage = evalkit::coverage_report(&sets, &truths, curve)
        .map_err(|e| CliError::from(e).stage("evaluate"))?;
    let mut timelines = Vec::new();
    for trial in &trials {
        let mut rows = Vec::new();
        for (p, r) in predictions.iter().zip(&test_records) {
            if r.trial_id == trial.trial_id {
                rows.push(TimelineRow {
                    t: r.end_t,
                    density: trial.graphs[r.end_t].features.rows(),
                    true_label: r.label,
                    range_lo: p.range[0],
                    range_hi: p.range[1],
                });
            }
        }
        if !rows.is_empty() {
            rows.sort_by_key(|r| r.t);
            timelines.push((trial.trial_id.clone(), rows));
        }
    }
    evalkit::emit_report(&out.join("conformal"), &metrics, &coverage, &timelines)
        .map_err(|e| CliError::from(e).stage("evaluate"))?;

    // transcript recurrence summary
    let mut rqa_rows = Vec::new();
    for dir in simgen::corpus_trial_dirs(&corpus).map_err(|e| CliError::from(e).stage("rqa"))? {
        let path = dir.join("transcript.csv");
        if !path.exists() {
            continue;
        }
        let file = std::fs::File::open(&path).map_err(io_err)?;
        let mut events = commrqa::parse_transcript(std::io::BufReader::new(file))
            .map_err(|e| CliError::from(e).stage("rqa"))?;
        if events.is_empty() {
            continue;
        }
        let trial_id = dir.file_name().unwrap_or_default().to_string_lossy().to_string();
        rqa_rows.push(
            commrqa::analyze_transcript(&trial_id, &mut events, commrqa::DEFAULT_RHO, commrqa::DEFAULT_L_MIN)
                .map_err(|e| CliError::from(e).stage("rqa"))?,
        );
    }
    let mut buf = Vec::new();
    commrqa::write_rqa_csv(&mut buf, &rqa_rows).map_err(|e| CliError::from(e).stage("rqa"))?;
    dataset::write_atomic(&out.join("rqa.csv"), &buf).map_err(io_err)?;

    println!("coverage={}", coverage.marginal);
    println!("range_coverage={}", coverage.range_marginal);
    println!("methods=6");
    println!("scenarios=3");
    println!("out={}", out.display());
    Ok(())
}

const COMMON_KEYS: [&str; 2] = ["config", "edge-threshold"];

fn allowed_keys(subcommand: &str) -> Option<Vec<&'static str>> {
    let mut keys: Vec<&str> = COMMON_KEYS.to_vec();
    match subcommand {
        "simulate" => keys.extend(["kind", "trials", "seed", "out"]),
        "build-dataset" => keys.extend(["corpus", "scenario", "kappa", "stride", "out"]),
        "train" => keys.extend([
            "corpus", "scenario", "windows", "variant", "epochs", "lr", "dropout", "dim",
            "layers", "batch", "seed", "kappa", "split-seed", "split-mode", "out", "history",
        ]),
        "predict" => keys.extend([
            "corpus", "scenario", "windows", "checkpoint", "subset", "split-seed", "split-mode",
            "out",
        ]),
        "conformal" => keys.extend(["cal", "test", "alpha", "method", "guard", "out"]),
        "evaluate" => keys.extend(["predictions", "probs", "cal", "corpus", "scenario", "out"]),
        "rqa" => keys.extend(["corpus", "rho", "lmin", "out"]),
        "report" => keys.extend([
            "corpus", "out", "trials", "seed", "kappa", "stride", "epochs", "lr", "dropout",
            "dim", "layers", "batch", "scenario", "alpha", "method",
        ]),
        _ => return None,
    }
    Some(keys)
}

/// Dispatches one invocation; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    // worker cap honored for forward compatibility; execution is
    // single-threaded regardless
    let _threads = std::env::var("EGCN_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1);
    let Some(subcommand) = argv.first().map(|s| s.as_str()) else {
        eprintln!("{USAGE}");
        return 1;
    };
    if subcommand == "--help" || subcommand == "help" {
        println!("{USAGE}");
        return 0;
    }
    let Some(allowed) = allowed_keys(subcommand) else {
        eprintln!("unknown subcommand `{subcommand}`");
        eprintln!("{USAGE}");
        return 1;
    };
    let result = Args::parse(&argv[1..], &allowed).and_then(|args| match subcommand {
        "simulate" => cmd_simulate(&args),
        "build-dataset" => cmd_build_dataset(&args),
        "train" => cmd_train(&args),
        "predict" => cmd_predict(&args),
        "conformal" => cmd_conformal(&args),
        "evaluate" => cmd_evaluate(&args),
        "rqa" => cmd_rqa(&args),
        "report" => cmd_report(&args),
        _ => unreachable!(),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
