//! Classification and coverage metrics: micro/macro F1, marginal and
//! size-stratified coverage, set-size histograms, calibration curves, the
//! two-sample Kolmogorov-Smirnov test, and CSV report emission.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::conformal::{self, Method, PredictionSet};
use crate::egcn::NUM_CLASSES;
use crate::numkit::Matrix;

/// Two-bin set-size strata over sizes 1..=7.
pub const BINS_TWO: [(usize, usize); 2] = [(1, 3), (4, 7)];
/// Five-bin set-size strata over sizes 1..=7.
pub const BINS_FIVE: [(usize, usize); 5] = [(1, 1), (2, 2), (3, 3), (4, 5), (6, 7)];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{lhs} predictions but {rhs} truths")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("label {0} out of range 1..=7")]
    LabelOutOfRange(u8),
    #[error("bin edges must partition sizes 1..=7")]
    BadBinEdges,
    #[error("empty epsilon grid")]
    EmptyGrid,
    #[error("epsilon grid must be ascending within (0, 1]")]
    BadGrid,
    #[error(transparent)]
    Conformal(#[from] conformal::ConformalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_pair(preds: &[u8], truths: &[u8]) -> Result<(), EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch { lhs: preds.len(), rhs: truths.len() });
    }
    if preds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    for &l in preds.iter().chain(truths) {
        if l < 1 || l as usize > NUM_CLASSES {
            return Err(EvalError::LabelOutOfRange(l));
        }
    }
    Ok(())
}

/// Micro-averaged F1. For single-label multiclass predictions the pooled
/// precision and recall are both the accuracy, so this equals accuracy.
pub fn micro_f1(preds: &[u8], truths: &[u8]) -> Result<f64, EvalError> {
    check_pair(preds, truths)?;
    let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Per-class precision/recall/F1 for one class (1..=7).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub class: u8,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

pub fn per_class_stats(preds: &[u8], truths: &[u8]) -> Result<Vec<ClassStats>, EvalError> {
    check_pair(preds, truths)?;
    let mut out = Vec::new();
    for class in 1..=NUM_CLASSES as u8 {
        let tp = preds.iter().zip(truths).filter(|(&p, &t)| p == class && t == class).count();
        let fp = preds.iter().zip(truths).filter(|(&p, &t)| p == class && t != class).count();
        let fn_ = preds.iter().zip(truths).filter(|(&p, &t)| p != class && t == class).count();
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        out.push(ClassStats { class, precision, recall, f1, support: tp + fn_ });
    }
    Ok(out)
}

/// Macro-averaged F1 over classes that appear in the truths or predictions;
/// absent classes are excluded from the average entirely.
pub fn macro_f1(preds: &[u8], truths: &[u8]) -> Result<f64, EvalError> {
    let stats = per_class_stats(preds, truths)?;
    let present: Vec<&ClassStats> = stats
        .iter()
        .filter(|s| preds.contains(&s.class) || truths.contains(&s.class))
        .collect();
    Ok(present.iter().map(|s| s.f1).sum::<f64>() / present.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassStats>,
}

pub fn metric_report(preds: &[u8], truths: &[u8]) -> Result<MetricReport, EvalError> {
    Ok(MetricReport {
        micro_f1: micro_f1(preds, truths)?,
        macro_f1: macro_f1(preds, truths)?,
        per_class: per_class_stats(preds, truths)?,
    })
}

/// Fraction of samples whose true class is inside the prediction set.
pub fn empirical_coverage(sets: &[PredictionSet], truths: &[u8]) -> Result<f64, EvalError> {
    if sets.len() != truths.len() {
        return Err(EvalError::LengthMismatch { lhs: sets.len(), rhs: truths.len() });
    }
    if sets.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hit = sets.iter().zip(truths).filter(|(s, &t)| s.contains(t)).count();
    Ok(hit as f64 / sets.len() as f64)
}

/// Coverage of the contiguous filled ranges; a superset of set coverage.
pub fn range_coverage(sets: &[PredictionSet], truths: &[u8]) -> Result<f64, EvalError> {
    if sets.len() != truths.len() {
        return Err(EvalError::LengthMismatch { lhs: sets.len(), rhs: truths.len() });
    }
    if sets.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hit = sets.iter().zip(truths).filter(|(s, &t)| s.range_contains(t)).count();
    Ok(hit as f64 / sets.len() as f64)
}

/// One nonempty set-size stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub size_lo: usize,
    pub size_hi: usize,
    pub count: usize,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SscReport {
    /// Nonempty strata only, in bin order.
    pub strata: Vec<Stratum>,
    /// Minimum coverage over nonempty strata.
    pub min_coverage: f64,
}

/// Size-stratified coverage: samples grouped by prediction-set size into the
/// given inclusive bins; empty bins are absent rather than zero-coverage.
pub fn ssc(
    sets: &[PredictionSet],
    truths: &[u8],
    bins: &[(usize, usize)],
) -> Result<SscReport, EvalError> {
    if sets.len() != truths.len() {
        return Err(EvalError::LengthMismatch { lhs: sets.len(), rhs: truths.len() });
    }
    if sets.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    // bins must be a contiguous ascending partition of 1..=7
    let mut expect = 1;
    for &(lo, hi) in bins {
        if lo != expect || hi < lo {
            return Err(EvalError::BadBinEdges);
        }
        expect = hi + 1;
    }
    if expect != NUM_CLASSES + 1 {
        return Err(EvalError::BadBinEdges);
    }
    let mut strata = Vec::new();
    for &(lo, hi) in bins {
        let mut count = 0;
        let mut hit = 0;
        for (s, &t) in sets.iter().zip(truths) {
            let size = s.size();
            if size >= lo && size <= hi {
                count += 1;
                if s.contains(t) {
                    hit += 1;
                }
            }
        }
        if count > 0 {
            strata.push(Stratum { size_lo: lo, size_hi: hi, count, coverage: hit as f64 / count as f64 });
        }
    }
    let min_coverage = strata.iter().map(|s| s.coverage).fold(f64::INFINITY, f64::min);
    Ok(SscReport { strata, min_coverage })
}

/// Histogram of set sizes 1..=7; index s-1 holds the count of size-s sets.
pub fn set_size_histogram(sets: &[PredictionSet]) -> [usize; NUM_CLASSES] {
    let mut hist = [0usize; NUM_CLASSES];
    for s in sets {
        let size = s.size().clamp(1, NUM_CLASSES);
        hist[size - 1] += 1;
    }
    hist
}

/// For each significance level, recalibrate on the calibration split and
/// report the observed error (1 - coverage) on the test split. The empty-set
/// guard is disabled so errors track the raw conformal guarantee.
pub fn calibration_curve(
    cal_probs: &[Matrix],
    cal_labels: &[u8],
    test_probs: &[Matrix],
    test_labels: &[u8],
    eps_grid: &[f64],
    method: Method,
) -> Result<Vec<(f64, f64)>, EvalError> {
    if eps_grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    if eps_grid.windows(2).any(|w| w[1] <= w[0]) || eps_grid.iter().any(|&e| e <= 0.0 || e > 1.0) {
        return Err(EvalError::BadGrid);
    }
    let mut curve = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let cal = conformal::calibrate(cal_probs, cal_labels, eps, method)?;
        let mut miss = 0;
        for (p, &y) in test_probs.iter().zip(test_labels) {
            let set = conformal::predict_set_with_guard(p, &cal, false)?;
            if !set.contains(y) {
                miss += 1;
            }
        }
        curve.push((eps, miss as f64 / test_probs.len().max(1) as f64));
    }
    Ok(curve)
}

/// Two-sample Kolmogorov-Smirnov test. D is the supremum ECDF gap; the
/// p-value uses the asymptotic Kolmogorov distribution with effective sample
/// size n*m/(n+m), series truncated at 100 terms.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> Result<(f64, f64), EvalError> {
    if x.is_empty() || y.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut xs = x.to_vec();
    let mut ys = y.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let ecdf = |sorted: &[f64], t: f64| {
        sorted.partition_point(|&v| v <= t) as f64 / sorted.len() as f64
    };
    let mut d = 0.0_f64;
    for &t in xs.iter().chain(ys.iter()) {
        d = d.max((ecdf(&xs, t) - ecdf(&ys, t)).abs());
    }
    if d == 0.0 {
        return Ok((0.0, 1.0));
    }
    let n = xs.len() as f64;
    let m = ys.len() as f64;
    let ne = n * m / (n + m);
    let lambda = ne.sqrt() * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        p += 2.0 * (-1.0_f64).powi(j as i32 - 1) * (-2.0 * j * j * lambda * lambda).exp();
    }
    Ok((d, p.clamp(0.0, 1.0)))
}

/// One row of the per-trial timeline file (traffic density, truth, filled
/// conformal range at each probed timestamp).
#[derive(Debug, Clone, PartialEq)]
pub struct TimelineRow {
    pub t: usize,
    pub density: usize,
    pub true_label: u8,
    pub range_lo: u8,
    pub range_hi: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoverageReport {
    pub marginal: f64,
    pub range_marginal: f64,
    pub ssc_two: SscReport,
    pub ssc_five: SscReport,
    pub calibration: Vec<(f64, f64)>,
    pub size_hist: [usize; NUM_CLASSES],
}

pub fn coverage_report(
    sets: &[PredictionSet],
    truths: &[u8],
    calibration: Vec<(f64, f64)>,
) -> Result<CoverageReport, EvalError> {
    Ok(CoverageReport {
        marginal: empirical_coverage(sets, truths)?,
        range_marginal: range_coverage(sets, truths)?,
        ssc_two: ssc(sets, truths, &BINS_TWO)?,
        ssc_five: ssc(sets, truths, &BINS_FIVE)?,
        calibration,
        size_hist: set_size_histogram(sets),
    })
}

/// Writes the deterministic CSV report bundle:
/// `metrics.csv`, `set_size_hist.csv`, `ssc_2.csv`, `ssc_5.csv`,
/// `calibration_curve.csv` and one `timeline_<trial>.csv` per trial.
pub fn emit_report(
    dir: &Path,
    metrics: &MetricReport,
    coverage: &CoverageReport,
    timelines: &[(String, Vec<TimelineRow>)],
) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;

    let mut m = String::new();
    m.push_str("metric,value\n");
    m.push_str(&format!("micro_f1,{}\n", metrics.micro_f1));
    m.push_str(&format!("macro_f1,{}\n", metrics.macro_f1));
    for s in &metrics.per_class {
        m.push_str(&format!("precision_class{},{}\n", s.class, s.precision));
        m.push_str(&format!("recall_class{},{}\n", s.class, s.recall));
        m.push_str(&format!("f1_class{},{}\n", s.class, s.f1));
    }
    m.push_str(&format!("coverage,{}\n", coverage.marginal));
    m.push_str(&format!("range_coverage,{}\n", coverage.range_marginal));
    m.push_str(&format!("min_ssc_2,{}\n", coverage.ssc_two.min_coverage));
    m.push_str(&format!("min_ssc_5,{}\n", coverage.ssc_five.min_coverage));
    std::fs::write(dir.join("metrics.csv"), m)?;

    let mut h = String::new();
    h.push_str("set_size,count\n");
    for (i, c) in coverage.size_hist.iter().enumerate() {
        h.push_str(&format!("{},{}\n", i + 1, c));
    }
    std::fs::write(dir.join("set_size_hist.csv"), h)?;

    for (name, report) in [("ssc_2.csv", &coverage.ssc_two), ("ssc_5.csv", &coverage.ssc_five)] {
        let mut s = String::new();
        s.push_str("size_lo,size_hi,count,coverage\n");
        for st in &report.strata {
            s.push_str(&format!("{},{},{},{}\n", st.size_lo, st.size_hi, st.count, st.coverage));
        }
        std::fs::write(dir.join(name), s)?;
    }

    let mut c = String::new();
    c.push_str("epsilon,observed_error\n");
    for (eps, err) in &coverage.calibration {
        c.push_str(&format!("{eps},{err}\n"));
    }
    std::fs::write(dir.join("calibration_curve.csv"), c)?;

    for (trial_id, rows) in timelines {
        let mut t = String::new();
        t.push_str("t,density,true_label,range_lo,range_hi\n");
        for r in rows {
            t.push_str(&format!(
                "{},{},{},{},{}\n",
                r.t, r.density, r.true_label, r.range_lo, r.range_hi
            ));
        }
        std::fs::write(dir.join(format!("timeline_{trial_id}.csv")), t)?;
    }
    Ok(())
}

/// Writes `method,scenario,seed,micro_f1,macro_f1` comparison rows.
pub fn write_comparison_csv<W: Write>(
    mut out: W,
    rows: &[(String, String, u64, f64, f64)],
) -> std::io::Result<()> {
    writeln!(out, "method,scenario,seed,micro_f1,macro_f1")?;
    for (method, scenario, seed, micro, macro_) in rows {
        writeln!(out, "{method},{scenario},{seed},{micro},{macro_}")?;
    }
    Ok(())
}
