//! Label series from sparse workload reports, moving-window construction,
//! train/validation(calibration)/test splits, and trial persistence.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::airspace::{self, AirspaceGraph, TrafficSnapshot};
use crate::numkit::Rng;

/// Current on-disk format version for all dataset files.
pub const FORMAT_VERSION: u32 = 1;
/// Timestamps per 25-minute trial at 5-second sampling.
pub const TRIAL_STEPS: usize = 300;
/// Seconds between consecutive timestamps.
pub const STEP_SECONDS: usize = 5;
/// Workload probe timestamps (3, 12, 21 minutes).
pub const PROBE_STEPS: [usize; 3] = [36, 144, 252];
/// Reference moving-window size.
pub const DEFAULT_KAPPA: usize = 36;
/// Train/validation/test ratios.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.4, 0.3, 0.3);

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no workload reports supplied")]
    EmptyReports,
    #[error("report timestamp {t} out of range 0..{len}")]
    ReportOutOfRange { t: usize, len: usize },
    #[error("rating {0} outside allowed range 1-7")]
    RatingOutOfRange(u8),
    #[error("series length {len} shorter than window size {kappa}")]
    SeriesTooShort { len: usize, kappa: usize },
    #[error("window/stride parameters must be at least 1")]
    BadWindowParams,
    #[error("split ratios must sum to 1, got {0}")]
    BadRatios(f64),
    #[error("need at least 3 windows to split, got {0}")]
    TooFewWindows(usize),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Airspace(#[from] airspace::AirspaceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The three simulated working conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "high-nominal")]
    HighNominal,
    #[serde(rename = "high-offnominal")]
    HighOffNominal,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Baseline, Scenario::HighNominal, Scenario::HighOffNominal];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Baseline => "baseline",
            Scenario::HighNominal => "high-nominal",
            Scenario::HighOffNominal => "high-offnominal",
        }
    }

    pub fn parse(s: &str) -> Result<Scenario, DatasetError> {
        match s {
            "baseline" => Ok(Scenario::Baseline),
            "high-nominal" => Ok(Scenario::HighNominal),
            "high-offnominal" => Ok(Scenario::HighOffNominal),
            other => Err(DatasetError::UnknownScenario(other.to_string())),
        }
    }
}

/// A single self-evaluated workload rating.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadReport {
    pub t: usize,
    pub rating: u8,
}

/// Per-timestamp rating series, step-interpolated from sparse reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadSeries {
    pub trial_id: String,
    pub ratings: Vec<u8>,
}

/// One supervised unit: kappa consecutive graphs ending at `end_t` plus the
/// rating at `end_t`. Graphs live in the owning trial; the window stores the
/// trial index and time range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphWindow {
    pub trial: usize,
    pub end_t: usize,
    pub kappa: usize,
    pub label: u8,
}

impl GraphWindow {
    pub fn start_t(&self) -> usize {
        self.end_t + 1 - self.kappa
    }

    /// The graphs covered by this window, oldest first.
    pub fn graphs<'a>(&self, trials: &'a [TrialData]) -> &'a [AirspaceGraph] {
        &trials[self.trial].graphs[self.start_t()..=self.end_t]
    }
}

/// A fully-loaded trial: graphs for every timestamp plus the label series.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub trial_id: String,
    pub scenario: Scenario,
    pub graphs: Vec<AirspaceGraph>,
    pub series: WorkloadSeries,
}

impl TrialData {
    /// Builds graphs from snapshots; empty snapshots get a placeholder node.
    pub fn from_snapshots(
        trial_id: &str,
        scenario: Scenario,
        snapshots: &[TrafficSnapshot],
        reports: &[WorkloadReport],
        edge_threshold: f64,
    ) -> Result<TrialData, DatasetError> {
        let graphs = snapshots
            .iter()
            .map(|s| {
                if s.aircraft.is_empty() {
                    Ok(AirspaceGraph::placeholder())
                } else {
                    airspace::build_graph(s, edge_threshold)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let series = interpolate_labels(trial_id, reports, snapshots.len())?;
        Ok(TrialData { trial_id: trial_id.to_string(), scenario, graphs, series })
    }
}

/// Disjoint train/validation/test window indices. The validation part doubles
/// as the conformal calibration set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// Per trial, earliest 40% of windows -> train, next 30% -> validation,
    /// latest 30% -> test. No time overlap leaks between parts.
    Contiguous,
    /// Seeded shuffle then partition.
    Random,
}

/// Step interpolation: each timestamp takes the most recent report; timestamps
/// before the first report are back-filled with its value.
pub fn interpolate_labels(
    trial_id: &str,
    reports: &[WorkloadReport],
    len: usize,
) -> Result<WorkloadSeries, DatasetError> {
    if reports.is_empty() {
        return Err(DatasetError::EmptyReports);
    }
    for r in reports {
        if r.t >= len {
            return Err(DatasetError::ReportOutOfRange { t: r.t, len });
        }
        if !(1..=7).contains(&r.rating) {
            return Err(DatasetError::RatingOutOfRange(r.rating));
        }
    }
    let mut sorted = reports.to_vec();
    sorted.sort_by_key(|r| r.t);
    let mut ratings = vec![sorted[0].rating; len];
    for pair in sorted.windows(2) {
        for slot in ratings.iter_mut().take(pair[1].t).skip(pair[0].t) {
            *slot = pair[0].rating;
        }
    }
    let last = sorted.last().unwrap();
    for slot in ratings.iter_mut().skip(last.t) {
        *slot = last.rating;
    }
    Ok(WorkloadSeries { trial_id: trial_id.to_string(), ratings })
}

/// Moving windows with end timestamps kappa-1, kappa-1+stride, ...
/// Count = floor((T-kappa)/stride) + 1.
pub fn make_windows(
    trial: usize,
    series: &WorkloadSeries,
    kappa: usize,
    stride: usize,
) -> Result<Vec<GraphWindow>, DatasetError> {
    if kappa < 1 || stride < 1 {
        return Err(DatasetError::BadWindowParams);
    }
    let len = series.ratings.len();
    if len < kappa {
        return Err(DatasetError::SeriesTooShort { len, kappa });
    }
    Ok((0..)
        .map(|i| kappa - 1 + i * stride)
        .take_while(|&end_t| end_t < len)
        .map(|end_t| GraphWindow { trial, end_t, kappa, label: series.ratings[end_t] })
        .collect())
}

/// Splits window indices 0..windows.len() into train/validation/test.
pub fn split(
    windows: &[GraphWindow],
    ratios: (f64, f64, f64),
    seed: u64,
    mode: SplitMode,
) -> Result<DatasetSplit, DatasetError> {
    let total = ratios.0 + ratios.1 + ratios.2;
    if (total - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(total));
    }
    if windows.len() < 3 {
        return Err(DatasetError::TooFewWindows(windows.len()));
    }
    let mut out = DatasetSplit { train: vec![], validation: vec![], test: vec![] };
    match mode {
        SplitMode::Contiguous => {
            let mut trials: Vec<usize> = windows.iter().map(|w| w.trial).collect();
            trials.sort_unstable();
            trials.dedup();
            for trial in trials {
                let mut idx: Vec<usize> =
                    (0..windows.len()).filter(|&i| windows[i].trial == trial).collect();
                idx.sort_by_key(|&i| windows[i].end_t);
                partition_into(&idx, ratios, &mut out);
            }
        }
        SplitMode::Random => {
            let mut idx: Vec<usize> = (0..windows.len()).collect();
            Rng::derive(seed, 0x5bd1).shuffle(&mut idx);
            partition_into(&idx, ratios, &mut out);
        }
    }
    // A tiny trial can starve a part; backfill from the largest part so all
    // three are nonempty whenever there are at least 3 windows.
    loop {
        let (tr, va, te) =
            (out.train.len(), out.validation.len(), out.test.len());
        if tr > 0 && va > 0 && te > 0 {
            break;
        }
        let donor = if tr >= va && tr >= te {
            &mut out.train
        } else if va >= te {
            &mut out.validation
        } else {
            &mut out.test
        };
        let moved = donor.pop().expect("at least 3 windows");
        if tr == 0 {
            out.train.push(moved);
        } else if va == 0 {
            out.validation.push(moved);
        } else {
            out.test.push(moved);
        }
    }
    Ok(out)
}

fn partition_into(idx: &[usize], ratios: (f64, f64, f64), out: &mut DatasetSplit) {
    let n = idx.len();
    let n_train = (ratios.0 * n as f64).floor() as usize;
    let n_val = (ratios.1 * n as f64).floor() as usize;
    out.train.extend_from_slice(&idx[..n_train]);
    out.validation.extend_from_slice(&idx[n_train..n_train + n_val]);
    out.test.extend_from_slice(&idx[n_train + n_val..]);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Reports file: sparse ratings for one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportsFile {
    pub format_version: u32,
    pub trial_id: String,
    pub scenario: Scenario,
    pub reports: Vec<WorkloadReport>,
}

impl ReportsFile {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for r in &self.reports {
            if !(1..=7).contains(&r.rating) {
                return Err(DatasetError::RatingOutOfRange(r.rating));
            }
        }
        Ok(())
    }
}

pub fn write_reports<W: Write>(out: W, file: &ReportsFile) -> Result<(), DatasetError> {
    file.validate()?;
    serde_json::to_writer_pretty(out, file)?;
    Ok(())
}

pub fn read_reports<R: Read>(input: R) -> Result<ReportsFile, DatasetError> {
    let file: ReportsFile = serde_json::from_reader(input)?;
    file.validate()?;
    Ok(file)
}

pub fn read_reports_path(path: &Path) -> Result<ReportsFile, DatasetError> {
    read_reports(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// One line per window in the JSONL cache.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowRecord {
    pub format_version: u32,
    pub trial_id: String,
    pub trial: usize,
    pub start_t: usize,
    pub end_t: usize,
    pub label: u8,
}

pub fn write_windows_jsonl<W: Write>(
    mut out: W,
    windows: &[GraphWindow],
    trials: &[TrialData],
) -> Result<(), DatasetError> {
    for w in windows {
        let rec = WindowRecord {
            format_version: FORMAT_VERSION,
            trial_id: trials[w.trial].trial_id.clone(),
            trial: w.trial,
            start_t: w.start_t(),
            end_t: w.end_t,
            label: w.label,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_windows_jsonl<R: Read>(input: R) -> Result<Vec<GraphWindow>, DatasetError> {
    let reader = std::io::BufReader::new(input);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: WindowRecord = serde_json::from_str(&line)?;
        out.push(GraphWindow {
            trial: rec.trial,
            end_t: rec.end_t,
            kappa: rec.end_t + 1 - rec.start_t,
            label: rec.label,
        });
    }
    Ok(out)
}

/// Atomic file write: write to a temp sibling then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(ratings: Vec<u8>) -> WorkloadSeries {
        WorkloadSeries { trial_id: "t".into(), ratings }
    }

    #[test]
    fn step_interpolation_oracle() {
        let reports = vec![
            WorkloadReport { t: 36, rating: 2 },
            WorkloadReport { t: 144, rating: 5 },
            WorkloadReport { t: 252, rating: 3 },
        ];
        let s = interpolate_labels("x", &reports, 300).unwrap();
        // independent step-function oracle
        let oracle = |t: usize| -> u8 {
            let mut v = 2; // back-fill before first report
            if t >= 36 {
                v = 2;
            }
            if t >= 144 {
                v = 5;
            }
            if t >= 252 {
                v = 3;
            }
            v
        };
        for t in 0..300 {
            assert_eq!(s.ratings[t], oracle(t), "t={t}");
        }
    }

    #[test]
    fn single_report_constant_series() {
        let s = interpolate_labels("x", &[WorkloadReport { t: 36, rating: 4 }], 300).unwrap();
        assert!(s.ratings.iter().all(|&r| r == 4));
    }

    #[test]
    fn report_at_series_length_rejected() {
        let err = interpolate_labels("x", &[WorkloadReport { t: 300, rating: 4 }], 300);
        assert!(matches!(err, Err(DatasetError::ReportOutOfRange { t: 300, len: 300 })));
    }

    #[test]
    fn window_count_reference_case() {
        let s = series(vec![3; 300]);
        let w = make_windows(0, &s, 36, 1).unwrap();
        assert_eq!(w.len(), 265);
        assert_eq!(w[0].end_t, 35);
        assert_eq!(w.last().unwrap().end_t, 299);
    }

    #[test]
    fn window_edge_cases() {
        let s = series(vec![1; 36]);
        assert_eq!(make_windows(0, &s, 36, 1).unwrap().len(), 1);
        let s2 = series(vec![1; 20]);
        assert_eq!(make_windows(0, &s2, 10, 10).unwrap().len(), 2);
        assert!(make_windows(0, &s2, 21, 1).is_err());
    }

    #[test]
    fn window_labels_at_end_timestamp() {
        let mut r = vec![1u8; 50];
        for (t, slot) in r.iter_mut().enumerate() {
            *slot = (t % 7 + 1) as u8;
        }
        let s = series(r.clone());
        for w in make_windows(0, &s, 5, 3).unwrap() {
            assert_eq!(w.label, r[w.end_t]);
        }
    }

    fn dummy_windows(n: usize) -> Vec<GraphWindow> {
        (0..n).map(|i| GraphWindow { trial: 0, end_t: 35 + i, kappa: 36, label: 1 }).collect()
    }

    #[test]
    fn contiguous_split_reference_sizes() {
        let w = dummy_windows(265);
        let s = split(&w, SPLIT_RATIOS, 0, SplitMode::Contiguous).unwrap();
        assert_eq!(s.train.len(), 106);
        assert_eq!(s.validation.len(), 79);
        assert_eq!(s.test.len(), 80);
    }

    #[test]
    fn three_windows_split_one_each() {
        let w = dummy_windows(3);
        let s = split(&w, SPLIT_RATIOS, 0, SplitMode::Contiguous).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1, 1, 1));
    }

    #[test]
    fn random_split_deterministic_by_seed() {
        let w = dummy_windows(50);
        let a = split(&w, SPLIT_RATIOS, 7, SplitMode::Random).unwrap();
        let b = split(&w, SPLIT_RATIOS, 7, SplitMode::Random).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn contiguous_split_is_leak_free() {
        let mut w = dummy_windows(265);
        w.extend((0..265).map(|i| GraphWindow { trial: 1, end_t: 35 + i, kappa: 36, label: 2 }));
        let s = split(&w, SPLIT_RATIOS, 0, SplitMode::Contiguous).unwrap();
        for &tr in &s.train {
            for &te in &s.test {
                if w[tr].trial == w[te].trial {
                    // train strictly precedes test and, with the validation
                    // buffer wider than kappa, shares no timestamps with it
                    assert!(w[tr].end_t < w[te].end_t);
                    assert!(w[tr].end_t < w[te].start_t());
                }
            }
        }
    }

    #[test]
    fn reports_round_trip_and_validation() {
        let file = ReportsFile {
            format_version: FORMAT_VERSION,
            trial_id: "tr1".into(),
            scenario: Scenario::Baseline,
            reports: vec![WorkloadReport { t: 36, rating: 2 }],
        };
        let mut buf = Vec::new();
        write_reports(&mut buf, &file).unwrap();
        let loaded = read_reports(&buf[..]).unwrap();
        assert_eq!(loaded.trial_id, "tr1");
        assert_eq!(loaded.reports, file.reports);

        let bad = r#"{"format_version":1,"trial_id":"x","scenario":"baseline","reports":[{"t":1,"rating":9}]}"#;
        let err = read_reports(bad.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("1-7"), "got: {err}");
    }

    #[test]
    fn windows_jsonl_round_trip() {
        let trials = vec![TrialData {
            trial_id: "tr1".into(),
            scenario: Scenario::Baseline,
            graphs: (0..10).map(|_| AirspaceGraph::placeholder()).collect(),
            series: series(vec![2; 10]),
        }];
        let windows = make_windows(0, &trials[0].series, 4, 2).unwrap();
        let mut buf = Vec::new();
        write_windows_jsonl(&mut buf, &windows, &trials).unwrap();
        let loaded = read_windows_jsonl(&buf[..]).unwrap();
        assert_eq!(loaded, windows);
    }
}
