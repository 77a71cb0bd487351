//! Communication transcript analysis: closed-loop deviation coding (an event
//! whose speaker role repeats the previous event's role) and recurrence
//! quantification of the resulting binary deviation series.

use std::io::{Read, Write};

use thiserror::Error;

/// Default recurrence tolerance.
pub const DEFAULT_RHO: f64 = 0.1;
/// Default minimum diagonal line length for determinism.
pub const DEFAULT_L_MIN: usize = 2;
/// Transcript CSV header.
pub const TRANSCRIPT_CSV_HEADER: &str = "speaker_role,start,end,text";

#[derive(Debug, Error)]
pub enum CommError {
    #[error("transcript line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("transcript line {line}: end {end} before start {start}")]
    NegativeDuration { line: usize, start: f64, end: f64 },
    #[error("transcript line {line}: events not sorted by start time")]
    Unsorted { line: usize },
    #[error("empty series")]
    EmptySeries,
    #[error("recurrence tolerance must be positive, got {0}")]
    BadRho(f64),
    #[error("minimum line length must be at least 2, got {0}")]
    BadLMin(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeakerRole {
    Atc,
    Pilot,
}

impl SpeakerRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SpeakerRole::Atc => "atc",
            SpeakerRole::Pilot => "pilot",
        }
    }

    pub fn parse(s: &str) -> Option<SpeakerRole> {
        match s {
            "atc" => Some(SpeakerRole::Atc),
            "pilot" => Some(SpeakerRole::Pilot),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommEvent {
    pub role: SpeakerRole,
    pub start: f64,
    pub end: f64,
    pub text: String,
    /// Set by `code_clcd`.
    pub deviation: bool,
}

/// Parses and validates a `speaker_role,start,end,text` transcript. Events
/// must be sorted by start time; an empty file is a valid empty transcript.
pub fn parse_transcript<R: Read>(input: R) -> Result<Vec<CommEvent>, CommError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    {
        let headers = reader.headers().map_err(|e| CommError::Csv { line: 1, msg: e.to_string() })?;
        let expect: Vec<&str> = TRANSCRIPT_CSV_HEADER.split(',').collect();
        if headers.iter().collect::<Vec<_>>() != expect {
            return Err(CommError::Csv {
                line: 1,
                msg: format!("expected header `{TRANSCRIPT_CSV_HEADER}`"),
            });
        }
    }
    let mut events = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| CommError::Csv { line, msg: e.to_string() })?;
        if record.len() != 4 {
            return Err(CommError::Csv { line, msg: format!("expected 4 fields, got {}", record.len()) });
        }
        let role = SpeakerRole::parse(&record[0])
            .ok_or_else(|| CommError::Csv { line, msg: format!("unknown speaker role `{}`", &record[0]) })?;
        let start: f64 = record[1]
            .parse()
            .map_err(|_| CommError::Csv { line, msg: format!("bad start time `{}`", &record[1]) })?;
        let end: f64 = record[2]
            .parse()
            .map_err(|_| CommError::Csv { line, msg: format!("bad end time `{}`", &record[2]) })?;
        if end < start {
            return Err(CommError::NegativeDuration { line, start, end });
        }
        if let Some(prev) = events.last() {
            let prev: &CommEvent = prev;
            if start < prev.start {
                return Err(CommError::Unsorted { line });
            }
        }
        events.push(CommEvent { role, start, end, text: record[3].to_string(), deviation: false });
    }
    Ok(events)
}

pub fn write_transcript<W: Write>(mut out: W, events: &[CommEvent]) -> Result<(), CommError> {
    writeln!(out, "{TRANSCRIPT_CSV_HEADER}")?;
    for e in events {
        let text = if e.text.contains([',', '"', '\n']) {
            format!("\"{}\"", e.text.replace('"', "\"\""))
        } else {
            e.text.clone()
        };
        writeln!(out, "{},{},{},{}", e.role.as_str(), e.start, e.end, text)?;
    }
    Ok(())
}

/// Marks closed-loop deviations: an event deviates iff the previous event has
/// the same speaker role; the first event is never a deviation.
pub fn code_clcd(events: &mut [CommEvent]) {
    for i in 0..events.len() {
        events[i].deviation = i > 0 && events[i].role == events[i - 1].role;
    }
}

/// The 0/1 deviation series used as the recurrence phase vector.
pub fn deviation_series(events: &[CommEvent]) -> Vec<f64> {
    events.iter().map(|e| if e.deviation { 1.0 } else { 0.0 }).collect()
}

/// Binary recurrence structure: R[i][j] = 1 iff |x_i - x_j| <= rho.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecurrenceMatrix {
    pub n: usize,
    cells: Vec<u8>,
}

impl RecurrenceMatrix {
    pub fn at(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.n + j] == 1
    }
}

pub fn recurrence_matrix(series: &[f64], rho: f64) -> Result<RecurrenceMatrix, CommError> {
    if series.is_empty() {
        return Err(CommError::EmptySeries);
    }
    if rho <= 0.0 {
        return Err(CommError::BadRho(rho));
    }
    let n = series.len();
    let mut cells = vec![0u8; n * n];
    for i in 0..n {
        for j in 0..n {
            if (series[i] - series[j]).abs() <= rho {
                cells[i * n + j] = 1;
            }
        }
    }
    Ok(RecurrenceMatrix { n, cells })
}

/// Recurrence rate: density of recurrence points, main diagonal included.
pub fn rr(r: &RecurrenceMatrix) -> f64 {
    let total: usize = r.cells.iter().map(|&c| c as usize).sum();
    total as f64 / (r.n * r.n) as f64
}

/// Run lengths of recurrence points along every off-main diagonal (both
/// sides counted separately).
fn diagonal_runs(r: &RecurrenceMatrix) -> Vec<usize> {
    let mut runs = Vec::new();
    for d in 1..r.n {
        for (i0, j0) in [(0usize, d), (d, 0usize)] {
            let mut run = 0usize;
            let len = r.n - d;
            for k in 0..len {
                if r.at(i0 + k, j0 + k) {
                    run += 1;
                } else {
                    if run > 0 {
                        runs.push(run);
                    }
                    run = 0;
                }
            }
            if run > 0 {
                runs.push(run);
            }
        }
    }
    runs
}

/// Determinism: fraction of off-main-diagonal recurrence points lying on
/// diagonal lines of length >= l_min; 0 when there are no such points.
pub fn det(r: &RecurrenceMatrix, l_min: usize) -> Result<f64, CommError> {
    if l_min < 2 {
        return Err(CommError::BadLMin(l_min));
    }
    let runs = diagonal_runs(r);
    let total: usize = runs.iter().sum();
    if total == 0 {
        return Ok(0.0);
    }
    let on_lines: usize = runs.iter().filter(|&&l| l >= l_min).sum();
    Ok(on_lines as f64 / total as f64)
}

/// Longest off-main-diagonal line of recurrence points (0 if none).
pub fn max_l(r: &RecurrenceMatrix) -> usize {
    diagonal_runs(r).into_iter().max().unwrap_or(0)
}

/// One output row of the RQA summary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RqaRow {
    pub trial_id: String,
    pub rr: f64,
    pub det: f64,
    pub maxl: usize,
    pub n_events: usize,
    pub n_deviations: usize,
}

/// Full per-transcript pipeline: deviation coding then RQA over the binary
/// deviation series.
pub fn analyze_transcript(
    trial_id: &str,
    events: &mut [CommEvent],
    rho: f64,
    l_min: usize,
) -> Result<RqaRow, CommError> {
    code_clcd(events);
    let series = deviation_series(events);
    let r = recurrence_matrix(&series, rho)?;
    Ok(RqaRow {
        trial_id: trial_id.to_string(),
        rr: rr(&r),
        det: det(&r, l_min)?,
        maxl: max_l(&r),
        n_events: events.len(),
        n_deviations: events.iter().filter(|e| e.deviation).count(),
    })
}

pub fn write_rqa_csv<W: Write>(mut out: W, rows: &[RqaRow]) -> Result<(), CommError> {
    writeln!(out, "trial_id,rr,det,maxl,n_events,n_deviations")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.trial_id, r.rr, r.det, r.maxl, r.n_events, r.n_deviations)?;
    }
    Ok(())
}
