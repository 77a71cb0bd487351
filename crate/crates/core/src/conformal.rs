//! Split conformal prediction over 7-class probability rows: calibration
//! quantiles, plain and adaptive prediction sets, and contiguous range
//! filling between the smallest and largest predicted rating.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::egcn::NUM_CLASSES;
use crate::numkit::Matrix;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("class label {0} out of range 1..=7")]
    LabelOutOfRange(u8),
    #[error("alpha {0} outside (0, 1]")]
    BadAlpha(f64),
    #[error("empty calibration set")]
    EmptyCalibration,
    #[error("{probs} probability rows but {labels} labels")]
    LengthMismatch { probs: usize, labels: usize },
    #[error("probability row must be 1x7, got {0}x{1}")]
    BadShape(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("predictions line {line}: {msg}")]
    Json { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "plain")]
    Plain,
    #[serde(rename = "adaptive")]
    Adaptive,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Plain => "plain",
            Method::Adaptive => "adaptive",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "plain" => Some(Method::Plain),
            "adaptive" => Some(Method::Adaptive),
            _ => None,
        }
    }
}

/// Score quantile, or the full-set sentinel when ceil((n+1)(1-alpha)) > n.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QHat {
    Value(f64),
    FullSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub method: Method,
    pub alpha: f64,
    pub n: usize,
    pub q_hat: QHat,
}

/// Nonempty class subset plus its contiguous fill.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    /// Ascending, deduplicated, values in 1..=7.
    pub classes: Vec<u8>,
}

impl PredictionSet {
    pub fn contains(&self, class: u8) -> bool {
        self.classes.binary_search(&class).is_ok()
    }

    pub fn size(&self) -> usize {
        self.classes.len()
    }

    /// Inclusive [min, max] range covering the set, e.g. {3,5,7} -> [3,7].
    pub fn fill_range(&self) -> (u8, u8) {
        (*self.classes.first().unwrap(), *self.classes.last().unwrap())
    }

    pub fn range_contains(&self, class: u8) -> bool {
        let (lo, hi) = self.fill_range();
        lo <= class && class <= hi
    }
}

fn check_probs(probs: &Matrix) -> Result<(), ConformalError> {
    if probs.shape() != (1, NUM_CLASSES) {
        return Err(ConformalError::BadShape(probs.rows(), probs.cols()));
    }
    Ok(())
}

/// Classes 0..6 sorted by descending probability, ties to the lower class.
fn descending_classes(probs: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| probs.at(0, b).total_cmp(&probs.at(0, a)).then(a.cmp(&b)));
    order
}

/// Plain score: one minus the probability of the true class. Adaptive score:
/// cumulative descending-sorted probability through the true class.
pub fn conformal_score(probs: &Matrix, true_class: u8, method: Method) -> Result<f64, ConformalError> {
    check_probs(probs)?;
    if true_class < 1 || true_class as usize > NUM_CLASSES {
        return Err(ConformalError::LabelOutOfRange(true_class));
    }
    let tc = (true_class - 1) as usize;
    Ok(match method {
        Method::Plain => 1.0 - probs.at(0, tc),
        Method::Adaptive => {
            let mut cum = 0.0;
            for c in descending_classes(probs) {
                cum += probs.at(0, c);
                if c == tc {
                    break;
                }
            }
            cum
        }
    })
}

/// q-hat = k-th smallest calibration score with k = ceil((n+1)(1-alpha));
/// the sentinel (full set) when k exceeds n.
pub fn calibrate(
    cal_probs: &[Matrix],
    cal_labels: &[u8],
    alpha: f64,
    method: Method,
) -> Result<CalibrationResult, ConformalError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ConformalError::BadAlpha(alpha));
    }
    if cal_probs.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    if cal_probs.len() != cal_labels.len() {
        return Err(ConformalError::LengthMismatch {
            probs: cal_probs.len(),
            labels: cal_labels.len(),
        });
    }
    let n = cal_probs.len();
    let mut scores = Vec::with_capacity(n);
    for (p, &y) in cal_probs.iter().zip(cal_labels) {
        scores.push(conformal_score(p, y, method)?);
    }
    scores.sort_by(f64::total_cmp);
    let k = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
    let q_hat = if k > n { QHat::FullSet } else { QHat::Value(scores[k.max(1) - 1]) };
    Ok(CalibrationResult { method, alpha, n, q_hat })
}

/// Prediction set for one probability row. Plain: {c : probs[c] >= 1 - q-hat};
/// adaptive: descending classes accumulated until the cumulative probability
/// reaches q-hat. With `guard`, the argmax class is always included so the
/// advisory names at least one level; coverage-validation tests disable it.
pub fn predict_set_with_guard(
    probs: &Matrix,
    calib: &CalibrationResult,
    guard: bool,
) -> Result<PredictionSet, ConformalError> {
    check_probs(probs)?;
    let mut classes: Vec<u8> = match calib.q_hat {
        QHat::FullSet => (1..=NUM_CLASSES as u8).collect(),
        QHat::Value(q) => match calib.method {
            Method::Plain => (0..NUM_CLASSES)
                .filter(|&c| probs.at(0, c) >= 1.0 - q)
                .map(|c| (c + 1) as u8)
                .collect(),
            Method::Adaptive => {
                let mut cum = 0.0;
                let mut picked = Vec::new();
                for c in descending_classes(probs) {
                    if cum >= q {
                        break;
                    }
                    cum += probs.at(0, c);
                    picked.push((c + 1) as u8);
                }
                picked
            }
        },
    };
    if guard && classes.is_empty() {
        let best = descending_classes(probs)[0];
        classes.push((best + 1) as u8);
    }
    classes.sort_unstable();
    classes.dedup();
    Ok(PredictionSet { classes })
}

pub fn predict_set(probs: &Matrix, calib: &CalibrationResult) -> Result<PredictionSet, ConformalError> {
    predict_set_with_guard(probs, calib, true)
}

/// One test-window record of the predictions JSONL stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub trial_id: String,
    pub end_t: usize,
    pub probs: Vec<f64>,
    pub set: Vec<u8>,
    pub range: [u8; 2],
    pub alpha: f64,
    pub method: String,
}

pub fn write_predictions_jsonl<W: Write>(
    mut out: W,
    records: &[PredictionRecord],
) -> Result<(), ConformalError> {
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| ConformalError::Json { line: 0, msg: e.to_string() })?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_predictions_jsonl<R: BufRead>(input: R) -> Result<Vec<PredictionRecord>, ConformalError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| ConformalError::Json { line: i + 1, msg: e.to_string() })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;

    fn row(vals: [f64; 7]) -> Matrix {
        Matrix::from_vec(1, 7, vals.to_vec())
    }

    fn random_probs(rng: &mut Rng) -> Matrix {
        let logits: Vec<f64> = (0..7).map(|_| rng.uniform(-2.0, 2.0)).collect();
        Matrix::from_vec(1, 7, logits).softmax_rows()
    }

    #[test]
    fn score_examples() {
        let one_hot = row([0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(conformal_score(&one_hot, 3, Method::Plain).unwrap(), 0.0);

        let p = row([0.5, 0.3, 0.2, 0.0, 0.0, 0.0, 0.0]);
        assert!((conformal_score(&p, 2, Method::Plain).unwrap() - 0.7).abs() < 1e-12);
        assert!((conformal_score(&p, 2, Method::Adaptive).unwrap() - 0.8).abs() < 1e-12);

        let uniform = row([1.0 / 7.0; 7]);
        for c in 1..=7 {
            assert!((conformal_score(&uniform, c, Method::Plain).unwrap() - 6.0 / 7.0).abs() < 1e-12);
        }
        assert!(matches!(
            conformal_score(&p, 8, Method::Plain),
            Err(ConformalError::LabelOutOfRange(8))
        ));
    }

    #[test]
    fn adaptive_score_matches_brute_force() {
        let mut rng = Rng::new(11);
        for _ in 0..200 {
            let p = random_probs(&mut rng);
            let y = 1 + rng.below(7) as u8;
            let got = conformal_score(&p, y, Method::Adaptive).unwrap();
            // brute force: sum of all probabilities >= p[y], ties by class order
            let mut pairs: Vec<(f64, usize)> = (0..7).map(|c| (p.at(0, c), c)).collect();
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut expect = 0.0;
            for (v, c) in pairs {
                expect += v;
                if c == (y - 1) as usize {
                    break;
                }
            }
            assert!((got - expect).abs() < 1e-12);
        }
    }

    fn probs_for_scores(scores: &[f64], labels: &[u8]) -> Vec<Matrix> {
        // plain score s for label y -> prob 1-s on y, remainder spread elsewhere
        scores
            .iter()
            .zip(labels)
            .map(|(&s, &y)| {
                let mut v = vec![s / 6.0; 7];
                v[(y - 1) as usize] = 1.0 - s;
                Matrix::from_vec(1, 7, v)
            })
            .collect()
    }

    #[test]
    fn calibrate_order_statistic_examples() {
        let scores = [0.1, 0.2, 0.3, 0.4];
        let labels = [1u8, 2, 3, 4];
        let probs = probs_for_scores(&scores, &labels);
        let cal = calibrate(&probs, &labels, 0.2, Method::Plain).unwrap();
        assert!(matches!(cal.q_hat, QHat::Value(q) if (q - 0.4).abs() < 1e-12));

        let nine: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let labels9 = vec![1u8; 9];
        let probs9 = probs_for_scores(&nine, &labels9);
        let cal9 = calibrate(&probs9, &labels9, 0.05, Method::Plain).unwrap();
        assert_eq!(cal9.q_hat, QHat::FullSet);

        let cal1 = calibrate(&probs_for_scores(&[0.3], &[2]), &[2], 0.5, Method::Plain).unwrap();
        assert!(matches!(cal1.q_hat, QHat::Value(q) if (q - 0.3).abs() < 1e-12));
    }

    #[test]
    fn calibrate_matches_brute_force_order_statistic() {
        let mut rng = Rng::new(7);
        for _ in 0..100 {
            let n = 1 + rng.below(40);
            let labels: Vec<u8> = (0..n).map(|_| 1 + rng.below(7) as u8).collect();
            let probs: Vec<Matrix> = (0..n).map(|_| random_probs(&mut rng)).collect();
            let alpha = rng.uniform(0.01, 0.99);
            let cal = calibrate(&probs, &labels, alpha, Method::Plain).unwrap();
            let mut scores: Vec<f64> = probs
                .iter()
                .zip(&labels)
                .map(|(p, &y)| conformal_score(p, y, Method::Plain).unwrap())
                .collect();
            scores.sort_by(f64::total_cmp);
            let k = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
            match cal.q_hat {
                QHat::FullSet => assert!(k > n),
                QHat::Value(q) => assert_eq!(q, scores[k - 1]),
            }
        }
    }

    #[test]
    fn calibrate_rejects_bad_inputs() {
        assert!(matches!(
            calibrate(&[], &[], 0.1, Method::Plain),
            Err(ConformalError::EmptyCalibration)
        ));
        let probs = probs_for_scores(&[0.1], &[1]);
        assert!(matches!(
            calibrate(&probs, &[1], 0.0, Method::Plain),
            Err(ConformalError::BadAlpha(_))
        ));
        assert!(matches!(
            calibrate(&probs, &[1, 2], 0.1, Method::Plain),
            Err(ConformalError::LengthMismatch { probs: 1, labels: 2 })
        ));
    }

    fn cal(method: Method, q_hat: QHat) -> CalibrationResult {
        CalibrationResult { method, alpha: 0.1, n: 10, q_hat }
    }

    #[test]
    fn predict_set_examples() {
        let p = row([0.6, 0.3, 0.1, 0.0, 0.0, 0.0, 0.0]);
        let full = predict_set(&p, &cal(Method::Plain, QHat::FullSet)).unwrap();
        assert_eq!(full.classes, vec![1, 2, 3, 4, 5, 6, 7]);

        let plain = predict_set(&p, &cal(Method::Plain, QHat::Value(0.5))).unwrap();
        assert_eq!(plain.classes, vec![1]);

        let p2 = row([0.5, 0.3, 0.2, 0.0, 0.0, 0.0, 0.0]);
        let adaptive = predict_set(&p2, &cal(Method::Adaptive, QHat::Value(0.85))).unwrap();
        assert_eq!(adaptive.classes, vec![1, 2, 3]);
    }

    #[test]
    fn empty_set_guard_keeps_argmax() {
        let p = row([0.1, 0.4, 0.2, 0.1, 0.1, 0.05, 0.05]);
        let guarded = predict_set(&p, &cal(Method::Plain, QHat::Value(0.0))).unwrap();
        assert_eq!(guarded.classes, vec![2]);
        let raw = predict_set_with_guard(&p, &cal(Method::Plain, QHat::Value(0.0)), false).unwrap();
        assert!(raw.classes.is_empty());
    }

    #[test]
    fn fill_range_examples() {
        let s = PredictionSet { classes: vec![3, 5, 7] };
        assert_eq!(s.fill_range(), (3, 7));
        assert!(s.range_contains(4) && !s.contains(4));
        assert_eq!(PredictionSet { classes: vec![4] }.fill_range(), (4, 4));
        assert_eq!(PredictionSet { classes: vec![1, 7] }.fill_range(), (1, 7));
    }

    #[test]
    fn sets_shrink_as_alpha_grows() {
        let mut rng = Rng::new(19);
        let n = 60;
        let labels: Vec<u8> = (0..n).map(|_| 1 + rng.below(7) as u8).collect();
        let probs: Vec<Matrix> = (0..n).map(|_| random_probs(&mut rng)).collect();
        for method in [Method::Plain, Method::Adaptive] {
            for _ in 0..20 {
                let a1 = rng.uniform(0.02, 0.5);
                let a2 = rng.uniform(a1, 0.9);
                let c1 = calibrate(&probs, &labels, a1, method).unwrap();
                let c2 = calibrate(&probs, &labels, a2, method).unwrap();
                let p = random_probs(&mut rng);
                let s1 = predict_set_with_guard(&p, &c1, false).unwrap();
                let s2 = predict_set_with_guard(&p, &c2, false).unwrap();
                for c in &s2.classes {
                    assert!(s1.contains(*c), "{method:?}: alpha {a1} set missing class {c} from alpha {a2}");
                }
            }
        }
    }

    #[test]
    fn plain_sets_are_threshold_sets() {
        let mut rng = Rng::new(23);
        for _ in 0..100 {
            let p = random_probs(&mut rng);
            let q = rng.next_f64();
            let s =
                predict_set_with_guard(&p, &cal(Method::Plain, QHat::Value(q)), false).unwrap();
            for c in 1..=7u8 {
                if s.contains(c) {
                    for c2 in 1..=7u8 {
                        if p.at(0, (c2 - 1) as usize) >= p.at(0, (c - 1) as usize) {
                            assert!(s.contains(c2));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn predictions_jsonl_round_trip() {
        let records = vec![
            PredictionRecord {
                trial_id: "t0".into(),
                end_t: 35,
                probs: vec![0.1, 0.2, 0.3, 0.1, 0.1, 0.1, 0.1],
                set: vec![2, 3],
                range: [2, 3],
                alpha: 0.1,
                method: "plain".into(),
            },
            PredictionRecord {
                trial_id: "t1".into(),
                end_t: 36,
                probs: vec![0.9, 0.05, 0.05, 0.0, 0.0, 0.0, 0.0],
                set: vec![1],
                range: [1, 1],
                alpha: 0.1,
                method: "adaptive".into(),
            },
        ];
        let mut buf = Vec::new();
        write_predictions_jsonl(&mut buf, &records).unwrap();
        let back = read_predictions_jsonl(&buf[..]).unwrap();
        assert_eq!(records, back);
        let mut buf2 = Vec::new();
        write_predictions_jsonl(&mut buf2, &records).unwrap();
        assert_eq!(buf, buf2, "serialization must be byte-stable");
    }

    #[test]
    fn bad_jsonl_reports_line() {
        let text = "{\"trial_id\":\"a\",\"end_t\":1,\"probs\":[],\"set\":[1],\"range\":[1,1],\"alpha\":0.1,\"method\":\"plain\"}\nnot json\n";
        let err = read_predictions_jsonl(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
