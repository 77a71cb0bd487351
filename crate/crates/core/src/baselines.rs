//! Comparison methods: a density-only linear model, a ridge linear model on
//! aggregate window features, and a two-layer perceptron on the same
//! features.

use thiserror::Error;

use crate::airspace::AirspaceGraph;
use crate::dataset::{GraphWindow, TrialData};
use crate::egcn::NUM_CLASSES;
use crate::numkit::{AdamState, Matrix, NumError, Rng, Tape};

/// Length of the aggregate per-window feature vector.
pub const NUM_AGG_FEATURES: usize = 12;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("{lhs} feature rows but {rhs} labels")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("degenerate training data: aircraft count is constant")]
    ConstantCount,
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Per-timestamp summaries pooled over a window's kappa graphs:
/// mean/max aircraft count, mean/min horizontal separation, mean/min
/// vertical separation, mean/min scaled separation, then the standard
/// deviations of count and the three separations.
pub fn aggregate_features(graphs: &[AirspaceGraph]) -> [f64; NUM_AGG_FEATURES] {
    // per-timestamp: node count and tightest separations (denormalized)
    let mut counts = Vec::with_capacity(graphs.len());
    let mut h_sep = Vec::with_capacity(graphs.len());
    let mut v_sep = Vec::with_capacity(graphs.len());
    let mut s_sep = Vec::with_capacity(graphs.len());
    for g in graphs {
        let n = g.features.rows();
        counts.push(n as f64);
        let min_col = |c: usize| {
            (0..n).map(|r| g.features.at(r, c)).fold(f64::INFINITY, f64::min) * 100.0
        };
        s_sep.push(min_col(0));
        h_sep.push(min_col(1));
        v_sep.push(min_col(2));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let std = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    [
        mean(&counts),
        max(&counts),
        mean(&h_sep),
        min(&h_sep),
        mean(&v_sep),
        min(&v_sep),
        mean(&s_sep),
        min(&s_sep),
        std(&counts),
        std(&h_sep),
        std(&v_sep),
        std(&s_sep),
    ]
}

pub fn features_for_windows(
    trials: &[TrialData],
    windows: &[GraphWindow],
) -> Vec<[f64; NUM_AGG_FEATURES]> {
    windows.iter().map(|w| aggregate_features(w.graphs(trials))).collect()
}

/// Aircraft count at the window's end timestamp.
pub fn window_count(trials: &[TrialData], window: &GraphWindow) -> usize {
    trials[window.trial].graphs[window.end_t].features.rows()
}

pub fn counts_for_windows(trials: &[TrialData], windows: &[GraphWindow]) -> Vec<usize> {
    windows.iter().map(|w| window_count(trials, w)).collect()
}

fn clamp_round(score: f64) -> u8 {
    (score.round().clamp(1.0, NUM_CLASSES as f64)) as u8
}

/// Rating as a linear function of end-timestamp aircraft count,
/// least-squares fit, rounded and clamped to 1..=7 at prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct LrDensity {
    pub slope: f64,
    pub intercept: f64,
}

impl LrDensity {
    pub fn predict(&self, count: usize) -> u8 {
        clamp_round(self.slope * count as f64 + self.intercept)
    }
}

/// Simple least-squares line fit; errors when x is constant.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LrDensity, BaselineError> {
    if x.is_empty() {
        return Err(BaselineError::EmptyTrainingSet);
    }
    if x.len() != y.len() {
        return Err(BaselineError::LengthMismatch { lhs: x.len(), rhs: y.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mx;
        sxx += dx * dx;
        sxy += dx * (yi - my);
    }
    if sxx == 0.0 {
        return Err(BaselineError::ConstantCount);
    }
    let slope = sxy / sxx;
    Ok(LrDensity { slope, intercept: my - slope * mx })
}

pub fn fit_lr_density(counts: &[usize], labels: &[u8]) -> Result<LrDensity, BaselineError> {
    let x: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    fit_line(&x, &y)
}

/// Ridge regression (lambda = 1e-6) of rating on the 12 aggregate features
/// plus intercept, rounded and clamped at prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct LrGraphFeat {
    /// 12 feature coefficients followed by the intercept.
    pub coeffs: Vec<f64>,
}

pub const RIDGE_LAMBDA: f64 = 1e-6;

impl LrGraphFeat {
    pub fn score(&self, features: &[f64; NUM_AGG_FEATURES]) -> f64 {
        features.iter().zip(&self.coeffs).map(|(x, c)| x * c).sum::<f64>()
            + self.coeffs[NUM_AGG_FEATURES]
    }

    pub fn predict(&self, features: &[f64; NUM_AGG_FEATURES]) -> u8 {
        clamp_round(self.score(features))
    }
}

pub fn fit_lr_graphfeat(
    features: &[[f64; NUM_AGG_FEATURES]],
    labels: &[u8],
) -> Result<LrGraphFeat, BaselineError> {
    if features.is_empty() {
        return Err(BaselineError::EmptyTrainingSet);
    }
    if features.len() != labels.len() {
        return Err(BaselineError::LengthMismatch { lhs: features.len(), rhs: labels.len() });
    }
    let d = NUM_AGG_FEATURES + 1;
    // normal equations with a ridge term for conditioning
    let mut xtx = Matrix::zeros(d, d);
    let mut xty = Matrix::zeros(d, 1);
    for (f, &y) in features.iter().zip(labels) {
        let mut row = [0.0; NUM_AGG_FEATURES + 1];
        row[..NUM_AGG_FEATURES].copy_from_slice(f);
        row[NUM_AGG_FEATURES] = 1.0;
        for i in 0..d {
            xty.set(i, 0, xty.at(i, 0) + row[i] * y as f64);
            for j in 0..d {
                xtx.set(i, j, xtx.at(i, j) + row[i] * row[j]);
            }
        }
    }
    for i in 0..d {
        xtx.set(i, i, xtx.at(i, i) + RIDGE_LAMBDA);
    }
    let beta = xtx.solve(&xty)?;
    Ok(LrGraphFeat { coeffs: beta.data().to_vec() })
}

/// Two-layer perceptron (12 -> hidden -> 7) on standardized aggregate
/// features, trained with cross-entropy and Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub feat_mean: [f64; NUM_AGG_FEATURES],
    pub feat_std: [f64; NUM_AGG_FEATURES],
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: 32, epochs: 200, learning_rate: 0.005, batch_size: 32, seed: 0 }
    }
}

impl MlpModel {
    fn standardized(&self, features: &[f64; NUM_AGG_FEATURES]) -> Matrix {
        let row: Vec<f64> = features
            .iter()
            .zip(self.feat_mean.iter().zip(&self.feat_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect();
        Matrix::from_vec(1, NUM_AGG_FEATURES, row)
    }

    pub fn predict_probs(&self, features: &[f64; NUM_AGG_FEATURES]) -> Matrix {
        let x = self.standardized(features);
        let z1 = x.matmul(&self.w1).unwrap().add(&self.b1).unwrap().map(|v| v.max(0.0));
        z1.matmul(&self.w2).unwrap().add(&self.b2).unwrap().softmax_rows()
    }

    pub fn predict(&self, features: &[f64; NUM_AGG_FEATURES]) -> u8 {
        crate::egcn::argmax_class(&self.predict_probs(features))
    }
}

pub fn fit_mlp(
    features: &[[f64; NUM_AGG_FEATURES]],
    labels: &[u8],
    cfg: &MlpConfig,
) -> Result<MlpModel, BaselineError> {
    if features.is_empty() {
        return Err(BaselineError::EmptyTrainingSet);
    }
    if features.len() != labels.len() {
        return Err(BaselineError::LengthMismatch { lhs: features.len(), rhs: labels.len() });
    }
    let n = features.len();
    let mut feat_mean = [0.0; NUM_AGG_FEATURES];
    let mut feat_std = [0.0; NUM_AGG_FEATURES];
    for j in 0..NUM_AGG_FEATURES {
        let col: Vec<f64> = features.iter().map(|f| f[j]).collect();
        let m = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        feat_mean[j] = m;
        feat_std[j] = var.sqrt().max(1e-9);
    }

    let mut rng = Rng::derive(cfg.seed, 0x317);
    let limit1 = (6.0 / (NUM_AGG_FEATURES + cfg.hidden) as f64).sqrt();
    let limit2 = (6.0 / (cfg.hidden + NUM_CLASSES) as f64).sqrt();
    let mut w1 = Matrix::from_vec(
        NUM_AGG_FEATURES,
        cfg.hidden,
        (0..NUM_AGG_FEATURES * cfg.hidden).map(|_| rng.uniform(-limit1, limit1)).collect(),
    );
    let mut b1 = Matrix::zeros(1, cfg.hidden);
    let mut w2 = Matrix::from_vec(
        cfg.hidden,
        NUM_CLASSES,
        (0..cfg.hidden * NUM_CLASSES).map(|_| rng.uniform(-limit2, limit2)).collect(),
    );
    let mut b2 = Matrix::zeros(1, NUM_CLASSES);

    let model_tmp = MlpModel {
        feat_mean,
        feat_std,
        w1: w1.clone(),
        b1: b1.clone(),
        w2: w2.clone(),
        b2: b2.clone(),
    };
    let std_rows: Vec<Matrix> = features.iter().map(|f| model_tmp.standardized(f)).collect();

    let mut adam = [
        AdamState::new(w1.rows(), w1.cols()),
        AdamState::new(b1.rows(), b1.cols()),
        AdamState::new(w2.rows(), w2.cols()),
        AdamState::new(b2.rows(), b2.cols()),
    ];
    for epoch in 0..cfg.epochs {
        let mut erng = Rng::derive(cfg.seed, 0x318 + epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        erng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut tape = Tape::new();
            let tw1 = tape.leaf(w1.clone());
            let tb1 = tape.leaf(b1.clone());
            let tw2 = tape.leaf(w2.clone());
            let tb2 = tape.leaf(b2.clone());
            let mut loss_sum: Option<crate::numkit::NodeId> = None;
            for &i in batch {
                let x = tape.leaf(std_rows[i].clone());
                let z1 = tape.matmul(x, tw1)?;
                let z1 = tape.add_bias(z1, tb1)?;
                let z1 = tape.relu(z1);
                let logits = tape.matmul(z1, tw2)?;
                let logits = tape.add_bias(logits, tb2)?;
                let probs = tape.softmax_rows(logits);
                let loss = tape.cross_entropy(probs, labels[i] as usize)?;
                loss_sum = Some(match loss_sum {
                    Some(acc) => tape.add(acc, loss)?,
                    None => loss,
                });
            }
            let mean_loss = tape.scale(loss_sum.unwrap(), 1.0 / batch.len() as f64);
            let grads = tape.backward(mean_loss)?;
            for (state, (param, id)) in adam
                .iter_mut()
                .zip([(&mut w1, tw1), (&mut b1, tb1), (&mut w2, tw2), (&mut b2, tb2)])
            {
                let g = grads.of(id, param.shape());
                state.update(param, &g, cfg.learning_rate)?;
            }
        }
    }
    Ok(MlpModel { feat_mean, feat_std, w1, b1, w2, b2 })
}
