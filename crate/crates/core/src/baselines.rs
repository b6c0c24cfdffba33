//! Comparison predictors: last-visit echo, most-frequent history, lagged
//! logistic regression and a lagged one-hidden-layer perceptron.

use serde::{Deserialize, Serialize};

use crate::data::{Cohort, EncodedPatient};
use crate::error::{Error, Result};
use crate::gru::PROB_CLAMP;
use crate::metrics::{PredictionRanking, VisitPredictor};
use crate::optim::{adadelta_step, sgd_step, AdadeltaState, OptimizerKind};
use crate::params::{Parameterized, TensorEntry};
use crate::rng::Rng;
use crate::tensor::{dot, orthonormal_init, sigmoid_scalar, softmax_slice, Matrix, Vector};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BaselineTrainConfig {
    /// Number of past visits aggregated into the feature vector.
    pub lag: usize,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    /// Hidden width of the perceptron.
    pub hidden: usize,
    pub rho: f64,
    pub epsilon: f64,
    pub optimizer: OptimizerKind,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        BaselineTrainConfig {
            lag: 5,
            epochs: 10,
            l2: 0.001,
            seed: 0,
            hidden: 128,
            rho: 0.95,
            epsilon: 1e-6,
            optimizer: OptimizerKind::Adadelta,
        }
    }
}

impl BaselineTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.lag < 1 || self.epochs < 1 || self.hidden < 1 {
            return Err(Error::InvalidArgument(
                "lag, epochs and hidden width must be at least 1".to_string(),
            ));
        }
        if self.l2 < 0.0 {
            return Err(Error::InvalidArgument("l2 must be nonnegative".to_string()));
        }
        Ok(())
    }
}

/// Ranking that repeats the most recent visit: its codes first (ascending
/// index), everything else after. `target_visit` is 0-based.
pub fn last_visit_ranking(
    enc: &EncodedPatient,
    target_visit: usize,
    p: usize,
) -> Result<PredictionRanking> {
    if target_visit < 1 || target_visit >= enc.n() {
        return Err(Error::InsufficientData(format!(
            "no history before visit {target_visit} of patient '{}'",
            enc.patient_id
        )));
    }
    let mut scores = vec![0.0; p];
    for &i in &enc.code_idx[target_visit - 1] {
        scores[i] = 1.0;
    }
    Ok(PredictionRanking { scores, log_gap: None })
}

/// Ranking by occurrence count over all visits before the target, ties by
/// ascending index.
pub fn most_frequent_ranking(
    enc: &EncodedPatient,
    target_visit: usize,
    p: usize,
) -> Result<PredictionRanking> {
    if target_visit < 1 || target_visit >= enc.n() {
        return Err(Error::InsufficientData(format!(
            "no history before visit {target_visit} of patient '{}'",
            enc.patient_id
        )));
    }
    let mut scores = vec![0.0; p];
    for visit in &enc.code_idx[..target_visit] {
        for &i in visit {
            scores[i] += 1.0;
        }
    }
    Ok(PredictionRanking { scores, log_gap: None })
}

pub struct LastVisitBaseline {
    pub p: usize,
}

impl VisitPredictor for LastVisitBaseline {
    fn rankings(&self, enc: &EncodedPatient) -> Result<Vec<PredictionRanking>> {
        (1..enc.n())
            .map(|v| last_visit_ranking(enc, v, self.p))
            .collect()
    }
}

pub struct MostFrequentBaseline {
    pub p: usize,
}

impl VisitPredictor for MostFrequentBaseline {
    fn rankings(&self, enc: &EncodedPatient) -> Result<Vec<PredictionRanking>> {
        (1..enc.n())
            .map(|v| most_frequent_ranking(enc, v, self.p))
            .collect()
    }
}

/// Elementwise sum of the last min(lag, visits so far) multi-hot vectors
/// before `target_visit` (0-based). Counts, not clipped to one.
pub fn aggregate_lag_features(
    enc: &EncodedPatient,
    target_visit: usize,
    lag: usize,
    p: usize,
) -> Vec<f64> {
    let lo = target_visit.saturating_sub(lag);
    let mut features = vec![0.0; p];
    for visit in &enc.code_idx[lo..target_visit] {
        for &i in visit {
            features[i] += 1.0;
        }
    }
    features
}

/// Per-label logistic regression over lag features, with a separate
/// linear + ReLU model for the log-gap.
#[derive(Clone, Debug)]
pub struct LogisticParams {
    /// p_in × p_out.
    pub w: Matrix,
    pub b: Vector,
    pub w_time: Vector,
    pub b_time: f64,
    pub lag: usize,
}

impl LogisticParams {
    pub fn zeros(p: usize, lag: usize) -> Self {
        LogisticParams {
            w: Matrix::zeros(p, p),
            b: Vector::zeros(p),
            w_time: Vector::zeros(p),
            b_time: 0.0,
            lag,
        }
    }

    /// Per-label probabilities and the time head pre-activation.
    pub fn forward(&self, features: &[f64]) -> (Vec<f64>, f64) {
        let p_out = self.b.len();
        let mut z = vec![0.0; p_out];
        self.w.mv_t_into(features, &mut z);
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = sigmoid_scalar(*zj + self.b[j]);
        }
        let time_pre = dot(self.w_time.as_slice(), features) + self.b_time;
        (z, time_pre)
    }
}

impl Parameterized for LogisticParams {
    fn tensor_entries(&self) -> Vec<TensorEntry<'_>> {
        vec![
            TensorEntry {
                name: "w".into(),
                shape: vec![self.w.rows(), self.w.cols()],
                data: self.w.as_slice(),
            },
            TensorEntry { name: "b".into(), shape: vec![self.b.len()], data: self.b.as_slice() },
            TensorEntry {
                name: "w_time".into(),
                shape: vec![self.w_time.len()],
                data: self.w_time.as_slice(),
            },
            TensorEntry {
                name: "b_time".into(),
                shape: vec![1],
                data: std::slice::from_ref(&self.b_time),
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("w".into(), self.w.as_mut_slice()),
            ("b".into(), self.b.as_mut_slice()),
            ("w_time".into(), self.w_time.as_mut_slice()),
            ("b_time".into(), std::slice::from_mut(&mut self.b_time)),
        ]
    }
}

impl VisitPredictor for LogisticParams {
    fn rankings(&self, enc: &EncodedPatient) -> Result<Vec<PredictionRanking>> {
        Ok((1..enc.n())
            .map(|v| {
                let f = aggregate_lag_features(enc, v, self.lag, self.w.rows());
                let (scores, time_pre) = self.forward(&f);
                PredictionRanking {
                    scores,
                    log_gap: Some(time_pre.max(0.0)),
                }
            })
            .collect())
    }
}

/// Loss and gradients for one sample. The loss clamps probabilities before
/// the logs; the gradient uses the plain σ − y form.
fn logistic_loss_grad(
    params: &LogisticParams,
    features: &[f64],
    targets: &[usize],
    delta: f64,
    l2: f64,
) -> (f64, LogisticParams) {
    let p_out = params.b.len();
    let (probs, time_pre) = params.forward(features);
    let pred_gap = time_pre.max(0.0);

    let mut grads = LogisticParams::zeros(p_out, params.lag);
    let mut loss = 0.0;
    let mut dz = vec![0.0; p_out];
    let mut t_iter = targets.iter().peekable();
    for j in 0..p_out {
        let y = if t_iter.peek() == Some(&&j) {
            t_iter.next();
            1.0
        } else {
            0.0
        };
        let pc = probs[j].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        dz[j] = probs[j] - y;
    }
    loss += 0.5 * (delta - pred_gap) * (delta - pred_gap);
    let dq = if time_pre > 0.0 { pred_gap - delta } else { 0.0 };

    grads.w.add_outer(features, &dz);
    for j in 0..p_out {
        grads.b[j] += dz[j];
    }
    for (i, &f) in features.iter().enumerate() {
        grads.w_time[i] += f * dq;
    }
    grads.b_time += dq;

    if l2 != 0.0 {
        loss += l2 * (params.w.frobenius_sq() + dot(params.w_time.as_slice(), params.w_time.as_slice()));
        for (i, w) in params.w.as_slice().iter().enumerate() {
            grads.w.as_mut_slice()[i] += 2.0 * l2 * w;
        }
        for i in 0..params.w_time.len() {
            grads.w_time[i] += 2.0 * l2 * params.w_time[i];
        }
    }
    (loss, grads)
}

pub fn train_logistic(
    cohort: &Cohort,
    config: &BaselineTrainConfig,
) -> Result<(LogisticParams, Vec<f64>)> {
    config.validate()?;
    let p = cohort.vocabulary.len();
    let mut params = LogisticParams::zeros(p, config.lag);
    let encoded = cohort.encode()?;
    let mut state = AdadeltaState::new(&params);
    let mut rng = Rng::derive(config.seed, 0xba5e);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut samples = 0usize;
        for &pi in &order {
            let enc = &encoded[pi];
            for v in 1..enc.n() {
                let features = aggregate_lag_features(enc, v, config.lag, p);
                let (loss, grads) =
                    logistic_loss_grad(&params, &features, &enc.code_idx[v], enc.log_gaps[v], config.l2);
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        patient: enc.patient_id.clone(),
                    });
                }
                loss_sum += loss;
                samples += 1;
                match config.optimizer {
                    OptimizerKind::Adadelta => {
                        adadelta_step(&mut params, &grads, &mut state, config.rho, config.epsilon)
                    }
                    OptimizerKind::Sgd { lr } => sgd_step(&mut params, &grads, lr),
                }
            }
        }
        history.push(loss_sum / samples.max(1) as f64);
    }
    Ok((params, history))
}

/// One tanh hidden layer on lag features, softmax code output, ReLU time
/// head from the hidden layer.
#[derive(Clone, Debug)]
pub struct MlpParams {
    /// p_in × hidden.
    pub w1: Matrix,
    pub b1: Vector,
    /// hidden × p_out.
    pub w2: Matrix,
    pub b2: Vector,
    pub w_time: Vector,
    pub b_time: f64,
    pub lag: usize,
}

impl MlpParams {
    pub fn init(p: usize, hidden: usize, lag: usize, rng: &mut Rng) -> Self {
        // Lag features are raw counts; scale the first layer by 1/sqrt(fan_in)
        // to keep the tanh units out of saturation at the start.
        let mut w1 = orthonormal_init(p, hidden, rng);
        let scale = 1.0 / (p as f64).sqrt();
        for x in w1.as_mut_slice() {
            *x *= scale;
        }
        MlpParams {
            w1,
            b1: Vector::zeros(hidden),
            w2: orthonormal_init(hidden, p, rng),
            b2: Vector::zeros(p),
            w_time: crate::tensor::uniform_init(hidden, -0.1, 0.1, rng).expect("valid range"),
            b_time: 0.0,
            lag,
        }
    }

    fn zeros_like(&self) -> Self {
        MlpParams {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: Vector::zeros(self.b1.len()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: Vector::zeros(self.b2.len()),
            w_time: Vector::zeros(self.w_time.len()),
            b_time: 0.0,
            lag: self.lag,
        }
    }

    /// Hidden activations, output probabilities and time pre-activation.
    pub fn forward(&self, features: &[f64]) -> (Vec<f64>, Vector, f64) {
        let hidden = self.b1.len();
        let mut hid = vec![0.0; hidden];
        self.w1.mv_t_into(features, &mut hid);
        for (i, h) in hid.iter_mut().enumerate() {
            *h = (*h + self.b1[i]).tanh();
        }
        let mut logits = vec![0.0; self.b2.len()];
        self.w2.mv_t_into(&hid, &mut logits);
        for (j, l) in logits.iter_mut().enumerate() {
            *l += self.b2[j];
        }
        let probs = softmax_slice(&logits);
        let time_pre = dot(self.w_time.as_slice(), &hid) + self.b_time;
        (hid, probs, time_pre)
    }
}

impl Parameterized for MlpParams {
    fn tensor_entries(&self) -> Vec<TensorEntry<'_>> {
        vec![
            TensorEntry {
                name: "w1".into(),
                shape: vec![self.w1.rows(), self.w1.cols()],
                data: self.w1.as_slice(),
            },
            TensorEntry { name: "b1".into(), shape: vec![self.b1.len()], data: self.b1.as_slice() },
            TensorEntry {
                name: "w2".into(),
                shape: vec![self.w2.rows(), self.w2.cols()],
                data: self.w2.as_slice(),
            },
            TensorEntry { name: "b2".into(), shape: vec![self.b2.len()], data: self.b2.as_slice() },
            TensorEntry {
                name: "w_time".into(),
                shape: vec![self.w_time.len()],
                data: self.w_time.as_slice(),
            },
            TensorEntry {
                name: "b_time".into(),
                shape: vec![1],
                data: std::slice::from_ref(&self.b_time),
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("w1".into(), self.w1.as_mut_slice()),
            ("b1".into(), self.b1.as_mut_slice()),
            ("w2".into(), self.w2.as_mut_slice()),
            ("b2".into(), self.b2.as_mut_slice()),
            ("w_time".into(), self.w_time.as_mut_slice()),
            ("b_time".into(), std::slice::from_mut(&mut self.b_time)),
        ]
    }
}

impl VisitPredictor for MlpParams {
    fn rankings(&self, enc: &EncodedPatient) -> Result<Vec<PredictionRanking>> {
        Ok((1..enc.n())
            .map(|v| {
                let f = aggregate_lag_features(enc, v, self.lag, self.w1.rows());
                let (_, probs, time_pre) = self.forward(&f);
                PredictionRanking {
                    scores: probs.as_slice().to_vec(),
                    log_gap: Some(time_pre.max(0.0)),
                }
            })
            .collect())
    }
}

/// Same clamped elementwise cross-entropy as the recurrent network's code
/// head, plus squared loss on the log-gap, L2 on both weight matrices.
fn mlp_loss_grad(
    params: &MlpParams,
    features: &[f64],
    targets: &[usize],
    delta: f64,
    l2: f64,
) -> (f64, MlpParams) {
    let hidden = params.b1.len();
    let p_out = params.b2.len();
    let (hid, probs, time_pre) = params.forward(features);
    let pred_gap = time_pre.max(0.0);

    let mut loss = 0.0;
    let mut dprob = vec![0.0; p_out];
    let mut t_iter = targets.iter().peekable();
    for j in 0..p_out {
        let y = if t_iter.peek() == Some(&&j) {
            t_iter.next();
            1.0
        } else {
            0.0
        };
        let pr = probs[j];
        let pc = pr.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        if pr > PROB_CLAMP && pr < 1.0 - PROB_CLAMP {
            dprob[j] = -(y / pr) + (1.0 - y) / (1.0 - pr);
        }
    }
    loss += 0.5 * (delta - pred_gap) * (delta - pred_gap);
    let dq = if time_pre > 0.0 { pred_gap - delta } else { 0.0 };

    let mut inner = 0.0;
    for j in 0..p_out {
        inner += dprob[j] * probs[j];
    }
    let mut dlogits = vec![0.0; p_out];
    for j in 0..p_out {
        dlogits[j] = probs[j] * (dprob[j] - inner);
    }

    let mut grads = params.zeros_like();
    grads.w2.add_outer(&hid, &dlogits);
    for j in 0..p_out {
        grads.b2[j] += dlogits[j];
    }
    let mut dhid = vec![0.0; hidden];
    params.w2.mv_into(&dlogits, &mut dhid);
    for i in 0..hidden {
        dhid[i] += params.w_time[i] * dq;
        grads.w_time[i] += hid[i] * dq;
    }
    grads.b_time += dq;
    let da1: Vec<f64> = (0..hidden).map(|i| dhid[i] * (1.0 - hid[i] * hid[i])).collect();
    grads.w1.add_outer(features, &da1);
    for i in 0..hidden {
        grads.b1[i] += da1[i];
    }

    if l2 != 0.0 {
        loss += l2 * (params.w1.frobenius_sq() + params.w2.frobenius_sq());
        for (i, w) in params.w1.as_slice().iter().enumerate() {
            grads.w1.as_mut_slice()[i] += 2.0 * l2 * w;
        }
        for (i, w) in params.w2.as_slice().iter().enumerate() {
            grads.w2.as_mut_slice()[i] += 2.0 * l2 * w;
        }
    }
    (loss, grads)
}

pub fn train_mlp(cohort: &Cohort, config: &BaselineTrainConfig) -> Result<(MlpParams, Vec<f64>)> {
    config.validate()?;
    let p = cohort.vocabulary.len();
    let mut init_rng = Rng::derive(config.seed, 0x391f);
    let mut params = MlpParams::init(p, config.hidden, config.lag, &mut init_rng);
    let encoded = cohort.encode()?;
    let mut state = AdadeltaState::new(&params);
    let mut rng = Rng::derive(config.seed, 0x391e);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut samples = 0usize;
        for &pi in &order {
            let enc = &encoded[pi];
            for v in 1..enc.n() {
                let features = aggregate_lag_features(enc, v, config.lag, p);
                let (loss, grads) =
                    mlp_loss_grad(&params, &features, &enc.code_idx[v], enc.log_gaps[v], config.l2);
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        patient: enc.patient_id.clone(),
                    });
                }
                loss_sum += loss;
                samples += 1;
                match config.optimizer {
                    OptimizerKind::Adadelta => {
                        adadelta_step(&mut params, &grads, &mut state, config.rho, config.epsilon)
                    }
                    OptimizerKind::Sgd { lr } => sgd_step(&mut params, &grads, lr),
                }
            }
        }
        history.push(loss_sum / samples.max(1) as f64);
    }
    Ok((params, history))
}
