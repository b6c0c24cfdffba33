//! The sequence network: embedding layer, stacked GRU, softmax code head,
//! ReLU time head, joint loss and full backpropagation through time.
//!
//! At step i the network consumes the visit's multi-hot code vector and the
//! log-gap since the previous visit, and predicts the next visit's code set
//! (probability vector over the vocabulary) and the log-gap to it. Gradients
//! are derived by hand and validated against central finite differences.

use serde::{Deserialize, Serialize};

use crate::data::EncodedPatient;
use crate::error::{Error, Result};
use crate::params::{Parameterized, TensorEntry};
use crate::rng::Rng;
use crate::tensor::{orthonormal_init, sigmoid_scalar, softmax_slice, uniform_init, Matrix, Vector};

/// Floor for log arguments in the cross-entropy.
pub const PROB_CLAMP: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Embedding learned from scratch: e = tanh(xᵀ W_emb + b_emb).
    Learned,
    /// Embedding initialized from skip-gram vectors: e = xᵀ W_emb, no bias,
    /// no nonlinearity. Still refined during training.
    SkipgramInit,
}

/// One GRU layer. Input-to-hidden matrices are hidden×input, recurrent
/// matrices hidden×hidden.
#[derive(Clone, Debug)]
pub struct GruLayerParams {
    pub w_z: Matrix,
    pub w_r: Matrix,
    pub w_h: Matrix,
    pub u_z: Matrix,
    pub u_r: Matrix,
    pub u_h: Matrix,
    pub b_z: Vector,
    pub b_r: Vector,
    pub b_h: Vector,
}

impl GruLayerParams {
    fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        GruLayerParams {
            w_z: orthonormal_init(hidden, input, rng),
            w_r: orthonormal_init(hidden, input, rng),
            w_h: orthonormal_init(hidden, input, rng),
            u_z: orthonormal_init(hidden, hidden, rng),
            u_r: orthonormal_init(hidden, hidden, rng),
            u_h: orthonormal_init(hidden, hidden, rng),
            b_z: Vector::zeros(hidden),
            b_r: Vector::zeros(hidden),
            b_h: Vector::zeros(hidden),
        }
    }

    fn zeros(input: usize, hidden: usize) -> Self {
        GruLayerParams {
            w_z: Matrix::zeros(hidden, input),
            w_r: Matrix::zeros(hidden, input),
            w_h: Matrix::zeros(hidden, input),
            u_z: Matrix::zeros(hidden, hidden),
            u_r: Matrix::zeros(hidden, hidden),
            u_h: Matrix::zeros(hidden, hidden),
            b_z: Vector::zeros(hidden),
            b_r: Vector::zeros(hidden),
            b_h: Vector::zeros(hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u_z.rows()
    }

    pub fn input(&self) -> usize {
        self.w_z.cols()
    }
}

/// Every learnable tensor of the network.
#[derive(Clone, Debug)]
pub struct GruNetworkParams {
    /// p × emb_dim; one row per vocabulary code.
    pub w_emb: Matrix,
    /// Used only in learned mode; kept at zero otherwise.
    pub b_emb: Vector,
    pub layers: Vec<GruLayerParams>,
    /// hidden × p_out.
    pub w_code: Matrix,
    pub b_code: Vector,
    pub w_time: Vector,
    pub b_time: f64,
    pub mode: EmbeddingMode,
}

impl GruNetworkParams {
    /// Orthonormal weight matrices, zero biases, uniform time weights.
    pub fn init(
        p: usize,
        emb_dim: usize,
        hidden: usize,
        n_layers: usize,
        mode: EmbeddingMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        if p < 1 || emb_dim < 1 || hidden < 1 || n_layers < 1 {
            return Err(Error::InvalidArgument(
                "network dimensions must be at least 1".to_string(),
            ));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let input = if l == 0 { emb_dim + 1 } else { hidden };
            layers.push(GruLayerParams::init(input, hidden, rng));
        }
        Ok(GruNetworkParams {
            w_emb: orthonormal_init(p, emb_dim, rng),
            b_emb: Vector::zeros(emb_dim),
            layers,
            w_code: orthonormal_init(hidden, p, rng),
            b_code: Vector::zeros(p),
            w_time: uniform_init(hidden, -0.1, 0.1, rng)?,
            b_time: 0.0,
            mode,
        })
    }

    /// All-zero tensors of the given architecture (checkpoint loading fills
    /// them in).
    pub fn zeros(
        p: usize,
        emb_dim: usize,
        hidden: usize,
        n_layers: usize,
        mode: EmbeddingMode,
    ) -> Result<Self> {
        if p < 1 || emb_dim < 1 || hidden < 1 || n_layers < 1 {
            return Err(Error::InvalidArgument(
                "network dimensions must be at least 1".to_string(),
            ));
        }
        Ok(GruNetworkParams {
            w_emb: Matrix::zeros(p, emb_dim),
            b_emb: Vector::zeros(emb_dim),
            layers: (0..n_layers)
                .map(|l| {
                    let input = if l == 0 { emb_dim + 1 } else { hidden };
                    GruLayerParams::zeros(input, hidden)
                })
                .collect(),
            w_code: Matrix::zeros(hidden, p),
            b_code: Vector::zeros(p),
            w_time: Vector::zeros(hidden),
            b_time: 0.0,
            mode,
        })
    }

    /// Same shapes, all zeros; the gradient container.
    pub fn zeros_like(&self) -> Self {
        GruNetworkParams {
            w_emb: Matrix::zeros(self.w_emb.rows(), self.w_emb.cols()),
            b_emb: Vector::zeros(self.b_emb.len()),
            layers: self
                .layers
                .iter()
                .map(|l| GruLayerParams::zeros(l.input(), l.hidden()))
                .collect(),
            w_code: Matrix::zeros(self.w_code.rows(), self.w_code.cols()),
            b_code: Vector::zeros(self.b_code.len()),
            w_time: Vector::zeros(self.w_time.len()),
            b_time: 0.0,
            mode: self.mode,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.w_emb.rows()
    }

    pub fn emb_dim(&self) -> usize {
        self.w_emb.cols()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

impl Parameterized for GruNetworkParams {
    fn tensor_entries(&self) -> Vec<TensorEntry<'_>> {
        fn mat(name: String, m: &Matrix) -> TensorEntry<'_> {
            TensorEntry {
                name,
                shape: vec![m.rows(), m.cols()],
                data: m.as_slice(),
            }
        }
        fn vec(name: String, v: &Vector) -> TensorEntry<'_> {
            TensorEntry {
                name,
                shape: vec![v.len()],
                data: v.as_slice(),
            }
        }
        let mut out = Vec::new();
        out.push(mat("w_emb".into(), &self.w_emb));
        out.push(vec("b_emb".into(), &self.b_emb));
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(mat(format!("layer{l}.w_z"), &layer.w_z));
            out.push(mat(format!("layer{l}.u_z"), &layer.u_z));
            out.push(vec(format!("layer{l}.b_z"), &layer.b_z));
            out.push(mat(format!("layer{l}.w_r"), &layer.w_r));
            out.push(mat(format!("layer{l}.u_r"), &layer.u_r));
            out.push(vec(format!("layer{l}.b_r"), &layer.b_r));
            out.push(mat(format!("layer{l}.w_h"), &layer.w_h));
            out.push(mat(format!("layer{l}.u_h"), &layer.u_h));
            out.push(vec(format!("layer{l}.b_h"), &layer.b_h));
        }
        out.push(mat("w_code".into(), &self.w_code));
        out.push(vec("b_code".into(), &self.b_code));
        out.push(vec("w_time".into(), &self.w_time));
        out.push(TensorEntry {
            name: "b_time".into(),
            shape: vec![1],
            data: std::slice::from_ref(&self.b_time),
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("w_emb".into(), self.w_emb.as_mut_slice()));
        out.push(("b_emb".into(), self.b_emb.as_mut_slice()));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.w_z"), layer.w_z.as_mut_slice()));
            out.push((format!("layer{l}.u_z"), layer.u_z.as_mut_slice()));
            out.push((format!("layer{l}.b_z"), layer.b_z.as_mut_slice()));
            out.push((format!("layer{l}.w_r"), layer.w_r.as_mut_slice()));
            out.push((format!("layer{l}.u_r"), layer.u_r.as_mut_slice()));
            out.push((format!("layer{l}.b_r"), layer.b_r.as_mut_slice()));
            out.push((format!("layer{l}.w_h"), layer.w_h.as_mut_slice()));
            out.push((format!("layer{l}.u_h"), layer.u_h.as_mut_slice()));
            out.push((format!("layer{l}.b_h"), layer.b_h.as_mut_slice()));
        }
        out.push(("w_code".into(), self.w_code.as_mut_slice()));
        out.push(("b_code".into(), self.b_code.as_mut_slice()));
        out.push(("w_time".into(), self.w_time.as_mut_slice()));
        out.push(("b_time".into(), std::slice::from_mut(&mut self.b_time)));
        out
    }
}

/// One step's prediction: probabilities over the vocabulary and a log-gap.
#[derive(Clone, Debug)]
pub struct StepPrediction {
    pub probs: Vector,
    pub log_gap: f64,
}

/// Cached activations for one layer at one step.
#[derive(Clone, Debug)]
pub(crate) struct LayerStepCache {
    /// The input actually fed to the layer (after between-layer dropout).
    input: Vector,
    h_prev: Vector,
    z: Vector,
    r: Vector,
    cand: Vector,
    /// U_h · h_prev, reused by the backward pass.
    u_h_hprev: Vector,
}

#[derive(Clone, Debug)]
pub(crate) struct StepCache {
    /// Embedding output e_i (post-tanh in learned mode).
    embed: Vector,
    layers: Vec<LayerStepCache>,
    /// Dropout masks applied to the inputs of layers 1.. (empty for 1 layer).
    between_masks: Vec<Vector>,
    head_mask: Vector,
    /// Masked top hidden state feeding both heads.
    head_input: Vector,
    /// Time head pre-activation.
    time_pre: f64,
}

pub struct ForwardCache {
    steps: Vec<StepCache>,
}

/// A trained network paired with its vocabulary.
pub struct GruModel {
    pub params: GruNetworkParams,
    pub vocab: crate::vocab::CodeVocabulary,
}

impl GruModel {
    /// Deterministic evaluation-mode predictions for one patient.
    pub fn predict(&self, enc: &EncodedPatient) -> Result<Vec<StepPrediction>> {
        let mut rng = Rng::new(0);
        let (preds, _) = forward_patient(enc, &self.params, 0.0, false, &mut rng)?;
        Ok(preds)
    }
}

/// Inverted dropout multiplier: zeros with probability `rate`, else
/// 1/(1 − rate). Evaluation and rate 0 return all-ones without consuming
/// random draws.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng, training: bool) -> Result<Vector> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(Vector::ones(len));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Vector::zeros(len);
    for i in 0..len {
        mask[i] = if rng.next_f64() < rate { 0.0 } else { keep };
    }
    Ok(mask)
}

/// Embedding of a dense multi-hot vector plus the log-gap input.
pub fn embed_input(x: &Vector, d: f64, params: &GruNetworkParams) -> Result<Vector> {
    if x.len() != params.vocab_size() {
        return Err(Error::dim(
            "embed_input",
            format!("input length {} vs vocabulary {}", x.len(), params.vocab_size()),
        ));
    }
    let active: Vec<usize> = (0..x.len()).filter(|&j| x[j] != 0.0).collect();
    let e = embed_indices(&active, params);
    let mut out = Vector::zeros(e.len() + 1);
    out.as_mut_slice()[..e.len()].copy_from_slice(e.as_slice());
    out[e.len()] = d;
    Ok(out)
}

/// Embedding from sorted active indices (the multi-hot rows summed).
fn embed_indices(active: &[usize], params: &GruNetworkParams) -> Vector {
    let emb = params.emb_dim();
    let mut e = Vector::zeros(emb);
    for &j in active {
        let row = params.w_emb.row(j);
        for i in 0..emb {
            e[i] += row[i];
        }
    }
    match params.mode {
        EmbeddingMode::Learned => {
            for i in 0..emb {
                e[i] = (e[i] + params.b_emb[i]).tanh();
            }
        }
        EmbeddingMode::SkipgramInit => {}
    }
    e
}

/// Gate and state values for a single GRU cell application.
pub struct GruCellState {
    pub z: Vector,
    pub r: Vector,
    pub cand: Vector,
    pub h: Vector,
    pub(crate) u_h_hprev: Vector,
}

/// z = σ(W_z x + U_z h + b_z); r = σ(W_r x + U_r h + b_r);
/// h̃ = tanh(W_h x + r ∘ U_h h + b_h); h' = z ∘ h + (1 − z) ∘ h̃.
pub fn gru_cell_forward(
    input: &Vector,
    h_prev: &Vector,
    layer: &GruLayerParams,
) -> Result<GruCellState> {
    let hidden = layer.hidden();
    if input.len() != layer.input() || h_prev.len() != hidden {
        return Err(Error::dim(
            "gru_cell_forward",
            format!(
                "input {} (expect {}), hidden {} (expect {})",
                input.len(),
                layer.input(),
                h_prev.len(),
                hidden
            ),
        ));
    }
    let x = input.as_slice();
    let hp = h_prev.as_slice();

    let mut z = Vector::zeros(hidden);
    let mut r = Vector::zeros(hidden);
    let mut cand = Vector::zeros(hidden);
    let mut u_h_hprev = Vector::zeros(hidden);
    let mut scratch = Vector::zeros(hidden);

    layer.w_z.mv_into(x, z.as_mut_slice());
    layer.u_z.mv_into(hp, scratch.as_mut_slice());
    for i in 0..hidden {
        z[i] = sigmoid_scalar(z[i] + scratch[i] + layer.b_z[i]);
    }

    layer.w_r.mv_into(x, r.as_mut_slice());
    layer.u_r.mv_into(hp, scratch.as_mut_slice());
    for i in 0..hidden {
        r[i] = sigmoid_scalar(r[i] + scratch[i] + layer.b_r[i]);
    }

    layer.w_h.mv_into(x, cand.as_mut_slice());
    layer.u_h.mv_into(hp, u_h_hprev.as_mut_slice());
    for i in 0..hidden {
        cand[i] = (cand[i] + r[i] * u_h_hprev[i] + layer.b_h[i]).tanh();
    }

    let mut h = Vector::zeros(hidden);
    for i in 0..hidden {
        h[i] = z[i] * hp[i] + (1.0 - z[i]) * cand[i];
    }

    Ok(GruCellState { z, r, cand, h, u_h_hprev })
}

/// Run the network over a patient. Predictions are made at steps 1..n−1 for
/// targets 2..n. Dropout applies between stacked layers and before the heads
/// when `training`; evaluation is deterministic.
pub fn forward_patient(
    enc: &EncodedPatient,
    params: &GruNetworkParams,
    dropout: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<(Vec<StepPrediction>, ForwardCache)> {
    if enc.n() < 2 {
        return Err(Error::InsufficientData(format!(
            "patient '{}' has fewer than two visits",
            enc.patient_id
        )));
    }
    let hidden = params.hidden();
    let n_layers = params.n_layers();
    let p_out = params.b_code.len();

    let mut h_prev: Vec<Vector> = vec![Vector::zeros(hidden); n_layers];
    let mut predictions = Vec::with_capacity(enc.steps());
    let mut steps = Vec::with_capacity(enc.steps());

    for s in 0..enc.steps() {
        let embed = embed_indices(&enc.code_idx[s], params);
        let emb_dim = embed.len();
        let mut input = Vector::zeros(emb_dim + 1);
        input.as_mut_slice()[..emb_dim].copy_from_slice(embed.as_slice());
        input[emb_dim] = enc.log_gaps[s];

        let mut layer_caches = Vec::with_capacity(n_layers);
        let mut between_masks = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut current = input;
        for (l, layer) in params.layers.iter().enumerate() {
            if l > 0 {
                let mask = dropout_mask(hidden, dropout, rng, training)?;
                current = current.hadamard(&mask)?;
                between_masks.push(mask);
            }
            let cell = gru_cell_forward(&current, &h_prev[l], layer)?;
            layer_caches.push(LayerStepCache {
                input: current,
                h_prev: h_prev[l].clone(),
                z: cell.z,
                r: cell.r,
                cand: cell.cand,
                u_h_hprev: cell.u_h_hprev,
            });
            h_prev[l] = cell.h.clone();
            current = cell.h;
        }

        let head_mask = dropout_mask(hidden, dropout, rng, training)?;
        let head_input = current.hadamard(&head_mask)?;

        let mut logits = vec![0.0f64; p_out];
        params.w_code.mv_t_into(head_input.as_slice(), &mut logits);
        for (j, l) in logits.iter_mut().enumerate() {
            *l += params.b_code[j];
        }
        let probs = softmax_slice(&logits);

        let time_pre =
            crate::tensor::dot(params.w_time.as_slice(), head_input.as_slice()) + params.b_time;
        let log_gap = time_pre.max(0.0);

        predictions.push(StepPrediction {
            probs: probs.clone(),
            log_gap,
        });
        steps.push(StepCache {
            embed,
            layers: layer_caches,
            between_masks,
            head_mask,
            head_input,
            time_pre,
        });
    }

    Ok((predictions, ForwardCache { steps }))
}

/// Joint objective for one patient: clamped elementwise cross-entropy between
/// the softmax output and the multi-hot target, plus half squared error on
/// the log-gap, plus L2 on the head weights.
pub fn joint_loss(
    preds: &[StepPrediction],
    enc: &EncodedPatient,
    l2: f64,
    params: &GruNetworkParams,
) -> f64 {
    let mut loss = 0.0;
    for (s, pred) in preds.iter().enumerate() {
        let targets = &enc.code_idx[s + 1];
        let mut t_iter = targets.iter().peekable();
        for j in 0..pred.probs.len() {
            let y = if t_iter.peek() == Some(&&j) {
                t_iter.next();
                1.0
            } else {
                0.0
            };
            let p = pred.probs[j].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let delta = enc.log_gaps[s + 1];
        loss += 0.5 * (delta - pred.log_gap) * (delta - pred.log_gap);
    }
    loss
        + l2 * (params.w_code.frobenius_sq()
            + crate::tensor::dot(params.w_time.as_slice(), params.w_time.as_slice()))
}

/// Analytic gradients of `joint_loss` for every tensor in the network.
pub fn backward_patient(
    enc: &EncodedPatient,
    params: &GruNetworkParams,
    preds: &[StepPrediction],
    cache: &ForwardCache,
    l2: f64,
) -> GruNetworkParams {
    let hidden = params.hidden();
    let n_layers = params.n_layers();
    let p_out = params.b_code.len();
    let emb_dim = params.emb_dim();
    let mut grads = params.zeros_like();

    // Gradient w.r.t. each layer's hidden state carried across steps.
    let mut dh_carry: Vec<Vec<f64>> = vec![vec![0.0; hidden]; n_layers];

    for s in (0..enc.steps()).rev() {
        let step = &cache.steps[s];
        let pred = &preds[s];
        let targets = &enc.code_idx[s + 1];

        // dL/dŷ with the clamp flattening the gradient outside the bounds.
        let mut dprob = vec![0.0f64; p_out];
        {
            let mut t_iter = targets.iter().peekable();
            for j in 0..p_out {
                let y = if t_iter.peek() == Some(&&j) {
                    t_iter.next();
                    1.0
                } else {
                    0.0
                };
                let p = pred.probs[j];
                if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                    continue;
                }
                dprob[j] = -(y / p) + (1.0 - y) / (1.0 - p);
            }
        }
        // Through the softmax: ds_k = ŷ_k (a_k − Σ_j a_j ŷ_j).
        let mut inner = 0.0;
        for j in 0..p_out {
            inner += dprob[j] * pred.probs[j];
        }
        let mut dlogits = vec![0.0f64; p_out];
        for j in 0..p_out {
            dlogits[j] = pred.probs[j] * (dprob[j] - inner);
        }

        // Time head: ReLU passes gradient only when the pre-activation is
        // positive.
        let delta = enc.log_gaps[s + 1];
        let dq = if step.time_pre > 0.0 {
            pred.log_gap - delta
        } else {
            0.0
        };

        let g = step.head_input.as_slice();
        grads.w_code.add_outer(g, &dlogits);
        for j in 0..p_out {
            grads.b_code[j] += dlogits[j];
        }
        for i in 0..hidden {
            grads.w_time[i] += g[i] * dq;
        }
        grads.b_time += dq;

        // Gradient w.r.t. the masked top hidden state.
        let mut dg = vec![0.0f64; hidden];
        params.w_code.mv_into(&dlogits, &mut dg);
        for i in 0..hidden {
            dg[i] += params.w_time[i] * dq;
        }

        // Walk the stack top-down; `dh` accumulates this step's head (or
        // upper-layer) contribution plus the carry from step s+1.
        let mut d_from_above: Vec<f64> = (0..hidden)
            .map(|i| step.head_mask[i] * dg[i])
            .collect();
        for l in (0..n_layers).rev() {
            let lc = &step.layers[l];
            let glayer = &mut grads.layers[l];
            let player = &params.layers[l];

            let mut dh = vec![0.0f64; hidden];
            for i in 0..hidden {
                dh[i] = d_from_above[i] + dh_carry[l][i];
            }

            let hp = lc.h_prev.as_slice();
            let mut dhp = vec![0.0f64; hidden];
            let mut da_c = vec![0.0f64; hidden];
            let mut da_r = vec![0.0f64; hidden];
            let mut da_z = vec![0.0f64; hidden];
            for i in 0..hidden {
                let dz = dh[i] * (hp[i] - lc.cand[i]);
                let dcand = dh[i] * (1.0 - lc.z[i]);
                dhp[i] = dh[i] * lc.z[i];
                da_c[i] = dcand * (1.0 - lc.cand[i] * lc.cand[i]);
                let dr = da_c[i] * lc.u_h_hprev[i];
                da_r[i] = dr * lc.r[i] * (1.0 - lc.r[i]);
                da_z[i] = dz * lc.z[i] * (1.0 - lc.z[i]);
            }
            // dU_h picks up r-gated candidate gradient.
            let da_c_r: Vec<f64> = (0..hidden).map(|i| da_c[i] * lc.r[i]).collect();

            let x = lc.input.as_slice();
            glayer.w_h.add_outer(&da_c, x);
            glayer.u_h.add_outer(&da_c_r, hp);
            glayer.w_r.add_outer(&da_r, x);
            glayer.u_r.add_outer(&da_r, hp);
            glayer.w_z.add_outer(&da_z, x);
            glayer.u_z.add_outer(&da_z, hp);
            for i in 0..hidden {
                glayer.b_h[i] += da_c[i];
                glayer.b_r[i] += da_r[i];
                glayer.b_z[i] += da_z[i];
            }

            let mut dinput = vec![0.0f64; lc.input.len()];
            player.w_h.mv_t_add_into(&da_c, &mut dinput);
            player.w_r.mv_t_add_into(&da_r, &mut dinput);
            player.w_z.mv_t_add_into(&da_z, &mut dinput);

            player.u_h.mv_t_add_into(&da_c_r, &mut dhp);
            player.u_r.mv_t_add_into(&da_r, &mut dhp);
            player.u_z.mv_t_add_into(&da_z, &mut dhp);

            dh_carry[l] = dhp;

            if l > 0 {
                // Input was mask ∘ h of the layer below.
                let mask = &step.between_masks[l - 1];
                d_from_above = (0..hidden).map(|i| mask[i] * dinput[i]).collect();
            } else {
                // Input was [e, d]; the gap input is data, not a parameter.
                let de = &dinput[..emb_dim];
                match params.mode {
                    EmbeddingMode::Learned => {
                        for i in 0..emb_dim {
                            let e = step.embed[i];
                            let da = de[i] * (1.0 - e * e);
                            grads.b_emb[i] += da;
                            for &j in &enc.code_idx[s] {
                                grads.w_emb.row_mut(j)[i] += da;
                            }
                        }
                    }
                    EmbeddingMode::SkipgramInit => {
                        for &j in &enc.code_idx[s] {
                            let row = grads.w_emb.row_mut(j);
                            for i in 0..emb_dim {
                                row[i] += de[i];
                            }
                        }
                    }
                }
            }
        }
    }

    // L2 on the head weights only.
    if l2 != 0.0 {
        for (i, w) in params.w_code.as_slice().iter().enumerate() {
            grads.w_code.as_mut_slice()[i] += 2.0 * l2 * w;
        }
        for i in 0..params.w_time.len() {
            grads.w_time[i] += 2.0 * l2 * params.w_time[i];
        }
    }

    grads
}
