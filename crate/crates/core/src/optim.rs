//! Optimizer, epoch loop and the pretrain/fine-tune transfer workflow.

use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::gru::{
    backward_patient, forward_patient, joint_loss, EmbeddingMode, GruModel, GruNetworkParams,
};
use crate::metrics::{evaluate_model, MetricReport};
use crate::params::{add_scaled, clip_global_norm, Parameterized};
use crate::rng::Rng;
use crate::skipgram::EmbeddingTable;
use crate::vocab::CodeVocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// No learning rate to tune; the default.
    Adadelta,
    Sgd { lr: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub l2: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub embedding_mode: EmbeddingMode,
    /// Evaluate on the held-out cohort every this many epochs (0 = never).
    pub eval_every: usize,
    pub hidden: usize,
    pub emb_dim: usize,
    pub layers: usize,
    pub clip_norm: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 20,
            batch_size: 1,
            dropout: 0.5,
            l2: 0.001,
            rho: 0.95,
            epsilon: 1e-6,
            optimizer: OptimizerKind::Adadelta,
            seed: 0,
            embedding_mode: EmbeddingMode::Learned,
            eval_every: 0,
            hidden: 128,
            emb_dim: 100,
            layers: 2,
            clip_norm: Some(5.0),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidArgument("epochs must be at least 1".to_string()));
        }
        self.validate_shapeless()
    }

    /// Everything except the epoch count; fine-tuning allows zero epochs.
    fn validate_shapeless(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch size must be at least 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.l2 < 0.0 {
            return Err(Error::InvalidArgument("l2 must be nonnegative".to_string()));
        }
        if !(0.0 < self.rho && self.rho < 1.0) || self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument(
                "adadelta needs 0 < rho < 1 and epsilon > 0".to_string(),
            ));
        }
        if self.hidden < 1 || self.emb_dim < 1 || self.layers < 1 {
            return Err(Error::InvalidArgument(
                "hidden, embedding dimension and layer count must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// Per-tensor EMA accumulators for squared gradients and squared updates.
#[derive(Clone, Debug)]
pub struct AdadeltaState {
    pub acc_grad: Vec<Vec<f64>>,
    pub acc_update: Vec<Vec<f64>>,
}

impl AdadeltaState {
    pub fn new(params: &impl Parameterized) -> Self {
        let shapes: Vec<usize> = params.tensor_entries().iter().map(|t| t.data.len()).collect();
        AdadeltaState {
            acc_grad: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            acc_update: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One Adadelta update over a flat slice:
/// E[g²] ← ρE[g²] + (1−ρ)g²; Δ = −(√(E[Δ²]+ε)/√(E[g²]+ε))·g;
/// E[Δ²] ← ρE[Δ²] + (1−ρ)Δ²; θ ← θ + Δ.
pub fn adadelta_update_slice(
    theta: &mut [f64],
    grad: &[f64],
    acc_grad: &mut [f64],
    acc_update: &mut [f64],
    rho: f64,
    epsilon: f64,
) {
    for i in 0..theta.len() {
        let g = grad[i];
        acc_grad[i] = rho * acc_grad[i] + (1.0 - rho) * g * g;
        let delta = -((acc_update[i] + epsilon).sqrt() / (acc_grad[i] + epsilon).sqrt()) * g;
        acc_update[i] = rho * acc_update[i] + (1.0 - rho) * delta * delta;
        theta[i] += delta;
    }
}

pub fn adadelta_step<P: Parameterized>(
    params: &mut P,
    grads: &P,
    state: &mut AdadeltaState,
    rho: f64,
    epsilon: f64,
) {
    let grad_entries = grads.tensor_entries();
    for (t, (_, theta)) in params.tensors_mut().into_iter().enumerate() {
        adadelta_update_slice(
            theta,
            grad_entries[t].data,
            &mut state.acc_grad[t],
            &mut state.acc_update[t],
            rho,
            epsilon,
        );
    }
}

pub fn sgd_step<P: Parameterized>(params: &mut P, grads: &P, lr: f64) {
    add_scaled(params, grads, -lr);
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub recall10: Option<f64>,
    pub recall20: Option<f64>,
    pub recall30: Option<f64>,
    pub r2: Option<f64>,
}

/// History CSV in the layout `epoch,mean_loss,recall@10,recall@20,recall@30,r2`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,recall@10,recall@20,recall@30,r2\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for rec in history {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            rec.epoch,
            rec.mean_loss,
            cell(rec.recall10),
            cell(rec.recall20),
            cell(rec.recall30),
            cell(rec.r2),
        ));
    }
    out
}

pub struct TrainOutcome {
    pub params: GruNetworkParams,
    pub history: Vec<EpochRecord>,
    pub optimizer_state: AdadeltaState,
    pub rng: Rng,
    pub epochs_run: usize,
}

/// Train a fresh network on the cohort. `initial_embedding`, when given,
/// replaces the random embedding matrix (rows gathered by code string).
pub fn train(
    cohort: &Cohort,
    config: &TrainingConfig,
    initial_embedding: Option<&EmbeddingTable>,
    eval_cohort: Option<&Cohort>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if cohort.patients.is_empty() {
        return Err(Error::InsufficientData("training cohort is empty".to_string()));
    }
    let mut init_rng = Rng::derive(config.seed, 0x1217);
    let emb_dim = initial_embedding.map(|t| t.dim()).unwrap_or(config.emb_dim);
    let mut params = GruNetworkParams::init(
        cohort.vocabulary.len(),
        emb_dim,
        config.hidden,
        config.layers,
        config.embedding_mode,
        &mut init_rng,
    )?;
    if let Some(table) = initial_embedding {
        params.w_emb = table.gather(&cohort.vocabulary)?;
    }
    train_from(params, cohort, config, eval_cohort)
}

/// Epoch loop over pre-built parameters. Permits zero epochs, in which case
/// the parameters pass through untouched.
pub fn train_from(
    mut params: GruNetworkParams,
    cohort: &Cohort,
    config: &TrainingConfig,
    eval_cohort: Option<&Cohort>,
) -> Result<TrainOutcome> {
    config.validate_shapeless()?;
    let encoded = cohort.encode()?;
    let mut rng = Rng::derive(config.seed, 0x7e41);
    let mut state = AdadeltaState::new(&params);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut step_count = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut grads = params.zeros_like();
            for &pi in batch {
                let enc = &encoded[pi];
                let (preds, cache) =
                    forward_patient(enc, &params, config.dropout, true, &mut rng)?;
                let loss = joint_loss(&preds, enc, config.l2, &params);
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        patient: enc.patient_id.clone(),
                    });
                }
                loss_sum += loss;
                step_count += enc.steps();
                let g = backward_patient(enc, &params, &preds, &cache, config.l2);
                add_scaled(&mut grads, &g, 1.0 / batch.len() as f64);
            }
            if let Some(max_norm) = config.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            match config.optimizer {
                OptimizerKind::Adadelta => {
                    adadelta_step(&mut params, &grads, &mut state, config.rho, config.epsilon)
                }
                OptimizerKind::Sgd { lr } => sgd_step(&mut params, &grads, lr),
            }
        }

        let mean_loss = loss_sum / step_count.max(1) as f64;
        let eval = match eval_cohort {
            Some(ec) if config.eval_every > 0 && epoch % config.eval_every == 0 => {
                let model = GruModel {
                    params: params.clone(),
                    vocab: cohort.vocabulary.clone(),
                };
                Some(evaluate_model(&model, ec, &[10, 20, 30])?)
            }
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            mean_loss,
            recall10: eval.as_ref().map(|r| r.recall_at(10)),
            recall20: eval.as_ref().map(|r| r.recall_at(20)),
            recall30: eval.as_ref().map(|r| r.recall_at(30)),
            r2: eval.as_ref().and_then(|r: &MetricReport| r.r2),
        });
    }

    Ok(TrainOutcome {
        params,
        history,
        optimizer_state: state,
        rng,
        epochs_run: config.epochs,
    })
}

/// Rebuild the source parameters against a target vocabulary: embedding rows
/// and code-head columns are gathered through the code mapping, everything
/// else copies unchanged. Every target code must exist in the source
/// vocabulary.
pub fn transfer_params(
    source: &GruNetworkParams,
    source_vocab: &CodeVocabulary,
    target_vocab: &CodeVocabulary,
) -> Result<GruNetworkParams> {
    let mapping: Vec<usize> = target_vocab
        .codes()
        .iter()
        .map(|c| {
            source_vocab
                .index(c)
                .ok_or_else(|| Error::UnmappedCode(c.clone()))
        })
        .collect::<Result<_>>()?;

    let mut out = source.clone();
    let emb_dim = source.emb_dim();
    let hidden = source.hidden();
    let p_target = target_vocab.len();

    let mut w_emb = crate::tensor::Matrix::zeros(p_target, emb_dim);
    for (t, &s) in mapping.iter().enumerate() {
        w_emb.row_mut(t).copy_from_slice(source.w_emb.row(s));
    }
    let mut w_code = crate::tensor::Matrix::zeros(hidden, p_target);
    for r in 0..hidden {
        let src_row = source.w_code.row(r);
        let dst_row = w_code.row_mut(r);
        for (t, &s) in mapping.iter().enumerate() {
            dst_row[t] = src_row[s];
        }
    }
    let mut b_code = crate::tensor::Vector::zeros(p_target);
    for (t, &s) in mapping.iter().enumerate() {
        b_code[t] = source.b_code[s];
    }

    out.w_emb = w_emb;
    out.w_code = w_code;
    out.b_code = b_code;
    Ok(out)
}

/// Initialize from source parameters, then refine on the target cohort.
/// `config.epochs` may be zero (transfer only, no training).
pub fn fine_tune(
    source: &GruNetworkParams,
    source_vocab: &CodeVocabulary,
    target_cohort: &Cohort,
    config: &TrainingConfig,
    eval_cohort: Option<&Cohort>,
) -> Result<TrainOutcome> {
    let params = transfer_params(source, source_vocab, &target_cohort.vocabulary)?;
    let mut config = config.clone();
    config.hidden = params.hidden();
    config.emb_dim = params.emb_dim();
    config.layers = params.n_layers();
    config.embedding_mode = params.mode;
    train_from(params, target_cohort, &config, eval_cohort)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_cohort, SyntheticConfig};

    #[test]
    fn adadelta_first_scalar_update_hand_value() {
        let mut theta = [0.0f64];
        let mut eg = [0.0f64];
        let mut eu = [0.0f64];
        adadelta_update_slice(&mut theta, &[1.0], &mut eg, &mut eu, 0.95, 1e-6);
        // E[g²] = 0.05; Δ = −√(1e-6 / (0.05 + 1e-6)).
        assert!((theta[0] - (-0.004472)).abs() < 1e-6, "update {}", theta[0]);
    }

    #[test]
    fn adadelta_zero_gradient_is_a_fixed_point() {
        let mut theta = [1.5f64, -2.0];
        let mut eg = [0.3f64, 0.1];
        let mut eu = [0.2f64, 0.4];
        adadelta_update_slice(&mut theta, &[0.0, 0.0], &mut eg, &mut eu, 0.95, 1e-6);
        assert_eq!(theta, [1.5, -2.0]);
        assert!((eg[0] - 0.95 * 0.3).abs() < 1e-15, "accumulator decays");
        assert!((eu[0] - 0.95 * 0.2).abs() < 1e-15);
    }

    #[test]
    fn adadelta_is_deterministic() {
        let run = || {
            let mut theta = [0.1f64, 0.2, 0.3];
            let mut eg = [0.0f64; 3];
            let mut eu = [0.0f64; 3];
            for i in 0..50 {
                let g = [0.1 * i as f64, -0.2, 0.05];
                adadelta_update_slice(&mut theta, &g, &mut eg, &mut eu, 0.95, 1e-6);
            }
            theta
        };
        assert_eq!(run(), run());
    }

    fn tiny_cohort(seed: u64) -> Cohort {
        generate_synthetic_cohort(&SyntheticConfig {
            n_patients: 20,
            n_hidden_states: 3,
            n_codes: 12,
            mean_visits: 6.0,
            mean_codes_per_visit: 2.0,
            mean_gap_days: 30.0,
            seed,
            patient_seed: None,
        })
        .unwrap()
    }

    fn tiny_config() -> TrainingConfig {
        TrainingConfig {
            epochs: 20,
            hidden: 8,
            emb_dim: 6,
            layers: 1,
            dropout: 0.0,
            eval_every: 0,
            seed: 5,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn training_loss_decreases() {
        let cohort = tiny_cohort(1);
        let outcome = train(&cohort, &tiny_config(), None, None).unwrap();
        let first = outcome.history.first().unwrap().mean_loss;
        let last = outcome.history.last().unwrap().mean_loss;
        assert!(last < first, "epoch 1 loss {first}, epoch 20 loss {last}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let cohort = tiny_cohort(2);
        let mut config = tiny_config();
        config.epochs = 3;
        config.dropout = 0.3;
        let a = train(&cohort, &config, None, None).unwrap();
        let b = train(&cohort, &config, None, None).unwrap();
        for (ta, tb) in a
            .params
            .tensor_entries()
            .iter()
            .zip(b.params.tensor_entries().iter())
        {
            assert_eq!(ta.data, tb.data, "tensor {} differs", ta.name);
        }
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.mean_loss.to_bits(), rb.mean_loss.to_bits());
        }
    }

    #[test]
    fn zero_epochs_rejected_for_fresh_training() {
        let cohort = tiny_cohort(3);
        let mut config = tiny_config();
        config.epochs = 0;
        assert!(train(&cohort, &config, None, None).is_err());
    }

    #[test]
    fn sgd_divergence_is_reported() {
        let cohort = tiny_cohort(4);
        let mut config = tiny_config();
        config.optimizer = OptimizerKind::Sgd { lr: 1e12 };
        config.clip_norm = None;
        config.epochs = 5;
        let err = train(&cohort, &config, None, None).err();
        assert!(
            matches!(err, Some(Error::Divergence { .. })),
            "expected divergence, got {err:?}",
        );
    }

    #[test]
    fn identity_transfer_preserves_params() {
        let cohort = tiny_cohort(6);
        let mut config = tiny_config();
        config.epochs = 2;
        let outcome = train(&cohort, &config, None, None).unwrap();

        let transferred = transfer_params(
            &outcome.params,
            &cohort.vocabulary,
            &cohort.vocabulary,
        )
        .unwrap();
        for (ta, tb) in outcome
            .params
            .tensor_entries()
            .iter()
            .zip(transferred.tensor_entries().iter())
        {
            assert_eq!(ta.data, tb.data);
        }

        // Zero-epoch fine-tune returns them untouched as well.
        let mut ft_config = config.clone();
        ft_config.epochs = 0;
        let ft = fine_tune(&outcome.params, &cohort.vocabulary, &cohort, &ft_config, None).unwrap();
        for (ta, tb) in outcome
            .params
            .tensor_entries()
            .iter()
            .zip(ft.params.tensor_entries().iter())
        {
            assert_eq!(ta.data, tb.data);
        }
        assert!(ft.history.is_empty());
    }

    #[test]
    fn smaller_target_vocabulary_shrinks_heads_only() {
        let cohort = tiny_cohort(7);
        let mut config = tiny_config();
        config.epochs = 1;
        let outcome = train(&cohort, &config, None, None).unwrap();
        let p_source = cohort.vocabulary.len();
        assert!(p_source > 2);

        let sub = crate::vocab::CodeVocabulary::from_code_stream([
            cohort.vocabulary.code(1),
            cohort.vocabulary.code(0),
        ])
        .unwrap();
        let transferred = transfer_params(&outcome.params, &cohort.vocabulary, &sub).unwrap();
        assert_eq!(transferred.w_emb.rows(), 2);
        assert_eq!(transferred.w_code.cols(), 2);
        assert_eq!(transferred.b_code.len(), 2);
        assert_eq!(transferred.hidden(), outcome.params.hidden());
        // Gathered rows follow the mapping: sub index 0 is source index 1.
        assert_eq!(transferred.w_emb.row(0), outcome.params.w_emb.row(1));
        assert_eq!(transferred.b_code[0], outcome.params.b_code[1]);
        for l in 0..transferred.n_layers() {
            assert_eq!(
                transferred.layers[l].u_z.as_slice(),
                outcome.params.layers[l].u_z.as_slice()
            );
        }
    }

    #[test]
    fn unmapped_code_is_an_error() {
        let cohort = tiny_cohort(8);
        let mut config = tiny_config();
        config.epochs = 1;
        let outcome = train(&cohort, &config, None, None).unwrap();
        let alien = crate::vocab::CodeVocabulary::from_code_stream(["998"]).unwrap();
        let err = transfer_params(&outcome.params, &cohort.vocabulary, &alien).unwrap_err();
        assert!(matches!(err, Error::UnmappedCode(c) if c == "998"));
    }

    #[test]
    fn history_csv_layout() {
        let history = vec![EpochRecord {
            epoch: 1,
            mean_loss: 2.5,
            recall10: Some(0.5),
            recall20: None,
            recall30: None,
            r2: Some(0.1),
        }];
        let csv = history_csv(&history);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,mean_loss,recall@10,recall@20,recall@30,r2"
        );
        assert_eq!(lines.next().unwrap(), "1,2.5,0.5,,,0.1");
    }
}
