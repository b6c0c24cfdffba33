//! Model persistence.
//!
//! A checkpoint is one JSON document: format version, model kind and config,
//! vocabulary in index order, every parameter tensor as base64-encoded
//! little-endian doubles, plus optimizer accumulators and the generator
//! state. Saving a loaded checkpoint reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineTrainConfig, LogisticParams, MlpParams};
use crate::error::{Error, Result};
use crate::gru::{GruModel, GruNetworkParams};
use crate::optim::{AdadeltaState, TrainingConfig};
use crate::params::Parameterized;
use crate::rng::Rng;
use crate::serial::{base64_to_f64s, f64s_to_base64};
use crate::vocab::CodeVocabulary;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    /// base64 of little-endian f64, row-major.
    pub data: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerBlob {
    pub acc_grad: String,
    pub acc_update: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "model_kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Gru { config: TrainingConfig },
    Logistic { config: BaselineTrainConfig },
    Mlp { config: BaselineTrainConfig },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    #[serde(flatten)]
    pub spec: ModelSpec,
    pub vocab: Vec<String>,
    pub epoch: usize,
    pub tensors: BTreeMap<String, TensorBlob>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer_state: Option<BTreeMap<String, OptimizerBlob>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rng_state: Option<String>,
}

fn tensors_to_blobs(params: &impl Parameterized) -> BTreeMap<String, TensorBlob> {
    params
        .tensor_entries()
        .into_iter()
        .map(|t| {
            (
                t.name,
                TensorBlob {
                    shape: t.shape,
                    data: f64s_to_base64(t.data),
                },
            )
        })
        .collect()
}

/// Copy blob data into an already-shaped parameter container. Every tensor
/// must be present with the expected shape; unknown names are rejected.
fn load_tensors_into(
    params: &mut impl Parameterized,
    blobs: &BTreeMap<String, TensorBlob>,
) -> Result<()> {
    let expected: Vec<(String, Vec<usize>, usize)> = params
        .tensor_entries()
        .iter()
        .map(|t| (t.name.clone(), t.shape.clone(), t.data.len()))
        .collect();
    if blobs.len() != expected.len() {
        return Err(Error::Corrupt(format!(
            "checkpoint holds {} tensors, model needs {}",
            blobs.len(),
            expected.len()
        )));
    }
    let mut decoded: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
    for (name, shape, len) in &expected {
        let blob = blobs
            .get(name)
            .ok_or_else(|| Error::Corrupt(format!("checkpoint is missing tensor '{name}'")))?;
        if &blob.shape != shape {
            return Err(Error::Corrupt(format!(
                "tensor '{name}' has shape {:?}, expected {shape:?}",
                blob.shape
            )));
        }
        decoded.push(base64_to_f64s(&blob.data, *len)?);
    }
    for ((_, data), values) in params.tensors_mut().into_iter().zip(decoded) {
        data.copy_from_slice(&values);
    }
    Ok(())
}

fn optimizer_to_blobs(
    params: &impl Parameterized,
    state: &AdadeltaState,
) -> BTreeMap<String, OptimizerBlob> {
    params
        .tensor_entries()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            (
                t.name.clone(),
                OptimizerBlob {
                    acc_grad: f64s_to_base64(&state.acc_grad[i]),
                    acc_update: f64s_to_base64(&state.acc_update[i]),
                },
            )
        })
        .collect()
}

fn optimizer_from_blobs(
    params: &impl Parameterized,
    blobs: &BTreeMap<String, OptimizerBlob>,
) -> Result<AdadeltaState> {
    let mut state = AdadeltaState::new(params);
    for (i, t) in params.tensor_entries().iter().enumerate() {
        let blob = blobs.get(&t.name).ok_or_else(|| {
            Error::Corrupt(format!("optimizer state is missing tensor '{}'", t.name))
        })?;
        state.acc_grad[i] = base64_to_f64s(&blob.acc_grad, t.data.len())?;
        state.acc_update[i] = base64_to_f64s(&blob.acc_update, t.data.len())?;
    }
    Ok(state)
}

pub fn gru_checkpoint(
    params: &GruNetworkParams,
    config: &TrainingConfig,
    vocab: &CodeVocabulary,
    epoch: usize,
    optimizer: Option<&AdadeltaState>,
    rng: Option<&Rng>,
) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        spec: ModelSpec::Gru { config: config.clone() },
        vocab: vocab.codes().to_vec(),
        epoch,
        tensors: tensors_to_blobs(params),
        optimizer_state: optimizer.map(|s| optimizer_to_blobs(params, s)),
        rng_state: rng.map(|r| r.state_string()),
    }
}

pub fn baseline_checkpoint(
    params: &dyn Parameterized,
    spec: ModelSpec,
    vocab: &CodeVocabulary,
    epoch: usize,
) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        spec,
        vocab: vocab.codes().to_vec(),
        epoch,
        tensors: tensors_to_blobs(&ParamsRef(params)),
        optimizer_state: None,
        rng_state: None,
    }
}

/// Adapter so `&dyn Parameterized` satisfies the `impl Parameterized` bounds.
struct ParamsRef<'a>(&'a dyn Parameterized);

impl Parameterized for ParamsRef<'_> {
    fn tensor_entries(&self) -> Vec<crate::params::TensorEntry<'_>> {
        self.0.tensor_entries()
    }
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        unreachable!("read-only adapter")
    }
}

pub struct LoadedGru {
    pub model: GruModel,
    pub config: TrainingConfig,
    pub epoch: usize,
    pub optimizer: Option<AdadeltaState>,
    pub rng: Option<Rng>,
}

pub fn gru_from_checkpoint(ckpt: &Checkpoint) -> Result<LoadedGru> {
    let config = match &ckpt.spec {
        ModelSpec::Gru { config } => config.clone(),
        _ => return Err(Error::Corrupt("checkpoint does not hold a gru model".to_string())),
    };
    let vocab = CodeVocabulary::from_code_stream(ckpt.vocab.iter().map(|c| c.as_str()))?;
    if vocab.len() != ckpt.vocab.len() {
        return Err(Error::Corrupt("checkpoint vocabulary has duplicate codes".to_string()));
    }
    let emb_dim = ckpt
        .tensors
        .get("w_emb")
        .map(|t| t.shape.get(1).copied().unwrap_or(0))
        .ok_or_else(|| Error::Corrupt("checkpoint is missing tensor 'w_emb'".to_string()))?;
    let mut params = GruNetworkParams::zeros(
        vocab.len(),
        emb_dim,
        config.hidden,
        config.layers,
        config.embedding_mode,
    )?;
    load_tensors_into(&mut params, &ckpt.tensors)?;
    let optimizer = match &ckpt.optimizer_state {
        Some(blobs) => Some(optimizer_from_blobs(&params, blobs)?),
        None => None,
    };
    let rng = match &ckpt.rng_state {
        Some(s) => Some(Rng::from_state_string(s)?),
        None => None,
    };
    Ok(LoadedGru {
        model: GruModel { params, vocab },
        config,
        epoch: ckpt.epoch,
        optimizer,
        rng,
    })
}

/// Any persisted model, ready to produce rankings.
pub enum LoadedModel {
    Gru(LoadedGru),
    Logistic { params: LogisticParams, vocab: CodeVocabulary, config: BaselineTrainConfig },
    Mlp { params: MlpParams, vocab: CodeVocabulary, config: BaselineTrainConfig },
}

impl LoadedModel {
    pub fn vocab(&self) -> &CodeVocabulary {
        match self {
            LoadedModel::Gru(g) => &g.model.vocab,
            LoadedModel::Logistic { vocab, .. } => vocab,
            LoadedModel::Mlp { vocab, .. } => vocab,
        }
    }

    pub fn predictor(&self) -> &dyn crate::metrics::VisitPredictor {
        match self {
            LoadedModel::Gru(g) => &g.model,
            LoadedModel::Logistic { params, .. } => params,
            LoadedModel::Mlp { params, .. } => params,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LoadedModel::Gru(_) => "gru",
            LoadedModel::Logistic { .. } => "logistic",
            LoadedModel::Mlp { .. } => "mlp",
        }
    }
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<LoadedModel> {
    match &ckpt.spec {
        ModelSpec::Gru { .. } => Ok(LoadedModel::Gru(gru_from_checkpoint(ckpt)?)),
        ModelSpec::Logistic { config } => {
            let vocab = CodeVocabulary::from_code_stream(ckpt.vocab.iter().map(|c| c.as_str()))?;
            let mut params = LogisticParams::zeros(vocab.len(), config.lag);
            load_tensors_into(&mut params, &ckpt.tensors)?;
            Ok(LoadedModel::Logistic { params, vocab, config: config.clone() })
        }
        ModelSpec::Mlp { config } => {
            let vocab = CodeVocabulary::from_code_stream(ckpt.vocab.iter().map(|c| c.as_str()))?;
            let mut params = MlpParams::init(vocab.len(), config.hidden, config.lag, &mut Rng::new(0));
            load_tensors_into(&mut params, &ckpt.tensors)?;
            Ok(LoadedModel::Mlp { params, vocab, config: config.clone() })
        }
    }
}

/// The exact bytes `save_checkpoint` writes.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(ckpt)?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), checkpoint_to_bytes(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let text = fs::read_to_string(path.as_ref())?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Corrupt(format!("checkpoint is not valid JSON: {e}")))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => return Err(Error::UnsupportedVersion(v as u32)),
        None => return Err(Error::Corrupt("checkpoint has no version field".to_string())),
    }
    serde_json::from_value(value)
        .map_err(|e| Error::Corrupt(format!("checkpoint structure is invalid: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::train;
    use crate::synth::{generate_synthetic_cohort, SyntheticConfig};

    fn trained() -> (crate::data::Cohort, crate::optim::TrainOutcome, TrainingConfig) {
        let cohort = generate_synthetic_cohort(&SyntheticConfig {
            n_patients: 12,
            n_hidden_states: 3,
            n_codes: 10,
            mean_visits: 5.0,
            mean_codes_per_visit: 2.0,
            mean_gap_days: 20.0,
            seed: 31,
            patient_seed: None,
        })
        .unwrap();
        let config = TrainingConfig {
            epochs: 2,
            hidden: 6,
            emb_dim: 4,
            layers: 2,
            dropout: 0.0,
            seed: 1,
            ..TrainingConfig::default()
        };
        let outcome = train(&cohort, &config, None, None).unwrap();
        (cohort, outcome, config)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (cohort, outcome, config) = trained();
        let ckpt = gru_checkpoint(
            &outcome.params,
            &config,
            &cohort.vocabulary,
            2,
            Some(&outcome.optimizer_state),
            Some(&outcome.rng),
        );
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn reloaded_model_predicts_bitwise_identically() {
        let (cohort, outcome, config) = trained();
        let ckpt = gru_checkpoint(&outcome.params, &config, &cohort.vocabulary, 2, None, None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = gru_from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();

        let original = GruModel {
            params: outcome.params.clone(),
            vocab: cohort.vocabulary.clone(),
        };
        for enc in cohort.encode().unwrap().iter().take(4) {
            let a = original.predict(enc).unwrap();
            let b = loaded.model.predict(enc).unwrap();
            for (pa, pb) in a.iter().zip(&b) {
                assert_eq!(pa.log_gap.to_bits(), pb.log_gap.to_bits());
                for (x, y) in pa.probs.as_slice().iter().zip(pb.probs.as_slice()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn optimizer_state_round_trips() {
        let (cohort, outcome, config) = trained();
        let ckpt = gru_checkpoint(
            &outcome.params,
            &config,
            &cohort.vocabulary,
            2,
            Some(&outcome.optimizer_state),
            Some(&outcome.rng),
        );
        let loaded = gru_from_checkpoint(&ckpt).unwrap();
        let state = loaded.optimizer.unwrap();
        for (a, b) in state.acc_grad.iter().zip(&outcome.optimizer_state.acc_grad) {
            assert_eq!(a, b);
        }
        assert_eq!(loaded.rng.unwrap(), outcome.rng);
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let (cohort, outcome, config) = trained();
        let mut ckpt = gru_checkpoint(&outcome.params, &config, &cohort.vocabulary, 2, None, None);
        ckpt.version = 999;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::UnsupportedVersion(999))
        ));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let (cohort, outcome, config) = trained();
        let ckpt = gru_checkpoint(&outcome.params, &config, &cohort.vocabulary, 2, None, None);
        let bytes = checkpoint_to_bytes(&ckpt).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn tampered_tensor_shape_is_corrupt() {
        let (cohort, outcome, config) = trained();
        let mut ckpt = gru_checkpoint(&outcome.params, &config, &cohort.vocabulary, 2, None, None);
        ckpt.tensors.get_mut("w_code").unwrap().shape = vec![1, 1];
        assert!(matches!(
            gru_from_checkpoint(&ckpt),
            Err(Error::Corrupt(_))
        ));
    }

    #[test]
    fn baseline_checkpoint_round_trips() {
        let cohort = generate_synthetic_cohort(&SyntheticConfig {
            n_patients: 10,
            n_hidden_states: 2,
            n_codes: 8,
            mean_visits: 4.0,
            mean_codes_per_visit: 2.0,
            mean_gap_days: 15.0,
            seed: 77,
            patient_seed: None,
        })
        .unwrap();
        let config = BaselineTrainConfig {
            epochs: 2,
            hidden: 5,
            seed: 3,
            ..BaselineTrainConfig::default()
        };
        let (params, _) = crate::baselines::train_mlp(&cohort, &config).unwrap();
        let ckpt = baseline_checkpoint(
            &params,
            ModelSpec::Mlp { config: config.clone() },
            &cohort.vocabulary,
            2,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mlp.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = model_from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(loaded.kind(), "mlp");
        match loaded {
            LoadedModel::Mlp { params: lp, .. } => {
                assert_eq!(lp.w1.as_slice(), params.w1.as_slice());
                assert_eq!(lp.b_time, params.b_time);
            }
            _ => panic!("wrong kind"),
        }
    }
}
