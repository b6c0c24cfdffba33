//! Skip-gram embedding pretraining with negative sampling.
//!
//! Visit code sets are laid out per patient in temporal order (within-visit
//! order shuffled), then trained with the classic center-predicts-context
//! objective: positives from a symmetric window, negatives drawn from the
//! unigram distribution raised to the 3/4 power, SGD with a linearly decaying
//! learning rate. The input-side vectors become the embedding table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::serial::{base64_to_f64s, f64s_to_base64};
use crate::tensor::{dot, sigmoid_scalar, Matrix};
use crate::vocab::CodeVocabulary;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SkipgramConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub negative_samples: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for SkipgramConfig {
    fn default() -> Self {
        SkipgramConfig {
            dim: 100,
            window: 5,
            epochs: 5,
            negative_samples: 5,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

impl SkipgramConfig {
    fn validate(&self) -> Result<()> {
        if self.dim < 1 || self.window < 1 || self.negative_samples < 1 || self.epochs < 1 {
            return Err(Error::InvalidArgument(
                "skip-gram dim, window, epochs and negative samples must be at least 1".to_string(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".to_string()));
        }
        Ok(())
    }
}

/// One row of vectors per vocabulary code.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub codes: Vec<String>,
    pub matrix: Matrix,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn vector(&self, index: usize) -> &[f64] {
        self.matrix.row(index)
    }

    /// Rows rearranged to another vocabulary's index order.
    pub fn gather(&self, vocab: &CodeVocabulary) -> Result<Matrix> {
        let mut own_index = std::collections::HashMap::new();
        for (i, c) in self.codes.iter().enumerate() {
            own_index.insert(c.as_str(), i);
        }
        let mut out = Matrix::zeros(vocab.len(), self.dim());
        for i in 0..vocab.len() {
            let code = vocab.code(i);
            let &src = own_index
                .get(code)
                .ok_or_else(|| Error::UnknownCode(code.to_string()))?;
            out.row_mut(i).copy_from_slice(self.matrix.row(src));
        }
        Ok(out)
    }
}

/// Per-patient code streams: visit order preserved, within-visit order
/// shuffled, never crossing patient boundaries.
pub fn emit_code_streams(cohort: &Cohort, rng: &mut Rng) -> Vec<Vec<usize>> {
    let vocab = &cohort.vocabulary;
    cohort
        .patients
        .iter()
        .map(|p| {
            let mut stream = Vec::new();
            for visit in &p.visits {
                let mut idx: Vec<usize> = visit
                    .codes
                    .iter()
                    .map(|c| vocab.index(c).expect("cohort codes resolve in its vocabulary"))
                    .collect();
                rng.shuffle(&mut idx);
                stream.extend(idx);
            }
            stream
        })
        .collect()
}

pub struct SkipgramOutcome {
    pub table: EmbeddingTable,
    /// Mean negative-sampling loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Positive pairs processed per epoch.
    pub pairs_per_epoch: usize,
}

/// Cumulative unigram^(3/4) distribution for negative draws.
fn noise_cdf(streams: &[Vec<usize>], vocab_size: usize) -> Vec<f64> {
    let mut counts = vec![0.0f64; vocab_size];
    for stream in streams {
        for &c in stream {
            counts[c] += 1.0;
        }
    }
    let mut cdf = Vec::with_capacity(vocab_size);
    let mut acc = 0.0;
    for c in &counts {
        acc += c.powf(0.75);
        cdf.push(acc);
    }
    if acc <= 0.0 {
        // Degenerate corpus: fall back to uniform.
        for (i, v) in cdf.iter_mut().enumerate() {
            *v = (i + 1) as f64;
        }
    }
    cdf
}

fn draw_noise(cdf: &[f64], rng: &mut Rng) -> usize {
    let total = *cdf.last().unwrap();
    let u = rng.next_f64() * total;
    cdf.partition_point(|&acc| acc <= u).min(cdf.len() - 1)
}

/// log(sigmoid(x)), stable for large |x|.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn train_skipgram(
    streams: &[Vec<usize>],
    vocab: &CodeVocabulary,
    config: &SkipgramConfig,
) -> Result<SkipgramOutcome> {
    config.validate()?;
    if streams.iter().all(|s| s.is_empty()) {
        return Err(Error::InsufficientData("skip-gram corpus is empty".to_string()));
    }
    let p = vocab.len();
    let dim = config.dim;
    let mut rng = Rng::derive(config.seed, 0x5916);

    let mut w_in = Matrix::zeros(p, dim);
    let bound = 0.5 / dim as f64;
    for x in w_in.as_mut_slice() {
        *x = rng.uniform(-bound, bound);
    }
    let mut w_out = Matrix::zeros(p, dim);

    let cdf = noise_cdf(streams, p);
    let total_positions: usize = streams.iter().map(|s| s.len()).sum();
    let total_work = (config.epochs * total_positions).max(1);
    let mut processed = 0usize;

    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut pairs_per_epoch = 0usize;
    let mut dv = vec![0.0f64; dim];

    for _ in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut pairs = 0usize;
        for stream in streams {
            for (pos, &center) in stream.iter().enumerate() {
                let decay = 1.0 - processed as f64 / total_work as f64;
                let lr = config.learning_rate * decay.max(1e-4);
                processed += 1;

                let lo = pos.saturating_sub(config.window);
                let hi = (pos + config.window).min(stream.len().saturating_sub(1));
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = stream[ctx_pos];
                    pairs += 1;
                    dv.fill(0.0);
                    {
                        let v = w_in.row(center);
                        for k in 0..=config.negative_samples {
                            let (target, label) = if k == 0 {
                                (context, 1.0)
                            } else {
                                let t = draw_noise(&cdf, &mut rng);
                                if t == context {
                                    continue;
                                }
                                (t, 0.0)
                            };
                            let o = w_out.row_mut(target);
                            let x = dot(v, o);
                            loss_sum += if label == 1.0 { -log_sigmoid(x) } else { -log_sigmoid(-x) };
                            let g = (sigmoid_scalar(x) - label) * lr;
                            for i in 0..dim {
                                dv[i] += g * o[i];
                                o[i] -= g * v[i];
                            }
                        }
                    }
                    let v = w_in.row_mut(center);
                    for i in 0..dim {
                        v[i] -= dv[i];
                    }
                }
            }
        }
        epoch_loss.push(loss_sum / pairs.max(1) as f64);
        pairs_per_epoch = pairs;
    }

    Ok(SkipgramOutcome {
        table: EmbeddingTable {
            codes: vocab.codes().to_vec(),
            matrix: w_in,
        },
        epoch_loss,
        pairs_per_epoch,
    })
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

#[derive(Serialize, Deserialize)]
struct EmbeddingFile {
    version: u32,
    p: usize,
    dim: usize,
    codes: Vec<String>,
    /// Little-endian f64, row-major, base64.
    data: String,
}

pub fn save_embedding(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let file = EmbeddingFile {
        version: 1,
        p: table.codes.len(),
        dim: table.dim(),
        codes: table.codes.clone(),
        data: f64s_to_base64(table.matrix.as_slice()),
    };
    let out = File::create(path.as_ref())?;
    let mut w = BufWriter::new(out);
    serde_json::to_writer(&mut w, &file)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_embedding(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let file: EmbeddingFile = serde_json::from_reader(BufReader::new(File::open(path.as_ref())?))?;
    if file.version != 1 {
        return Err(Error::UnsupportedVersion(file.version));
    }
    if file.codes.len() != file.p {
        return Err(Error::Corrupt(format!(
            "embedding file lists {} codes but declares p={}",
            file.codes.len(),
            file.p
        )));
    }
    let data = base64_to_f64s(&file.data, file.p * file.dim)?;
    Ok(EmbeddingTable {
        codes: file.codes,
        matrix: Matrix::from_vec(file.p, file.dim, data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocabulary, PatientSequence, Visit};

    fn cohort_from_visits(visits_per_patient: Vec<Vec<Vec<&str>>>) -> Cohort {
        let patients: Vec<PatientSequence> = visits_per_patient
            .into_iter()
            .enumerate()
            .map(|(i, visits)| PatientSequence {
                patient_id: format!("p{i}"),
                visits: visits
                    .into_iter()
                    .enumerate()
                    .map(|(j, codes)| Visit {
                        t: (j * 10) as i64,
                        codes: codes.into_iter().map(String::from).collect(),
                    })
                    .collect(),
            })
            .collect();
        let vocabulary = build_vocabulary(&patients).unwrap();
        Cohort { patients, vocabulary }
    }

    #[test]
    fn stream_preserves_visit_order() {
        let cohort = cohort_from_visits(vec![vec![vec!["A", "B"], vec!["C"]]]);
        let a = cohort.vocabulary.index("A").unwrap();
        let b = cohort.vocabulary.index("B").unwrap();
        let c = cohort.vocabulary.index("C").unwrap();
        for seed in 0..20 {
            let streams = emit_code_streams(&cohort, &mut Rng::new(seed));
            let s = &streams[0];
            assert_eq!(s.len(), 3);
            assert_eq!(s[2], c, "last visit's code must come last");
            assert!(s[..2] == [a, b] || s[..2] == [b, a]);
        }
    }

    #[test]
    fn single_code_visits_keep_exact_order() {
        let cohort = cohort_from_visits(vec![vec![vec!["X"], vec!["Y"], vec!["Z"]]]);
        let streams = emit_code_streams(&cohort, &mut Rng::new(3));
        let expect: Vec<usize> = ["X", "Y", "Z"]
            .iter()
            .map(|c| cohort.vocabulary.index(c).unwrap())
            .collect();
        assert_eq!(streams[0], expect);
    }

    #[test]
    fn streams_are_deterministic() {
        let cohort = cohort_from_visits(vec![
            vec![vec!["A", "B", "C"], vec!["D", "E"]],
            vec![vec!["B", "C"], vec!["A"]],
        ]);
        let s1 = emit_code_streams(&cohort, &mut Rng::new(9));
        let s2 = emit_code_streams(&cohort, &mut Rng::new(9));
        assert_eq!(s1, s2);
    }

    /// Corpus of 50 codes where two of them always co-occur. The other 48
    /// are split into per-patient blocks so unrelated codes appear in
    /// different contexts and embed apart, and the planted pair's frequency
    /// stays comparable to everything else.
    fn planted_corpus(seed: u64) -> (Cohort, &'static str, &'static str) {
        let mut rng = Rng::new(seed);
        let codes: Vec<String> = (0..48).map(|i| format!("{:03}", 500 + i)).collect();
        let mut patients = Vec::new();
        for p in 0..48 {
            let block = &codes[(p % 12) * 4..(p % 12) * 4 + 4];
            let mut visits = Vec::new();
            for v in 0..12 {
                let mut vc: Vec<String> = Vec::new();
                for _ in 0..2 {
                    let c = block[rng.below(block.len())].clone();
                    if !vc.contains(&c) {
                        vc.push(c);
                    }
                }
                visits.push(Visit { t: (v * 7) as i64, codes: vc });
            }
            patients.push(PatientSequence {
                patient_id: format!("p{p}"),
                visits,
            });
        }
        // Four patients whose every visit carries the planted pair.
        for p in 48..52 {
            let visits = (0..12)
                .map(|v| Visit {
                    t: (v * 7) as i64,
                    codes: vec!["598".to_string(), "599".to_string()],
                })
                .collect();
            patients.push(PatientSequence {
                patient_id: format!("p{p}"),
                visits,
            });
        }
        let vocabulary = build_vocabulary(&patients).unwrap();
        (Cohort { patients, vocabulary }, "598", "599")
    }

    fn small_config() -> SkipgramConfig {
        SkipgramConfig {
            dim: 16,
            window: 2,
            epochs: 5,
            negative_samples: 5,
            learning_rate: 0.05,
            seed: 4,
        }
    }

    #[test]
    fn planted_pair_embeds_close() {
        let (cohort, a, b) = planted_corpus(1);
        let streams = emit_code_streams(&cohort, &mut Rng::new(2));
        let out = train_skipgram(&streams, &cohort.vocabulary, &small_config()).unwrap();
        let vocab = &cohort.vocabulary;
        let planted = cosine_similarity(
            out.table.vector(vocab.index(a).unwrap()),
            out.table.vector(vocab.index(b).unwrap()),
        );
        let mut rng = Rng::new(77);
        let mut acc = 0.0;
        let n_pairs = 300;
        for _ in 0..n_pairs {
            let i = rng.below(vocab.len());
            let mut j = rng.below(vocab.len());
            while j == i {
                j = rng.below(vocab.len());
            }
            acc += cosine_similarity(out.table.vector(i), out.table.vector(j));
        }
        let random_mean = acc / n_pairs as f64;
        assert!(
            planted >= random_mean + 0.2,
            "planted {planted:.3} vs random mean {random_mean:.3}"
        );
    }

    #[test]
    fn loss_decreases_over_epochs() {
        let (cohort, _, _) = planted_corpus(5);
        let streams = emit_code_streams(&cohort, &mut Rng::new(6));
        let out = train_skipgram(&streams, &cohort.vocabulary, &small_config()).unwrap();
        assert!(
            out.epoch_loss[4] < out.epoch_loss[0],
            "epoch losses {:?}",
            out.epoch_loss
        );
    }

    #[test]
    fn output_shape_and_determinism() {
        let (cohort, _, _) = planted_corpus(9);
        let streams = emit_code_streams(&cohort, &mut Rng::new(1));
        let a = train_skipgram(&streams, &cohort.vocabulary, &small_config()).unwrap();
        let b = train_skipgram(&streams, &cohort.vocabulary, &small_config()).unwrap();
        assert_eq!(a.table.matrix.rows(), cohort.vocabulary.len());
        assert_eq!(a.table.matrix.cols(), 16);
        assert_eq!(a.table.matrix.as_slice(), b.table.matrix.as_slice());
    }

    #[test]
    fn pair_count_respects_window_bound() {
        let (cohort, _, _) = planted_corpus(3);
        let streams = emit_code_streams(&cohort, &mut Rng::new(1));
        let total_len: usize = streams.iter().map(|s| s.len()).sum();
        let config = small_config();
        let out = train_skipgram(&streams, &cohort.vocabulary, &config).unwrap();
        assert!(out.pairs_per_epoch <= 2 * config.window * total_len);
    }

    #[test]
    fn singleton_streams_produce_no_pairs() {
        let cohort = cohort_from_visits(vec![
            vec![vec!["A"], vec!["B"]],
            vec![vec!["C"], vec!["A"]],
        ]);
        // Two-code streams pair only within a patient: 2 pairs per stream.
        let streams = emit_code_streams(&cohort, &mut Rng::new(0));
        let out = train_skipgram(&streams, &cohort.vocabulary, &small_config()).unwrap();
        assert_eq!(out.pairs_per_epoch, 4);
    }

    #[test]
    fn embedding_file_round_trip() {
        let (cohort, _, _) = planted_corpus(2);
        let streams = emit_code_streams(&cohort, &mut Rng::new(1));
        let mut config = small_config();
        config.epochs = 1;
        let out = train_skipgram(&streams, &cohort.vocabulary, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.json");
        save_embedding(&out.table, &path).unwrap();
        let loaded = load_embedding(&path).unwrap();
        assert_eq!(loaded.codes, out.table.codes);
        assert_eq!(loaded.matrix.as_slice(), out.table.matrix.as_slice());
    }

    #[test]
    fn gather_reorders_rows_by_code() {
        let table = EmbeddingTable {
            codes: vec!["A".into(), "B".into()],
            matrix: Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        };
        let vocab = CodeVocabulary::from_code_stream(["B", "A"]).unwrap();
        let gathered = table.gather(&vocab).unwrap();
        assert_eq!(gathered.row(0), &[3.0, 4.0]);
        assert_eq!(gathered.row(1), &[1.0, 2.0]);

        let missing = CodeVocabulary::from_code_stream(["Z"]).unwrap();
        assert!(table.gather(&missing).is_err());
    }
}
