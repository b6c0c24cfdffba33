//! Top-k recall, R² on log-gaps, the history-length recall curve and the
//! repeated-code perplexity probe.

use serde::Serialize;

use crate::data::{Cohort, EncodedPatient};
use crate::error::{Error, Result};
use crate::gru::GruModel;


/// Scores over the vocabulary for one predicted visit, with an optional
/// predicted log-gap (frequency baselines do not predict time).
#[derive(Clone, Debug)]
pub struct PredictionRanking {
    pub scores: Vec<f64>,
    pub log_gap: Option<f64>,
}

impl PredictionRanking {
    /// Indices of the k highest scores, descending, ties broken by ascending
    /// vocabulary index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| {
            self.scores[b]
                .total_cmp(&self.scores[a])
                .then(a.cmp(&b))
        });
        order.truncate(k);
        order
    }
}

/// |top-k ∩ true| / |true|. Returns `None` when the true set is empty (the
/// visit is skipped, not scored as zero).
pub fn top_k_recall(ranking: &PredictionRanking, true_set: &[usize], k: usize) -> Option<f64> {
    if true_set.is_empty() {
        return None;
    }
    let top = ranking.top_k(k);
    let hits = top.iter().filter(|i| true_set.contains(i)).count();
    Some(hits as f64 / true_set.len() as f64)
}

/// Coefficient of determination over log-gap targets:
/// 1 − Σ(y−ŷ)² / Σ(y−ȳ)².
pub fn r_squared_log(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::dim(
            "r_squared_log",
            format!("{} predictions vs {} targets", predicted.len(), actual.len()),
        ));
    }
    if actual.len() < 2 {
        return Err(Error::InsufficientData(
            "R^2 needs at least two targets".to_string(),
        ));
    }
    let mean: f64 = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let ss_res: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, y)| (y - p) * (y - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Anything that scores next-visit codes from a patient's visible history.
pub trait VisitPredictor {
    /// One ranking per prediction step (visit 1..n−1 predicting 2..n).
    fn rankings(&self, enc: &EncodedPatient) -> Result<Vec<PredictionRanking>>;
}

impl VisitPredictor for GruModel {
    fn rankings(&self, enc: &EncodedPatient) -> Result<Vec<PredictionRanking>> {
        Ok(self
            .predict(enc)?
            .into_iter()
            .map(|p| PredictionRanking {
                scores: p.probs.as_slice().to_vec(),
                log_gap: Some(p.log_gap),
            })
            .collect())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RecallStat {
    pub k: usize,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub recall: Vec<RecallStat>,
    pub r2: Option<f64>,
    pub visits_scored: usize,
    pub patients: usize,
}

impl MetricReport {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall
            .iter()
            .find(|r| r.k == k)
            .map(|r| r.mean)
            .unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,stderr\n");
        for r in &self.recall {
            out.push_str(&format!("recall@{},{},{}\n", r.k, r.mean, r.stderr));
        }
        if let Some(r2) = self.r2 {
            out.push_str(&format!("r2,{r2},\n"));
        }
        out.push_str(&format!("visits_scored,{},\n", self.visits_scored));
        out.push_str(&format!("patients,{},\n", self.patients));
        out
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Per-visit recall averaged over every predicted visit in the cohort, plus
/// R² over log-gaps when the model predicts time.
pub fn evaluate_model(
    model: &dyn VisitPredictor,
    cohort: &Cohort,
    ks: &[usize],
) -> Result<MetricReport> {
    let encoded = cohort.encode()?;
    let mut per_k: Vec<Vec<f64>> = vec![Vec::new(); ks.len()];
    let mut pred_gaps = Vec::new();
    let mut true_gaps = Vec::new();
    let mut visits_scored = 0usize;

    for enc in &encoded {
        let rankings = model.rankings(enc)?;
        for (s, ranking) in rankings.iter().enumerate() {
            let true_set = &enc.code_idx[s + 1];
            let mut scored = false;
            for (ki, &k) in ks.iter().enumerate() {
                if let Some(r) = top_k_recall(ranking, true_set, k) {
                    per_k[ki].push(r);
                    scored = true;
                }
            }
            if scored {
                visits_scored += 1;
            }
            if let Some(g) = ranking.log_gap {
                pred_gaps.push(g);
                true_gaps.push(enc.log_gaps[s + 1]);
            }
        }
    }

    let recall = ks
        .iter()
        .zip(per_k)
        .map(|(&k, values)| {
            let (mean, stderr) = mean_and_stderr(&values);
            RecallStat { k, mean, stderr }
        })
        .collect();
    let r2 = if pred_gaps.len() >= 2 {
        match r_squared_log(&pred_gaps, &true_gaps) {
            Ok(v) => Some(v),
            Err(Error::ZeroVariance) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    Ok(MetricReport {
        recall,
        r2,
        visits_scored,
        patients: encoded.len(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    /// Prediction step: the model has seen this many visits.
    pub index: usize,
    pub mean: f64,
    pub stderr: f64,
    pub patients: usize,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("index,mean,stderr,patients\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.index, p.mean, p.stderr, p.patients));
    }
    out
}

/// Mean and standard error of recall@k at each prediction step, across
/// patients with at least `min_visits` visits.
pub fn recall_by_history_length(
    model: &dyn VisitPredictor,
    cohort: &Cohort,
    min_visits: usize,
    k: usize,
) -> Result<Vec<CurvePoint>> {
    let encoded = cohort.encode()?;
    let qualifying: Vec<&EncodedPatient> =
        encoded.iter().filter(|e| e.n() >= min_visits).collect();
    if qualifying.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no patient has at least {min_visits} visits"
        )));
    }
    let mut per_index: Vec<Vec<f64>> = Vec::new();
    for enc in &qualifying {
        let rankings = model.rankings(enc)?;
        for (s, ranking) in rankings.iter().enumerate() {
            if let Some(r) = top_k_recall(ranking, &enc.code_idx[s + 1], k) {
                if per_index.len() <= s {
                    per_index.resize(s + 1, Vec::new());
                }
                per_index[s].push(r);
            }
        }
    }
    Ok(per_index
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(s, values)| {
            let (mean, stderr) = mean_and_stderr(values);
            CurvePoint {
                index: s + 1,
                mean,
                stderr,
                patients: values.len(),
            }
        })
        .collect())
}

/// Feed a synthetic patient repeating one code at a constant gap and report
/// exp(entropy) of the predictive distribution at each step. `repeats` is the
/// number of predicted steps.
pub fn perplexity_probe(
    model: &GruModel,
    code: &str,
    repeats: usize,
    gap_days: i64,
) -> Result<Vec<f64>> {
    if repeats < 1 {
        return Err(Error::InvalidArgument("repeats must be at least 1".to_string()));
    }
    let idx = model.vocab.require_index(code)?;
    let n = repeats + 1;
    let log_gap = (1.0 + gap_days.max(1) as f64).ln();
    let enc = EncodedPatient {
        patient_id: format!("probe-{code}"),
        code_idx: vec![vec![idx]; n],
        log_gaps: std::iter::once(0.0)
            .chain(std::iter::repeat(log_gap).take(n - 1))
            .collect(),
    };
    let preds = model.predict(&enc)?;
    Ok(preds
        .iter()
        .map(|p| {
            let entropy: f64 = p
                .probs
                .as_slice()
                .iter()
                .filter(|&&x| x > 0.0)
                .map(|&x| -x * x.ln())
                .sum();
            entropy.exp()
        })
        .collect())
}

/// Probe a trained model until the distribution settles; used by tests and
/// the CLI to compare frequent against rare codes. The tail mean of the
/// per-step perplexity is the "converged" value.
pub fn converged_perplexity(curve: &[f64], tail: usize) -> f64 {
    let take = tail.min(curve.len()).max(1);
    let slice = &curve[curve.len() - take..];
    slice.iter().sum::<f64>() / slice.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn ranking(scores: Vec<f64>) -> PredictionRanking {
        PredictionRanking { scores, log_gap: None }
    }

    #[test]
    fn recall_definition() {
        // true {0,1,2}, top-3 = [0, 1, 5] → 2/3.
        let r = ranking(vec![9.0, 8.0, 0.0, 1.0, 2.0, 7.0]);
        let got = top_k_recall(&r, &[0, 1, 2], 3).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn recall_is_one_when_all_true_in_top_k() {
        let r = ranking(vec![0.1, 0.9, 0.8, 0.0]);
        assert_eq!(top_k_recall(&r, &[1, 2], 2).unwrap(), 1.0);
    }

    #[test]
    fn recall_empty_true_set_signals_skip() {
        let r = ranking(vec![0.1, 0.2]);
        assert!(top_k_recall(&r, &[], 1).is_none());
    }

    #[test]
    fn ties_break_by_ascending_index() {
        let r = ranking(vec![0.5, 0.5, 0.5, 0.5]);
        assert_eq!(r.top_k(2), vec![0, 1]);
    }

    /// Brute-force oracle: explicit set intersection over an explicitly
    /// sorted ranking.
    fn brute_force_recall(scores: &[f64], true_set: &[usize], k: usize) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let top: std::collections::BTreeSet<usize> = order.into_iter().take(k).collect();
        let truth: std::collections::BTreeSet<usize> = true_set.iter().copied().collect();
        top.intersection(&truth).count() as f64 / truth.len() as f64
    }

    #[test]
    fn recall_matches_brute_force_on_random_instances() {
        let mut rng = Rng::new(404);
        for _ in 0..1000 {
            let p = 8;
            let scores: Vec<f64> = (0..p).map(|_| rng.next_f64()).collect();
            let mut true_set: Vec<usize> = (0..3).map(|_| rng.below(p)).collect();
            true_set.sort_unstable();
            true_set.dedup();
            let r = ranking(scores.clone());
            let got = top_k_recall(&r, &true_set, 4).unwrap();
            let expect = brute_force_recall(&scores, &true_set, 4);
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn r_squared_canonical_cases() {
        let actual = vec![1.0, 2.0, 3.0, 4.0];
        // Perfect predictions.
        assert!((r_squared_log(&actual, &actual).unwrap() - 1.0).abs() < 1e-12);
        // Constant mean prediction.
        let mean = vec![2.5; 4];
        assert!(r_squared_log(&mean, &actual).unwrap().abs() < 1e-12);
        // Anti-correlated prediction is negative.
        let anti = vec![4.0, 3.0, 2.0, 1.0];
        assert!(r_squared_log(&anti, &actual).unwrap() < 0.0);
    }

    #[test]
    fn r_squared_zero_variance_is_an_error() {
        let actual = vec![2.0, 2.0, 2.0];
        assert!(matches!(
            r_squared_log(&[1.0, 2.0, 3.0], &actual),
            Err(Error::ZeroVariance)
        ));
        assert!(r_squared_log(&[1.0], &[1.0]).is_err());
    }

    /// A predictor that repeats the previous visit (used as a fixed point).
    struct Echo {
        p: usize,
    }

    impl VisitPredictor for Echo {
        fn rankings(&self, enc: &EncodedPatient) -> Result<Vec<PredictionRanking>> {
            Ok((0..enc.steps())
                .map(|s| {
                    let mut scores = vec![0.0; self.p];
                    for &i in &enc.code_idx[s] {
                        scores[i] = 1.0;
                    }
                    PredictionRanking { scores, log_gap: None }
                })
                .collect())
        }
    }

    fn repeating_cohort() -> Cohort {
        use crate::data::{build_vocabulary, PatientSequence, Visit};
        let patients: Vec<PatientSequence> = (0..4)
            .map(|i| PatientSequence {
                patient_id: format!("p{i}"),
                visits: (0..6)
                    .map(|v| Visit {
                        t: (v * 30) as i64,
                        codes: vec![format!("{:03}", 101 + i)],
                    })
                    .collect(),
            })
            .collect();
        let vocabulary = build_vocabulary(&patients).unwrap();
        Cohort { patients, vocabulary }
    }

    #[test]
    fn echo_model_on_repeating_cohort_is_perfect() {
        let cohort = repeating_cohort();
        let model = Echo { p: cohort.vocabulary.len() };
        let report = evaluate_model(&model, &cohort, &[10, 20, 30]).unwrap();
        for stat in &report.recall {
            assert_eq!(stat.mean, 1.0);
        }
        assert!(report.r2.is_none(), "echo model predicts no time");
    }

    /// Uniform-random scorer: recall@10 over p=100 with one true code per
    /// visit concentrates near 10/100.
    struct RandomScorer {
        p: usize,
    }

    impl VisitPredictor for RandomScorer {
        fn rankings(&self, enc: &EncodedPatient) -> Result<Vec<PredictionRanking>> {
            // Seeded per patient so evaluation order doesn't matter.
            let seed: u64 = enc.patient_id.bytes().map(|b| b as u64).sum();
            let mut rng = Rng::new(seed);
            Ok((0..enc.steps())
                .map(|_| PredictionRanking {
                    scores: (0..self.p).map(|_| rng.next_f64()).collect(),
                    log_gap: None,
                })
                .collect())
        }
    }

    #[test]
    fn random_scorer_matches_hypergeometric_expectation() {
        use crate::data::{build_vocabulary, PatientSequence, Visit};
        let p = 100;
        let patients: Vec<PatientSequence> = (0..300)
            .map(|i| PatientSequence {
                patient_id: format!("p{i:04}"),
                visits: (0..21)
                    .map(|v| Visit {
                        t: (v * 10) as i64,
                        codes: vec![format!("{:03}", 100 + (i * 37 + v * 13) % p)],
                    })
                    .collect(),
            })
            .collect();
        // Make sure every code appears so the vocabulary covers all of p.
        let mut patients = patients;
        patients.push(PatientSequence {
            patient_id: "pfill".into(),
            visits: (0..p)
                .map(|c| Visit {
                    t: (c * 5) as i64,
                    codes: vec![format!("{:03}", 100 + c)],
                })
                .collect(),
        });
        let vocabulary = build_vocabulary(&patients).unwrap();
        let cohort = Cohort { patients, vocabulary };
        let model = RandomScorer { p };
        let report = evaluate_model(&model, &cohort, &[10]).unwrap();
        assert!(report.visits_scored >= 5000, "visits {}", report.visits_scored);
        let r10 = report.recall_at(10);
        assert!((r10 - 0.10).abs() < 0.02, "recall@10 {r10}");
    }

    #[test]
    fn evaluation_is_repeatable() {
        let cohort = repeating_cohort();
        let model = Echo { p: cohort.vocabulary.len() };
        let a = evaluate_model(&model, &cohort, &[10, 20]).unwrap();
        let b = evaluate_model(&model, &cohort, &[10, 20]).unwrap();
        assert_eq!(a.recall_at(10).to_bits(), b.recall_at(10).to_bits());
        assert_eq!(a.visits_scored, b.visits_scored);
    }

    #[test]
    fn history_curve_single_patient_has_zero_stderr() {
        let cohort = repeating_cohort();
        let one = Cohort {
            patients: vec![cohort.patients[0].clone()],
            vocabulary: cohort.vocabulary.clone(),
        };
        let model = Echo { p: one.vocabulary.len() };
        let curve = recall_by_history_length(&model, &one, 2, 10).unwrap();
        assert_eq!(curve.len(), 5);
        for point in &curve {
            assert_eq!(point.stderr, 0.0);
            assert_eq!(point.patients, 1);
        }
    }

    #[test]
    fn history_curve_requires_qualifying_patients() {
        let cohort = repeating_cohort();
        let model = Echo { p: cohort.vocabulary.len() };
        assert!(matches!(
            recall_by_history_length(&model, &cohort, 1000, 10),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn perplexity_bounds() {
        // Uniform distribution → perplexity = p; near-one-hot → 1.
        let uniform = vec![0.25f64; 4];
        let entropy: f64 = uniform.iter().map(|&x| -x * x.ln()).sum();
        assert!((entropy.exp() - 4.0).abs() < 1e-12);
        let hot: [f64; 4] = [1.0 - 3e-12, 1e-12, 1e-12, 1e-12];
        let entropy: f64 = hot.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
        assert!((entropy.exp() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn converged_perplexity_takes_the_tail() {
        let curve = vec![10.0, 9.0, 4.0, 2.0];
        assert_eq!(converged_perplexity(&curve, 2), 3.0);
        assert_eq!(converged_perplexity(&curve, 100), 6.25);
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k(
            scores in proptest::collection::vec(0.0..1.0f64, 6..20),
            k1 in 1usize..10,
            k2 in 1usize..10,
        ) {
            let (k_lo, k_hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            let true_set = vec![0, 2, 4];
            let r = PredictionRanking { scores, log_gap: None };
            let lo = top_k_recall(&r, &true_set, k_lo).unwrap();
            let hi = top_k_recall(&r, &true_set, k_hi).unwrap();
            prop_assert!(lo <= hi);
        }
    }
}
