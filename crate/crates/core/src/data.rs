//! Patient sequences, cohorts, dataset splitting and cohort file I/O.
//!
//! Cohort files are JSON Lines, one patient per line:
//! `{"pid": "...", "visits": [{"t": <days>, "codes": ["401.9", ...]}, ...]}`
//! Visits may appear unsorted; the loader sorts them, groups and dedups the
//! codes, and drops patients with fewer than two visits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::vocab::{group_code, CodeVocabulary, GroupingConfig};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Visit {
    /// Days since epoch.
    pub t: i64,
    /// Grouped codes, deduplicated, in first-appearance order.
    pub codes: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatientSequence {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientSequence {
    /// Number of visits.
    pub fn n(&self) -> usize {
        self.visits.len()
    }

    /// Gap in days before each visit; the first visit's gap is 0 by convention.
    pub fn gaps_days(&self) -> Vec<i64> {
        let mut gaps = Vec::with_capacity(self.visits.len());
        for i in 0..self.visits.len() {
            if i == 0 {
                gaps.push(0);
            } else {
                gaps.push(self.visits[i].t - self.visits[i - 1].t);
            }
        }
        gaps
    }

    /// log(1 + gap) per visit, the transform models consume and predict.
    pub fn log_gaps(&self) -> Vec<f64> {
        self.gaps_days().iter().map(|&d| (1.0 + d as f64).ln()).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.n() < 2 {
            return Err(Error::InsufficientData(format!(
                "patient '{}' has {} visit(s); at least 2 required",
                self.patient_id,
                self.n()
            )));
        }
        for w in self.visits.windows(2) {
            if w[1].t == w[0].t {
                return Err(Error::DuplicateTimestamp {
                    patient: self.patient_id.clone(),
                    t: w[0].t,
                });
            }
            if w[1].t < w[0].t {
                return Err(Error::InvalidArgument(format!(
                    "patient '{}' visits are not sorted",
                    self.patient_id
                )));
            }
        }
        if self.visits.iter().any(|v| v.codes.is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "patient '{}' has a visit with no codes",
                self.patient_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Cohort {
    pub patients: Vec<PatientSequence>,
    pub vocabulary: CodeVocabulary,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortSummary {
    pub patients: usize,
    pub vocabulary_size: usize,
    pub mean_visits: f64,
    pub mean_codes_per_visit: f64,
    pub mean_gap_days: f64,
}

impl Cohort {
    pub fn summary(&self) -> CohortSummary {
        let mut visit_count = 0usize;
        let mut code_count = 0usize;
        let mut gap_sum = 0f64;
        let mut gap_count = 0usize;
        for p in &self.patients {
            visit_count += p.n();
            for v in &p.visits {
                code_count += v.codes.len();
            }
            for g in p.gaps_days().iter().skip(1) {
                gap_sum += *g as f64;
                gap_count += 1;
            }
        }
        let patients = self.patients.len();
        CohortSummary {
            patients,
            vocabulary_size: self.vocabulary.len(),
            mean_visits: visit_count as f64 / patients.max(1) as f64,
            mean_codes_per_visit: code_count as f64 / visit_count.max(1) as f64,
            mean_gap_days: gap_sum / gap_count.max(1) as f64,
        }
    }

    /// Encode every patient against the cohort vocabulary.
    pub fn encode(&self) -> Result<Vec<EncodedPatient>> {
        self.patients
            .iter()
            .map(|p| EncodedPatient::from_sequence(p, &self.vocabulary))
            .collect()
    }
}

/// A patient sequence resolved to vocabulary indices and log-gaps.
#[derive(Clone, Debug)]
pub struct EncodedPatient {
    pub patient_id: String,
    /// Sorted vocabulary indices per visit.
    pub code_idx: Vec<Vec<usize>>,
    /// log(1 + gap days) per visit; first entry 0.
    pub log_gaps: Vec<f64>,
}

impl EncodedPatient {
    pub fn from_sequence(seq: &PatientSequence, vocab: &CodeVocabulary) -> Result<Self> {
        let code_idx = seq
            .visits
            .iter()
            .map(|v| crate::vocab::encode_visit_indices(v.codes.iter().map(|c| c.as_str()), vocab))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncodedPatient {
            patient_id: seq.patient_id.clone(),
            code_idx,
            log_gaps: seq.log_gaps(),
        })
    }

    pub fn n(&self) -> usize {
        self.code_idx.len()
    }

    /// Prediction steps: one per visit except the last.
    pub fn steps(&self) -> usize {
        self.n() - 1
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct RawVisit {
    t: i64,
    codes: Vec<String>,
}

#[derive(Debug, Deserialize, Serialize)]
struct RawPatient {
    pid: String,
    visits: Vec<RawVisit>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadStats {
    /// Patients dropped for having fewer than two visits.
    pub dropped_short: usize,
}

/// Load a JSONL cohort. When `vocab` is given, codes are encoded against it
/// (unknown codes are an error); otherwise a vocabulary is built over the
/// file in first-occurrence order.
pub fn load_cohort(
    path: impl AsRef<Path>,
    grouping: &GroupingConfig,
    vocab: Option<CodeVocabulary>,
) -> Result<(Cohort, LoadStats)> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut patients = Vec::new();
    let mut stats = LoadStats::default();

    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawPatient = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no + 1,
            msg: e.to_string(),
        })?;
        if raw.visits.len() < 2 {
            stats.dropped_short += 1;
            continue;
        }
        let mut visits = Vec::with_capacity(raw.visits.len());
        for rv in raw.visits {
            if rv.codes.is_empty() {
                return Err(Error::Parse {
                    line: line_no + 1,
                    msg: format!("patient '{}' has a visit with no codes", raw.pid),
                });
            }
            let mut codes: Vec<String> = Vec::with_capacity(rv.codes.len());
            for c in &rv.codes {
                let grouped = group_code(c, grouping).map_err(|e| Error::Parse {
                    line: line_no + 1,
                    msg: e.to_string(),
                })?;
                if !codes.contains(&grouped) {
                    codes.push(grouped);
                }
            }
            visits.push(Visit { t: rv.t, codes });
        }
        visits.sort_by_key(|v| v.t);
        let patient = PatientSequence {
            patient_id: raw.pid,
            visits,
        };
        patient.validate()?;
        patients.push(patient);
    }

    if patients.is_empty() {
        return Err(Error::InsufficientData(
            "cohort file contains no usable patients".to_string(),
        ));
    }

    let vocabulary = match vocab {
        Some(v) => {
            // Fail fast on codes the fixed vocabulary cannot express.
            for p in &patients {
                for visit in &p.visits {
                    for c in &visit.codes {
                        v.require_index(c)?;
                    }
                }
            }
            v
        }
        None => build_vocabulary(&patients)?,
    };

    Ok((Cohort { patients, vocabulary }, stats))
}

/// Vocabulary over grouped codes in first-occurrence order.
pub fn build_vocabulary(patients: &[PatientSequence]) -> Result<CodeVocabulary> {
    CodeVocabulary::from_code_stream(
        patients
            .iter()
            .flat_map(|p| p.visits.iter())
            .flat_map(|v| v.codes.iter().map(|c| c.as_str())),
    )
}

/// Write a cohort as JSON Lines.
pub fn write_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    for p in &cohort.patients {
        let raw = RawPatient {
            pid: p.patient_id.clone(),
            visits: p
                .visits
                .iter()
                .map(|v| RawVisit {
                    t: v.t,
                    codes: v.codes.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &raw)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Write the sidecar vocabulary file: a JSON array of codes in index order.
pub fn write_vocabulary(vocab: &CodeVocabulary, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, vocab.codes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_vocabulary(path: impl AsRef<Path>) -> Result<CodeVocabulary> {
    let file = File::open(path.as_ref())?;
    let codes: Vec<String> = serde_json::from_reader(BufReader::new(file))?;
    CodeVocabulary::from_code_stream(codes.iter().map(|c| c.as_str()))
}

/// Patient-level split into train and test cohorts.
///
/// The shuffle is seeded, the train side gets round(fraction × N) patients,
/// and both sides keep the original patient order and shared vocabulary.
pub fn split_dataset(cohort: &Cohort, train_fraction: f64, seed: u64) -> Result<(Cohort, Cohort)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = cohort.patients.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 patients to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, 0x5171).shuffle(&mut order);
    let n_train = (train_fraction * n as f64).round() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let mut in_train = vec![false; n];
    for &i in order.iter().take(n_train) {
        in_train[i] = true;
    }
    let pick = |keep: bool| Cohort {
        patients: cohort
            .patients
            .iter()
            .enumerate()
            .filter(|(i, _)| in_train[*i] == keep)
            .map(|(_, p)| p.clone())
            .collect(),
        vocabulary: cohort.vocabulary.clone(),
    };
    Ok((pick(true), pick(false)))
}
