//! Synthetic cohort generator.
//!
//! Each patient follows a hidden Markov chain. States carry a peaked
//! code-emission distribution and a state-dependent mean gap, so the next
//! visit's codes genuinely depend on history rather than on marginal code
//! frequency alone. Two cohorts drawn with the same `seed` but different
//! `patient_seed` values share the hidden process and contain disjoint
//! patients, which is what the pretrain/fine-tune workflow needs.

use serde::{Deserialize, Serialize};

use crate::data::{build_vocabulary, Cohort, PatientSequence, Visit};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    pub n_hidden_states: usize,
    pub n_codes: usize,
    pub mean_visits: f64,
    pub mean_codes_per_visit: f64,
    pub mean_gap_days: f64,
    /// Seeds the hidden process (transitions, emissions, gap means).
    pub seed: u64,
    /// Seeds the patient draws; defaults to `seed`.
    pub patient_seed: Option<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_patients: 2000,
            n_hidden_states: 10,
            n_codes: 100,
            mean_visits: 54.61,
            mean_codes_per_visit: 3.22,
            mean_gap_days: 76.12,
            seed: 0,
            patient_seed: None,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.n_patients < 1 || self.n_hidden_states < 1 || self.n_codes < 1 {
            return Err(Error::InvalidArgument(
                "synthetic config counts must be at least 1".to_string(),
            ));
        }
        if self.n_codes > 899 {
            return Err(Error::InvalidArgument(format!(
                "synthetic generator supports at most 899 codes, got {}",
                self.n_codes
            )));
        }
        if self.mean_visits < 2.0 {
            return Err(Error::InvalidArgument(format!(
                "mean visits must be at least 2, got {}",
                self.mean_visits
            )));
        }
        if self.mean_codes_per_visit < 1.0 || self.mean_gap_days < 1.0 {
            return Err(Error::InvalidArgument(
                "mean codes per visit and mean gap must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

/// The hidden process shared by every patient drawn from one seed.
struct World {
    codes: Vec<String>,
    /// Row-stochastic transition matrix, n_states × n_states.
    transitions: Vec<Vec<f64>>,
    /// Per-state emission distribution over codes.
    emissions: Vec<Vec<f64>>,
    /// Per-state mean gap in days.
    gap_means: Vec<f64>,
}

/// Peaked probability vector: normalized heavy-tailed weights. Smaller
/// `concentration` puts most of the mass on a handful of entries.
fn peaked_distribution(len: usize, concentration: f64, rng: &mut Rng) -> Vec<f64> {
    let mut weights: Vec<f64> = (0..len)
        .map(|_| rng.exponential(1.0).powf(1.0 / concentration.max(1e-3)))
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        weights = vec![1.0; len];
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    weights
}

fn build_world(config: &SyntheticConfig, rng: &mut Rng) -> World {
    let codes: Vec<String> = (0..config.n_codes).map(|i| format!("{:03}", 100 + i)).collect();
    let k = config.n_hidden_states;
    let transitions: Vec<Vec<f64>> = (0..k).map(|_| peaked_distribution(k, 0.45, rng)).collect();
    let emissions: Vec<Vec<f64>> = (0..k)
        .map(|_| peaked_distribution(config.n_codes, 0.25, rng))
        .collect();
    // Multiplicatively centered spread so the expected gap stays on target.
    let sigma = 0.3;
    let gap_means: Vec<f64> = (0..k)
        .map(|_| config.mean_gap_days * (sigma * rng.normal() - sigma * sigma / 2.0).exp())
        .collect();
    World {
        codes,
        transitions,
        emissions,
        gap_means,
    }
}

fn sample_index(dist: &[f64], rng: &mut Rng) -> usize {
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// Sample `count` distinct codes, weighted without replacement.
fn sample_codes(dist: &[f64], count: usize, rng: &mut Rng) -> Vec<usize> {
    let mut weights = dist.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count.min(dist.len()) {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            break;
        }
        let u = rng.next_f64() * total;
        let mut acc = 0.0;
        let mut chosen = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                chosen = i;
                break;
            }
        }
        out.push(chosen);
        weights[chosen] = 0.0;
    }
    out
}

pub fn generate_synthetic_cohort(config: &SyntheticConfig) -> Result<Cohort> {
    config.validate()?;
    let mut world_rng = Rng::derive(config.seed, 0x1d);
    let world = build_world(config, &mut world_rng);
    let mut rng = Rng::derive(config.patient_seed.unwrap_or(config.seed), 0x9a7);

    let k = config.n_hidden_states;
    let mut patients = Vec::with_capacity(config.n_patients);
    for pid in 0..config.n_patients {
        // Visit count: 2 + geometric, mean = mean_visits.
        let n_visits = if config.mean_visits <= 2.0 {
            2
        } else {
            2 + rng.geometric(1.0 / (config.mean_visits - 1.0))
        };
        let mut state = rng.below(k);
        let mut t = rng.below(3650) as i64;
        let mut visits = Vec::with_capacity(n_visits);
        for v in 0..n_visits {
            if v > 0 {
                state = sample_index(&world.transitions[state], &mut rng);
                let gap = rng.gamma2(world.gap_means[state]).round().max(1.0) as i64;
                t += gap;
            }
            let extra = if config.mean_codes_per_visit > 1.0 {
                rng.poisson(config.mean_codes_per_visit - 1.0)
            } else {
                0
            };
            let n_codes = (1 + extra).min(config.n_codes);
            let codes: Vec<String> = sample_codes(&world.emissions[state], n_codes, &mut rng)
                .into_iter()
                .map(|i| world.codes[i].clone())
                .collect();
            visits.push(Visit { t, codes });
        }
        patients.push(PatientSequence {
            patient_id: format!("p{pid:06}"),
            visits,
        });
    }

    let vocabulary = build_vocabulary(&patients)?;
    Ok(Cohort { patients, vocabulary })
}
