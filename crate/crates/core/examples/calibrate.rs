//! Scratch harness for tuning the baseline configurations on the
//! acceptance-scale synthetic cohort. Not part of the shipped surface.

use visitcast_core::baselines::*;
use visitcast_core::data::split_dataset;
use visitcast_core::metrics::evaluate_model;
use visitcast_core::optim::OptimizerKind;
use visitcast_core::synth::{generate_synthetic_cohort, SyntheticConfig};

fn main() {
    let cohort = generate_synthetic_cohort(&SyntheticConfig {
        n_patients: 2000,
        n_hidden_states: 10,
        n_codes: 100,
        mean_visits: 20.0,
        mean_codes_per_visit: 3.22,
        mean_gap_days: 76.12,
        seed: 11,
        patient_seed: None,
    })
    .unwrap();
    let (train_c, test_c) = split_dataset(&cohort, 0.85, 11).unwrap();

    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(|s| s.as_str()).unwrap_or("sweep");

    match mode {
        "logistic" => {
            for epochs in [5, 10, 20] {
                let config = BaselineTrainConfig {
                    epochs,
                    seed: 11,
                    ..BaselineTrainConfig::default()
                };
                let (params, hist) = train_logistic(&train_c, &config).unwrap();
                let report = evaluate_model(&params, &test_c, &[10]).unwrap();
                println!(
                    "logistic epochs={epochs} recall@10={:.4} final_loss={:.3}",
                    report.recall_at(10),
                    hist.last().unwrap()
                );
            }
        }
        _ => {
            for (hidden, epochs, l2, opt) in [
                (64usize, 5usize, 0.001f64, OptimizerKind::Adadelta),
                (64, 10, 0.001, OptimizerKind::Adadelta),
                (128, 5, 0.001, OptimizerKind::Adadelta),
                (128, 10, 0.01, OptimizerKind::Adadelta),
                (32, 10, 0.001, OptimizerKind::Adadelta),
                (128, 10, 0.001, OptimizerKind::Sgd { lr: 0.05 }),
                (128, 20, 0.001, OptimizerKind::Sgd { lr: 0.05 }),
            ] {
                let config = BaselineTrainConfig {
                    epochs,
                    hidden,
                    l2,
                    seed: 11,
                    optimizer: opt,
                    ..BaselineTrainConfig::default()
                };
                let (params, hist) = train_mlp(&train_c, &config).unwrap();
                let report = evaluate_model(&params, &test_c, &[10]).unwrap();
                println!(
                    "mlp hidden={hidden} epochs={epochs} l2={l2} opt={opt:?} recall@10={:.4} final_loss={:.3}",
                    report.recall_at(10),
                    hist.last().unwrap()
                );
            }
        }
    }
}
