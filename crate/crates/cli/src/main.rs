//! Batch pipeline driver: generate data, pretrain embeddings, train,
//! evaluate, probe, transfer. One stage per invocation; every run with the
//! same flags and inputs produces identical outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use visitcast_core::baselines::{
    train_logistic, train_mlp, BaselineTrainConfig, LastVisitBaseline, MostFrequentBaseline,
};
use visitcast_core::checkpoint::{
    baseline_checkpoint, checkpoint_to_bytes, gru_checkpoint, gru_from_checkpoint,
    load_checkpoint, model_from_checkpoint, LoadedModel, ModelSpec,
};
use visitcast_core::data::{
    load_cohort, read_vocabulary, split_dataset, write_cohort, write_vocabulary, Cohort,
    EncodedPatient,
};
use visitcast_core::gru::EmbeddingMode;
use visitcast_core::metrics::{
    curve_csv, evaluate_model, perplexity_probe, recall_by_history_length, VisitPredictor,
};
use visitcast_core::optim::{fine_tune, history_csv, train, TrainingConfig};
use visitcast_core::rng::Rng;
use visitcast_core::skipgram::{emit_code_streams, load_embedding, save_embedding, train_skipgram, SkipgramConfig};
use visitcast_core::synth::{generate_synthetic_cohort, SyntheticConfig};
use visitcast_core::vocab::{CodeVocabulary, GroupingConfig};

#[derive(Parser)]
#[command(
    name = "visitcast",
    version,
    about = "Train and evaluate next-visit prediction models on coded visit sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (JSONL plus a vocabulary sidecar).
    Generate(GenerateArgs),
    /// Split a cohort into train and test files at the patient level.
    Split(SplitArgs),
    /// Train skip-gram code embeddings from a cohort.
    PretrainEmbeddings(PretrainArgs),
    /// Train the recurrent model.
    Train(TrainArgs),
    /// Evaluate a saved model on a test cohort.
    Evaluate(EvaluateArgs),
    /// Rank next-visit codes and predict the gap for one patient record.
    Predict(PredictArgs),
    /// Emit the per-step perplexity curve for a repeated single-code input.
    Probe(ProbeArgs),
    /// Initialize from a source model and fine-tune on a target cohort.
    Transfer(TransferArgs),
    /// Train or evaluate the comparison baselines.
    Baselines(BaselinesArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 2000)]
    patients: usize,
    #[arg(long, default_value_t = 100)]
    codes: usize,
    #[arg(long, default_value_t = 10)]
    hidden_states: usize,
    #[arg(long, default_value_t = 54.61)]
    mean_visits: f64,
    #[arg(long, default_value_t = 3.22)]
    mean_codes: f64,
    #[arg(long, default_value_t = 76.12)]
    mean_gap: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Patient draws reuse --seed unless this is set; two runs with the same
    /// --seed and different patient seeds share the hidden process but
    /// contain disjoint patients.
    #[arg(long)]
    patient_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 0.85)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    negatives: usize,
    #[arg(long, default_value_t = 0.025)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingArg {
    Learned,
    Skipgram,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
    layers: u8,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    #[arg(long, default_value_t = 0.001)]
    l2: f64,
    #[arg(long, value_enum, default_value_t = EmbeddingArg::Learned)]
    embedding: EmbeddingArg,
    /// Embedding table from `pretrain-embeddings`; required with
    /// `--embedding skipgram`.
    #[arg(long)]
    skipgram_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 100)]
    emb_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Held-out cohort for per-epoch metrics in the history CSV.
    #[arg(long)]
    eval_cohort: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long, default_value = "10,20,30")]
    ks: String,
    /// Report JSON destination (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv_out: Option<PathBuf>,
    /// Write the recall-vs-history-length curve (CSV) for patients with at
    /// least --min-visits visits.
    #[arg(long)]
    curve_out: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    min_visits: usize,
    #[arg(long, default_value_t = 10)]
    curve_k: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// One patient as JSON: {"pid": ..., "visits": [{"t": ..., "codes": [...]}]}.
    #[arg(long)]
    patient: PathBuf,
    #[arg(long, default_value_t = 30)]
    k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    code: String,
    #[arg(long, default_value_t = 200)]
    repeats: usize,
    /// Constant gap in days between the probe's visits.
    #[arg(long, default_value_t = 30)]
    gap: i64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    source_model: PathBuf,
    #[arg(long)]
    target_cohort: PathBuf,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    eval_cohort: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    LastVisit,
    MostFrequent,
    Logistic,
    Mlp,
}

#[derive(Args)]
struct BaselinesArgs {
    #[arg(long, value_enum)]
    kind: BaselineKind,
    /// Training cohort; required for logistic and mlp.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    test_cohort: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    lag: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value = "10,20,30")]
    ks: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to save the trained baseline checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report JSON destination (stdout when omitted).
    #[arg(long)]
    report_out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let (stage, result) = match cli.command {
        Command::Generate(args) => ("generate", run_generate(args)),
        Command::Split(args) => ("split", run_split(args)),
        Command::PretrainEmbeddings(args) => ("pretrain-embeddings", run_pretrain(args)),
        Command::Train(args) => ("train", run_train(args)),
        Command::Evaluate(args) => ("evaluate", run_evaluate(args)),
        Command::Predict(args) => ("predict", run_predict(args)),
        Command::Probe(args) => ("probe", run_probe(args)),
        Command::Transfer(args) => ("transfer", run_transfer(args)),
        Command::Baselines(args) => ("baselines", run_baselines(args)),
    };
    if let Err(err) = result {
        eprintln!("error [{stage}]: {err:#}");
        std::process::exit(1);
    }
}

/// Write through a temp file in the same directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn load_cohort_arg(path: &Path, vocab: Option<CodeVocabulary>) -> Result<Cohort> {
    let (cohort, stats) = load_cohort(path, &GroupingConfig::default(), vocab)
        .with_context(|| format!("loading cohort {}", path.display()))?;
    if stats.dropped_short > 0 {
        eprintln!(
            "note: dropped {} patient(s) with fewer than two visits from {}",
            stats.dropped_short,
            path.display()
        );
    }
    Ok(cohort)
}

fn vocab_arg(path: &Option<PathBuf>) -> Result<Option<CodeVocabulary>> {
    match path {
        Some(p) => Ok(Some(
            read_vocabulary(p).with_context(|| format!("loading vocabulary {}", p.display()))?,
        )),
        None => Ok(None),
    }
}

fn parse_ks(ks: &str) -> Result<Vec<usize>> {
    let parsed: std::result::Result<Vec<usize>, _> =
        ks.split(',').map(|s| s.trim().parse::<usize>()).collect();
    let parsed = parsed.with_context(|| format!("parsing --ks '{ks}'"))?;
    if parsed.is_empty() || parsed.contains(&0) {
        bail!("--ks needs positive integers");
    }
    Ok(parsed)
}

fn sidecar_vocab_path(out: &Path) -> PathBuf {
    out.with_extension("vocab.json")
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let config = SyntheticConfig {
        n_patients: args.patients,
        n_hidden_states: args.hidden_states,
        n_codes: args.codes,
        mean_visits: args.mean_visits,
        mean_codes_per_visit: args.mean_codes,
        mean_gap_days: args.mean_gap,
        seed: args.seed,
        patient_seed: args.patient_seed,
    };
    let cohort = generate_synthetic_cohort(&config)?;
    let tmp = args.out.with_extension("jsonl.tmp");
    write_cohort(&cohort, &tmp)?;
    fs::rename(&tmp, &args.out)?;
    let vocab_path = sidecar_vocab_path(&args.out);
    write_vocabulary(&cohort.vocabulary, &vocab_path)?;
    let s = cohort.summary();
    println!(
        "generate: {} patients, {} codes, mean visits {:.2}, mean gap {:.2}d -> {} + {}",
        s.patients,
        s.vocabulary_size,
        s.mean_visits,
        s.mean_gap_days,
        args.out.display(),
        vocab_path.display()
    );
    Ok(())
}

fn run_split(args: SplitArgs) -> Result<()> {
    let cohort = load_cohort_arg(&args.cohort, vocab_arg(&args.vocab)?)?;
    let (train_c, test_c) = split_dataset(&cohort, args.fraction, args.seed)?;
    for (c, path) in [(&train_c, &args.train_out), (&test_c, &args.test_out)] {
        let tmp = path.with_extension("jsonl.tmp");
        write_cohort(c, &tmp)?;
        fs::rename(&tmp, path)?;
    }
    println!(
        "split: {} -> {} train / {} test ({} , {})",
        cohort.patients.len(),
        train_c.patients.len(),
        test_c.patients.len(),
        args.train_out.display(),
        args.test_out.display()
    );
    Ok(())
}

fn run_pretrain(args: PretrainArgs) -> Result<()> {
    let cohort = load_cohort_arg(&args.cohort, vocab_arg(&args.vocab)?)?;
    let config = SkipgramConfig {
        dim: args.dim,
        window: args.window,
        epochs: args.epochs,
        negative_samples: args.negatives,
        learning_rate: args.lr,
        seed: args.seed,
    };
    let streams = emit_code_streams(&cohort, &mut Rng::derive(args.seed, 0x57e3));
    let outcome = train_skipgram(&streams, &cohort.vocabulary, &config)?;
    let tmp = args.out.with_extension("emb.tmp");
    save_embedding(&outcome.table, &tmp)?;
    fs::rename(&tmp, &args.out)?;
    println!(
        "pretrain-embeddings: {} codes x {} dims, final epoch loss {:.4} -> {}",
        cohort.vocabulary.len(),
        args.dim,
        outcome.epoch_loss.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let cohort = load_cohort_arg(&args.cohort, vocab_arg(&args.vocab)?)?;
    let eval_cohort = match &args.eval_cohort {
        Some(p) => Some(load_cohort_arg(p, Some(cohort.vocabulary.clone()))?),
        None => None,
    };
    let (mode, table) = match args.embedding {
        EmbeddingArg::Learned => (EmbeddingMode::Learned, None),
        EmbeddingArg::Skipgram => {
            let path = args
                .skipgram_file
                .as_ref()
                .context("--embedding skipgram requires --skipgram-file")?;
            let table = load_embedding(path)
                .with_context(|| format!("loading embeddings {}", path.display()))?;
            (EmbeddingMode::SkipgramInit, Some(table))
        }
    };
    let config = TrainingConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        dropout: args.dropout,
        l2: args.l2,
        seed: args.seed,
        embedding_mode: mode,
        eval_every: args.eval_every,
        hidden: args.hidden,
        emb_dim: args.emb_dim,
        layers: args.layers as usize,
        ..TrainingConfig::default()
    };
    let outcome = train(&cohort, &config, table.as_ref(), eval_cohort.as_ref())?;
    let ckpt = gru_checkpoint(
        &outcome.params,
        &config,
        &cohort.vocabulary,
        outcome.epochs_run,
        Some(&outcome.optimizer_state),
        Some(&outcome.rng),
    );
    write_atomic(&args.out, &checkpoint_to_bytes(&ckpt)?)?;
    let history_path = args.out.with_extension("history.csv");
    write_atomic(&history_path, history_csv(&outcome.history).as_bytes())?;
    println!(
        "train: {} epochs over {} patients, final mean loss {:.4} -> {} + {}",
        args.epochs,
        cohort.patients.len(),
        outcome.history.last().map(|r| r.mean_loss).unwrap_or(f64::NAN),
        args.out.display(),
        history_path.display()
    );
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let ks = parse_ks(&args.ks)?;
    let ckpt = load_checkpoint(&args.model)?;
    let model = model_from_checkpoint(&ckpt)?;
    let cohort = load_cohort_arg(&args.cohort, Some(model.vocab().clone()))?;
    let report = evaluate_model(model.predictor(), &cohort, &ks)?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    match &args.out {
        Some(path) => {
            write_atomic(path, json.as_bytes())?;
            println!("evaluate: {} on {} -> {}", model.kind(), args.cohort.display(), path.display());
        }
        None => print!("{json}"),
    }
    if let Some(path) = &args.csv_out {
        write_atomic(path, report.to_csv().as_bytes())?;
    }
    if let Some(path) = &args.curve_out {
        let curve = recall_by_history_length(model.predictor(), &cohort, args.min_visits, args.curve_k)?;
        write_atomic(path, curve_csv(&curve).as_bytes())?;
    }
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.model)?;
    let loaded = match model_from_checkpoint(&ckpt)? {
        LoadedModel::Gru(g) => g,
        other => bail!("predict requires a gru checkpoint, got {}", other.kind()),
    };
    let text = fs::read_to_string(&args.patient)
        .with_context(|| format!("reading {}", args.patient.display()))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let pid = raw.get("pid").and_then(|v| v.as_str()).unwrap_or("patient").to_string();
    let visits = raw
        .get("visits")
        .and_then(|v| v.as_array())
        .context("patient JSON needs a 'visits' array")?;
    let grouping = GroupingConfig::default();
    let mut code_idx = Vec::new();
    let mut times = Vec::new();
    for v in visits {
        let t = v.get("t").and_then(|x| x.as_i64()).context("visit needs integer 't'")?;
        let codes = v
            .get("codes")
            .and_then(|x| x.as_array())
            .context("visit needs a 'codes' array")?;
        let mut idx = Vec::new();
        for c in codes {
            let raw_code = c.as_str().context("codes must be strings")?;
            let grouped = visitcast_core::vocab::group_code(raw_code, &grouping)?;
            idx.push(loaded.model.vocab.require_index(&grouped)?);
        }
        idx.sort_unstable();
        idx.dedup();
        code_idx.push(idx);
        times.push(t);
    }
    if code_idx.is_empty() {
        bail!("patient has no visits");
    }
    let mut log_gaps = vec![0.0];
    for w in times.windows(2) {
        if w[1] <= w[0] {
            bail!("visit timestamps must be strictly increasing");
        }
        log_gaps.push((1.0 + (w[1] - w[0]) as f64).ln());
    }
    // Extend with a placeholder target so the forward pass emits a
    // prediction after the final observed visit.
    code_idx.push(vec![]);
    log_gaps.push(0.0);
    let enc = EncodedPatient {
        patient_id: pid.clone(),
        code_idx,
        log_gaps,
    };
    let preds = loaded.model.predict(&enc)?;
    let last = preds.last().expect("at least one step");
    let ranking = visitcast_core::metrics::PredictionRanking {
        scores: last.probs.as_slice().to_vec(),
        log_gap: Some(last.log_gap),
    };
    let top: Vec<serde_json::Value> = ranking
        .top_k(args.k)
        .into_iter()
        .map(|i| {
            serde_json::json!({
                "code": loaded.model.vocab.code(i),
                "score": last.probs[i],
            })
        })
        .collect();
    let out = serde_json::json!({
        "pid": pid,
        "top": top,
        "predicted_log_gap": last.log_gap,
        "predicted_gap_days": last.log_gap.exp() - 1.0,
    });
    let mut json = serde_json::to_string_pretty(&out)?;
    json.push('\n');
    match &args.out {
        Some(path) => {
            write_atomic(path, json.as_bytes())?;
            println!("predict: {} -> {}", pid, path.display());
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn run_probe(args: ProbeArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.model)?;
    let loaded = match model_from_checkpoint(&ckpt)? {
        LoadedModel::Gru(g) => g,
        other => bail!("probe requires a gru checkpoint, got {}", other.kind()),
    };
    let curve = perplexity_probe(&loaded.model, &args.code, args.repeats, args.gap)?;
    let mut csv = String::from("step,perplexity\n");
    for (i, p) in curve.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, p));
    }
    write_atomic(&args.out, csv.as_bytes())?;
    println!(
        "probe: code {} x{} steps, final perplexity {:.2} -> {}",
        args.code,
        args.repeats,
        curve.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn run_transfer(args: TransferArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.source_model)?;
    let source = gru_from_checkpoint(&ckpt)?;
    let target = load_cohort_arg(&args.target_cohort, None)?;
    let eval_cohort = match &args.eval_cohort {
        Some(p) => Some(load_cohort_arg(p, Some(target.vocabulary.clone()))?),
        None => None,
    };
    let mut config = source.config.clone();
    config.epochs = args.epochs;
    config.seed = args.seed;
    config.eval_every = args.eval_every;
    if let Some(d) = args.dropout {
        config.dropout = d;
    }
    let outcome = fine_tune(
        &source.model.params,
        &source.model.vocab,
        &target,
        &config,
        eval_cohort.as_ref(),
    )?;
    let out_ckpt = gru_checkpoint(
        &outcome.params,
        &config,
        &target.vocabulary,
        outcome.epochs_run,
        Some(&outcome.optimizer_state),
        Some(&outcome.rng),
    );
    write_atomic(&args.out, &checkpoint_to_bytes(&out_ckpt)?)?;
    let history_path = args.out.with_extension("history.csv");
    write_atomic(&history_path, history_csv(&outcome.history).as_bytes())?;
    println!(
        "transfer: {} source codes -> {} target codes, {} epochs -> {} + {}",
        source.model.vocab.len(),
        target.vocabulary.len(),
        args.epochs,
        args.out.display(),
        history_path.display()
    );
    Ok(())
}

fn run_baselines(args: BaselinesArgs) -> Result<()> {
    let ks = parse_ks(&args.ks)?;
    let vocab = vocab_arg(&args.vocab)?;
    let config = BaselineTrainConfig {
        lag: args.lag,
        epochs: args.epochs,
        hidden: args.hidden,
        seed: args.seed,
        ..BaselineTrainConfig::default()
    };

    let (report, kind_name, ckpt) = match args.kind {
        BaselineKind::LastVisit | BaselineKind::MostFrequent => {
            let test = load_cohort_arg(&args.test_cohort, vocab)?;
            let p = test.vocabulary.len();
            let predictor: Box<dyn VisitPredictor> = match args.kind {
                BaselineKind::LastVisit => Box::new(LastVisitBaseline { p }),
                _ => Box::new(MostFrequentBaseline { p }),
            };
            let report = evaluate_model(predictor.as_ref(), &test, &ks)?;
            let name = match args.kind {
                BaselineKind::LastVisit => "last-visit",
                _ => "most-frequent",
            };
            (report, name, None)
        }
        BaselineKind::Logistic => {
            let train_path = args.cohort.as_ref().context("--kind logistic requires --cohort")?;
            let train_c = load_cohort_arg(train_path, vocab)?;
            let test = load_cohort_arg(&args.test_cohort, Some(train_c.vocabulary.clone()))?;
            let (params, _) = train_logistic(&train_c, &config)?;
            let report = evaluate_model(&params, &test, &ks)?;
            let ckpt = baseline_checkpoint(
                &params,
                ModelSpec::Logistic { config: config.clone() },
                &train_c.vocabulary,
                config.epochs,
            );
            (report, "logistic", Some(ckpt))
        }
        BaselineKind::Mlp => {
            let train_path = args.cohort.as_ref().context("--kind mlp requires --cohort")?;
            let train_c = load_cohort_arg(train_path, vocab)?;
            let test = load_cohort_arg(&args.test_cohort, Some(train_c.vocabulary.clone()))?;
            let (params, _) = train_mlp(&train_c, &config)?;
            let report = evaluate_model(&params, &test, &ks)?;
            let ckpt = baseline_checkpoint(
                &params,
                ModelSpec::Mlp { config: config.clone() },
                &train_c.vocabulary,
                config.epochs,
            );
            (report, "mlp", Some(ckpt))
        }
    };

    if let (Some(path), Some(ckpt)) = (&args.out, &ckpt) {
        write_atomic(path, &checkpoint_to_bytes(ckpt)?)?;
    }
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    match &args.report_out {
        Some(path) => {
            write_atomic(path, json.as_bytes())?;
            println!(
                "baselines: {kind_name} recall@{} = {:.4} -> {}",
                ks[0],
                report.recall_at(ks[0]),
                path.display()
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}
