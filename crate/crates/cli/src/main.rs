//! Command-line entry points for the two-stage grounding pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod settings;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grounding::aggregators::AggregatorKind;
use grounding::datastore::{
    load_dataset, synth_localization, synth_order_task, synth_tubes, write_dataset, DatasetManifest,
    GroundingSample, LocalizationConfig, OrderTaskConfig, Split,
};
use grounding::inference::{
    decode_best_moment, ensemble_scores, load_predictions, write_predictions, PredictionRecord,
};
use grounding::metrics::evaluate;
use grounding::model::{
    check_model_gradients, load_checkpoint, save_checkpoint, train, GroundingModel, ModelConfig, TrainConfig,
};
use grounding::rca::RcaConfig;
use grounding::spatial::{
    load_detections, load_tubes, select_tube, write_detections, write_tubes, ClipFrameMap, FrameDetections,
    PersonLexicon,
};
use grounding::Error;

use settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "grounding", version, about = "Two-stage spatio-temporal video grounding")]
struct Cli {
    /// key=value file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic localization dataset with detections and gt tubes.
    Synth(SynthArgs),
    /// Generate the paired order-discrimination dataset.
    SynthOrder(SynthOrderArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Predict one moment per sample with a single checkpoint.
    Infer(InferArgs),
    /// Predict with the mean score map of several checkpoints.
    Ensemble(InferArgs),
    /// Turn temporal predictions into tubes using detector output.
    SelectTube(SelectTubeArgs),
    /// Score predicted tubes against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and numeric gradients of a fresh model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    frames_per_clip: Option<usize>,
}

#[derive(Args, Debug)]
struct SynthOrderArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    aggregator: Option<AggregatorKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    rca_prob: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// One checkpoint, or a comma-separated list for `ensemble`.
    #[arg(long)]
    checkpoints: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct SelectTubeArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long)]
    frames_per_clip: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Also write the report as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    aggregator: Option<AggregatorKind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Data(e)
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let settings = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(&settings, a),
        Command::SynthOrder(a) => synth_order(&settings, a),
        Command::Train(a) => train_cmd(&settings, a),
        Command::Infer(a) => infer(&settings, a, false),
        Command::Ensemble(a) => infer(&settings, a, true),
        Command::SelectTube(a) => select_tubes(&settings, a),
        Command::Eval(a) => eval(&settings, a),
        Command::Gradcheck(a) => gradcheck(&settings, a),
    }
}

fn synth(s: &Settings, a: SynthArgs) -> Outcome {
    let out = s.required(a.out, "out")?;
    let cfg = LocalizationConfig {
        n_samples: s.value(a.samples, "samples", 100)?,
        n_clips: s.value(a.n, "n", 16)?,
        dim: s.value(a.dim, "dim", 16)?,
        snr: s.value(a.snr, "snr", 4.0)?,
        seed: s.value(a.seed, "seed", 0)?,
        split: s.value(a.split, "split", Split::Train)?,
    };
    let fpc = s.value(a.frames_per_clip, "frames-per-clip", 8)?;
    let manifest = synth_localization(&cfg)?;
    write_dataset(&manifest, &out)?;
    let (frames, tubes) = synth_tubes(&manifest, fpc, grounding::rng::derive_seed(cfg.seed, 4))?;
    write_detections(&frames, &out.join("detections.jsonl"))?;
    write_tubes(&tubes, &out.join("gt_tubes.jsonl"))?;
    println!("wrote {} samples to {}", manifest.samples.len(), out.display());
    Ok(())
}

fn synth_order(s: &Settings, a: SynthOrderArgs) -> Outcome {
    let out = s.required(a.out, "out")?;
    let cfg = OrderTaskConfig::new(
        s.value(a.pairs, "pairs", 100)?,
        s.value(a.n, "n", 16)?,
        s.value(a.dim, "dim", 8)?,
        s.value(a.seed, "seed", 0)?,
        s.value(a.split, "split", Split::Train)?,
    );
    let manifest = synth_order_task(&cfg)?;
    write_dataset(&manifest, &out)?;
    println!("wrote {} pairs to {}", cfg.n_pairs, out.display());
    Ok(())
}

fn dataset_dims(m: &DatasetManifest) -> Result<(usize, usize), Failure> {
    let first = m
        .samples
        .first()
        .ok_or(Failure::Data(Error::EmptyInput("dataset has no samples")))?;
    Ok((first.features.dim(), first.query.embedding.len()))
}

fn train_cmd(s: &Settings, a: TrainArgs) -> Outcome {
    let data = s.required(a.data, "data")?;
    let out = s.required(a.out, "out")?;
    let manifest = load_dataset(&data)?;
    let (d, dq) = dataset_dims(&manifest)?;
    let kind = s.value(a.aggregator, "aggregator", AggregatorKind::BiLstm)?;
    let mut model_cfg = ModelConfig::new(kind, d, dq);
    model_cfg.hidden = s.value(a.hidden, "hidden", model_cfg.hidden)?;
    let agg_dim = model_cfg.aggregator_dim();
    model_cfg.channels = s.value(a.channels, "channels", agg_dim)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: s.value(a.epochs, "epochs", defaults.epochs)?,
        batch_size: s.value(a.batch_size, "batch-size", defaults.batch_size)?,
        learning_rate: s.value(a.lr, "lr", defaults.learning_rate)?,
        momentum: s.value(a.momentum, "momentum", defaults.momentum)?,
        t_min: s.value(a.t_min, "t-min", defaults.t_min)?,
        t_max: s.value(a.t_max, "t-max", defaults.t_max)?,
        rca_probability: s.value(a.rca_prob, "rca-prob", defaults.rca_probability)?,
        rca: RcaConfig::default(),
        seed: s.value(a.seed, "seed", defaults.seed)?,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let outcome = train(&manifest.samples, model_cfg, &cfg)?;
    save_checkpoint(&outcome.model, Some(&cfg), &out)?;
    let mut log = String::from("epoch,mean_loss\n");
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        writeln!(log, "{},{l}", e + 1).unwrap();
    }
    let log_path = loss_log_path(&out);
    fs::write(&log_path, log).map_err(|e| Failure::Data(Error::Io { path: log_path.clone(), source: e }))?;
    println!(
        "trained {} epochs; loss {:.6} -> {:.6}; {} augmented steps",
        cfg.epochs,
        outcome.epoch_losses[0],
        outcome.epoch_losses[cfg.epochs - 1],
        outcome.augmented_steps
    );
    Ok(())
}

fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

/// Runs `f` over `items` on up to `jobs` threads, keeping input order.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    jobs: usize,
    f: impl Fn(&T) -> grounding::Result<R> + Sync,
) -> grounding::Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<grounding::Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn infer(s: &Settings, a: InferArgs, ensemble: bool) -> Outcome {
    let data = s.required(a.data, "data")?;
    let out = s.required(a.out, "out")?;
    let list: String = s.required(a.checkpoints, "checkpoints")?;
    let paths: Vec<PathBuf> = list.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
    if paths.is_empty() {
        return Err(Failure::Usage("--checkpoints is empty".into()));
    }
    if !ensemble && paths.len() > 1 {
        return Err(Failure::Usage("infer takes one checkpoint; use ensemble for several".into()));
    }
    let models = paths.iter().map(|p| load_checkpoint(p)).collect::<grounding::Result<Vec<_>>>()?;
    let manifest = load_dataset(&data)?;
    let jobs = s.value(a.jobs, "jobs", 1)?;
    let records = par_map(&manifest.samples, jobs, |sample: &GroundingSample| {
        let maps = models
            .iter()
            .map(|m| m.score(&sample.features, &sample.query.embedding))
            .collect::<grounding::Result<Vec<_>>>()?;
        Ok(PredictionRecord {
            video_id: sample.video_id().to_string(),
            query_id: sample.id().to_string(),
            prediction: decode_best_moment(&ensemble_scores(&maps)?)?,
        })
    })?;
    write_predictions(&records, &out)?;
    println!("wrote {} predictions from {} model(s)", records.len(), models.len());
    Ok(())
}

fn select_tubes(s: &Settings, a: SelectTubeArgs) -> Outcome {
    let data = s.required(a.data, "data")?;
    let pred_path = s.required(a.pred, "pred")?;
    let det_path = s.required(a.detections, "detections")?;
    let out = s.required(a.out, "out")?;
    let fpc = s.value(a.frames_per_clip, "frames-per-clip", 8)?;
    let lexicon = match s.optional(a.lexicon, "lexicon")? {
        Some(p) => PersonLexicon::load(&p)?,
        None => PersonLexicon::default(),
    };
    let manifest = load_dataset(&data)?;
    let by_id: HashMap<(&str, &str), &GroundingSample> =
        manifest.samples.iter().map(|x| ((x.video_id(), x.id()), x)).collect();
    let detections = load_detections(&det_path)?;
    let mut frames: HashMap<&str, HashMap<usize, &FrameDetections>> = HashMap::new();
    for f in &detections {
        frames.entry(f.video_id.as_str()).or_default().insert(f.frame_idx, f);
    }
    let empty = HashMap::new();
    let mut tubes = Vec::new();
    for p in load_predictions(&pred_path)? {
        let sample = by_id
            .get(&(p.video_id.as_str(), p.query_id.as_str()))
            .ok_or_else(|| Error::Missing(format!("sample {}/{} in {}", p.video_id, p.query_id, data.display())))?;
        let map = ClipFrameMap::uniform(sample.n_clips(), fpc)?;
        let video_frames = frames.get(p.video_id.as_str()).unwrap_or(&empty);
        tubes.push(select_tube(
            &sample.query,
            &p.video_id,
            &p.prediction,
            &map,
            video_frames,
            &lexicon,
        )?);
    }
    write_tubes(&tubes, &out)?;
    println!("wrote {} tubes", tubes.len());
    Ok(())
}

fn eval(s: &Settings, a: EvalArgs) -> Outcome {
    let pred = s.required(a.pred, "pred")?;
    let gt = s.required(a.gt, "gt")?;
    let report = evaluate(&load_tubes(&pred)?, &load_tubes(&gt)?)?;
    print!("{}", report.render_table());
    if let Some(out) = s.optional(a.out, "out")? {
        fs::write(&out, report.render_csv()).map_err(|e| Failure::Data(Error::Io { path: out.clone(), source: e }))?;
    }
    Ok(())
}

fn gradcheck(s: &Settings, a: GradcheckArgs) -> Outcome {
    let n = s.value(a.n, "n", 8)?;
    let d = s.value(a.dim, "dim", 6)?;
    let seed = s.value(a.seed, "seed", 0)?;
    let kind = s.value(a.aggregator, "aggregator", AggregatorKind::BiLstm)?;
    let mut cfg = ModelConfig::new(kind, d, d);
    cfg.hidden = s.value(a.hidden, "hidden", d)?;
    cfg.channels = s.value(a.channels, "channels", 8)?;
    let eps = s.value(a.eps, "eps", 1e-3)?;
    let tol = s.value(a.tol, "tol", 1e-4)?;
    let sample = synth_localization(&LocalizationConfig {
        n_samples: 1,
        n_clips: n,
        dim: d,
        snr: 2.0,
        seed,
        split: Split::Train,
    })?
    .samples
    .remove(0);
    let model = GroundingModel::<f64>::init(cfg, seed)?;
    let report = check_model_gradients(&model, &sample, eps, tol)?;
    for (name, err) in &report.per_param {
        println!("{name:<16} {err:.3e}");
    }
    println!("max_rel_err {:.3e} (tol {:.0e}, {} coordinates re-probed)", report.max_rel_err, tol, report.shrunk);
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check failed: max_rel_err {:.3e} > {tol:.0e}",
            report.max_rel_err
        )))
    }
}
