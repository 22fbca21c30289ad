//! Command-line pipeline over the `dynadapter` library.
//!
//! Every command writes comma-separated records with a header row to the
//! supplied writer. Artifacts are written atomically.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dynadapter::analysis::{label_cka_profile, stage_accuracy_report, FeatureSource};
use dynadapter::autodiff::Tensor;
use dynadapter::checkpoint::{load_checkpoint, save_checkpoint};
use dynadapter::data::{synth_dataset, train_len, Dataset, SynthSpec, Task};
use dynadapter::inference::{average_flops, calibrate_threshold, infer_batch, ExitPolicy, FlopsModel};
use dynadapter::model::{DynAdapterModel, Pooling};
use dynadapter::rng::{normal, Streams};
use dynadapter::runconfig::RunConfig;
use dynadapter::training::{fit, pretrain_backbone, EpochMetrics};
use dynadapter::{write_atomic, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dynadapter", version, about = "Frozen-backbone adapters with multi-exit training and budgeted early exit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Synth(SynthArgs),
    /// Train adapters and exit heads on the training split.
    Train(TrainArgs),
    /// Fold every adapter into the frozen weights.
    Fuse(FuseArgs),
    /// Find the shared threshold that meets a FLOPs budget.
    Calibrate(CalibrateArgs),
    /// Per-stage exit statistics under a policy.
    Eval(EvalArgs),
    /// Per-sample exit records under a policy.
    Infer(EvalArgs),
    /// Feature/label CKA after every block.
    Analyze(AnalyzeArgs),
    /// Cumulative FLOPs per exit stage.
    Flops(FlopsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Shapes,
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Cls,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Adapted,
    Backbone,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = TaskArg::Shapes)]
    pub task: TaskArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// key=value run configuration; `DYN_*` variables override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Also write the per-epoch records to this file.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Measure the deviation on this dataset's validation split instead of
    /// random images.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Target mean FLOPs as a fraction of full depth.
    #[arg(long)]
    pub budget: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Policy file written by `calibrate`.
    #[arg(long, conflicts_with = "budget_policy")]
    pub policy: Option<PathBuf>,
    /// Inline policy, e.g. `tau=0.8` or `thresholds=0.9,0.8,0.7,0`.
    #[arg(long)]
    pub budget_policy: Option<String>,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = PoolingArg::Cls)]
    pub pooling: PoolingArg,
    #[arg(long, value_enum, default_value_t = SourceArg::Adapted)]
    pub source: SourceArg,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Count the adapters as evaluated alongside the frozen maps.
    #[arg(long)]
    pub unfused: bool,
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e)
}

fn select(data: &Dataset, split: Split) -> Dataset {
    match split {
        Split::Train => data.slice(0, train_len(data.len())),
        Split::Val => data.slice(train_len(data.len()), data.len()),
        Split::All => data.clone(),
    }
}

fn nonempty(data: Dataset, split: Split) -> Result<Dataset> {
    if data.is_empty() {
        return Err(Error::Config(format!("the {split:?} split is empty").to_lowercase()));
    }
    Ok(data)
}

fn check_compatible(model: &DynAdapterModel, data: &Dataset) -> Result<()> {
    let c = model.config();
    let [h, w, ch] = data.image_dims();
    if h != c.image_size || w != c.image_size || ch != c.channels {
        return Err(Error::Config(format!(
            "dataset images are {h}x{w}x{ch}, model expects {0}x{0}x{1}",
            c.image_size, c.channels
        )));
    }
    if data.num_classes() != c.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            data.num_classes(),
            c.num_classes
        )));
    }
    Ok(())
}

fn fused(model: DynAdapterModel) -> Result<DynAdapterModel> {
    if model.is_fused() {
        Ok(model)
    } else {
        model.fuse()
    }
}

fn read_policy(args: &EvalArgs, stages: usize) -> Result<ExitPolicy> {
    match (&args.policy, &args.budget_policy) {
        (Some(p), _) => ExitPolicy::parse(&std::fs::read_to_string(p)?, stages),
        (None, Some(text)) => ExitPolicy::parse(&text.replace(';', "\n"), stages),
        (None, None) => Ok(ExitPolicy::full_depth(stages)),
    }
}

fn epoch_header(stages: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "mean_loss".into()];
    cols.extend((1..=stages).map(|i| format!("acc_{i}")));
    cols.extend((1..=stages).map(|i| format!("lambda_{i}")));
    cols.push("mask_fraction".into());
    cols.join(",")
}

fn epoch_row(m: &EpochMetrics) -> String {
    let mut cols = vec![m.epoch.to_string(), format!("{:.6}", m.mean_loss)];
    cols.extend(m.stage_accuracy.iter().map(|a| format!("{a:.4}")));
    cols.extend(m.lambdas.iter().map(|l| format!("{l:.6}")));
    cols.push(format!("{:.6}", m.mask_fraction));
    cols.join(",")
}

/// Runs one command. `env` supplies the `DYN_*` overrides.
pub fn run(cli: Cli, env: impl IntoIterator<Item = (String, String)>, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, env, out),
        Command::Fuse(a) => fuse(a, out),
        Command::Calibrate(a) => calibrate(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Infer(a) => infer(a, out),
        Command::Analyze(a) => analyze(a, out),
        Command::Flops(a) => flops(a, env, out),
    }
}

fn load_config(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let overrides = RunConfig::env_overrides(env)?;
    RunConfig::parse_with_overrides(&text, overrides)
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SynthSpec {
        classes: a.classes,
        samples: a.samples,
        image_size: a.image_size,
        channels: a.channels,
        seed: a.seed,
        task: match a.task {
            TaskArg::Shapes => Task::Shapes,
            TaskArg::Blobs => Task::Blobs,
        },
        ..SynthSpec::default()
    };
    let data = synth_dataset(&spec)?;
    data.save(&a.out)?;
    let n = data.len();
    writeln!(out, "samples,train,val,classes,image_size,channels,task").map_err(io)?;
    writeln!(
        out,
        "{n},{},{},{},{},{},{}",
        train_len(n),
        n - train_len(n),
        spec.classes,
        spec.image_size,
        spec.channels,
        spec.task
    )
    .map_err(io)
}

fn train(a: TrainArgs, env: impl IntoIterator<Item = (String, String)>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), env)?;
    let data = Dataset::load(&a.data)?;
    let mut model = DynAdapterModel::init(cfg.model.clone(), cfg.seed)?;
    check_compatible(&model, &data)?;
    let train = nonempty(select(&data, Split::Train), Split::Train)?;
    if cfg.pretrain.epochs > 0 {
        let surrogate = synth_dataset(&SynthSpec {
            classes: cfg.model.num_classes.max(2),
            samples: train.len().max(64),
            image_size: cfg.model.image_size,
            channels: cfg.model.channels,
            seed: cfg.seed.wrapping_add(0x5eed),
            task: Task::Blobs,
            ..SynthSpec::default()
        })?;
        pretrain_backbone(
            &mut model,
            &surrogate,
            cfg.pretrain.epochs,
            cfg.pretrain.alpha,
            cfg.train.batch_size,
            cfg.seed,
        )?;
    }
    let header = epoch_header(model.stages());
    writeln!(out, "{header}").map_err(io)?;
    let mut rows = vec![header];
    let mut write_err = None;
    fit(&mut model, &train, &cfg.train, |m| {
        let row = epoch_row(m);
        if let Err(e) = writeln!(out, "{row}") {
            write_err.get_or_insert(e);
        }
        rows.push(row);
    })?;
    if let Some(e) = write_err {
        return Err(io(e));
    }
    save_checkpoint(&model, &a.out)?;
    if let Some(path) = &a.metrics {
        let mut text = rows.join("\n");
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
    }
    Ok(())
}

const DEVIATION_SAMPLES: usize = 64;

fn fuse(a: FuseArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let fused = model.fuse()?;
    let images = match &a.data {
        Some(p) => {
            let data = Dataset::load(p)?;
            check_compatible(&model, &data)?;
            let val = select(&data, Split::Val);
            let n = val.len().min(DEVIATION_SAMPLES);
            nonempty(val.slice(0, n), Split::Val)?.all().0
        }
        None => {
            let c = model.config();
            let mut rng = Streams::new(0).stream("deviation");
            Tensor::from_fn(&[DEVIATION_SAMPLES, c.image_size, c.image_size, c.channels], |_| {
                normal(&mut rng) as f32
            })
        }
    };
    let mut deviation = 0.0f32;
    for (x, y) in model.logits_all(&images)?.iter().zip(fused.logits_all(&images)?) {
        deviation = deviation.max(x.max_abs_diff(&y));
    }
    save_checkpoint(&fused, &a.out)?;
    writeln!(out, "samples,max_deviation").map_err(io)?;
    writeln!(out, "{},{deviation:.3e}", images.dims()[0]).map_err(io)
}

fn calibrate(a: CalibrateArgs, out: &mut dyn Write) -> Result<()> {
    let model = fused(load_checkpoint(&a.checkpoint)?)?;
    let data = Dataset::load(&a.data)?;
    check_compatible(&model, &data)?;
    let set = nonempty(select(&data, a.split), a.split)?;
    let c = calibrate_threshold(&model, &set.all().0, a.budget)?;
    let text = format!(
        "# calibrated on {} samples for budget {}, achieved {:.6}\n{}",
        set.len(),
        a.budget,
        c.achieved,
        c.policy.render()
    );
    write_atomic(&a.out, text.as_bytes())?;
    writeln!(out, "budget,tau,achieved,within_tolerance,unreachable").map_err(io)?;
    writeln!(
        out,
        "{},{},{:.6},{},{}",
        a.budget,
        c.tau,
        c.achieved,
        c.within_tolerance,
        c.unreachable
    )
    .map_err(io)
}

struct Evaluated {
    model: DynAdapterModel,
    set: Dataset,
    records: Vec<dynadapter::inference::ExitRecord>,
}

fn evaluate(a: &EvalArgs) -> Result<Evaluated> {
    let model = fused(load_checkpoint(&a.checkpoint)?)?;
    let data = Dataset::load(&a.data)?;
    check_compatible(&model, &data)?;
    let policy = read_policy(a, model.stages())?;
    let set = nonempty(select(&data, a.split), a.split)?;
    let records = infer_batch(&model, &set.all().0, &policy)?;
    Ok(Evaluated { model, set, records })
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let e = evaluate(&a)?;
    let s = e.model.stages();
    let labels = e.set.labels();
    let m = stage_accuracy_report(&e.records, &labels, s)?;
    let f = FlopsModel::for_model(&e.model);
    let summary = average_flops(&e.records, s)?;
    writeln!(out, "stage,exits,exit_probability,accuracy,flops_fraction").map_err(io)?;
    for i in 0..s {
        let acc = m.stage_accuracy[i].map_or_else(|| "nan".to_string(), |v| format!("{v:.4}"));
        writeln!(
            out,
            "{},{},{:.4},{acc},{:.4}",
            i + 1,
            summary.histogram[i],
            m.exit_probability[i],
            f.fraction(i + 1)
        )
        .map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    writeln!(out, "samples,accuracy,mean_flops,flops_fraction").map_err(io)?;
    writeln!(
        out,
        "{},{:.4},{:.0},{:.4}",
        e.records.len(),
        m.final_accuracy,
        summary.mean,
        summary.mean / f.full() as f64
    )
    .map_err(io)
}

fn infer(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let e = evaluate(&a)?;
    writeln!(out, "sample,exit_stage,confidence,prediction,label,flops").map_err(io)?;
    for r in &e.records {
        writeln!(
            out,
            "{},{},{:.6},{},{},{}",
            r.sample,
            r.exit_stage,
            r.confidence,
            r.prediction,
            e.set.label(r.sample),
            r.flops
        )
        .map_err(io)?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    check_compatible(&model, &data)?;
    let set = nonempty(select(&data, a.split), a.split)?;
    let (images, labels) = set.all();
    let pooling = match a.pooling {
        PoolingArg::Cls => Pooling::ClassToken,
        PoolingArg::Mean => Pooling::MeanTokens,
    };
    let source = match a.source {
        SourceArg::Adapted => FeatureSource::Adapted,
        SourceArg::Backbone => FeatureSource::Backbone,
    };
    let report = label_cka_profile(&model, &images, &labels, pooling, source)?;
    writeln!(out, "block,stage,cka,degenerate").map_err(io)?;
    for (l, (v, d)) in report.values.iter().zip(&report.degenerate).enumerate() {
        writeln!(out, "{},{},{v:.6},{d}", l + 1, model.stage_of_block(l + 1)).map_err(io)?;
    }
    Ok(())
}

fn flops(a: FlopsArgs, env: impl IntoIterator<Item = (String, String)>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), env)?;
    let f = if a.unfused {
        FlopsModel::unfused(&cfg.model)
    } else {
        FlopsModel::backbone(&cfg.model)
    };
    writeln!(out, "stage,blocks,cumulative_flops,fraction").map_err(io)?;
    for i in 1..=f.stages() {
        writeln!(out, "{i},{},{},{:.4}", i * f.interval, f.cost(i), f.fraction(i)).map_err(io)?;
    }
    Ok(())
}

/// The single error line printed on failure.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error[{}]: {msg}", e.category())
}
