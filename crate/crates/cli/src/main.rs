use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use framegan::classify::{evaluate_softmax, svm_predict, svm_train, EvalReport, Route, SvmConfig};
use framegan::data::{
    generate_synthetic_actions, load_frame_directory, read_split, save_dataset, synthetic_class_names, FrameDataset,
    SynthConfig,
};
use framegan::gan::{sample_grid, train_gan, Gan, GanConfig};
use framegan::harness::{report_csv, confusion_csv, ExperimentConfig, ExperimentKind, ReportRow, Runner};
use framegan::tensor::Checkpoint;
use framegan::transfer::{
    concat_features, dataset_features, finetune, pool_video_feature, surgery, xavier_classifier, ClassifierNet,
    ClassifierVariant, FeatureMatrix, FinetuneConfig, VariantKind,
};
use framegan::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "framegan", version, about = "GAN pre-training and transfer for frame-based action recognition")]
struct Cli {
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic action dataset directory.
    GenData,
    /// Train a GAN on the frames of a dataset directory.
    GanTrain(DataArgs),
    /// Fine-tune a classifier built from a GAN checkpoint (or xavier init).
    Finetune(FinetuneArgs),
    /// Extract named-layer features to CSV.
    Features(FeatureArgs),
    /// Train a linear SVM on a feature CSV and evaluate it on another.
    Svm(SvmArgs),
    /// Video-level softmax evaluation of a classifier.
    Eval(EvalArgs),
    /// Run one of the experiment matrices.
    Experiment(ExperimentArgs),
    /// Write a grid of generator samples as a PPM image.
    SampleGrid(GridArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    data: PathBuf,
    /// Split file; only videos of `partition` are used.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Partition::Train)]
    partition: Partition,
    /// Frames sampled per second of video.
    #[arg(long, default_value_t = 1.0)]
    frame_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Partition {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Variant {
    #[value(name = "CONV4_REPLACE")]
    Conv4Replace,
    #[value(name = "CONV4_PLUS_CONV5")]
    Conv4PlusConv5,
    #[value(name = "CONV4_PLUS_CONV5_FC")]
    Conv4PlusConv5Fc,
}

impl From<Variant> for VariantKind {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Conv4Replace => VariantKind::Conv4Replace,
            Variant::Conv4PlusConv5 => VariantKind::Conv4PlusConv5,
            Variant::Conv4PlusConv5Fc => VariantKind::Conv4PlusConv5Fc,
        }
    }
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    /// GAN checkpoint; without it every layer is xavier-initialized.
    #[arg(long)]
    gan: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Variant::Conv4PlusConv5Fc)]
    variant: Variant,
    #[arg(long)]
    no_dropout: bool,
    /// CONV1 width of the xavier baseline (ignored with --gan).
    #[arg(long, default_value_t = 64)]
    base_channels: usize,
}

#[derive(Args, Debug)]
struct FeatureArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    classifier: PathBuf,
    /// Layer to read; repeat to concatenate several.
    #[arg(long, default_values_t = vec!["CONV4".to_string()])]
    layer: Vec<String>,
    /// Write one row per frame instead of per-video means.
    #[arg(long)]
    frames: bool,
}

#[derive(Args, Debug)]
struct SvmArgs {
    /// Training feature CSV (`video_id,label,f0,...`).
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    classifier: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(value_parser = parse_kind)]
    kind: ExperimentKind,
    /// Print stage progress.
    #[arg(long)]
    verbose: bool,
}

fn parse_kind(s: &str) -> std::result::Result<ExperimentKind, String> {
    ExperimentKind::parse(s).ok_or_else(|| {
        let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown experiment `{s}`; expected one of {}", names.join(", "))
    })
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    gan: PathBuf,
    #[arg(long, default_value_t = 8)]
    rows: usize,
    #[arg(long, default_value_t = 8)]
    cols: usize,
}

fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn write(path: &Path, body: String) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
    }
    fs::write(path, body).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn load_frames(args: &DataArgs) -> Result<FrameDataset> {
    let dir = load_frame_directory(&args.data)?;
    let keep = match (&args.split, args.partition) {
        (Some(path), Partition::Train) => Some(read_split(path, 0)?.train),
        (Some(path), Partition::Test) => Some(read_split(path, 0)?.test),
        _ => None,
    };
    FrameDataset::from_videos(&dir.videos, keep.as_deref(), args.frame_rate, &dir.class_names)
}

fn load_classifier(path: &Path) -> Result<ClassifierNet> {
    ClassifierNet::from_checkpoint(&Checkpoint::load(path)?)
}

fn write_report(out: &Path, report: EvalReport, experiment: &str, seed: u64) -> Result<()> {
    let row = ReportRow {
        experiment: experiment.into(),
        split: "test".into(),
        arm: "-".into(),
        variant: "-".into(),
        seed,
        feature_dim: 0,
        report,
        wall_time_seconds: 0.0,
    };
    write(&out.join("report.csv"), report_csv(std::slice::from_ref(&row)))?;
    write(&out.join("confusion.csv"), confusion_csv(std::slice::from_ref(&row)))?;
    println!("{} accuracy {:.4}", row.report.route.name(), row.report.accuracy);
    Ok(())
}

fn labels_of(m: &FeatureMatrix, path: &Path) -> Result<Vec<usize>> {
    m.labels
        .iter()
        .zip(&m.ids)
        .map(|(l, id)| l.ok_or_else(|| Error::Data(format!("{}: video {id} has no label", path.display()))))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::GenData => {
            let mut c: SynthConfig = load_json(config)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            let out = require_out(&cli.out)?;
            let videos = generate_synthetic_actions(&c)?;
            save_dataset(&videos, &synthetic_class_names(c.num_classes), out)?;
            println!("wrote {} videos to {}", videos.len(), out.display());
        }
        Command::GanTrain(args) => {
            let mut c: GanConfig = load_json(config)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            c.validate()?;
            let out = require_out(&cli.out)?;
            let frames = load_frames(&args)?;
            let (_, log) = train_gan(&frames, &c, Some(out))?;
            if let Some(e) = log.last_epoch() {
                let d = log.epoch_mean(e, |s| s.d_loss).unwrap_or(f64::NAN);
                println!("trained {} steps; final epoch mean d_loss {d:.4}", log.records.len());
            }
        }
        Command::Finetune(args) => {
            let mut c: FinetuneConfig = load_json(config)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            c.validate()?;
            let out = require_out(&cli.out)?;
            let frames = load_frames(&args.data)?;
            let variant = ClassifierVariant {
                kind: args.variant.into(),
                dropout_enabled: !args.no_dropout,
                num_classes: frames.num_classes(),
            };
            let init = match &args.gan {
                Some(path) => surgery(&Checkpoint::load(path)?, variant, c.seed)?,
                None => {
                    let backbone = GanConfig { base_channels: args.base_channels, ..GanConfig::default() }.discriminator_spec();
                    xavier_classifier(&backbone, variant, c.seed)?
                }
            };
            let (net, log) = finetune(&init, &frames, &c)?;
            net.to_checkpoint().save(&out.join("classifier.dnet"))?;
            write(&out.join("finetune_log.csv"), log.to_csv())?;
            if let Some(l) = log.epoch_loss.last() {
                println!("final epoch train loss {l:.4}");
            }
        }
        Command::Features(args) => {
            let out = require_out(&cli.out)?;
            let net = load_classifier(&args.classifier)?;
            let frames = load_frames(&args.data)?;
            let mut acc: Option<FeatureMatrix> = None;
            for layer in &args.layer {
                let mut f = dataset_features(&net, &frames, layer, 64)?;
                if !args.frames {
                    f = pool_video_feature(&f)?;
                }
                acc = Some(match acc {
                    None => f,
                    Some(a) => concat_features(&a, &f)?,
                });
            }
            let m = acc.ok_or_else(|| Error::Config("at least one --layer is required".into()))?;
            m.write_csv(out)?;
            println!("wrote {} rows of dimension {} to {}", m.rows(), m.dim, out.display());
        }
        Command::Svm(args) => {
            let mut c: SvmConfig = load_json(config)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            let out = require_out(&cli.out)?;
            let train = FeatureMatrix::read_csv(&args.train)?;
            let test = FeatureMatrix::read_csv(&args.test)?;
            let y = labels_of(&train, &args.train)?;
            let k = y.iter().max().map_or(0, |m| m + 1);
            let names: Vec<String> = (0..k).map(|i| format!("class{i}")).collect();
            let model = svm_train(&train.to_tensor()?, &y, &names, &c)?;
            model.write(&out.join("svm_model.bin"))?;
            let pred = svm_predict(&model, &test.to_tensor()?)?;
            let report = EvalReport::new(Route::Svm, test.ids.clone(), pred, labels_of(&test, &args.test)?, k)?;
            write_report(out, report, "svm", c.seed)?;
        }
        Command::Eval(args) => {
            let out = require_out(&cli.out)?;
            let net = load_classifier(&args.classifier)?;
            let report = evaluate_softmax(&net, &load_frames(&args.data)?)?;
            write_report(out, report, "eval", 0)?;
        }
        Command::Experiment(args) => {
            let path = config.ok_or_else(|| Error::Config("experiment needs --config <file>".into()))?;
            let mut c = ExperimentConfig::load(path)?;
            c.kind = args.kind;
            if let Some(s) = cli.seed {
                c.seeds = vec![s];
            }
            if let Some(o) = cli.out {
                c.output_dir = o;
            }
            let result = Runner::new(c)?.with_progress(args.verbose).run()?;
            for r in &result.rows {
                println!("{} {} {} seed {} {}: {:.4}", r.split, r.arm, r.variant, r.seed, r.route().name(), r.accuracy());
            }
            println!("wrote {}", result.output_dir.join("report.csv").display());
        }
        Command::SampleGrid(args) => {
            let out = require_out(&cli.out)?;
            let gan = Gan::from_checkpoint(&Checkpoint::load(&args.gan)?, &GanConfig::default())?;
            sample_grid(&gan, args.rows, args.cols, cli.seed.unwrap_or(0))?.write_ppm(out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() || matches!(e, Error::InvalidParameter(_)) {
                1
            } else if e.is_numeric() {
                3
            } else {
                2
            })
        }
    }
}
