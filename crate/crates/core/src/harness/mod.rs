//! Experiment runner: seeded, cached, reportable pipelines comparing GAN
//! sources, classifier architectures, evaluation routes and initializations.

mod cache;
mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use cache::{canonical_json, config_hash, StageCache, StageDir};
pub use config::{DatasetSpec, ExperimentConfig, ExperimentKind, SourceSpec, VariantSpec};
pub use report::{confusion_csv, mean_accuracies, report_csv, summary_csv, timings_csv, write_reports, ReportRow};

use crate::classify::{evaluate_softmax, evaluate_svm, EvalReport, Route, SvmConfig};
use crate::data::{
    generate_synthetic_actions, load_frame_directory, split_dataset, synthetic_class_names, write_split, FrameDataset,
    Split, Video,
};
use crate::error::{Error, Result};
use crate::gan::{sample_grid, train_gan, Gan, GanConfig};
use crate::tensor::{rng, Checkpoint};
use crate::transfer::{
    concat_features, dataset_features, finetune, pool_video_feature, surgery, xavier_classifier, ClassifierNet,
    ClassifierVariant, FeatureMatrix, FinetuneConfig, VariantKind,
};

const CHUNK: usize = 64;

/// Videos and class names of a dataset spec.
pub fn load_videos(spec: &DatasetSpec) -> Result<(Vec<Video>, Vec<String>)> {
    match spec {
        DatasetSpec::Synthetic(c) => Ok((generate_synthetic_actions(c)?, synthetic_class_names(c.num_classes))),
        DatasetSpec::Directory(dir) => {
            let d = load_frame_directory(dir)?;
            Ok((d.videos, d.class_names))
        }
        DatasetSpec::Target => Err(Error::Config("`target` is only valid as a GAN source".into())),
    }
}

/// Hashable identity of a dataset: the generator config, or the directory
/// plus a digest of its manifest.
fn dataset_key(spec: &DatasetSpec) -> Result<Value> {
    Ok(match spec {
        DatasetSpec::Directory(dir) => {
            let m = dir.join("manifest.csv");
            let bytes = fs::read(&m).map_err(|e| Error::io(&m, e))?;
            let digest: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
            json!({ "directory": dir, "manifest_sha256": digest })
        }
        other => serde_json::to_value(other).map_err(|e| Error::Config(e.to_string()))?,
    })
}

/// SVM inputs of a variant: CONV4, or CONV4 and CONV5 side by side for the
/// variant whose head is CONV5.
pub fn svm_layers(kind: VariantKind) -> &'static [&'static str] {
    match kind {
        VariantKind::Conv4PlusConv5 => &["CONV4", "CONV5"],
        _ => &["CONV4"],
    }
}

/// Video-level features of `data` at the concatenation of `layers`.
pub fn video_features(net: &ClassifierNet, data: &FrameDataset, layers: &[&str]) -> Result<FeatureMatrix> {
    let mut out: Option<FeatureMatrix> = None;
    for layer in layers {
        let f = pool_video_feature(&dataset_features(net, data, layer, CHUNK)?)?;
        out = Some(match out {
            None => f,
            Some(acc) => concat_features(&acc, &f)?,
        });
    }
    out.ok_or_else(|| Error::Contract("no feature layers requested".into()))
}

/// A labeled dataset split into train and test frames.
pub struct Target {
    pub name: String,
    pub key: Value,
    pub class_names: Vec<String>,
    pub split: Split,
    pub train: FrameDataset,
    pub test: FrameDataset,
}

impl Target {
    pub fn load(name: &str, spec: &DatasetSpec, config: &ExperimentConfig) -> Result<Self> {
        let (videos, class_names) = load_videos(spec)?;
        let split = split_dataset(&videos, config.train_fraction, config.split_seed)?;
        let train = FrameDataset::from_videos(&videos, Some(&split.train), config.frame_rate, &class_names)?;
        let test = FrameDataset::from_videos(&videos, Some(&split.test), config.frame_rate, &class_names)?;
        let key = json!({
            "dataset": dataset_key(spec)?,
            "train_fraction": config.train_fraction,
            "split_seed": config.split_seed,
            "frame_rate": config.frame_rate,
        });
        Ok(Self { name: name.to_string(), key, class_names, split, train, test })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Rows of a finished experiment and where its files went.
#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub rows: Vec<ReportRow>,
    pub output_dir: PathBuf,
}

pub struct Runner {
    pub config: ExperimentConfig,
    cache: StageCache,
    progress: bool,
}

impl Runner {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let cache = StageCache::new(config.cache_root());
        Ok(Self { config, cache, progress: false })
    }

    /// Print stage progress to stderr.
    pub fn with_progress(mut self, on: bool) -> Self {
        self.progress = on;
        self
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.progress {
            eprintln!("[{}] {}", self.config.kind.name(), msg.as_ref());
        }
    }

    pub fn cache(&self) -> &StageCache {
        &self.cache
    }

    pub fn run(&self) -> Result<ExperimentResult> {
        let out = self.config.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let cfg_path = out.join("config.json");
        fs::write(&cfg_path, canonical_json(&self.config)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        let primary = Target::load("balanced", &self.config.dataset, &self.config)?;
        write_split(&primary.split, &out.join("split.csv"))?;
        let rows = match self.config.kind {
            ExperimentKind::InitCompare => self.init_compare(&primary)?,
            ExperimentKind::ArchCompare => self.arch_compare(&primary)?,
            ExperimentKind::SvmVsSoftmax => {
                let skewed = Target::load("imbalanced", &self.config.imbalanced_dataset()?, &self.config)?;
                write_split(&skewed.split, &out.join("split_imbalanced.csv"))?;
                self.svm_vs_softmax(&primary, &skewed)?
            }
            ExperimentKind::SourceCompare => self.source_compare(&primary)?,
            ExperimentKind::FullPipeline => self.full_pipeline(&primary)?,
        };
        write_reports(&rows, &out)?;
        Ok(ExperimentResult { rows, output_dir: out })
    }

    fn gan_config(&self, seed: u64) -> GanConfig {
        GanConfig { seed, ..self.config.gan.clone() }
    }

    fn finetune_config(&self, seed: u64) -> FinetuneConfig {
        FinetuneConfig { seed, ..self.config.finetune.clone() }
    }

    fn svm_config(&self, seed: u64) -> SvmConfig {
        SvmConfig { seed, ..self.config.svm.clone() }
    }

    /// Trains (or reuses) a GAN on `frames`; returns its checkpoint and the
    /// stage directory holding `gan.dnet` and `train_log.csv`.
    pub fn gan_stage(&self, label: &str, data_key: &Value, frames: &FrameDataset, seed: u64) -> Result<(Checkpoint, StageDir)> {
        let cfg = self.gan_config(seed);
        let key = json!({ "stage": "gan", "data": data_key, "gan": cfg });
        let stage = self.cache.run(label, &key, &["gan.dnet", "train_log.csv"], |dir| {
            self.note(format!("training GAN `{label}` on {} frames", frames.len()));
            train_gan(frames, &cfg, Some(dir)).map(|_| ())
        })?;
        if stage.reused {
            self.note(format!("reusing GAN `{label}`"));
        }
        Ok((Checkpoint::load(&stage.dir.join("gan.dnet"))?, stage))
    }

    fn primary_gan(&self, target: &Target, seed: u64) -> Result<(Checkpoint, StageDir)> {
        let key = json!({ "target": target.key, "part": "train" });
        self.gan_stage(&format!("gan-seed{seed}"), &key, &target.train, seed)
    }

    /// Fine-tunes `init()` on the target's training frames, or reloads the
    /// result of an identical earlier run.
    fn finetune_stage(
        &self,
        label: &str,
        init_key: Value,
        target: &Target,
        seed: u64,
        init: impl FnOnce() -> Result<ClassifierNet>,
    ) -> Result<(ClassifierNet, StageDir)> {
        let cfg = self.finetune_config(seed);
        let key = json!({ "stage": "finetune", "init": init_key, "target": target.key, "finetune": cfg });
        let stage = self.cache.run(label, &key, &["classifier.dnet", "finetune_log.csv"], |dir| {
            self.note(format!("fine-tuning `{label}` on {} frames", target.train.len()));
            let (net, log) = finetune(&init()?, &target.train, &cfg)?;
            net.to_checkpoint().save(&dir.join("classifier.dnet"))?;
            let p = dir.join("finetune_log.csv");
            fs::write(&p, log.to_csv()).map_err(|e| Error::io(&p, e))
        })?;
        if stage.reused {
            self.note(format!("reusing fine-tuned `{label}`"));
        }
        let net = ClassifierNet::from_checkpoint(&Checkpoint::load(&stage.dir.join("classifier.dnet"))?)?;
        Ok((net, stage))
    }

    fn variant(&self, spec: &VariantSpec, target: &Target) -> ClassifierVariant {
        ClassifierVariant { kind: spec.kind, dropout_enabled: spec.dropout, num_classes: target.num_classes() }
    }

    /// Pretrained classifier for `spec` fine-tuned on `target`.
    fn pretrained_arm(
        &self,
        gan: &(Checkpoint, StageDir),
        spec: &VariantSpec,
        target: &Target,
        seed: u64,
        label: &str,
    ) -> Result<ClassifierNet> {
        let variant = self.variant(spec, target);
        let head_seed = rng::derive_seed(seed, "head");
        let init_key = json!({ "from": "gan", "gan": gan.1.hash, "variant": spec, "seed": head_seed });
        self.finetune_stage(label, init_key, target, seed, || surgery(&gan.0, variant, head_seed)).map(|r| r.0)
    }

    fn xavier_arm(&self, spec: &VariantSpec, target: &Target, seed: u64, label: &str) -> Result<ClassifierNet> {
        let variant = self.variant(spec, target);
        let backbone = self.config.gan.discriminator_spec();
        let init_seed = rng::derive_seed(seed, "xavier");
        let init_key = json!({ "from": "xavier", "backbone": self.config.gan.base_channels,
            "slope": self.config.gan.leaky_slope, "variant": spec, "seed": init_seed });
        self.finetune_stage(label, init_key, target, seed, || xavier_classifier(&backbone, variant, init_seed)).map(|r| r.0)
    }

    /// Evaluates `net` on the target's test videos. With `artifacts`, the SVM
    /// route also writes its feature matrices and model there.
    pub fn evaluate(
        &self,
        net: &ClassifierNet,
        target: &Target,
        route: Route,
        seed: u64,
        artifacts: Option<&Path>,
    ) -> Result<(EvalReport, usize)> {
        match route {
            Route::Softmax => Ok((evaluate_softmax(net, &target.test)?, 0)),
            Route::Svm => {
                let layers = svm_layers(net.variant.kind);
                let train = video_features(net, &target.train, layers)?;
                let test = video_features(net, &target.test, layers)?;
                let (model, report) = evaluate_svm(&train, &test, &target.class_names, &self.svm_config(seed))?;
                if let Some(dir) = artifacts {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    train.write_csv(&dir.join("features_train.csv"))?;
                    test.write_csv(&dir.join("features_test.csv"))?;
                    model.write(&dir.join("svm_model.bin"))?;
                }
                Ok((report, train.dim))
            }
        }
    }

    fn row(
        &self,
        target: &Target,
        arm: &str,
        variant: &VariantSpec,
        seed: u64,
        eval: (EvalReport, usize),
        started: Instant,
    ) -> ReportRow {
        ReportRow {
            experiment: self.config.kind.name().to_string(),
            split: target.name.clone(),
            arm: arm.to_string(),
            variant: variant.tag(),
            seed,
            feature_dim: eval.1,
            report: eval.0,
            wall_time_seconds: started.elapsed().as_secs_f64(),
        }
    }

    fn init_compare(&self, target: &Target) -> Result<Vec<ReportRow>> {
        let v = &self.config.variant;
        let route = self.config.route;
        let mut rows = Vec::new();
        for &seed in &self.config.seeds {
            let t = Instant::now();
            let gan = self.primary_gan(target, seed)?;
            let net = self.pretrained_arm(&gan, v, target, seed, &format!("ft-{}-pretrained-{}-seed{seed}", target.name, v.tag()))?;
            rows.push(self.row(target, "pretrained", v, seed, self.evaluate(&net, target, route, seed, None)?, t));
            let t = Instant::now();
            let net = self.xavier_arm(v, target, seed, &format!("ft-{}-xavier-{}-seed{seed}", target.name, v.tag()))?;
            rows.push(self.row(target, "xavier", v, seed, self.evaluate(&net, target, route, seed, None)?, t));
        }
        Ok(rows)
    }

    fn arch_compare(&self, target: &Target) -> Result<Vec<ReportRow>> {
        let mut rows = Vec::new();
        for &seed in &self.config.seeds {
            let gan = self.primary_gan(target, seed)?;
            for v in &self.config.variants {
                let t = Instant::now();
                let label = format!("ft-{}-pretrained-{}-seed{seed}", target.name, v.tag());
                let net = self.pretrained_arm(&gan, v, target, seed, &label)?;
                rows.push(self.row(target, "pretrained", v, seed, self.evaluate(&net, target, Route::Svm, seed, None)?, t));
            }
        }
        Ok(rows)
    }

    fn svm_vs_softmax(&self, balanced: &Target, imbalanced: &Target) -> Result<Vec<ReportRow>> {
        let v = &self.config.variant;
        let mut rows = Vec::new();
        for &seed in &self.config.seeds {
            let gan = self.primary_gan(balanced, seed)?;
            for target in [balanced, imbalanced] {
                let t = Instant::now();
                let label = format!("ft-{}-pretrained-{}-seed{seed}", target.name, v.tag());
                let net = self.pretrained_arm(&gan, v, target, seed, &label)?;
                for route in [Route::Svm, Route::Softmax] {
                    rows.push(self.row(target, "pretrained", v, seed, self.evaluate(&net, target, route, seed, None)?, t));
                }
            }
        }
        Ok(rows)
    }

    fn source_compare(&self, target: &Target) -> Result<Vec<ReportRow>> {
        let v = &self.config.variant;
        let mut sources = Vec::new();
        for s in &self.config.sources {
            sources.push(match &s.dataset {
                DatasetSpec::Target => (s.name.clone(), None),
                spec => {
                    let (videos, names) = load_videos(spec)?;
                    let frames = FrameDataset::from_videos(&videos, None, self.config.frame_rate, &names)?;
                    let key = json!({ "dataset": dataset_key(spec)?, "frame_rate": self.config.frame_rate, "part": "all" });
                    (s.name.clone(), Some((frames, key)))
                }
            });
        }
        let mut rows = Vec::new();
        for &seed in &self.config.seeds {
            for (name, data) in &sources {
                let t = Instant::now();
                let gan = match data {
                    None => self.primary_gan(target, seed)?,
                    Some((frames, key)) => self.gan_stage(&format!("gan-{name}-seed{seed}"), key, frames, seed)?,
                };
                let label = format!("ft-{}-{name}-{}-seed{seed}", target.name, v.tag());
                let net = self.pretrained_arm(&gan, v, target, seed, &label)?;
                rows.push(self.row(target, name, v, seed, self.evaluate(&net, target, self.config.route, seed, None)?, t));
            }
        }
        Ok(rows)
    }

    fn full_pipeline(&self, target: &Target) -> Result<Vec<ReportRow>> {
        let v = &self.config.variant;
        let mut rows = Vec::new();
        for &seed in &self.config.seeds {
            let t = Instant::now();
            let dir = self.config.output_dir.join(format!("seed{seed}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let gan = self.primary_gan(target, seed)?;
            let g = Gan::from_checkpoint(&gan.0, &self.gan_config(seed))?;
            let n = self.config.gan.sample_grid.max(1);
            sample_grid(&g, n, n, seed)?.write_ppm(&dir.join("samples.ppm"))?;
            let label = format!("ft-{}-pretrained-{}-seed{seed}", target.name, v.tag());
            let net = self.pretrained_arm(&gan, v, target, seed, &label)?;
            net.to_checkpoint().save(&dir.join("classifier.dnet"))?;
            rows.push(self.row(target, "pretrained", v, seed, self.evaluate(&net, target, Route::Svm, seed, Some(&dir))?, t));
            let t = Instant::now();
            rows.push(self.row(target, "pretrained", v, seed, self.evaluate(&net, target, Route::Softmax, seed, None)?, t));
        }
        Ok(rows)
    }
}

pub fn run_experiment(config: ExperimentConfig) -> Result<ExperimentResult> {
    Runner::new(config)?.run()
}
