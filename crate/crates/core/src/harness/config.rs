use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classify::{Route, SvmConfig};
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::transfer::{FinetuneConfig, VariantKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SourceCompare,
    ArchCompare,
    SvmVsSoftmax,
    InitCompare,
    FullPipeline,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::SourceCompare,
        ExperimentKind::ArchCompare,
        ExperimentKind::SvmVsSoftmax,
        ExperimentKind::InitCompare,
        ExperimentKind::FullPipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SourceCompare => "source_compare",
            ExperimentKind::ArchCompare => "arch_compare",
            ExperimentKind::SvmVsSoftmax => "svm_vs_softmax",
            ExperimentKind::InitCompare => "init_compare",
            ExperimentKind::FullPipeline => "full_pipeline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// Where videos come from. `Target` is only meaningful as a GAN source and
/// stands for the training split of the experiment's own dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SynthConfig),
    Directory(PathBuf),
    Target,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SynthConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub name: String,
    pub dataset: DatasetSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    pub kind: VariantKind,
    #[serde(default = "yes")]
    pub dropout: bool,
}

fn yes() -> bool {
    true
}

impl VariantSpec {
    pub fn new(kind: VariantKind) -> Self {
        Self { kind, dropout: true }
    }

    /// Tag used in report rows and stage labels.
    pub fn tag(&self) -> String {
        if self.dropout {
            self.kind.name().to_string()
        } else {
            format!("{}_nodrop", self.kind.name())
        }
    }
}

fn default_variants() -> Vec<VariantSpec> {
    VariantKind::ALL.into_iter().map(VariantSpec::new).collect()
}

fn default_variant() -> VariantSpec {
    VariantSpec::new(VariantKind::Conv4PlusConv5Fc)
}

/// One experiment. Unset fields take the desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    /// Labeled target dataset: split into train and test videos.
    pub dataset: DatasetSpec,
    /// Second target with a skewed label distribution (svm_vs_softmax).
    /// Defaults to the synthetic dataset with per-class counts falling
    /// linearly from `videos_per_class` to a fifth of it.
    pub imbalanced: Option<DatasetSpec>,
    /// GAN training sets for source_compare.
    pub sources: Vec<SourceSpec>,
    pub train_fraction: f64,
    pub split_seed: u64,
    /// Frame sampling rate in frames per second.
    pub frame_rate: f64,
    pub gan: GanConfig,
    pub finetune: FinetuneConfig,
    pub svm: SvmConfig,
    /// Architectures compared by arch_compare.
    pub variants: Vec<VariantSpec>,
    /// Architecture used by every other experiment.
    pub variant: VariantSpec,
    /// Evaluation route for experiments that report a single route.
    pub route: Route,
    /// Each seed reseeds GAN training, new-layer init, fine-tuning and SVM.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Stage artifact directory; defaults to `{output_dir}/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::FullPipeline,
            dataset: DatasetSpec::default(),
            imbalanced: None,
            sources: Vec::new(),
            train_fraction: 0.8,
            split_seed: 0,
            frame_rate: 1.0,
            gan: GanConfig::default(),
            finetune: FinetuneConfig::default(),
            svm: SvmConfig::default(),
            variants: default_variants(),
            variant: default_variant(),
            route: Route::Svm,
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
            cache_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn cache_root(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train_fraction must be in (0,1), got {}", self.train_fraction)));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::Config(format!("frame_rate must be positive, got {}", self.frame_rate)));
        }
        if matches!(self.dataset, DatasetSpec::Target) {
            return Err(Error::Config("the target dataset cannot refer to itself".into()));
        }
        self.gan.validate()?;
        self.finetune.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.svm.c > 0.0) || self.svm.epochs == 0 {
            return Err(Error::Config("svm needs c > 0 and epochs ≥ 1".into()));
        }
        match self.kind {
            ExperimentKind::SourceCompare if self.sources.len() < 2 => {
                Err(Error::Config(format!("source_compare needs at least 2 sources, got {}", self.sources.len())))
            }
            ExperimentKind::ArchCompare if self.variants.is_empty() => {
                Err(Error::Config("arch_compare needs at least one variant".into()))
            }
            ExperimentKind::SvmVsSoftmax
                if self.imbalanced.is_none() && !matches!(self.dataset, DatasetSpec::Synthetic(_)) =>
            {
                Err(Error::Config("svm_vs_softmax on a directory dataset needs an explicit `imbalanced` dataset".into()))
            }
            _ => Ok(()),
        }
    }

    /// The skewed second target of svm_vs_softmax.
    pub fn imbalanced_dataset(&self) -> Result<DatasetSpec> {
        if let Some(d) = &self.imbalanced {
            return Ok(d.clone());
        }
        let DatasetSpec::Synthetic(base) = &self.dataset else {
            return Err(Error::Config("no imbalanced dataset configured".into()));
        };
        let k = base.num_classes;
        let top = base.videos_per_class;
        let low = (top / 5).max(2);
        let counts = (0..k)
            .map(|i| if k == 1 { top } else { top - (top - low.min(top)) * i / (k - 1) })
            .collect();
        Ok(DatasetSpec::Synthetic(SynthConfig {
            class_counts: Some(counts),
            seed: crate::tensor::rng::derive_seed(base.seed, "imbalanced"),
            ..base.clone()
        }))
    }
}
