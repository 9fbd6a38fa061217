//! Turning a trained discriminator into a classifier: surgery, xavier
//! baselines, supervised fine-tuning and named-layer features.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FrameDataset;
use crate::error::{Error, Result};
use crate::gan::{epoch_batches, DiscriminatorSpec, BACKBONE, DISCRIMINATOR_PREFIX};
use crate::nn::{init_block, named_gradients, Block, ForwardOpts, Init, Layer, Network, NetworkSpec};
use crate::tensor::{adam_step, rng, softmax_rows, Activation, AdamConfig, AdamState, Checkpoint, Graph, Tensor};

/// Dropout rate of the layers added by surgery.
pub const DROPOUT_P: f64 = 0.5;
const CLASSIFIER_PREFIX: &str = "classifier/";
/// Layers whose activations may be requested as features.
pub const FEATURE_LAYERS: [&str; 6] = ["CONV1", "CONV2", "CONV3", "CONV4", "CONV5", "FC"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum VariantKind {
    #[serde(rename = "CONV4_REPLACE")]
    Conv4Replace,
    #[serde(rename = "CONV4_PLUS_CONV5")]
    Conv4PlusConv5,
    #[serde(rename = "CONV4_PLUS_CONV5_FC")]
    Conv4PlusConv5Fc,
}

impl VariantKind {
    pub const ALL: [VariantKind; 3] = [VariantKind::Conv4Replace, VariantKind::Conv4PlusConv5, VariantKind::Conv4PlusConv5Fc];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Conv4Replace => "CONV4_REPLACE",
            VariantKind::Conv4PlusConv5 => "CONV4_PLUS_CONV5",
            VariantKind::Conv4PlusConv5Fc => "CONV4_PLUS_CONV5_FC",
        }
    }

    fn code(self) -> f64 {
        self as usize as f64
    }

    fn from_code(c: f64) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == c)
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierVariant {
    pub kind: VariantKind,
    pub dropout_enabled: bool,
    pub num_classes: usize,
}

impl ClassifierVariant {
    pub fn new(kind: VariantKind, num_classes: usize) -> Self {
        Self { kind, dropout_enabled: true, num_classes }
    }

    /// Blocks appended after CONV4.
    pub fn head_blocks(&self, spec: &DiscriminatorSpec) -> Result<Vec<Block>> {
        if self.num_classes < 2 {
            return Err(Error::ClassCount(format!("a classifier needs at least 2 classes, got {}", self.num_classes)));
        }
        let c = spec.top_channels();
        let k = self.num_classes;
        let dropout = |layers: &mut Vec<Layer>| {
            if self.dropout_enabled {
                layers.push(Layer::Dropout { p: DROPOUT_P });
            }
        };
        let logits = Block::new(
            "LOGITS",
            vec![
                Layer::Conv2d { in_channels: c, out_channels: k, kernel: 4, stride: 1, pad: 0, bias: true },
                Layer::Flatten,
            ],
        );
        let conv5 = || {
            let mut layers = vec![
                Layer::Conv2d { in_channels: c, out_channels: c, kernel: 3, stride: 1, pad: 1, bias: false },
                Layer::BatchNorm { channels: c },
                Layer::Activation(Activation::LeakyRelu { slope: spec.leaky_slope }),
            ];
            dropout(&mut layers);
            Block::new("CONV5", layers)
        };
        Ok(match self.kind {
            VariantKind::Conv4Replace => vec![logits],
            VariantKind::Conv4PlusConv5 => vec![conv5(), logits],
            VariantKind::Conv4PlusConv5Fc => {
                let mut layers = vec![Layer::Flatten, Layer::Linear { in_features: c * 16, out_features: k }];
                dropout(&mut layers);
                vec![conv5(), Block::new("FC", layers)]
            }
        })
    }

    pub fn network_spec(&self, spec: &DiscriminatorSpec) -> Result<NetworkSpec> {
        let mut blocks = spec.backbone_blocks()?;
        blocks.extend(self.head_blocks(spec)?);
        Ok(NetworkSpec { input_shape: vec![spec.input_channels, spec.input_size, spec.input_size], blocks })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GanPretrained,
    Xavier,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::GanPretrained => "gan_pretrained",
            Provenance::Xavier => "xavier",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierNet {
    pub variant: ClassifierVariant,
    pub provenance: Provenance,
    pub backbone: DiscriminatorSpec,
    pub network: Network,
}

/// Cuts the real/fake head off the discriminator stored in `ckpt`, keeps
/// CONV1..CONV4 bit for bit and appends freshly xavier-initialized layers.
pub fn surgery(ckpt: &Checkpoint, variant: ClassifierVariant, seed: u64) -> Result<ClassifierNet> {
    let meta = ckpt
        .get("meta/discriminator")
        .ok_or_else(|| Error::CheckpointIncompatible("checkpoint has no meta/discriminator record".into()))?;
    let backbone = DiscriminatorSpec::from_meta(meta)?;
    let spec = variant.network_spec(&backbone)?;
    let mut trunk = Checkpoint::new();
    for (name, t) in &ckpt.tensors {
        let in_backbone = name
            .strip_prefix(DISCRIMINATOR_PREFIX)
            .is_some_and(|rest| BACKBONE.iter().any(|b| rest.starts_with(&format!("{b}."))));
        if in_backbone {
            trunk.insert(name.clone(), t.clone());
        }
    }
    let backbone_spec = NetworkSpec { input_shape: spec.input_shape.clone(), blocks: backbone.backbone_blocks()? };
    let stored = Network::read_from(backbone_spec, &trunk, DISCRIMINATOR_PREFIX).map_err(|e| match e {
        Error::CheckpointIncompatible(m) => Error::CheckpointIncompatible(format!("discriminator backbone: {m}")),
        other => other,
    })?;
    let mut params = stored.params;
    let mut stats = stored.stats;
    for block in &spec.blocks[BACKBONE.len()..] {
        params.extend(init_block(block, Init::Xavier, seed)?);
        if let Some(Layer::BatchNorm { channels }) = block.layers.iter().find(|l| matches!(l, Layer::BatchNorm { .. })) {
            stats.insert(block.name.clone(), crate::tensor::RunningStats::new(*channels));
        }
    }
    Ok(ClassifierNet {
        variant,
        provenance: Provenance::GanPretrained,
        backbone,
        network: Network::from_parts(spec, params, stats)?,
    })
}

/// Same architecture with every weight drawn from the xavier scheme.
pub fn xavier_classifier(backbone: &DiscriminatorSpec, variant: ClassifierVariant, seed: u64) -> Result<ClassifierNet> {
    Ok(ClassifierNet {
        variant,
        provenance: Provenance::Xavier,
        backbone: *backbone,
        network: Network::new(variant.network_spec(backbone)?, Init::Xavier, seed)?,
    })
}

/// Re-initializes every layer of `net` with the xavier scheme.
pub fn xavier_init(net: &ClassifierNet, seed: u64) -> Result<ClassifierNet> {
    xavier_classifier(&net.backbone, net.variant, seed)
}

fn default_lr() -> f64 {
    0.001
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { learning_rate: 0.001, beta1: 0.9, beta2: 0.999, epochs: 20, batch_size: 32, seed: 0 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("fine-tune batch_size must be at least 2, got {}", self.batch_size)));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

/// Mean training loss of each epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneLog {
    pub epoch_loss: Vec<f64>,
}

impl FinetuneLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss\n");
        for (i, l) in self.epoch_loss.iter().enumerate() {
            writeln!(s, "{},{l}", i + 1).unwrap();
        }
        s
    }
}

/// Supervised training of every layer with softmax cross-entropy on frames.
pub fn finetune(net: &ClassifierNet, train: &FrameDataset, config: &FinetuneConfig) -> Result<(ClassifierNet, FinetuneLog)> {
    config.validate()?;
    let labels = train.check_labels(net.variant.num_classes)?;
    if train.len() < 2 {
        return Err(Error::Data("fine-tuning needs at least 2 frames".into()));
    }
    let mut net = net.clone();
    let mut state = AdamState::new(config.adam());
    let mut log = FinetuneLog::default();
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(train.len(), config.batch_size, rng::derive_seed(config.seed, "finetune"), epoch);
        for batch in &batches {
            let x = train.batch(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let bound = net.network.bind(&mut g, true);
            let xv = g.constant(x);
            let opts = ForwardOpts::train(rng::derive_seed(config.seed, &format!("dropout/{step}")));
            let f = net.network.forward(&mut g, &bound, xv, opts)?;
            let loss = g.softmax_cross_entropy(f.output, &y)?;
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::NonFinite("fine-tuning loss".into()));
            }
            total += lv;
            let mut grads = g.backward(loss)?;
            let named = named_gradients(&mut grads, &bound);
            adam_step(&mut net.network.params, &named, &mut state)?;
            net.network.commit_stats(f.stats);
            step += 1;
        }
        log.epoch_loss.push(total / batches.len() as f64);
    }
    if net.network.params.values().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("fine-tuned parameters".into()));
    }
    Ok((net, log))
}

impl ClassifierNet {
    pub fn layer_names(&self) -> Vec<String> {
        self.network
            .spec
            .block_names()
            .into_iter()
            .filter(|n| FEATURE_LAYERS.contains(&n.as_str()))
            .collect()
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.network.infer(x)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.network.write_into(&mut c, CLASSIFIER_PREFIX);
        let v = self.variant;
        let prov = match self.provenance {
            Provenance::GanPretrained => 0.0,
            Provenance::Xavier => 1.0,
        };
        let meta = vec![v.kind.code(), v.dropout_enabled as u8 as f64, v.num_classes as f64, prov];
        c.insert("meta/classifier", Tensor::from_parts(vec![4], meta));
        let b = self.backbone;
        let dmeta = vec![b.base_channels as f64, b.input_channels as f64, b.input_size as f64, b.leaky_slope];
        c.insert("meta/discriminator", Tensor::from_parts(vec![4], dmeta));
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt
            .get("meta/classifier")
            .ok_or_else(|| Error::CheckpointIncompatible("checkpoint has no meta/classifier record".into()))?;
        let (variant, provenance) = match *meta.data() {
            [kind, dropout, k, prov] => (
                ClassifierVariant {
                    kind: VariantKind::from_code(kind)
                        .ok_or_else(|| Error::CheckpointIncompatible(format!("unknown variant code {kind}")))?,
                    dropout_enabled: dropout != 0.0,
                    num_classes: k as usize,
                },
                if prov == 0.0 { Provenance::GanPretrained } else { Provenance::Xavier },
            ),
            _ => return Err(Error::CheckpointIncompatible("malformed meta/classifier record".into())),
        };
        let backbone = DiscriminatorSpec::from_meta(
            ckpt.get("meta/discriminator")
                .ok_or_else(|| Error::CheckpointIncompatible("checkpoint has no meta/discriminator record".into()))?,
        )?;
        let network = Network::read_from(variant.network_spec(&backbone)?, ckpt, CLASSIFIER_PREFIX)?;
        Ok(Self { variant, provenance, backbone, network })
    }
}

/// Rows of feature vectors, each tagged with a video id and optional label.
/// `dim` may be zero, which makes an empty matrix usable as a neutral
/// element of [`concat_features`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub labels: Vec<Option<usize>>,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn empty_like(&self) -> Self {
        Self { ids: self.ids.clone(), labels: self.labels.clone(), dim: 0, data: Vec::new() }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.rows(), self.dim], self.data.clone())
    }

    /// CSV `video_id,label,f0,f1,...`; unlabeled rows leave the label empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("video_id,label");
        for j in 0..self.dim {
            write!(s, ",f{j}").unwrap();
        }
        s.push('\n');
        for i in 0..self.rows() {
            write!(s, "{},{}", self.ids[i], self.labels[i].map(|l| l.to_string()).unwrap_or_default()).unwrap();
            for v in self.row(i) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err(1, "empty feature file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[0] != "video_id" || cols[1] != "label" {
            return Err(err(1, "expected header `video_id,label,f0,...`".into()));
        }
        let dim = cols.len() - 2;
        let mut m = Self { ids: Vec::new(), labels: Vec::new(), dim, data: Vec::new() };
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != dim + 2 {
                return Err(err(i + 2, format!("expected {} fields, got {}", dim + 2, f.len())));
            }
            m.ids.push(f[0].to_string());
            m.labels.push(match f[1] {
                "" => None,
                l => Some(l.parse().map_err(|_| err(i + 2, format!("bad label `{l}`")))?),
            });
            for v in &f[2..] {
                m.data.push(v.parse().map_err(|_| err(i + 2, format!("bad value `{v}`")))?);
            }
        }
        Ok(m)
    }
}

/// Eval-mode activation of `layer`, flattened per frame.
pub fn extract_features(net: &ClassifierNet, frames: &Tensor, layer: &str) -> Result<Tensor> {
    if !FEATURE_LAYERS.contains(&layer) || !net.network.spec.blocks.iter().any(|b| b.name == layer) {
        return Err(Error::Lookup { name: layer.to_string(), valid: net.layer_names() });
    }
    let a = net.network.activation_of(frames, layer)?;
    let n = a.shape()[0];
    let d = a.len() / n;
    a.reshape(&[n, d])
}

/// Frame-level features of a whole dataset, computed in chunks.
pub fn dataset_features(net: &ClassifierNet, data: &FrameDataset, layer: &str, chunk: usize) -> Result<FeatureMatrix> {
    let mut out = FeatureMatrix { ids: Vec::new(), labels: Vec::new(), dim: 0, data: Vec::new() };
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let f = extract_features(net, &data.batch(part)?, layer)?;
        out.dim = f.shape()[1];
        out.data.extend_from_slice(f.data());
        for &i in part {
            out.ids.push(data.items[i].video_id.clone());
            out.labels.push(data.items[i].label);
        }
    }
    Ok(out)
}

/// Mean of each video's frame rows, one row per video in id order.
pub fn pool_video_feature(frames: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut groups: BTreeMap<&str, (Vec<usize>, Option<usize>)> = BTreeMap::new();
    for (i, id) in frames.ids.iter().enumerate() {
        let e = groups.entry(id.as_str()).or_insert_with(|| (Vec::new(), frames.labels[i]));
        e.0.push(i);
    }
    if groups.is_empty() {
        return Err(Error::Contract("no frames to pool".into()));
    }
    let d = frames.dim;
    let mut out = FeatureMatrix { ids: Vec::new(), labels: Vec::new(), dim: d, data: Vec::with_capacity(groups.len() * d) };
    for (id, (rows, label)) in groups {
        let mut acc = vec![0.0; d];
        for &r in &rows {
            acc.iter_mut().zip(frames.row(r)).for_each(|(a, v)| *a += v);
        }
        out.data.extend(acc.iter().map(|a| a / rows.len() as f64));
        out.ids.push(id.to_string());
        out.labels.push(label);
    }
    Ok(out)
}

/// Row-wise concatenation of two per-video matrices with the same ids.
pub fn concat_features(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<FeatureMatrix> {
    if a.rows() != b.rows() {
        return Err(Error::Contract(format!("cannot concatenate {} rows with {} rows", a.rows(), b.rows())));
    }
    if a.ids != b.ids {
        return Err(Error::Contract("feature matrices list different videos".into()));
    }
    let dim = a.dim + b.dim;
    let mut data = Vec::with_capacity(a.rows() * dim);
    for i in 0..a.rows() {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Ok(FeatureMatrix { ids: a.ids.clone(), labels: a.labels.clone(), dim, data })
}

/// Eval-mode class probabilities of every frame.
pub fn frame_probabilities(net: &ClassifierNet, data: &FrameDataset, chunk: usize) -> Result<FeatureMatrix> {
    let mut out = FeatureMatrix { ids: Vec::new(), labels: Vec::new(), dim: net.variant.num_classes, data: Vec::new() };
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let p = softmax_rows(&net.logits(&data.batch(part)?)?)?;
        out.data.extend_from_slice(p.data());
        for &i in part {
            out.ids.push(data.items[i].video_id.clone());
            out.labels.push(data.items[i].label);
        }
    }
    Ok(out)
}
