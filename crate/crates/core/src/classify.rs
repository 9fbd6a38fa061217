//! One-vs-rest linear SVM on pooled video features, video-level softmax
//! evaluation and accuracy reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::FrameDataset;
use crate::error::{Error, Result};
use crate::tensor::{rng, Checkpoint, Tensor};
use crate::transfer::{frame_probabilities, pool_video_feature, ClassifierNet, FeatureMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmConfig {
    /// Hinge-loss weight in `½‖w‖² + C·Σ hinge`.
    pub c: f64,
    /// Passes over the training set.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { c: 1.0, epochs: 100, seed: 0 }
    }
}

/// `weights` is K×(D+1): the last column multiplies a constant 1 feature
/// and is the bias. Inputs are standardized with `mean` and `scale` first.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    pub weights: Vec<Vec<f64>>,
    pub c: f64,
    pub class_names: Vec<String>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn biases(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w[self.dim()]).collect()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    /// `w_k · z + b_k` for each class, `z` the standardized input.
    pub fn decision_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("SVM expects {} features, got {}", self.dim(), x.len())));
        }
        let z = self.standardize(x);
        Ok(self.weights.iter().map(|w| dot(&w[..z.len()], &z) + w[z.len()]).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut header = String::from("svm-model 1\n");
        writeln!(header, "classes\t{}", self.class_names.join("\t")).unwrap();
        writeln!(header, "c\t{}", self.c).unwrap();
        writeln!(header, "dim\t{}", self.dim()).unwrap();
        header.push('\n');
        let k = self.num_classes();
        let d = self.dim();
        let mut ck = Checkpoint::new();
        ck.insert("weights", Tensor::new(vec![k, d + 1], self.weights.concat())?);
        ck.insert("mean", Tensor::new(vec![d], self.mean.clone())?);
        ck.insert("scale", Tensor::new(vec![d], self.scale.clone())?);
        let mut bytes = header.into_bytes();
        bytes.extend(ck.to_bytes());
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint { path: path.to_path_buf(), message: m.to_string() };
        let split = buf.windows(2).position(|w| w == b"\n\n").ok_or_else(|| bad("missing SVM header"))?;
        let header = std::str::from_utf8(&buf[..split]).map_err(|_| bad("SVM header is not UTF-8"))?;
        let mut lines = header.lines();
        if lines.next() != Some("svm-model 1") {
            return Err(bad("not an SVM model file"));
        }
        let mut class_names = Vec::new();
        let mut c = None;
        for line in lines {
            match line.split_once('\t') {
                Some(("classes", rest)) => class_names = rest.split('\t').map(str::to_string).collect(),
                Some(("c", v)) => c = v.parse().ok(),
                _ => {}
            }
        }
        let ck = Checkpoint::from_bytes(&buf[split + 2..]).map_err(|m| bad(&m))?;
        let get = |n: &str| ck.get(n).ok_or_else(|| bad(&format!("missing tensor `{n}`")));
        let w = get("weights")?;
        let [k, d1] = w.dims2()?;
        let model = Self {
            weights: w.data().chunks(d1).map(<[f64]>::to_vec).collect(),
            c: c.ok_or_else(|| bad("missing C"))?,
            class_names,
            mean: get("mean")?.data().to_vec(),
            scale: get("scale")?.data().to_vec(),
        };
        if model.mean.len() + 1 != d1 || model.scale.len() + 1 != d1 || model.class_names.len() != k {
            return Err(bad("inconsistent SVM model dimensions"));
        }
        Ok(model)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-dimension mean and inverse standard deviation (population). A
/// constant dimension gets scale 1.
fn standardization(rows: &[&[f64]], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(*r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        var.iter_mut().zip(*r).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m));
    }
    let scale = var.iter().map(|s| (s / n).sqrt()).map(|sd| if sd > 1e-12 { 1.0 / sd } else { 1.0 }).collect();
    (mean, scale)
}

/// Primal objective `½‖w‖² + C·Σ max(0, 1 − y·w·z)` over augmented rows.
fn objective(w: &[f64], z: &[Vec<f64>], y: &[f64], c: f64) -> f64 {
    let hinge: f64 = z.iter().zip(y).map(|(zi, yi)| (1.0 - yi * dot(w, zi)).max(0.0)).sum();
    0.5 * dot(w, w) + c * hinge
}

/// Trains one binary Pegasos problem; returns the averaged iterate and the
/// objective of the running iterate after each epoch.
fn pegasos(z: &[Vec<f64>], y: &[f64], config: &SvmConfig, class: usize) -> (Vec<f64>, Vec<f64>) {
    let n = z.len();
    let d = z[0].len();
    let lambda = 1.0 / (config.c * n as f64);
    let radius = 1.0 / lambda.sqrt();
    let total = config.epochs * n;
    let avg_from = total / 2;
    let mut w = vec![0.0; d];
    let mut avg = vec![0.0; d];
    let mut averaged = 0usize;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0usize;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, &format!("svm/{class}/{epoch}")));
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let margin = y[i] * dot(&w, &z[i]);
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                w.iter_mut().zip(&z[i]).for_each(|(v, x)| *v += eta * y[i] * x);
            }
            let norm = dot(&w, &w).sqrt();
            if norm > radius {
                w.iter_mut().for_each(|v| *v *= radius / norm);
            }
            if t > avg_from {
                avg.iter_mut().zip(&w).for_each(|(a, v)| *a += v);
                averaged += 1;
            }
        }
        history.push(objective(&w, z, y, config.c));
    }
    avg.iter_mut().for_each(|a| *a /= averaged.max(1) as f64);
    (avg, history)
}

/// Summed one-vs-rest objective after each epoch, alongside the model.
pub fn svm_train_with_history(
    features: &Tensor,
    labels: &[usize],
    class_names: &[String],
    config: &SvmConfig,
) -> Result<(SvmModel, Vec<f64>)> {
    let [n, d] = features.dims2()?;
    if labels.len() != n {
        return Err(Error::Label(format!("{} labels for {n} feature rows", labels.len())));
    }
    if !features.is_finite() {
        return Err(Error::Data("SVM features contain NaN or infinite values".into()));
    }
    if !(config.c > 0.0 && config.c.is_finite()) || config.epochs == 0 {
        return Err(Error::InvalidParameter(format!("SVM needs C > 0 and epochs ≥ 1, got C={} epochs={}", config.c, config.epochs)));
    }
    let k = class_names.len().max(labels.iter().max().map_or(0, |m| m + 1));
    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
    if distinct.len() < 2 || k < 2 {
        return Err(Error::ClassCount(format!("SVM training needs at least 2 classes, found {}", distinct.len())));
    }
    let rows: Vec<&[f64]> = features.data().chunks(d).collect();
    let (mean, scale) = standardization(&rows, d);
    let z: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let mut v: Vec<f64> = r.iter().zip(&mean).zip(&scale).map(|((x, m), s)| (x - m) * s).collect();
            v.push(1.0);
            v
        })
        .collect();
    let mut weights = Vec::with_capacity(k);
    let mut history = vec![0.0; config.epochs];
    for class in 0..k {
        let y: Vec<f64> = labels.iter().map(|&l| if l == class { 1.0 } else { -1.0 }).collect();
        let (w, h) = pegasos(&z, &y, config, class);
        history.iter_mut().zip(h).for_each(|(a, b)| *a += b);
        weights.push(w);
    }
    let names = if class_names.len() == k {
        class_names.to_vec()
    } else {
        (0..k).map(|i| format!("class{i}")).collect()
    };
    Ok((SvmModel { weights, c: config.c, class_names: names, mean, scale }, history))
}

pub fn svm_train(features: &Tensor, labels: &[usize], class_names: &[String], config: &SvmConfig) -> Result<SvmModel> {
    svm_train_with_history(features, labels, class_names, config).map(|(m, _)| m)
}

pub fn svm_predict(model: &SvmModel, features: &Tensor) -> Result<Vec<usize>> {
    let [_, d] = features.dims2()?;
    features.data().chunks(d).map(|r| model.decision_values(r).map(|v| argmax(&v))).collect()
}

/// Fraction of positions where `predictions` equals `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    Ok(predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Svm,
    Softmax,
}

impl Route {
    pub fn name(self) -> &'static str {
        match self {
            Route::Svm => "svm",
            Route::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub route: Route,
    pub accuracy: f64,
    /// Recall of each class; 0 for a class with no test videos.
    pub per_class: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub video_ids: Vec<String>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl EvalReport {
    pub fn new(route: Route, video_ids: Vec<String>, predictions: Vec<usize>, labels: Vec<usize>, k: usize) -> Result<Self> {
        let accuracy = accuracy(&predictions, &labels)?;
        let mut confusion = vec![vec![0usize; k]; k];
        for (&p, &l) in predictions.iter().zip(&labels) {
            if p >= k || l >= k {
                return Err(Error::Label(format!("class {} outside {k} classes", p.max(l))));
            }
            confusion[l][p] += 1;
        }
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[i] as f64 / total as f64
                }
            })
            .collect();
        Ok(Self { route, accuracy, per_class, confusion, video_ids, predictions, labels })
    }

    /// `trace / total` of the confusion matrix.
    pub fn confusion_accuracy(&self) -> f64 {
        let total: usize = self.confusion.iter().flatten().sum();
        let trace: usize = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        trace as f64 / total as f64
    }
}

/// Trains on pooled training features, predicts pooled test features.
pub fn evaluate_svm(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    class_names: &[String],
    config: &SvmConfig,
) -> Result<(SvmModel, EvalReport)> {
    let labels = |m: &FeatureMatrix| -> Result<Vec<usize>> {
        m.labels
            .iter()
            .zip(&m.ids)
            .map(|(l, id)| l.ok_or_else(|| Error::Data(format!("video {id} has no label"))))
            .collect()
    };
    let model = svm_train(&train.to_tensor()?, &labels(train)?, class_names, config)?;
    let pred = svm_predict(&model, &test.to_tensor()?)?;
    let report = EvalReport::new(Route::Svm, test.ids.clone(), pred, labels(test)?, model.num_classes())?;
    Ok((model, report))
}

/// Averages per-frame class probabilities over each video and predicts
/// the argmax (ties to the lower class).
pub fn evaluate_softmax(net: &ClassifierNet, test: &FrameDataset) -> Result<EvalReport> {
    test.labels()?;
    let probs = pool_video_feature(&frame_probabilities(net, test, 64)?)?;
    let labels: Vec<usize> = probs.labels.iter().map(|l| l.expect("labels checked")).collect();
    let pred = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
    EvalReport::new(Route::Softmax, probs.ids.clone(), pred, labels, net.variant.num_classes)
}

/// Per-video averaged probabilities, exposed for inspection.
pub fn video_probabilities(net: &ClassifierNet, test: &FrameDataset) -> Result<BTreeMap<String, Vec<f64>>> {
    let probs = pool_video_feature(&frame_probabilities(net, test, 64)?)?;
    Ok((0..probs.rows()).map(|i| (probs.ids[i].clone(), probs.row(i).to_vec())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 0], &[1, 2, 3, 3]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(Error::Contract(_))));
    }

    #[test]
    fn report_consistency() {
        let r = EvalReport::new(Route::Svm, vec!["a".into(); 5], vec![0, 1, 1, 2, 0], vec![0, 1, 2, 2, 1], 3).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![1, 1, 0], vec![0, 1, 1]]);
        assert_eq!(r.accuracy, r.confusion_accuracy());
        assert_eq!(r.per_class, vec![1.0, 0.5, 0.5]);
    }
}
