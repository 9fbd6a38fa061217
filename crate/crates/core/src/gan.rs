//! DCGAN generator and discriminator, the adversarial losses and the
//! alternating training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{to_byte, FrameDataset, RgbImage, FRAME_SIZE};
use crate::error::{Error, Result};
use crate::nn::{named_gradients, Block, ForwardOpts, Init, Layer, Network, NetworkSpec};
use crate::tensor::{adam_step, rng, Activation, AdamConfig, AdamState, Checkpoint, Graph, Tensor, TensorMap};

/// Probability clamp applied before every log.
pub const PROB_EPS: f64 = 1e-7;
/// Standard deviation of the Gaussian weight init.
pub const INIT_STD: f64 = 0.02;

pub const DISCRIMINATOR_PREFIX: &str = "discriminator/";
pub const GENERATOR_PREFIX: &str = "generator/";
/// Names of the discriminator's backbone blocks, shallow to deep.
pub const BACKBONE: [&str; 4] = ["CONV1", "CONV2", "CONV3", "CONV4"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub z_dim: usize,
    pub base_channels: usize,
    pub output_channels: usize,
    pub output_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub base_channels: usize,
    pub input_channels: usize,
    pub input_size: usize,
    pub leaky_slope: f64,
}

impl GeneratorSpec {
    pub fn network_spec(&self) -> Result<NetworkSpec> {
        if self.z_dim == 0 || self.base_channels == 0 || self.output_channels == 0 {
            return Err(Error::Spec(format!("generator dimensions must be positive: {self:?}")));
        }
        if self.output_size != 4 << 4 {
            return Err(Error::Spec(format!(
                "generator output size {} is not reachable from 4×4 by 4 doublings (64)",
                self.output_size
            )));
        }
        let b = self.base_channels;
        let up = |name: &str, i: usize, o: usize| {
            Block::new(
                name,
                vec![
                    Layer::ConvTranspose2d { in_channels: i, out_channels: o, kernel: 4, stride: 2, pad: 1 },
                    Layer::BatchNorm { channels: o },
                    Layer::Activation(Activation::Relu),
                ],
            )
        };
        Ok(NetworkSpec {
            input_shape: vec![self.z_dim],
            blocks: vec![
                Block::new(
                    "PROJ",
                    vec![
                        Layer::Linear { in_features: self.z_dim, out_features: 8 * b * 16 },
                        Layer::Reshape(vec![8 * b, 4, 4]),
                        Layer::BatchNorm { channels: 8 * b },
                        Layer::Activation(Activation::Relu),
                    ],
                ),
                up("DECONV1", 8 * b, 4 * b),
                up("DECONV2", 4 * b, 2 * b),
                up("DECONV3", 2 * b, b),
                Block::new(
                    "OUTPUT",
                    vec![
                        Layer::ConvTranspose2d {
                            in_channels: b,
                            out_channels: self.output_channels,
                            kernel: 4,
                            stride: 2,
                            pad: 1,
                        },
                        Layer::Activation(Activation::Tanh),
                    ],
                ),
            ],
        })
    }

    fn meta(&self) -> Tensor {
        let v = [self.z_dim, self.base_channels, self.output_channels, self.output_size];
        Tensor::from_parts(vec![4], v.iter().map(|&x| x as f64).collect())
    }
}

impl DiscriminatorSpec {
    pub fn backbone_blocks(&self) -> Result<Vec<Block>> {
        if self.base_channels == 0 || self.input_channels == 0 {
            return Err(Error::Spec(format!("discriminator dimensions must be positive: {self:?}")));
        }
        if self.input_size != FRAME_SIZE {
            return Err(Error::Spec(format!(
                "discriminator input size must be {FRAME_SIZE}, got {}",
                self.input_size
            )));
        }
        let b = self.base_channels;
        let lrelu = Layer::Activation(Activation::LeakyRelu { slope: self.leaky_slope });
        let widths = [(self.input_channels, b), (b, 2 * b), (2 * b, 4 * b), (4 * b, 8 * b)];
        Ok(BACKBONE
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (name, (ci, co)))| {
                let mut layers =
                    vec![Layer::Conv2d { in_channels: ci, out_channels: co, kernel: 4, stride: 2, pad: 1, bias: i == 0 }];
                if i > 0 {
                    layers.push(Layer::BatchNorm { channels: co });
                }
                layers.push(lrelu.clone());
                Block::new(*name, layers)
            })
            .collect())
    }

    /// Channels of the CONV4 output.
    pub fn top_channels(&self) -> usize {
        8 * self.base_channels
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let mut blocks = self.backbone_blocks()?;
        blocks.push(Block::new(
            "HEAD",
            vec![
                Layer::Conv2d { in_channels: self.top_channels(), out_channels: 1, kernel: 4, stride: 1, pad: 0, bias: true },
                Layer::Flatten,
                Layer::Activation(Activation::Sigmoid),
            ],
        ));
        Ok(NetworkSpec { input_shape: vec![self.input_channels, self.input_size, self.input_size], blocks })
    }

    fn meta(&self) -> Tensor {
        let v = [self.base_channels as f64, self.input_channels as f64, self.input_size as f64, self.leaky_slope];
        Tensor::from_parts(vec![4], v.to_vec())
    }

    pub fn from_meta(t: &Tensor) -> Result<Self> {
        match *t.data() {
            [b, c, s, slope] => Ok(Self {
                base_channels: b as usize,
                input_channels: c as usize,
                input_size: s as usize,
                leaky_slope: slope,
            }),
            _ => Err(Error::CheckpointIncompatible("malformed meta/discriminator record".into())),
        }
    }
}

pub fn build_generator(spec: &GeneratorSpec, seed: u64) -> Result<Network> {
    Network::new(spec.network_spec()?, Init::Normal { std: INIT_STD }, seed)
}

pub fn build_discriminator(spec: &DiscriminatorSpec, seed: u64) -> Result<Network> {
    Network::new(spec.network_spec()?, Init::Normal { std: INIT_STD }, seed)
}

fn check_probs(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Contract(format!("{what} is an empty batch")));
    }
    Ok(())
}

fn mean_log(p: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    p.iter().map(|&v| f(v.clamp(PROB_EPS, 1.0 - PROB_EPS)).ln()).sum::<f64>() / p.len() as f64
}

/// `-(mean log D(real) + mean log(1 - D(fake)))`, the quantity the
/// discriminator minimizes.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    check_probs(d_real, "d_real")?;
    check_probs(d_fake, "d_fake")?;
    Ok(-(mean_log(d_real, |p| p) + mean_log(d_fake, |p| 1.0 - p)))
}

/// Non-saturating generator loss `-mean log D(G(z))`.
pub fn generator_loss(d_fake: &[f64]) -> Result<f64> {
    check_probs(d_fake, "d_fake")?;
    Ok(-mean_log(d_fake, |p| p))
}

fn default_z_dim() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    #[serde(default = "default_z_dim")]
    pub z_dim: usize,
    /// Width of CONV1; deeper blocks use 2×, 4×, 8× this.
    pub base_channels: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub d_optimizer: AdamConfig,
    pub g_optimizer: AdamConfig,
    pub leaky_slope: f64,
    pub seed: u64,
    /// Write `gan_epoch{N}.dnet` every this many epochs (0 = never).
    pub checkpoint_every: usize,
    /// Write `samples_epoch{N}.ppm` every this many epochs (0 = never).
    pub sample_every: usize,
    /// Side of the square sample grid.
    pub sample_grid: usize,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            z_dim: 100,
            base_channels: 64,
            batch_size: 64,
            epochs: 30,
            d_optimizer: AdamConfig::default(),
            g_optimizer: AdamConfig::default(),
            leaky_slope: 0.2,
            seed: 0,
            checkpoint_every: 0,
            sample_every: 0,
            sample_grid: 8,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("GAN batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs < 1 {
            return Err(Error::Config("GAN epochs must be at least 1".into()));
        }
        if self.z_dim < 1 || self.base_channels < 1 {
            return Err(Error::Config("GAN z_dim and base_channels must be positive".into()));
        }
        self.d_optimizer.validate()?;
        self.g_optimizer.validate()
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec { z_dim: self.z_dim, base_channels: self.base_channels, output_channels: 3, output_size: FRAME_SIZE }
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            base_channels: self.base_channels,
            input_channels: 3,
            input_size: FRAME_SIZE,
            leaky_slope: self.leaky_slope,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub d_loss: f64,
    pub g_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

/// What one discriminator update saw and changed.
#[derive(Debug)]
pub struct DStep {
    pub loss: f64,
    pub real_mean: f64,
    pub fake_mean: f64,
    pub discriminator_grads: TensorMap,
    pub generator_grads: TensorMap,
}

#[derive(Debug)]
pub struct GStep {
    pub loss: f64,
    pub fake_mean: f64,
    pub generator_grads: TensorMap,
    pub discriminator_grads: TensorMap,
}

#[derive(Clone, Debug)]
pub struct Gan {
    pub generator_spec: GeneratorSpec,
    pub discriminator_spec: DiscriminatorSpec,
    pub generator: Network,
    pub discriminator: Network,
    pub d_state: AdamState,
    pub g_state: AdamState,
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_params(net: &Network, what: &str) -> Result<()> {
    match net.params.iter().find(|(_, t)| !t.is_finite()) {
        Some((name, _)) => Err(Error::NonFinite(format!("{what} update of {name}"))),
        None => Ok(()),
    }
}

impl Gan {
    pub fn new(config: &GanConfig) -> Result<Self> {
        config.validate()?;
        let generator_spec = config.generator_spec();
        let discriminator_spec = config.discriminator_spec();
        Ok(Self {
            generator: build_generator(&generator_spec, rng::derive_seed(config.seed, "generator"))?,
            discriminator: build_discriminator(&discriminator_spec, rng::derive_seed(config.seed, "discriminator"))?,
            generator_spec,
            discriminator_spec,
            d_state: AdamState::new(config.d_optimizer),
            g_state: AdamState::new(config.g_optimizer),
        })
    }

    /// N×z_dim standard normal noise.
    pub fn noise(&self, n: usize, seed: u64) -> Result<Tensor> {
        Tensor::randn_with(&[n, self.generator_spec.z_dim], 0.0, 1.0, &mut rng::stream(seed, "noise"))
    }

    /// Generator output as a plain tensor; batch statistics in training
    /// mode, running statistics otherwise. Never updates any state.
    pub fn generate(&self, z: &Tensor, training: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.generator.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let opts = ForwardOpts { training, dropout_seed: 0 };
        let f = self.generator.forward(&mut g, &bound, zv, opts)?;
        Ok(g.value(f.output).clone())
    }

    /// Eval-mode discriminator probabilities.
    pub fn discriminate(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.discriminator.infer(x)?.into_data())
    }

    /// One discriminator update on `real` and a fake batch generated from
    /// `z`. The fake batch enters the discriminator's graph as a constant,
    /// so nothing flows back into the generator.
    pub fn d_step(&mut self, real: &Tensor, z: &Tensor) -> Result<DStep> {
        let fake = self.generate(z, true)?;
        let mut g = Graph::new();
        let bound = self.discriminator.bind(&mut g, true);
        let opts = ForwardOpts::train(0);
        let rv = g.constant(real.clone());
        let fr = self.discriminator.forward(&mut g, &bound, rv, opts)?;
        self.discriminator.commit_stats(fr.stats);
        let fv = g.constant(fake);
        let ff = self.discriminator.forward(&mut g, &bound, fv, opts)?;
        self.discriminator.commit_stats(ff.stats);
        let real_mean = g.value(fr.output).mean();
        let fake_mean = g.value(ff.output).mean();
        let lr = g.bce_mean(fr.output, 1.0, PROB_EPS)?;
        let lf = g.bce_mean(ff.output, 0.0, PROB_EPS)?;
        let loss = g.add(lr, lf)?;
        let loss_value = finite(g.value(loss).item()?, "discriminator loss")?;
        let mut grads = g.backward(loss)?;
        let discriminator_grads = named_gradients(&mut grads, &bound);
        adam_step(&mut self.discriminator.params, &discriminator_grads, &mut self.d_state)?;
        check_params(&self.discriminator, "discriminator")?;
        Ok(DStep { loss: loss_value, real_mean, fake_mean, discriminator_grads, generator_grads: TensorMap::new() })
    }

    /// One generator update through a frozen discriminator.
    pub fn g_step(&mut self, z: &Tensor) -> Result<GStep> {
        let mut g = Graph::new();
        let gb = self.generator.bind(&mut g, true);
        let db = self.discriminator.bind(&mut g, false);
        let opts = ForwardOpts::train(0);
        let zv = g.constant(z.clone());
        let gf = self.generator.forward(&mut g, &gb, zv, opts)?;
        let df = self.discriminator.forward(&mut g, &db, gf.output, opts)?;
        self.generator.commit_stats(gf.stats);
        let fake_mean = g.value(df.output).mean();
        let loss = g.bce_mean(df.output, 1.0, PROB_EPS)?;
        let loss_value = finite(g.value(loss).item()?, "generator loss")?;
        let mut grads = g.backward(loss)?;
        let generator_grads = named_gradients(&mut grads, &gb);
        let discriminator_grads = named_gradients(&mut grads, &db);
        adam_step(&mut self.generator.params, &generator_grads, &mut self.g_state)?;
        check_params(&self.generator, "generator")?;
        Ok(GStep { loss: loss_value, fake_mean, generator_grads, discriminator_grads })
    }

    /// D update then G update, each on fresh noise derived from `step_seed`.
    pub fn train_step(&mut self, real: &Tensor, step_seed: u64) -> Result<StepStats> {
        let n = real.shape()[0];
        let zd = self.noise(n, rng::derive_seed(step_seed, "d"))?;
        let zg = self.noise(n, rng::derive_seed(step_seed, "g"))?;
        let d = self.d_step(real, &zd)?;
        let gs = self.g_step(&zg)?;
        Ok(StepStats { d_loss: d.loss, g_loss: gs.loss, d_real_mean: d.real_mean, d_fake_mean: d.fake_mean })
    }

    /// Both networks plus their shape records. Optimizer moments are not
    /// stored.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.generator.write_into(&mut c, GENERATOR_PREFIX);
        self.discriminator.write_into(&mut c, DISCRIMINATOR_PREFIX);
        c.insert("meta/generator", self.generator_spec.meta());
        c.insert("meta/discriminator", self.discriminator_spec.meta());
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, config: &GanConfig) -> Result<Self> {
        let gm = ckpt
            .get("meta/generator")
            .ok_or_else(|| Error::CheckpointIncompatible("missing meta/generator".into()))?;
        let generator_spec = match *gm.data() {
            [z, b, c, s] => GeneratorSpec {
                z_dim: z as usize,
                base_channels: b as usize,
                output_channels: c as usize,
                output_size: s as usize,
            },
            _ => return Err(Error::CheckpointIncompatible("malformed meta/generator".into())),
        };
        let discriminator_spec = DiscriminatorSpec::from_meta(
            ckpt.get("meta/discriminator")
                .ok_or_else(|| Error::CheckpointIncompatible("missing meta/discriminator".into()))?,
        )?;
        Ok(Self {
            generator: Network::read_from(generator_spec.network_spec()?, ckpt, GENERATOR_PREFIX)?,
            discriminator: Network::read_from(discriminator_spec.network_spec()?, ckpt, DISCRIMINATOR_PREFIX)?,
            generator_spec,
            discriminator_spec,
            d_state: AdamState::new(config.d_optimizer),
            g_state: AdamState::new(config.g_optimizer),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub iter: usize,
    pub stats: StepStats,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,iter,d_loss,g_loss,d_real_mean,d_fake_mean\n");
        for r in &self.records {
            let st = r.stats;
            writeln!(s, "{},{},{},{},{},{}", r.epoch, r.iter, st.d_loss, st.g_loss, st.d_real_mean, st.d_fake_mean)
                .unwrap();
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
        if lines.next() != Some("epoch,iter,d_loss,g_loss,d_real_mean,d_fake_mean") {
            return Err(err(1, "unexpected train log header".into()));
        }
        let mut log = TrainLog::default();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || err(i + 2, format!("malformed record `{line}`"));
            if f.len() != 6 {
                return Err(bad());
            }
            let x = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
            log.records.push(LogRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                iter: f[1].parse().map_err(|_| bad())?,
                stats: StepStats { d_loss: x(2)?, g_loss: x(3)?, d_real_mean: x(4)?, d_fake_mean: x(5)? },
            });
        }
        Ok(log)
    }

    /// Mean of `f` over the records of `epoch`.
    pub fn epoch_mean(&self, epoch: usize, f: impl Fn(&StepStats) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.records.iter().filter(|r| r.epoch == epoch).map(|r| f(&r.stats)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.records.last().map(|r| r.epoch)
    }
}

/// Minibatch index lists for one epoch: a seeded shuffle cut into full
/// batches (the remainder is dropped; a dataset smaller than one batch
/// forms a single batch).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &format!("epoch/{epoch}")));
    if n < batch_size {
        return vec![order];
    }
    order.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

/// Trains on every frame of `dataset` (labels ignored). With `out_dir`, the
/// log, the final checkpoint `gan.dnet` and any periodic checkpoints and
/// sample grids are written there.
pub fn train_gan(dataset: &FrameDataset, config: &GanConfig, out_dir: Option<&Path>) -> Result<(Gan, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("GAN training needs at least one frame".into()));
    }
    if dataset.len() < 2 {
        return Err(Error::Data("GAN training needs at least 2 frames for batch statistics".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut gan = Gan::new(config)?;
    let mut log = TrainLog::default();
    let mut iter = 0;
    for epoch in 1..=config.epochs {
        for batch in epoch_batches(dataset.len(), config.batch_size, config.seed, epoch) {
            let real = dataset.batch(&batch)?;
            let stats = gan.train_step(&real, rng::derive_seed(config.seed, &format!("step/{iter}")))?;
            log.records.push(LogRecord { epoch, iter, stats });
            iter += 1;
        }
        if let Some(dir) = out_dir {
            if config.sample_every > 0 && epoch % config.sample_every == 0 {
                let grid = sample_grid(&gan, config.sample_grid, config.sample_grid, config.seed)?;
                grid.write_ppm(&dir.join(format!("samples_epoch{epoch}.ppm")))?;
            }
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                gan.to_checkpoint().save(&dir.join(format!("gan_epoch{epoch}.dnet")))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        gan.to_checkpoint().save(&dir.join("gan.dnet"))?;
        log.write_csv(&dir.join("train_log.csv"))?;
    }
    Ok((gan, log))
}

/// `rows × cols` eval-mode generator samples tiled into one image.
pub fn sample_grid(gan: &Gan, rows: usize, cols: usize, seed: u64) -> Result<RgbImage> {
    if rows * cols == 0 {
        return Err(Error::InvalidParameter(format!("sample grid {rows}×{cols} is empty")));
    }
    let z = gan.noise(rows * cols, seed)?;
    let imgs = gan.generate(&z, false)?;
    let [_, c, h, w] = imgs.dims4()?;
    if c != 3 {
        return Err(Error::Format(format!("generator produces {c} channels, grids need 3")));
    }
    let mut grid = RgbImage::filled(cols * w, rows * h, [0, 0, 0])?;
    let d = imgs.data();
    for k in 0..rows * cols {
        let (gy, gx) = (k / cols, k % cols);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| to_byte(d[((k * 3 + ch) * h + y) * w + x]);
                grid.set(gx * w + x, gy * h + y, [px(0), px(1), px(2)]);
            }
        }
    }
    Ok(grid)
}
