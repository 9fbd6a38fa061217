//! Procedural action videos: one textured shape per video moving over a
//! noisy background. A class is a (shape, motion) pair, so single frames
//! already carry the class through shape and appearance.

use std::f64::consts::PI;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::{RgbImage, Video};
use crate::error::{Error, Result};
use crate::tensor::rng::{self, StreamRng};

const SHAPES: [&str; 5] = ["disk", "square", "triangle", "cross", "ring"];
const MOTIONS: [&str; 5] = ["translate", "rotate", "pulse", "bounce", "colorshift"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthStyle {
    /// Filled, textured shapes on smooth noisy backgrounds.
    #[default]
    Shapes,
    /// Grey outlines over saturated stripe backgrounds; a visibly different
    /// image distribution with the same class structure.
    Stripes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub image_size: usize,
    pub fps: f64,
    pub seed: u64,
    pub style: SynthStyle,
    /// Per-class video counts; overrides `videos_per_class` when set.
    pub class_counts: Option<Vec<usize>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            videos_per_class: 40,
            frames_per_video: 16,
            image_size: 64,
            fps: 1.0,
            seed: 0,
            style: SynthStyle::Shapes,
            class_counts: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.frames_per_video < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 frames per video, got {}",
                self.frames_per_video
            )));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidParameter(format!("image size {} is too small", self.image_size)));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidParameter(format!("fps must be positive, got {}", self.fps)));
        }
        match &self.class_counts {
            Some(c) if c.len() != self.num_classes || c.contains(&0) => Err(Error::InvalidParameter(format!(
                "class_counts needs {} positive entries, got {c:?}",
                self.num_classes
            ))),
            None if self.videos_per_class == 0 => {
                Err(Error::InvalidParameter("videos_per_class must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn count(&self, class: usize) -> usize {
        self.class_counts.as_ref().map_or(self.videos_per_class, |c| c[class])
    }
}

pub fn synthetic_class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|k| {
            let (shape, motion) = class_parts(k);
            if k < SHAPES.len() * MOTIONS.len() {
                format!("{}-{}", SHAPES[shape], MOTIONS[motion])
            } else {
                format!("{}-{}-{k}", SHAPES[shape], MOTIONS[motion])
            }
        })
        .collect()
}

fn class_parts(k: usize) -> (usize, usize) {
    (k % SHAPES.len(), (k + k / SHAPES.len()) % MOTIONS.len())
}

/// Videos ordered by id (`c{class:02}_v{index:04}`). Every video draws
/// from its own stream, so the set is deterministic per seed.
pub fn generate_synthetic_actions(config: &SynthConfig) -> Result<Vec<Video>> {
    config.validate()?;
    let mut out = Vec::new();
    for class in 0..config.num_classes {
        for i in 0..config.count(class) {
            let id = format!("c{class:02}_v{i:04}");
            let mut r = rng::stream(config.seed, &format!("synth/{id}"));
            let frames = render_video(config, class, &mut r)?;
            out.push(Video { id, frames, fps: config.fps, label: Some(class) });
        }
    }
    Ok(out)
}

struct Params {
    shape: usize,
    motion: usize,
    radius: f64,
    center: (f64, f64),
    velocity: (f64, f64),
    angle: f64,
    spin: f64,
    phase: f64,
    period: f64,
    hue: f64,
    hue_rate: f64,
    tex_period: f64,
    tex_angle: f64,
    bg: [[f64; 3]; 2],
    bg_angle: f64,
}

/// Fill hues of successive classes step by the golden ratio, so any
/// number of classes stays spread around the color wheel.
fn class_hue(class: usize) -> f64 {
    (class as f64 * 0.618_033_988_749_895).fract()
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn draw_params(config: &SynthConfig, class: usize, r: &mut StreamRng) -> Params {
    let size = config.image_size as f64;
    let (shape, motion) = class_parts(class);
    // class-specific band inside each motion's parameter range
    let band = (class / SHAPES.len()) as f64;
    let u = |r: &mut StreamRng, lo: f64, hi: f64| lo + (hi - lo) * r.random::<f64>();
    let radius = size * u(r, 0.15, 0.22);
    let margin = radius * 1.1;
    let speed = size * u(r, 0.025 + 0.01 * band, 0.035 + 0.01 * band);
    let heading = u(r, 0.0, 2.0 * PI);
    let light = r.random::<f64>() < 0.5;
    let (v0, v1) = if light { (0.55, 0.85) } else { (0.1, 0.35) };
    let bg_hue = r.random::<f64>();
    Params {
        shape,
        motion,
        radius,
        center: (u(r, margin, size - margin), u(r, margin, size - margin)),
        velocity: (speed * heading.cos(), speed * heading.sin()),
        angle: u(r, 0.0, 2.0 * PI),
        spin: u(r, 0.25, 0.45) * if r.random::<f64>() < 0.5 { -1.0 } else { 1.0 },
        phase: u(r, 0.0, 2.0 * PI),
        period: u(r, 4.0 + band, 7.0 + band),
        hue: class_hue(class) + u(r, -0.05, 0.05),
        hue_rate: u(r, 0.05, 0.09),
        tex_period: u(r, 3.0, 6.0),
        tex_angle: u(r, 0.0, PI),
        bg: [hsv(bg_hue, u(r, 0.2, 0.5), v0), hsv(bg_hue + u(r, 0.1, 0.3), u(r, 0.2, 0.5), v1)],
        bg_angle: u(r, 0.0, 2.0 * PI),
    }
}

fn inside(shape: usize, x: f64, y: f64, radius: f64) -> bool {
    let d = (x * x + y * y).sqrt();
    match shape {
        0 => d < radius,
        1 => x.abs().max(y.abs()) < radius * 0.8,
        2 => [-PI / 2.0, PI / 6.0, 5.0 * PI / 6.0]
            .iter()
            .all(|a| x * a.cos() + y * a.sin() < radius * 0.55),
        3 => {
            let arm = radius * 0.3;
            (x.abs() < arm && y.abs() < radius) || (y.abs() < arm && x.abs() < radius)
        }
        _ => d < radius && d > radius * 0.55,
    }
}

fn reflect(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let t = (p - lo).rem_euclid(2.0 * span);
    lo + if t > span { 2.0 * span - t } else { t }
}

fn render_video(config: &SynthConfig, class: usize, r: &mut StreamRng) -> Result<Vec<RgbImage>> {
    let p = draw_params(config, class, r);
    let n = config.image_size;
    let size = n as f64;
    let mut frames = Vec::with_capacity(config.frames_per_video);
    for f in 0..config.frames_per_video {
        let t = f as f64;
        let (mut cx, mut cy) = p.center;
        let mut radius = p.radius;
        let mut angle = p.angle;
        let mut hue = p.hue;
        let margin = p.radius * 1.1;
        match MOTIONS[p.motion] {
            "translate" => {
                cx = reflect(cx + p.velocity.0 * t, margin, size - margin);
                cy = reflect(cy + p.velocity.1 * t, margin, size - margin);
            }
            "rotate" => angle += p.spin * t,
            "pulse" => radius *= 1.0 + 0.3 * (2.0 * PI * t / p.period + p.phase).sin(),
            "bounce" => {
                let floor = size - margin;
                let height = (floor - margin).min(size * 0.5);
                cy = floor - height * (PI * t / p.period + p.phase).sin().abs();
            }
            _ => hue += p.hue_rate * t,
        }
        let fill = hsv(hue, 0.85, 0.95);
        let (sa, ca) = angle.sin_cos();
        let (st, ct) = p.tex_angle.sin_cos();
        let (sb, cb) = p.bg_angle.sin_cos();
        let mut px = Vec::with_capacity(n * n * 3);
        for yi in 0..n {
            for xi in 0..n {
                let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
                let (dx, dy) = (x - cx, y - cy);
                let (lx, ly) = (ca * dx + sa * dy, -sa * dx + ca * dy);
                let noise = (r.random::<f64>() - 0.5) * 16.0;
                let rgb = match config.style {
                    SynthStyle::Shapes => {
                        if inside(p.shape, lx, ly, radius) {
                            let stripe = ((ct * lx + st * ly) * 2.0 * PI / p.tex_period).sin();
                            fill.map(|c| c * (0.8 + 0.2 * stripe))
                        } else {
                            let s = ((cb * (x - size / 2.0) + sb * (y - size / 2.0)) / size + 0.5).clamp(0.0, 1.0);
                            [0, 1, 2].map(|c| p.bg[0][c] * (1.0 - s) + p.bg[1][c] * s)
                        }
                    }
                    SynthStyle::Stripes => {
                        let outline = inside(p.shape, lx, ly, radius) && !inside(p.shape, lx, ly, radius * 0.75);
                        if outline {
                            let g = 40.0 + 180.0 * (hue.rem_euclid(1.0));
                            [g, g, g]
                        } else {
                            let stripe = ((cb * x + sb * y) * 2.0 * PI / 5.0).sin() > 0.0;
                            hsv(p.hue + if stripe { 0.0 } else { 0.5 }, 1.0, if stripe { 0.9 } else { 0.6 })
                        }
                    }
                };
                px.extend(rgb.map(|c| (c + noise).round().clamp(0.0, 255.0) as u8));
            }
        }
        frames.push(RgbImage::new(n, n, px)?);
    }
    Ok(frames)
}
