use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length of every network input frame.
pub const FRAME_SIZE: usize = 64;

/// 8-bit RGB image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        Self::from_raw(width, height, 3, pixels)
    }

    /// Accepts interleaved pixels with an explicit channel count; anything
    /// other than 3 channels is a format error.
    pub fn from_raw(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 3 {
            return Err(Error::Format(format!("expected 3 channels, got {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Format(format!("image has no pixels ({width}×{height})")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Format(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.iter().copied().cycle().take(width * height * 3).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = || -> std::result::Result<String, String> {
            loop {
                while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < buf.len() && buf[pos] == b'#' {
                    while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated PPM header".into());
            }
            Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
        };
        let magic = token()?;
        if magic != "P6" {
            return Err(format!("unsupported image type `{magic}` (only binary RGB P6)"));
        }
        let mut num = |what: &str| -> std::result::Result<usize, String> {
            token()?.parse().map_err(|_| format!("bad PPM {what}"))
        };
        let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        let body = pos + 1;
        let need = w.checked_mul(h).and_then(|p| p.checked_mul(3)).ok_or("image too large")?;
        if buf.len() != body + need {
            return Err(format!("expected {need} pixel bytes, found {}", buf.len().saturating_sub(body)));
        }
        Self::new(w, h, buf[body..].to_vec()).map_err(|e| e.to_string())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&buf).map_err(|m| Error::Format(format!("{}: {m}", path.display())))
    }
}

/// Bilinear resize with half-pixel centers and edge clamping, returning
/// floating-point values in the source range, channel-major (3×H×W).
pub fn resize_bilinear(img: &RgbImage, out_w: usize, out_h: usize) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let src = |j: usize, out: usize, size: usize| -> (usize, usize, f64) {
        let x = ((j as f64 + 0.5) * size as f64 / out as f64 - 0.5).clamp(0.0, (size - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(size - 1);
        (x0, x1, x - x0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|j| src(j, out_w, w)).collect();
    let mut out = vec![0.0; 3 * out_w * out_h];
    for i in 0..out_h {
        let (y0, y1, fy) = src(i, out_h, h);
        for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
            for c in 0..3 {
                let p = |x: usize, y: usize| img.pixels[(y * w + x) * 3 + c] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                out[(c * out_h + i) * out_w + j] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Resizes to 64×64 and maps pixel values from [0,255] to [-1,1]. No
/// cropping or other augmentation.
pub fn preprocess(img: &RgbImage) -> Result<Tensor> {
    let data = resize_bilinear(img, FRAME_SIZE, FRAME_SIZE)
        .into_iter()
        .map(|p| (p / 127.5 - 1.0).clamp(-1.0, 1.0))
        .collect();
    Tensor::new(vec![3, FRAME_SIZE, FRAME_SIZE], data)
}

/// Inverse value mapping for a 3×H×W tensor in [-1,1].
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = match *t.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::Shape(format!("expected a C×H×W image tensor, got {:?}", t.shape()))),
    };
    let mut px = vec![0u8; w * h * 3];
    for ch in 0..c.min(3) {
        for i in 0..h * w {
            px[i * 3 + ch] = to_byte(t.data()[ch * h * w + i]);
        }
    }
    RgbImage::from_raw(w, h, c, px)
}

pub(crate) fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}
