//! Videos, frame sampling and preprocessing, the synthetic action generator,
//! on-disk datasets and stratified splits.

mod image;
mod io;
mod split;
mod synth;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use image::{preprocess, resize_bilinear, tensor_to_image, RgbImage, FRAME_SIZE};
pub(crate) use image::to_byte;
pub use io::{load_frame_directory, save_dataset, DatasetDir};
pub use split::{read_split, split_dataset, write_split, Split};
pub use synth::{generate_synthetic_actions, synthetic_class_names, SynthConfig, SynthStyle};

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub frames: Vec<RgbImage>,
    pub fps: f64,
    pub label: Option<usize>,
}

impl Video {
    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::Data(format!("video {} has no frames", self.id)))?;
        if self.frames.iter().any(|f| f.width() != first.width() || f.height() != first.height()) {
            return Err(Error::Data(format!("video {} mixes frame sizes", self.id)));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Data(format!("video {} has invalid fps {}", self.id, self.fps)));
        }
        Ok(())
    }
}

/// Frame indices at timestamps 0, 1/rate, 2/rate, ... seconds. Each
/// timestamp picks the nearest frame, ties toward the earlier one; sampling
/// stops at the first timestamp past the last frame. A video shorter than
/// one sampling interval still yields frame 0.
pub fn sample_frame_indices(frame_count: usize, fps: f64, rate_fps: f64) -> Result<Vec<usize>> {
    if !(rate_fps > 0.0 && rate_fps.is_finite()) {
        return Err(Error::InvalidParameter(format!("sampling rate must be positive, got {rate_fps}")));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::InvalidParameter(format!("video fps must be positive, got {fps}")));
    }
    let mut out = Vec::new();
    for k in 0.. {
        let pos = k as f64 * fps / rate_fps;
        let idx = (pos - 0.5).ceil().max(0.0) as usize;
        if idx >= frame_count {
            break;
        }
        if out.last() != Some(&idx) {
            out.push(idx);
        }
    }
    if out.is_empty() && frame_count > 0 {
        out.push(0);
    }
    Ok(out)
}

pub fn sample_frames(video: &Video, rate_fps: f64) -> Result<Vec<&RgbImage>> {
    Ok(sample_frame_indices(video.frames.len(), video.fps, rate_fps)?
        .into_iter()
        .map(|i| &video.frames[i])
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameItem {
    /// Preprocessed 3×64×64 frame.
    pub frame: Tensor,
    pub label: Option<usize>,
    pub video_id: String,
}

/// Preprocessed frames, grouped by video in video-id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameDataset {
    pub items: Vec<FrameItem>,
    pub class_names: Vec<String>,
}

impl FrameDataset {
    /// Samples and preprocesses the frames of `videos` whose ids are in
    /// `keep` (all videos if `None`).
    pub fn from_videos(
        videos: &[Video],
        keep: Option<&[String]>,
        rate_fps: f64,
        class_names: &[String],
    ) -> Result<Self> {
        let mut selected: Vec<&Video> = videos
            .iter()
            .filter(|v| keep.is_none_or(|k| k.contains(&v.id)))
            .collect();
        selected.sort_by(|a, b| a.id.cmp(&b.id));
        let mut items = Vec::new();
        for v in selected {
            v.validate()?;
            if let Some(l) = v.label {
                if !class_names.is_empty() && l >= class_names.len() {
                    return Err(Error::Data(format!(
                        "video {} has label {l} but only {} classes are named",
                        v.id,
                        class_names.len()
                    )));
                }
            }
            for img in sample_frames(v, rate_fps)? {
                items.push(FrameItem { frame: preprocess(img)?, label: v.label, video_id: v.id.clone() });
            }
        }
        if items.is_empty() {
            return Err(Error::EmptyDataset("no frames selected".into()));
        }
        Ok(Self { items, class_names: class_names.to_vec() })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// N×3×64×64 batch of the given items.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let parts: Vec<&Tensor> = indices.iter().map(|&i| &self.items[i].frame).collect();
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(parts.first().map(|t| t.shape()).unwrap_or(&[]));
        let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(shape, data)
    }

    /// Labels of every item; unlabeled items are a data error.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.items
            .iter()
            .map(|it| it.label.ok_or_else(|| Error::Data(format!("frame of video {} has no label", it.video_id))))
            .collect()
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.items.iter().map(|it| it.video_id.clone()).collect()
    }

    /// Label of each video, keyed (and therefore ordered) by video id.
    pub fn video_labels(&self) -> BTreeMap<String, Option<usize>> {
        self.items.iter().map(|it| (it.video_id.clone(), it.label)).collect()
    }

    /// Checks labels are present and fit the class list.
    pub fn check_labels(&self, num_classes: usize) -> Result<Vec<usize>> {
        let labels = self.labels()?;
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} does not fit {num_classes} classes")));
        }
        if !self.class_names.is_empty() && self.class_names.len() != num_classes {
            return Err(Error::Data(format!(
                "dataset names {} classes, model has {num_classes}",
                self.class_names.len()
            )));
        }
        Ok(labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_examples() {
        assert_eq!(sample_frame_indices(300, 30.0, 1.0).unwrap(), (0..10).map(|k| k * 30).collect::<Vec<_>>());
        assert_eq!(sample_frame_indices(5, 30.0, 1.0).unwrap(), vec![0]);
        let s = sample_frame_indices(299, 30.0, 1.0).unwrap();
        assert_eq!((s.len(), *s.last().unwrap()), (10, 270));
        assert!(sample_frame_indices(10, 30.0, 0.0).is_err());
    }

    #[test]
    fn ties_go_to_the_earlier_frame() {
        // 2.5 frames per sample: timestamps land on 0, 2.5, 5, 7.5
        assert_eq!(sample_frame_indices(9, 5.0, 2.0).unwrap(), vec![0, 2, 5, 7]);
    }
}
