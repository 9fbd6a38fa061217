use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use super::Video;
use crate::error::{Error, Result};
use crate::tensor::rng;

/// Video-level train/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Stratified split: each class contributes `round(fraction · count)` videos
/// to train, clamped so that both sides get at least one. Which videos go
/// where is a seeded shuffle per class.
pub fn split_dataset(videos: &[Video], train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("train fraction must be in (0,1), got {train_fraction}")));
    }
    let mut by_class: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for v in videos {
        let label = v
            .label
            .ok_or_else(|| Error::Data(format!("video {} has no label; cannot stratify", v.id)))?;
        by_class.entry(label).or_default().push(v.id.clone());
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut ids) in by_class {
        if ids.len() < 2 {
            return Err(Error::Stratification(format!(
                "class {class} has {} video(s); at least 2 are needed",
                ids.len()
            )));
        }
        ids.sort();
        ids.shuffle(&mut rng::stream(seed, &format!("split/{class}")));
        let n = ids.len();
        let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&ids[..n_train]);
        test.extend_from_slice(&ids[n_train..]);
    }
    train.sort();
    test.sort();
    Ok(Split { train, test, seed })
}

/// CSV `video_id,partition`.
pub fn write_split(split: &Split, path: &Path) -> Result<()> {
    let mut s = String::from("video_id,partition\n");
    for id in &split.train {
        writeln!(s, "{id},train").unwrap();
    }
    for id in &split.test {
        writeln!(s, "{id},test").unwrap();
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path, seed: u64) -> Result<Split> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut split = Split { train: Vec::new(), test: Vec::new(), seed };
    let parse_err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "video_id,partition" {
                return Err(parse_err(1, format!("expected header `video_id,partition`, got `{line}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        match line.split(',').collect::<Vec<_>>().as_slice() {
            [id, "train"] => split.train.push(id.to_string()),
            [id, "test"] => split.test.push(id.to_string()),
            _ => return Err(parse_err(i + 1, format!("expected `<id>,train|test`, got `{line}`"))),
        }
    }
    split.train.sort();
    split.test.sort();
    Ok(split)
}
