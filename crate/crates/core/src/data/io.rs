//! Dataset directories: `manifest.csv` (`video_id,label,fps,frame_glob`),
//! `frames/{video_id}/{index:06}.ppm` and an optional `classes.txt` with one
//! class name per line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{RgbImage, Video};
use crate::error::{Error, Result};

const MANIFEST_HEADER: &str = "video_id,label,fps,frame_glob";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetDir {
    pub videos: Vec<Video>,
    pub class_names: Vec<String>,
}

pub fn save_dataset(videos: &[Video], class_names: &[String], dir: &Path) -> Result<()> {
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for v in videos {
        v.validate()?;
        if v.id.is_empty() || v.id.contains([',', '/', '\\', '\n']) || v.id.starts_with('.') {
            return Err(Error::Data(format!("video id `{}` cannot be used as a directory name", v.id)));
        }
        let frame_dir = dir.join("frames").join(&v.id);
        fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
        for (i, f) in v.frames.iter().enumerate() {
            f.write_ppm(&frame_dir.join(format!("{i:06}.ppm")))?;
        }
        let label = v.label.map(|l| l.to_string()).unwrap_or_default();
        writeln!(manifest, "{},{label},{},frames/{}/*.ppm", v.id, v.fps, v.id).unwrap();
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    if !class_names.is_empty() {
        let path = dir.join("classes.txt");
        let body: String = class_names.iter().map(|c| format!("{c}\n")).collect();
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Files matching `pattern`, which is either a literal path or a path whose
/// final component contains a single `*`. Matches are sorted by name; if all
/// names are numeric, a gap in the sequence reports the missing file.
fn expand_glob(root: &Path, pattern: &str) -> Result<Vec<PathBuf>> {
    let full = root.join(pattern);
    let file = full.file_name().and_then(|f| f.to_str()).unwrap_or_default().to_string();
    let Some((prefix, suffix)) = file.split_once('*') else {
        return Ok(vec![full]);
    };
    let parent = full.parent().unwrap_or(root);
    let entries = fs::read_dir(parent).map_err(|e| Error::io(parent, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(parent, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.len() >= prefix.len() + suffix.len() && name.starts_with(prefix) && name.ends_with(suffix) {
            names.push(name);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Io {
            path: full.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no frame files match"),
        });
    }
    let stems: Option<Vec<usize>> =
        names.iter().map(|n| n[prefix.len()..n.len() - suffix.len()].parse().ok()).collect();
    if let Some(stems) = stems {
        let width = names[0].len() - prefix.len() - suffix.len();
        if let Some(missing) = (0..stems.len()).find(|&i| stems[i] != i) {
            let path = parent.join(format!("{prefix}{missing:0width$}{suffix}"));
            return Err(Error::Io {
                path,
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "frame file is missing"),
            });
        }
    }
    Ok(names.into_iter().map(|n| parent.join(n)).collect())
}

pub fn load_frame_directory(dir: &Path) -> Result<DatasetDir> {
    let manifest = dir.join("manifest.csv");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let parse_err = |line: usize, message: String| Error::Parse { path: manifest.clone(), line, message };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        other => {
            return Err(parse_err(1, format!("expected header `{MANIFEST_HEADER}`, got `{}`", other.map_or("", |o| o.1))))
        }
    }
    let mut videos = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [id, label, fps, glob] = fields.as_slice() else {
            return Err(parse_err(line_no, format!("expected 4 fields, got {}", fields.len())));
        };
        if id.is_empty() {
            return Err(parse_err(line_no, "empty video id".into()));
        }
        let label = match label.trim() {
            "" => None,
            l => Some(l.parse::<usize>().map_err(|_| parse_err(line_no, format!("bad label `{l}`")))?),
        };
        let fps: f64 = fps
            .trim()
            .parse()
            .ok()
            .filter(|f: &f64| *f > 0.0 && f.is_finite())
            .ok_or_else(|| parse_err(line_no, format!("bad fps `{fps}`")))?;
        let frames = expand_glob(dir, glob.trim())?
            .iter()
            .map(|p| RgbImage::read_ppm(p))
            .collect::<Result<Vec<_>>>()?;
        let video = Video { id: id.to_string(), frames, fps, label };
        video.validate()?;
        videos.push(video);
    }
    if videos.is_empty() {
        return Err(Error::EmptyDataset(format!("{} lists no videos", manifest.display())));
    }
    let classes = dir.join("classes.txt");
    let class_names = if classes.exists() {
        fs::read_to_string(&classes)
            .map_err(|e| Error::io(&classes, e))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().to_string())
            .collect()
    } else {
        let max = videos.iter().filter_map(|v| v.label).max();
        max.map_or_else(Vec::new, |m| (0..=m).map(|k| format!("class{k}")).collect())
    };
    Ok(DatasetDir { videos, class_names })
}
