//! Manifest, label and clip loading.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{read_wav, FeatureExtractor, LogMelSpectrogram};
use crate::error::{Error, Result};
use crate::temporal::{AuLabelMatrix, AU_COUNT};
use crate::visual::{load_frame, FaceImage};

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub id: String,
    pub wav: PathBuf,
    pub frames_dir: PathBuf,
    pub fps: f64,
    pub labels: PathBuf,
}

impl ClipRecord {
    fn resolved(&self, base: &Path) -> ClipRecord {
        ClipRecord {
            wav: base.join(&self.wav),
            frames_dir: base.join(&self.frames_dir),
            labels: base.join(&self.labels),
            ..self.clone()
        }
    }
}

/// Reads a JSONL manifest, resolving paths against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord =
            serde_json::from_str(line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if !(rec.fps > 0.0 && rec.fps.is_finite()) {
            return Err(Error::format(path, format!("line {}: fps must be positive", n + 1)));
        }
        if !ids.insert(rec.id.clone()) {
            return Err(Error::format(
                path,
                format!("line {}: duplicate id {:?}", n + 1, rec.id),
            ));
        }
        out.push(rec.resolved(base));
    }
    if out.is_empty() {
        return Err(Error::format(path, "manifest lists no clips"));
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("plain record"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// CSV with header `frame,au1,…,au12` and one 0/1 row per frame.
pub fn read_labels(path: &Path) -> Result<AuLabelMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let expected = label_header();
    if lines.next().map(str::trim) != Some(expected.as_str()) {
        return Err(Error::format(path, format!("header must be {expected:?}")));
    }
    let mut values = Vec::new();
    let mut frames = 0;
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |msg: String| Error::format(path, format!("row {}: {msg}", n + 1));
        if cells.len() != AU_COUNT + 1 {
            return Err(bad(format!("{} cells, expected {}", cells.len(), AU_COUNT + 1)));
        }
        if cells[0].parse::<usize>().ok() != Some(frames) {
            return Err(bad(format!("frame index {:?}, expected {frames}", cells[0])));
        }
        for c in &cells[1..] {
            values.push(match *c {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(format!("label {other:?} is not 0 or 1"))),
            });
        }
        frames += 1;
    }
    if frames == 0 {
        return Err(Error::format(path, "no label rows"));
    }
    AuLabelMatrix::new(frames, values)
}

fn label_header() -> String {
    let mut h = String::from("frame");
    for j in 1..=AU_COUNT {
        write!(h, ",au{j}").expect("string write");
    }
    h
}

pub fn write_labels(path: &Path, labels: &AuLabelMatrix) -> Result<()> {
    let mut text = label_header();
    text.push('\n');
    for t in 0..labels.frames() {
        write!(text, "{t}").expect("string write");
        for v in labels.row(t) {
            write!(text, ",{v}").expect("string write");
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Frame files of a clip directory in name order.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(dir, "no .ppm frames"));
    }
    Ok(paths)
}

/// A decoded clip ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Clip {
    pub id: String,
    pub mel: LogMelSpectrogram,
    pub frames: Vec<FaceImage>,
    pub fps: f64,
    pub labels: AuLabelMatrix,
}

pub fn load_clip(rec: &ClipRecord, extractor: &FeatureExtractor, resolution: usize) -> Result<Clip> {
    let mel = extractor.extract(&read_wav(&rec.wav)?)?;
    let frames = frame_paths(&rec.frames_dir)?
        .iter()
        .map(|p| load_frame(p, resolution))
        .collect::<Result<Vec<_>>>()?;
    let labels = read_labels(&rec.labels)?;
    if labels.frames() != frames.len() {
        return Err(Error::format(
            &rec.labels,
            format!("{} label rows for {} frames", labels.frames(), frames.len()),
        ));
    }
    Ok(Clip {
        id: rec.id.clone(),
        mel,
        frames,
        fps: rec.fps,
        labels,
    })
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn ids(&self) -> Vec<String> {
        self.clips.iter().map(|c| c.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Clip> {
        self.clips.iter().find(|c| c.id == id)
    }
}

pub fn load_dataset(manifest: &Path, resolution: usize) -> Result<Dataset> {
    let records = read_manifest(manifest)?;
    let extractor = FeatureExtractor::default();
    let clips = records
        .par_iter()
        .map(|r| load_clip(r, &extractor, resolution))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { clips })
}
