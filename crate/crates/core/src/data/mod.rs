//! On-disk sample format, coordinate normalization, TTE windowing, and
//! sequence-consistent augmentation.
//!
//! A sample directory holds `local.tnsr`, `semantic.tnsr`, `flow.tnsr`,
//! `bbox.tnsr` (N x 3), `pose.tnsr` (N x 36) and a `meta.json` record.
//! A dataset manifest is one UTF-8 text record per sample:
//! `<path>\t<label>\t<split>`.

pub mod augment;
pub mod tnsr;

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of semantic mask channels (pedestrian, road, vehicle,
/// construction, vegetation, sky, building, unrecognized).
pub const SEMANTIC_CHANNELS: usize = 8;
/// Joints per pose (COCO-18 layout), two coordinates each.
pub const POSE_JOINTS: usize = 18;

/// COCO-18 joint indices: 0 nose, 1 neck, 2 r-shoulder, 3 r-elbow,
/// 4 r-wrist, 5 l-shoulder, 6 l-elbow, 7 l-wrist, 8 r-hip, 9 r-knee,
/// 10 r-ankle, 11 l-hip, 12 l-knee, 13 l-ankle, 14 r-eye, 15 l-eye,
/// 16 r-ear, 17 l-ear. Pairs swapped under horizontal flip:
pub const LEFT_RIGHT_SWAP: [(usize, usize); 8] = [
    (2, 5),
    (3, 6),
    (4, 7),
    (8, 11),
    (9, 12),
    (10, 13),
    (14, 15),
    (16, 17),
];

/// One training/eval instance: N frames of every modality plus the label.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    /// RGB crop of the pedestrian, [3, N, H_l, W_l], values in [0, 1].
    pub local: Tensor<f32>,
    /// Binary segmentation masks, [8, N, H_g, W_g], entries in {0, 1}.
    pub semantic: Tensor<f32>,
    /// Dense optical flow (u, v) in pixels/frame, [2, N, H_g, W_g].
    pub flow: Tensor<f32>,
    /// Per-frame (x_center, y_center, h_b), normalized, [N, 3].
    pub bbox: Tensor<f32>,
    /// Per-frame 18 x 2 joint coordinates, normalized, [N, 36].
    /// Occluded joints are encoded as the (0, 0) sentinel.
    pub pose: Tensor<f32>,
    /// 1 = crossing, 0 = not crossing.
    pub label: u8,
    /// Frame index at which the annotated action begins.
    pub tte: u32,
    pub source_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    label: u8,
    tte: u32,
    source_id: String,
    n_frames: u32,
}

impl SequenceSample {
    pub fn n_frames(&self) -> usize {
        self.bbox.shape()[0]
    }

    /// Check every invariant the loader guarantees.
    pub fn validate(&self) -> Result<()> {
        let n = self.bbox.shape()[0];
        let check_img = |name: &str, t: &Tensor<f32>, channels: usize| -> Result<()> {
            let s = t.shape();
            if s.len() != 4 || s[0] != channels {
                return Err(Error::Validation(format!(
                    "{name}: expected [{channels}, N, H, W], got {s:?}"
                )));
            }
            if s[1] != n {
                return Err(Error::Validation(format!(
                    "{name}: {} frames, bbox has {n}",
                    s[1]
                )));
            }
            if !t.all_finite() {
                return Err(Error::Validation(format!("{name}: non-finite values")));
            }
            Ok(())
        };
        check_img("local", &self.local, 3)?;
        check_img("semantic", &self.semantic, SEMANTIC_CHANNELS)?;
        check_img("flow", &self.flow, 2)?;

        if self.bbox.shape() != [n, 3] {
            return Err(Error::Validation(format!(
                "bbox: expected [N, 3], got {:?}",
                self.bbox.shape()
            )));
        }
        if self.pose.shape() != [n, POSE_JOINTS * 2] {
            return Err(Error::Validation(format!(
                "pose: expected [N, 36], got {:?}",
                self.pose.shape()
            )));
        }
        if self.label > 1 {
            return Err(Error::Validation(format!("label {} not in {{0, 1}}", self.label)));
        }
        if self.local.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("local values outside [0, 1]".into()));
        }
        if self.semantic.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Validation("semantic entries must be 0 or 1".into()));
        }
        for (name, t) in [("bbox", &self.bbox), ("pose", &self.pose)] {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!("{name} values outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Write the five tensors and the meta record into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        tnsr::write_file(&self.local, &dir.join("local.tnsr"))?;
        tnsr::write_file(&self.semantic, &dir.join("semantic.tnsr"))?;
        tnsr::write_file(&self.flow, &dir.join("flow.tnsr"))?;
        tnsr::write_file(&self.bbox, &dir.join("bbox.tnsr"))?;
        tnsr::write_file(&self.pose, &dir.join("pose.tnsr"))?;
        let meta = Meta {
            label: self.label,
            tte: self.tte,
            source_id: self.source_id.clone(),
            n_frames: self.n_frames() as u32,
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec(&meta)?)?;
        Ok(())
    }

    /// Load and validate a sample directory.
    pub fn load(dir: &Path) -> Result<SequenceSample> {
        let meta_path = dir.join("meta.json");
        let meta_bytes = fs::read(&meta_path).map_err(|e| {
            Error::Validation(format!("cannot read {}: {e}", meta_path.display()))
        })?;
        let meta: Meta = serde_json::from_slice(&meta_bytes)?;
        let sample = SequenceSample {
            local: tnsr::read_file(&dir.join("local.tnsr"))?,
            semantic: tnsr::read_file(&dir.join("semantic.tnsr"))?,
            flow: tnsr::read_file(&dir.join("flow.tnsr"))?,
            bbox: tnsr::read_file(&dir.join("bbox.tnsr"))?,
            pose: tnsr::read_file(&dir.join("pose.tnsr"))?,
            label: meta.label,
            tte: meta.tte,
            source_id: meta.source_id,
        };
        if sample.n_frames() != meta.n_frames as usize {
            return Err(Error::Validation(format!(
                "meta declares {} frames, tensors have {}",
                meta.n_frames,
                sample.n_frames()
            )));
        }
        sample.validate()?;
        Ok(sample)
    }
}

/// Train/test split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    /// Sample directory, relative to the manifest location.
    pub path: String,
    pub label: u8,
    pub split: Split,
}

/// Dataset index: one record per sample plus the frame geometry used when
/// the features were produced.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub frame_w: u32,
    pub frame_h: u32,
}

pub const DEFAULT_FRAME_W: u32 = 1920;
pub const DEFAULT_FRAME_H: u32 = 1080;
pub const MANIFEST_FILE: &str = "manifest.tsv";

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = DatasetManifest {
            entries,
            frame_w: DEFAULT_FRAME_W,
            frame_h: DEFAULT_FRAME_H,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::Validation(format!("duplicate manifest path {}", e.path)));
            }
            if e.label > 1 {
                return Err(Error::Validation(format!(
                    "manifest label {} not in {{0, 1}}",
                    e.label
                )));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let mut text = String::new();
        for e in &self.entries {
            text.push_str(&format!("{}\t{}\t{}\n", e.path, e.label, e.split.as_str()));
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (p, l, s) = (parts.next(), parts.next(), parts.next());
            let (Some(p), Some(l), Some(s)) = (p, l, s) else {
                return Err(Error::Validation(format!(
                    "manifest line {}: expected `path\\tlabel\\tsplit`, got `{line}`",
                    i + 1
                )));
            };
            let label: u8 = l.parse().map_err(|_| {
                Error::Validation(format!("manifest line {}: bad label `{l}`", i + 1))
            })?;
            entries.push(ManifestEntry {
                path: p.to_string(),
                label,
                split: Split::parse(s)?,
            });
        }
        DatasetManifest::new(entries)
    }

    /// Load every sample of a split, in manifest order. `base` is the
    /// directory holding the manifest.
    pub fn load_split(&self, base: &Path, split: Split) -> Result<Vec<SequenceSample>> {
        let mut out = Vec::new();
        for e in self.split(split) {
            let dir = base.join(&e.path);
            if !dir.is_dir() {
                return Err(Error::Validation(format!(
                    "manifest references missing sample {}",
                    dir.display()
                )));
            }
            let s = SequenceSample::load(&dir)?;
            if s.label != e.label {
                return Err(Error::Validation(format!(
                    "{}: manifest label {} != sample label {}",
                    e.path, e.label, s.label
                )));
            }
            out.push(s);
        }
        Ok(out)
    }
}

/// Result of min-max scaling; `clamped` flags an out-of-range input
/// (occluded boxes can exceed the frame).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaled {
    pub value: f64,
    pub clamped: bool,
}

/// (x - lo) / (hi - lo), clamped into [0, 1].
pub fn minmax_scale(x: f64, lo: f64, hi: f64) -> Result<Scaled> {
    if hi <= lo {
        return Err(Error::Parameter(format!(
            "minmax_scale requires hi > lo, got [{lo}, {hi}]"
        )));
    }
    let raw = (x - lo) / (hi - lo);
    let value = raw.clamp(0.0, 1.0);
    Ok(Scaled {
        value,
        clamped: raw != value,
    })
}

/// Encode pixel-space corners (x1, y1, x2, y2) into the normalized
/// (x_center, y_center, h_b) triple. Width is dropped.
pub fn encode_bbox(
    corners: (f64, f64, f64, f64),
    frame_w: u32,
    frame_h: u32,
) -> Result<[f64; 3]> {
    let (x1, y1, x2, y2) = corners;
    if x2 <= x1 || y2 <= y1 {
        return Err(Error::Contract(format!(
            "degenerate box ({x1}, {y1}, {x2}, {y2})"
        )));
    }
    let x = minmax_scale((x1 + x2) / 2.0, 0.0, frame_w as f64)?.value;
    let y = minmax_scale((y1 + y2) / 2.0, 0.0, frame_h as f64)?.value;
    let h = minmax_scale(y2 - y1, 0.0, frame_h as f64)?.value;
    Ok([x, y, h])
}

/// Inverse of [`encode_bbox`] up to the dropped width: recovers pixel-space
/// center coordinates and height.
pub fn decode_bbox(enc: [f64; 3], frame_w: u32, frame_h: u32) -> (f64, f64, f64) {
    (
        enc[0] * frame_w as f64,
        enc[1] * frame_h as f64,
        enc[2] * frame_h as f64,
    )
}

/// An inclusive frame index window of length N.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameWindow {
    pub start: i64,
    pub end: i64,
}

/// Sample an observation window ending `t_end` frames before the event,
/// with `t_end` uniform in [TTE - 60, TTE - 30] clipped to the annotated
/// track. Returns `None` (skip) when the track cannot supply N frames at
/// the drawn position.
pub fn extract_window<R: Rng>(
    track_first: i64,
    track_last: i64,
    tte: i64,
    n: usize,
    rng: &mut R,
) -> Option<FrameWindow> {
    let lo = (tte - 60).max(track_first);
    let hi = (tte - 30).min(track_last);
    if lo > hi {
        return None;
    }
    let t_end = rng.gen_range(lo..=hi);
    let start = t_end - n as i64 + 1;
    if start < track_first {
        return None;
    }
    Some(FrameWindow { start, end: t_end })
}
