//! Loading, normalizing, saving and splitting time-lapse videos. Accepted
//! inputs are single-channel multi-page TIFF stacks or directories of
//! equally-sized PNG/TIFF frames ordered lexicographically by filename.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tiff::decoder::{Decoder, DecodingResult};
use tiff::encoder::{colortype, TiffEncoder};

/// A single-channel intensity stack T x H x W with acquisition metadata.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    pub frames: Array3<f32>,
    pub frame_interval_minutes: Option<f64>,
    pub name: String,
}

impl VideoSequence {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.frames.dim()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NormalizationConfig {
    /// Keep raw intensities (already-normalized float input).
    None,
    /// Per-video percentile stretch to [0, 1], clipped.
    Percentile { lo: f64, hi: f64 },
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        NormalizationConfig::Percentile { lo: 1.0, hi: 99.8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutPolicy {
    TemporalTail,
    WholeVideo,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub policy: HoldoutPolicy,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.9,
            policy: HoldoutPolicy::TemporalTail,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FrameSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub warning: Option<String>,
}

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("unreadable input {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("{path}: multi-channel images are not supported (single-channel data only)")]
    MultiChannel { path: String },
    #[error("{path}: found {got} frame(s), need at least 2")]
    TooFewFrames { path: String, got: usize },
    #[error("{path}: frame {index} is {got:?} but the first frame is {want:?}")]
    InconsistentShapes {
        path: String,
        index: usize,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("{path}: non-finite intensity values")]
    NonFinite { path: String },
    #[error("invalid split: {0}")]
    BadSplit(String),
}

fn decode_frame(result: DecodingResult, w: usize, h: usize) -> Vec<f32> {
    match result {
        DecodingResult::U8(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U16(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I8(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I16(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        _ => vec![0.0; w * h],
    }
}

fn read_tiff_stack(path: &Path) -> Result<Vec<Array2<f32>>, VideoError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| VideoError::Io {
        path: p.clone(),
        source,
    })?;
    let mut dec = Decoder::new(BufReader::new(file)).map_err(|e| VideoError::Decode {
        path: p.clone(),
        reason: e.to_string(),
    })?;
    let mut frames = Vec::new();
    loop {
        let ct = dec.colortype().map_err(|e| VideoError::Decode {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        match ct {
            tiff::ColorType::Gray(_) => {}
            _ => return Err(VideoError::MultiChannel { path: p }),
        }
        let (w, h) = dec.dimensions().map_err(|e| VideoError::Decode {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        let img = dec.read_image().map_err(|e| VideoError::Decode {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        let data = decode_frame(img, w as usize, h as usize);
        let arr = Array2::from_shape_vec((h as usize, w as usize), data).map_err(|e| {
            VideoError::Decode {
                path: p.clone(),
                reason: e.to_string(),
            }
        })?;
        frames.push(arr);
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| VideoError::Decode {
            path: p.clone(),
            reason: e.to_string(),
        })?;
    }
    Ok(frames)
}

fn read_png_frame(path: &Path) -> Result<Array2<f32>, VideoError> {
    let p = path.display().to_string();
    let img = image::open(path).map_err(|e| VideoError::Decode {
        path: p.clone(),
        reason: e.to_string(),
    })?;
    match img {
        image::DynamicImage::ImageLuma8(im) => {
            let (w, h) = im.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                im.get_pixel(x as u32, y as u32).0[0] as f32
            }))
        }
        image::DynamicImage::ImageLuma16(im) => {
            let (w, h) = im.dimensions();
            Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
                im.get_pixel(x as u32, y as u32).0[0] as f32
            }))
        }
        _ => Err(VideoError::MultiChannel { path: p }),
    }
}

/// Load a video from a multi-page TIFF or a directory of single-frame
/// images, normalize it per the configured policy, and name it after the
/// file stem.
pub fn load_video(
    path: impl AsRef<Path>,
    normalization: &NormalizationConfig,
) -> Result<VideoSequence, VideoError> {
    let path = path.as_ref();
    let p = path.display().to_string();
    let mut frames: Vec<Array2<f32>> = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)
            .map_err(|source| VideoError::Io {
                path: p.clone(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|e| {
                matches!(
                    e.extension().and_then(|s| s.to_str()).map(str::to_lowercase),
                    Some(ref ext) if ["png", "tif", "tiff"].contains(&ext.as_str())
                )
            })
            .collect();
        entries.sort();
        for entry in entries {
            let ext = entry
                .extension()
                .and_then(|s| s.to_str())
                .map(str::to_lowercase)
                .unwrap_or_default();
            if ext == "png" {
                frames.push(read_png_frame(&entry)?);
            } else {
                frames.extend(read_tiff_stack(&entry)?);
            }
        }
    } else {
        frames = read_tiff_stack(path)?;
    }
    if frames.len() < 2 {
        return Err(VideoError::TooFewFrames {
            path: p,
            got: frames.len(),
        });
    }
    let want = frames[0].dim();
    for (i, f) in frames.iter().enumerate() {
        if f.dim() != want {
            return Err(VideoError::InconsistentShapes {
                path: p,
                index: i,
                got: f.dim(),
                want,
            });
        }
    }
    let mut stack = Array3::zeros((frames.len(), want.0, want.1));
    for (i, f) in frames.iter().enumerate() {
        stack.slice_mut(s![i, .., ..]).assign(f);
    }
    if stack.iter().any(|v| !v.is_finite()) {
        return Err(VideoError::NonFinite { path: p });
    }
    normalize_in_place(&mut stack, normalization);
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("video")
        .to_string();
    Ok(VideoSequence {
        frames: stack,
        frame_interval_minutes: None,
        name,
    })
}

/// Linear-interpolation percentile of the full stack.
fn percentile(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        (sorted[i] as f64 * (1.0 - frac) + sorted[i + 1] as f64 * frac) as f32
    } else {
        sorted[n - 1]
    }
}

pub fn normalize_in_place(stack: &mut Array3<f32>, cfg: &NormalizationConfig) {
    match *cfg {
        NormalizationConfig::None => {}
        NormalizationConfig::Percentile { lo, hi } => {
            let mut sorted: Vec<f32> = stack.iter().copied().collect();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let plo = percentile(&sorted, lo);
            let phi = percentile(&sorted, hi);
            if phi <= plo {
                // degenerate range (constant stack): map everything to 0
                stack.fill(0.0);
            } else {
                let inv = 1.0 / (phi - plo);
                stack.mapv_inplace(|v| ((v - plo) * inv).clamp(0.0, 1.0));
            }
        }
    }
}

/// Write a video as a 32-bit float multi-page TIFF.
pub fn save_video(video: &VideoSequence, path: impl AsRef<Path>) -> Result<(), VideoError> {
    save_f32_stack(&video.frames, path)
}

pub fn save_f32_stack(stack: &Array3<f32>, path: impl AsRef<Path>) -> Result<(), VideoError> {
    let p = path.as_ref().display().to_string();
    let file = File::create(path.as_ref()).map_err(|source| VideoError::Io {
        path: p.clone(),
        source,
    })?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| VideoError::Decode {
        path: p.clone(),
        reason: e.to_string(),
    })?;
    let (t_n, h, w) = stack.dim();
    for t in 0..t_n {
        let frame = stack.slice(s![t, .., ..]);
        let data: Vec<f32> = frame.iter().copied().collect();
        enc.write_image::<colortype::Gray32Float>(w as u32, h as u32, &data)
            .map_err(|e| VideoError::Decode {
                path: p.clone(),
                reason: e.to_string(),
            })?;
    }
    Ok(())
}

/// Write a label stack as a 16-bit multi-page TIFF.
pub fn save_u16_stack(stack: &Array3<u16>, path: impl AsRef<Path>) -> Result<(), VideoError> {
    let p = path.as_ref().display().to_string();
    let file = File::create(path.as_ref()).map_err(|source| VideoError::Io {
        path: p.clone(),
        source,
    })?;
    let mut enc = TiffEncoder::new(BufWriter::new(file)).map_err(|e| VideoError::Decode {
        path: p.clone(),
        reason: e.to_string(),
    })?;
    let (t_n, h, w) = stack.dim();
    for t in 0..t_n {
        let data: Vec<u16> = stack.slice(s![t, .., ..]).iter().copied().collect();
        enc.write_image::<colortype::Gray16>(w as u32, h as u32, &data)
            .map_err(|e| VideoError::Decode {
                path: p.clone(),
                reason: e.to_string(),
            })?;
    }
    Ok(())
}

/// Split one video's frame indices. With the temporal-tail policy the
/// validation indices form a contiguous suffix of the time axis; the split
/// must leave both sides a usable (t, t + delta_t_max) pair.
pub fn split_frames(
    video: &VideoSequence,
    spec: &SplitSpec,
    delta_t_max: usize,
) -> Result<FrameSplit, VideoError> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0) {
        return Err(VideoError::BadSplit(format!(
            "train_fraction must be in (0, 1], got {}",
            spec.train_fraction
        )));
    }
    let t_n = video.frames.dim().0;
    let n_train = ((spec.train_fraction * t_n as f64).round() as usize).clamp(1, t_n);
    let train: Vec<usize> = (0..n_train).collect();
    let val: Vec<usize> = (n_train..t_n).collect();
    let mut warning = None;
    if val.is_empty() {
        warning = Some(format!(
            "train_fraction {} leaves no validation frames for video '{}'",
            spec.train_fraction, video.name
        ));
    } else if val.len() <= delta_t_max {
        return Err(VideoError::BadSplit(format!(
            "validation set of {} frame(s) admits no (t, t+{}) pair",
            val.len(),
            delta_t_max
        )));
    }
    if train.len() <= delta_t_max {
        return Err(VideoError::BadSplit(format!(
            "training set of {} frame(s) admits no (t, t+{}) pair",
            train.len(),
            delta_t_max
        )));
    }
    Ok(FrameSplit {
        train,
        val,
        warning,
    })
}

/// Whole-video holdout: the lexicographically last ceil((1-f)*n) videos go
/// entirely to validation.
pub fn split_videos(n_videos: usize, spec: &SplitSpec) -> (Vec<usize>, Vec<usize>) {
    let n_val = (((1.0 - spec.train_fraction) * n_videos as f64).ceil() as usize).min(n_videos);
    let n_train = n_videos - n_val;
    ((0..n_train).collect(), (n_train..n_videos).collect())
}
