//! Patch-pair sampling: spatially co-located crops from Δt-separated time
//! points with randomized time-arrow labels. Sampling is a pure function of
//! (seed, draw index), so draws can be sharded across workers and reproduced
//! exactly.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::TimeArrowLabel;
use crate::video::VideoSequence;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplerConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub delta_t_choices: Vec<usize>,
    /// Fixed at 0.5; kept explicit so configs are self-describing.
    pub flip_probability: f64,
    pub samples_per_epoch: usize,
    /// Extra context cropped around each patch for the augmentation stage's
    /// independent translations.
    pub context_margin: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            patch_h: 96,
            patch_w: 96,
            delta_t_choices: vec![1],
            flip_probability: 0.5,
            samples_per_epoch: 100_000,
            context_margin: 16,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.flip_probability != 0.5 {
            return Err(SampleError::InvalidConfig(
                "flip_probability is fixed at 0.5".into(),
            ));
        }
        if self.patch_h == 0 || self.patch_w == 0 {
            return Err(SampleError::InvalidConfig("patch dims must be positive".into()));
        }
        if self.delta_t_choices.is_empty() || self.delta_t_choices.iter().any(|&d| d == 0) {
            return Err(SampleError::InvalidConfig(
                "delta_t choices must be positive integers".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("patch {patch:?} larger than frame {frame:?} in video '{video}'")]
    PatchTooLarge {
        video: String,
        patch: (usize, usize),
        frame: (usize, usize),
    },
    #[error("no video admits a (t, t+Δt) pair for the configured Δt choices")]
    NoValidPair,
    #[error("annotation at t={t}, ({row}, {col}) outside frame bounds")]
    AnnotationOutOfBounds { t: usize, row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionType {
    Background,
    Interphase,
    Mitotic,
}

/// Where a pair was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSource {
    pub video: usize,
    pub t: usize,
    pub delta_t: usize,
    pub row: usize,
    pub col: usize,
}

/// Two co-located crops (with context margin still attached) and the
/// time-arrow label. `label == Forward` iff `x1` is the earlier time point.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub x1: Array2<f32>,
    pub x2: Array2<f32>,
    pub label: TimeArrowLabel,
    pub source: PairSource,
    /// Margin on each side beyond the nominal patch.
    pub margin: usize,
    pub region: Option<RegionType>,
    /// Offset of the realized crop center from a requested annotation
    /// center, when the window had to be clamped inside the frame.
    pub center_offset: (isize, isize),
}

impl PatchPair {
    /// The nominal patch dims (without margin).
    pub fn inner_dims(&self) -> (usize, usize) {
        let (mh, mw) = self.x1.dim();
        (mh - 2 * self.margin, mw - 2 * self.margin)
    }

    /// Drop the context margin by center-cropping both patches.
    pub fn center_crop(&self) -> (Array2<f32>, Array2<f32>) {
        let m = self.margin;
        let (h, w) = self.inner_dims();
        (
            self.x1.slice(s![m..m + h, m..m + w]).to_owned(),
            self.x2.slice(s![m..m + h, m..m + w]).to_owned(),
        )
    }
}

/// Videos plus the frame indices eligible for sampling (e.g. a training or
/// validation split). Frame index sets must be sorted.
pub struct SampleDomain<'a> {
    pub videos: &'a [VideoSequence],
    pub frame_sets: Vec<Vec<usize>>,
}

impl<'a> SampleDomain<'a> {
    pub fn new(videos: &'a [VideoSequence], frame_sets: Vec<Vec<usize>>) -> Self {
        assert_eq!(videos.len(), frame_sets.len());
        SampleDomain { videos, frame_sets }
    }

    /// All frames of every video.
    pub fn full(videos: &'a [VideoSequence]) -> Self {
        let frame_sets = videos
            .iter()
            .map(|v| (0..v.frames.dim().0).collect())
            .collect();
        SampleDomain { videos, frame_sets }
    }

    /// Valid start frames for a given Δt in one video: both t and t+Δt must
    /// be in the eligible set.
    fn starts(&self, video: usize, delta_t: usize) -> Vec<usize> {
        let set = &self.frame_sets[video];
        set.iter()
            .copied()
            .filter(|&t| set.binary_search(&(t + delta_t)).is_ok())
            .collect()
    }
}

/// Deterministic per-draw RNG: an independent ChaCha stream keyed by
/// (seed, purpose, draw index).
pub fn draw_rng(seed: u64, purpose: u64, draw_index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&purpose.to_le_bytes());
    key[16..24].copy_from_slice(&draw_index.to_le_bytes());
    key[24..].copy_from_slice(&0x9e37_79b9_7f4a_7c15u64.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub const PURPOSE_SAMPLE: u64 = 1;
pub const PURPOSE_AUGMENT: u64 = 2;
pub const PURPOSE_REGION: u64 = 3;

/// Effective margin for a frame: the configured margin, shrunk if the
/// margined window would not fit.
fn effective_margin(cfg: &SamplerConfig, fh: usize, fw: usize) -> usize {
    let by_h = (fh - cfg.patch_h) / 2;
    let by_w = (fw - cfg.patch_w) / 2;
    cfg.context_margin.min(by_h).min(by_w)
}

fn cut_pair(
    video: &VideoSequence,
    video_idx: usize,
    t: usize,
    delta_t: usize,
    row: usize,
    col: usize,
    margin: usize,
    cfg: &SamplerConfig,
    flip: bool,
) -> PatchPair {
    let wh = cfg.patch_h + 2 * margin;
    let ww = cfg.patch_w + 2 * margin;
    let r0 = row - margin;
    let c0 = col - margin;
    let early = video
        .frames
        .slice(s![t, r0..r0 + wh, c0..c0 + ww])
        .to_owned();
    let late = video
        .frames
        .slice(s![t + delta_t, r0..r0 + wh, c0..c0 + ww])
        .to_owned();
    let (x1, x2, label) = if flip {
        (late, early, TimeArrowLabel::Backward)
    } else {
        (early, late, TimeArrowLabel::Forward)
    };
    PatchPair {
        x1,
        x2,
        label,
        source: PairSource {
            video: video_idx,
            t,
            delta_t,
            row,
            col,
        },
        margin,
        region: None,
        center_offset: (0, 0),
    }
}

/// Draw one patch pair. Deterministic given (cfg.seed, draw_index).
pub fn sample_pair(
    domain: &SampleDomain<'_>,
    cfg: &SamplerConfig,
    draw_index: u64,
) -> Result<PatchPair, SampleError> {
    cfg.validate()?;
    for v in domain.videos {
        let (_, fh, fw) = v.frames.dim();
        if cfg.patch_h > fh || cfg.patch_w > fw {
            return Err(SampleError::PatchTooLarge {
                video: v.name.clone(),
                patch: (cfg.patch_h, cfg.patch_w),
                frame: (fh, fw),
            });
        }
    }
    // videos that admit at least one (t, Δt) combination
    let mut eligible: Vec<(usize, Vec<usize>)> = Vec::new();
    for vi in 0..domain.videos.len() {
        let dts: Vec<usize> = cfg
            .delta_t_choices
            .iter()
            .copied()
            .filter(|&dt| !domain.starts(vi, dt).is_empty())
            .collect();
        if !dts.is_empty() {
            eligible.push((vi, dts));
        }
    }
    if eligible.is_empty() {
        return Err(SampleError::NoValidPair);
    }
    let mut rng = draw_rng(cfg.seed, PURPOSE_SAMPLE, draw_index);
    let (vi, dts) = &eligible[rng.random_range(0..eligible.len())];
    let delta_t = dts[rng.random_range(0..dts.len())];
    let starts = domain.starts(*vi, delta_t);
    let t = starts[rng.random_range(0..starts.len())];
    let video = &domain.videos[*vi];
    let (_, fh, fw) = video.frames.dim();
    let margin = effective_margin(cfg, fh, fw);
    let row = margin + rng.random_range(0..=fh - cfg.patch_h - 2 * margin);
    let col = margin + rng.random_range(0..=fw - cfg.patch_w - 2 * margin);
    let flip = rng.random_bool(cfg.flip_probability);
    Ok(cut_pair(video, *vi, t, delta_t, row, col, margin, cfg, flip))
}

/// An annotated point event used for region-stratified evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub video: usize,
    pub t: usize,
    pub row: usize,
    pub col: usize,
    pub region: RegionType,
}

/// Pairs centered on annotated points, carrying both the time-arrow label
/// and the region tag. Windows are clamped inside the frame; the resulting
/// center offset is recorded.
pub fn region_type_dataset(
    videos: &[VideoSequence],
    annotations: &[RegionAnnotation],
    cfg: &SamplerConfig,
) -> Result<Vec<PatchPair>, SampleError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(annotations.len());
    for (i, ann) in annotations.iter().enumerate() {
        let video = &videos[ann.video];
        let (t_n, fh, fw) = video.frames.dim();
        if ann.t >= t_n || ann.row >= fh || ann.col >= fw {
            return Err(SampleError::AnnotationOutOfBounds {
                t: ann.t,
                row: ann.row,
                col: ann.col,
            });
        }
        if cfg.patch_h > fh || cfg.patch_w > fw {
            return Err(SampleError::PatchTooLarge {
                video: video.name.clone(),
                patch: (cfg.patch_h, cfg.patch_w),
                frame: (fh, fw),
            });
        }
        let mut rng = draw_rng(cfg.seed, PURPOSE_REGION, i as u64);
        let valid_dts: Vec<usize> = cfg
            .delta_t_choices
            .iter()
            .copied()
            .filter(|&dt| ann.t + dt < t_n)
            .collect();
        if valid_dts.is_empty() {
            return Err(SampleError::AnnotationOutOfBounds {
                t: ann.t,
                row: ann.row,
                col: ann.col,
            });
        }
        let delta_t = valid_dts[rng.random_range(0..valid_dts.len())];
        let margin = effective_margin(cfg, fh, fw);
        let wh = cfg.patch_h + 2 * margin;
        let ww = cfg.patch_w + 2 * margin;
        // clamp the margined window inside the frame
        let r0 = (ann.row as isize - (wh / 2) as isize).clamp(0, (fh - wh) as isize) as usize;
        let c0 = (ann.col as isize - (ww / 2) as isize).clamp(0, (fw - ww) as isize) as usize;
        let realized_center = (r0 + wh / 2, c0 + ww / 2);
        let flip = rng.random_bool(cfg.flip_probability);
        let mut pair = cut_pair(
            video,
            ann.video,
            ann.t,
            delta_t,
            r0 + margin,
            c0 + margin,
            margin,
            cfg,
            flip,
        );
        pair.region = Some(ann.region);
        pair.center_offset = (
            realized_center.0 as isize - ann.row as isize,
            realized_center.1 as isize - ann.col as isize,
        );
        out.push(pair);
    }
    Ok(out)
}
