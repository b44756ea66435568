//! Deterministic synthetic time-lapse generator: Gaussian blobs performing
//! Brownian motion (time-symmetric distractors) on a noisy background, with
//! Poisson-timed division events where one blob splits into two children that
//! separate at constant speed (the planted time-asymmetric signal).

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::video::VideoSequence;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub blob_count: usize,
    pub blob_sigma: (f64, f64),
    pub blob_amplitude: (f64, f64),
    /// Brownian step standard deviation, px/frame.
    pub walk_step_sigma: f64,
    /// Expected division events per frame.
    pub division_rate: f64,
    /// Relative separation speed of the two children, px/frame.
    pub division_speed: f64,
    /// Event length in frames.
    pub division_duration: usize,
    pub background: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 100,
            height: 256,
            width: 256,
            blob_count: 30,
            blob_sigma: (3.0, 6.0),
            blob_amplitude: (0.5, 1.0),
            walk_step_sigma: 1.0,
            division_rate: 0.2,
            division_speed: 1.5,
            division_duration: 10,
            background: 0.1,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames < 2 || self.height == 0 || self.width == 0 {
            return Err(SynthError::InvalidConfig("frames >= 2 and nonzero dims required".into()));
        }
        if self.division_duration >= self.frames {
            return Err(SynthError::InvalidConfig(
                "division duration must be shorter than the video".into(),
            ));
        }
        if self.blob_sigma.0 <= 0.0 || self.blob_sigma.1 < self.blob_sigma.0 {
            return Err(SynthError::InvalidConfig("bad blob sigma range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("blob density too high to place division events without overlap")]
    TooDense,
    #[error("not enough event-free space for negative crops")]
    InsufficientNegatives,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Division,
}

/// A planted division: the site, start frame, and the two child centers for
/// every frame of the event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRecord {
    pub kind: EventKind,
    pub t: usize,
    pub row: f64,
    pub col: f64,
    pub duration: usize,
    pub sigma: f64,
    /// One entry per event frame: the two child centers.
    pub children: Vec<[(f64, f64); 2]>,
}

impl EventRecord {
    /// Frames in which the event is active.
    pub fn active(&self) -> std::ops::Range<usize> {
        self.t..(self.t + self.duration).min(usize::MAX)
    }
}

#[derive(Debug, Clone)]
struct Blob {
    row: f64,
    col: f64,
    sigma: f64,
    amplitude: f64,
    /// Blocks re-division while an event is running.
    dividing_until: usize,
}

/// Sample a Poisson count by inversion (rates here are well below 30).
fn poisson(rng: &mut impl Rng, lambda: f64) -> usize {
    let l = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.random_range(0.0..1.0f64);
        if p <= l {
            return k;
        }
        k += 1;
        if k > 1000 {
            return k;
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

/// Generated benchmark: video, ground-truth events, and a dense per-frame
/// child mask stack labeled by 1-based event id.
pub struct SynthVideo {
    pub video: VideoSequence,
    pub events: Vec<EventRecord>,
    pub masks: Array3<u16>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthVideo, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (t_n, h, w) = (cfg.frames, cfg.height, cfg.width);
    let margin = cfg.blob_sigma.1 * 2.0;
    let mut blobs: Vec<Blob> = (0..cfg.blob_count)
        .map(|_| Blob {
            row: rng.random_range(margin..(h as f64 - margin).max(margin + 1.0)),
            col: rng.random_range(margin..(w as f64 - margin).max(margin + 1.0)),
            sigma: rng.random_range(cfg.blob_sigma.0..=cfg.blob_sigma.1),
            amplitude: rng.random_range(cfg.blob_amplitude.0..=cfg.blob_amplitude.1),
            dividing_until: 0,
        })
        .collect();

    let mut events: Vec<EventRecord> = Vec::new();
    let mut active: Vec<(usize, [(f64, f64); 2], f64, f64, f64)> = Vec::new(); // (event idx, dir row/col speed captured via children)
    let mut frames = Array3::<f32>::zeros((t_n, h, w));
    let mut masks = Array3::<u16>::zeros((t_n, h, w));

    for t in 0..t_n {
        // start new events while there is room in time
        if t + cfg.division_duration < t_n {
            let n_new = poisson(&mut rng, cfg.division_rate);
            for _ in 0..n_new {
                let mut placed = false;
                for _attempt in 0..50 {
                    let bi = rng.random_range(0..blobs.len());
                    let b = &blobs[bi];
                    if b.dividing_until > t {
                        continue;
                    }
                    let event_extent = cfg.division_speed * cfg.division_duration as f64 / 2.0
                        + 2.0 * b.sigma;
                    let inside = b.row > event_extent
                        && b.row < h as f64 - event_extent
                        && b.col > event_extent
                        && b.col < w as f64 - event_extent;
                    let clear = events
                        .iter()
                        .filter(|e| e.t + e.duration > t)
                        .all(|e| {
                            let d = ((e.row - b.row).powi(2) + (e.col - b.col).powi(2)).sqrt();
                            d > 2.0 * event_extent
                        });
                    if !(inside && clear) {
                        continue;
                    }
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let (dr, dc) = (angle.sin(), angle.cos());
                    let ev = EventRecord {
                        kind: EventKind::Division,
                        t,
                        row: blobs[bi].row,
                        col: blobs[bi].col,
                        duration: cfg.division_duration,
                        sigma: blobs[bi].sigma,
                        children: Vec::new(),
                    };
                    blobs[bi].dividing_until = t + cfg.division_duration;
                    active.push((events.len(), [(ev.row, ev.col), (ev.row, ev.col)], dr, dc, blobs[bi].sigma));
                    events.push(ev);
                    // the dividing blob is replaced by its children during the
                    // event; remove it from the walkers and remember to respawn
                    let divided = blobs.remove(bi);
                    active.last_mut().unwrap().1 = [(divided.row, divided.col); 2];
                    placed = true;
                    break;
                }
                if !placed && !blobs.is_empty() {
                    // density prevents placement; with a dense config this is
                    // systematic, reject rather than silently under-deliver
                    let area = (h * w) as f64;
                    let footprint = (4.0 * cfg.blob_sigma.1
                        + cfg.division_speed * cfg.division_duration as f64)
                        .powi(2);
                    if cfg.division_rate * cfg.division_duration as f64 * footprint > area {
                        return Err(SynthError::TooDense);
                    }
                }
            }
        }

        // advance active events, record child positions, stamp masks
        let mut finished: Vec<usize> = Vec::new();
        for (ai, (ei, start, dr, dc, sigma)) in active.iter().enumerate() {
            let ev = &mut events[*ei];
            let age = t - ev.t;
            if age >= ev.duration {
                finished.push(ai);
                continue;
            }
            let sep = cfg.division_speed * age as f64 / 2.0;
            let c0 = (start[0].0 + dr * sep, start[0].1 + dc * sep);
            let c1 = (start[1].0 - dr * sep, start[1].1 - dc * sep);
            ev.children.push([c0, c1]);
            let id = (*ei + 1) as u16;
            stamp_disk(&mut masks, t, c0, 2.0 * sigma, id);
            stamp_disk(&mut masks, t, c1, 2.0 * sigma, id);
        }
        // events whose last frame has passed spawn two independent walkers
        for ai in finished.into_iter().rev() {
            let (ei, start, dr, dc, sigma) = active.remove(ai);
            let ev = &events[ei];
            let sep = cfg.division_speed * (ev.duration - 1) as f64 / 2.0;
            for sgn in [1.0, -1.0] {
                blobs.push(Blob {
                    row: start[0].0 + sgn * dr * sep,
                    col: start[0].1 + sgn * dc * sep,
                    sigma,
                    amplitude: rng.random_range(cfg.blob_amplitude.0..=cfg.blob_amplitude.1),
                    dividing_until: 0,
                });
            }
        }

        // render: background + walkers + event children, then noise
        let mut frame = Array2::<f32>::from_elem((h, w), cfg.background as f32);
        for b in &blobs {
            splat_gaussian(&mut frame, (b.row, b.col), b.sigma, b.amplitude);
        }
        for (ei, start, dr, dc, sigma) in &active {
            let ev = &events[*ei];
            let age = t - ev.t;
            if age >= ev.duration {
                continue;
            }
            let sep = cfg.division_speed * age as f64 / 2.0;
            let amp = 0.8 * (cfg.blob_amplitude.0 + cfg.blob_amplitude.1) / 2.0;
            splat_gaussian(&mut frame, (start[0].0 + dr * sep, start[0].1 + dc * sep), *sigma, amp);
            splat_gaussian(&mut frame, (start[1].0 - dr * sep, start[1].1 - dc * sep), *sigma, amp);
        }
        for v in frame.iter_mut() {
            let n = normal(&mut rng) * cfg.noise_sigma;
            *v = (*v + n as f32).clamp(0.0, 1.0);
        }
        frames
            .slice_mut(ndarray::s![t, .., ..])
            .assign(&frame);

        // Brownian step for the next frame, reflected at the borders
        for b in &mut blobs {
            b.row += normal(&mut rng) * cfg.walk_step_sigma;
            b.col += normal(&mut rng) * cfg.walk_step_sigma;
            b.row = reflect(b.row, margin, h as f64 - margin);
            b.col = reflect(b.col, margin, w as f64 - margin);
        }
    }

    // drop events that never rendered a frame (none expected, defensive)
    let events: Vec<EventRecord> = events.into_iter().filter(|e| !e.children.is_empty()).collect();
    Ok(SynthVideo {
        video: VideoSequence {
            frames,
            frame_interval_minutes: None,
            name: format!("synthetic-seed{}", cfg.seed),
        },
        events,
        masks,
    })
}

fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let mut v = x;
    if v < lo {
        v = lo + (lo - v);
    }
    if v > hi {
        v = hi - (v - hi);
    }
    v.clamp(lo, hi)
}

fn splat_gaussian(frame: &mut Array2<f32>, center: (f64, f64), sigma: f64, amplitude: f64) {
    let (h, w) = frame.dim();
    let r = (3.0 * sigma).ceil() as isize;
    let (cy, cx) = center;
    let y0 = (cy as isize - r).max(0);
    let y1 = (cy as isize + r).min(h as isize - 1);
    let x0 = (cx as isize - r).max(0);
    let x1 = (cx as isize + r).min(w as isize - 1);
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            let v = amplitude * (-d2 * inv2s2).exp();
            frame[[y as usize, x as usize]] += v as f32;
        }
    }
}

fn stamp_disk(masks: &mut Array3<u16>, t: usize, center: (f64, f64), radius: f64, id: u16) {
    let (_, h, w) = masks.dim();
    let r = radius.ceil() as isize;
    let (cy, cx) = center;
    let y0 = (cy as isize - r).max(0);
    let y1 = (cy as isize + r).min(h as isize - 1);
    let x0 = (cx as isize - r).max(0);
    let x1 = (cx as isize + r).min(w as isize - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            if d2 <= radius * radius {
                masks[[t, y as usize, x as usize]] = id;
            }
        }
    }
}

/// Classification and segmentation probe data cut from a synthetic video.
pub struct ProbeDatasets {
    /// Crops of `frames_per_crop` consecutive frames, each k x h x w.
    pub crops: Vec<Array3<f32>>,
    /// 1 = event-centered (mitotic), 0 = event-free.
    pub labels: Vec<u8>,
    /// Binary child mask aligned to each crop's center frame.
    pub masks: Vec<Array2<u8>>,
    /// (t, row, col) of each crop's origin (first frame, top-left).
    pub origins: Vec<(usize, usize, usize)>,
}

/// Event-centered positive crops plus negatives sampled away from any event
/// (at least one crop diagonal away in space, or well separated in time).
pub fn make_probe_datasets(
    sv: &SynthVideo,
    crop: usize,
    frames_per_crop: usize,
    neg_per_pos: usize,
    seed: u64,
) -> Result<ProbeDatasets, SynthError> {
    assert!(!sv.events.is_empty(), "positive class needs events");
    let (t_n, h, w) = sv.video.frames.dim();
    assert!(crop <= h && crop <= w && frames_per_crop <= t_n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70b3_d351);
    let mut out = ProbeDatasets {
        crops: Vec::new(),
        labels: Vec::new(),
        masks: Vec::new(),
        origins: Vec::new(),
    };
    let diag = (2.0f64).sqrt() * crop as f64;
    let cut = |t0: usize, r0: usize, c0: usize| -> (Array3<f32>, Array2<u8>) {
        let img = sv
            .video
            .frames
            .slice(ndarray::s![t0..t0 + frames_per_crop, r0..r0 + crop, c0..c0 + crop])
            .to_owned();
        let mid = t0 + frames_per_crop / 2;
        let mask = sv
            .masks
            .slice(ndarray::s![mid, r0..r0 + crop, c0..c0 + crop])
            .mapv(|v| u8::from(v != 0));
        (img, mask)
    };
    for ev in &sv.events {
        let mid_t = ev.t + ev.duration / 2;
        let t0 = mid_t
            .saturating_sub(frames_per_crop / 2)
            .min(t_n - frames_per_crop);
        let r0 = (ev.row as usize).saturating_sub(crop / 2).min(h - crop);
        let c0 = (ev.col as usize).saturating_sub(crop / 2).min(w - crop);
        let (img, mask) = cut(t0, r0, c0);
        out.crops.push(img);
        out.labels.push(1);
        out.masks.push(mask);
        out.origins.push((t0, r0, c0));
    }
    let n_neg = sv.events.len() * neg_per_pos;
    let mut placed = 0;
    let mut attempts = 0;
    while placed < n_neg {
        attempts += 1;
        if attempts > 200 * n_neg {
            return Err(SynthError::InsufficientNegatives);
        }
        let t0 = rng.random_range(0..=t_n - frames_per_crop);
        let r0 = rng.random_range(0..=h - crop);
        let c0 = rng.random_range(0..=w - crop);
        let (ccy, ccx) = (r0 as f64 + crop as f64 / 2.0, c0 as f64 + crop as f64 / 2.0);
        let clear = sv.events.iter().all(|e| {
            let spatial = ((e.row - ccy).powi(2) + (e.col - ccx).powi(2)).sqrt() >= diag;
            let t_lo = e.t.saturating_sub(frames_per_crop + e.duration);
            let t_hi = e.t + 2 * e.duration + frames_per_crop;
            let temporal = t0 < t_lo || t0 > t_hi;
            spatial || temporal
        });
        if !clear {
            continue;
        }
        let (img, mask) = cut(t0, r0, c0);
        if mask.iter().any(|&v| v != 0) {
            continue;
        }
        out.crops.push(img);
        out.labels.push(0);
        out.masks.push(mask);
        out.origins.push((t0, r0, c0));
        placed += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            frames: 40,
            height: 96,
            width: 96,
            blob_count: 6,
            division_rate: 0.15,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate(&small_cfg()).unwrap();
        let b = generate(&small_cfg()).unwrap();
        assert_eq!(a.video.frames, b.video.frames);
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.events.len(), b.events.len());
    }

    #[test]
    fn zero_rate_has_no_events_and_symmetric_differences() {
        let cfg = SynthConfig {
            division_rate: 0.0,
            ..small_cfg()
        };
        let sv = generate(&cfg).unwrap();
        assert!(sv.events.is_empty());
        assert_eq!(sv.masks.sum(), 0);
        // forward and reversed frame-difference statistics agree closely
        let f = &sv.video.frames;
        let t_n = f.dim().0;
        let mut fwd = 0f64;
        let mut bwd = 0f64;
        for t in 0..t_n - 1 {
            let d = (&f.slice(ndarray::s![t + 1, .., ..]).mapv(|v| v as f64)
                - &f.slice(ndarray::s![t, .., ..]).mapv(|v| v as f64))
                .mapv(|v| v.powi(3)); // odd moment: zero iff symmetric
            fwd += d.sum();
            bwd -= d.sum();
        }
        let scale = ((t_n - 1) * f.dim().1 * f.dim().2) as f64;
        assert!((fwd / scale).abs() < 1e-3);
        assert!((bwd / scale).abs() < 1e-3);
    }

    #[test]
    fn events_recorded_with_masks_and_growing_separation() {
        let sv = generate(&small_cfg()).unwrap();
        assert!(!sv.events.is_empty(), "expected at least one event");
        for ev in &sv.events {
            assert_eq!(ev.children.len(), ev.duration);
            // separation grows monotonically
            let sep = |c: &[(f64, f64); 2]| {
                ((c[0].0 - c[1].0).powi(2) + (c[0].1 - c[1].1).powi(2)).sqrt()
            };
            for k in 1..ev.children.len() {
                assert!(sep(&ev.children[k]) >= sep(&ev.children[k - 1]) - 1e-9);
            }
            // mask stamped during the event at the site
            let mid = ev.t + ev.duration / 2;
            let id = sv
                .events
                .iter()
                .position(|e| std::ptr::eq(e, ev))
                .unwrap() as u16
                + 1;
            let any = sv
                .masks
                .slice(ndarray::s![mid, .., ..])
                .iter()
                .any(|&v| v == id);
            assert!(any, "event {id} missing from mask stack");
        }
    }

    #[test]
    fn default_config_event_count_in_poisson_interval() {
        let cfg = SynthConfig::default();
        let sv = generate(&cfg).unwrap();
        // events start in frames 0..T-duration
        let lambda = cfg.division_rate * (cfg.frames - cfg.division_duration) as f64;
        // 99% central interval bounds computed from the Poisson CDF
        let (lo, hi) = poisson_interval_99(lambda);
        let n = sv.events.len();
        assert!(
            (lo..=hi).contains(&n),
            "event count {n} outside Poisson 99% interval [{lo}, {hi}] for lambda {lambda}"
        );
    }

    fn poisson_interval_99(lambda: f64) -> (usize, usize) {
        let mut cdf = 0.0;
        let mut p = (-lambda).exp();
        let mut lo = None;
        let mut k = 0usize;
        loop {
            cdf += p;
            if lo.is_none() && cdf >= 0.005 {
                lo = Some(k);
            }
            if cdf >= 0.995 {
                return (lo.unwrap_or(0), k);
            }
            k += 1;
            p *= lambda / k as f64;
            if k > 10_000 {
                return (lo.unwrap_or(0), k);
            }
        }
    }

    #[test]
    fn hand_coded_difference_detector_separates_events_from_background() {
        // asymmetry certificate: frame-difference energy around events must
        // separate event patches from background patches before any training
        let cfg = SynthConfig {
            seed: 3,
            ..SynthConfig::default()
        };
        let sv = generate(&cfg).unwrap();
        let diff_energy = |crop: &Array3<f32>| {
            (&crop.slice(ndarray::s![1, .., ..]).mapv(|v| v as f64)
                - &crop.slice(ndarray::s![0, .., ..]).mapv(|v| v as f64))
                .mapv(|v| v * v)
                .sum()
        };
        let mut scored: Vec<(f64, u8)> = Vec::new();
        let k = 32usize;
        for ev in &sv.events {
            let mid = ev.t + ev.duration / 2;
            let t0 = mid.min(cfg.frames - 2);
            let r0 = (ev.row as usize).saturating_sub(k / 2).min(cfg.height - k);
            let c0 = (ev.col as usize).saturating_sub(k / 2).min(cfg.width - k);
            let crop = sv
                .video
                .frames
                .slice(ndarray::s![t0..t0 + 2, r0..r0 + k, c0..c0 + k])
                .to_owned();
            scored.push((diff_energy(&crop), 1));
        }
        // background patches: event-free and visibly blob-free
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n_pos = scored.len();
        let mut placed = 0;
        while placed < n_pos {
            let t0 = rng.random_range(0..cfg.frames - 1);
            let r0 = rng.random_range(0..=cfg.height - k);
            let c0 = rng.random_range(0..=cfg.width - k);
            let crop = sv
                .video
                .frames
                .slice(ndarray::s![t0..t0 + 2, r0..r0 + k, c0..c0 + k])
                .to_owned();
            let mask_any = sv
                .masks
                .slice(ndarray::s![t0..t0 + 2, r0..r0 + k, c0..c0 + k])
                .iter()
                .any(|&v| v != 0);
            let peak = crop.iter().cloned().fold(0f32, f32::max);
            if mask_any || peak > (cfg.background + 6.0 * cfg.noise_sigma) as f32 {
                continue;
            }
            scored.push((diff_energy(&crop), 0));
            placed += 1;
        }
        // AUC by rank statistics
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let n_pos = scored.iter().filter(|(_, l)| *l == 1).count() as f64;
        let n_neg = scored.len() as f64 - n_pos;
        let mut rank_sum = 0f64;
        for (i, (_, l)) in scored.iter().enumerate() {
            if *l == 1 {
                rank_sum += (i + 1) as f64;
            }
        }
        let auc = (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
        assert!(auc > 0.9, "detector AUC {auc} too low; signal not learnable");
    }

    #[test]
    fn probe_dataset_counts_and_alignment() {
        let sv = generate(&SynthConfig {
            seed: 9,
            ..SynthConfig::default()
        })
        .unwrap();
        let n_ev = sv.events.len();
        let pd = make_probe_datasets(&sv, 32, 2, 5, 1).unwrap();
        assert_eq!(pd.labels.iter().filter(|&&l| l == 1).count(), n_ev);
        assert_eq!(pd.labels.iter().filter(|&&l| l == 0).count(), 5 * n_ev);
        for (i, m) in pd.masks.iter().enumerate() {
            if pd.labels[i] == 1 {
                assert!(m.iter().any(|&v| v != 0), "positive crop {i} misses child mask");
            } else {
                assert!(m.iter().all(|&v| v == 0), "negative crop {i} touches an event");
            }
            assert_eq!(pd.crops[i].dim(), (2, 32, 32));
        }
    }
}
