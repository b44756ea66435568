//! Anti-shortcut augmentations for patch pairs. Joint transforms (flips,
//! rotation, spatial scaling, elastic deformation, intensity shift/scale)
//! share parameters between the two patches; independent transforms
//! (translation, a second intensity shift/scale, additive Gaussian noise)
//! draw per-patch parameters. Geometry is applied first on the margined
//! crop with reflected borders, then intensity, then noise; the output is
//! the margin-free patch. The time-arrow label is never touched.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::{draw_rng, PatchPair, PURPOSE_AUGMENT};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ElasticParams {
    /// Control points per axis.
    pub grid: usize,
    /// Displacement standard deviation in pixels.
    pub sigma: f64,
}

impl Default for ElasticParams {
    fn default() -> Self {
        ElasticParams { grid: 4, sigma: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct IntensityParams {
    pub scale: (f64, f64),
    pub shift: (f64, f64),
}

impl Default for IntensityParams {
    fn default() -> Self {
        IntensityParams {
            scale: (0.8, 1.2),
            shift: (-0.1, 0.1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentConfig {
    /// Probability each enabled transform is applied to a given pair.
    pub apply_probability: f64,
    /// Horizontal/vertical flips (joint).
    pub flips: bool,
    /// Arbitrary rotation in [0, 2π) (joint).
    pub rotation: bool,
    /// Zoom range (joint), e.g. (0.8, 1.25).
    pub scale: Option<(f64, f64)>,
    /// Elastic deformation (joint).
    pub elastic: Option<ElasticParams>,
    /// Independent translation, as a fraction of the patch side; bounded by
    /// the pair's context margin.
    pub translation: Option<f64>,
    /// Intensity scale/shift applied once jointly...
    pub intensity_joint: Option<IntensityParams>,
    /// ...and once independently per patch.
    pub intensity_independent: Option<IntensityParams>,
    /// Additive Gaussian noise; per-patch σ drawn uniformly from [0, max].
    pub noise_sigma_max: Option<f64>,
    pub seed: u64,
}

impl AugmentConfig {
    /// Everything off: augment_pair degenerates to the center crop.
    pub fn none(seed: u64) -> Self {
        AugmentConfig {
            apply_probability: 0.5,
            flips: false,
            rotation: false,
            scale: None,
            elastic: None,
            translation: None,
            intensity_joint: None,
            intensity_independent: None,
            noise_sigma_max: None,
            seed,
        }
    }

    /// The full suite with the default magnitudes.
    pub fn full(seed: u64) -> Self {
        AugmentConfig {
            apply_probability: 0.5,
            flips: true,
            rotation: true,
            scale: Some((0.8, 1.25)),
            elastic: Some(ElasticParams::default()),
            translation: Some(0.1),
            intensity_joint: Some(IntensityParams::default()),
            intensity_independent: Some(IntensityParams::default()),
            noise_sigma_max: Some(0.05),
            seed,
        }
    }

    /// Ablation shorthand: 0 = none, 1 = flips, 2 = +rotation+scale,
    /// 3 = +elastic+translation, 4 = full suite.
    pub fn level(level: u8, seed: u64) -> Self {
        let mut cfg = AugmentConfig::none(seed);
        if level >= 1 {
            cfg.flips = true;
        }
        if level >= 2 {
            cfg.rotation = true;
            cfg.scale = Some((0.8, 1.25));
        }
        if level >= 3 {
            cfg.elastic = Some(ElasticParams::default());
            cfg.translation = Some(0.1);
        }
        if level >= 4 {
            cfg.intensity_joint = Some(IntensityParams::default());
            cfg.intensity_independent = Some(IntensityParams::default());
            cfg.noise_sigma_max = Some(0.05);
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(AugmentError::InvalidConfig(
                "apply_probability must be in [0, 1]".into(),
            ));
        }
        if let Some((lo, hi)) = self.scale {
            if !(lo > 0.0 && hi >= lo) {
                return Err(AugmentError::InvalidConfig("bad scale range".into()));
            }
        }
        if let Some(t) = self.translation {
            if !(0.0..=1.0).contains(&t) {
                return Err(AugmentError::InvalidConfig(
                    "translation fraction must be in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig::full(0)
    }
}

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augment config: {0}")]
    InvalidConfig(String),
    #[error("translation of {required:.1} px exceeds the available margin of {margin} px")]
    TranslationExceedsMargin { required: f64, margin: usize },
    #[error("ablation levels must be non-empty and free of duplicates")]
    BadAblationLevels,
}

/// The sampled parameters of one pair's augmentation.
struct PairTransform {
    flip_h: bool,
    flip_v: bool,
    /// Rotation angle (radians) and zoom, applied about the patch center.
    angle: f64,
    zoom: f64,
    /// Elastic control-point displacements (grid x grid x (dy, dx)).
    elastic: Option<(usize, Vec<(f64, f64)>)>,
    /// Per-patch translation in pixels.
    translate: [(f64, f64); 2],
    /// Joint and per-patch intensity (scale, shift).
    intensity_joint: (f64, f64),
    intensity_indep: [(f64, f64); 2],
    noise_sigma: [f64; 2],
}

fn sample_transform(
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
    margin: usize,
    patch_side: usize,
) -> Result<PairTransform, AugmentError> {
    let p = cfg.apply_probability;
    // every branch draws its parameters so the stream layout is stable
    let apply_flips = rng.random_bool(p) && cfg.flips;
    let flip_h = rng.random_bool(0.5) && apply_flips;
    let flip_v = rng.random_bool(0.5) && apply_flips;
    let apply_rot = rng.random_bool(p) && cfg.rotation;
    let angle_raw = rng.random_range(0.0..std::f64::consts::TAU);
    let angle = if apply_rot { angle_raw } else { 0.0 };
    let apply_scale = rng.random_bool(p) && cfg.scale.is_some();
    let zoom_raw = cfg
        .scale
        .map(|(lo, hi)| rng.random_range(lo..=hi))
        .unwrap_or(1.0);
    let zoom = if apply_scale { zoom_raw } else { 1.0 };
    let apply_elastic = rng.random_bool(p) && cfg.elastic.is_some();
    let elastic = if let Some(ep) = cfg.elastic {
        let mut pts = Vec::with_capacity(ep.grid * ep.grid);
        for _ in 0..ep.grid * ep.grid {
            let dy: f64 = normal(rng) * ep.sigma;
            let dx: f64 = normal(rng) * ep.sigma;
            pts.push((dy, dx));
        }
        apply_elastic.then_some((ep.grid, pts))
    } else {
        None
    };
    let mut translate = [(0.0, 0.0); 2];
    if let Some(frac) = cfg.translation {
        let tmax = frac * patch_side as f64;
        let apply_t = rng.random_bool(p);
        for t in &mut translate {
            let dy = rng.random_range(-tmax..=tmax);
            let dx = rng.random_range(-tmax..=tmax);
            if apply_t {
                *t = (dy, dx);
            }
        }
        if apply_t && tmax > margin as f64 + 1e-9 {
            return Err(AugmentError::TranslationExceedsMargin {
                required: tmax,
                margin,
            });
        }
    }
    let apply_ij = rng.random_bool(p) && cfg.intensity_joint.is_some();
    let intensity_joint = if let Some(ip) = cfg.intensity_joint {
        let s = rng.random_range(ip.scale.0..=ip.scale.1);
        let b = rng.random_range(ip.shift.0..=ip.shift.1);
        if apply_ij {
            (s, b)
        } else {
            (1.0, 0.0)
        }
    } else {
        (1.0, 0.0)
    };
    let apply_ii = rng.random_bool(p) && cfg.intensity_independent.is_some();
    let mut intensity_indep = [(1.0, 0.0); 2];
    if let Some(ip) = cfg.intensity_independent {
        for t in &mut intensity_indep {
            let s = rng.random_range(ip.scale.0..=ip.scale.1);
            let b = rng.random_range(ip.shift.0..=ip.shift.1);
            if apply_ii {
                *t = (s, b);
            }
        }
    }
    let apply_noise = rng.random_bool(p) && cfg.noise_sigma_max.is_some();
    let mut noise_sigma = [0.0; 2];
    if let Some(mx) = cfg.noise_sigma_max {
        for s in &mut noise_sigma {
            let v = rng.random_range(0.0..=mx);
            if apply_noise {
                *s = v;
            }
        }
    }
    Ok(PairTransform {
        flip_h,
        flip_v,
        angle,
        zoom,
        elastic,
        translate,
        intensity_joint,
        intensity_indep,
        noise_sigma,
    })
}

fn normal(rng: &mut impl Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

/// Mirror an index into [0, n) without duplicating the border pixel.
fn reflect_idx(i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// Bilinear sample with reflected borders.
fn sample_bilinear(img: &Array2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let iy0 = reflect_idx(y0 as isize, h as isize);
    let iy1 = reflect_idx(y0 as isize + 1, h as isize);
    let ix0 = reflect_idx(x0 as isize, w as isize);
    let ix1 = reflect_idx(x0 as isize + 1, w as isize);
    let v00 = img[[iy0, ix0]] as f64;
    let v01 = img[[iy0, ix1]] as f64;
    let v10 = img[[iy1, ix0]] as f64;
    let v11 = img[[iy1, ix1]] as f64;
    ((v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy) as f32
}

/// Catmull-Rom interpolation of the elastic control grid at (u, v) in grid
/// coordinates, borders clamped.
fn elastic_displacement(grid: usize, pts: &[(f64, f64)], u: f64, v: f64) -> (f64, f64) {
    let at = |i: isize, j: isize| -> (f64, f64) {
        let i = i.clamp(0, grid as isize - 1) as usize;
        let j = j.clamp(0, grid as isize - 1) as usize;
        pts[i * grid + j]
    };
    let cr = |p0: f64, p1: f64, p2: f64, p3: f64, t: f64| -> f64 {
        0.5 * ((2.0 * p1)
            + (-p0 + p2) * t
            + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
            + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t)
    };
    let iu = u.floor();
    let iv = v.floor();
    let tu = u - iu;
    let tv = v - iv;
    let mut rows = [(0.0, 0.0); 4];
    for (r, row) in rows.iter_mut().enumerate() {
        let i = iu as isize - 1 + r as isize;
        let c: Vec<(f64, f64)> = (-1..3).map(|d| at(i, iv as isize + d)).collect();
        row.0 = cr(c[0].0, c[1].0, c[2].0, c[3].0, tv);
        row.1 = cr(c[0].1, c[1].1, c[2].1, c[3].1, tv);
    }
    (
        cr(rows[0].0, rows[1].0, rows[2].0, rows[3].0, tu),
        cr(rows[0].1, rows[1].1, rows[2].1, rows[3].1, tu),
    )
}

/// Warp one margined patch into the margin-free output. `translate` is the
/// per-patch independent offset in pixels.
fn warp_patch(
    src: &Array2<f32>,
    out_h: usize,
    out_w: usize,
    margin: usize,
    tf: &PairTransform,
    translate: (f64, f64),
) -> Array2<f32> {
    let (sh, sw) = src.dim();
    let cy = (sh as f64 - 1.0) / 2.0;
    let cx = (sw as f64 - 1.0) / 2.0;
    // exact right-angle path: pure flip/quarter-turn with no other geometry
    let quarter = (tf.angle / std::f64::consts::FRAC_PI_2).round();
    let is_right_angle = (tf.angle - quarter * std::f64::consts::FRAC_PI_2).abs() < 1e-12;
    let (sin_t, cos_t) = if is_right_angle {
        let q = (quarter as i64).rem_euclid(4);
        match q {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        tf.angle.sin_cos()
    };
    let mut out = Array2::zeros((out_h, out_w));
    for oy in 0..out_h {
        for ox in 0..out_w {
            // inner-patch pixel in margined coordinates
            let mut y = (oy + margin) as f64;
            let mut x = (ox + margin) as f64;
            // independent translation (lookup shift)
            y += translate.0;
            x += translate.1;
            // elastic displacement sampled at the translated position
            if let Some((grid, pts)) = &tf.elastic {
                let u = (y / (sh as f64 - 1.0)) * (*grid as f64 - 1.0);
                let v = (x / (sw as f64 - 1.0)) * (*grid as f64 - 1.0);
                let (dy, dx) = elastic_displacement(*grid, pts, u, v);
                y += dy;
                x += dx;
            }
            // rotation and zoom about the margined center
            let dy = y - cy;
            let dx = x - cx;
            let inv = 1.0 / tf.zoom;
            let ry = (cos_t * dy + sin_t * dx) * inv;
            let rx = (-sin_t * dy + cos_t * dx) * inv;
            y = cy + ry;
            x = cx + rx;
            // flips
            if tf.flip_v {
                y = (sh as f64 - 1.0) - y;
            }
            if tf.flip_h {
                x = (sw as f64 - 1.0) - x;
            }
            out[[oy, ox]] = sample_bilinear(src, y, x);
        }
    }
    out
}

/// Augment a pair: geometry (joint then independent), intensity (joint then
/// independent), then noise. Output patches are margin-free; the label and
/// the source record pass through untouched.
pub fn augment_pair(
    pair: &PatchPair,
    cfg: &AugmentConfig,
    draw_index: u64,
) -> Result<PatchPair, AugmentError> {
    cfg.validate()?;
    let (h, w) = pair.inner_dims();
    let mut rng = draw_rng(cfg.seed, PURPOSE_AUGMENT, draw_index);
    let tf = sample_transform(cfg, &mut rng, pair.margin, h.max(w))?;
    let mut patches = Vec::with_capacity(2);
    for (i, src) in [&pair.x1, &pair.x2].into_iter().enumerate() {
        let mut p = warp_patch(src, h, w, pair.margin, &tf, tf.translate[i]);
        let (js, jb) = tf.intensity_joint;
        let (is_, ib) = tf.intensity_indep[i];
        if js != 1.0 || jb != 0.0 || is_ != 1.0 || ib != 0.0 {
            p.mapv_inplace(|v| ((v as f64 * js + jb) * is_ + ib) as f32);
        }
        if tf.noise_sigma[i] > 0.0 {
            let sigma = tf.noise_sigma[i];
            p.mapv_inplace(|v| v + (normal(&mut rng) * sigma) as f32);
        }
        patches.push(p);
    }
    let x2 = patches.pop().unwrap();
    let x1 = patches.pop().unwrap();
    Ok(PatchPair {
        x1,
        x2,
        label: pair.label,
        source: pair.source.clone(),
        margin: 0,
        region: pair.region,
        center_offset: pair.center_offset,
    })
}

/// One training configuration per ablation level, labeled. Levels must be
/// non-empty and pairwise distinct.
pub fn augmentation_ablation_suite(
    levels: &[AugmentConfig],
) -> Result<Vec<(String, AugmentConfig)>, AugmentError> {
    if levels.is_empty() {
        return Err(AugmentError::BadAblationLevels);
    }
    for i in 0..levels.len() {
        for j in i + 1..levels.len() {
            if levels[i] == levels[j] {
                return Err(AugmentError::BadAblationLevels);
            }
        }
    }
    Ok(levels
        .iter()
        .enumerate()
        .map(|(i, cfg)| (format!("level{i}"), cfg.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::TimeArrowLabel;
    use crate::sampler::PairSource;
    use ndarray::s;

    fn mk_pair(inner: usize, margin: usize) -> PatchPair {
        let side = inner + 2 * margin;
        let x1 = Array2::from_shape_fn((side, side), |(y, x)| (y * 31 + x * 7) as f32 * 0.01);
        let x2 = x1.mapv(|v| v + 0.5);
        PatchPair {
            x1,
            x2,
            label: TimeArrowLabel::Forward,
            source: PairSource {
                video: 0,
                t: 0,
                delta_t: 1,
                row: margin,
                col: margin,
            },
            margin,
            region: None,
            center_offset: (0, 0),
        }
    }

    #[test]
    fn disabled_transforms_yield_center_crop() {
        let pair = mk_pair(8, 3);
        let out = augment_pair(&pair, &AugmentConfig::none(1), 0).unwrap();
        let (c1, c2) = pair.center_crop();
        assert_eq!(out.x1, c1);
        assert_eq!(out.x2, c2);
        assert_eq!(out.label, pair.label);
        assert_eq!(out.margin, 0);
    }

    #[test]
    fn joint_transforms_keep_identical_patches_identical() {
        let mut pair = mk_pair(12, 4);
        pair.x2 = pair.x1.clone();
        let mut cfg = AugmentConfig::full(7);
        cfg.translation = None;
        cfg.intensity_independent = None;
        cfg.noise_sigma_max = None;
        for draw in 0..20 {
            let out = augment_pair(&pair, &cfg, draw).unwrap();
            let maxdiff = (&out.x1 - &out.x2)
                .iter()
                .fold(0f32, |m, v| m.max(v.abs()));
            assert!(maxdiff <= 1e-6, "draw {draw}: joint-only diff {maxdiff}");
        }
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let pair = mk_pair(9, 0);
        let mut cfg = AugmentConfig::none(3);
        cfg.rotation = true;
        // drive the warp directly to pin the angle
        let tf = PairTransform {
            flip_h: false,
            flip_v: false,
            angle: std::f64::consts::FRAC_PI_2,
            zoom: 1.0,
            elastic: None,
            translate: [(0.0, 0.0); 2],
            intensity_joint: (1.0, 0.0),
            intensity_indep: [(1.0, 0.0); 2],
            noise_sigma: [0.0; 2],
        };
        let got = warp_patch(&pair.x1, 9, 9, 0, &tf, (0.0, 0.0));
        // lookup rotates by +90°: out[y, x] = src[x, n-1-y]
        let n = 9usize;
        for y in 0..n {
            for x in 0..n {
                let want = pair.x1[[x, n - 1 - y]];
                assert_eq!(got[[y, x]], want, "at ({y}, {x})");
            }
        }
    }

    #[test]
    fn flips_are_exact() {
        let pair = mk_pair(8, 2);
        let tf = PairTransform {
            flip_h: true,
            flip_v: false,
            angle: 0.0,
            zoom: 1.0,
            elastic: None,
            translate: [(0.0, 0.0); 2],
            intensity_joint: (1.0, 0.0),
            intensity_indep: [(1.0, 0.0); 2],
            noise_sigma: [0.0; 2],
        };
        let got = warp_patch(&pair.x1, 8, 8, 2, &tf, (0.0, 0.0));
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(got[[y, x]], pair.x1[[y + 2, 11 - (x + 2)]]);
            }
        }
    }

    #[test]
    fn integer_translation_shifts_window() {
        let pair = mk_pair(6, 3);
        let tf = PairTransform {
            flip_h: false,
            flip_v: false,
            angle: 0.0,
            zoom: 1.0,
            elastic: None,
            translate: [(2.0, -1.0), (0.0, 0.0)],
            intensity_joint: (1.0, 0.0),
            intensity_indep: [(1.0, 0.0); 2],
            noise_sigma: [0.0; 2],
        };
        let got = warp_patch(&pair.x1, 6, 6, 3, &tf, (2.0, -1.0));
        let want = pair.x1.slice(s![5..11, 2..8]);
        assert_eq!(got, want.to_owned());
    }

    #[test]
    fn label_is_never_altered() {
        let pair = mk_pair(10, 4);
        let cfg = AugmentConfig::full(9);
        for draw in 0..50 {
            let out = augment_pair(&pair, &cfg, draw).unwrap();
            assert_eq!(out.label, pair.label);
        }
    }

    #[test]
    fn deterministic_given_seed_and_draw() {
        let pair = mk_pair(10, 4);
        let cfg = AugmentConfig::full(11);
        let a = augment_pair(&pair, &cfg, 42).unwrap();
        let b = augment_pair(&pair, &cfg, 42).unwrap();
        assert_eq!(a.x1, b.x1);
        assert_eq!(a.x2, b.x2);
        let c = augment_pair(&pair, &cfg, 43).unwrap();
        assert!(c.x1 != a.x1 || c.x2 != a.x2);
    }

    #[test]
    fn translation_beyond_margin_rejected() {
        let pair = mk_pair(20, 1);
        let mut cfg = AugmentConfig::none(13);
        cfg.translation = Some(0.5); // 10 px > 1 px margin
        cfg.apply_probability = 1.0;
        match augment_pair(&pair, &cfg, 0) {
            Err(AugmentError::TranslationExceedsMargin { .. }) => {}
            other => panic!("expected margin error, got {other:?}"),
        }
    }

    #[test]
    fn ablation_suite_checks() {
        let levels = [
            AugmentConfig::level(0, 0),
            AugmentConfig::level(1, 0),
            AugmentConfig::level(4, 0),
        ];
        let suite = augmentation_ablation_suite(&levels).unwrap();
        assert_eq!(suite.len(), 3);
        assert!(augmentation_ablation_suite(&[]).is_err());
        let dup = [AugmentConfig::level(1, 0), AugmentConfig::level(1, 0)];
        assert!(augmentation_ablation_suite(&dup).is_err());
    }
}
