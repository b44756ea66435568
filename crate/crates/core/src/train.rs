//! Self-supervised pre-training loop: Adam on the composite objective with a
//! triangular cyclic learning rate, per-epoch validation, checkpointing at a
//! cadence and at the best validation loss, and exact resume.

use std::path::Path;
use std::time::Instant;

use ndarray::Array4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_pair, AugmentConfig, AugmentError};
use crate::checkpoint::{self, CheckpointError, CheckpointMeta};
use crate::loss::{classification_loss, total_loss, LossConfig, TimeArrowLabel};
use crate::model::{TapModel, TapModelConfig};
use crate::nn::{Adam, AdamConfig, HasParams, Real};
use crate::sampler::{
    draw_rng, sample_pair, PatchPair, RegionType, SampleDomain, SampleError, SamplerConfig,
};
use crate::video::{NormalizationConfig, VideoSequence};

pub const PURPOSE_VAL: u64 = 4;
pub const PURPOSE_INIT: u64 = 5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    /// Triangular cycle length in epochs.
    pub cycle_epochs: usize,
    pub seed: u64,
    /// Extra checkpoint cadence in epochs (0 = only best and last).
    pub checkpoint_every: usize,
    /// Validation pairs drawn from the validation split (unaugmented).
    pub val_samples: usize,
    /// Zero the wall-clock column so logs reproduce byte-identically.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            peak_lr: 4e-4,
            floor_lr: 4e-5,
            cycle_epochs: 20,
            seed: 0,
            checkpoint_every: 25,
            val_samples: 2048,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.cycle_epochs == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs, batch_size and cycle_epochs must be positive".into(),
            ));
        }
        if self.peak_lr <= 0.0 || self.floor_lr < 0.0 || self.floor_lr > self.peak_lr {
            return Err(TrainError::InvalidConfig(
                "need 0 <= floor_lr <= peak_lr and peak_lr > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Triangular cyclic schedule: floor at the cycle boundaries, peak at the
/// midpoint, linear in between, constant within an epoch.
pub fn cyclic_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    let phase = (epoch % cfg.cycle_epochs) as f64 / cfg.cycle_epochs as f64;
    let tri = 1.0 - (2.0 * phase - 1.0).abs();
    cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * tri
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub fn write_log_csv(path: impl AsRef<Path>, log: &[EpochRecord]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_io)?;
    w.write_record(["epoch", "train_loss", "val_loss", "val_acc", "lr", "seconds"])
        .map_err(csv_io)?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.6}", r.train_loss),
            format!("{:.6}", r.val_loss),
            format!("{:.6}", r.val_acc),
            format!("{:.8}", r.lr),
            format!("{:.3}", r.seconds),
        ])
        .map_err(csv_io)?;
    }
    w.flush()
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training split is empty")]
    NoTrainingData,
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}; last good checkpoint retained")]
    Diverged { epoch: usize },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Videos plus per-video train/validation frame-index sets.
pub struct TrainData<'a> {
    pub videos: &'a [VideoSequence],
    pub train_sets: Vec<Vec<usize>>,
    pub val_sets: Vec<Vec<usize>>,
}

impl<'a> TrainData<'a> {
    pub fn train_domain(&self) -> SampleDomain<'a> {
        SampleDomain::new(self.videos, self.train_sets.clone())
    }

    pub fn val_domain(&self) -> Option<SampleDomain<'a>> {
        if self.val_sets.iter().all(|s| s.is_empty()) {
            None
        } else {
            Some(SampleDomain::new(self.videos, self.val_sets.clone()))
        }
    }
}

/// Everything a pretraining run is configured by.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub model: TapModelConfig,
    pub sampler: SamplerConfig,
    /// `None` disables augmentation entirely.
    pub augment: Option<AugmentConfig>,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub normalization: NormalizationConfig,
}

impl PretrainSpec {
    pub fn meta(&self, epoch: usize, step: u64) -> CheckpointMeta {
        CheckpointMeta {
            format_version: checkpoint::FORMAT_VERSION,
            dtype: String::new(),
            model: self.model.clone(),
            sampler: self.sampler.clone(),
            augment: self.augment.clone().unwrap_or_else(|| {
                let mut cfg = AugmentConfig::none(self.sampler.seed);
                cfg.apply_probability = 0.0;
                cfg
            }),
            loss: self.loss,
            train: self.train.clone(),
            normalization: self.normalization,
            epoch,
            step,
        }
    }
}

/// Mutable training state: model, optimizer, and counters.
pub struct FitState<F: Real> {
    pub model: TapModel<F>,
    pub adam: Adam<F>,
    pub epoch: usize,
    pub step: u64,
}

/// Parameter/state snapshot used to keep the best-validation model.
pub struct Snapshot<F> {
    params: Vec<Vec<F>>,
    states: Vec<Vec<F>>,
}

pub fn snapshot<F: Real>(model: &mut TapModel<F>) -> Snapshot<F> {
    let mut params = Vec::new();
    model.for_each_param(&mut |p| params.push(p.value.to_vec()));
    let mut states = Vec::new();
    model.for_each_state(&mut |s| states.push(s.value.to_vec()));
    Snapshot { params, states }
}

pub fn restore<F: Real>(model: &mut TapModel<F>, snap: &Snapshot<F>) {
    let mut i = 0;
    model.for_each_param(&mut |p| {
        p.value.copy_from_slice(&snap.params[i]);
        i += 1;
    });
    let mut j = 0;
    model.for_each_state(&mut |s| {
        s.value.copy_from_slice(&snap.states[j]);
        j += 1;
    });
}

pub struct FitResult<F: Real> {
    pub state: FitState<F>,
    /// (epoch, val_loss, snapshot) of the best validation loss seen.
    pub best: Option<(usize, f64, Snapshot<F>)>,
    pub log: Vec<EpochRecord>,
}

impl<F: Real> FitResult<F> {
    /// Rebuild a model carrying the best-validation parameters.
    pub fn best_model(&mut self) -> TapModel<F> {
        let mut rng = draw_rng(0, PURPOSE_INIT, 0);
        let mut model = TapModel::new(self.state.model.cfg.clone(), &mut rng);
        match &self.best {
            Some((_, _, snap)) => restore(&mut model, snap),
            None => {
                let snap = snapshot(&mut self.state.model);
                restore(&mut model, &snap);
            }
        }
        model
    }
}

fn pairs_to_batch<F: Real>(pairs: &[PatchPair]) -> (Array4<F>, Vec<TimeArrowLabel>) {
    let n = pairs.len();
    let (h, w) = pairs[0].inner_dims();
    let mut batch = Array4::zeros((n, 2, h, w));
    let mut labels = Vec::with_capacity(n);
    for (i, p) in pairs.iter().enumerate() {
        let (x1, x2) = if p.margin == 0 {
            (p.x1.clone(), p.x2.clone())
        } else {
            p.center_crop()
        };
        for (t, x) in [x1, x2].into_iter().enumerate() {
            let mut dst = batch.slice_mut(ndarray::s![i, t, .., ..]);
            for (d, &v) in dst.iter_mut().zip(x.iter()) {
                *d = F::c(v as f64);
            }
        }
        labels.push(p.label);
    }
    (batch, labels)
}

fn draw_batch(
    domain: &SampleDomain<'_>,
    sampler_cfg: &SamplerConfig,
    augment_cfg: Option<&AugmentConfig>,
    base_index: u64,
    count: usize,
) -> Result<Vec<PatchPair>, TrainError> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let draw = base_index + i;
            let pair = sample_pair(domain, sampler_cfg, draw)?;
            match augment_cfg {
                Some(cfg) => Ok(augment_pair(&pair, cfg, draw)?),
                None => Ok(pair),
            }
        })
        .collect()
}

/// Run (or continue) a pretraining. With `resume`, the counters pick up
/// where the state left off and produce bit-identical results to an
/// uninterrupted run.
pub fn fit<F: Real>(
    data: &TrainData<'_>,
    spec: &PretrainSpec,
    resume: Option<FitState<F>>,
    out_dir: Option<&Path>,
) -> Result<FitResult<F>, TrainError> {
    spec.train.validate()?;
    spec.sampler.validate()?;
    spec.loss
        .validate()
        .map_err(TrainError::InvalidConfig)?;
    if let Some(cfg) = &spec.augment {
        cfg.validate()?;
    }
    if data.train_sets.iter().all(|s| s.is_empty()) {
        return Err(TrainError::NoTrainingData);
    }
    let train_domain = data.train_domain();
    let val_domain = data.val_domain();

    let mut state = match resume {
        Some(s) => s,
        None => {
            let mut rng = draw_rng(spec.train.seed, PURPOSE_INIT, 0);
            let mut model = TapModel::<F>::new(spec.model.clone(), &mut rng);
            let adam = Adam::new(&mut model, AdamConfig::default());
            FitState {
                model,
                adam,
                epoch: 0,
                step: 0,
            }
        }
    };

    // fixed validation set, unaugmented, drawn once per run seed
    let val_pairs: Vec<PatchPair> = match &val_domain {
        Some(domain) => {
            let mut vcfg = spec.sampler.clone();
            vcfg.seed = spec.train.seed;
            (0..spec.train.val_samples as u64)
                .into_par_iter()
                .map(|i| {
                    let mut pair = sample_pair(domain, &vcfg, u64::MAX / 2 + i)?;
                    // margin is only for augmentation; drop it here
                    let (x1, x2) = pair.center_crop();
                    pair.x1 = x1;
                    pair.x2 = x2;
                    pair.margin = 0;
                    Ok::<_, TrainError>(pair)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        None => Vec::new(),
    };

    let steps_per_epoch = (spec.sampler.samples_per_epoch / spec.train.batch_size).max(1);
    let mut log: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(usize, f64, Snapshot<F>)> = None;

    while state.epoch < spec.train.epochs {
        let epoch = state.epoch;
        let t0 = Instant::now();
        let lr = cyclic_lr(&spec.train, epoch);
        let mut train_loss_acc = 0f64;
        for step in 0..steps_per_epoch {
            let base =
                (epoch as u64 * steps_per_epoch as u64 + step as u64) * spec.train.batch_size as u64;
            let pairs = draw_batch(
                &train_domain,
                &spec.sampler,
                spec.augment.as_ref(),
                base,
                spec.train.batch_size,
            )?;
            let (batch, labels) = pairs_to_batch::<F>(&pairs);
            state.model.zero_grads();
            let (logits, z) = state.model.forward_pair(&batch, true);
            let (total, _ce, _dec, dlogits, dz) = total_loss(&logits, &labels, &z, &spec.loss);
            let total = total.as_f64();
            if !total.is_finite() {
                if let Some(dir) = out_dir {
                    let meta = spec.meta(epoch, state.step);
                    checkpoint::save(
                        dir.join("checkpoint-last"),
                        &meta,
                        &mut state.model,
                        Some(&state.adam),
                    )?;
                }
                return Err(TrainError::Diverged { epoch });
            }
            state.model.backward_pair(&dlogits, dz.as_ref());
            state.adam.step(&mut state.model, lr);
            state.step += 1;
            train_loss_acc += total;
        }
        let train_loss = train_loss_acc / steps_per_epoch as f64;

        // validation
        let (val_loss, val_acc) = if val_pairs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate_loss_acc(&mut state.model, &val_pairs, &spec.loss, spec.train.batch_size)
        };
        state.epoch += 1;

        let seconds = if spec.train.deterministic {
            0.0
        } else {
            t0.elapsed().as_secs_f64()
        };
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr,
            seconds,
        });

        let improved = val_loss.is_finite()
            && best.as_ref().map(|(_, b, _)| val_loss < *b).unwrap_or(true);
        if improved {
            best = Some((epoch, val_loss, snapshot(&mut state.model)));
            if let Some(dir) = out_dir {
                let meta = spec.meta(state.epoch, state.step);
                checkpoint::save(dir.join("checkpoint-best"), &meta, &mut state.model, None)?;
            }
        }
        if let Some(dir) = out_dir {
            let cadence = spec.train.checkpoint_every;
            if cadence > 0 && state.epoch % cadence == 0 {
                let meta = spec.meta(state.epoch, state.step);
                checkpoint::save(
                    dir.join(format!("checkpoint-epoch{:04}", state.epoch)),
                    &meta,
                    &mut state.model,
                    Some(&state.adam),
                )?;
            }
        }
    }
    if let Some(dir) = out_dir {
        let meta = spec.meta(state.epoch, state.step);
        checkpoint::save(
            dir.join("checkpoint-last"),
            &meta,
            &mut state.model,
            Some(&state.adam),
        )?;
    }
    Ok(FitResult { state, best, log })
}

/// Mean total loss and time-arrow accuracy of a pair collection, in
/// evaluation mode.
pub fn evaluate_loss_acc<F: Real>(
    model: &mut TapModel<F>,
    pairs: &[PatchPair],
    loss_cfg: &LossConfig,
    batch_size: usize,
) -> (f64, f64) {
    let mut loss_acc = 0f64;
    let mut correct = 0usize;
    let mut n = 0usize;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let (batch, labels) = pairs_to_batch::<F>(chunk);
        let (logits, z) = model.forward_pair(&batch, false);
        let (ce, _) = classification_loss(&logits, &labels);
        let mut chunk_loss = ce.as_f64();
        if loss_cfg.lambda > 0.0 {
            let (dec, _) = crate::loss::decorrelation_loss(&z, loss_cfg);
            chunk_loss += loss_cfg.lambda * dec.as_f64();
        }
        loss_acc += chunk_loss * chunk.len() as f64;
        for (i, lab) in labels.iter().enumerate() {
            let pred = if logits[[i, 0]] >= logits[[i, 1]] { 0 } else { 1 };
            if pred == lab.index() {
                correct += 1;
            }
        }
        n += chunk.len();
    }
    (loss_acc / n as f64, correct as f64 / n as f64)
}

/// Accuracy report, optionally stratified by region type.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub overall: f64,
    pub count: usize,
    pub by_region: Vec<(RegionType, f64, usize)>,
}

/// Fraction of pairs whose argmax logit matches the label; stratified when
/// region tags are present.
pub fn evaluate_accuracy<F: Real>(
    model: &mut TapModel<F>,
    pairs: &[PatchPair],
    batch_size: usize,
) -> EvalReport {
    assert!(!pairs.is_empty(), "empty evaluation set");
    let mut correct_total = 0usize;
    let mut per_region: std::collections::BTreeMap<u8, (usize, usize)> = Default::default();
    let key = |r: RegionType| match r {
        RegionType::Background => 0u8,
        RegionType::Interphase => 1,
        RegionType::Mitotic => 2,
    };
    for chunk in pairs.chunks(batch_size.max(1)) {
        let (batch, labels) = pairs_to_batch::<F>(chunk);
        let (logits, _) = model.forward_pair(&batch, false);
        for (i, lab) in labels.iter().enumerate() {
            let pred = if logits[[i, 0]] >= logits[[i, 1]] { 0 } else { 1 };
            let ok = pred == lab.index();
            correct_total += ok as usize;
            if let Some(r) = chunk[i].region {
                let e = per_region.entry(key(r)).or_insert((0, 0));
                e.0 += ok as usize;
                e.1 += 1;
            }
        }
    }
    let by_region = per_region
        .into_iter()
        .map(|(k, (c, n))| {
            let r = match k {
                0 => RegionType::Background,
                1 => RegionType::Interphase,
                _ => RegionType::Mitotic,
            };
            (r, c as f64 / n as f64, n)
        })
        .collect();
    EvalReport {
        overall: correct_total as f64 / pairs.len() as f64,
        count: pairs.len(),
        by_region,
    }
}

/// One head-ablation run.
pub struct AblationRun {
    pub head: String,
    pub seed: u64,
    pub param_count: usize,
    pub log: Vec<EpochRecord>,
}

/// Train the equivariant and the plain-CNN head under identical data/seed
/// pairing and return the per-run logs.
pub fn head_ablation<F: Real>(
    data: &TrainData<'_>,
    base: &PretrainSpec,
    seeds: &[u64],
) -> Result<Vec<AblationRun>, TrainError> {
    use crate::model::{HeadChoice, HeadConfig, PlainHeadConfig};
    let mut out = Vec::new();
    for &seed in seeds {
        for head in ["equivariant", "plain_cnn"] {
            let mut spec = base.clone();
            spec.train.seed = seed;
            spec.sampler.seed = seed; // identical data stream across head types
            if let Some(a) = &mut spec.augment {
                a.seed = seed;
            }
            spec.model.head = match head {
                "equivariant" => HeadChoice::Equivariant(HeadConfig::default()),
                _ => HeadChoice::PlainCnn(PlainHeadConfig::default()),
            };
            let mut result = fit::<F>(data, &spec, None, None)?;
            out.push(AblationRun {
                head: head.to_string(),
                seed,
                param_count: head_param_count(&mut result.state.model),
                log: result.log,
            });
        }
    }
    Ok(out)
}

fn head_param_count<F: Real>(model: &mut TapModel<F>) -> usize {
    let mut n = 0;
    model.for_each_param(&mut |p| {
        if p.name.starts_with("head.") {
            n += p.value.len();
        }
    });
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FeatureExtractorConfig, HeadChoice, HeadConfig};
    use crate::synth::{generate, SynthConfig};

    fn tiny_spec(seed: u64) -> PretrainSpec {
        PretrainSpec {
            model: TapModelConfig {
                extractor: FeatureExtractorConfig {
                    depth: 1,
                    base_channels: 4,
                    out_channels: 4,
                    convs_per_block: 1,
                    ..Default::default()
                },
                head: HeadChoice::Equivariant(HeadConfig {
                    hidden: vec![8],
                    leaky_slope: 0.01,
                }),
            },
            sampler: SamplerConfig {
                patch_h: 16,
                patch_w: 16,
                context_margin: 0,
                samples_per_epoch: 10,
                seed,
                ..Default::default()
            },
            augment: None,
            loss: LossConfig::default(),
            train: TrainConfig {
                epochs: 1,
                batch_size: 2,
                val_samples: 16,
                seed,
                deterministic: true,
                ..Default::default()
            },
            normalization: NormalizationConfig::None,
        }
    }

    fn small_data() -> crate::synth::SynthVideo {
        generate(&SynthConfig {
            frames: 30,
            height: 48,
            width: 48,
            blob_count: 4,
            division_rate: 0.1,
            seed: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn one_epoch_ten_samples_batch_two_is_five_steps() {
        let sv = small_data();
        let videos = [sv.video];
        let data = TrainData {
            videos: &videos,
            train_sets: vec![(0..27).collect()],
            val_sets: vec![(27..30).collect()],
        };
        let spec = tiny_spec(1);
        let result = fit::<f32>(&data, &spec, None, None).unwrap();
        assert_eq!(result.state.step, 5);
        assert_eq!(result.log.len(), 1);
    }

    #[test]
    fn lr_schedule_matches_closed_form() {
        let cfg = TrainConfig {
            cycle_epochs: 20,
            peak_lr: 4e-4,
            floor_lr: 4e-5,
            ..Default::default()
        };
        assert!((cyclic_lr(&cfg, 0) - 4e-5).abs() < 1e-12);
        assert!((cyclic_lr(&cfg, 10) - 4e-4).abs() < 1e-12);
        assert!((cyclic_lr(&cfg, 20) - 4e-5).abs() < 1e-12);
        // pointwise check of the triangle
        for e in 0..60 {
            let phase = (e % 20) as f64 / 20.0;
            let want = 4e-5 + (4e-4 - 4e-5) * (1.0 - (2.0 * phase - 1.0).abs());
            assert!((cyclic_lr(&cfg, e) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn single_pair_overfit_drives_loss_to_zero() {
        // capacity sanity check: lambda = 0, one memorizable pair
        let sv = small_data();
        let videos = [sv.video];
        let data = TrainData {
            videos: &videos,
            // exactly one valid (t, t+1) start: frames {0, 1}
            train_sets: vec![vec![0, 1]],
            val_sets: vec![vec![]],
        };
        let mut spec = tiny_spec(3);
        spec.loss.lambda = 0.0;
        spec.sampler.samples_per_epoch = 8;
        spec.sampler.patch_h = 48;
        spec.sampler.patch_w = 48;
        spec.train.batch_size = 8;
        spec.train.epochs = 300;
        spec.train.peak_lr = 5e-3;
        spec.train.floor_lr = 5e-3;
        let result = fit::<f32>(&data, &spec, None, None).unwrap();
        let last = result.log.last().unwrap();
        assert!(
            last.train_loss < 0.05,
            "single-pair training loss {} did not collapse",
            last.train_loss
        );
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_exactly() {
        let sv = small_data();
        let videos = [sv.video];
        let data = TrainData {
            videos: &videos,
            train_sets: vec![(0..27).collect()],
            val_sets: vec![(27..30).collect()],
        };
        let mut spec = tiny_spec(7);
        spec.sampler.samples_per_epoch = 20;
        spec.train.batch_size = 4;
        spec.train.epochs = 4;
        let full = fit::<f32>(&data, &spec, None, None).unwrap();

        let mut spec_a = spec.clone();
        spec_a.train.epochs = 2;
        let part = fit::<f32>(&data, &spec_a, None, None).unwrap();
        let resumed = fit::<f32>(&data, &spec, Some(part.state), None).unwrap();

        let full_tail: Vec<_> = full.log[2..].to_vec();
        assert_eq!(resumed.log, full_tail, "resumed log differs");
        // parameters bit-identical
        let mut a = Vec::new();
        let mut fm = full.state.model;
        fm.for_each_param(&mut |p| a.push(p.value.to_vec()));
        let mut b = Vec::new();
        let mut rm = resumed.state.model;
        rm.for_each_param(&mut |p| b.push(p.value.to_vec()));
        assert_eq!(a, b);
    }

    #[test]
    fn log_csv_roundtrip_format() {
        let log = vec![EpochRecord {
            epoch: 0,
            train_loss: 0.693147,
            val_loss: 0.7,
            val_acc: 0.5,
            lr: 4e-5,
            seconds: 0.0,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_log_csv(&p, &log).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,val_acc,lr,seconds"));
        assert!(text.contains("0,0.693147,0.700000,0.500000,0.00004000,0.000"));
    }

    #[test]
    fn noise_video_stays_at_chance() {
        // no-leakage invariant: all augmentations on, pure-noise input
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        let mut frames = ndarray::Array3::<f32>::zeros((30, 48, 48));
        frames.mapv_inplace(|_| rng.random_range(0.0..1.0));
        let videos = [VideoSequence {
            frames,
            frame_interval_minutes: None,
            name: "noise".into(),
        }];
        let data = TrainData {
            videos: &videos,
            train_sets: vec![(0..24).collect()],
            val_sets: vec![(24..30).collect()],
        };
        let mut spec = tiny_spec(5);
        spec.augment = Some(AugmentConfig::full(5));
        spec.sampler.context_margin = 4;
        spec.sampler.samples_per_epoch = 256;
        spec.sampler.patch_h = 16;
        spec.sampler.patch_w = 16;
        spec.train.batch_size = 32;
        spec.train.epochs = 5;
        spec.train.val_samples = 512;
        let result = fit::<f32>(&data, &spec, None, None).unwrap();
        let acc = result.log.last().unwrap().val_acc;
        assert!(
            (0.45..=0.55).contains(&acc),
            "accuracy {acc} on pure noise suggests label leakage"
        );
    }
}
