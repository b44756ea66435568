// Scratch calibration run: synthetic pretext learning at desk scale.
use std::time::Instant;

use tap_core::augment::AugmentConfig;
use tap_core::loss::LossConfig;
use tap_core::model::{FeatureExtractorConfig, HeadChoice, HeadConfig, TapModelConfig};
use tap_core::sampler::{region_type_dataset, RegionAnnotation, RegionType, SamplerConfig};
use tap_core::synth::{generate, SynthConfig};
use tap_core::train::{evaluate_accuracy, fit, FitState, PretrainSpec, TrainConfig, TrainData};
use tap_core::video::NormalizationConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(12);
    let base: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(8);
    let patch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(32);
    let aug_level: u8 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(4);

    let t_gen = Instant::now();
    let train_sv = generate(&SynthConfig {
        seed: 100,
        ..Default::default()
    })
    .unwrap();
    let held_sv = generate(&SynthConfig {
        seed: 1100,
        ..Default::default()
    })
    .unwrap();
    eprintln!(
        "generated: {} train events, {} held-out events in {:.1}s",
        train_sv.events.len(),
        held_sv.events.len(),
        t_gen.elapsed().as_secs_f64()
    );

    let videos = [train_sv.video];
    let data = TrainData {
        videos: &videos,
        train_sets: vec![(0..90).collect()],
        val_sets: vec![(90..100).collect()],
    };

    let spec = PretrainSpec {
        model: TapModelConfig {
            extractor: FeatureExtractorConfig {
                depth: 2,
                base_channels: base,
                out_channels: base,
                ..Default::default()
            },
            head: HeadChoice::Equivariant(HeadConfig::default()),
        },
        sampler: SamplerConfig {
            patch_h: patch,
            patch_w: patch,
            context_margin: 8,
            samples_per_epoch: 10_000,
            seed,
            ..Default::default()
        },
        augment: if aug_level == 0 {
            None
        } else {
            Some(AugmentConfig::level(aug_level, seed))
        },
        loss: LossConfig::default(),
        train: TrainConfig {
            epochs,
            batch_size: 256,
            seed,
            val_samples: 512,
            ..Default::default()
        },
        normalization: NormalizationConfig::None,
    };

    // division-centered evaluation pairs on the held-out video
    let held_videos = [held_sv.video];
    let mut anns = Vec::new();
    for ev in &held_sv.events {
        for age in 0..ev.duration.saturating_sub(1) {
            anns.push(RegionAnnotation {
                video: 0,
                t: ev.t + age,
                row: ev.row as usize,
                col: ev.col as usize,
                region: RegionType::Mitotic,
            });
        }
    }
    let eval_cfg = SamplerConfig {
        patch_h: patch,
        patch_w: patch,
        context_margin: 0,
        seed: 7,
        ..spec.sampler.clone()
    };
    let event_pairs = region_type_dataset(&held_videos, &anns, &eval_cfg).unwrap();
    eprintln!("{} division eval pairs", event_pairs.len());

    let mut state: Option<FitState<f32>> = None;
    let mut done = 0usize;
    while done < epochs {
        let target = (done + 3).min(epochs);
        let mut s = spec.clone();
        s.train.epochs = target;
        let t0 = Instant::now();
        let result = fit::<f32>(&data, &s, state.take(), None).unwrap();
        let dt = t0.elapsed().as_secs_f64();
        let mut st = result.state;
        let report = evaluate_accuracy(&mut st.model, &event_pairs, 256);
        for r in &result.log {
            eprintln!(
                "epoch {:2} train {:.4} val {:.4} acc {:.3} lr {:.5}",
                r.epoch, r.train_loss, r.val_loss, r.val_acc, r.lr
            );
        }
        eprintln!(
            ">>> after {:2} epochs: division-acc {:.3} ({} pairs) [{:.1}s for {} epochs = {:.1}s/epoch]",
            target,
            report.overall,
            report.count,
            dt,
            target - done,
            dt / (target - done) as f64
        );
        state = Some(st);
        done = target;
    }
}
