// Scratch timing of one optimization step's phases.
use std::time::Instant;

use tap_core::augment::AugmentConfig;
use tap_core::loss::{total_loss, LossConfig};
use tap_core::model::{FeatureExtractorConfig, HeadChoice, HeadConfig, TapModelConfig};
use tap_core::nn::{Adam, AdamConfig, HasParams};
use tap_core::sampler::{sample_pair, SampleDomain, SamplerConfig};
use tap_core::synth::{generate, SynthConfig};
use tap_core::train::TrainData;
use tap_core::video::NormalizationConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let base: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let patch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(32);
    let batch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(256);

    let sv = generate(&SynthConfig {
        seed: 100,
        ..Default::default()
    })
    .unwrap();
    let videos = [sv.video];
    let data = TrainData {
        videos: &videos,
        train_sets: vec![(0..90).collect()],
        val_sets: vec![(90..100).collect()],
    };
    let _ = NormalizationConfig::None;
    let scfg = SamplerConfig {
        patch_h: patch,
        patch_w: patch,
        context_margin: 8,
        ..Default::default()
    };
    let acfg = AugmentConfig::level(4, 1);
    let domain = data.train_domain();

    let t0 = Instant::now();
    let pairs: Vec<_> = (0..batch as u64)
        .map(|i| sample_pair(&domain, &scfg, i).unwrap())
        .collect();
    eprintln!("sample: {:.3}s", t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let aug: Vec<_> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| tap_core::augment::augment_pair(p, &acfg, i as u64).unwrap())
        .collect();
    eprintln!("augment: {:.3}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let mut x = ndarray::Array4::<f32>::zeros((batch, 2, patch, patch));
    let mut labels = Vec::new();
    for (i, p) in aug.iter().enumerate() {
        for (t, img) in [&p.x1, &p.x2].into_iter().enumerate() {
            x.slice_mut(ndarray::s![i, t, .., ..]).assign(img);
        }
        labels.push(p.label);
    }
    eprintln!("batch assembly: {:.3}s", t0.elapsed().as_secs_f64());

    let mut rng = tap_core::sampler::draw_rng(1, 5, 0);
    let mut model = tap_core::model::TapModel::<f32>::new(
        TapModelConfig {
            extractor: FeatureExtractorConfig {
                depth: 2,
                base_channels: base,
                out_channels: base,
                ..Default::default()
            },
            head: HeadChoice::Equivariant(HeadConfig::default()),
        },
        &mut rng,
    );
    let mut adam = Adam::new(&mut model, AdamConfig::default());
    let lcfg = LossConfig::default();
    for rep in 0..3 {
        let t0 = Instant::now();
        model.zero_grads();
        let (logits, z) = model.forward_pair(&x, true);
        let t1 = Instant::now();
        let (total, _, _, dl, dz) = total_loss(&logits, &labels, &z, &lcfg);
        let t2 = Instant::now();
        model.backward_pair(&dl, dz.as_ref());
        let t3 = Instant::now();
        adam.step(&mut model, 4e-4);
        let t4 = Instant::now();
        eprintln!(
            "rep {rep}: fwd {:.3}s loss {:.3}s bwd {:.3}s adam {:.3}s total {:.3}s (loss {:.4})",
            (t1 - t0).as_secs_f64(),
            (t2 - t1).as_secs_f64(),
            (t3 - t2).as_secs_f64(),
            (t4 - t3).as_secs_f64(),
            (t4 - t0).as_secs_f64(),
            total
        );
    }
}
