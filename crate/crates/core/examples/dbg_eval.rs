// Scratch: orientation of event-centered evaluation pairs.
use tap_core::loss::TimeArrowLabel;
use tap_core::sampler::{region_type_dataset, RegionAnnotation, RegionType, SamplerConfig};
use tap_core::synth::{generate, SynthConfig};

fn main() {
    let sv = generate(&SynthConfig {
        seed: 1100,
        ..Default::default()
    })
    .unwrap();
    let mut anns = Vec::new();
    for ev in &sv.events {
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
    let cfg = SamplerConfig {
        patch_h: 24,
        patch_w: 24,
        context_margin: 0,
        seed: 7,
        ..Default::default()
    };
    let videos = [sv.video];
    let pairs = region_type_dataset(&videos, &anns, &cfg).unwrap();
    let fwd = pairs
        .iter()
        .filter(|p| p.label == TimeArrowLabel::Forward)
        .count();
    eprintln!("{} pairs, {} forward", pairs.len(), fwd);
    // physical check: the EARLIER patch should have higher central peak
    // early in an event (children overlap), i.e. intensity spreads out over
    // time. Verify the label matches the physics for a few pairs.
    let mut consistent = 0;
    let mut total = 0;
    for p in &pairs {
        let (early, late) = match p.label {
            TimeArrowLabel::Forward => (&p.x1, &p.x2),
            TimeArrowLabel::Backward => (&p.x2, &p.x1),
        };
        let peak = |x: &ndarray::Array2<f32>| x.iter().cloned().fold(0f32, f32::max);
        // only meaningful during overlap phase; count on all anyway
        if peak(early) >= peak(late) {
            consistent += 1;
        }
        total += 1;
    }
    eprintln!("earlier-патch-has-higher-peak on {consistent}/{total}");
    // verify annotation sits inside crop and children visible: center pixel
    let p0 = &pairs[0];
    eprintln!(
        "first pair: label {:?}, source {:?}, center val x1 {:.3} x2 {:.3}",
        p0.label,
        p0.source,
        p0.x1[[12, 12]],
        p0.x2[[12, 12]]
    );
}
