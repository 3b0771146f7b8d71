// Scratch harness: resolution-trend feasibility probe.

use mhm_core::detector::{train_detector, DetectorConfig};
use mhm_core::eval::{evaluate_detector, Normalization};
use mhm_core::synth::generate_scene;

fn main() {
    let all: Vec<_> = (0..600).map(|i| generate_scene(10_000 + i, 64, 5).unwrap()).collect();
    let (train, rest) = all.split_at(450);
    let (val, test) = rest.split_at(50);
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let gain: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(16.0);
    let seed: u64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    for l in [16u32, 64, 192] {
        let cfg = DetectorConfig {
            heatmap_size: l,
            deconv_stride: l as usize / 16,
            epochs,
            deconv_gain: gain,
            seed,
            ..DetectorConfig::default()
        };
        let t0 = std::time::Instant::now();
        let r = train_detector(train, val, &cfg).unwrap();
        let report = evaluate_detector(
            &r.params,
            &cfg,
            test,
            &Normalization::InterOcular { left: 0, right: 1 },
        )
        .unwrap();
        println!(
            "L {l:3}: test NRMSE {:6.3}%  (train_loss {:.3}, val {:.3}%, {:.1?})",
            report.mean,
            r.log.last().unwrap().train_loss,
            r.log.last().unwrap().val_nrmse,
            t0.elapsed()
        );
    }
}
