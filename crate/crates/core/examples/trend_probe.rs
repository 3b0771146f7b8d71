// Scratch: lambda-ablation feasibility probe.

use mhm_core::detector::DetectorConfig;
use mhm_core::eval::{lambda_ablation, mean_by_value};
use mhm_core::synth::{generate, GenConfig};
use mhm_core::tracker::TrackerConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let p2_epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let p1_epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let seeds: Vec<u64> = args
        .get(3)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0]);
    let base = TrackerConfig {
        detector: DetectorConfig { epochs: p1_epochs, ..DetectorConfig::default() },
        tracker_epochs: p2_epochs,
        ..TrackerConfig::default()
    };
    let gen = GenConfig {
        face_size: 64,
        landmarks: 5,
        count: 0,
        clips: 50,
        clip_length: 8,
        motion_scale: 1.0,
        occlusion_prob: 0.3,
        seed: 20_000,
    };
    let data = generate(&gen).unwrap();
    let (train, test) = data.clips.split_at(40);
    let val = &train[36..];
    let t0 = std::time::Instant::now();
    let rows = lambda_ablation(&base, &[0.0, 0.3], train, val, test, &seeds).unwrap();
    for r in &rows {
        println!("lambda {} seed {}: {:.3}%", r.value, r.seed, r.nrmse);
    }
    for (v, m) in mean_by_value(&rows) {
        println!("mean lambda {v}: {m:.3}%");
    }
    println!("elapsed {:.0?}", t0.elapsed());
}
