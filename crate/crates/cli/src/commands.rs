//! Subcommand implementations.

use std::fs;
use std::path::Path;

use mhm_core::codec::{output_size, quantization_error, quantize, recover, HeatmapKind, HeatmapSpec};
use mhm_core::config::{parse_override_pairs, ConfigMap};
use mhm_core::detector::{log_to_csv, train_detector, DetectorConfig, DetectorParams};
use mhm_core::eval::{self, fmt_g6, Normalization};
use mhm_core::synth::{self, GenConfig};
use mhm_core::tracker::{track_clip, track_to_csv, train_tracker, TrackerConfig, TrackerParams};

/// Error with the process exit code it maps to: 2 for usage/config
/// problems, 1 for runtime failures.
pub struct CmdError {
    pub code: i32,
    pub message: String,
}

pub type CmdResult = Result<(), CmdError>;

fn usage<T>(r: mhm_core::Result<T>) -> Result<T, CmdError> {
    r.map_err(|e| CmdError { code: 2, message: e.to_string() })
}

fn runtime<T>(r: mhm_core::Result<T>) -> Result<T, CmdError> {
    r.map_err(|e| CmdError { code: 1, message: e.to_string() })
}

fn io_runtime<T>(r: std::io::Result<T>) -> Result<T, CmdError> {
    r.map_err(|e| CmdError { code: 1, message: e.to_string() })
}

/// Load a config file (if given) and fold in `--key value` overrides.
fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ConfigMap, CmdError> {
    let mut map = match path {
        Some(p) => {
            if !p.exists() {
                return Err(CmdError {
                    code: 2,
                    message: format!("config file {} does not exist", p.display()),
                });
            }
            usage(ConfigMap::from_file(p))?
        }
        None => ConfigMap::empty("<defaults>"),
    };
    let pairs = usage(parse_override_pairs(overrides))?;
    map.apply_overrides(&pairs);
    Ok(map)
}

fn write_run_txt(out: &Path, subcommand: &str, body: &str) -> CmdResult {
    io_runtime(fs::create_dir_all(out))?;
    let text = format!("subcommand = {subcommand}\n{body}");
    io_runtime(fs::write(out.join("run.txt"), text))
}

// ---------------------------------------------------------------------------

pub fn analyze_quant(p: f64, q: f64, face_size: u32, l_list: &[u32], out: &Path) -> CmdResult {
    if l_list.is_empty() {
        return Err(CmdError { code: 2, message: "--L-list must not be empty".into() });
    }
    let mut csv = String::from("L,L_over_F,x,y,p_recovered,q_recovered,E\n");
    println!("{:>6} {:>8} {:>6} {:>6} {:>12} {:>12} {:>8}", "L", "L/F", "x", "y", "p'", "q'", "E");
    for &l in l_list {
        let spec = usage(HeatmapSpec::new(face_size, l, 1.0))?;
        let (x, y) = usage(quantize(p, q, &spec))?;
        let (pr, qr) = usage(recover(x, y, &spec))?;
        let e = usage(quantization_error(p, q, &spec))?;
        let ratio = l as f64 / face_size as f64;
        println!(
            "{l:>6} {:>8} {x:>6} {y:>6} {:>12} {:>12} {:>8}",
            fmt_g6(ratio),
            fmt_g6(pr),
            fmt_g6(qr),
            fmt_g6(e)
        );
        csv.push_str(&format!(
            "{l},{},{x},{y},{},{},{}\n",
            fmt_g6(ratio),
            fmt_g6(pr),
            fmt_g6(qr),
            fmt_g6(e)
        ));
    }
    write_run_txt(
        out,
        "analyze-quant",
        &format!("p = {p}\nq = {q}\nface_size = {face_size}\nl_list = {l_list:?}\n"),
    )?;
    io_runtime(fs::write(out.join("quant.csv"), csv))
}

pub fn gen_data(config: Option<&Path>, out: &Path, overrides: &[String]) -> CmdResult {
    let mut map = load_config(config, overrides)?;
    let cfg = usage(GenConfig::from_map(&mut map))?;
    usage(map.finish())?;
    let data = runtime(synth::generate(&cfg))?;
    runtime(synth::write_dataset(out, &cfg, &data))?;
    write_run_txt(out, "gen-data", &cfg.to_kv())?;
    println!(
        "wrote {} samples and {} clips to {}",
        data.samples.len(),
        data.clips.len(),
        out.display()
    );
    Ok(())
}

fn split_tail<T>(items: &[T], frac: f64) -> (&[T], &[T]) {
    let n_val = ((items.len() as f64 * frac).round() as usize).min(items.len().saturating_sub(1));
    items.split_at(items.len() - n_val)
}

pub fn train_detect(
    config: Option<&Path>,
    data: &Path,
    val_frac: f64,
    out: &Path,
    overrides: &[String],
) -> CmdResult {
    let mut map = load_config(config, overrides)?;
    let cfg = usage(DetectorConfig::from_map(&mut map))?;
    usage(map.finish())?;
    usage(cfg.validate())?;
    let samples = runtime(synth::load_samples(data))?;
    if samples.is_empty() {
        return Err(CmdError { code: 1, message: format!("no samples under {}", data.display()) });
    }
    let (train, val) = split_tail(&samples, val_frac);
    let result = runtime(train_detector(train, val, &cfg))?;
    write_run_txt(
        out,
        "train-detect",
        &format!("{}data = {}\nval_frac = {val_frac}\n", cfg.to_kv(), data.display()),
    )?;
    runtime(result.params.save(&out.join("checkpoint.mhm")))?;
    io_runtime(fs::write(out.join("metrics.csv"), log_to_csv(&result.log)))?;
    if let Some(at) = result.diverged {
        return Err(CmdError {
            code: 1,
            message: format!("training aborted on non-finite loss at {at}; last good checkpoint kept"),
        });
    }
    if let Some(last) = result.log.last() {
        println!("final train loss {} val NRMSE {}%", fmt_g6(last.train_loss), fmt_g6(last.val_nrmse));
    }
    Ok(())
}

pub fn train_track(
    config: Option<&Path>,
    data: &Path,
    val_frac: f64,
    out: &Path,
    overrides: &[String],
) -> CmdResult {
    let mut map = load_config(config, overrides)?;
    let cfg = usage(TrackerConfig::from_map(&mut map))?;
    usage(map.finish())?;
    usage(cfg.validate())?;
    let clips = runtime(synth::load_clips(data))?;
    if clips.is_empty() {
        return Err(CmdError { code: 1, message: format!("no clips under {}", data.display()) });
    }
    let (train, val) = split_tail(&clips, val_frac);
    let result = runtime(train_tracker(train, val, &cfg, None))?;
    write_run_txt(
        out,
        "train-track",
        &format!("{}data = {}\nval_frac = {val_frac}\n", cfg.to_kv(), data.display()),
    )?;
    runtime(result.params.save(&out.join("checkpoint.mhm")))?;
    io_runtime(fs::write(out.join("metrics_phase1.csv"), log_to_csv(&result.phase1_log)))?;
    io_runtime(fs::write(out.join("metrics_phase2.csv"), log_to_csv(&result.phase2_log)))?;
    // tracking output for the validation clips
    for (i, clip) in val.iter().enumerate() {
        let tracked = runtime(track_clip(clip, &result.params, &cfg))?;
        io_runtime(fs::write(out.join(format!("track_{i:04}.csv")), track_to_csv(&tracked)))?;
    }
    if let Some(at) = result.diverged {
        return Err(CmdError {
            code: 1,
            message: format!("training aborted on non-finite loss at {at}; last good checkpoint kept"),
        });
    }
    if let Some(last) = result.phase2_log.last() {
        println!("final phase-2 loss {} val NRMSE {}%", fmt_g6(last.train_loss), fmt_g6(last.val_nrmse));
    }
    Ok(())
}

pub fn eval(
    config: Option<&Path>,
    checkpoint: &Path,
    data: &Path,
    kind: &str,
    out: &Path,
    overrides: &[String],
) -> CmdResult {
    let mut map = load_config(config, overrides)?;
    match kind {
        "detector" => {
            let cfg = usage(DetectorConfig::from_map(&mut map))?;
            usage(map.finish())?;
            usage(cfg.validate())?;
            let params = runtime(DetectorParams::load(checkpoint, &cfg))?;
            let samples = runtime(synth::load_samples(data))?;
            let (left, right) = usage(eval::default_interocular(cfg.landmarks))?;
            let report = runtime(eval::evaluate_detector(
                &params,
                &cfg,
                &samples,
                &Normalization::InterOcular { left, right },
            ))?;
            let mut csv = String::from("sample,nrmse\n");
            for (i, v) in report.per_sample.iter().enumerate() {
                csv.push_str(&format!("{i},{}\n", fmt_g6(*v)));
            }
            write_run_txt(
                out,
                "eval",
                &format!(
                    "kind = detector\ncheckpoint = {}\ndata = {}\n{}",
                    checkpoint.display(),
                    data.display(),
                    cfg.to_kv()
                ),
            )?;
            io_runtime(fs::write(out.join("eval.csv"), csv))?;
            let mut summary = format!("mean_nrmse = {}\n", fmt_g6(report.mean));
            for (name, v) in &report.groups {
                summary.push_str(&format!("group_{name} = {}\n", fmt_g6(*v)));
            }
            io_runtime(fs::write(out.join("eval_summary.txt"), &summary))?;
            println!("mean NRMSE {}% over {} samples", fmt_g6(report.mean), report.per_sample.len());
            Ok(())
        }
        "tracker" => {
            let cfg = usage(TrackerConfig::from_map(&mut map))?;
            usage(map.finish())?;
            usage(cfg.validate())?;
            let params = runtime(TrackerParams::load(checkpoint, &cfg))?;
            let clips = runtime(synth::load_clips(data))?;
            let (left, right) = usage(eval::default_interocular(cfg.detector.landmarks))?;
            let norm = Normalization::InterOcular { left, right };
            write_run_txt(
                out,
                "eval",
                &format!(
                    "kind = tracker\ncheckpoint = {}\ndata = {}\n{}",
                    checkpoint.display(),
                    data.display(),
                    cfg.to_kv()
                ),
            )?;
            for (i, clip) in clips.iter().enumerate() {
                let tracked = runtime(track_clip(clip, &params, &cfg))?;
                io_runtime(fs::write(out.join(format!("track_{i:04}.csv")), track_to_csv(&tracked)))?;
            }
            let mean = runtime(eval::evaluate_tracker(&params, &cfg, &clips, &norm))?;
            io_runtime(fs::write(out.join("eval_summary.txt"), format!("mean_nrmse = {}\n", fmt_g6(mean))))?;
            println!("mean NRMSE {}% over {} clips", fmt_g6(mean), clips.len());
            Ok(())
        }
        other => Err(CmdError { code: 2, message: format!("unknown eval kind {other:?}, expected detector or tracker") }),
    }
}

pub fn sweep(config: Option<&Path>, out: &Path, overrides: &[String]) -> CmdResult {
    let mut map = load_config(config, overrides)?;
    let base = usage(DetectorConfig::from_map(&mut map))?;
    let l_values = usage(map.get_list("sweep_l_values", &[16u32, 64, 192]))?;
    let seeds = usage(map.get_list("sweep_seeds", &[0u64, 1, 2]))?;
    let train_count: usize = usage(map.get("train_count", 500))?;
    let test_count: usize = usage(map.get("test_count", 100))?;
    let val_count: usize = usage(map.get("val_count", 50))?;
    let data_seed: u64 = usage(map.get("data_seed", 10_000))?;
    usage(map.finish())?;

    let gen = GenConfig {
        face_size: base.face_size,
        landmarks: base.landmarks,
        count: train_count + test_count,
        clips: 0,
        seed: data_seed,
        ..GenConfig::default()
    };
    let data = runtime(synth::generate(&gen))?;
    let (train, test) = data.samples.split_at(train_count);
    let val = &train[train_count.saturating_sub(val_count)..];

    let rows = runtime(eval::resolution_sweep(&base, &l_values, train, val, test, &seeds))?;
    write_run_txt(
        out,
        "sweep",
        &format!(
            "{}sweep_l_values = {l_values:?}\nsweep_seeds = {seeds:?}\ntrain_count = {train_count}\n\
             test_count = {test_count}\nval_count = {val_count}\ndata_seed = {data_seed}\n",
            base.to_kv()
        ),
    )?;
    io_runtime(fs::write(out.join("sweep.csv"), eval::sweep_to_csv(&rows)))?;
    for row in &rows {
        println!(
            "L {:4} seed {}: NRMSE {}%",
            row.heatmap_size,
            row.seed,
            fmt_g6(row.nrmse)
        );
    }
    Ok(())
}

pub fn ablate(param: &str, config: Option<&Path>, out: &Path, overrides: &[String]) -> CmdResult {
    let mut map = load_config(config, overrides)?;
    match param {
        "gamma" => {
            let base = usage(DetectorConfig::from_map(&mut map))?;
            let values = usage(map.get_list("ablate_values", &[0.0f64, 0.4]))?;
            let seeds = usage(map.get_list("ablate_seeds", &[0u64, 1, 2]))?;
            let train_count: usize = usage(map.get("train_count", 500))?;
            let test_count: usize = usage(map.get("test_count", 100))?;
            let val_count: usize = usage(map.get("val_count", 50))?;
            let data_seed: u64 = usage(map.get("data_seed", 10_000))?;
            usage(map.finish())?;
            let gen = GenConfig {
                face_size: base.face_size,
                landmarks: base.landmarks,
                count: train_count + test_count,
                clips: 0,
                seed: data_seed,
                ..GenConfig::default()
            };
            let data = runtime(synth::generate(&gen))?;
            let (train, test) = data.samples.split_at(train_count);
            let val = &train[train_count.saturating_sub(val_count)..];
            let rows = runtime(eval::gamma_ablation(&base, &values, train, val, test, &seeds))?;
            write_run_txt(
                out,
                "ablate",
                &format!(
                    "param = gamma\n{}ablate_values = {values:?}\nablate_seeds = {seeds:?}\n\
                     train_count = {train_count}\ntest_count = {test_count}\nval_count = {val_count}\ndata_seed = {data_seed}\n",
                    base.to_kv()
                ),
            )?;
            io_runtime(fs::write(out.join("ablation.csv"), eval::ablation_to_csv(&rows)))?;
            for (v, mean) in eval::mean_by_value(&rows) {
                println!("gamma {v}: mean NRMSE {}%", fmt_g6(mean));
            }
            Ok(())
        }
        "lambda" => {
            let base = usage(TrackerConfig::from_map(&mut map))?;
            let values = usage(map.get_list("ablate_values", &[0.0f64, 0.3]))?;
            let seeds = usage(map.get_list("ablate_seeds", &[0u64, 1, 2]))?;
            let train_clips: usize = usage(map.get("train_clips", 40))?;
            let test_clips: usize = usage(map.get("test_clips", 10))?;
            let val_clips: usize = usage(map.get("val_clips", 4))?;
            let motion_scale: f64 = usage(map.get("motion_scale", 1.0))?;
            let occlusion_prob: f64 = usage(map.get("occlusion_prob", 0.3))?;
            let data_seed: u64 = usage(map.get("data_seed", 20_000))?;
            usage(map.finish())?;
            let gen = GenConfig {
                face_size: base.detector.face_size,
                landmarks: base.detector.landmarks,
                count: 0,
                clips: train_clips + test_clips,
                clip_length: base.clip_length,
                motion_scale,
                occlusion_prob,
                seed: data_seed,
            };
            let data = runtime(synth::generate(&gen))?;
            let (train, test) = data.clips.split_at(train_clips);
            let val = &train[train_clips.saturating_sub(val_clips)..];
            let rows = runtime(eval::lambda_ablation(&base, &values, train, val, test, &seeds))?;
            write_run_txt(
                out,
                "ablate",
                &format!(
                    "param = lambda\n{}ablate_values = {values:?}\nablate_seeds = {seeds:?}\n\
                     train_clips = {train_clips}\ntest_clips = {test_clips}\nval_clips = {val_clips}\n\
                     motion_scale = {motion_scale}\nocclusion_prob = {occlusion_prob}\ndata_seed = {data_seed}\n",
                    base.to_kv()
                ),
            )?;
            io_runtime(fs::write(out.join("ablation.csv"), eval::ablation_to_csv(&rows)))?;
            for (v, mean) in eval::mean_by_value(&rows) {
                println!("lambda {v}: mean NRMSE {}%", fmt_g6(mean));
            }
            Ok(())
        }
        other => Err(CmdError { code: 2, message: format!("unknown ablation parameter {other:?}, expected gamma or lambda") }),
    }
}

const BENCH_BATCH: u64 = 10;

pub fn bench_mem(landmarks: u64, l_list: &[u64], kind: &str, out: &Path) -> CmdResult {
    if landmarks == 0 || l_list.is_empty() {
        return Err(CmdError { code: 2, message: "need --N >= 1 and a nonempty --L-list".into() });
    }
    let hk = match kind {
        "1d" => HeatmapKind::OneD,
        "2d" => HeatmapKind::TwoD,
        other => return Err(CmdError { code: 2, message: format!("unknown kind {other:?}, expected 1d or 2d") }),
    };
    let mut ls = l_list.to_vec();
    ls.sort_unstable();
    let mut csv = String::from("N,L,kind,points,requested_bytes,alloc_ok,measured_bytes,ratio_2d_over_1d\n");
    println!(
        "{:>4} {:>6} {:>4} {:>12} {:>16} {:>8} {:>16} {:>8}",
        "N", "L", "kind", "points", "requested", "alloc", "measured", "2d/1d"
    );
    for &l in &ls {
        let points = output_size(landmarks, l, hk);
        let requested = BENCH_BATCH * points * 8;
        // Actually reserve the buffer a batch would need; a refusal is a
        // data row, not a crash.
        let mut buf: Vec<f64> = Vec::new();
        let total = (BENCH_BATCH * points) as usize;
        let (ok, measured) = match buf.try_reserve_exact(total) {
            Ok(()) => (true, buf.capacity() as u64 * 8),
            Err(_) => (false, 0),
        };
        drop(buf);
        let ratio = l as f64 / 2.0;
        csv.push_str(&format!(
            "{landmarks},{l},{kind},{points},{requested},{ok},{measured},{}\n",
            fmt_g6(ratio)
        ));
        println!(
            "{landmarks:>4} {l:>6} {kind:>4} {points:>12} {requested:>16} {ok:>8} {measured:>16} {:>8}",
            fmt_g6(ratio)
        );
    }
    write_run_txt(
        out,
        "bench-mem",
        &format!("landmarks = {landmarks}\nl_list = {ls:?}\nkind = {kind}\nbatch = {BENCH_BATCH}\n"),
    )?;
    io_runtime(fs::write(out.join("bench_mem.csv"), csv))
}
