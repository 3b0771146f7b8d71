//! NRMSE evaluation and the sweep/ablation harnesses.

use crate::codec::{output_size, HeatmapKind, LandmarkSet};
use crate::detector::{self, DetectorConfig};
use crate::error::{Error, Result};
use crate::synth::{Clip, Sample};
use crate::tracker::{self, TrackerConfig};

/// How the mean landmark error is normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalization {
    /// Distance between two designated eye landmarks of the ground truth.
    InterOcular { left: usize, right: usize },
    /// Caller-supplied normalizer (face size, bounding-box scale, ...).
    Explicit(f64),
}

/// Default eye landmark pair per layout: eye centers for the 5-point
/// layout, outer eye corners (36, 45) for the 68-point layout.
pub fn default_interocular(n: usize) -> Result<(usize, usize)> {
    match n {
        5 => Ok((0, 1)),
        68 => Ok((36, 45)),
        other => Err(Error::invalid(
            "nrmse",
            format!("no default eye indices for {other} landmarks; pass them explicitly"),
        )),
    }
}

/// Landmark groups for the per-area breakdown.
pub fn default_groups(n: usize) -> Vec<(String, Vec<usize>)> {
    match n {
        5 => vec![
            ("eyes".into(), vec![0, 1]),
            ("nose".into(), vec![2]),
            ("mouth".into(), vec![3, 4]),
        ],
        68 => vec![
            ("contour".into(), (0..17).collect()),
            ("eyebrows".into(), (17..27).collect()),
            ("nose".into(), (27..36).collect()),
            ("eyes".into(), (36..48).collect()),
            ("mouth".into(), (48..68).collect()),
        ],
        _ => vec![("all".into(), (0..n).collect())],
    }
}

fn normalizer(gt: &LandmarkSet, norm: &Normalization) -> Result<f64> {
    let v = match *norm {
        Normalization::InterOcular { left, right } => {
            if left >= gt.len() || right >= gt.len() || left == right {
                return Err(Error::invalid(
                    "nrmse",
                    format!("eye indices ({left}, {right}) invalid for {} landmarks", gt.len()),
                ));
            }
            let (lx, ly) = gt.get(left);
            let (rx, ry) = gt.get(right);
            ((lx - rx).powi(2) + (ly - ry).powi(2)).sqrt()
        }
        Normalization::Explicit(v) => v,
    };
    if !(v > 0.0) {
        return Err(Error::invalid("nrmse", format!("normalizer {v} must be positive")));
    }
    Ok(v)
}

/// Mean per-landmark Euclidean error over the normalizer, in percent.
pub fn nrmse(pred: &LandmarkSet, gt: &LandmarkSet, norm: &Normalization) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "nrmse",
            format!("landmark counts differ: {} vs {}", pred.len(), gt.len()),
        ));
    }
    let d = normalizer(gt, norm)?;
    let mean: f64 = pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(p, g)| ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt())
        .sum::<f64>()
        / pred.len() as f64;
    Ok(100.0 * mean / d)
}

/// NRMSE restricted to a subset of landmark indices.
pub fn nrmse_group(pred: &LandmarkSet, gt: &LandmarkSet, norm: &Normalization, group: &[usize]) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::invalid("nrmse", "empty landmark group"));
    }
    let d = normalizer(gt, norm)?;
    let mut total = 0.0;
    for &i in group {
        if i >= pred.len() {
            return Err(Error::invalid("nrmse", format!("group index {i} out of range")));
        }
        let (p, g) = (pred.get(i), gt.get(i));
        total += ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt();
    }
    Ok(100.0 * total / group.len() as f64 / d)
}

/// Evaluation summary over a sample set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub groups: Vec<(String, f64)>,
    pub config_echo: String,
}

pub fn evaluate_detector(
    params: &detector::DetectorParams,
    cfg: &DetectorConfig,
    samples: &[Sample],
    norm: &Normalization,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "empty sample set"));
    }
    let groups = default_groups(cfg.landmarks);
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut group_totals = vec![0.0; groups.len()];
    for s in samples {
        let pred = detector::detect(&s.image, params, cfg)?;
        per_sample.push(nrmse(&pred, &s.landmarks, norm)?);
        for (gi, (_, idxs)) in groups.iter().enumerate() {
            group_totals[gi] += nrmse_group(&pred, &s.landmarks, norm, idxs)?;
        }
    }
    let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    let groups = groups
        .into_iter()
        .zip(group_totals)
        .map(|((name, _), total)| (name, total / per_sample.len() as f64))
        .collect();
    Ok(EvalReport {
        per_sample,
        mean,
        groups,
        config_echo: cfg.to_kv(),
    })
}

/// Mean NRMSE of tracked landmarks over every frame of every clip.
pub fn evaluate_tracker(
    params: &tracker::TrackerParams,
    cfg: &TrackerConfig,
    clips: &[Clip],
    norm: &Normalization,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::invalid("evaluate", "empty clip set"));
    }
    let mut total = 0.0;
    let mut frames = 0usize;
    for clip in clips {
        let tracked = tracker::track_clip(clip, params, cfg)?;
        for (pred, gt) in tracked.iter().zip(&clip.tracks) {
            total += nrmse(pred, gt, norm)?;
            frames += 1;
        }
    }
    Ok(total / frames as f64)
}

// ---------------------------------------------------------------------------
// Sweeps and ablations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub heatmap_size: u32,
    pub l_over_f: f64,
    pub seed: u64,
    pub nrmse: f64,
    pub output_points_1d: u64,
    pub output_points_2d: u64,
}

/// Train/evaluate the detector across heatmap resolutions, sharing data
/// and seeds across cells so the resolution is the only difference.
pub fn resolution_sweep(
    base: &DetectorConfig,
    l_values: &[u32],
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(l_values.len() * seeds.len());
    for &l in l_values {
        let cfg_l = base.with_heatmap_size(l)?;
        for &seed in seeds {
            let cfg = DetectorConfig { seed, ..cfg_l.clone() };
            let result = detector::train_detector(train, val, &cfg)?;
            if let Some(at) = result.diverged {
                return Err(Error::Diverged { at: format!("sweep L={l} seed={seed}: {at}") });
            }
            let (left, right) = default_interocular(cfg.landmarks)?;
            let report = evaluate_detector(
                &result.params,
                &cfg,
                test,
                &Normalization::InterOcular { left, right },
            )?;
            rows.push(SweepRow {
                heatmap_size: l,
                l_over_f: l as f64 / base.face_size as f64,
                seed,
                nrmse: report.mean,
                output_points_1d: output_size(cfg.landmarks as u64, l as u64, HeatmapKind::OneD),
                output_points_2d: output_size(cfg.landmarks as u64, l as u64, HeatmapKind::TwoD),
            });
        }
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("L,L_over_F,seed,nrmse,output_points_1d,output_points_2d\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.heatmap_size,
            fmt_g6(r.l_over_f),
            r.seed,
            fmt_g6(r.nrmse),
            r.output_points_1d,
            r.output_points_2d
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub param: &'static str,
    pub value: f64,
    pub seed: u64,
    pub nrmse: f64,
}

pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("param,value,seed,nrmse\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.param,
            fmt_g6(r.value),
            r.seed,
            fmt_g6(r.nrmse)
        ));
    }
    out
}

/// Detector ablation over the co-attention weight γ.
pub fn gamma_ablation(
    base: &DetectorConfig,
    gammas: &[f64],
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(gammas.len() * seeds.len());
    for &gamma in gammas {
        for &seed in seeds {
            let cfg = DetectorConfig { gamma, seed, ..base.clone() };
            cfg.validate()?;
            let result = detector::train_detector(train, val, &cfg)?;
            if let Some(at) = result.diverged {
                return Err(Error::Diverged { at: format!("gamma={gamma} seed={seed}: {at}") });
            }
            let (left, right) = default_interocular(cfg.landmarks)?;
            let report = evaluate_detector(
                &result.params,
                &cfg,
                test,
                &Normalization::InterOcular { left, right },
            )?;
            rows.push(AblationRow { param: "gamma", value: gamma, seed, nrmse: report.mean });
        }
    }
    Ok(rows)
}

/// Tracker ablation over the temporal decay λ. The detector pretraining
/// phase does not depend on λ, so it runs once per seed and is shared by
/// every λ cell.
pub fn lambda_ablation(
    base: &TrackerConfig,
    lambdas: &[f64],
    train_clips: &[Clip],
    val_clips: &[Clip],
    test_clips: &[Clip],
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(lambdas.len() * seeds.len());
    for &seed in seeds {
        let det_cfg = DetectorConfig { seed, ..base.detector.clone() };
        let pre = tracker::pretrain_detector_on_clips(train_clips, val_clips, &det_cfg)?;
        for &lambda in lambdas {
            let cfg = TrackerConfig {
                lambda,
                tracker_seed: seed,
                detector: det_cfg.clone(),
                ..base.clone()
            };
            cfg.validate()?;
            let result = tracker::train_tracker(train_clips, val_clips, &cfg, Some(pre.clone()))?;
            if let Some(at) = result.diverged {
                return Err(Error::Diverged { at: format!("lambda={lambda} seed={seed}: {at}") });
            }
            let (left, right) = default_interocular(cfg.detector.landmarks)?;
            let nr = evaluate_tracker(
                &result.params,
                &cfg,
                test_clips,
                &Normalization::InterOcular { left, right },
            )?;
            rows.push(AblationRow { param: "lambda", value: lambda, seed, nrmse: nr });
        }
    }
    Ok(rows)
}

/// Mean NRMSE per distinct parameter value of an ablation table.
pub fn mean_by_value(rows: &[AblationRow]) -> Vec<(f64, f64)> {
    let mut values: Vec<f64> = Vec::new();
    for r in rows {
        if !values.contains(&r.value) {
            values.push(r.value);
        }
    }
    values
        .into_iter()
        .map(|v| {
            let cell: Vec<f64> = rows.iter().filter(|r| r.value == v).map(|r| r.nrmse).collect();
            (v, cell.iter().sum::<f64>() / cell.len() as f64)
        })
        .collect()
}

/// Format a float with 6 significant digits (CSV convention).
pub fn fmt_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if (-4..6).contains(&mag) {
        let decimals = (5 - mag).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // trim trailing zeros but keep at least one digit
        if s.contains('.') {
            let t = s.trim_end_matches('0').trim_end_matches('.');
            t.to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}
