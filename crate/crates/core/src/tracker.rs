//! Video tracker: per-frame detection plus λ-decayed temporal refinement.
//!
//! Each frame runs the detector to get per-axis heatmap stacks `E_t`.
//! An encoder compresses them to features `U_t`; those are fused with an
//! exponentially decayed sum of past features,
//!
//! ```text
//!   V_t = U_t + Σ_{τ<t} λ^{t-τ} U_τ
//! ```
//!
//! maintained as a streaming accumulator `A_{t+1} = λ·(A_t + U_t)` =
//! `λ·V_t`, which is algebraically identical to the sum with O(1) memory.
//! A decoder turns `V_t` into an additive heatmap correction, and the
//! refined heatmaps `E_t + E'_t` are argmax-decoded. With λ = 0 the past
//! never enters the computation at all.

use crate::codec::LandmarkSet;
use crate::config::ConfigMap;
use crate::detector::{
    self, decode_heatmap_rows, detector_forward, targets_for, ConvLayer, ConvLayerVar,
    DeconvLayer, DeconvLayerVar, DetectorConfig, DetectorParams, DetectorVars, EpochStat,
};
use crate::error::{Error, Result};
use crate::eval;
use crate::optim::Adam;
use crate::rng::Rng;
use crate::synth::{Clip, Image, Sample};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrackerConfig {
    pub detector: DetectorConfig,
    /// Temporal decay λ in [0, 1]; 0 disables refinement history.
    pub lambda: f64,
    pub clip_length: usize,
    pub tracker_learning_rate: f64,
    pub tracker_epochs: usize,
    pub tracker_seed: u64,
    /// Train the detector jointly in phase 2 instead of freezing it.
    pub fine_tune_detector: bool,
    /// Channel width of the heatmap encoder/decoder.
    pub tracker_channels: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            detector: DetectorConfig::default(),
            lambda: 0.3,
            clip_length: 8,
            tracker_learning_rate: 1e-4,
            tracker_epochs: 20,
            tracker_seed: 0,
            fine_tune_detector: false,
            tracker_channels: 8,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        let bad = |msg: String| Err(Error::Invalid { op: "tracker_config", msg });
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.clip_length < 1 {
            return bad("clip_length must be at least 1".into());
        }
        if self.detector.heatmap_size % 4 != 0 {
            return bad(format!(
                "heatmap_size {} must be divisible by 4 for the two stride-2 encoder stages",
                self.detector.heatmap_size
            ));
        }
        if self.tracker_channels == 0 {
            return bad("tracker_channels must be at least 1".into());
        }
        if self.tracker_epochs == 0 {
            return bad("tracker_epochs must be at least 1".into());
        }
        if self.tracker_learning_rate < 0.0 {
            return bad("tracker_learning_rate must be nonnegative".into());
        }
        Ok(())
    }

    pub fn from_map(map: &mut ConfigMap) -> Result<TrackerConfig> {
        let detector = DetectorConfig::from_map(map)?;
        let d = TrackerConfig::default();
        Ok(TrackerConfig {
            detector,
            lambda: map.get("lambda", d.lambda)?,
            clip_length: map.get("clip_length", d.clip_length)?,
            tracker_learning_rate: map.get("tracker_learning_rate", d.tracker_learning_rate)?,
            tracker_epochs: map.get("tracker_epochs", d.tracker_epochs)?,
            tracker_seed: map.get("tracker_seed", d.tracker_seed)?,
            fine_tune_detector: map.get("fine_tune_detector", d.fine_tune_detector)?,
            tracker_channels: map.get("tracker_channels", d.tracker_channels)?,
        })
    }

    pub fn to_kv(&self) -> String {
        format!(
            "{}lambda = {}\nclip_length = {}\ntracker_learning_rate = {}\ntracker_epochs = {}\n\
             tracker_seed = {}\nfine_tune_detector = {}\ntracker_channels = {}\n",
            self.detector.to_kv(),
            self.lambda,
            self.clip_length,
            self.tracker_learning_rate,
            self.tracker_epochs,
            self.tracker_seed,
            self.fine_tune_detector,
            self.tracker_channels,
        )
    }
}

/// Detector weights plus the temporal encoder/decoder stacks.
#[derive(Debug, Clone)]
pub struct TrackerParams {
    pub detector: DetectorParams,
    enc_x: Vec<ConvLayer>,
    enc_y: Vec<ConvLayer>,
    dec_x: Vec<DeconvLayer>,
    dec_y: Vec<DeconvLayer>,
}

impl TrackerParams {
    /// Attach freshly initialized tracker stages to a detector.
    pub fn init(detector: DetectorParams, cfg: &TrackerConfig, rng: &mut Rng) -> Result<TrackerParams> {
        cfg.validate()?;
        let n = cfg.detector.landmarks;
        let c = cfg.tracker_channels;
        let enc = |rng: &mut Rng| {
            vec![
                ConvLayer::new(n, c, 1, 3, rng),
                ConvLayer::new(c, c, 1, 3, rng),
            ]
        };
        let dec = |rng: &mut Rng| {
            vec![
                DeconvLayer::new(c, c, 1, 2, rng),
                DeconvLayer::new(c, n, 1, 2, rng),
            ]
        };
        Ok(TrackerParams {
            detector,
            enc_x: enc(rng),
            enc_y: enc(rng),
            dec_x: dec(rng),
            dec_y: dec(rng),
        })
    }

    fn tracker_tensor_names(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, layers) in [("enc_x", &self.enc_x), ("enc_y", &self.enc_y)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), &l.weight));
                out.push((format!("{name}.{i}.bias"), &l.bias));
            }
        }
        for (name, layers) in [("dec_x", &self.dec_x), ("dec_y", &self.dec_y)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), &l.weight));
                out.push((format!("{name}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .detector
            .named()
            .into_iter()
            .map(|(n, t)| (format!("detector.{n}"), t))
            .collect();
        out.extend(self.tracker_tensor_names());
        out
    }

    /// Mutable phase-2 view: tracker stages, then the detector when it is
    /// being fine-tuned. Order matches [`TrackerVars::phase2_ordered`].
    pub fn phase2_named_mut(&mut self, fine_tune: bool) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (name, layers) in [("enc_x", &mut self.enc_x), ("enc_y", &mut self.enc_y)] {
            for (i, l) in layers.iter_mut().enumerate() {
                out.push((format!("{name}.{i}.weight"), &mut l.weight));
                out.push((format!("{name}.{i}.bias"), &mut l.bias));
            }
        }
        for (name, layers) in [("dec_x", &mut self.dec_x), ("dec_y", &mut self.dec_y)] {
            for (i, l) in layers.iter_mut().enumerate() {
                out.push((format!("{name}.{i}.weight"), &mut l.weight));
                out.push((format!("{name}.{i}.bias"), &mut l.bias));
            }
        }
        if fine_tune {
            out.extend(
                self.detector
                    .named_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("detector.{n}"), t)),
            );
        }
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save(path, &self.named())
    }

    pub fn load(path: &std::path::Path, cfg: &TrackerConfig) -> Result<TrackerParams> {
        let records = crate::checkpoint::load(path)?;
        let mut rng = Rng::new(0);
        let det = DetectorParams::init(&cfg.detector, &mut rng)?;
        let mut params = TrackerParams::init(det, cfg, &mut rng)?;
        let mut targets: Vec<(String, &mut Tensor)> = params
            .detector
            .named_mut()
            .into_iter()
            .map(|(n, t)| (format!("detector.{n}"), t))
            .collect();
        // Split restore: detector names first, then tracker stages.
        let (det_records, trk_records): (Vec<_>, Vec<_>) =
            records.into_iter().partition(|(n, _)| n.starts_with("detector."));
        crate::checkpoint::restore(det_records, &mut targets)?;
        drop(targets);
        let mut trk_targets: Vec<(String, &mut Tensor)> = Vec::new();
        for (name, layers) in [("enc_x", &mut params.enc_x), ("enc_y", &mut params.enc_y)] {
            for (i, l) in layers.iter_mut().enumerate() {
                trk_targets.push((format!("{name}.{i}.weight"), &mut l.weight));
                trk_targets.push((format!("{name}.{i}.bias"), &mut l.bias));
            }
        }
        for (name, layers) in [("dec_x", &mut params.dec_x), ("dec_y", &mut params.dec_y)] {
            for (i, l) in layers.iter_mut().enumerate() {
                trk_targets.push((format!("{name}.{i}.weight"), &mut l.weight));
                trk_targets.push((format!("{name}.{i}.bias"), &mut l.bias));
            }
        }
        crate::checkpoint::restore(trk_records, &mut trk_targets)?;
        Ok(params)
    }
}

pub struct TrackerVars {
    pub detector: DetectorVars,
    enc_x: Vec<ConvLayerVar>,
    enc_y: Vec<ConvLayerVar>,
    dec_x: Vec<DeconvLayerVar>,
    dec_y: Vec<DeconvLayerVar>,
}

impl TrackerParams {
    /// Lift for one pass; the detector part is trainable only when
    /// fine-tuning.
    pub fn lift(&self, tape: &mut Tape, train_tracker: bool, fine_tune: bool) -> TrackerVars {
        TrackerVars {
            detector: self.detector.lift(tape, fine_tune),
            enc_x: self.enc_x.iter().map(|l| l.lift(tape, train_tracker)).collect(),
            enc_y: self.enc_y.iter().map(|l| l.lift(tape, train_tracker)).collect(),
            dec_x: self.dec_x.iter().map(|l| l.lift(tape, train_tracker)).collect(),
            dec_y: self.dec_y.iter().map(|l| l.lift(tape, train_tracker)).collect(),
        }
    }
}

impl TrackerVars {
    /// Rebuild from the phase-2 flat layout (fine-tune variant: tracker
    /// stages then detector); inverse of
    /// [`TrackerVars::phase2_ordered`] with `fine_tune = true`.
    pub fn from_phase2_ordered(vars: &[Var], cfg: &TrackerConfig) -> Result<TrackerVars> {
        // enc layers and dec layers are two each, two tensors per layer.
        let trk_len = 4 * 2 * 2;
        if vars.len() < trk_len {
            return Err(Error::invalid("from_phase2_ordered", "too few vars"));
        }
        let layer_pairs = |chunk: &[Var]| -> Vec<(Var, Var)> {
            chunk.chunks(2).map(|p| (p[0], p[1])).collect()
        };
        let enc_x = layer_pairs(&vars[0..4])
            .into_iter()
            .map(|(w, b)| ConvLayerVar { w, b })
            .collect();
        let enc_y = layer_pairs(&vars[4..8])
            .into_iter()
            .map(|(w, b)| ConvLayerVar { w, b })
            .collect();
        let dec_x = layer_pairs(&vars[8..12])
            .into_iter()
            .map(|(w, b)| DeconvLayerVar { w, b })
            .collect();
        let dec_y = layer_pairs(&vars[12..16])
            .into_iter()
            .map(|(w, b)| DeconvLayerVar { w, b })
            .collect();
        let detector = DetectorVars::from_ordered(&vars[trk_len..], &cfg.detector)?;
        Ok(TrackerVars { detector, enc_x, enc_y, dec_x, dec_y })
    }

    /// Vars aligned with [`TrackerParams::phase2_named_mut`].
    pub fn phase2_ordered(&self, fine_tune: bool) -> Vec<Var> {
        let mut out = Vec::new();
        for layers in [&self.enc_x, &self.enc_y] {
            for l in layers {
                out.push(l.w);
                out.push(l.b);
            }
        }
        for layers in [&self.dec_x, &self.dec_y] {
            for l in layers {
                out.push(l.w);
                out.push(l.b);
            }
        }
        if fine_tune {
            out.extend(self.detector.ordered());
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

/// Encode a stacked `[N, L]` heatmap matrix into temporal features via
/// two stride-2 1D convolutions over the heatmap axis (landmarks are the
/// input channels).
pub fn encode_heatmaps(tape: &mut Tape, e: Var, enc: &[ConvLayerVar], cfg: &TrackerConfig) -> Result<Var> {
    let n = cfg.detector.landmarks;
    let l = cfg.detector.heatmap_size as usize;
    if tape.shape(e) != [n, l] {
        return Err(Error::invalid(
            "encode_heatmaps",
            format!("expected [{n}, {l}], got {:?}", tape.shape(e)),
        ));
    }
    let mut x = tape.reshape(e, &[n, 1, l])?;
    for layer in enc {
        x = layer.forward(tape, x, (1, 2), (0, 1))?;
        x = tape.relu(x)?;
    }
    Ok(x) // [C, 1, L/4]
}

/// Decode fused features back to an `[N, L]` additive heatmap correction.
pub fn decode_refinement(tape: &mut Tape, v: Var, dec: &[DeconvLayerVar], cfg: &TrackerConfig) -> Result<Var> {
    let n = cfg.detector.landmarks;
    let l = cfg.detector.heatmap_size as usize;
    let mut x = v;
    for (i, layer) in dec.iter().enumerate() {
        x = layer.forward(tape, x, (1, 2))?;
        if i + 1 < dec.len() {
            x = tape.relu(x)?;
        }
    }
    if tape.shape(x) != [n, 1, l] {
        return Err(Error::invalid(
            "decode_refinement",
            format!("decoder produced {:?}, expected [{n}, 1, {l}]", tape.shape(x)),
        ));
    }
    tape.reshape(x, &[n, l])
}

/// One fusion step on the tape. `V_t = U_t + A_t`, `A_{t+1} = λ·V_t`.
/// λ = 0 returns `U_t` itself and keeps the accumulator empty, so the
/// output provably never touches past frames.
pub fn fuse_step(tape: &mut Tape, u: Var, acc: Option<Var>, lambda: f64) -> Result<(Var, Option<Var>)> {
    if lambda == 0.0 {
        return Ok((u, None));
    }
    let v = match acc {
        None => u,
        Some(a) => {
            if tape.shape(a) != tape.shape(u) {
                return Err(Error::shape("temporal_fuse", tape.shape(a), tape.shape(u)));
            }
            tape.add(u, a)?
        }
    };
    let next = tape.scale(v, lambda)?;
    Ok((v, Some(next)))
}

/// Streaming accumulators for one video.
#[derive(Debug, Clone, Default)]
pub struct TrackerState {
    acc_x: Option<Tensor>,
    acc_y: Option<Tensor>,
    frame: usize,
}

impl TrackerState {
    pub fn new() -> TrackerState {
        TrackerState::default()
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn accumulators(&self) -> (Option<&Tensor>, Option<&Tensor>) {
        (self.acc_x.as_ref(), self.acc_y.as_ref())
    }
}

/// Plain-value fusion for streaming use, identical arithmetic to
/// [`fuse_step`]. `t` is the 1-based frame index and must equal
/// `state.frame() + 1`.
pub fn temporal_fuse(
    u_x: &Tensor,
    u_y: &Tensor,
    state: &TrackerState,
    lambda: f64,
    t: usize,
) -> Result<((Tensor, Tensor), TrackerState)> {
    if t != state.frame + 1 {
        return Err(Error::invalid(
            "temporal_fuse",
            format!("frame {t} out of order; accumulator is at frame {}", state.frame),
        ));
    }
    let fuse_axis = |u: &Tensor, acc: &Option<Tensor>| -> Result<(Tensor, Option<Tensor>)> {
        if lambda == 0.0 {
            return Ok((u.clone(), None));
        }
        let v = match acc {
            None => u.clone(),
            Some(a) => {
                if a.shape() != u.shape() {
                    return Err(Error::shape("temporal_fuse", a.shape(), u.shape()));
                }
                let data = u.data().iter().zip(a.data()).map(|(x, y)| x + y).collect();
                Tensor::from_vec(u.shape(), data)?
            }
        };
        let next = Tensor::from_vec(v.shape(), v.data().iter().map(|x| x * lambda).collect())?;
        Ok((v, Some(next)))
    };
    let (v_x, next_x) = fuse_axis(u_x, &state.acc_x)?;
    let (v_y, next_y) = fuse_axis(u_y, &state.acc_y)?;
    Ok((
        (v_x, v_y),
        TrackerState { acc_x: next_x, acc_y: next_y, frame: t },
    ))
}

pub struct FrameOutput {
    pub refined_x: Var,
    pub refined_y: Var,
    pub acc_x: Option<Var>,
    pub acc_y: Option<Var>,
}

/// Refinement pipeline for one frame, given the detected heatmap stacks.
pub fn refine_frame(
    tape: &mut Tape,
    e_x: Var,
    e_y: Var,
    acc_x: Option<Var>,
    acc_y: Option<Var>,
    vars: &TrackerVars,
    cfg: &TrackerConfig,
) -> Result<FrameOutput> {
    let u_x = encode_heatmaps(tape, e_x, &vars.enc_x, cfg)?;
    let u_y = encode_heatmaps(tape, e_y, &vars.enc_y, cfg)?;
    let (v_x, acc_x) = fuse_step(tape, u_x, acc_x, cfg.lambda)?;
    let (v_y, acc_y) = fuse_step(tape, u_y, acc_y, cfg.lambda)?;
    let r_x = decode_refinement(tape, v_x, &vars.dec_x, cfg)?;
    let r_y = decode_refinement(tape, v_y, &vars.dec_y, cfg)?;
    let refined_x = tape.add(e_x, r_x)?;
    let refined_y = tape.add(e_y, r_y)?;
    Ok(FrameOutput { refined_x, refined_y, acc_x, acc_y })
}

/// Track one frame: detect, refine with the running state, decode.
/// Returns the landmark prediction, both refined heatmap stacks, and the
/// advanced state.
pub fn track_step(
    frame: &Image,
    state: &TrackerState,
    params: &TrackerParams,
    cfg: &TrackerConfig,
) -> Result<(LandmarkSet, (Tensor, Tensor), TrackerState)> {
    let mut tape = Tape::new();
    let vars = params.lift(&mut tape, false, false);
    let (e_x, e_y) = detector_forward(&mut tape, frame, &vars.detector, &cfg.detector)?;
    let acc_x = state.acc_x.as_ref().map(|t| tape.leaf(t, false));
    let acc_y = state.acc_y.as_ref().map(|t| tape.leaf(t, false));
    let out = refine_frame(&mut tape, e_x, e_y, acc_x, acc_y, &vars, cfg)?;
    let refined_x = tape.to_tensor(out.refined_x);
    let refined_y = tape.to_tensor(out.refined_y);
    let coords = decode_heatmap_rows(&refined_x, &refined_y, &cfg.detector)?;
    let next = TrackerState {
        acc_x: out.acc_x.map(|v| tape.to_tensor(v)),
        acc_y: out.acc_y.map(|v| tape.to_tensor(v)),
        frame: state.frame + 1,
    };
    Ok((coords, (refined_x, refined_y), next))
}

/// Track every frame of a clip from a fresh state.
pub fn track_clip(clip: &Clip, params: &TrackerParams, cfg: &TrackerConfig) -> Result<Vec<LandmarkSet>> {
    let mut state = TrackerState::new();
    let mut out = Vec::with_capacity(clip.frames.len());
    for frame in &clip.frames {
        let (coords, _, next) = track_step(frame, &state, params, cfg)?;
        out.push(coords);
        state = next;
    }
    Ok(out)
}

/// Σ over frames and landmarks of squared heatmap errors on both axes.
pub fn tracker_loss(tape: &mut Tape, frames: &[(Var, Var)], targets: &[(Var, Var)]) -> Result<Var> {
    if frames.len() != targets.len() || frames.is_empty() {
        return Err(Error::invalid(
            "tracker_loss",
            format!("{} predictions vs {} targets", frames.len(), targets.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for ((hx, hy), (gx, gy)) in frames.iter().zip(targets) {
        let l = detector::detector_loss(tape, *hx, *hy, *gx, *gy)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("nonempty"))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct TrackerTrainResult {
    pub params: TrackerParams,
    pub phase1_log: Vec<EpochStat>,
    pub phase2_log: Vec<EpochStat>,
    pub diverged: Option<String>,
}

/// Flatten clips into individual frames and train the detector on them.
pub fn pretrain_detector_on_clips(
    train_clips: &[Clip],
    val_clips: &[Clip],
    det_cfg: &DetectorConfig,
) -> Result<DetectorParams> {
    let flatten = |clips: &[Clip]| -> Vec<Sample> {
        clips
            .iter()
            .flat_map(|c| {
                c.frames
                    .iter()
                    .zip(&c.tracks)
                    .map(|(f, t)| Sample { image: f.clone(), landmarks: t.clone() })
            })
            .collect()
    };
    let train = flatten(train_clips);
    let val = flatten(val_clips);
    let result = detector::train_detector(&train, &val, det_cfg)?;
    if let Some(at) = result.diverged {
        return Err(Error::Diverged { at: format!("detector pretraining: {at}") });
    }
    Ok(result.params)
}

/// Two-phase training: detector on individual frames, then the temporal
/// stages on full clips with backpropagation through the unrolled fusion.
/// A pretrained detector can be supplied to skip phase 1.
pub fn train_tracker(
    train_clips: &[Clip],
    val_clips: &[Clip],
    cfg: &TrackerConfig,
    pretrained: Option<DetectorParams>,
) -> Result<TrackerTrainResult> {
    cfg.validate()?;
    if train_clips.is_empty() {
        return Err(Error::invalid("train_tracker", "empty clip set"));
    }
    if train_clips.iter().any(|c| c.frames.is_empty()) {
        return Err(Error::invalid("train_tracker", "clip with no frames"));
    }

    // Phase 1.
    let (detector_params, phase1_log) = match pretrained {
        Some(p) => (p, Vec::new()),
        None => {
            let flatten = |clips: &[Clip]| -> Vec<Sample> {
                clips
                    .iter()
                    .flat_map(|c| {
                        c.frames
                            .iter()
                            .zip(&c.tracks)
                            .map(|(f, t)| Sample { image: f.clone(), landmarks: t.clone() })
                    })
                    .collect()
            };
            let train = flatten(train_clips);
            let val = flatten(val_clips);
            let result = detector::train_detector(&train, &val, &cfg.detector)?;
            if let Some(at) = result.diverged {
                return Ok(TrackerTrainResult {
                    params: TrackerParams::init(result.params, cfg, &mut Rng::new(cfg.tracker_seed))?,
                    phase1_log: result.log,
                    phase2_log: Vec::new(),
                    diverged: Some(format!("phase 1: {at}")),
                });
            }
            (result.params, result.log)
        }
    };

    // Phase 2.
    let mut rng = Rng::new(cfg.tracker_seed);
    let mut params = TrackerParams::init(detector_params, cfg, &mut rng)?;
    let fine_tune = cfg.fine_tune_detector;

    // With the detector frozen, its per-frame heatmaps are constants;
    // compute them once.
    let cache: Option<Vec<Vec<(Tensor, Tensor)>>> = if fine_tune {
        None
    } else {
        let mut all = Vec::with_capacity(train_clips.len());
        for clip in train_clips {
            let mut per_frame = Vec::with_capacity(clip.frames.len());
            for frame in &clip.frames {
                let mut tape = Tape::new();
                let vars = params.detector.lift(&mut tape, false);
                let (ex, ey) = detector_forward(&mut tape, frame, &vars, &cfg.detector)?;
                per_frame.push((tape.to_tensor(ex), tape.to_tensor(ey)));
            }
            all.push(per_frame);
        }
        Some(all)
    };

    let clip_targets: Vec<Vec<(Tensor, Tensor)>> = train_clips
        .iter()
        .map(|c| {
            c.tracks
                .iter()
                .map(|t| targets_for(t, &cfg.detector))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(cfg.tracker_learning_rate);
    let mut phase2_log = Vec::with_capacity(cfg.tracker_epochs);
    let mut last_good = params.clone();
    let batch = cfg.detector.batch_size;
    for epoch in 0..cfg.tracker_epochs {
        let mut order: Vec<usize> = (0..train_clips.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let vars = params.lift(&mut tape, true, fine_tune);
            let mut total: Option<Var> = None;
            for &ci in chunk {
                let clip = &train_clips[ci];
                let mut acc_x = None;
                let mut acc_y = None;
                let mut frames = Vec::with_capacity(clip.frames.len());
                let mut targets = Vec::with_capacity(clip.frames.len());
                for t in 0..clip.frames.len() {
                    let (e_x, e_y) = match &cache {
                        Some(c) => {
                            let (ex, ey) = &c[ci][t];
                            (tape.leaf(ex, false), tape.leaf(ey, false))
                        }
                        None => detector_forward(&mut tape, &clip.frames[t], &vars.detector, &cfg.detector)?,
                    };
                    let out = refine_frame(&mut tape, e_x, e_y, acc_x, acc_y, &vars, cfg)?;
                    acc_x = out.acc_x;
                    acc_y = out.acc_y;
                    frames.push((out.refined_x, out.refined_y));
                    let (gx, gy) = &clip_targets[ci][t];
                    targets.push((tape.leaf(gx, false), tape.leaf(gy, false)));
                }
                let clip_loss = tracker_loss(&mut tape, &frames, &targets)?;
                total = Some(match total {
                    None => clip_loss,
                    Some(t) => tape.add(t, clip_loss)?,
                });
            }
            let total = total.expect("nonempty chunk");
            let batch_loss = tape.scale(total, 1.0 / chunk.len() as f64)?;
            let loss_value = tape.value(batch_loss)[0];
            if !loss_value.is_finite() {
                return Ok(TrackerTrainResult {
                    params: last_good,
                    phase1_log,
                    phase2_log,
                    diverged: Some(format!("phase 2, epoch {epoch}")),
                });
            }
            tape.backward(batch_loss)?;
            let var_list = vars.phase2_ordered(fine_tune);
            let mut named = params.phase2_named_mut(fine_tune);
            for ((_, t), v) in named.iter_mut().zip(&var_list) {
                t.set_grad(tape.grad(*v).expect("trainable leaf").to_vec())?;
            }
            let mut refs: Vec<&mut Tensor> = named.into_iter().map(|(_, t)| t).collect();
            adam.step(&mut refs)?;
            epoch_loss += loss_value;
            batches += 1;
        }
        let val_nrmse = if val_clips.is_empty() {
            f64::NAN
        } else {
            let (left, right) = eval::default_interocular(cfg.detector.landmarks)?;
            eval::evaluate_tracker(&params, cfg, val_clips, &eval::Normalization::InterOcular { left, right })?
        };
        phase2_log.push(EpochStat {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_nrmse,
        });
        last_good = params.clone();
    }
    Ok(TrackerTrainResult { params, phase1_log, phase2_log, diverged: None })
}

/// `frame,landmark,x,y` CSV for one tracked video.
pub fn track_to_csv(tracked: &[LandmarkSet]) -> String {
    let mut out = String::from("frame,landmark,x,y\n");
    for (t, lm) in tracked.iter().enumerate() {
        for (n, &(x, y)) in lm.points().iter().enumerate() {
            out.push_str(&format!("{t},{n},{},{}\n", eval::fmt_g6(x), eval::fmt_g6(y)));
        }
    }
    out
}
