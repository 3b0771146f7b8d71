//! Image-to-1D-heatmaps landmark detector.
//!
//! Pipeline: a compact hourglass backbone produces a square feature map
//! at F/4 resolution; two head stacks compress it along opposite axes
//! with strided convolutions (the x head squeezes rows, the y head
//! squeezes columns); co-attention couples the two stacks channel by
//! channel; a second conv stage finishes the compression and emits
//! per-landmark channel groups; and a shared transposed convolution with
//! kernel extent equal to its stride expands each group to the heatmap
//! resolution L. Decoding is a per-row argmax scaled by F/L.

use crate::coattn::{coattention_forward, AxisFeatures, CoAttentionParams, CoAttentionVars};
use crate::codec::{self, Axis, Heatmap1D, HeatmapSpec, LandmarkSet};
use crate::config::ConfigMap;
use crate::error::{Error, Result};
use crate::eval;
use crate::optim::Adam;
use crate::rng::Rng;
use crate::synth::{Image, Sample};
use crate::tensor::{Tape, Tensor, Var};

/// Everything that fixes the detector's architecture and training run.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    /// Input face resolution F (square, pixels).
    pub face_size: u32,
    /// Heatmap resolution L (grid points per axis).
    pub heatmap_size: u32,
    /// Landmark count N.
    pub landmarks: usize,
    pub hourglass_depth: u32,
    pub base_channels: usize,
    /// Deconvolution kernel = stride M; L must equal M · (F/4).
    pub deconv_stride: usize,
    /// Co-attention fusion weight γ; 0 disables the module.
    pub gamma: f64,
    /// Gaussian target std, in heatmap grid units.
    pub sigma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Channel width of the head conv stacks.
    pub head_channels: usize,
    /// Compressed extent r the heads squeeze down to; also the
    /// co-attention feature dimension (P and Q are r×r).
    pub attn_dim: usize,
    /// Channels per landmark feeding the deconv stage.
    pub deconv_channels: usize,
    /// Constant output gain of the deconv stage. The deconv kernel is
    /// initialized near zero, so training starts from silent heatmaps
    /// and the gain sets how fast the output can move per optimizer
    /// step.
    pub deconv_gain: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            face_size: 64,
            heatmap_size: 192,
            landmarks: 5,
            hourglass_depth: 2,
            base_channels: 8,
            deconv_stride: 12,
            gamma: 0.4,
            sigma: 2.5,
            learning_rate: 1e-4,
            batch_size: 10,
            epochs: 20,
            seed: 0,
            head_channels: 8,
            attn_dim: 4,
            deconv_channels: 16,
            deconv_gain: 16.0,
        }
    }
}

impl DetectorConfig {
    /// Spatial extent of the backbone output (and of the pre-deconv
    /// feature row): F/4.
    pub fn feat_size(&self) -> usize {
        self.face_size as usize / 4
    }

    pub fn heatmap_spec(&self) -> Result<HeatmapSpec> {
        HeatmapSpec::new(self.face_size, self.heatmap_size, self.sigma)
    }

    fn cnn1_layers(&self) -> usize {
        (self.feat_size() / self.attn_dim).trailing_zeros() as usize
    }

    fn cnn2_layers(&self) -> usize {
        self.attn_dim.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid { op: "detector_config", msg });
        if self.face_size < 8 || self.face_size % 4 != 0 {
            return bad(format!("face_size {} must be a multiple of 4, at least 8", self.face_size));
        }
        let c0 = self.feat_size();
        if self.hourglass_depth < 1 {
            return bad("hourglass_depth must be at least 1".into());
        }
        let down = 1usize << self.hourglass_depth;
        if c0 % down != 0 || c0 / down < 1 {
            return bad(format!(
                "hourglass_depth {} too deep for feature size {c0}",
                self.hourglass_depth
            ));
        }
        if self.attn_dim < 2 || !self.attn_dim.is_power_of_two() {
            return bad(format!("attn_dim {} must be a power of two, at least 2", self.attn_dim));
        }
        if c0 < 2 * self.attn_dim || c0 % self.attn_dim != 0 || !(c0 / self.attn_dim).is_power_of_two() {
            return bad(format!(
                "feature size {c0} must be attn_dim {} times a power of two (at least 2)",
                self.attn_dim
            ));
        }
        if self.deconv_stride < 1 {
            return bad("deconv_stride must be at least 1".into());
        }
        if self.heatmap_size as usize != self.deconv_stride * c0 {
            return bad(format!(
                "heatmap_size {} must equal deconv_stride {} x pre-deconv extent {c0}",
                self.heatmap_size, self.deconv_stride
            ));
        }
        if self.heatmap_size < 2 {
            return bad("heatmap_size must be at least 2".into());
        }
        if self.landmarks == 0 {
            return bad("landmarks must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be positive".into());
        }
        if self.learning_rate < 0.0 {
            return bad("learning_rate must be nonnegative".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if self.base_channels == 0 || self.head_channels == 0 || self.deconv_channels == 0 {
            return bad("channel counts must be at least 1".into());
        }
        if !(self.deconv_gain > 0.0) {
            return bad("deconv_gain must be positive".into());
        }
        Ok(())
    }

    /// Read from a parsed config map; absent keys keep their defaults.
    pub fn from_map(map: &mut ConfigMap) -> Result<DetectorConfig> {
        let d = DetectorConfig::default();
        let cfg = DetectorConfig {
            face_size: map.get("face_size", d.face_size)?,
            heatmap_size: map.get("heatmap_size", d.heatmap_size)?,
            landmarks: map.get("landmarks", d.landmarks)?,
            hourglass_depth: map.get("hourglass_depth", d.hourglass_depth)?,
            base_channels: map.get("base_channels", d.base_channels)?,
            deconv_stride: map.get("deconv_stride", usize::MAX)?,
            gamma: map.get("gamma", d.gamma)?,
            sigma: map.get("sigma", d.sigma)?,
            learning_rate: map.get("learning_rate", d.learning_rate)?,
            batch_size: map.get("batch_size", d.batch_size)?,
            epochs: map.get("epochs", d.epochs)?,
            seed: map.get("seed", d.seed)?,
            head_channels: map.get("head_channels", d.head_channels)?,
            attn_dim: map.get("attn_dim", d.attn_dim)?,
            deconv_channels: map.get("deconv_channels", d.deconv_channels)?,
            deconv_gain: map.get("deconv_gain", d.deconv_gain)?,
        };
        // deconv_stride is derivable from L and F; default it that way.
        let cfg = if cfg.deconv_stride == usize::MAX {
            let c0 = cfg.feat_size().max(1);
            DetectorConfig { deconv_stride: cfg.heatmap_size as usize / c0, ..cfg }
        } else {
            cfg
        };
        Ok(cfg)
    }

    /// The `key = value` echo used for run manifests.
    pub fn to_kv(&self) -> String {
        format!(
            "face_size = {}\nheatmap_size = {}\nlandmarks = {}\nhourglass_depth = {}\n\
             base_channels = {}\ndeconv_stride = {}\ngamma = {}\nsigma = {}\n\
             learning_rate = {}\nbatch_size = {}\nepochs = {}\nseed = {}\n\
             head_channels = {}\nattn_dim = {}\ndeconv_channels = {}\ndeconv_gain = {}\n",
            self.face_size,
            self.heatmap_size,
            self.landmarks,
            self.hourglass_depth,
            self.base_channels,
            self.deconv_stride,
            self.gamma,
            self.sigma,
            self.learning_rate,
            self.batch_size,
            self.epochs,
            self.seed,
            self.head_channels,
            self.attn_dim,
            self.deconv_channels,
            self.deconv_gain,
        )
    }

    /// Derive the sibling config for a different heatmap resolution.
    pub fn with_heatmap_size(&self, l: u32) -> Result<DetectorConfig> {
        let c0 = self.feat_size();
        if l as usize % c0 != 0 {
            return Err(Error::invalid(
                "detector_config",
                format!("heatmap size {l} is not a multiple of the pre-deconv extent {c0}"),
            ));
        }
        let cfg = DetectorConfig {
            heatmap_size: l,
            deconv_stride: l as usize / c0,
            ..self.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// One convolution layer: weight `[K, C, kh, kw]` plus per-channel bias.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn new(c_in: usize, c_out: usize, kh: usize, kw: usize, rng: &mut Rng) -> ConvLayer {
        ConvLayer {
            weight: Tensor::kaiming_uniform(&[c_out, c_in, kh, kw], c_in * kh * kw, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn lift(&self, tape: &mut Tape, trainable: bool) -> ConvLayerVar {
        ConvLayerVar {
            w: tape.leaf(&self.weight, trainable),
            b: tape.leaf(&self.bias, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvLayerVar {
    pub w: Var,
    pub b: Var,
}

impl ConvLayerVar {
    pub fn forward(&self, tape: &mut Tape, x: Var, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let y = tape.conv2d(x, self.w, stride, padding)?;
        tape.add_channel_bias(y, self.b)
    }
}

/// Transposed-convolution layer: weight `[C_in, C_out, mh, mw]` with
/// kernel extent equal to stride, plus per-channel bias.
#[derive(Debug, Clone)]
pub struct DeconvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl DeconvLayer {
    pub fn new(c_in: usize, c_out: usize, mh: usize, mw: usize, rng: &mut Rng) -> DeconvLayer {
        DeconvLayer {
            weight: Tensor::kaiming_uniform(&[c_in, c_out, mh, mw], c_in, rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn lift(&self, tape: &mut Tape, trainable: bool) -> DeconvLayerVar {
        DeconvLayerVar {
            w: tape.leaf(&self.weight, trainable),
            b: tape.leaf(&self.bias, trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DeconvLayerVar {
    pub w: Var,
    pub b: Var,
}

impl DeconvLayerVar {
    pub fn forward(&self, tape: &mut Tape, x: Var, stride: (usize, usize)) -> Result<Var> {
        let y = tape.conv_transpose2d(x, self.w, stride)?;
        tape.add_channel_bias(y, self.b)
    }
}

#[derive(Debug, Clone)]
pub struct BackboneParams {
    stem1: ConvLayer,
    stem2: ConvLayer,
    down: Vec<ConvLayer>,
    skip: Vec<ConvLayer>,
    bottom: ConvLayer,
    up: Vec<ConvLayer>,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    cnn1: Vec<ConvLayer>,
    cnn2: Vec<ConvLayer>,
    deconv: DeconvLayer,
}

/// All trainable state of the detector.
#[derive(Debug, Clone)]
pub struct DetectorParams {
    pub backbone: BackboneParams,
    pub head_x: HeadParams,
    pub head_y: HeadParams,
    pub coattn: CoAttentionParams,
}

impl DetectorParams {
    /// Seed-deterministic initialization for a validated config.
    pub fn init(cfg: &DetectorConfig, rng: &mut Rng) -> Result<DetectorParams> {
        cfg.validate()?;
        let b = cfg.base_channels;
        let k = cfg.head_channels;
        let depth = cfg.hourglass_depth as usize;
        let backbone = BackboneParams {
            stem1: ConvLayer::new(3, b, 3, 3, rng),
            stem2: ConvLayer::new(b, b, 3, 3, rng),
            down: (0..depth).map(|_| ConvLayer::new(b, b, 3, 3, rng)).collect(),
            skip: (0..depth).map(|_| ConvLayer::new(b, b, 3, 3, rng)).collect(),
            bottom: ConvLayer::new(b, b, 3, 3, rng),
            up: (0..depth).map(|_| ConvLayer::new(b, b, 3, 3, rng)).collect(),
        };
        let head = |rng: &mut Rng| -> HeadParams {
            let n1 = cfg.cnn1_layers();
            let n2 = cfg.cnn2_layers();
            let ng = cfg.landmarks * cfg.deconv_channels;
            let cnn1 = (0..n1)
                .map(|i| ConvLayer::new(if i == 0 { b } else { k }, k, 3, 3, rng))
                .collect();
            let cnn2 = (0..n2)
                .map(|i| ConvLayer::new(k, if i + 1 == n2 { ng } else { k }, 3, 3, rng))
                .collect();
            let mut deconv = DeconvLayer::new(cfg.deconv_channels, 1, 1, cfg.deconv_stride, rng);
            // Near-silent output stage: Adam's second-moment estimate then
            // calibrates to fitting-phase gradients instead of to an
            // initial cleanup phase.
            for v in deconv.weight.data_mut() {
                *v *= 1e-4;
            }
            HeadParams { cnn1, cnn2, deconv }
        };
        let head_x = head(rng);
        let head_y = head(rng);
        let coattn = CoAttentionParams::new(cfg.attn_dim, cfg.gamma, rng)?;
        Ok(DetectorParams { backbone, head_x, head_y, coattn })
    }

    fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor)) {
        let conv = |name: &str, l: &'a ConvLayer, f: &mut dyn FnMut(String, &'a Tensor)| {
            f(format!("{name}.weight"), &l.weight);
            f(format!("{name}.bias"), &l.bias);
        };
        conv("backbone.stem1", &self.backbone.stem1, &mut f);
        conv("backbone.stem2", &self.backbone.stem2, &mut f);
        for (i, l) in self.backbone.down.iter().enumerate() {
            conv(&format!("backbone.down{i}"), l, &mut f);
        }
        for (i, l) in self.backbone.skip.iter().enumerate() {
            conv(&format!("backbone.skip{i}"), l, &mut f);
        }
        conv("backbone.bottom", &self.backbone.bottom, &mut f);
        for (i, l) in self.backbone.up.iter().enumerate() {
            conv(&format!("backbone.up{i}"), l, &mut f);
        }
        for (head, hp) in [("head_x", &self.head_x), ("head_y", &self.head_y)] {
            for (i, l) in hp.cnn1.iter().enumerate() {
                conv(&format!("{head}.cnn1_{i}"), l, &mut f);
            }
            for (i, l) in hp.cnn2.iter().enumerate() {
                conv(&format!("{head}.cnn2_{i}"), l, &mut f);
            }
            f(format!("{head}.deconv.weight"), &hp.deconv.weight);
            f(format!("{head}.deconv.bias"), &hp.deconv.bias);
        }
        f("coattn.p".to_string(), &self.coattn.p);
        f("coattn.q".to_string(), &self.coattn.q);
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(|n, t| out.push((n, t)));
        out
    }

    /// Mutable view in the same order as [`DetectorParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn conv(l: &mut ConvLayer) -> [&mut Tensor; 2] {
            [&mut l.weight, &mut l.bias]
        }
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        let mut tensors: Vec<&mut Tensor> = Vec::new();
        tensors.extend(conv(&mut self.backbone.stem1));
        tensors.extend(conv(&mut self.backbone.stem2));
        for l in &mut self.backbone.down {
            tensors.extend(conv(l));
        }
        for l in &mut self.backbone.skip {
            tensors.extend(conv(l));
        }
        tensors.extend(conv(&mut self.backbone.bottom));
        for l in &mut self.backbone.up {
            tensors.extend(conv(l));
        }
        for hp in [&mut self.head_x, &mut self.head_y] {
            for l in &mut hp.cnn1 {
                tensors.extend(conv(l));
            }
            for l in &mut hp.cnn2 {
                tensors.extend(conv(l));
            }
            tensors.push(&mut hp.deconv.weight);
            tensors.push(&mut hp.deconv.bias);
        }
        tensors.push(&mut self.coattn.p);
        tensors.push(&mut self.coattn.q);
        assert_eq!(names.len(), tensors.len());
        names.into_iter().zip(tensors).collect()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::checkpoint::save(path, &self.named())
    }

    pub fn load(path: &std::path::Path, cfg: &DetectorConfig) -> Result<DetectorParams> {
        let records = crate::checkpoint::load(path)?;
        let mut params = DetectorParams::init(cfg, &mut Rng::new(0))?;
        let mut targets = params.named_mut();
        crate::checkpoint::restore(records, &mut targets)?;
        Ok(params)
    }
}

/// Tape-lifted mirror of [`DetectorParams`] for one pass.
pub struct DetectorVars {
    backbone: BackboneVars,
    head_x: HeadVars,
    head_y: HeadVars,
    pub coattn: CoAttentionVars,
}

struct BackboneVars {
    stem1: ConvLayerVar,
    stem2: ConvLayerVar,
    down: Vec<ConvLayerVar>,
    skip: Vec<ConvLayerVar>,
    bottom: ConvLayerVar,
    up: Vec<ConvLayerVar>,
}

struct HeadVars {
    cnn1: Vec<ConvLayerVar>,
    cnn2: Vec<ConvLayerVar>,
    deconv: DeconvLayerVar,
}

impl DetectorParams {
    pub fn lift(&self, tape: &mut Tape, trainable: bool) -> DetectorVars {
        let conv = |l: &ConvLayer, tape: &mut Tape| l.lift(tape, trainable);
        DetectorVars {
            backbone: BackboneVars {
                stem1: conv(&self.backbone.stem1, tape),
                stem2: conv(&self.backbone.stem2, tape),
                down: self.backbone.down.iter().map(|l| l.lift(tape, trainable)).collect(),
                skip: self.backbone.skip.iter().map(|l| l.lift(tape, trainable)).collect(),
                bottom: conv(&self.backbone.bottom, tape),
                up: self.backbone.up.iter().map(|l| l.lift(tape, trainable)).collect(),
            },
            head_x: HeadVars {
                cnn1: self.head_x.cnn1.iter().map(|l| l.lift(tape, trainable)).collect(),
                cnn2: self.head_x.cnn2.iter().map(|l| l.lift(tape, trainable)).collect(),
                deconv: self.head_x.deconv.lift(tape, trainable),
            },
            head_y: HeadVars {
                cnn1: self.head_y.cnn1.iter().map(|l| l.lift(tape, trainable)).collect(),
                cnn2: self.head_y.cnn2.iter().map(|l| l.lift(tape, trainable)).collect(),
                deconv: self.head_y.deconv.lift(tape, trainable),
            },
            coattn: self.coattn.lift(tape, trainable),
        }
    }
}

impl DetectorVars {
    /// Rebuild the structured view from vars laid out in
    /// [`DetectorParams::named`] order; the inverse of
    /// [`DetectorVars::ordered`]. Used by whole-network gradient checks,
    /// which perturb the flat list.
    pub fn from_ordered(vars: &[Var], cfg: &DetectorConfig) -> Result<DetectorVars> {
        cfg.validate()?;
        let mut it = vars.iter().copied();
        let conv = move |it: &mut dyn Iterator<Item = Var>| -> Result<ConvLayerVar> {
            let w = it.next().ok_or_else(|| Error::invalid("from_ordered", "missing var"))?;
            let b = it.next().ok_or_else(|| Error::invalid("from_ordered", "missing var"))?;
            Ok(ConvLayerVar { w, b })
        };
        let depth = cfg.hourglass_depth as usize;
        let backbone = BackboneVars {
            stem1: conv(&mut it)?,
            stem2: conv(&mut it)?,
            down: (0..depth).map(|_| conv(&mut it)).collect::<Result<_>>()?,
            skip: (0..depth).map(|_| conv(&mut it)).collect::<Result<_>>()?,
            bottom: conv(&mut it)?,
            up: (0..depth).map(|_| conv(&mut it)).collect::<Result<_>>()?,
        };
        let head = |it: &mut dyn Iterator<Item = Var>| -> Result<HeadVars> {
            let cnn1 = (0..cfg.cnn1_layers()).map(|_| conv(it)).collect::<Result<_>>()?;
            let cnn2 = (0..cfg.cnn2_layers()).map(|_| conv(it)).collect::<Result<_>>()?;
            let w = it.next().ok_or_else(|| Error::invalid("from_ordered", "missing var"))?;
            let b = it.next().ok_or_else(|| Error::invalid("from_ordered", "missing var"))?;
            Ok(HeadVars { cnn1, cnn2, deconv: DeconvLayerVar { w, b } })
        };
        let head_x = head(&mut it)?;
        let head_y = head(&mut it)?;
        let p = it.next().ok_or_else(|| Error::invalid("from_ordered", "missing var"))?;
        let q = it.next().ok_or_else(|| Error::invalid("from_ordered", "missing var"))?;
        if it.next().is_some() {
            return Err(Error::invalid("from_ordered", "too many vars"));
        }
        Ok(DetectorVars {
            backbone,
            head_x,
            head_y,
            coattn: CoAttentionVars { p, q, gamma: cfg.gamma },
        })
    }

    /// Vars in the exact order of [`DetectorParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let conv = |l: &ConvLayerVar, out: &mut Vec<Var>| {
            out.push(l.w);
            out.push(l.b);
        };
        conv(&self.backbone.stem1, &mut out);
        conv(&self.backbone.stem2, &mut out);
        for l in &self.backbone.down {
            conv(l, &mut out);
        }
        for l in &self.backbone.skip {
            conv(l, &mut out);
        }
        conv(&self.backbone.bottom, &mut out);
        for l in &self.backbone.up {
            conv(l, &mut out);
        }
        for h in [&self.head_x, &self.head_y] {
            for l in &h.cnn1 {
                conv(l, &mut out);
            }
            for l in &h.cnn2 {
                conv(l, &mut out);
            }
            out.push(h.deconv.w);
            out.push(h.deconv.b);
        }
        out.push(self.coattn.p);
        out.push(self.coattn.q);
        out
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

fn stage<T>(r: Result<T>, name: &str) -> Result<T> {
    r.map_err(|e| Error::Invalid { op: "heads_forward", msg: format!("{name}: {e}") })
}

/// Hourglass feature extractor: `[3, F, F] -> [base_channels, F/4, F/4]`.
pub fn backbone_forward(tape: &mut Tape, image: Var, vars: &DetectorVars, cfg: &DetectorConfig) -> Result<Var> {
    let f = cfg.face_size as usize;
    if tape.shape(image) != [3, f, f] {
        return Err(Error::invalid(
            "backbone_forward",
            format!("expected image shape [3, {f}, {f}], got {:?}", tape.shape(image)),
        ));
    }
    let bb = &vars.backbone;
    let x = bb.stem1.forward(tape, image, (2, 2), (1, 1))?;
    let x = tape.relu(x)?;
    let x = bb.stem2.forward(tape, x, (2, 2), (1, 1))?;
    let x = tape.relu(x)?;
    hourglass(tape, x, bb, 0)
}

fn hourglass(tape: &mut Tape, x: Var, bb: &BackboneVars, level: usize) -> Result<Var> {
    let s = bb.skip[level].forward(tape, x, (1, 1), (1, 1))?;
    let s = tape.relu(s)?;
    let y = bb.down[level].forward(tape, x, (2, 2), (1, 1))?;
    let y = tape.relu(y)?;
    let y = if level + 1 < bb.down.len() {
        hourglass(tape, y, bb, level + 1)?
    } else {
        let b = bb.bottom.forward(tape, y, (1, 1), (1, 1))?;
        tape.relu(b)?
    };
    let y = tape.upsample_nearest2(y)?;
    let y = bb.up[level].forward(tape, y, (1, 1), (1, 1))?;
    let y = tape.relu(y)?;
    tape.add(y, s)
}

/// Per-axis heads with co-attention in between: feature map to a pair of
/// `[N, L]` heatmap stacks.
pub fn heads_forward(tape: &mut Tape, feat: Var, vars: &DetectorVars, cfg: &DetectorConfig) -> Result<(Var, Var)> {
    let c0 = cfg.feat_size();
    let shape = tape.shape(feat).to_vec();
    if shape.len() != 3 || shape[1] != c0 || shape[2] != c0 {
        return Err(Error::invalid(
            "heads_forward",
            format!("expected square feature map [{}, {c0}, {c0}], got {shape:?}", cfg.base_channels),
        ));
    }

    // CNN1: compress y (x head) / x (y head) down to attn_dim.
    let mut tx = feat;
    for (i, l) in vars.head_x.cnn1.iter().enumerate() {
        tx = stage(l.forward(tape, tx, (2, 1), (1, 1)), &format!("cnn1_x[{i}]"))?;
        tx = tape.relu(tx)?;
    }
    let mut ty = feat;
    for (i, l) in vars.head_y.cnn1.iter().enumerate() {
        ty = stage(l.forward(tape, ty, (1, 2), (1, 1)), &format!("cnn1_y[{i}]"))?;
        ty = tape.relu(ty)?;
    }

    // Channel-wise co-attention between the two stacks.
    let channels = cfg.head_channels;
    let mut feats = AxisFeatures { dx: Vec::with_capacity(channels), dy: Vec::with_capacity(channels) };
    for k in 0..channels {
        let xk = tape.select_channel(tx, k)?; // [r, c]
        let dx = tape.transpose2(xk)?; // [c, r]
        let yk = tape.select_channel(ty, k)?; // [c, r]
        let dy = tape.transpose2(yk)?; // [r, c]
        feats.dx.push(dx);
        feats.dy.push(dy);
    }
    let fused = stage(coattention_forward(tape, &feats, &vars.coattn), "coattention")?;

    // Restack into [K, r, c] / [K, c, r] channel maps.
    let r = cfg.attn_dim;
    let mut xs = Vec::with_capacity(channels);
    let mut ys = Vec::with_capacity(channels);
    for k in 0..channels {
        let xk = tape.transpose2(fused.dx[k])?; // [r, c]
        xs.push(tape.reshape(xk, &[1, r, c0])?);
        let yk = tape.transpose2(fused.dy[k])?; // [c, r]
        ys.push(tape.reshape(yk, &[1, c0, r])?);
    }
    let mut tx = tape.concat_channels(&xs)?;
    let mut ty = tape.concat_channels(&ys)?;

    // CNN2: finish the compression to one row/column, emitting one
    // channel group per landmark; relu everywhere except the last layer.
    let n2 = vars.head_x.cnn2.len();
    for (i, l) in vars.head_x.cnn2.iter().enumerate() {
        tx = stage(l.forward(tape, tx, (2, 1), (1, 1)), &format!("cnn2_x[{i}]"))?;
        if i + 1 < n2 {
            tx = tape.relu(tx)?;
        }
    }
    for (i, l) in vars.head_y.cnn2.iter().enumerate() {
        ty = stage(l.forward(tape, ty, (1, 2), (1, 1)), &format!("cnn2_y[{i}]"))?;
        if i + 1 < n2 {
            ty = tape.relu(ty)?;
        }
    }
    // tx: [N·G, 1, c]; ty: [N·G, c, 1] which reshapes to rows.
    let ng = cfg.landmarks * cfg.deconv_channels;
    let ty = tape.reshape(ty, &[ng, 1, c0])?;

    let hx = stage(deconv_stage(tape, tx, &vars.head_x.deconv, cfg), "deconv_x")?;
    let hy = stage(deconv_stage(tape, ty, &vars.head_y.deconv, cfg), "deconv_y")?;
    Ok((hx, hy))
}

/// Expand `[N·G, 1, c]` to `[N, L]`: per landmark, a transposed
/// convolution with kernel = stride = M over its G-channel group; the
/// kernel is shared across landmarks, so the parameter count is
/// independent of N.
fn deconv_stage(tape: &mut Tape, x: Var, deconv: &DeconvLayerVar, cfg: &DetectorConfig) -> Result<Var> {
    let gain = cfg.deconv_gain;
    let g = cfg.deconv_channels;
    let l = cfg.heatmap_size as usize;
    let mut rows = Vec::with_capacity(cfg.landmarks);
    for n in 0..cfg.landmarks {
        let group = tape.narrow_channels(x, n * g, g)?; // [G, 1, c]
        let up = deconv.forward(tape, group, (1, cfg.deconv_stride))?; // [1, 1, L]
        let up = tape.scale(up, gain)?;
        rows.push(up);
    }
    let stacked = tape.concat_channels(&rows)?; // [N, 1, L]
    tape.reshape(stacked, &[cfg.landmarks, l])
}

/// Full detector forward from a raw image to `[N, L]` heatmap stacks.
pub fn detector_forward(tape: &mut Tape, image: &Image, vars: &DetectorVars, cfg: &DetectorConfig) -> Result<(Var, Var)> {
    if image.size() != cfg.face_size {
        return Err(Error::invalid(
            "detector_forward",
            format!("image size {} does not match configured face size {}", image.size(), cfg.face_size),
        ));
    }
    let input = tape.leaf(&image.to_input(), false);
    let feat = backbone_forward(tape, input, vars, cfg)?;
    heads_forward(tape, feat, vars, cfg)
}

/// Decode `[N, L]` heatmap stacks into landmark coordinates by per-row
/// argmax.
pub fn decode_heatmap_rows(hx: &Tensor, hy: &Tensor, cfg: &DetectorConfig) -> Result<LandmarkSet> {
    let n = cfg.landmarks;
    let l = cfg.heatmap_size as usize;
    for (name, t) in [("x", hx), ("y", hy)] {
        if t.shape() != [n, l] {
            return Err(Error::invalid(
                "decode",
                format!("{name} heatmaps: expected [{n}, {l}], got {:?}", t.shape()),
            ));
        }
    }
    let spec = cfg.heatmap_spec()?;
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        let row_x = hx.data()[i * l..(i + 1) * l].to_vec();
        let row_y = hy.data()[i * l..(i + 1) * l].to_vec();
        let p = codec::decode_argmax(&Heatmap1D::from_values(spec, Axis::X, row_x)?);
        let q = codec::decode_argmax(&Heatmap1D::from_values(spec, Axis::Y, row_y)?);
        pts.push((p, q));
    }
    LandmarkSet::new(pts)
}

/// Run the detector and decode: image in, landmark coordinates out.
pub fn detect(image: &Image, params: &DetectorParams, cfg: &DetectorConfig) -> Result<LandmarkSet> {
    let mut tape = Tape::new();
    let vars = params.lift(&mut tape, false);
    let (hx, hy) = detector_forward(&mut tape, image, &vars, cfg)?;
    decode_heatmap_rows(&tape.to_tensor(hx), &tape.to_tensor(hy), cfg)
}

/// Squared-error regression loss for one sample:
/// `Σ_n ( ||hx_n - gx_n||² + ||hy_n - gy_n||² )`.
pub fn detector_loss(tape: &mut Tape, hx: Var, hy: Var, gt_x: Var, gt_y: Var) -> Result<Var> {
    let lx = tape.sum_sq_diff(hx, gt_x)?;
    let ly = tape.sum_sq_diff(hy, gt_y)?;
    tape.add(lx, ly)
}

/// Ground-truth `[N, L]` target stacks for both axes.
pub fn targets_for(landmarks: &LandmarkSet, cfg: &DetectorConfig) -> Result<(Tensor, Tensor)> {
    let spec = cfg.heatmap_spec()?;
    let n = cfg.landmarks;
    if landmarks.len() != n {
        return Err(Error::invalid(
            "targets_for",
            format!("expected {n} landmarks, got {}", landmarks.len()),
        ));
    }
    let l = cfg.heatmap_size as usize;
    let mut gx = Vec::with_capacity(n * l);
    let mut gy = Vec::with_capacity(n * l);
    for &(p, q) in landmarks.points() {
        gx.extend_from_slice(codec::encode1d(p, Axis::X, &spec)?.values());
        gy.extend_from_slice(codec::encode1d(q, Axis::Y, &spec)?.values());
    }
    Ok((Tensor::from_vec(&[n, l], gx)?, Tensor::from_vec(&[n, l], gy)?))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nrmse: f64,
}

#[derive(Debug)]
pub struct DetectorTrainResult {
    pub params: DetectorParams,
    pub log: Vec<EpochStat>,
    /// Set when training aborted on a non-finite loss; `params` then hold
    /// the last epoch-boundary checkpoint.
    pub diverged: Option<String>,
}

/// Format the metric log as `epoch,train_loss,val_nrmse` CSV.
pub fn log_to_csv(log: &[EpochStat]) -> String {
    let mut out = String::from("epoch,train_loss,val_nrmse\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{}\n",
            row.epoch,
            eval::fmt_g6(row.train_loss),
            eval::fmt_g6(row.val_nrmse)
        ));
    }
    out
}

/// Adam training with seeded shuffling; deterministic for a fixed seed.
pub fn train_detector(train: &[Sample], val: &[Sample], cfg: &DetectorConfig) -> Result<DetectorTrainResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train_detector", "empty dataset"));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut params = DetectorParams::init(cfg, &mut rng)?;
    let targets: Vec<(Tensor, Tensor)> = train
        .iter()
        .map(|s| targets_for(&s.landmarks, cfg))
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut last_good = params.clone();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let loss = detector_step(&mut params, &mut adam, train, &targets, chunk, cfg)?;
            if !loss.is_finite() {
                return Ok(DetectorTrainResult {
                    params: last_good,
                    log,
                    diverged: Some(format!("epoch {epoch}, batch {batches}")),
                });
            }
            epoch_loss += loss;
            batches += 1;
        }
        let val_nrmse = validation_nrmse(&params, cfg, val)?;
        log.push(EpochStat {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_nrmse,
        });
        last_good = params.clone();
    }
    Ok(DetectorTrainResult { params, log, diverged: None })
}

/// One optimizer step over a batch; returns the batch-mean loss value
/// (before the update).
pub fn detector_step(
    params: &mut DetectorParams,
    adam: &mut Adam,
    samples: &[Sample],
    targets: &[(Tensor, Tensor)],
    batch: &[usize],
    cfg: &DetectorConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.lift(&mut tape, true);
    let mut total: Option<Var> = None;
    for &si in batch {
        let (hx, hy) = detector_forward(&mut tape, &samples[si].image, &vars, cfg)?;
        let gx = tape.leaf(&targets[si].0, false);
        let gy = tape.leaf(&targets[si].1, false);
        let loss = detector_loss(&mut tape, hx, hy, gx, gy)?;
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("detector_step", "empty batch"))?;
    let batch_loss = tape.scale(total, 1.0 / batch.len() as f64)?;
    let loss_value = tape.value(batch_loss)[0];
    if !loss_value.is_finite() {
        return Ok(loss_value);
    }
    tape.backward(batch_loss)?;
    let var_list = vars.ordered();
    let mut named = params.named_mut();
    for ((_, t), v) in named.iter_mut().zip(&var_list) {
        t.set_grad(tape.grad(*v).expect("trainable leaf").to_vec())?;
    }
    let mut refs: Vec<&mut Tensor> = named.into_iter().map(|(_, t)| t).collect();
    adam.step(&mut refs)?;
    Ok(loss_value)
}

/// Mean inter-ocular NRMSE of `detect` over a sample set; NaN if empty.
pub fn validation_nrmse(params: &DetectorParams, cfg: &DetectorConfig, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let (left, right) = eval::default_interocular(cfg.landmarks)?;
    let norm = eval::Normalization::InterOcular { left, right };
    let mut total = 0.0;
    for s in samples {
        let pred = detect(&s.image, params, cfg)?;
        total += eval::nrmse(&pred, &s.landmarks, &norm)?;
    }
    Ok(total / samples.len() as f64)
}
