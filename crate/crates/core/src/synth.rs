//! Deterministic synthetic landmark data.
//!
//! Scenes are parametric faces: a rotated ellipse with two eye discs, a
//! nose dot and a Bézier mouth on a brightness-gradient background, plus
//! seeded pixel noise. Landmark coordinates come straight from the scene
//! parameters, so the ground truth is continuous and exact — which is
//! what makes quantization-error measurements meaningful. Clips move the
//! scene through a bounded random walk of center, rotation and lighting,
//! optionally stamping an opaque occluder rectangle over a landmark.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::codec::LandmarkSet;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Square 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    size: u32,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(size: u32, pixels: Vec<u8>) -> Result<Image> {
        if pixels.len() != (size as usize) * (size as usize) {
            return Err(Error::invalid(
                "image",
                format!("{size}x{size} image needs {} bytes, got {}", size * size, pixels.len()),
            ));
        }
        Ok(Image { size, pixels })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.pixels[(y * self.size + x) as usize]
    }

    /// Dense `[3, F, F]` input in [0, 1], grayscale replicated to 3 channels.
    pub fn to_input(&self) -> crate::tensor::Tensor {
        let n = self.pixels.len();
        let mut data = Vec::with_capacity(3 * n);
        for _ in 0..3 {
            data.extend(self.pixels.iter().map(|&p| p as f64 / 255.0));
        }
        crate::tensor::Tensor::from_vec(&[3, self.size as usize, self.size as usize], data)
            .expect("image dims are consistent")
    }
}

/// One still image with its exact landmark coordinates.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub landmarks: LandmarkSet,
}

/// A clip of consecutive frames with per-frame ground truth.
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<Image>,
    pub tracks: Vec<LandmarkSet>,
    pub seed: u64,
}

/// Full parametric description of one scene. All lengths in pixels on an
/// F×F canvas. Rendering is a pure function of these fields.
#[derive(Debug, Clone)]
pub struct SceneParams {
    pub face_size: u32,
    pub center: (f64, f64),
    pub axis_a: f64,
    pub axis_b: f64,
    pub rotation: f64,
    pub eye_dx: f64,
    pub eye_dy: f64,
    pub eye_radius: f64,
    pub nose: (f64, f64),
    pub mouth_half_width: f64,
    pub mouth_y: f64,
    pub mouth_bow: f64,
    pub mouth_thickness: f64,
    pub bg_base: f64,
    pub grad: (f64, f64),
    pub face_fill: f64,
    pub feature_fill: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl SceneParams {
    /// Draw a scene whose landmarks are guaranteed inside [0, F):
    /// every landmark offset is bounded by 0.40·F while the center stays
    /// within [0.42, 0.58]·F even after clip drift.
    pub fn sample(rng: &mut Rng, face_size: u32) -> SceneParams {
        let f = face_size as f64;
        SceneParams {
            face_size,
            center: (rng.uniform_in(0.45, 0.55) * f, rng.uniform_in(0.45, 0.55) * f),
            axis_a: rng.uniform_in(0.28, 0.36) * f,
            axis_b: rng.uniform_in(0.32, 0.40) * f,
            rotation: rng.uniform_in(-0.15, 0.15),
            eye_dx: rng.uniform_in(0.13, 0.17) * f,
            eye_dy: rng.uniform_in(0.10, 0.14) * f,
            eye_radius: rng.uniform_in(0.03, 0.05) * f,
            nose: (rng.uniform_in(-0.02, 0.02) * f, rng.uniform_in(0.02, 0.06) * f),
            mouth_half_width: rng.uniform_in(0.10, 0.14) * f,
            mouth_y: rng.uniform_in(0.16, 0.22) * f,
            mouth_bow: rng.uniform_in(0.02, 0.06) * f,
            mouth_thickness: rng.uniform_in(0.012, 0.02) * f,
            bg_base: rng.uniform_in(0.65, 0.85),
            grad: (rng.uniform_in(-0.15, 0.15), rng.uniform_in(-0.15, 0.15)),
            face_fill: rng.uniform_in(0.45, 0.60),
            feature_fill: rng.uniform_in(0.05, 0.20),
            noise_std: rng.uniform_in(0.005, 0.02),
            noise_seed: rng.next_u64(),
        }
    }

    /// One random-walk step for clip motion. Only center, rotation and
    /// lighting move; the face geometry is fixed per clip, which keeps the
    /// per-frame landmark displacement bound simple (see
    /// [`motion_displacement_bound`]).
    pub fn walk(&mut self, rng: &mut Rng, motion_scale: f64) {
        let f = self.face_size as f64;
        let clamp = |v: f64, lo: f64, hi: f64| v.max(lo).min(hi);
        self.center.0 = clamp(self.center.0 + rng.uniform_in(-1.0, 1.0) * motion_scale, 0.42 * f, 0.58 * f);
        self.center.1 = clamp(self.center.1 + rng.uniform_in(-1.0, 1.0) * motion_scale, 0.42 * f, 0.58 * f);
        self.rotation = clamp(self.rotation + rng.uniform_in(-1.0, 1.0) * 0.01 * motion_scale, -0.2, 0.2);
        self.grad.0 = clamp(self.grad.0 + rng.uniform_in(-1.0, 1.0) * 0.005 * motion_scale, -0.15, 0.15);
        self.grad.1 = clamp(self.grad.1 + rng.uniform_in(-1.0, 1.0) * 0.005 * motion_scale, -0.15, 0.15);
        if motion_scale > 0.0 {
            // Fresh pixel noise per frame; a frozen scene must reproduce
            // frames bitwise, so the noise pattern only changes when the
            // scene actually moves.
            self.noise_seed = rng.next_u64();
        }
    }

    fn world(&self, offset: (f64, f64)) -> (f64, f64) {
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        (
            self.center.0 + offset.0 * c - offset.1 * s,
            self.center.1 + offset.0 * s + offset.1 * c,
        )
    }

    fn eye_centers(&self) -> ((f64, f64), (f64, f64)) {
        (
            self.world((-self.eye_dx, -self.eye_dy)),
            self.world((self.eye_dx, -self.eye_dy)),
        )
    }

    fn mouth_anchors(&self) -> ((f64, f64), (f64, f64), (f64, f64)) {
        let left = self.world((-self.mouth_half_width, self.mouth_y));
        let right = self.world((self.mouth_half_width, self.mouth_y));
        let control = self.world((0.0, self.mouth_y + self.mouth_bow));
        (left, control, right)
    }

    /// Exact landmark coordinates. `n` must be 5 or 68.
    pub fn landmarks(&self, n: usize) -> Result<LandmarkSet> {
        match n {
            5 => {
                let (le, re) = self.eye_centers();
                let nose = self.world(self.nose);
                let (ml, _, mr) = self.mouth_anchors();
                LandmarkSet::new(vec![le, re, nose, ml, mr])
            }
            68 => Ok(self.landmarks68()),
            other => Err(Error::invalid(
                "generate_scene",
                format!("unsupported landmark count {other}, expected 5 or 68"),
            )),
        }
    }

    fn landmarks68(&self) -> LandmarkSet {
        use std::f64::consts::PI;
        let mut pts = Vec::with_capacity(68);
        // 0..17: jaw along the lower ellipse arc, left to right.
        for i in 0..17 {
            let phi = PI - i as f64 * PI / 16.0;
            pts.push(self.world((self.axis_a * phi.cos(), self.axis_b * phi.sin())));
        }
        // 17..27: eyebrows, five points arched above each eye.
        for side in [-1.0, 1.0] {
            for i in 0..5 {
                let t = i as f64 / 4.0 - 0.5;
                let x = side * self.eye_dx + t * 0.14 * self.face_size as f64 * side.signum();
                let arch = -0.02 * self.face_size as f64 * (1.0 - (2.0 * t).powi(2));
                let y = -self.eye_dy - 0.07 * self.face_size as f64 + arch;
                pts.push(self.world((x, y)));
            }
        }
        // 27..31: nose bridge from between the eyes down to the nose tip.
        for i in 0..4 {
            let t = i as f64 / 3.0;
            let x = self.nose.0 * t;
            let y = (-self.eye_dy) * (1.0 - t) + self.nose.1 * t;
            pts.push(self.world((x, y)));
        }
        // 31..36: nose base row through the tip.
        for i in 0..5 {
            let t = i as f64 / 4.0 - 0.5;
            pts.push(self.world((self.nose.0 + t * 0.08 * self.face_size as f64, self.nose.1)));
        }
        // 36..48: six-point rings on each eye; 36 and 45 are the outer
        // corners used for the inter-ocular distance.
        let ring = [PI, 2.0 * PI / 3.0, PI / 3.0, 0.0, -PI / 3.0, -2.0 * PI / 3.0];
        for side in [-1.0, 1.0] {
            for &alpha in &ring {
                let ex = side * self.eye_dx + self.eye_radius * alpha.cos() * side.signum() * -1.0;
                let ey = -self.eye_dy - self.eye_radius * alpha.sin();
                pts.push(self.world((ex, ey)));
            }
        }
        // 48..68: mouth, outer ring of 12 then inner ring of 8, built on
        // the same Bézier that is rendered.
        let bez = |t: f64, bow: f64| {
            let p0 = (-self.mouth_half_width, self.mouth_y);
            let p1 = (0.0, self.mouth_y + bow);
            let p2 = (self.mouth_half_width, self.mouth_y);
            let u = 1.0 - t;
            (
                u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
                u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
            )
        };
        for i in 0..7 {
            // upper outer lip: corner to corner with a slight upward bow
            pts.push(self.world(bez(i as f64 / 6.0, -0.4 * self.mouth_bow)));
        }
        for i in 1..6 {
            // lower outer lip, right to left
            pts.push(self.world(bez(1.0 - i as f64 / 6.0, self.mouth_bow)));
        }
        for i in 0..5 {
            pts.push(self.world(bez(0.1 + 0.8 * i as f64 / 4.0, -0.1 * self.mouth_bow)));
        }
        for i in 1..4 {
            pts.push(self.world(bez(0.9 - 0.8 * i as f64 / 4.0, 0.4 * self.mouth_bow)));
        }
        LandmarkSet::new(pts).expect("68 points")
    }

    /// Render the scene. Pure: identical params give identical bytes.
    pub fn render(&self) -> Image {
        let f = self.face_size;
        let fs = f as f64;
        let mut noise = Rng::new(self.noise_seed);
        let (le, re) = self.eye_centers();
        let nose = self.world(self.nose);
        let (ml, mc, mr) = self.mouth_anchors();
        let nose_r = 0.018 * fs;
        let (rc, rs) = (self.rotation.cos(), self.rotation.sin());

        let mut pixels = Vec::with_capacity((f * f) as usize);
        for y in 0..f {
            for x in 0..f {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                let mut v = self.bg_base
                    + self.grad.0 * (px / fs - 0.5)
                    + self.grad.1 * (py / fs - 0.5);

                // face ellipse with a ~1px soft edge
                let dx = px - self.center.0;
                let dy = py - self.center.1;
                let fx = dx * rc + dy * rs;
                let fy = -dx * rs + dy * rc;
                let e = (fx / self.axis_a).powi(2) + (fy / self.axis_b).powi(2);
                let dist = (1.0 - e.sqrt()) * self.axis_a.min(self.axis_b);
                let alpha = (dist + 0.5).clamp(0.0, 1.0);
                v = v * (1.0 - alpha) + self.face_fill * alpha;

                // eye discs
                for eye in [le, re] {
                    let d = ((px - eye.0).powi(2) + (py - eye.1).powi(2)).sqrt();
                    let a = (self.eye_radius - d + 0.5).clamp(0.0, 1.0);
                    v = v * (1.0 - a) + self.feature_fill * a;
                }

                // nose dot
                let d = ((px - nose.0).powi(2) + (py - nose.1).powi(2)).sqrt();
                let a = (nose_r - d + 0.5).clamp(0.0, 1.0);
                v = v * (1.0 - a) + self.feature_fill * a;

                // mouth stroke along the Bézier
                let d = bezier_distance((px, py), ml, mc, mr);
                let a = (self.mouth_thickness - d + 0.5).clamp(0.0, 1.0);
                v = v * (1.0 - a) + self.feature_fill * a;

                v += noise.normal(self.noise_std);
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        Image { size: f, pixels }
    }
}

fn bezier_distance(p: (f64, f64), a: (f64, f64), c: (f64, f64), b: (f64, f64)) -> f64 {
    // 32-segment sampling is plenty at desk-scale resolutions.
    let mut best = f64::INFINITY;
    for i in 0..=32 {
        let t = i as f64 / 32.0;
        let u = 1.0 - t;
        let qx = u * u * a.0 + 2.0 * u * t * c.0 + t * t * b.0;
        let qy = u * u * a.1 + 2.0 * u * t * c.1 + t * t * b.1;
        let d = ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt();
        if d < best {
            best = d;
        }
    }
    best
}

/// Worst-case landmark movement for one [`SceneParams::walk`] step: the
/// center moves at most `motion_scale` per axis and the rotation by at
/// most `0.01·motion_scale` around offsets bounded by `0.40·F`.
pub fn motion_displacement_bound(motion_scale: f64, face_size: u32) -> f64 {
    motion_scale * (std::f64::consts::SQRT_2 + 0.004 * face_size as f64)
}

/// Deterministically generate one scene.
pub fn generate_scene(seed: u64, face_size: u32, n: usize) -> Result<Sample> {
    let mut rng = Rng::new(seed);
    let params = SceneParams::sample(&mut rng, face_size);
    let landmarks = params.landmarks(n)?;
    Ok(Sample { image: params.render(), landmarks })
}

/// Deterministically generate a clip with bounded random-walk motion and
/// optional per-frame occluder rectangles (ground truth unchanged).
pub fn generate_clip(
    seed: u64,
    face_size: u32,
    n: usize,
    clip_length: usize,
    motion_scale: f64,
    occlusion_prob: f64,
) -> Result<Clip> {
    if clip_length < 1 {
        return Err(Error::invalid("generate_clip", "clip length must be at least 1"));
    }
    let mut rng = Rng::new(seed);
    let mut params = SceneParams::sample(&mut rng, face_size);
    let mut frames = Vec::with_capacity(clip_length);
    let mut tracks = Vec::with_capacity(clip_length);
    for t in 0..clip_length {
        if t > 0 {
            params.walk(&mut rng, motion_scale);
        }
        let landmarks = params.landmarks(n)?;
        let mut frame = params.render();
        if rng.uniform() < occlusion_prob {
            stamp_occluder(&mut frame, &landmarks, &mut rng);
        }
        frames.push(frame);
        tracks.push(landmarks);
    }
    Ok(Clip { frames, tracks, seed })
}

fn stamp_occluder(frame: &mut Image, landmarks: &LandmarkSet, rng: &mut Rng) {
    let f = frame.size as f64;
    let (lx, ly) = landmarks.get(rng.index(landmarks.len()));
    let cx = lx + rng.uniform_in(-0.03, 0.03) * f;
    let cy = ly + rng.uniform_in(-0.03, 0.03) * f;
    let half = rng.uniform_in(0.06, 0.10) * f;
    let fill = (rng.uniform_in(0.3, 0.9) * 255.0).round() as u8;
    let x0 = ((cx - half).floor().max(0.0)) as u32;
    let x1 = ((cx + half).ceil().min(f - 1.0)) as u32;
    let y0 = ((cy - half).floor().max(0.0)) as u32;
    let y1 = ((cy + half).ceil().min(f - 1.0)) as u32;
    for y in y0..=y1 {
        for x in x0..=x1 {
            frame.pixels[(y * frame.size + x) as usize] = fill;
        }
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

/// Write the 300W-style `.pts` annotation format.
pub fn write_pts<W: Write>(mut w: W, landmarks: &LandmarkSet) -> Result<()> {
    writeln!(w, "version: 1")?;
    writeln!(w, "n_points: {}", landmarks.len())?;
    writeln!(w, "{{")?;
    for (x, y) in landmarks.points() {
        writeln!(w, "{x:.6} {y:.6}")?;
    }
    writeln!(w, "}}")?;
    Ok(())
}

/// Parse a `.pts` file; errors carry 1-based line numbers.
pub fn read_pts<R: BufRead>(r: R, path: &str) -> Result<LandmarkSet> {
    let perr = |line: usize, msg: String| Error::Parse { path: path.to_string(), line, msg };
    let mut lines = Vec::new();
    for l in r.lines() {
        lines.push(l?);
    }
    let mut i = 0usize;
    let mut next = |expect: &str| -> Result<(usize, String)> {
        while i < lines.len() && lines[i].trim().is_empty() {
            i += 1;
        }
        if i >= lines.len() {
            return Err(perr(lines.len(), format!("unexpected end of file, expected {expect}")));
        }
        i += 1;
        Ok((i, lines[i - 1].trim().to_string()))
    };

    let (ln, version) = next("version header")?;
    if !version.starts_with("version:") {
        return Err(perr(ln, format!("expected `version: 1`, got {version:?}")));
    }
    let (ln, npts) = next("n_points header")?;
    let count: usize = npts
        .strip_prefix("n_points:")
        .ok_or_else(|| perr(ln, format!("expected `n_points: N`, got {npts:?}")))?
        .trim()
        .parse()
        .map_err(|e| perr(ln, format!("bad n_points: {e}")))?;
    let (ln, brace) = next("{")?;
    if brace != "{" {
        return Err(perr(ln, format!("expected `{{`, got {brace:?}")));
    }
    let mut pts = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, line) = next("coordinate pair")?;
        let mut it = line.split_whitespace();
        let x: f64 = it
            .next()
            .ok_or_else(|| perr(ln, "missing x".into()))?
            .parse()
            .map_err(|e| perr(ln, format!("bad x: {e}")))?;
        let y: f64 = it
            .next()
            .ok_or_else(|| perr(ln, "missing y".into()))?
            .parse()
            .map_err(|e| perr(ln, format!("bad y: {e}")))?;
        if it.next().is_some() {
            return Err(perr(ln, "trailing tokens after coordinates".into()));
        }
        pts.push((x, y));
    }
    let (ln, brace) = next("}")?;
    if brace != "}" {
        return Err(perr(ln, format!("expected `}}` after {count} points, got {brace:?}")));
    }
    LandmarkSet::new(pts)
}

/// Binary PGM (P5), maxval 255.
pub fn write_pgm<W: Write>(mut w: W, image: &Image) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", image.size, image.size)?;
    w.write_all(&image.pixels)?;
    Ok(())
}

pub fn read_pgm<R: Read>(mut r: R) -> Result<Image> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && (bytes[pos] as char).is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && (bytes[pos] as char).is_ascii_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::invalid("read_pgm", "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(&bytes)?;
    if magic != "P5" {
        return Err(Error::invalid("read_pgm", format!("bad magic {magic:?}, expected P5")));
    }
    let w: u32 = token(&bytes)?.parse().map_err(|e| Error::invalid("read_pgm", format!("bad width: {e}")))?;
    let h: u32 = token(&bytes)?.parse().map_err(|e| Error::invalid("read_pgm", format!("bad height: {e}")))?;
    if w != h {
        return Err(Error::invalid("read_pgm", format!("expected square image, got {w}x{h}")));
    }
    let maxval: u32 = token(&bytes)?.parse().map_err(|e| Error::invalid("read_pgm", format!("bad maxval: {e}")))?;
    if maxval != 255 {
        return Err(Error::invalid("read_pgm", format!("expected maxval 255, got {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    let need = (w as usize) * (h as usize);
    if bytes.len() < pos + need {
        return Err(Error::invalid("read_pgm", "truncated pixel data"));
    }
    Image::new(w, bytes[pos..pos + need].to_vec())
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

/// Generation request for a dataset directory.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub face_size: u32,
    pub landmarks: usize,
    pub count: usize,
    pub clips: usize,
    pub clip_length: usize,
    pub motion_scale: f64,
    pub occlusion_prob: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            face_size: 64,
            landmarks: 5,
            count: 500,
            clips: 0,
            clip_length: 8,
            motion_scale: 1.0,
            occlusion_prob: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn from_map(map: &mut crate::config::ConfigMap) -> Result<GenConfig> {
        let d = GenConfig::default();
        Ok(GenConfig {
            face_size: map.get("face_size", d.face_size)?,
            landmarks: map.get("landmarks", d.landmarks)?,
            count: map.get("count", d.count)?,
            clips: map.get("clips", d.clips)?,
            clip_length: map.get("clip_length", d.clip_length)?,
            motion_scale: map.get("motion_scale", d.motion_scale)?,
            occlusion_prob: map.get("occlusion_prob", d.occlusion_prob)?,
            seed: map.get("seed", d.seed)?,
        })
    }

    pub fn to_kv(&self) -> String {
        format!(
            "face_size = {}\nlandmarks = {}\ncount = {}\nclips = {}\nclip_length = {}\n\
             motion_scale = {}\nocclusion_prob = {}\nseed = {}\n",
            self.face_size,
            self.landmarks,
            self.count,
            self.clips,
            self.clip_length,
            self.motion_scale,
            self.occlusion_prob,
            self.seed,
        )
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub samples: Vec<Sample>,
    pub clips: Vec<Clip>,
    pub sample_seeds: Vec<u64>,
    pub clip_seeds: Vec<u64>,
}

/// Generate all items for a config; each item gets its own derived seed so
/// it can be regenerated in isolation from the manifest.
pub fn generate(cfg: &GenConfig) -> Result<GeneratedData> {
    let mut master = Rng::new(cfg.seed);
    let sample_seeds: Vec<u64> = (0..cfg.count).map(|_| master.next_u64()).collect();
    let clip_seeds: Vec<u64> = (0..cfg.clips).map(|_| master.next_u64()).collect();
    let samples = sample_seeds
        .iter()
        .map(|&s| generate_scene(s, cfg.face_size, cfg.landmarks))
        .collect::<Result<Vec<_>>>()?;
    let clips = clip_seeds
        .iter()
        .map(|&s| {
            generate_clip(s, cfg.face_size, cfg.landmarks, cfg.clip_length, cfg.motion_scale, cfg.occlusion_prob)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GeneratedData { samples, clips, sample_seeds, clip_seeds })
}

/// Layout: `images/%06d.pgm`, `annots/%06d.pts`,
/// `clips/%04d/frame_%03d.pgm` + `.pts`, and `manifest.txt`.
pub fn write_dataset(dir: &Path, cfg: &GenConfig, data: &GeneratedData) -> Result<()> {
    use std::fs;
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("annots"))?;
    for (i, s) in data.samples.iter().enumerate() {
        let mut img = fs::File::create(dir.join("images").join(format!("{i:06}.pgm")))?;
        write_pgm(&mut img, &s.image)?;
        let mut pts = fs::File::create(dir.join("annots").join(format!("{i:06}.pts")))?;
        write_pts(&mut pts, &s.landmarks)?;
    }
    for (ci, clip) in data.clips.iter().enumerate() {
        let cdir = dir.join("clips").join(format!("{ci:04}"));
        fs::create_dir_all(&cdir)?;
        for (fi, frame) in clip.frames.iter().enumerate() {
            let mut img = fs::File::create(cdir.join(format!("frame_{fi:03}.pgm")))?;
            write_pgm(&mut img, frame)?;
            let mut pts = fs::File::create(cdir.join(format!("frame_{fi:03}.pts")))?;
            write_pts(&mut pts, &clip.tracks[fi])?;
        }
    }
    let mut manifest = String::new();
    manifest.push_str(&format!("face_size = {}\n", cfg.face_size));
    manifest.push_str(&format!("landmarks = {}\n", cfg.landmarks));
    manifest.push_str(&format!("count = {}\n", cfg.count));
    manifest.push_str(&format!("clips = {}\n", cfg.clips));
    manifest.push_str(&format!("clip_length = {}\n", cfg.clip_length));
    manifest.push_str(&format!("motion_scale = {}\n", cfg.motion_scale));
    manifest.push_str(&format!("occlusion_prob = {}\n", cfg.occlusion_prob));
    manifest.push_str(&format!("seed = {}\n", cfg.seed));
    manifest.push_str(&format!("rng = {}\n", crate::rng::RNG_ALGORITHM));
    for (i, s) in data.sample_seeds.iter().enumerate() {
        manifest.push_str(&format!("sample_seed {i:06} = {s}\n"));
    }
    for (i, s) in data.clip_seeds.iter().enumerate() {
        manifest.push_str(&format!("clip_seed {i:04} = {s}\n"));
    }
    fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load all still samples from a dataset directory, in index order.
pub fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    let images_dir = dir.join("images");
    let mut names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(&images_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") {
            names.push(name);
        }
    }
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let stem = name.trim_end_matches(".pgm");
        let image = read_pgm(std::fs::File::open(images_dir.join(&name))?)?;
        let pts_path = dir.join("annots").join(format!("{stem}.pts"));
        let landmarks = read_pts(
            std::io::BufReader::new(std::fs::File::open(&pts_path)?),
            &pts_path.display().to_string(),
        )?;
        out.push(Sample { image, landmarks });
    }
    Ok(out)
}

/// Load all clips from a dataset directory, in index order.
pub fn load_clips(dir: &Path) -> Result<Vec<Clip>> {
    let clips_dir = dir.join("clips");
    if !clips_dir.exists() {
        return Ok(Vec::new());
    }
    let mut clip_names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(&clips_dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            clip_names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    clip_names.sort();
    let mut out = Vec::with_capacity(clip_names.len());
    for cname in clip_names {
        let cdir = clips_dir.join(&cname);
        let mut frame_names: Vec<String> = Vec::new();
        for entry in std::fs::read_dir(&cdir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name.ends_with(".pgm") {
                frame_names.push(name);
            }
        }
        frame_names.sort();
        let mut frames = Vec::new();
        let mut tracks = Vec::new();
        for fname in frame_names {
            let stem = fname.trim_end_matches(".pgm");
            frames.push(read_pgm(std::fs::File::open(cdir.join(&fname))?)?);
            let pts_path = cdir.join(format!("{stem}.pts"));
            tracks.push(read_pts(
                std::io::BufReader::new(std::fs::File::open(&pts_path)?),
                &pts_path.display().to_string(),
            )?);
        }
        out.push(Clip { frames, tracks, seed: 0 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_seed_deterministic() {
        let a = generate_scene(99, 64, 5).unwrap();
        let b = generate_scene(99, 64, 5).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.landmarks, b.landmarks);
        let c = generate_scene(100, 64, 5).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn unsupported_landmark_count_rejected() {
        assert!(generate_scene(1, 64, 7).is_err());
    }

    #[test]
    fn landmarks_in_bounds_for_many_seeds() {
        // Cheap check over parameters only; rendering is not needed.
        for seed in 0..10_000u64 {
            let mut rng = Rng::new(seed);
            let params = SceneParams::sample(&mut rng, 64);
            for &n in &[5usize, 68] {
                let lm = params.landmarks(n).unwrap();
                for &(x, y) in lm.points() {
                    assert!(x >= 0.0 && x < 64.0 && y >= 0.0 && y < 64.0, "seed {seed}: ({x}, {y})");
                }
            }
        }
    }

    #[test]
    fn eye_landmarks_match_rendered_discs() {
        // Noise-free render; the intensity-weighted centroid of each eye
        // disc must sit on the exact landmark.
        let mut rng = Rng::new(17);
        let mut params = SceneParams::sample(&mut rng, 128);
        params.noise_std = 0.0;
        let img = params.render();
        let lm = params.landmarks(5).unwrap();
        for eye in 0..2 {
            let (ex, ey) = lm.get(eye);
            let r = params.eye_radius + 2.0;
            let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for y in (ey - r) as u32..=(ey + r) as u32 {
                for x in (ex - r) as u32..=(ex + r) as u32 {
                    let w = (params.face_fill * 255.0 - img.get(x, y) as f64).max(0.0);
                    sw += w;
                    sx += w * (x as f64 + 0.5);
                    sy += w * (y as f64 + 0.5);
                }
            }
            let cx = sx / sw;
            let cy = sy / sw;
            assert!((cx - ex).abs() < 0.5, "eye {eye}: centroid x {cx} vs {ex}");
            assert!((cy - ey).abs() < 0.5, "eye {eye}: centroid y {cy} vs {ey}");
        }
    }

    #[test]
    fn zero_motion_clip_repeats_the_frame() {
        let clip = generate_clip(5, 64, 5, 4, 0.0, 0.0).unwrap();
        for t in 1..4 {
            assert_eq!(clip.frames[t], clip.frames[0]);
            assert_eq!(clip.tracks[t], clip.tracks[0]);
        }
    }

    #[test]
    fn no_occlusion_means_pure_renders() {
        // With occlusion_prob = 0 every frame is exactly the rendered
        // scene; rectangles would overwrite pixels far from any feature.
        let clip = generate_clip(6, 64, 5, 3, 0.5, 0.0).unwrap();
        assert_eq!(clip.frames.len(), 3);
        // reconstruct frame 0 independently
        let mut rng = Rng::new(6);
        let params = SceneParams::sample(&mut rng, 64);
        assert_eq!(clip.frames[0], params.render());
    }

    #[test]
    fn occluders_do_appear() {
        let with = generate_clip(7, 64, 5, 8, 0.5, 1.0).unwrap();
        let without = generate_clip(7, 64, 5, 8, 0.5, 0.0).unwrap();
        assert_eq!(with.tracks[0], without.tracks[0]); // ground truth untouched
        let differing = with
            .frames
            .iter()
            .zip(&without.frames)
            .filter(|(a, b)| a != b)
            .count();
        assert!(differing >= 7, "only {differing} frames differ");
    }

    #[test]
    fn walk_displacement_is_bounded() {
        let ms = 1.5;
        let bound = motion_displacement_bound(ms, 64) + 1e-9;
        for seed in 0..1000u64 {
            let clip_len = 4;
            let clip = generate_clip(seed, 64, 5, clip_len, ms, 0.0).unwrap();
            for t in 1..clip_len {
                for (a, b) in clip.tracks[t].points().iter().zip(clip.tracks[t - 1].points()) {
                    let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                    assert!(d <= bound, "seed {seed} frame {t}: moved {d} > {bound}");
                }
            }
        }
    }

    #[test]
    fn pts_round_trip() {
        let lm = LandmarkSet::new(vec![(1.25, 2.5), (63.999999, 0.000123)]).unwrap();
        let mut buf = Vec::new();
        write_pts(&mut buf, &lm).unwrap();
        let back = read_pts(&buf[..], "mem").unwrap();
        for (a, b) in lm.points().iter().zip(back.points()) {
            assert!((a.0 - b.0).abs() <= 1e-6 && (a.1 - b.1).abs() <= 1e-6);
        }
    }

    #[test]
    fn pts_fixture_parses() {
        let text = "version: 1\nn_points: 5\n{\n10.5 20.25\n30.0 40.0\n1.0 2.0\n3.5 4.5\n5.0 6.0\n}\n";
        let lm = read_pts(text.as_bytes(), "fixture").unwrap();
        assert_eq!(lm.len(), 5);
        assert_eq!(lm.get(0), (10.5, 20.25));
        assert_eq!(lm.get(4), (5.0, 6.0));
    }

    #[test]
    fn pts_count_mismatch_reports_line() {
        let text = "version: 1\nn_points: 3\n{\n1 2\n3 4\n}\n";
        let err = read_pts(text.as_bytes(), "bad.pts").unwrap_err().to_string();
        assert!(err.starts_with("bad.pts:6"), "{err}");
    }

    #[test]
    fn pgm_round_trip_and_fixture() {
        let img = Image::new(2, vec![0, 128, 200, 255]).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &img).unwrap();
        assert_eq!(&buf, b"P5\n2 2\n255\n\x00\x80\xc8\xff");
        let back = read_pgm(&buf[..]).unwrap();
        assert_eq!(back, img);

        let one = Image::new(1, vec![42]).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &one).unwrap();
        assert_eq!(read_pgm(&buf[..]).unwrap(), one);
    }

    #[test]
    fn pgm_bad_magic_rejected() {
        assert!(read_pgm(&b"P6\n1 1\n255\nx"[..]).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig { count: 3, clips: 2, clip_length: 2, face_size: 32, ..GenConfig::default() };
        let data = generate(&cfg).unwrap();
        write_dataset(dir.path(), &cfg, &data).unwrap();
        let samples = load_samples(dir.path()).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].image, data.samples[0].image);
        let clips = load_clips(dir.path()).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[1].frames[1], data.clips[1].frames[1]);
        let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        assert!(manifest.contains("seed = 0"));
        assert!(manifest.contains("sample_seed 000000"));
    }
}
