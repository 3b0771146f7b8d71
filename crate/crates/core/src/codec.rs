//! Heatmap encoding, decoding, and quantization-error accounting.
//!
//! A continuous pixel coordinate `p ∈ [0, F)` maps onto a grid of `L`
//! points through the scale `L/F`. Encoding drops it onto the grid with a
//! floor, decoding multiplies the grid index back by `F/L`, and the
//! quantization error is the Euclidean distance between the original
//! point and its recovered value. Grid index `i` stands for the interval
//! start `i·F/L`, not the cell center, matching the floor/recover
//! algebra.
//!
//! Gaussian targets are built from the *continuous* grid-scale center
//! (`p·L/F`, not its floor), so sub-grid information survives in the
//! target shape, and all heatmaps are peak-normalized to max 1.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// Geometry shared by all heatmaps: face resolution `F` in pixels,
/// heatmap resolution `L` in grid points, and the Gaussian std `sigma`
/// in grid units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapSpec {
    pub face_size: u32,
    pub heatmap_size: u32,
    pub sigma: f64,
}

impl HeatmapSpec {
    pub fn new(face_size: u32, heatmap_size: u32, sigma: f64) -> Result<HeatmapSpec> {
        if face_size < 1 {
            return Err(Error::invalid("heatmap_spec", "face size must be at least 1"));
        }
        if heatmap_size < 2 {
            return Err(Error::invalid("heatmap_spec", "heatmap size must be at least 2"));
        }
        if !(sigma > 0.0) {
            return Err(Error::invalid("heatmap_spec", "sigma must be positive"));
        }
        Ok(HeatmapSpec { face_size, heatmap_size, sigma })
    }

    /// Grid points per pixel, the only ratio entering the error analysis.
    pub fn scale(&self) -> f64 {
        self.heatmap_size as f64 / self.face_size as f64
    }

    fn check_coord(&self, p: f64, q: f64) -> Result<()> {
        let f = self.face_size as f64;
        if !(p >= 0.0 && p < f && q >= 0.0 && q < f) {
            return Err(Error::OutOfBounds { x: p, y: q, bound: f });
        }
        Ok(())
    }
}

/// Which image axis a 1D heatmap ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn as_str(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
        }
    }
}

/// L×L nonnegative surface, row-major `[y][x]`, peak value 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap2D {
    pub spec: HeatmapSpec,
    values: Vec<f64>,
}

impl Heatmap2D {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.spec.heatmap_size as usize + x]
    }
}

/// Length-L nonnegative vector over one axis, peak value 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap1D {
    pub spec: HeatmapSpec,
    pub axis: Axis,
    values: Vec<f64>,
}

impl Heatmap1D {
    pub fn from_values(spec: HeatmapSpec, axis: Axis, values: Vec<f64>) -> Result<Heatmap1D> {
        if values.len() != spec.heatmap_size as usize {
            return Err(Error::invalid(
                "heatmap1d",
                format!("expected {} values, got {}", spec.heatmap_size, values.len()),
            ));
        }
        Ok(Heatmap1D { spec, axis, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Debug dump: `L sigma axis` header line then one value per line,
    /// 17 significant digits.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {} {}", self.spec.heatmap_size, self.spec.sigma, self.axis.as_str())?;
        for v in &self.values {
            writeln!(w, "{v:.16e}")?;
        }
        Ok(())
    }

    pub fn read_dump<R: BufRead>(r: R, face_size: u32) -> Result<Heatmap1D> {
        let mut lines = r.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line?,
            None => return Err(Error::invalid("heatmap dump", "empty file")),
        };
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                path: "<dump>".into(),
                line: 1,
                msg: format!("expected `L sigma axis`, got {header:?}"),
            });
        }
        let parse_err = |line: usize, msg: String| Error::Parse { path: "<dump>".into(), line, msg };
        let l: u32 = parts[0].parse().map_err(|e| parse_err(1, format!("bad L: {e}")))?;
        let sigma: f64 = parts[1].parse().map_err(|e| parse_err(1, format!("bad sigma: {e}")))?;
        let axis = match parts[2] {
            "x" => Axis::X,
            "y" => Axis::Y,
            other => return Err(parse_err(1, format!("bad axis {other:?}"))),
        };
        let spec = HeatmapSpec::new(face_size, l, sigma)?;
        let mut values = Vec::with_capacity(l as usize);
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            values.push(
                line.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(i + 1, format!("bad value: {e}")))?,
            );
        }
        Heatmap1D::from_values(spec, axis, values)
    }
}

/// N continuous (p, q) pixel coordinates on an F×F image.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<LandmarkSet> {
        if points.is_empty() {
            return Err(Error::invalid("landmark_set", "needs at least one landmark"));
        }
        Ok(LandmarkSet { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn get(&self, i: usize) -> (f64, f64) {
        self.points[i]
    }
}

fn peak_normalize(values: &mut [f64]) {
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > 0.0 {
        for v in values.iter_mut() {
            *v /= hi;
        }
    }
}

/// Discrete Gaussian surface centered on the continuous grid-scale point
/// `(p·L/F, q·L/F)`, peak-normalized.
pub fn encode2d(center: (f64, f64), spec: &HeatmapSpec) -> Result<Heatmap2D> {
    spec.check_coord(center.0, center.1)?;
    let l = spec.heatmap_size as usize;
    let cx = center.0 * spec.scale();
    let cy = center.1 * spec.scale();
    let inv = 1.0 / (2.0 * spec.sigma * spec.sigma);
    let mut values = vec![0.0; l * l];
    for y in 0..l {
        let dy = y as f64 - cy;
        for x in 0..l {
            let dx = x as f64 - cx;
            values[y * l + x] = (-(dx * dx + dy * dy) * inv).exp();
        }
    }
    peak_normalize(&mut values);
    Ok(Heatmap2D { spec: *spec, values })
}

/// Direct 1D Gaussian target over one axis, peak-normalized.
pub fn encode1d(coord: f64, axis: Axis, spec: &HeatmapSpec) -> Result<Heatmap1D> {
    let f = spec.face_size as f64;
    if !(coord >= 0.0 && coord < f) {
        return Err(Error::OutOfBounds { x: coord, y: 0.0, bound: f });
    }
    let l = spec.heatmap_size as usize;
    let c = coord * spec.scale();
    let inv = 1.0 / (2.0 * spec.sigma * spec.sigma);
    let mut values: Vec<f64> = (0..l)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d * inv).exp()
        })
        .collect();
    peak_normalize(&mut values);
    Ok(Heatmap1D { spec: *spec, axis, values })
}

/// Per-axis sums of a 2D map, each peak-normalized.
pub fn marginalize(h: &Heatmap2D) -> (Heatmap1D, Heatmap1D) {
    let (mut mx, mut my) = marginal_sums(h);
    peak_normalize(&mut mx);
    peak_normalize(&mut my);
    (
        Heatmap1D { spec: h.spec, axis: Axis::X, values: mx },
        Heatmap1D { spec: h.spec, axis: Axis::Y, values: my },
    )
}

/// Raw (unnormalized) marginal sums; both sum to the total 2D mass.
pub fn marginal_sums(h: &Heatmap2D) -> (Vec<f64>, Vec<f64>) {
    let l = h.spec.heatmap_size as usize;
    let mut mx = vec![0.0; l];
    let mut my = vec![0.0; l];
    for y in 0..l {
        for x in 0..l {
            let v = h.values[y * l + x];
            mx[x] += v;
            my[y] += v;
        }
    }
    (mx, my)
}

/// Floor-quantize a continuous coordinate onto the grid: `⌊p·L/F⌋`.
pub fn quantize(p: f64, q: f64, spec: &HeatmapSpec) -> Result<(u32, u32)> {
    spec.check_coord(p, q)?;
    let lim = spec.heatmap_size - 1;
    // p < F guarantees p·L/F < L in exact arithmetic; the min guards the
    // one-ulp rounding case at the top of the range.
    let x = ((p * spec.scale()).floor() as u32).min(lim);
    let y = ((q * spec.scale()).floor() as u32).min(lim);
    Ok((x, y))
}

/// Map grid indices back to pixel coordinates: `x·F/L`.
pub fn recover(x: u32, y: u32, spec: &HeatmapSpec) -> Result<(f64, f64)> {
    if x >= spec.heatmap_size || y >= spec.heatmap_size {
        return Err(Error::invalid(
            "recover",
            format!("grid point ({x}, {y}) outside {0}x{0} grid", spec.heatmap_size),
        ));
    }
    let step = spec.face_size as f64 / spec.heatmap_size as f64;
    Ok((x as f64 * step, y as f64 * step))
}

/// Euclidean distance between a coordinate and its quantize-then-recover
/// image.
pub fn quantization_error(p: f64, q: f64, spec: &HeatmapSpec) -> Result<f64> {
    let (x, y) = quantize(p, q, spec)?;
    let (p2, q2) = recover(x, y, spec)?;
    Ok(((p - p2) * (p - p2) + (q - q2) * (q - q2)).sqrt())
}

/// Argmax decode: highest bin (ties to the lowest index) scaled by `F/L`.
pub fn decode_argmax(h: &Heatmap1D) -> f64 {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in h.values.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as f64 * h.spec.face_size as f64 / h.spec.heatmap_size as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapKind {
    OneD,
    TwoD,
}

/// Total output points for N landmarks: `2NL` for per-axis 1D heatmaps,
/// `NL²` for joint 2D heatmaps.
pub fn output_size(n: u64, l: u64, kind: HeatmapKind) -> u64 {
    match kind {
        HeatmapKind::OneD => 2 * n * l,
        HeatmapKind::TwoD => n * l * l,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(f: u32, l: u32, sigma: f64) -> HeatmapSpec {
        HeatmapSpec::new(f, l, sigma).unwrap()
    }

    #[test]
    fn quantize_worked_example() {
        // L/F = 0.5
        let s = spec(256, 128, 2.5);
        assert_eq!(quantize(142.84, 188.72, &s).unwrap(), (71, 94));
        assert_eq!(recover(71, 94, &s).unwrap(), (142.0, 188.0));
    }

    #[test]
    fn quantize_origin_and_exact_grid() {
        let s = spec(256, 128, 2.5);
        assert_eq!(quantize(0.0, 0.0, &s).unwrap(), (0, 0));
        assert_eq!(recover(0, 0, &s).unwrap(), (0.0, 0.0));
        // p·L/F = 50 exactly
        assert_eq!(quantize(100.0, 100.0, &s).unwrap(), (50, 50));
    }

    #[test]
    fn quantization_error_paper_values() {
        let low = spec(256, 128, 2.5); // L/F = 0.5
        let e = quantization_error(142.84, 188.72, &low).unwrap();
        assert!((e - 1.11).abs() <= 0.005, "E = {e}");
        let high = spec(256, 768, 2.5); // L/F = 3.0
        let e = quantization_error(142.84, 188.72, &high).unwrap();
        assert!((e - 0.18).abs() <= 0.005, "E = {e}");
    }

    #[test]
    fn quantization_error_zero_on_grid() {
        let s = spec(256, 128, 2.5);
        assert_eq!(quantization_error(100.0, 24.0, &s).unwrap(), 0.0);
    }

    #[test]
    fn out_of_bounds_rejected() {
        let s = spec(64, 128, 2.5);
        assert!(quantize(64.0, 0.0, &s).is_err());
        assert!(quantize(-0.1, 0.0, &s).is_err());
        assert!(encode2d((0.0, 64.0), &s).is_err());
        assert!(encode1d(-1.0, Axis::X, &s).is_err());
        assert!(recover(128, 0, &s).is_err());
    }

    #[test]
    fn encode2d_grid_center_peaks_at_one() {
        let s = spec(64, 64, 2.0);
        // p·L/F = 10 exactly
        let h = encode2d((10.0, 20.0), &s).unwrap();
        assert_eq!(h.at(10, 20), 1.0);
        assert!(h.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn encode2d_midpoint_is_diagonally_symmetric() {
        let s = spec(64, 32, 3.0);
        let h = encode2d((32.0, 32.0), &s).unwrap();
        let l = 32usize;
        for y in 0..l {
            for x in 0..l {
                let a = h.at(x, y);
                let b = h.at(y, x);
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encode1d_mirror_symmetry() {
        let s = spec(64, 128, 2.5);
        // Centers symmetric about F/2 = 32; grid centers symmetric about
        // (L-1)/2 only up to the off-by-half of the grid, so compare the
        // unnormalized Gaussian directly via reversed indices shifted by
        // the matching amount: c and F-c give mirrored maps around L/2.
        let a = encode1d(24.0, Axis::X, &s).unwrap();
        let b = encode1d(40.0, Axis::X, &s).unwrap();
        // a is centered at 48, b at 80; index i in a matches index 128-32+...
        // Simply check argmaxes mirror: 48 and 80 average to 64 = L/2.
        let am = a.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let bm = b.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(am, 1.0);
        assert_eq!(bm, 1.0);
        let ai = a.values().iter().position(|&v| v == 1.0).unwrap();
        let bi = b.values().iter().position(|&v| v == 1.0).unwrap();
        assert_eq!(ai + bi, 128);
        // And the profiles mirror exactly: a[48+d] == b[80-d].
        for d in 0..32 {
            assert!((a.values()[48 + d] - b.values()[80 - d]).abs() < 1e-12);
        }
    }

    #[test]
    fn encode1d_on_grid_point_hits_one() {
        let s = spec(64, 128, 2.5);
        let h = encode1d(10.0, Axis::X, &s).unwrap(); // 10 * 2 = grid 20
        assert_eq!(h.values()[20], 1.0);
    }

    #[test]
    fn marginalize_one_hot() {
        let s = spec(8, 8, 1.0);
        let mut values = vec![0.0; 64];
        values[3 * 8 + 5] = 1.0; // (x=5, y=3)
        let h = Heatmap2D { spec: s, values };
        let (mx, my) = marginalize(&h);
        assert_eq!(mx.values()[5], 1.0);
        assert_eq!(mx.values().iter().filter(|&&v| v != 0.0).count(), 1);
        assert_eq!(my.values()[3], 1.0);
        assert_eq!(my.values().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn marginal_sums_conserve_mass() {
        let s = spec(64, 16, 2.0);
        let h = encode2d((20.25, 40.5), &s).unwrap();
        let total: f64 = h.values().iter().sum();
        let (mx, my) = marginal_sums(&h);
        let sx: f64 = mx.iter().sum();
        let sy: f64 = my.iter().sum();
        assert!((sx - total).abs() < 1e-9);
        assert!((sy - total).abs() < 1e-9);
    }

    #[test]
    fn decode_argmax_cases() {
        let s = spec(2, 6, 1.0); // F/L = 1/3
        let mut v = vec![0.0; 6];
        v[5] = 1.0;
        let h = Heatmap1D { spec: s, axis: Axis::X, values: v };
        assert!((decode_argmax(&h) - 5.0 / 3.0).abs() < 1e-15);
        let flat = Heatmap1D { spec: s, axis: Axis::X, values: vec![0.5; 6] };
        assert_eq!(decode_argmax(&flat), 0.0); // tie-break to index 0
    }

    #[test]
    fn output_size_cases() {
        assert_eq!(output_size(68, 768, HeatmapKind::OneD), 104_448);
        assert_eq!(output_size(68, 768, HeatmapKind::TwoD), 40_108_032);
        assert_eq!(output_size(1, 2, HeatmapKind::OneD), 4);
        assert_eq!(output_size(1, 2, HeatmapKind::TwoD), 4);
        for n in [1u64, 5, 68] {
            for l in [2u64, 64, 256, 768] {
                let r1 = output_size(n, l, HeatmapKind::OneD);
                let r2 = output_size(n, l, HeatmapKind::TwoD);
                assert_eq!(r2 * 2, r1 * l);
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let s = spec(64, 32, 2.5);
        let h = encode1d(17.3, Axis::Y, &s).unwrap();
        let mut buf = Vec::new();
        h.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("32 2.5 y\n"));
        let back = Heatmap1D::read_dump(&buf[..], 64).unwrap();
        assert_eq!(back.axis, Axis::Y);
        for (a, b) in h.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
