//! Co-attention between x-axis and y-axis distributional features.
//!
//! Each channel k carries a pair of matrices: `Dx_k` of shape `[c, r]`
//! (rows are spatial-x positions, columns compressed features) and
//! `Dy_k` of shape `[r, c]` (rows compressed features, columns spatial-y
//! positions), so `Dx_k` has the shape of `Dy_kᵀ`. Two row-stochastic
//! affinity matrices couple the axes:
//!
//! ```text
//!   Wxy = softmax_rows(Dyᵀ · P · Dxᵀ / √d)      [c × c]
//!   Wyx = softmax_rows(Dx  · Q · Dy  / √d)      [c × c]
//!   Dx' = Dx + γ · Wyx · Dyᵀ
//!   Dy' = Dy + γ · (Wxy · Dx)ᵀ
//! ```
//!
//! with `P`, `Q` trainable `r × r` matrices shared across channels and
//! `d = r` their column count. `γ = 0` bypasses the module entirely
//! (bitwise identity), which is the ablation contrast.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Trainable coupling matrices plus the fixed fusion weight.
#[derive(Debug, Clone)]
pub struct CoAttentionParams {
    pub p: Tensor,
    pub q: Tensor,
    pub gamma: f64,
}

impl CoAttentionParams {
    /// Identity plus small seeded noise, so training starts near a copy
    /// attention.
    pub fn new(r: usize, gamma: f64, rng: &mut Rng) -> Result<CoAttentionParams> {
        if r == 0 {
            return Err(Error::invalid("coattention", "feature dim r must be positive"));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid("coattention", format!("gamma {gamma} outside [0, 1]")));
        }
        let noisy_identity = |rng: &mut Rng| {
            let mut data = vec![0.0; r * r];
            for i in 0..r {
                data[i * r + i] = 1.0;
            }
            for v in &mut data {
                *v += rng.normal(0.01);
            }
            Tensor::from_vec(&[r, r], data).unwrap()
        };
        Ok(CoAttentionParams {
            p: noisy_identity(rng),
            q: noisy_identity(rng),
            gamma,
        })
    }

    /// Normalization dimension of Eq-style scaling: the column count of P/Q.
    pub fn d(&self) -> usize {
        self.p.shape()[1]
    }
}

/// Tape-lifted parameter handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct CoAttentionVars {
    pub p: Var,
    pub q: Var,
    pub gamma: f64,
}

impl CoAttentionParams {
    pub fn lift(&self, tape: &mut Tape, trainable: bool) -> CoAttentionVars {
        CoAttentionVars {
            p: tape.leaf(&self.p, trainable),
            q: tape.leaf(&self.q, trainable),
            gamma: self.gamma,
        }
    }
}

/// Per-channel feature stacks for both axes; `dx[k]` is `[c, r]`,
/// `dy[k]` is `[r, c]`.
#[derive(Debug, Clone)]
pub struct AxisFeatures {
    pub dx: Vec<Var>,
    pub dy: Vec<Var>,
}

fn check_channel(tape: &Tape, dx: Var, dy: Var, d: usize) -> Result<(usize, usize)> {
    let sx = tape.shape(dx);
    let sy = tape.shape(dy);
    if sx.len() != 2 || sy.len() != 2 || sx[0] != sy[1] || sx[1] != sy[0] {
        return Err(Error::shape("coattention", sx, sy));
    }
    let (c, r) = (sx[0], sx[1]);
    if r != d {
        return Err(Error::invalid(
            "coattention",
            format!("feature dim {r} does not match P/Q side {d}"),
        ));
    }
    Ok((c, r))
}

/// Both affinity matrices for one channel. Every row of each output sums
/// to 1.
pub fn affinities(
    tape: &mut Tape,
    dx: Var,
    dy: Var,
    params: &CoAttentionVars,
) -> Result<(Var, Var)> {
    let d = tape.shape(params.p)[1];
    check_channel(tape, dx, dy, d)?;
    let scale = 1.0 / (d as f64).sqrt();

    // Wxy = softmax_rows(Dyᵀ · P · Dxᵀ / √d)
    let dy_t = tape.transpose2(dy)?;
    let dx_t = tape.transpose2(dx)?;
    let yp = tape.matmul(dy_t, params.p)?;
    let ypx = tape.matmul(yp, dx_t)?;
    let scaled = tape.scale(ypx, scale)?;
    let wxy = tape.softmax_rows(scaled)?;

    // Wyx = softmax_rows(Dx · Q · Dy / √d)
    let xq = tape.matmul(dx, params.q)?;
    let xqy = tape.matmul(xq, dy)?;
    let scaled = tape.scale(xqy, scale)?;
    let wyx = tape.softmax_rows(scaled)?;

    Ok((wxy, wyx))
}

/// Fuse attended content back into each axis:
/// `Dx' = Dx + γ·Wyx·Dyᵀ`, `Dy' = Dy + γ·(Wxy·Dx)ᵀ`.
pub fn fuse(
    tape: &mut Tape,
    dx: Var,
    dy: Var,
    wxy: Var,
    wyx: Var,
    gamma: f64,
) -> Result<(Var, Var)> {
    let c = tape.shape(dx)[0];
    for (name, w) in [("Wxy", wxy), ("Wyx", wyx)] {
        let s = tape.shape(w);
        if s != [c, c] {
            return Err(Error::invalid(
                "fuse",
                format!("{name} must be {c}x{c}, got {s:?}"),
            ));
        }
    }
    if gamma == 0.0 {
        // Ablation path: the module is discarded, inputs pass through
        // untouched (bitwise).
        return Ok((dx, dy));
    }
    let dy_t = tape.transpose2(dy)?;
    let att_x = tape.matmul(wyx, dy_t)?;
    let att_x = tape.scale(att_x, gamma)?;
    let dx2 = tape.add(dx, att_x)?;

    let att_y = tape.matmul(wxy, dx)?;
    let att_y = tape.transpose2(att_y)?;
    let att_y = tape.scale(att_y, gamma)?;
    let dy2 = tape.add(dy, att_y)?;
    Ok((dx2, dy2))
}

/// Apply affinities + fuse to every channel independently; P and Q are
/// shared across channels.
pub fn coattention_forward(
    tape: &mut Tape,
    features: &AxisFeatures,
    params: &CoAttentionVars,
) -> Result<AxisFeatures> {
    if features.dx.len() != features.dy.len() || features.dx.is_empty() {
        return Err(Error::invalid(
            "coattention_forward",
            format!("need matching nonempty channel lists, got {} vs {}", features.dx.len(), features.dy.len()),
        ));
    }
    if params.gamma == 0.0 {
        return Ok(features.clone());
    }
    let mut out = AxisFeatures { dx: Vec::new(), dy: Vec::new() };
    for k in 0..features.dx.len() {
        let (wxy, wyx) = affinities(tape, features.dx[k], features.dy[k], params)?;
        let (dx2, dy2) = fuse(tape, features.dx[k], features.dy[k], wxy, wyx, params.gamma)?;
        out.dx.push(dx2);
        out.dy.push(dy2);
    }
    Ok(out)
}
