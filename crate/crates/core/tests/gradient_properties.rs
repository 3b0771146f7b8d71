//! Finite-difference validation of every differentiable primitive over
//! randomized shapes, plus forward oracles for the convolution ops.

use mhm_core::tensor::{grad_check, Tape, Tensor, Var};
use mhm_core::{Result, Rng};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;
const SHAPES_PER_OP: usize = 20;

fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.uniform_in(-1.5, 1.5))
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random values bounded away from zero, for kink-free relu probing.
fn random_tensor_off_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let v = rng.uniform_in(0.05, 1.5);
            if rng.uniform() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Reduce to a scalar in a way that gives every output element a distinct
/// upstream gradient.
fn reduce(tape: &mut Tape, y: Var, target: &Tensor) -> Result<Var> {
    let t = tape.leaf(target, false);
    tape.sum_sq_diff(y, t)
}

fn check<F>(op_name: &str, inputs: &[Tensor], f: F)
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let err = grad_check(f, inputs, EPS).unwrap();
    assert!(err <= TOL, "{op_name}: rel err {err} > {TOL}");
}

#[test]
fn add_sub_scale_gradients() {
    let mut rng = Rng::new(101);
    for i in 0..SHAPES_PER_OP {
        let dims = vec![rng.index(3) + 1, rng.index(4) + 1];
        let a = random_tensor(&dims, &mut rng);
        let b = random_tensor(&dims, &mut rng);
        let target = random_tensor(&dims, &mut rng);
        check(&format!("add[{i}]"), &[a.clone(), b.clone()], |tape, vs| {
            let y = tape.add(vs[0], vs[1])?;
            reduce(tape, y, &target)
        });
        check(&format!("sub[{i}]"), &[a.clone(), b], |tape, vs| {
            let y = tape.sub(vs[0], vs[1])?;
            reduce(tape, y, &target)
        });
        let s = rng.uniform_in(-2.0, 2.0);
        check(&format!("scale[{i}]"), &[a], |tape, vs| {
            let y = tape.scale(vs[0], s)?;
            reduce(tape, y, &target)
        });
    }
}

#[test]
fn relu_gradients() {
    let mut rng = Rng::new(102);
    for i in 0..SHAPES_PER_OP {
        let dims = vec![rng.index(4) + 1, rng.index(5) + 1];
        let a = random_tensor_off_zero(&dims, &mut rng);
        let target = random_tensor(&dims, &mut rng);
        check(&format!("relu[{i}]"), &[a], |tape, vs| {
            let y = tape.relu(vs[0])?;
            reduce(tape, y, &target)
        });
    }
}

#[test]
fn matmul_gradients() {
    let mut rng = Rng::new(103);
    for i in 0..SHAPES_PER_OP {
        let (m, k, n) = (rng.index(4) + 1, rng.index(4) + 1, rng.index(4) + 1);
        let a = random_tensor(&[m, k], &mut rng);
        let b = random_tensor(&[k, n], &mut rng);
        let target = random_tensor(&[m, n], &mut rng);
        check(&format!("matmul[{i}]"), &[a, b], |tape, vs| {
            let y = tape.matmul(vs[0], vs[1])?;
            reduce(tape, y, &target)
        });
    }
}

#[test]
fn matmul_four_by_five_matches_finite_differences_tightly() {
    let mut rng = Rng::new(104);
    let a = random_tensor(&[4, 5], &mut rng);
    let b = random_tensor(&[5, 3], &mut rng);
    let target = random_tensor(&[4, 3], &mut rng);
    let err = grad_check(
        |tape, vs| {
            let y = tape.matmul(vs[0], vs[1])?;
            let t = tape.leaf(&target, false);
            tape.sum_sq_diff(y, t)
        },
        &[a, b],
        EPS,
    )
    .unwrap();
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn transpose_reshape_gradients() {
    let mut rng = Rng::new(105);
    for i in 0..SHAPES_PER_OP {
        let (m, n) = (rng.index(4) + 1, rng.index(4) + 1);
        let a = random_tensor(&[m, n], &mut rng);
        let t1 = random_tensor(&[n, m], &mut rng);
        check(&format!("transpose[{i}]"), &[a.clone()], |tape, vs| {
            let y = tape.transpose2(vs[0])?;
            reduce(tape, y, &t1)
        });
        let t2 = random_tensor(&[m * n], &mut rng);
        check(&format!("reshape[{i}]"), &[a], |tape, vs| {
            let y = tape.reshape(vs[0], &[m * n])?;
            reduce(tape, y, &t2)
        });
    }
}

#[test]
fn softmax_rows_gradients() {
    let mut rng = Rng::new(106);
    for i in 0..SHAPES_PER_OP {
        let (m, n) = (rng.index(3) + 1, rng.index(4) + 2);
        let a = random_tensor(&[m, n], &mut rng);
        let target = random_tensor(&[m, n], &mut rng);
        check(&format!("softmax_rows[{i}]"), &[a], |tape, vs| {
            let y = tape.softmax_rows(vs[0])?;
            reduce(tape, y, &target)
        });
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = Rng::new(107);
    for i in 0..SHAPES_PER_OP {
        let c_in = rng.index(2) + 1;
        let c_out = rng.index(2) + 1;
        let kh = rng.index(3) + 1;
        let kw = rng.index(3) + 1;
        let h = kh + rng.index(3);
        let w = kw + rng.index(3);
        let stride = (rng.index(2) + 1, rng.index(2) + 1);
        let padding = (rng.index(2), rng.index(2));
        let x = random_tensor(&[c_in, h, w], &mut rng);
        let k = random_tensor(&[c_out, c_in, kh, kw], &mut rng);
        let oh = (h + 2 * padding.0 - kh) / stride.0 + 1;
        let ow = (w + 2 * padding.1 - kw) / stride.1 + 1;
        let target = random_tensor(&[c_out, oh, ow], &mut rng);
        check(&format!("conv2d[{i}]"), &[x, k], |tape, vs| {
            let y = tape.conv2d(vs[0], vs[1], stride, padding)?;
            reduce(tape, y, &target)
        });
    }
}

#[test]
fn conv_transpose2d_gradients() {
    let mut rng = Rng::new(108);
    for i in 0..SHAPES_PER_OP {
        let c_in = rng.index(2) + 1;
        let c_out = rng.index(2) + 1;
        let mh = rng.index(3) + 1;
        let mw = rng.index(3) + 1;
        let h = rng.index(3) + 1;
        let w = rng.index(3) + 1;
        let x = random_tensor(&[c_in, h, w], &mut rng);
        let k = random_tensor(&[c_in, c_out, mh, mw], &mut rng);
        let target = random_tensor(&[c_out, h * mh, w * mw], &mut rng);
        check(&format!("conv_transpose2d[{i}]"), &[x, k], |tape, vs| {
            let y = tape.conv_transpose2d(vs[0], vs[1], (mh, mw))?;
            reduce(tape, y, &target)
        });
    }
}

#[test]
fn channel_bias_and_upsample_gradients() {
    let mut rng = Rng::new(109);
    for i in 0..SHAPES_PER_OP {
        let (c, h, w) = (rng.index(3) + 1, rng.index(3) + 1, rng.index(3) + 1);
        let x = random_tensor(&[c, h, w], &mut rng);
        let b = random_tensor(&[c], &mut rng);
        let target = random_tensor(&[c, h, w], &mut rng);
        check(&format!("add_channel_bias[{i}]"), &[x.clone(), b], |tape, vs| {
            let y = tape.add_channel_bias(vs[0], vs[1])?;
            reduce(tape, y, &target)
        });
        let target_up = random_tensor(&[c, 2 * h, 2 * w], &mut rng);
        check(&format!("upsample_nearest2[{i}]"), &[x], |tape, vs| {
            let y = tape.upsample_nearest2(vs[0])?;
            reduce(tape, y, &target_up)
        });
    }
}

#[test]
fn channel_slicing_gradients() {
    let mut rng = Rng::new(110);
    for i in 0..SHAPES_PER_OP {
        let (c, h, w) = (rng.index(3) + 2, rng.index(3) + 1, rng.index(3) + 1);
        let x = random_tensor(&[c, h, w], &mut rng);
        let channel = rng.index(c);
        let t1 = random_tensor(&[h, w], &mut rng);
        check(&format!("select_channel[{i}]"), &[x.clone()], |tape, vs| {
            let y = tape.select_channel(vs[0], channel)?;
            reduce(tape, y, &t1)
        });
        let start = rng.index(c);
        let len = rng.index(c - start) + 1;
        let t2 = random_tensor(&[len, h, w], &mut rng);
        check(&format!("narrow_channels[{i}]"), &[x.clone()], |tape, vs| {
            let y = tape.narrow_channels(vs[0], start, len)?;
            reduce(tape, y, &t2)
        });
        let y2 = random_tensor(&[rng.index(2) + 1, h, w], &mut rng);
        let tcat = random_tensor(&[c + y2.shape()[0], h, w], &mut rng);
        check(&format!("concat_channels[{i}]"), &[x, y2], |tape, vs| {
            let y = tape.concat_channels(&[vs[0], vs[1]])?;
            reduce(tape, y, &tcat)
        });
    }
}

#[test]
fn reduction_gradients() {
    let mut rng = Rng::new(111);
    for i in 0..SHAPES_PER_OP {
        let dims = vec![rng.index(3) + 1, rng.index(4) + 1];
        let a = random_tensor(&dims, &mut rng);
        let b = random_tensor(&dims, &mut rng);
        check(&format!("sum[{i}]"), &[a.clone()], |tape, vs| tape.sum(vs[0]));
        check(&format!("mean[{i}]"), &[a.clone()], |tape, vs| tape.mean(vs[0]));
        check(&format!("sum_sq_diff[{i}]"), &[a.clone(), b.clone()], |tape, vs| {
            tape.sum_sq_diff(vs[0], vs[1])
        });
        check(&format!("mse[{i}]"), &[a, b], |tape, vs| tape.mse(vs[0], vs[1]));
    }
}

// ---------------------------------------------------------------------------
// Forward oracles
// ---------------------------------------------------------------------------

/// Reference cross-correlation, written independently of the tape kernel.
fn conv2d_oracle(
    x: &Tensor,
    k: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Vec<f64> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * padding.0 - kh) / stride.0 + 1;
    let ow = (w + 2 * padding.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for a in 0..kh {
                        for b in 0..kw {
                            let y = (i * stride.0 + a) as isize - padding.0 as isize;
                            let z = (j * stride.1 + b) as isize - padding.1 as isize;
                            if y >= 0 && (y as usize) < h && z >= 0 && (z as usize) < w {
                                acc += x.data()[(c * h + y as usize) * w + z as usize]
                                    * k.data()[((o * c_in + c) * kh + a) * kw + b];
                            }
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = Rng::new(112);
    for _ in 0..30 {
        let c_in = rng.index(3) + 1;
        let c_out = rng.index(3) + 1;
        let kh = rng.index(3) + 1;
        let kw = rng.index(3) + 1;
        let h = kh + rng.index(4);
        let w = kw + rng.index(4);
        let stride = (rng.index(2) + 1, rng.index(2) + 1);
        let padding = (rng.index(2), rng.index(2));
        let x = random_tensor(&[c_in, h, w], &mut rng);
        let k = random_tensor(&[c_out, c_in, kh, kw], &mut rng);
        let expect = conv2d_oracle(&x, &k, stride, padding);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false);
        let kv = tape.leaf(&k, false);
        let y = tape.conv2d(xv, kv, stride, padding).unwrap();
        let got = tape.value(y);
        assert_eq!(got.len(), expect.len());
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
        }
    }
}

#[test]
fn conv2d_ones_kernel_footprint_of_one_hot() {
    // one-hot input, all-ones 3x3 kernel: each output cell is 1 exactly
    // when its window covers the hot pixel.
    for (hot_y, hot_x) in [(2usize, 2usize), (0, 0), (4, 1)] {
        let mut data = vec![0.0; 25];
        data[hot_y * 5 + hot_x] = 1.0;
        let x = Tensor::from_vec(&[1, 5, 5], data).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let expect = conv2d_oracle(&x, &k, (1, 1), (0, 0));
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false);
        let kv = tape.leaf(&k, false);
        let y = tape.conv2d(xv, kv, (1, 1), (0, 0)).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert_eq!(tape.value(y), &expect[..]);
        for i in 0..3 {
            for j in 0..3 {
                let covered = i <= hot_y && hot_y < i + 3 && j <= hot_x && hot_x < j + 3;
                assert_eq!(tape.value(y)[i * 3 + j], if covered { 1.0 } else { 0.0 });
            }
        }
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // ⟨conv_transpose(x, w), y⟩ = ⟨x, conv(y, w_swapped)⟩ where the conv
    // uses stride = kernel = M and w_swapped transposes the channel axes.
    let mut rng = Rng::new(113);
    for _ in 0..20 {
        let c_in = rng.index(2) + 1;
        let c_out = rng.index(2) + 1;
        let m = rng.index(3) + 1;
        let h = rng.index(3) + 1;
        let w = rng.index(3) + 1;
        let x = random_tensor(&[c_in, h, w], &mut rng);
        let kernel = random_tensor(&[c_in, c_out, m, m], &mut rng);
        let y = random_tensor(&[c_out, h * m, w * m], &mut rng);

        let mut tape = Tape::new();
        let xv = tape.leaf(&x, false);
        let kv = tape.leaf(&kernel, false);
        let up = tape.conv_transpose2d(xv, kv, (m, m)).unwrap();
        let lhs: f64 = tape.value(up).iter().zip(y.data()).map(|(a, b)| a * b).sum();

        // The conv-direction weight is the same buffer read as
        // [K = c_in, C = c_out, m, m]: ⟨ct(x,k), y⟩ = Σ x·k·y matches
        // ⟨x, conv(y, k)⟩ term by term under that layout.
        let k2 = Tensor::from_vec(&[c_in, c_out, m, m], kernel.data().to_vec()).unwrap();
        let expect = conv2d_oracle(&y, &k2, (m, m), (0, 0));
        let rhs: f64 = expect.iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
    }
}
