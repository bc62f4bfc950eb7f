//! Convolution and transpose-convolution forward passes against naive
//! nested-loop oracles, plus the adjoint identity between the two.

use nabla_core::kernels::{conv2d_fw, convt2d_fw, Conv2dGeom, ConvT2dGeom};
use nabla_core::{Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct definition: y[n,oc,oy,ox] = b[oc] + sum over (ic,ki,kj) of
/// x[n,ic,oy*s+ki-p,ox*s+kj-p] * w[oc,ic,ki,kj], out-of-bounds taps 0.
#[allow(clippy::too_many_arguments)]
fn naive_conv2d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[oc];
                    for ic in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ni * cin + ic) * h + iy as usize) * wd + ix as usize];
                                let wv = w[((oc * cin + ic) * k + ki) * k + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    y[((ni * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

/// Direct definition by scattering: every input pixel adds its kernel
/// stamp at (iy*s+ki-p, ix*s+kj-p). Weight layout (cin, cout, k, k).
#[allow(clippy::too_many_arguments)]
fn naive_convt2d(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    wd: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = stride * (h - 1) + k - 2 * pad;
    let ow = stride * (wd - 1) + k - 2 * pad;
    let mut y = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for oc in 0..cout {
            for v in &mut y[(ni * cout + oc) * oh * ow..(ni * cout + oc + 1) * oh * ow] {
                *v = b[oc];
            }
        }
    }
    for ni in 0..n {
        for ic in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x[((ni * cin + ic) * h + iy) * wd + ix];
                    for oc in 0..cout {
                        for ki in 0..k {
                            for kj in 0..k {
                                let oy = (iy * stride + ki) as isize - pad as isize;
                                let ox = (ix * stride + kj) as isize - pad as isize;
                                if oy < 0 || oy >= oh as isize || ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let wv = w[((ic * cout + oc) * k + ki) * k + kj];
                                y[((ni * cout + oc) * oh + oy as usize) * ow + ox as usize] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv2d_matches_naive_oracle_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0);
    for case in 0..100 {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=4);
        let cout = rng.random_range(1..=4);
        let k: usize = rng.random_range(1..=5);
        let pad = rng.random_range(0..=2usize);
        let lo = k.saturating_sub(2 * pad).max(1);
        let h = rng.random_range(lo..=k + 5);
        let w = rng.random_range(lo..=k + 5);
        let oh = h + 2 * pad - k + 1;
        let ow = w + 2 * pad - k + 1;
        let x = rand_vec(&mut rng, n * cin * h * w);
        let wt = rand_vec(&mut rng, cout * cin * k * k);
        let b = rand_vec(&mut rng, cout);
        let expected = naive_conv2d(&x, &wt, &b, n, cin, cout, h, w, k, 1, pad);
        let geom = Conv2dGeom { n, cin, cout, h, w, kh: k, kw: k, stride: 1, pad, oh, ow };
        let mut got = vec![0.0; expected.len()];
        conv2d_fw(&x, &wt, Some(&b), &geom, &mut got);
        let diff = max_abs_diff(&expected, &got);
        assert!(diff <= 1e-6, "case {}: conv2d deviates from oracle by {}", case, diff);
    }
}

#[test]
fn conv_transpose2d_matches_naive_oracle_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    for case in 0..100 {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=4);
        let cout = rng.random_range(1..=4);
        let k = 2 * rng.random_range(1..=2);
        let pad = (k - 2) / 2;
        let h = rng.random_range(1..=5);
        let w = rng.random_range(1..=5);
        let stride = 2;
        let oh = stride * (h - 1) + k - 2 * pad;
        let ow = stride * (w - 1) + k - 2 * pad;
        let x = rand_vec(&mut rng, n * cin * h * w);
        let wt = rand_vec(&mut rng, cin * cout * k * k);
        let b = rand_vec(&mut rng, cout);
        let expected = naive_convt2d(&x, &wt, &b, n, cin, cout, h, w, k, stride, pad);
        let geom = ConvT2dGeom { n, cin, cout, h, w, kh: k, kw: k, stride, pad, oh, ow };
        let mut got = vec![0.0; expected.len()];
        convt2d_fw(&x, &wt, Some(&b), &geom, &mut got);
        let diff = max_abs_diff(&expected, &got);
        assert!(diff <= 1e-6, "case {}: conv_transpose2d deviates from oracle by {}", case, diff);
    }
}

/// The transpose convolution must be the exact adjoint of the
/// convolution with the same geometry: <conv(x), g> == <x, convt(g)>.
#[test]
fn conv_transpose_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    for _ in 0..50 {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=3);
        let cout = rng.random_range(1..=3);
        let k = 2 * rng.random_range(1..=2);
        let pad = (k - 2) / 2;
        let oh = rng.random_range(2..=5);
        let ow = rng.random_range(2..=5);
        let (h, w) = (2 * oh, 2 * ow);

        // Forward conv: (n, cin, h, w) -> (n, cout, oh, ow), stride 2.
        let x = rand_vec(&mut rng, n * cin * h * w);
        let wt = rand_vec(&mut rng, cout * cin * k * k);
        let g = rand_vec(&mut rng, n * cout * oh * ow);
        let geom = Conv2dGeom { n, cin, cout, h, w, kh: k, kw: k, stride: 2, pad, oh, ow };
        let mut y = vec![0.0; g.len()];
        conv2d_fw(&x, &wt, None, &geom, &mut y);

        // Adjoint via the transpose conv. The conv weight (cout, cin,
        // k, k) reads directly as a transpose-conv weight (cin', cout',
        // k, k) with cin' = cout: no permutation needed.
        let tgeom = ConvT2dGeom { n, cin: cout, cout: cin, h: oh, w: ow, kh: k, kw: k, stride: 2, pad, oh: h, ow: w };
        let mut back = vec![0.0; x.len()];
        convt2d_fw(&g, &wt, None, &tgeom, &mut back);

        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1.0),
            "adjoint identity violated: {} vs {}",
            lhs,
            rhs
        );
    }
}

/// Tape-level spot checks: identity kernel, known 3x3 case.
#[test]
fn conv2d_identity_kernel_preserves_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(
        Tensor::new(Shape::new(1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap(),
        false,
    );
    let w = tape.leaf(Tensor::new(Shape::new(1, 1, 1, 1), vec![1.0]).unwrap(), false);
    let y = tape.conv2d(x, w, None, 0).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn conv2d_rejects_channel_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 4)), false);
    let w = tape.leaf(Tensor::zeros(Shape::new(1, 3, 3, 3)), false);
    let err = tape.conv2d(x, w, None, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("1x2x4x4") && msg.contains("1x3x3x3"), "diagnostic should name both shapes: {msg}");
}

#[test]
fn conv_transpose2d_rejects_odd_kernels() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 4)), false);
    let w = tape.leaf(Tensor::zeros(Shape::new(2, 2, 3, 3)), false);
    assert!(tape.conv_transpose2d(x, w, None).is_err());
}

#[test]
fn conv_transpose2d_doubles_spatial_dims() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(Shape::new(2, 3, 5, 7)), false);
    let w = tape.leaf(Tensor::zeros(Shape::new(3, 4, 2, 2)), false);
    let y = tape.conv_transpose2d(x, w, None).unwrap();
    assert_eq!(tape.value(y).shape(), Shape::new(2, 4, 10, 14));
}
