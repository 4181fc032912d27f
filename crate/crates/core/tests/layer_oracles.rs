use nalgebra::DMatrix;
use rand::Rng;
use spdgan_core::features::{GramDescriptor, LayerTag};
use spdgan_core::graph::Ridge;
use spdgan_core::linalg::Mat;
use spdgan_core::losses::build_blur_kernel;
use spdgan_core::params::ParamStore;
use spdgan_core::rng;
use spdgan_core::spdnet::{SpdNetStack, REEIG_EPS};
use spdgan_core::{Graph, Tensor};

fn randn(r: &mut rng::Stream, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng::normal(r))
}

/// Direct seven-loop cross-correlation with zero padding.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for s in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((o * c + ci) * k + u) * k + v] * x.data()[((s * c + ci) * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                    out[((s * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (vec![n, co, ho, wo], out)
}

#[test]
fn conv_matches_direct_summation() {
    let mut r = rng::stream(5);
    for (c_in, c_out, size, k, stride, pad) in [(3, 4, 9, 3, 1, 1), (2, 5, 10, 4, 2, 1), (4, 1, 7, 4, 1, 0), (1, 3, 8, 3, 2, 1)] {
        let x = randn(&mut r, &[2, c_in, size, size]);
        let w = randn(&mut r, &[c_out, c_in, k, k]);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let (shape, want) = conv_oracle(&x, &w, stride, pad);
        assert_eq!(g.shape(y), &shape[..]);
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn deconv_is_adjoint_of_conv() {
    let mut r = rng::stream(6);
    for (c_small, c_big, size, k, stride, pad) in [(3, 2, 8, 4, 2, 1), (2, 4, 5, 3, 1, 1), (1, 3, 6, 4, 2, 1)] {
        // conv: big-channel map of side `size` -> small-channel map
        let w = randn(&mut r, &[c_small, c_big, k, k]);
        let x = randn(&mut r, &[2, c_big, size, size]);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let z = randn(&mut r, g.shape(y));
        let zv = g.input(z.clone());
        let back = g.deconv2d(zv, wv, None, stride, pad).unwrap();
        assert_eq!(g.shape(back), x.shape());
        let lhs = g.value(y).dot(&z);
        let rhs = x.dot(g.value(back));
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn blur_matches_reflect_padded_summation() {
    let k = build_blur_kernel();
    let mut r = rng::stream(7);
    let (h, w) = (13, 24);
    let x = randn(&mut r, &[1, 2, h, w]);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.blur(xv, &k.cast::<f64>(), k.radius).unwrap();
    // Mirror without edge repetition, written out independently.
    let mirror = |i: i64, n: i64| {
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let rr = k.radius as i64;
    for p in 0..2 {
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                let mut acc = 0.0;
                for dy in -rr..=rr {
                    for dx in -rr..=rr {
                        acc += k.at(dx, dy) * x.data()[(p * h + mirror(i + dy, h as i64)) * w + mirror(j + dx, w as i64)];
                    }
                }
                let got = g.value(y).data()[(p * h + i as usize) * w + j as usize];
                assert!((got - acc).abs() < 1e-12, "({p},{i},{j}): {got} vs {acc}");
            }
        }
    }
}

#[test]
fn blur_of_constant_scales_by_kernel_sum() {
    let k = build_blur_kernel();
    let total: f64 = k.weights.iter().sum();
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 1, 30, 30], 2.0));
    let y = g.blur(x, &k.cast::<f64>(), k.radius).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 2.0 * total).abs() < 1e-12));
}

#[test]
fn gram_matches_summation_oracle() {
    let mut r = rng::stream(29);
    let (n, c, h, w) = (3, 6, 5, 7);
    let x = randn(&mut r, &[n, c, h, w]);
    let delta = 1e-3;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let gm = g.gram(xv, Ridge::Fixed(delta)).unwrap();
    let hw = (h * w) as f64;
    for s in 0..n {
        for i in 0..c {
            for j in 0..c {
                let mut acc = 0.0;
                for p in 0..h * w {
                    acc += x.data()[(s * c + i) * h * w + p] * x.data()[(s * c + j) * h * w + p];
                }
                let want = acc / hw + if i == j { delta } else { 0.0 };
                let got = g.value(gm).data()[(s * c + i) * c + j];
                assert!((got - want).abs() < 1e-8, "{got} vs {want}");
            }
        }
    }
}

#[test]
fn gram_is_quadratic_and_ridged() {
    let mut r = rng::stream(30);
    // Rank-deficient on purpose: 8 channels, 4 pixels.
    let f = randn(&mut r, &[8, 2, 2]);
    let a = GramDescriptor::from_features(&f, LayerTag::Stage3, Ridge::Fixed(0.0)).unwrap_err();
    assert!(a.to_string().contains("positive"), "{a}");
    let d = GramDescriptor::from_features(&f, LayerTag::Stage3, Ridge::Relative { scale: 1e-5, floor: 1e-10 }).unwrap();
    let trace: f64 = (0..8).map(|i| d.matrix.as_mat().as_slice()[i * 9]).sum::<f64>() - 8.0 * d.ridge;
    assert!((d.ridge - 1e-5 * trace / 8.0).abs() < 1e-18);
    let ev = DMatrix::from_row_slice(8, 8, d.matrix.as_mat().as_slice()).symmetric_eigen().eigenvalues;
    assert!(ev.min() >= d.ridge * (1.0 - 1e-6), "{} < {}", ev.min(), d.ridge);

    let scaled = f.map(|v| 3.0 * v);
    let g1 = GramDescriptor::from_features(&f, LayerTag::Stage3, Ridge::Fixed(1e-9)).ok();
    let g3 = GramDescriptor::from_features(&scaled, LayerTag::Stage3, Ridge::Fixed(9e-9)).ok();
    if let (Some(g1), Some(g3)) = (g1, g3) {
        for (a, b) in g1.matrix.as_mat().as_slice().iter().zip(g3.matrix.as_mat().as_slice()) {
            assert!((9.0 * a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }
}

fn random_spd(r: &mut rng::Stream, n: usize) -> Mat {
    // Eigenvalues spread over six decades, including ones below the ReEig
    // threshold.
    let q = DMatrix::from_fn(n, n, |_, _| rng::normal(r)).qr().q();
    let lam: Vec<f64> = (0..n).map(|_| 10f64.powf(r.gen_range(-6.0..0.0))).collect();
    let m = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(lam)) * q.transpose();
    Mat::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

#[test]
fn spd_chain_stays_symmetric_and_rectified() {
    let mut r = rng::stream(31);
    let mut store = ParamStore::<f64>::new(3);
    let stack = SpdNetStack::new(&mut store, "t", &[32, 16, 8, 4], REEIG_EPS, &mut r).unwrap();
    let mats: Vec<Mat> = (0..40).map(|_| random_spd(&mut r, 32)).collect();
    let mut g = Graph::new();
    let x = g.input(Tensor::from_mats(&mats).unwrap());
    let trace = stack.forward(&mut g, &store, x).unwrap();
    for &v in trace.after_bimap.iter().chain(&trace.after_reeig).chain([&trace.logeig]) {
        let t = g.value(v);
        for i in 0..t.shape()[0] {
            assert!(t.mat(i).max_asymmetry() <= 1e-8);
        }
    }
    for &v in &trace.after_reeig {
        let t = g.value(v);
        for i in 0..t.shape()[0] {
            let m = t.mat(i);
            let ev = DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice()).symmetric_eigen().eigenvalues;
            assert!(ev.min() >= REEIG_EPS * (1.0 - 1e-6), "min eigenvalue {}", ev.min());
        }
    }
}

#[test]
fn stiefel_updates_keep_rows_orthonormal() {
    let mut r = rng::stream(32);
    let mut store = ParamStore::<f64>::new(3);
    let stack = SpdNetStack::new(&mut store, "t", &[32, 16, 8, 4], REEIG_EPS, &mut r).unwrap();
    let s = randn(&mut r, &[2, 4, 4]);
    for step in 0..200 {
        let mats: Vec<Mat> = (0..2).map(|_| random_spd(&mut r, 32)).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_mats(&mats).unwrap());
        let tr = stack.forward(&mut g, &store, x).unwrap();
        let sv = g.input(s.clone());
        let p = g.mul(tr.logeig, sv).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap().accumulate_into(&mut store).unwrap();
        stack.stiefel_update(&mut store, 0.05).unwrap();
        if step % 50 == 49 {
            for (b, _) in &stack.blocs {
                let w = b.weight(&store);
                let e = w.matmul_t(&w).sub(&Mat::identity(w.rows()));
                assert!(e.as_slice().iter().all(|v| v.abs() <= 1e-6), "step {step}: {}", e.frobenius());
            }
        }
    }
}
