mod common;

use common::*;
use lasaft::numerics::kernels;
use lasaft::numerics::{ConvGeometry, GradCheckOptions, Graph, Mode, ParamStore, RngStream, RunningStats, Tensor};

fn store_with(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t).unwrap();
    }
    s
}

#[test]
fn conv2d_identity_kernel_is_exact() {
    let mut rng = RngStream::new(10);
    let x = random_tensor_f32(&mut rng, &[2, 1, 5, 7]);
    let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0f32]).unwrap();
    let b = Tensor::zeros(vec![1]);
    let y = kernels::conv2d(&x, &w, Some(&b), ConvGeometry::unit()).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv2d_zero_input_yields_bias() {
    let x = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
    let w = Tensor::full(vec![2, 3, 3, 3], 0.7);
    let b = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
    let y = kernels::conv2d(&x, &w, Some(&b), ConvGeometry::new((1, 1), (1, 1, 1, 1))).unwrap();
    for (c, plane) in y.data().chunks(16).enumerate() {
        assert!(plane.iter().all(|&v| v == b.data()[c]));
    }
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = RngStream::new(11);
    let x = random_tensor(&mut rng, &[1, 1, 4, 4]);
    let w = random_tensor(&mut rng, &[1, 1, 3, 3]);
    let b = random_tensor(&mut rng, &[1]);
    let geo = ConvGeometry::new((1, 1), (1, 1, 1, 1));
    let y = kernels::conv2d(&x, &w, Some(&b), geo).unwrap();
    let (expect, ho, wo) = conv_direct(x.data(), 1, 4, 4, w.data(), 1, 3, 3, b.data(), (1, 1), (1, 1, 1, 1));
    assert_eq!((ho, wo), (4, 4));
    assert_close(y.data(), &expect, 1e-6);

    // multi-channel, strided, asymmetric padding
    let x = random_tensor(&mut rng, &[2, 3, 6, 8]);
    let w = random_tensor(&mut rng, &[5, 3, 2, 3]);
    let b = random_tensor(&mut rng, &[5]);
    let geo = ConvGeometry::new((2, 1), (0, 1, 2, 0));
    let y = kernels::conv2d(&x, &w, Some(&b), geo).unwrap();
    for n in 0..2 {
        let (expect, ho, wo) = conv_direct(x.slice_outer(n), 3, 6, 8, w.data(), 5, 2, 3, b.data(), (2, 1), (0, 1, 2, 0));
        assert_eq!(&y.shape()[2..], &[ho, wo]);
        assert_close(y.slice_outer(n), &expect, 1e-10);
    }
}

#[test]
fn conv2d_output_extent_and_errors() {
    let geo = ConvGeometry::new((2, 2), (0, 0, 0, 0));
    assert_eq!(geo.output_extent(16, 16, 2, 2).unwrap(), (8, 8));
    let x = Tensor::<f32>::zeros(vec![1, 3, 4, 4]);
    let w = Tensor::<f32>::zeros(vec![2, 4, 3, 3]);
    assert!(matches!(
        kernels::conv2d(&x, &w, None, ConvGeometry::unit()),
        Err(lasaft::Error::Config(_))
    ));
    let w = Tensor::<f32>::zeros(vec![2, 3, 5, 5]);
    assert!(kernels::conv2d(&x, &w, None, ConvGeometry::unit()).is_err());
}

#[test]
fn transposed_conv_replicates_with_ones_kernel() {
    let x = Tensor::new(vec![1, 1, 1, 1], vec![1.0f64]).unwrap();
    let w = Tensor::full(vec![1, 1, 2, 2], 1.0);
    let y = kernels::conv_transpose2d(&x, &w, None, (2, 2)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn transposed_conv_zero_input_is_bias() {
    let x = Tensor::<f64>::zeros(vec![1, 2, 3, 3]);
    let w = Tensor::full(vec![2, 3, 2, 2], 0.3);
    let b = Tensor::new(vec![3], vec![1.0, 2.0, -3.0]).unwrap();
    let y = kernels::conv_transpose2d(&x, &w, Some(&b), (2, 2)).unwrap();
    assert_eq!(y.shape(), &[1, 3, 6, 6]);
    for (c, plane) in y.data().chunks(36).enumerate() {
        assert!(plane.iter().all(|&v| v == b.data()[c]));
    }
}

#[test]
fn transposed_conv_is_adjoint_of_conv() {
    let mut rng = RngStream::new(12);
    for (stride, k) in [((2, 2), (2, 2)), ((1, 1), (3, 2)), ((2, 1), (3, 3))] {
        let x = random_tensor(&mut rng, &[1, 2, 3, 3]);
        let w = random_tensor(&mut rng, &[2, 3, k.0, k.1]);
        let y = kernels::conv_transpose2d(&x, &w, None, stride).unwrap();
        let (expect, oh, ow) = conv_transpose_by_duality(x.data(), 2, 3, 3, w.data(), 3, k.0, k.1, stride);
        assert_eq!(y.shape(), &[1, 3, oh, ow]);
        assert_close(y.data(), &expect, 1e-10);
    }
}

#[test]
fn dense_special_cases_and_oracle() {
    let mut rng = RngStream::new(13);
    let x = random_tensor(&mut rng, &[3, 4]);
    let eye = Tensor::from_fn(vec![4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let zero_b = Tensor::zeros(vec![4]);
    assert_eq!(kernels::dense(&x, &eye, Some(&zero_b)).unwrap(), x);

    let b = random_tensor(&mut rng, &[4]);
    let y = kernels::dense(&Tensor::zeros(vec![2, 4]), &eye, Some(&b)).unwrap();
    assert_eq!(&y.data()[..4], b.data());
    assert_eq!(&y.data()[4..], b.data());

    let x = random_tensor(&mut rng, &[3, 5]);
    let w = random_tensor(&mut rng, &[4, 5]);
    let b = random_tensor(&mut rng, &[4]);
    let y = kernels::dense(&x, &w, Some(&b)).unwrap();
    assert_close(y.data(), &matmul_naive(x.data(), 3, 5, w.data(), 4, b.data()), 1e-12);

    let w_bad = random_tensor(&mut rng, &[4, 6]);
    assert!(matches!(kernels::dense(&x, &w_bad, None), Err(lasaft::Error::Config(_))));
}

fn bn_forward(x: Tensor<f64>, scale: f64, shift: f64, mode: Mode, stats: &mut RunningStats<f64>) -> Tensor<f64> {
    let ch = x.dim(1);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let s = g.constant(Tensor::full(vec![ch], scale));
    let b = g.constant(Tensor::full(vec![ch], shift));
    let y = g.batch_norm(xv, s, b, stats, 1, mode).unwrap();
    g.value(y).clone()
}

#[test]
fn batch_norm_constant_input_and_zero_scale() {
    let mut stats = RunningStats::new(2);
    let y = bn_forward(Tensor::full(vec![3, 2, 2, 2], 4.0), 1.0, 0.0, Mode::Train, &mut stats);
    assert!(y.data().iter().all(|v| v.abs() < 1e-9));

    let mut rng = RngStream::new(14);
    let y = bn_forward(random_tensor(&mut rng, &[3, 2, 2, 2]), 0.0, 0.75, Mode::Train, &mut stats);
    assert!(y.data().iter().all(|&v| v == 0.75));
}

#[test]
fn batch_norm_train_statistics() {
    let mut rng = RngStream::new(15);
    let x = Tensor::from_fn(vec![8, 3, 5, 4], |_| 3.0 + 2.5 * rng.normal());
    let mut stats = RunningStats::new(3);
    let y = bn_forward(x.clone(), 1.0, 0.0, Mode::Train, &mut stats);
    for c in 0..3 {
        let vals: Vec<f64> = (0..8).flat_map(|n| y.slice_outer(n)[c * 20..(c + 1) * 20].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        // ε_bn shrinks the variance slightly below one
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
    // running stats moved toward the batch statistics by the momentum
    assert!(stats.mean.iter().all(|&m| (m - 0.3).abs() < 0.1));
}

#[test]
fn batch_norm_eval_before_training_uses_initial_stats() {
    let mut stats = RunningStats::new(1);
    let x = Tensor::new(vec![1, 1, 1, 2], vec![2.0, -1.0]).unwrap();
    let y = bn_forward(x, 1.0, 0.0, Mode::Eval, &mut stats);
    let k = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert_close(y.data(), &[2.0 * k, -k], 1e-12);
    assert_eq!(stats, RunningStats::new(1));
}

#[test]
fn activations_basic_values() {
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::full(vec![6], 0.3));
    let s = g.softmax(v);
    assert!(g.value(s).data().iter().all(|&a| (a - 1.0 / 6.0).abs() < 1e-15));
    let big = g.constant(Tensor::new(vec![3], vec![1000.0, 1000.0, 1000.0]).unwrap());
    let s = g.softmax(big);
    assert!(g.value(s).data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
    assert_eq!(kernels::sigmoid(0.0f64), 0.5);
    let r = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(r);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn dropout_modes_and_expectation() {
    let mut rng = RngStream::new(16);
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(vec![100_000], 2.0));
    let same = g.dropout(x, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(g.value(same), g.value(x));
    let same = g.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
    assert_eq!(g.value(same), g.value(x));
    assert!(g.dropout(x, 1.0, Mode::Train, &mut rng).is_err());

    let y = g.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
    let vals = g.value(y).data();
    let survivors = vals.iter().filter(|&&v| v != 0.0).count() as f64 / vals.len() as f64;
    assert!((survivors - 0.5).abs() < 0.01, "{survivors}");
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 2.0).abs() < 0.02, "{mean}");
}

#[test]
fn kernel_gradients_match_finite_differences() {
    let mut rng = RngStream::new(17);
    let opts = GradCheckOptions::default();

    let mut s = store_with(vec![
        ("x", random_tensor(&mut rng, &[2, 2, 5, 6])),
        ("w", random_tensor(&mut rng, &[3, 2, 3, 2])),
        ("b", random_tensor(&mut rng, &[3])),
    ]);
    let r = check_block(&mut s, 1, opts, |g, p| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        g.conv2d(x, w, Some(b), ConvGeometry::new((2, 1), (1, 1, 0, 1)))
    });
    assert!(r.passes(1e-3), "conv2d {r:?}");

    let mut s = store_with(vec![
        ("x", random_tensor(&mut rng, &[2, 3, 3, 2])),
        ("w", random_tensor(&mut rng, &[3, 2, 2, 2])),
        ("b", random_tensor(&mut rng, &[2])),
    ]);
    let r = check_block(&mut s, 2, opts, |g, p| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        g.conv_transpose2d(x, w, Some(b), (2, 2))
    });
    assert!(r.passes(1e-3), "transposed conv {r:?}");

    let mut s = store_with(vec![
        ("x", random_tensor(&mut rng, &[4, 5])),
        ("w", random_tensor(&mut rng, &[3, 5])),
        ("b", random_tensor(&mut rng, &[3])),
    ]);
    let r = check_block(&mut s, 3, opts, |g, p| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        g.dense(x, w, Some(b))
    });
    assert!(r.passes(1e-3), "dense {r:?}");

    for mode in [Mode::Train, Mode::Eval] {
        let mut s = store_with(vec![
            ("x", random_tensor(&mut rng, &[3, 2, 2, 3])),
            ("scale", random_tensor(&mut rng, &[2])),
            ("shift", random_tensor(&mut rng, &[2])),
        ]);
        let r = check_block(&mut s, 4, opts, |g, p| {
            let (x, a, b) = (g.param(p, "x")?, g.param(p, "scale")?, g.param(p, "shift")?);
            let mut stats = RunningStats::new(2);
            stats.mean = vec![0.3, -0.2];
            stats.var = vec![1.5, 0.7];
            g.batch_norm(x, a, b, &mut stats, 1, mode)
        });
        assert!(r.passes(1e-3), "batch norm {mode:?} {r:?}");
    }

    let mut s = store_with(vec![("x", random_tensor(&mut rng, &[3, 4]))]);
    let r = check_block(&mut s, 5, opts, |g, p| {
        let x = g.param(p, "x")?;
        let a = g.softmax(x);
        let b = g.sigmoid(x);
        let c = g.relu(x);
        let ab = g.mul(a, b)?;
        g.add(ab, c)
    });
    assert!(r.passes(1e-3), "activations {r:?}");
}

#[test]
fn determinism_of_seeded_stream() {
    let mut a = RngStream::new(99);
    let mut b = RngStream::new(99);
    let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
    let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
    assert_eq!(xa, xb);
    let mut c = RngStream::new(100);
    assert_ne!(xa[0], c.next_u64());
}
