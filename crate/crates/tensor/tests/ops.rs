use proptest::prelude::*;
use zsl_tensor::{
    grad_check, grad_check_many, read_tensor, seeded_rng, write_tensor, Graph, Pointwise, Result,
    Tensor, TensorError, Var,
};

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut seeded_rng(seed))
}

/// Contracts an arbitrary tensor to a scalar with fixed random weights so
/// every output element carries an O(1) gradient.
fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let w = rand_t(g.shape(v), seed ^ 0xabcdef);
    let wv = g.constant(w)?;
    let p = g.mul(v, wv)?;
    g.sum(p)
}

#[test]
fn conv_identity_kernel() {
    let x = rand_t(&[1, 1, 4, 5], 1);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let k = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
    let y = g.conv2d(xv, k, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn conv_summation_case() {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
    let y = g.conv2d(xv, k, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 9.0);
}

#[test]
fn conv_shape_errors_name_dimension() {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
    let err = g.conv2d(xv, k, 1, 0).unwrap_err();
    assert!(err.to_string().contains("channels"), "{err}");
    let k = g.constant(Tensor::zeros(&[1, 2, 5, 1])).unwrap();
    let err = g.conv2d(xv, k, 1, 0).unwrap_err();
    assert!(err.to_string().contains("height"), "{err}");
}

#[test]
fn conv_gradients_match_finite_differences() {
    let cases = [
        ([2, 3, 5, 5], [4, 3, 3, 3], 1, 1),
        ([2, 3, 5, 5], [4, 3, 3, 3], 1, 0),
        ([1, 2, 6, 7], [3, 2, 3, 2], 2, 1),
        ([3, 1, 4, 4], [2, 1, 2, 2], 1, 0),
    ];
    for (i, (xs, ks, stride, pad)) in cases.into_iter().enumerate() {
        let x = rand_t(&xs, 10 + i as u64);
        let k = rand_t(&ks, 20 + i as u64);
        let err = grad_check_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                weighted_sum(g, y, i as u64)
            },
            &[x, k],
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "case {i}: {err}");
    }
}

#[test]
fn channel_bias_gradients() {
    for (i, shape) in [[2, 3, 4, 4], [1, 5, 2, 3], [3, 1, 3, 3]].iter().enumerate() {
        let x = rand_t(shape, i as u64);
        let b = rand_t(&[shape[1]], 7 + i as u64);
        let err = grad_check_many(
            |g, v| {
                let y = g.add_channel_bias(v[0], v[1])?;
                weighted_sum(g, y, 3)
            },
            &[x, b],
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{err}");
    }
}

#[test]
fn fully_connected_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap()).unwrap();
    let w = g.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
    let b = g.constant(Tensor::new(&[1], vec![0.0]).unwrap()).unwrap();
    let y = g.fully_connected(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[5.0]);

    let xin = rand_t(&[3, 4], 5);
    let x = g.constant(xin.clone()).unwrap();
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data_mut()[i * 4 + i] = 1.0;
    }
    let w = g.constant(eye).unwrap();
    let b = g.constant(Tensor::zeros(&[4])).unwrap();
    let y = g.fully_connected(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), xin.data());

    let bad = g.constant(Tensor::zeros(&[2, 5])).unwrap();
    assert!(matches!(
        g.fully_connected(x, bad, None),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn fully_connected_gradients() {
    for (i, (n, din, dout)) in [(4, 6, 4), (2, 3, 5), (1, 7, 2)].into_iter().enumerate() {
        let err = grad_check_many(
            |g, v| {
                let y = g.fully_connected(v[0], v[1], Some(v[2]))?;
                weighted_sum(g, y, i as u64)
            },
            &[
                rand_t(&[n, din], 1 + i as u64),
                rand_t(&[dout, din], 2 + i as u64),
                rand_t(&[dout], 3 + i as u64),
            ],
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{err}");
    }
}

#[test]
fn matmul_gradients() {
    for (i, (m, k, n)) in [(2, 3, 4), (5, 1, 2), (3, 3, 3)].into_iter().enumerate() {
        let err = grad_check_many(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, i as u64)
            },
            &[rand_t(&[m, k], 4 + i as u64), rand_t(&[k, n], 9 + i as u64)],
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{err}");
    }
}

#[test]
fn pointwise_values_and_gradients() {
    let mut g = Graph::new();
    let x = g
        .variable(Tensor::new(&[3], vec![0.0, -3.0, 3.0]).unwrap())
        .unwrap();
    let s = g.sigmoid(x).unwrap();
    let r = g.relu(x).unwrap();
    assert_eq!(g.value(s).data()[0], 0.5);
    assert_eq!(&g.value(r).data()[1..], &[0.0, 3.0]);

    let err = grad_check(
        |g, v| {
            let y = g.sigmoid(v)?;
            g.sum(y)
        },
        &Tensor::zeros(&[1]),
        EPS,
    )
    .unwrap();
    assert!(err <= TOL);
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(&[1])).unwrap();
    let y = g.sigmoid(x).unwrap();
    g.backward(y).unwrap();
    assert!((g.grad(x)[0] - 0.25).abs() < 1e-15);

    // relu subgradient at 0 is 0
    let mut g = Graph::new();
    let x = g.variable(Tensor::zeros(&[2])).unwrap();
    let y = g.relu(x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x), vec![0.0, 0.0]);

    for (i, shape) in [&[5usize][..], &[2, 3], &[2, 2, 2]].iter().enumerate() {
        for kind in [Pointwise::Sigmoid, Pointwise::Relu] {
            // keep relu probes away from the kink
            let mut x = rand_t(shape, 30 + i as u64);
            x.data_mut()
                .iter_mut()
                .for_each(|v| *v += 0.1_f64.copysign(*v));
            let err = grad_check(
                |g, v| {
                    let y = g.apply_pointwise(kind, v)?;
                    weighted_sum(g, y, 1)
                },
                &x,
                EPS,
            )
            .unwrap();
            assert!(err <= TOL, "{kind:?}: {err}");
        }
    }
}

#[test]
fn global_avg_pool_examples() {
    let mut g = Graph::new();
    let x = g
        .variable(Tensor::new(&[1, 2, 2, 2], vec![1., 2., 3., 4., 7., 7., 7., 7.]).unwrap())
        .unwrap();
    let p = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(p).data(), &[2.5, 7.0]);
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).iter().all(|&v| v == 0.25));

    for (i, shape) in [[2, 3, 4, 4], [1, 1, 3, 5], [2, 2, 1, 1]].iter().enumerate() {
        let err = grad_check(
            |g, v| {
                let y = g.global_avg_pool(v)?;
                weighted_sum(g, y, i as u64)
            },
            &rand_t(shape, i as u64),
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{err}");
    }
}

#[test]
fn avg_pool_gradients() {
    for (i, shape) in [[1, 2, 4, 4], [2, 1, 6, 4], [1, 3, 5, 5]].iter().enumerate() {
        let err = grad_check(
            |g, v| {
                let y = g.avg_pool2(v)?;
                weighted_sum(g, y, i as u64)
            },
            &rand_t(shape, i as u64),
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{err}");
    }
}

#[test]
fn bilinear_resize_examples() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[1, 2, 3, 4], 0.7)).unwrap();
    let r = g.bilinear_resize(c, 5, 2).unwrap();
    assert!(g.value(r).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

    let x = rand_t(&[2, 1, 3, 4], 3);
    let xv = g.constant(x.clone()).unwrap();
    let r = g.bilinear_resize(xv, 3, 4).unwrap();
    assert_eq!(g.value(r).data(), x.data());

    let x = g
        .constant(Tensor::new(&[1, 1, 2, 2], vec![0., 1., 2., 3.]).unwrap())
        .unwrap();
    let r = g.bilinear_resize(x, 3, 3).unwrap();
    let d = g.value(r).data();
    assert_eq!(d[4], 1.5);
    assert_eq!([d[0], d[2], d[6], d[8]], [0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn bilinear_resize_gradients() {
    for (i, (shape, oh, ow)) in [([1, 2, 4, 4], 7, 5), ([2, 1, 5, 3], 2, 6), ([1, 1, 3, 3], 3, 3)]
        .into_iter()
        .enumerate()
    {
        let err = grad_check(
            |g, v| {
                let y = g.bilinear_resize(v, oh, ow)?;
                weighted_sum(g, y, i as u64)
            },
            &rand_t(&shape, i as u64),
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{err}");
    }
}

#[test]
fn l2_normalize_examples_and_gradients() {
    let mut g = Graph::new();
    let x = g
        .constant(Tensor::new(&[2, 2], vec![3.0, 4.0, 0.0, 1.0]).unwrap())
        .unwrap();
    let y = g.l2_normalize(x, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    assert_eq!(&d[2..], &[0.0, 1.0]);

    for (i, shape) in [[2, 5], [3, 2], [1, 7]].iter().enumerate() {
        let err = grad_check(
            |g, v| {
                let y = g.l2_normalize(v, 1e-12)?;
                weighted_sum(g, y, i as u64)
            },
            &rand_t(shape, 40 + i as u64),
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{err}");
    }
}

#[test]
fn structural_op_gradients() {
    let a = rand_t(&[3, 2], 1);
    let b = rand_t(&[3, 4], 2);
    let c = rand_t(&[3, 2], 3);
    let err = grad_check_many(
        |g, v| {
            let cat = g.concat_cols(&[v[0], v[1]])?;
            let s = g.add_n(&[v[0], v[2], v[0]])?;
            let d = g.sub(s, v[2])?;
            let m = g.mul(d, v[2])?;
            let sc = g.scale(m, -1.5)?;
            let af = g.col_affine(cat, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.1], &[0.3; 6])?;
            let r = g.reshape(af, &[18])?;
            let s1 = weighted_sum(g, r, 1)?;
            let s2 = g.mean(sc)?;
            let mse = g.mse(v[1], &Tensor::full(&[3, 4], 0.2))?;
            g.add_n(&[s1, s2, mse])
        },
        &[a, b, c],
        EPS,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn channel_weighted_sum_and_mask_gradients() {
    for (i, (n, c, h, w)) in [(2, 3, 4, 4), (1, 5, 2, 3), (3, 1, 3, 2)].into_iter().enumerate() {
        let err = grad_check_many(
            |g, v| {
                let m = g.channel_weighted_sum(v[0], v[1])?;
                let s = g.sigmoid(m)?;
                let im = g.mul_mask(v[2], s)?;
                weighted_sum(g, im, i as u64)
            },
            &[
                rand_t(&[n, c, h, w], 1 + i as u64),
                rand_t(&[n, c], 2 + i as u64),
                rand_t(&[n, 2, h, w], 3 + i as u64),
            ],
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "{err}");
    }
}

#[test]
fn softmax_cross_entropy_values_and_gradient() {
    let mut g = Graph::new();
    let l = g.variable(Tensor::zeros(&[1, 2])).unwrap();
    let loss = g.softmax_cross_entropy(l, &[1]).unwrap();
    assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(g.softmax_cross_entropy(l, &[2]).is_err());

    let logits = rand_t(&[4, 5], 11);
    let labels = [0usize, 3, 4, 1];
    let err = grad_check(|g, v| g.softmax_cross_entropy(v, &labels), &logits, EPS).unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn nan_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[2], 1e300)).unwrap();
    let y = g.mul(x, x);
    assert!(matches!(y, Err(TensorError::NonFinite { .. })));
    assert!(g.constant(Tensor::full(&[1], f64::NAN)).is_err());
}

#[test]
fn off_path_gradients_are_zero() {
    let mut g = Graph::new();
    let a = g.variable(rand_t(&[3], 1)).unwrap();
    let b = g.variable(rand_t(&[3], 2)).unwrap();
    let _unused = g.scale(b, 2.0).unwrap();
    let s = g.sum(a).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(b), vec![0.0; 3]);
    assert_eq!(g.grad(a), vec![1.0; 3]);
}

fn conv_chain(g: &mut Graph, x: Var, k: &Tensor, w: &Tensor) -> Result<Var> {
    let kv = g.param("k", k)?;
    let wv = g.param("w", w)?;
    let y = g.conv2d(x, kv, 1, 1)?;
    let y = g.relu(y)?;
    let p = g.global_avg_pool(y)?;
    let logits = g.fully_connected(p, wv, None)?;
    g.softmax_cross_entropy(logits, &[1, 0])
}

#[test]
fn end_to_end_chain_gradcheck() {
    let k = rand_t(&[3, 2, 3, 3], 5);
    let w = rand_t(&[4, 3], 6);
    let x = rand_t(&[2, 2, 5, 5], 7);
    let err = grad_check_many(
        |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            let y = g.relu(y)?;
            let p = g.global_avg_pool(y)?;
            let logits = g.fully_connected(p, v[2], None)?;
            g.softmax_cross_entropy(logits, &[1, 0])
        },
        &[x, k, w],
        EPS,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn forward_and_backward_are_bit_identical() {
    let k = rand_t(&[3, 2, 3, 3], 5);
    let w = rand_t(&[4, 3], 6);
    let x = rand_t(&[2, 2, 5, 5], 7);
    let run = || {
        let mut g = Graph::new();
        let xv = g.variable(x.clone()).unwrap();
        let loss = conv_chain(&mut g, xv, &k, &w).unwrap();
        g.backward(loss).unwrap();
        let mut out = vec![g.value(loss).item()];
        out.extend(g.grad(xv));
        for (_, gr) in g.param_grads() {
            out.extend(gr);
        }
        out
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn backward_is_linear_in_the_loss() {
    let x = rand_t(&[2, 4], 3);
    let grad_of = |wa: f64, wb: f64| {
        let mut g = Graph::new();
        let v = g.variable(x.clone()).unwrap();
        let s = g.sigmoid(v).unwrap();
        let f = g.mean(s).unwrap();
        let n = g.l2_normalize(v, 1e-12).unwrap();
        let q = g.mul(n, v).unwrap();
        let h = g.sum(q).unwrap();
        let fa = g.scale(f, wa).unwrap();
        let hb = g.scale(h, wb).unwrap();
        let total = g.add(fa, hb).unwrap();
        g.backward(total).unwrap();
        g.grad(v)
    };
    let gf = grad_of(1.0, 0.0);
    let gh = grad_of(0.0, 1.0);
    let combo = grad_of(2.5, -0.75);
    for i in 0..gf.len() {
        let expect = 2.5 * gf[i] - 0.75 * gh[i];
        assert!((combo[i] - expect).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn blob_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in 0u64..1000) {
        let t = rand_t(&shape, seed);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&buf[..]).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn sigmoid_output_in_open_unit_interval(v in -30.0f64..30.0) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1], v)).unwrap();
        let y = g.sigmoid(x).unwrap();
        let s = g.value(y).item();
        prop_assert!(s > 0.0 && s < 1.0);
    }
}
