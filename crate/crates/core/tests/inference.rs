use zsl_core::inference::*;
use zsl_tensor::{seeded_rng, Tensor};

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

/// Ridge minimizer by plain gradient descent at step `1/L`.
fn ridge_by_descent(unseen: &Tensor, seen: &Tensor, lambda: f64) -> Vec<f64> {
    let (u, s, d) = (unseen.shape()[0], seen.shape()[0], seen.shape()[1]);
    let st: Vec<f64> = (0..d * s).map(|i| seen.data()[(i % s) * d + i / s]).collect();
    let gram = matmul(seen.data(), &st, s, d, s);
    // Gershgorin bound on the largest eigenvalue
    let bound = (0..s)
        .map(|i| (0..s).map(|j| gram[i * s + j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / (2.0 * (bound + lambda));
    let mut w = vec![0.0; u * s];
    for _ in 0..200_000 {
        let recon = matmul(&w, seen.data(), u, s, d);
        let resid: Vec<f64> = recon.iter().zip(unseen.data()).map(|(a, b)| a - b).collect();
        let g = matmul(&resid, &st, u, d, s);
        let mut change = 0.0f64;
        for i in 0..u * s {
            let delta = step * (2.0 * g[i] + 2.0 * lambda * w[i]);
            w[i] -= delta;
            change = change.max(delta.abs());
        }
        if change < 1e-14 {
            break;
        }
    }
    w
}

#[test]
fn ridge_matches_gradient_descent() {
    let mut rng = seeded_rng(20);
    for trial in 0..20 {
        let (u, s, d) = (2 + trial % 3, 3 + trial % 4, 6 + trial % 5);
        let seen = Tensor::randn(&[s, d], 1.0, &mut rng);
        let unseen = Tensor::randn(&[u, d], 1.0, &mut rng);
        let lambda = [0.1, 1.0, 10.0][trial % 3];
        let w = solve_ridge(&unseen, &seen, lambda).unwrap();
        let oracle = ridge_by_descent(&unseen, &seen, lambda);
        let err = w.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "trial {trial}: {err}");
    }
}

#[test]
fn ridge_is_a_minimum() {
    let mut rng = seeded_rng(21);
    let seen = Tensor::randn(&[4, 7], 1.0, &mut rng);
    let unseen = Tensor::randn(&[3, 7], 1.0, &mut rng);
    let w = solve_ridge(&unseen, &seen, 0.5).unwrap();
    let base = ridge_objective(&w, &unseen, &seen, 0.5);
    for _ in 0..50 {
        let noise = Tensor::randn(&[3, 4], 1e-3, &mut rng);
        let data = w.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
        let p = Tensor::new(&[3, 4], data).unwrap();
        assert!(ridge_objective(&p, &unseen, &seen, 0.5) >= base);
    }
}

#[test]
fn ridge_recovers_identity_on_seen_targets() {
    let mut rng = seeded_rng(22);
    let seen = Tensor::randn(&[4, 9], 1.0, &mut rng);
    let w = solve_ridge(&seen, &seen, 1e-10).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            let e = f64::from(u8::from(i == j));
            assert!((w.row(i)[j] - e).abs() <= 1e-6);
        }
    }
}

#[test]
fn ridge_shrinks_to_zero() {
    let mut rng = seeded_rng(23);
    let seen = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let unseen = Tensor::randn(&[2, 5], 1.0, &mut rng);
    let norm = |l: f64| {
        let w = solve_ridge(&unseen, &seen, l).unwrap();
        w.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let norms: Vec<f64> = [0.1, 1.0, 10.0, 1e3, 1e6].iter().map(|&l| norm(l)).collect();
    assert!(norms.windows(2).all(|w| w[1] < w[0]));
    assert!(norms[4] < 1e-4);
}

#[test]
fn ridge_rejects_bad_inputs() {
    let seen = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let unseen = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
    assert!(solve_ridge(&unseen, &seen, 1.0).is_err());
    let seen = Tensor::new(&[2, 3], vec![1.0; 6]).unwrap();
    assert!(solve_ridge(&unseen, &seen, 1.0).is_err());
    let seen = Tensor::new(&[2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
    assert!(solve_ridge(&unseen, &seen, -1.0).is_err());
    assert!(solve_ridge(&unseen, &seen, 0.0).is_err());
}

#[test]
fn prototypes_are_class_means_and_chain_through_ridge() {
    let f = Tensor::new(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 10.0, 0.0, 20.0, 0.0]).unwrap();
    let p = seen_prototypes(&f, &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(p.data(), &[2.0, 3.0, 15.0, 0.0]);
    assert!(seen_prototypes(&f, &[0, 0, 0, 0], 2).is_err());

    let w = Tensor::new(&[1, 2], vec![0.5, 2.0]).unwrap();
    assert_eq!(unseen_prototypes(&w, &p).unwrap().data(), &[31.0, 1.5]);
}

#[test]
fn predict_matches_brute_force() {
    let mut rng = seeded_rng(24);
    for _ in 0..200 {
        let scores = Tensor::randn(&[5], 1.0, &mut rng).into_data();
        let protos = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let phi = Tensor::randn(&[3], 1.0, &mut rng).into_data();
        let beta = 0.7;
        let mut best = (f64::NEG_INFINITY, 0);
        for y in 0..5 {
            let p = protos.row(y);
            let dot: f64 = p.iter().zip(&phi).map(|(a, b)| a * b).sum();
            let n = (p.iter().map(|v| v * v).sum::<f64>() * phi.iter().map(|v| v * v).sum::<f64>()).sqrt();
            let v = scores[y] + beta * dot / n;
            if v > best.0 {
                best = (v, y);
            }
        }
        assert_eq!(predict(&scores, &phi, &protos, beta), best.1);
        assert_eq!(gzsl_predict(&scores, &phi, &protos, beta), best.1);
    }
}

#[test]
fn predict_fixtures() {
    let protos = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(predict(&[0.0, 0.0], &[0.0, 1.0], &protos, 1.0), 1);
    assert_eq!(predict(&[0.0, 0.0], &[0.0, 1.0], &protos, 0.0), 0);
    assert_eq!(predict(&[2.0, 0.0], &[0.0, 1.0], &protos, 1.0), 0);
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
}

#[test]
fn predictor_restricts_zsl_to_unseen_and_gzsl_to_all() {
    // two seen classes along the axes, one unseen on the diagonal
    let sem = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let feats = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let cfg = InferenceConfig {
        ridge_lambda: 1e-9,
        ..Default::default()
    };
    let p = Predictor::fit(&feats, &[0, 1], 1, &sem, &[0, 1], &[2], cfg).unwrap();
    assert!((p.prototypes.row(2)[0] - 1.0).abs() < 1e-6);
    assert!((p.prototypes.row(2)[1] - 1.0).abs() < 1e-6);
    assert_eq!(p.predict_zsl(&[5.0, 0.0]), 2);
    assert_eq!(p.predict_gzsl(&[0.1, 0.1]), 2);
    assert_eq!(p.predict_gzsl(&[5.0, -1.0]), 0);
    assert!(Predictor::fit(&feats, &[0, 2], 1, &sem, &[0, 1], &[2], cfg).is_err());
}
