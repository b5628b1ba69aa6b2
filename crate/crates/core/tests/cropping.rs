use proptest::prelude::*;
use zsl_core::attention::AttentionMap;
use zsl_core::cropping::*;
use zsl_core::optim::{Sgd, SgdConfig};
use zsl_core::params::ParamVisitor;
use zsl_tensor::{grad_check_scaled, seeded_rng, Graph, Tensor};

fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Largest soft/hard gap over pixel centers further than `band` from an edge.
fn max_gap_outside_band(p: CropParams, k: f64, n: usize, band: f64) -> f64 {
    let mask = boxcar_mask(p, k, n, n).unwrap();
    let (lo_x, hi_x) = (p.t_x - p.t_s / 2.0, p.t_x + p.t_s / 2.0);
    let (lo_y, hi_y) = (p.t_y - p.t_s / 2.0, p.t_y + p.t_s / 2.0);
    let mut worst = 0.0f64;
    for r in 0..n {
        for c in 0..n {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let near = |v: f64, lo: f64, hi: f64| (v - lo).abs() <= band || (v - hi).abs() <= band;
            if near(x, lo_x, hi_x) || near(y, lo_y, hi_y) {
                continue;
            }
            let hard = f64::from(u8::from(x > lo_x && x < hi_x && y > lo_y && y < hi_y));
            worst = worst.max((mask.values.data()[r * n + c] - hard).abs());
        }
    }
    worst
}

#[test]
fn boxcar_converges_to_hard_square() {
    let p = CropParams::new(15.3, 12.8, 9.4);
    let gaps: Vec<f64> = [10.0, 100.0, 1000.0].iter().map(|&k| max_gap_outside_band(p, k, 32, 2.0)).collect();
    assert!(gaps.windows(2).all(|w| w[1] <= w[0]), "{gaps:?}");
    assert!(gaps[1] < gaps[0]);
    assert!(gaps[2] < 1e-3);
}

#[test]
fn boxcar_center_and_edge_values() {
    // 21 pixels, center 10.5 sits on pixel 10
    let v = boxcar_profile(10.5, 10.0, 10.0, 21);
    assert!((v[10] - (sigma(50.0) - sigma(-50.0))).abs() < 1e-15);
    assert!((v[10] - 1.0).abs() < 1e-9);
    // left edge 5.5 is pixel 5's center
    assert!((v[5] - (sigma(100.0) - 0.5)).abs() < 1e-12);
    // right edge 15.5; pixel 20 is 5 px outside, k·distance = 50
    assert!(v[20] < 1e-6);
}

#[test]
fn boxcar_mask_is_separable() {
    let p = CropParams::new(9.0, 14.0, 7.0);
    let m = boxcar_mask(p, 10.0, 20, 24).unwrap();
    let vx = boxcar_profile(9.0, 7.0, 10.0, 24);
    let vy = boxcar_profile(14.0, 7.0, 10.0, 20);
    for r in 0..20 {
        for c in 0..24 {
            assert_eq!(m.values.data()[r * 24 + c], vy[r] * vx[c]);
        }
    }
    assert!(boxcar_mask(p, 0.0, 4, 4).is_err());
}

proptest! {
    #[test]
    fn mask_in_unit_interval_and_monotone_in_side(
        tx in 2.0f64..30.0, ty in 2.0f64..30.0, ts in 2.0f64..16.0, grow in 0.0f64..8.0, k in 0.5f64..20.0,
    ) {
        let small = boxcar_mask(CropParams::new(tx, ty, ts), k, 32, 32).unwrap();
        let big = boxcar_mask(CropParams::new(tx, ty, ts + grow), k, 32, 32).unwrap();
        for (a, b) in small.values.data().iter().zip(big.values.data()) {
            prop_assert!((0.0..=1.0).contains(a));
            prop_assert!(b >= a);
        }
    }
}

#[test]
fn full_window_of_ones_reproduces_image() {
    let mut rng = seeded_rng(30);
    let img = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(img.clone()).unwrap();
    let t = g.constant(CropParams::to_tensor(&[CropParams::new(4.0, 4.0, 8.0)])).unwrap();
    let out = window_sample(&mut g, x, t, 8).unwrap();
    for (a, b) in g.value(out).data().iter().zip(img.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn crop_gradient_wrt_box_matches_finite_differences() {
    let mut rng = seeded_rng(31);
    let img = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let inputs = [CropParams::to_tensor(&[CropParams::new(7.3, 8.6, 6.7)])];
    for mode in [CropMode::Window, CropMode::FullMasked] {
        let mut g = Graph::new();
        let (x, t) = (g.constant(img.clone()).unwrap(), g.variable(inputs[0].clone()).unwrap());
        let out = apply_crop(&mut g, x, t, 10.0, 8, mode).unwrap();
        let m = g.mean(out).unwrap();
        g.backward(m).unwrap();
        assert!(g.grad(t)[0] != 0.0);
        let err = grad_check_scaled(
            |g, v| {
                let x = g.constant(img.clone())?;
                let out = apply_crop(g, x, v[0], 10.0, 8, mode).unwrap();
                g.mean(out)
            },
            &inputs,
            1e-6,
            0.0,
        )
        .unwrap();
        assert!(err <= 1e-3, "{mode:?}: {err}");
    }
}

#[test]
fn degenerate_window_is_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 8, 8])).unwrap();
    let t = g.constant(CropParams::to_tensor(&[CropParams::new(4.0, 4.0, 1.0)])).unwrap();
    assert!(apply_crop(&mut g, x, t, 10.0, 4, CropMode::Window).is_err());
}

#[test]
fn zero_net_passes_bias_through() {
    let net = CropNet::zeros(64, 8, 64, [0.5, 0.5, 0.25]).unwrap();
    let map = AttentionMap {
        values: Tensor::zeros(&[8, 8]),
        part_index: 0,
    };
    let p = crop_params(&net, &map).unwrap();
    assert!((p.t_x - 32.0).abs() < 1e-12);
    assert!((p.t_y - 32.0).abs() < 1e-12);
    assert!((p.t_s - 16.0).abs() < 1e-12);
}

#[test]
fn pseudo_box_uses_pixel_centers() {
    let mut v = vec![0.0; 64];
    v[2 * 8 + 5] = 1.0;
    let b = pseudo_box_from(&v, 8, 8, 64);
    assert_eq!((b.p_x, b.p_y, b.t_s), (44.0, 20.0, 16.0));
    let mut c = vec![0.0; 9];
    c[4] = 1.0;
    let b = pseudo_box_from(&c, 3, 3, 30);
    assert_eq!((b.p_x, b.p_y), (15.0, 15.0));
}

#[test]
fn pretrain_loss_fixtures() {
    let pseudo = [PseudoBox { p_x: 32.0, p_y: 16.0, t_s: 16.0 }];
    let mut g = Graph::new();
    let exact = g.constant(Tensor::new(&[1, 3], vec![32.0, 16.0, 16.0]).unwrap()).unwrap();
    let l = pretrain_crop_loss(&mut g, exact, &pseudo, 64).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let off = g.constant(Tensor::new(&[1, 3], vec![32.0 + 6.4, 16.0 - 6.4, 16.0 + 6.4]).unwrap()).unwrap();
    let l = pretrain_crop_loss(&mut g, off, &pseudo, 64).unwrap();
    assert!((g.value(l).item() - 0.01).abs() < 1e-12);
}

#[test]
fn pretraining_fits_pseudo_boxes() {
    let size = 32;
    let mut rng = seeded_rng(32);
    // one bright peak per map, assorted positions
    let peaks = [(1, 6), (2, 2), (5, 5), (6, 1), (3, 4), (0, 0), (7, 3), (4, 7)];
    let mut data = Tensor::uniform(&[peaks.len(), 8, 8], 0.0, 0.3, &mut rng).into_data();
    for (n, &(r, c)) in peaks.iter().enumerate() {
        data[n * 64 + r * 8 + c] = 1.0;
    }
    let maps = Tensor::new(&[peaks.len(), 8, 8], data).unwrap();
    let pseudo: Vec<PseudoBox> = maps.data().chunks(64).map(|v| pseudo_box_from(v, 8, 8, size)).collect();
    let mut net = CropNet::init(64, 32, size, [0.5, 0.5, 0.25], &mut rng).unwrap();
    let mut sgd = Sgd::new(SgdConfig {
        lr: 0.5,
        ..Default::default()
    });
    let mut last = f64::INFINITY;
    for _ in 0..500 {
        let mut g = Graph::new();
        let b = net.bind(&mut g, "crop", true).unwrap();
        let m = g.constant(maps.clone()).unwrap();
        let t = net.forward(&mut g, &b, m).unwrap();
        let l = pretrain_crop_loss(&mut g, t, &pseudo, size).unwrap();
        g.backward(l).unwrap();
        last = g.value(l).item();
        sgd.step(&g.param_grads(), |v: &mut dyn ParamVisitor| net.visit("crop", v)).unwrap();
    }
    assert!(last < 1e-3, "{last}");
}

#[test]
fn export_sidecar_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let boxes = vec![vec![CropParams::new(1.0 / 3.0, 17.25, 8.000000000000002)]];
    let parts = vec![Tensor::full(&[1, 3, 2, 2], 0.5)];
    export_crops(dir.path(), 7, &parts, &boxes).unwrap();
    let text = std::fs::read_to_string(dir.path().join(BOXES_SIDECAR)).unwrap();
    let f: Vec<&str> = text.split_whitespace().collect();
    assert_eq!(&f[..2], ["7", "0"]);
    let back: Vec<f64> = f[2..].iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(back, vec![1.0 / 3.0, 17.25, 8.000000000000002]);
    assert!(dir.path().join("sample7_part0.ppm").exists());
}
