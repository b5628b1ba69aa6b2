use rand::Rng as _;
use zsl_core::metrics::*;
use zsl_core::synth::{random_box, random_box_with};
use zsl_tensor::seeded_rng;

#[test]
fn harmonic_mean_fixtures() {
    assert!((harmonic_mean(36.7, 71.3) - 48.5).abs() <= 0.05);
    assert_eq!(harmonic_mean(0.0, 90.0), 0.0);
    assert_eq!(harmonic_mean(40.0, 40.0), 40.0);
    let g = GzslScores::new(36.7, 71.3);
    assert_eq!(g.h, harmonic_mean(36.7, 71.3));
}

#[test]
fn harmonic_mean_is_bounded_by_the_smaller_and_twice_it() {
    let mut rng = seeded_rng(1);
    for _ in 0..1000 {
        let (a, b): (f64, f64) = (rng.gen_range(0.01..100.0), rng.gen_range(0.01..100.0));
        let h = harmonic_mean(a, b);
        assert!(h >= a.min(b) - 1e-12 && h <= 2.0 * a.min(b) + 1e-12);
        assert!((h - harmonic_mean(b, a)).abs() < 1e-12);
    }
}

#[test]
fn mean_class_accuracy_is_class_balanced() {
    // class 0: 9/10 correct, class 1: 0/1 correct
    let mut labels = vec![0; 10];
    labels.push(1);
    let mut preds = vec![0; 9];
    preds.extend([1, 0]);
    assert!((mean_class_accuracy(&preds, &labels).unwrap() - 45.0).abs() < 1e-12);
    assert!(mean_class_accuracy_over(&preds, &labels, &[0, 1, 2]).is_err());
    assert!(mean_class_accuracy(&[0], &[0, 1]).is_err());
}

#[test]
fn mean_class_accuracy_of_random_guessing_is_chance() {
    let mut rng = seeded_rng(2);
    let c = 5;
    let labels: Vec<usize> = (0..50_000).map(|i| i % c).collect();
    let preds: Vec<usize> = labels.iter().map(|_| rng.gen_range(0..c)).collect();
    let mca = mean_class_accuracy(&preds, &labels).unwrap();
    // binomial standard error of the mean over 50k draws is about 0.18 points
    assert!((mca - 100.0 / c as f64).abs() < 1.0, "{mca}");
}

#[test]
fn iou_fixtures() {
    let a = SquareBox::new(5.0, 5.0, 4.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &SquareBox::new(20.0, 5.0, 4.0)), 0.0);
    // shifted by half a side: intersection 8, union 24
    let b = SquareBox::new(7.0, 5.0, 4.0);
    assert!((iou(&a, &b) - 8.0 / 24.0).abs() < 1e-15);
    // nested: 4/16
    let c = SquareBox::new(5.0, 5.0, 2.0);
    assert!((iou(&a, &c) - 0.25).abs() < 1e-15);
}

#[test]
fn random_box_is_inside_and_uniform() {
    let size = 32;
    let side = 8.0;
    let mut rng = seeded_rng(3);
    let bins = 6;
    let mut counts = vec![0usize; bins * bins];
    let n = 12_000;
    for _ in 0..n {
        let b = random_box_with(size, side, &mut rng);
        assert!(b.cx - side / 2.0 >= 0.0 && b.cx + side / 2.0 <= size as f64);
        assert!(b.cy - side / 2.0 >= 0.0 && b.cy + side / 2.0 <= size as f64);
        let span = size as f64 - side;
        let bx = (((b.cx - side / 2.0) / span) * bins as f64) as usize;
        let by = (((b.cy - side / 2.0) / span) * bins as f64) as usize;
        counts[by.min(bins - 1) * bins + bx.min(bins - 1)] += 1;
    }
    let expected = n as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 35 degrees of freedom, 0.999 quantile is about 66.6
    assert!(chi2 < 66.6, "{chi2}");
    assert_eq!(random_box(size, side, 9), random_box(size, side, 9));
}

#[test]
fn random_box_precision_matches_integrated_probability() {
    let (size, side, threshold) = (32usize, 8.0, 0.5);
    let gt = SquareBox::new(12.0, 20.0, 8.0);
    // midpoint rule over the uniform corner distribution
    let span = size as f64 - side;
    let grid = 400;
    let mut hit = 0usize;
    for i in 0..grid {
        for j in 0..grid {
            let x = (i as f64 + 0.5) / grid as f64 * span;
            let y = (j as f64 + 0.5) / grid as f64 * span;
            let b = SquareBox::new(x + side / 2.0, y + side / 2.0, side);
            hit += usize::from(iou(&b, &gt) > threshold);
        }
    }
    let exact = 100.0 * hit as f64 / (grid * grid) as f64;

    let mut rng = seeded_rng(4);
    let n = 40_000;
    let preds: Vec<Vec<Option<SquareBox>>> = (0..n).map(|_| vec![Some(random_box_with(size, side, &mut rng))]).collect();
    let truth = vec![vec![gt]; n];
    let r = detection_precision(&preds, &truth, threshold, PartAssignment::Majority).unwrap();
    let p = exact / 100.0;
    let se = 100.0 * (p * (1.0 - p) / n as f64).sqrt();
    assert!((r.average - exact).abs() < 4.0 * se + 0.2, "{} vs {exact}", r.average);
}

#[test]
fn detection_assignment_modes() {
    let g0 = SquareBox::new(4.0, 4.0, 4.0);
    let g1 = SquareBox::new(20.0, 20.0, 4.0);
    let truth = vec![vec![g0, g1]; 4];
    // both predicted parts sit on ground-truth part 0
    let preds = vec![vec![Some(g0), Some(g0)]; 4];
    let m = detection_precision(&preds, &truth, 0.5, PartAssignment::Majority).unwrap();
    assert_eq!(m.assignment, vec![0, 0]);
    assert_eq!(m.average, 100.0);
    let o = detection_precision(&preds, &truth, 0.5, PartAssignment::OneToOne).unwrap();
    assert_eq!(o.average, 50.0);

    let mut missing = preds.clone();
    missing[0][1] = None;
    let r = detection_precision(&missing, &truth, 0.5, PartAssignment::Majority).unwrap();
    assert_eq!(r.per_part, vec![100.0, 75.0]);
    assert!(detection_precision(&[], &[], 0.5, PartAssignment::Majority).is_err());
}

#[test]
fn report_serializes_and_tabulates() {
    let r = EvalReport {
        beta: Some(0.5),
        mca_unseen: Some(61.25),
        gzsl: Some(GzslScores::new(36.7, 71.3)),
        ..Default::default()
    };
    let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back, r);
    let t = r.table();
    assert!(t.contains("61.25") && t.contains("48.46"));
}
