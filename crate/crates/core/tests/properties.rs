use cjcrf::cascade::{constrained_prob_update, constrained_shape_update};
use cjcrf::geometry::{AuLabels, AuProbs, FaceBox, FaceShape, Frame, GrayImage, Point2};
use cjcrf::io;
use cjcrf::jointmodel::{
    au_joint_posterior, au_posterior, energy, free_energy, shape_prior, AuShapes, JointPrior,
    RbmParams, Standardization,
};
use cjcrf::metrics::{auc_scores, f1_scores, mann_whitney_auc, normalized_error};
use cjcrf::synth::{generate, SynthConfig};
use cjcrf::{extract_descriptor, fit_linear_stage, DescriptorConfig, FeatureVector, Matrix};
use proptest::prelude::*;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn vec_of(len: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(range, len)
}

fn matrix(rows: usize, cols: usize, values: &[f64]) -> Matrix {
    Matrix::from_row_major(rows, cols, values[..rows * cols].to_vec()).unwrap()
}

fn canonical(v: &[f64]) -> FaceShape {
    FaceShape::from_flat(v, Frame::Canonical).unwrap()
}

fn params(n_shape: usize, n_aus: usize, k: usize, v: &[f64]) -> RbmParams {
    let mut it = v.iter().copied().cycle();
    let mut p = RbmParams::zeros(n_shape, n_aus, k);
    for x in p.shape_weights.as_mut_slice() {
        *x = it.next().unwrap();
    }
    for x in p.au_weights.as_mut_slice() {
        *x = 3.0 * it.next().unwrap();
    }
    for x in p
        .shape_bias
        .iter_mut()
        .chain(&mut p.au_bias)
        .chain(&mut p.hidden_bias)
    {
        *x = it.next().unwrap();
    }
    p
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn shape_update_zeroes_the_objective_gradient(
        d in 1usize..6,
        p in 1usize..5,
        lambda in 0.0f64..20.0,
        v in vec_of(80, -2.0..2.0),
    ) {
        let x = &v[..2 * d];
        let x_bar = &v[10..10 + 2 * d];
        let phi = FeatureVector::from_vec(v[20..20 + p].to_vec());
        let r = matrix(2 * d, p, &v[30..]);
        let next = constrained_shape_update(&canonical(x), &phi, &r, &canonical(x_bar), lambda).unwrap();
        let g = r.mul_vec(phi.as_slice()).unwrap();
        for (i, n) in next.to_flat().iter().enumerate() {
            let delta = n - x[i];
            let grad = (delta - g[i]) + lambda * (n - x_bar[i]);
            prop_assert!(grad.abs() < 1e-9, "gradient {grad}");
        }
    }

    #[test]
    fn larger_lambda_moves_the_shape_toward_the_prior(
        lo in 0.0f64..5.0,
        extra in 0.0f64..5.0,
        v in vec_of(24, -1.0..1.0),
    ) {
        let x = canonical(&v[..8]);
        let x_bar = canonical(&v[8..16]);
        let phi = FeatureVector::from_vec(v[16..20].to_vec());
        let r = matrix(8, 4, &[v.clone(), v.clone()].concat());
        let dist = |lambda: f64| {
            let s = constrained_shape_update(&x, &phi, &r, &x_bar, lambda).unwrap();
            s.to_flat().iter().zip(x_bar.to_flat()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        prop_assert!(dist(lo + extra) <= dist(lo) + 1e-12);
    }

    #[test]
    fn probability_update_is_the_box_constrained_minimizer(
        n in 1usize..8,
        lambda in 0.0f64..10.0,
        v in vec_of(60, -1.5..1.5),
        q in vec_of(8, 0.0..1.0),
        p0 in vec_of(8, 0.0..1.0),
    ) {
        let prev = AuProbs::new(p0[..n].to_vec()).unwrap();
        let prior = AuProbs::new(q[..n].to_vec()).unwrap();
        let phi = FeatureVector::from_vec(v[..3].to_vec());
        let r = matrix(n, 3, &v[3..]);
        let next = constrained_prob_update(&prev, &phi, &r, &prior, lambda).unwrap();
        let d = r.mul_vec(phi.as_slice()).unwrap();
        for i in 0..n {
            let objective = |p: f64| (p - p0[i] - d[i]).powi(2) + lambda * (p - q[i]).powi(2);
            let got = next.as_slice()[i];
            prop_assert!((0.0..=1.0).contains(&got));
            // the objective is a convex parabola, so a fine grid bounds its box minimum
            for k in 0..=200 {
                prop_assert!(objective(got) <= objective(k as f64 / 200.0) + 1e-12);
            }
        }
    }

    #[test]
    fn ridge_solution_satisfies_the_normal_equations(
        m in 2usize..12,
        p in 1usize..10,
        q in 1usize..4,
        ridge in 1e-3f64..10.0,
        v in vec_of(200, -1.0..1.0),
    ) {
        let phi = matrix(m, p, &v);
        let t = matrix(m, q, &v[100..]);
        let w = fit_linear_stage(&phi, &t, ridge).unwrap();
        prop_assert_eq!((w.rows(), w.cols()), (q, p));
        // (T − ΦWᵀ)ᵀΦ = ridge·W at the optimum
        for a in 0..q {
            for b in 0..p {
                let lhs: f64 = (0..m)
                    .map(|r| {
                        let fit: f64 = (0..p).map(|c| w.get(a, c) * phi.get(r, c)).sum();
                        (t.get(r, a) - fit) * phi.get(r, b)
                    })
                    .sum();
                prop_assert!((lhs - ridge * w.get(a, b)).abs() < 1e-8, "{lhs} vs {}", ridge * w.get(a, b));
            }
        }
    }

    #[test]
    fn auc_depends_only_on_score_order(
        scores in vec_of(30, 0.0..1.0),
        labels in prop::collection::vec(any::<bool>(), 30),
    ) {
        let Some(base) = mann_whitney_auc(&scores, &labels) else { return Ok(()); };
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert!((mann_whitney_auc(&warped, &labels).unwrap() - base).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((mann_whitney_auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn weighted_scores_lie_between_per_au_extremes(
        n in 1usize..6,
        probs in vec_of(150, 0.0..1.0),
        bits in prop::collection::vec(any::<u8>(), 25),
    ) {
        let p: Vec<AuProbs> = probs.chunks(6).map(|c| AuProbs::new(c[..n].to_vec()).unwrap()).collect();
        let g: Vec<AuLabels> = bits.iter().map(|&b| AuLabels::from_bits(b as u64, n)).collect();
        let f1 = f1_scores(&p, &g, 0.5).unwrap();
        if let Some(w) = f1.weighted {
            let lo = f1.per_au.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = f1.per_au.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12);
        }
        let auc = auc_scores(&p, &g).unwrap();
        if let Some(w) = auc.weighted {
            let defined: Vec<f64> = auc.per_au.iter().flatten().copied().collect();
            let lo = defined.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = defined.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12);
        }
    }

    #[test]
    fn normalized_error_is_similarity_invariant(
        v in vec_of(24, -50.0..50.0),
        angle in -3.2f64..3.2,
        scale in 0.1f64..10.0,
        tx in -100.0f64..100.0,
        ty in -100.0f64..100.0,
    ) {
        let pred = FaceShape::from_flat(&v[..12], Frame::ImagePixels).unwrap();
        let mut g = v[12..].to_vec();
        g[2] = g[0] + 5.0;
        let gt = FaceShape::from_flat(&g, Frame::ImagePixels).unwrap();
        let (c, s) = (angle.cos(), angle.sin());
        let warp = |shape: &FaceShape| {
            let pts = shape
                .points()
                .iter()
                .map(|p| Point2 { x: scale * (c * p.x - s * p.y) + tx, y: scale * (s * p.x + c * p.y) + ty })
                .collect();
            FaceShape::new(pts, Frame::ImagePixels).unwrap()
        };
        let base = normalized_error(&pred, &gt, (0, 1)).unwrap();
        let moved = normalized_error(&warp(&pred), &warp(&gt), (0, 1)).unwrap();
        prop_assert!((base - moved).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn descriptors_are_unit_or_zero_and_ignore_brightness_offsets(
        pixels in vec_of(48 * 48, 0.3..0.7),
        offset in -0.3f64..0.3,
        cx in 5.0f64..43.0,
        cy in 5.0f64..43.0,
        radius in 2.0f64..15.0,
    ) {
        let cfg = DescriptorConfig::default();
        let image = GrayImage::new(48, 48, pixels.clone()).unwrap();
        let shifted = GrayImage::new(48, 48, pixels.iter().map(|p| p + offset).collect()).unwrap();
        let center = Point2 { x: cx, y: cy };
        let a = extract_descriptor(&image, center, radius, &cfg).unwrap();
        let b = extract_descriptor(&shifted, center, radius, &cfg).unwrap();
        prop_assert_eq!(a.len(), 128);
        prop_assert!(a.iter().all(|&x| x >= 0.0));
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-9, "norm {norm}");
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn free_energy_marginalizes_the_hidden_units(
        v in vec_of(40, -1.0..1.0),
        bits in 0u64..8,
    ) {
        let (d, n, k) = (4, 3, 5);
        let p = params(d, n, k, &v);
        let x = &v[..d];
        let a = AuLabels::from_bits(bits, n);
        let total: f64 = (0..1u64 << k)
            .map(|h| {
                let hidden: Vec<u8> = (0..k).map(|j| (h >> j & 1) as u8).collect();
                (-energy(&a, x, &hidden, &p).unwrap()).exp()
            })
            .sum();
        let f = free_energy(&a, x, &p).unwrap();
        prop_assert!((f + total.ln()).abs() < 1e-9 * f.abs().max(1.0));
    }

    #[test]
    fn joint_posterior_is_normalized_and_matches_the_marginals(
        v in vec_of(60, -1.0..1.0),
        n in 1usize..7,
    ) {
        let p = params(6, n, 4, &v);
        let x = &v[..6];
        let joint = au_joint_posterior(x, &p).unwrap();
        prop_assert_eq!(joint.len(), 1 << n);
        prop_assert!((joint.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Bayes: P(a | x) ∝ exp(−F(a, x))
        let weights: Vec<f64> = (0..1u64 << n)
            .map(|b| -free_energy(&AuLabels::from_bits(b, n), x, &p).unwrap())
            .collect();
        let top = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = weights.iter().map(|w| (w - top).exp()).sum();
        for (j, w) in joint.iter().zip(&weights) {
            prop_assert!((j - (w - top).exp() / z).abs() < 1e-12);
        }
        let marginals = au_posterior(x, &p).unwrap().probs;
        for i in 0..n {
            let m: f64 = joint.iter().enumerate().filter(|(b, _)| b >> i & 1 == 1).map(|(_, q)| q).sum();
            prop_assert!((m - marginals.as_slice()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_prior_ignores_the_probability_scale(
        shapes in vec_of(4 * 6, -1.0..1.0),
        probs in vec_of(4, 0.05..1.0),
        scale in 0.05f64..1.0,
    ) {
        let prior = JointPrior {
            rbm: RbmParams::zeros(6, 4, 2),
            standardization: Standardization::identity(6),
            au_shapes: AuShapes { shapes: shapes.chunks(6).map(canonical).collect(), absent: vec![false; 4] },
            fallback_shape: canonical(&[0.0; 6]),
        };
        let a = shape_prior(&AuProbs::new(probs.clone()).unwrap(), &prior).unwrap();
        let scaled: Vec<f64> = probs.iter().map(|p| p * scale).collect();
        let b = shape_prior(&AuProbs::new(scaled).unwrap(), &prior).unwrap();
        for (x, y) in a.to_flat().iter().zip(b.to_flat()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn text_files_round_trip_exactly(
        coords in vec_of(20, -1e4..1e4),
        probs in vec_of(7, 0.0..1.0),
        bits in 0u64..128,
        b in vec_of(4, 0.5..300.0),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f");
        let shape = FaceShape::from_flat(&coords, Frame::ImagePixels).unwrap();
        io::write_pts(&path, &shape).unwrap();
        prop_assert_eq!(io::read_pts(&path).unwrap(), shape);
        let p = AuProbs::new(probs).unwrap();
        io::write_probs(&path, &p).unwrap();
        prop_assert_eq!(io::read_probs(&path).unwrap(), p);
        let l = AuLabels::from_bits(bits, 7);
        io::write_labels(&path, &l).unwrap();
        prop_assert_eq!(io::read_labels(&path).unwrap(), l);
        let fb = FaceBox::new(b[0], b[1], b[2], b[3]).unwrap();
        io::write_box(&path, &fb).unwrap();
        prop_assert_eq!(io::read_box(&path).unwrap(), fb);
    }
}

proptest! {
    #![proptest_config(config(12))]

    #[test]
    fn synthetic_samples_are_valid(seed in any::<u64>(), n_aus in 1usize..9) {
        let cfg = SynthConfig {
            n_samples: 3,
            n_aus,
            au_pair_coupling: cjcrf::synth::default_coupling(n_aus),
            seed,
            ..SynthConfig::default()
        };
        for s in generate(&cfg).unwrap() {
            s.validate(cfg.d_landmarks, n_aus).unwrap();
            prop_assert!(s.image.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            let b = &s.face_box;
            prop_assert!(b.left >= 0.0 && b.top >= 0.0);
            prop_assert!(b.left + b.width <= cfg.image_size as f64 && b.top + b.height <= cfg.image_size as f64);
        }
    }
}
