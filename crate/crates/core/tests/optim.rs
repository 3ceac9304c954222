use advopt::ad::{ParamVector, PerExampleGrads, Segment};
use advopt::optim::{
    clip_transform, engm_increment, engm_step, lr_at, mgnc_step, msgd_step, sngm_step, step, GradInput, LrSchedule,
    OptimKind, OptimState, MGNC_ALPHA,
};
use advopt::tensor::{dot, l2_norm};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(v: &[f64]) -> ParamVector {
    ParamVector::new(v.to_vec(), vec![Segment { name: "theta".into(), offset: 0, shape: vec![v.len()] }]).unwrap()
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e3f64..1e3, n)
}

proptest! {
    #[test]
    fn clip_transform_caps_and_preserves_direction(a in vec_strategy(6), alpha in 1e-3f64..1e3) {
        let t = clip_transform(&a, alpha);
        let (na, nt) = (l2_norm(&a), l2_norm(&t));
        prop_assert!(nt <= alpha * (1.0 + 1e-12));
        if na <= alpha {
            prop_assert_eq!(&t, &a);
        } else {
            prop_assert!((dot(&a, &t) - na * nt).abs() <= 1e-9 * na * nt);
        }
    }

    #[test]
    fn engm_increment_norm_is_at_most_alpha(rows in prop::collection::vec(vec_strategy(4), 1..8), alpha in 1e-2f64..10.0) {
        let peg = PerExampleGrads::from_rows(&rows);
        prop_assert!(l2_norm(&engm_increment(&peg, alpha)) <= alpha * (1.0 + 1e-12));
    }

    #[test]
    fn sngm_increment_has_unit_norm(g in vec_strategy(5), scale in 1e-3f64..1e3) {
        prop_assume!(l2_norm(&g) > 1e-9);
        let mut s = OptimState::new(OptimKind::Sngm, 5, 0.0, 1.0, 1.0).unwrap();
        let mut p = params(&[0.0; 5]);
        sngm_step(&mut s, &g, &mut p).unwrap();
        prop_assert!((l2_norm(&s.v) - 1.0).abs() < 1e-12);
        let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
        let mut s2 = OptimState::new(OptimKind::Sngm, 5, 0.0, 1.0, 1.0).unwrap();
        let mut p2 = params(&[0.0; 5]);
        sngm_step(&mut s2, &scaled, &mut p2).unwrap();
        for (a, b) in p.data.iter().zip(&p2.data) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let g = [0.3, -2.0, 5.0];
    let peg = PerExampleGrads::from_rows(&[g.to_vec(), vec![1.0, 1.0, 1.0]]);
    for kind in OptimKind::ALL {
        let mut s = OptimState::new(kind, 3, 0.9, 0.0, 1.0).unwrap();
        let mut p = params(&[1.0, 2.0, 3.0]);
        let input = match kind {
            OptimKind::Sngm => GradInput::Summed(&g),
            OptimKind::Engm | OptimKind::Fengm => GradInput::PerExample(&peg),
            _ => GradInput::Mean(&g),
        };
        step(&mut s, input, &mut p).unwrap();
        assert_eq!(p.data, vec![1.0, 2.0, 3.0], "{kind}");
    }
}

#[test]
fn mgnc_halves_a_gradient_of_twice_the_threshold() {
    assert_eq!(MGNC_ALPHA, 25.0);
    let g = [30.0, 40.0];
    let mut s = OptimState::new(OptimKind::Mgnc, 2, 0.0, 1.0, MGNC_ALPHA).unwrap();
    let mut p = params(&[0.0, 0.0]);
    mgnc_step(&mut s, &g, &mut p).unwrap();
    assert_eq!(p.data, vec![-15.0, -20.0]);

    let small = [6.0, 8.0];
    let mut a = OptimState::new(OptimKind::Mgnc, 2, 0.9, 0.1, MGNC_ALPHA).unwrap();
    let mut b = OptimState::new(OptimKind::Msgd, 2, 0.9, 0.1, MGNC_ALPHA).unwrap();
    let (mut pa, mut pb) = (params(&[1.0, 1.0]), params(&[1.0, 1.0]));
    mgnc_step(&mut a, &small, &mut pa).unwrap();
    msgd_step(&mut b, &small, &mut pb).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn engm_with_huge_alpha_follows_msgd() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut e = OptimState::new(OptimKind::Engm, 7, 0.9, 0.05, 1e9).unwrap();
    let mut m = OptimState::new(OptimKind::Msgd, 7, 0.9, 0.05, 1e9).unwrap();
    let (mut pe, mut pm) = (params(&[0.0; 7]), params(&[0.0; 7]));
    for _ in 0..100 {
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..7).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect();
        let peg = PerExampleGrads::from_rows(&rows);
        engm_step(&mut e, &peg, &mut pe).unwrap();
        msgd_step(&mut m, &peg.mean_row(), &mut pm).unwrap();
    }
    for (a, b) in pe.data.iter().zip(&pm.data) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn step_schedule_milestones() {
    let s = LrSchedule::new(0.1, vec![75, 90], 0.1).unwrap();
    assert_eq!(lr_at(&s, 74), 0.1);
    assert!((lr_at(&s, 75) - 0.01).abs() < 1e-15);
    assert!((lr_at(&s, 90) - 0.001).abs() < 1e-15);
    assert!(LrSchedule::new(0.1, vec![90, 75], 0.1).is_err());
    assert!(LrSchedule::new(0.1, vec![], 1.5).is_err());
}

/// Small-sample version of the variance bound; the full Monte Carlo run is
/// in the acceptance suite.
#[test]
fn clipped_samples_have_bounded_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let alpha = 2.0;
    let samples: Vec<Vec<f64>> = (0..20_000)
        .map(|_| {
            let scale = rng.gen_range(0.0f64..1.0).powf(-1.0 / 1.5);
            (0..10).map(|_| scale * rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()
        })
        .map(|a| clip_transform(&a, alpha))
        .collect();
    let peg = PerExampleGrads::from_rows(&samples);
    let mean = peg.mean_row();
    let var = peg.iter_rows().map(|r| r.iter().zip(&mean).map(|(a, m)| (a - m).powi(2)).sum::<f64>()).sum::<f64>()
        / samples.len() as f64;
    assert!(var <= 4.0 * alpha * alpha);
}
