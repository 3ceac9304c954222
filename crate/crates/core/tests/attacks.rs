use advopt::ad::{forward, input_grads, Graph, GraphBuilder, LossHead, ParamVector};
use advopt::attacks::{
    deepfool, loss_landscape, orthogonal_direction, pgd, pgd_batch, pgd_eval_attack, project_l2, rho_metric, AttackConfig,
    AttackError, Norm, DEFAULT_MAX_ITER, DEFAULT_OVERSHOOT,
};
use advopt::data::Dataset;
use advopt::models::{build_model, LossKind, ModelSpec};
use advopt::tensor::dot;
use advopt::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear_classifier(d: usize, classes: usize) -> Graph {
    let mut b = GraphBuilder::new(vec![d]);
    let z = b.affine(0, classes, true).unwrap();
    let l = b.head(z, LossHead::CrossEntropy).unwrap();
    b.finish(z, l).unwrap()
}

fn small_mlp(seed: u64) -> (Graph, ParamVector) {
    build_model(&ModelSpec::mlp(&[6, 5, 3], seed)).unwrap()
}

fn batch_in_unit_box(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
    Tensor::new(vec![b, d], (0..b * d).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn zero_budget_is_identity() {
    let (g, p) = small_mlp(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = batch_in_unit_box(&mut rng, 4, 6);
    for norm in [Norm::Linf, Norm::L2] {
        let cfg = AttackConfig { norm, epsilon: 0.0, ..AttackConfig::training() };
        let out = pgd_batch(&g, &p, &x, &[0, 1, 2, 0], &cfg, &mut rng).unwrap();
        assert_eq!(out.adversarial, x);
    }
}

#[test]
fn single_linf_step_on_linear_model_matches_closed_form() {
    let g = linear_classifier(1, 2);
    let p = ParamVector::new(vec![1.5, -0.5, 0.1, 0.0], g.layout().to_vec()).unwrap();
    let cfg = AttackConfig {
        norm: Norm::Linf,
        epsilon: 0.1,
        steps: 1,
        step_size: 0.1,
        loss: LossKind::CrossEntropy,
        random_start: false,
    };
    for (x0, y) in [(0.5, 0usize), (0.5, 1), (0.95, 1), (0.02, 0)] {
        let x = Tensor::new(vec![1, 1], vec![x0]).unwrap();
        let grad = input_grads(&g, &p, &x, &[y]).unwrap().data()[0];
        let want = (x0 + 0.1 * grad.signum()).clamp(0.0, 1.0);
        let got = pgd(&g, &p, &x.example(0), y, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((got.data()[0] - want).abs() < 1e-15, "x0={x0} y={y}: {} vs {want}", got.data()[0]);
    }
}

#[test]
fn evaluation_attack_cannot_move_a_constant_model() {
    let (g, mut p) = small_mlp(2);
    p.data.iter_mut().for_each(|v| *v = 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = batch_in_unit_box(&mut rng, 5, 6);
    let adv = pgd_eval_attack(&g, &p, &x, &[0, 1, 2, 1, 0]).unwrap();
    assert_eq!(adv, x);
}

#[test]
fn l2_projection_of_feasible_points_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let c: Vec<f64> = (0..8).map(|_| rng.gen_range(0.2..0.8)).collect();
        let mut p: Vec<f64> = c.iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect();
        let before = p.clone();
        project_l2(&c, &mut p, 0.5);
        assert!(p.iter().zip(&before).all(|(a, b)| (a - b).abs() <= 1e-12));
    }
}

fn lp_dist(a: &[f64], b: &[f64], norm: Norm) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| x - y);
    match norm {
        Norm::Linf => d.fold(0.0, |m, v| m.max(v.abs())),
        Norm::L2 => d.map(|v| v * v).sum::<f64>().sqrt(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pgd_stays_in_ball_and_never_loses_to_clean(
        seed in 0u64..10_000,
        l2 in any::<bool>(),
        eps in 0.0f64..0.5,
        steps in 1usize..6,
        step_frac in 0.05f64..2.0,
        random_start in any::<bool>(),
        margin in any::<bool>(),
    ) {
        let (g, p) = small_mlp(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = batch_in_unit_box(&mut rng, 3, 6);
        let labels = [0, 1, 2];
        let norm = if l2 { Norm::L2 } else { Norm::Linf };
        let loss = if margin { LossKind::Margin } else { LossKind::CrossEntropy };
        let cfg = AttackConfig { norm, epsilon: eps, steps, step_size: (eps * step_frac).max(1e-3), loss, random_start };
        let out = pgd_batch(&g, &p, &x, &labels, &cfg, &mut rng).unwrap();
        for i in 0..3 {
            let row = out.adversarial.row(i);
            prop_assert!(lp_dist(row, x.row(i), norm) <= eps + 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(out.loss[i] >= out.clean_loss[i]);
        }
        let (recomputed, _) = forward(&g.with_head(loss.head()), &p, &out.adversarial, &labels).unwrap();
        for (r, l) in recomputed.iter().zip(&out.loss) {
            prop_assert!((r - l).abs() <= 1e-12 * l.abs().max(1.0));
        }
    }
}

/// `f(x) = (w1 - w0) . x + (b1 - b0)`; DeepFool needs `|f| / ||w1 - w0||` to flip it.
#[test]
fn deepfool_matches_affine_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = linear_classifier(5, 2);
    for _ in 0..50 {
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = ParamVector::new(data, g.layout().to_vec()).unwrap();
        let x = Tensor::new(vec![5], (0..5).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let w: Vec<f64> = (0..5).map(|j| p.data[5 + j] - p.data[j]).collect();
        let f = dot(&w, x.data()) + p.data[11] - p.data[10];
        let want = (1.0 + DEFAULT_OVERSHOOT) * f.abs() / dot(&w, &w).sqrt();
        let r = deepfool(&g, &p, &x, None, DEFAULT_MAX_ITER, DEFAULT_OVERSHOOT).unwrap();
        assert!(r.converged);
        assert!((r.distance - want).abs() <= 0.05 * want + 1e-7, "{} vs {want}", r.distance);
    }
}

#[test]
fn deepfool_on_misclassified_input_returns_zero() {
    let g = linear_classifier(2, 2);
    let p = ParamVector::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], g.layout().to_vec()).unwrap();
    let x = Tensor::new(vec![2], vec![0.9, 0.1]).unwrap();
    let r = deepfool(&g, &p, &x, Some(1), DEFAULT_MAX_ITER, DEFAULT_OVERSHOOT).unwrap();
    assert_eq!((r.distance, r.iterations, r.converged), (0.0, 0, true));
}

#[test]
fn deepfool_on_the_boundary_moves_almost_nowhere() {
    let g = linear_classifier(2, 2);
    let p = ParamVector::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], g.layout().to_vec()).unwrap();
    let x = Tensor::new(vec![2], vec![0.4, 0.4]).unwrap();
    let r = deepfool(&g, &p, &x, None, DEFAULT_MAX_ITER, DEFAULT_OVERSHOOT).unwrap();
    assert!(r.converged);
    assert!(r.distance < 1e-6, "{}", r.distance);
}

#[test]
fn rho_of_duplicated_dataset_is_unchanged() {
    let g = linear_classifier(3, 2);
    let p = ParamVector::new(vec![0.3, -1.0, 0.2, -0.4, 0.8, 0.5, 0.1, -0.2], g.layout().to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = batch_in_unit_box(&mut rng, 6, 3);
    let (_, logits) = forward(&g, &p, &x, &[0; 6]).unwrap();
    let labels: Vec<usize> = (0..6).map(|i| advopt::models::argmax(logits.row(i))).collect();
    let ds = Dataset::new(x, labels, 2).unwrap();
    let twice = ds.subset(&[0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5]);
    let a = rho_metric(&g, &p, &ds, DEFAULT_MAX_ITER, DEFAULT_OVERSHOOT).unwrap();
    let b = rho_metric(&g, &p, &twice, DEFAULT_MAX_ITER, DEFAULT_OVERSHOOT).unwrap();
    assert!((a.rho - b.rho).abs() < 1e-12);
    assert_eq!(b.total, 12);
}

#[test]
fn rho_of_empty_dataset_is_an_error() {
    let g = linear_classifier(2, 2);
    let p = ParamVector::zeros(g.layout().to_vec());
    let ds = Dataset::empty(vec![2], 2);
    assert_eq!(rho_metric(&g, &p, &ds, 5, 0.02).unwrap_err(), AttackError::EmptyDataset);
}

#[test]
fn landscape_center_and_directions() {
    let (g, p) = small_mlp(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = batch_in_unit_box(&mut rng, 1, 6);
    let dir = Tensor::new(vec![6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let land = loss_landscape(&g, &p, &x.example(0), 2, &dir, 5, 0.3, 7).unwrap();
    let (clean, _) = forward(&g, &p, &x, &[2]).unwrap();
    assert_eq!(land.a_offsets[2], 0.0);
    assert_eq!(land.values[2][2], clean[0]);
    assert!(dot(&land.u, &land.r).abs() < 1e-10);
    assert!((dot(&land.r, &land.r).sqrt() - 1.0).abs() < 1e-12);
    let csv = land.to_csv();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("a\\b,"));
}

#[test]
fn landscape_of_linear_loss_is_a_plane() {
    let mut b = GraphBuilder::new(vec![4]);
    let z = b.affine(0, 1, true).unwrap();
    let l = b.sum(z).unwrap();
    let g = b.finish(z, l).unwrap();
    let p = ParamVector::new(vec![0.7, -1.2, 0.4, 2.0, 0.3], g.layout().to_vec()).unwrap();
    let x = Tensor::new(vec![4], vec![0.1, 0.5, 0.9, 0.3]).unwrap();
    let dir = Tensor::new(vec![4], vec![1.0, 1.0, -1.0, 0.5]).unwrap();
    let land = loss_landscape(&g, &p, &x, 0, &dir, 7, 0.5, 1).unwrap();
    for i in 1..6 {
        for j in 0..7 {
            let da = land.values[i + 1][j] - 2.0 * land.values[i][j] + land.values[i - 1][j];
            let db = land.values[j][i + 1] - 2.0 * land.values[j][i] + land.values[j][i - 1];
            assert!(da.abs() < 1e-8 && db.abs() < 1e-8);
        }
    }
}

#[test]
fn landscape_rejects_zero_direction() {
    let (g, p) = small_mlp(5);
    let x = Tensor::new(vec![6], vec![0.5; 6]).unwrap();
    let zero = Tensor::zeros(vec![6]);
    assert_eq!(loss_landscape(&g, &p, &x, 0, &zero, 3, 0.1, 0).unwrap_err(), AttackError::ZeroDirection);
}

#[test]
fn orthogonal_direction_is_seeded() {
    let u = vec![0.6, 0.8, 0.0];
    assert_eq!(orthogonal_direction(&u, 3).unwrap(), orthogonal_direction(&u, 3).unwrap());
    assert_ne!(orthogonal_direction(&u, 3).unwrap(), orthogonal_direction(&u, 4).unwrap());
}
