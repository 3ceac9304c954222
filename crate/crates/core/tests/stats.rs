use advopt::ad::PerExampleGrads;
use advopt::stats::{
    emit_csv, grad_mu, grad_sigma2, pearson, read_csv, running_max, stats_csv, EpochStats, GradMoments, CSV_HEADER,
};
use advopt::tensor::l2_norm;
use proptest::prelude::*;

fn rows_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..10, 1usize..6).prop_flat_map(|(b, d)| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), b))
}

proptest! {
    #[test]
    fn sigma2_is_translation_invariant(rows in rows_strategy(), shift in -50.0f64..50.0) {
        let d = rows[0].len();
        let offset: Vec<f64> = (0..d).map(|j| shift * (j as f64 + 1.0)).collect();
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&offset).map(|(a, b)| a + b).collect()).collect();
        let a = grad_sigma2(&PerExampleGrads::from_rows(&rows)).unwrap();
        let b = grad_sigma2(&PerExampleGrads::from_rows(&moved)).unwrap();
        prop_assert!((a - b).abs() < 1e-10 * a.max(1.0));
    }

    #[test]
    fn mu_dominates_mean_norm(rows in rows_strategy()) {
        let peg = PerExampleGrads::from_rows(&rows);
        prop_assert!(grad_mu(&peg).unwrap() + 1e-12 >= l2_norm(&peg.mean_row()));
    }

    #[test]
    fn pearson_is_affine_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..20),
        a in 0.1f64..10.0,
        b in -10.0f64..10.0,
    ) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let Ok(r) = pearson(&xs, &ys) else { return Ok(()) };
        prop_assert!((-1.0..=1.0).contains(&r));
        let xs2: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        prop_assert!((pearson(&xs2, &ys).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn chunked_moments_agree_with_direct(rows in rows_strategy(), cut in 1usize..9) {
        let cut = cut.min(rows.len() - 1);
        let mut m = GradMoments::new();
        m.push(&PerExampleGrads::from_rows(&rows[..cut])).unwrap();
        m.push(&PerExampleGrads::from_rows(&rows[cut..])).unwrap();
        let all = PerExampleGrads::from_rows(&rows);
        prop_assert!((m.sigma2().unwrap() - grad_sigma2(&all).unwrap()).abs() < 1e-10);
        prop_assert!((m.mu().unwrap() - grad_mu(&all).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn running_max_never_decreases(v in prop::collection::vec(0.0f64..10.0, 0..30)) {
        prop_assert!(running_max(&v).windows(2).all(|w| w[1] >= w[0]));
    }
}

fn row(epoch: usize, x: f64) -> EpochStats {
    EpochStats {
        epoch,
        mu: x,
        sigma2: x * x / 3.0,
        pearson_r: 0.1 + x / 7.0,
        weight_err_pct: f64::NAN,
        nat_acc: 0.987654321,
        rob_acc: 1.0 / 3.0,
        lr: 0.1,
        gamma0: -0.0,
        gamma1: std::f64::consts::PI,
    }
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stats.csv");
    let rows = vec![row(1, 0.1), row(2, 1e-300), row(3, 123456.789)];
    emit_csv(&rows, &path).unwrap();
    let back = read_csv(&path).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in rows.iter().zip(&back) {
        assert_eq!(a.epoch, b.epoch);
        for (x, y) in [(a.mu, b.mu), (a.sigma2, b.sigma2), (a.pearson_r, b.pearson_r), (a.rob_acc, b.rob_acc), (a.gamma1, b.gamma1)] {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(b.weight_err_pct.is_nan());
    }
}

#[test]
fn empty_stream_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    emit_csv(&[], &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{CSV_HEADER}\n"));
    assert!(read_csv(&path).unwrap().is_empty());
    assert_eq!(stats_csv(&[row(1, 1.0), row(2, 2.0)]).lines().count(), 3);
}

#[test]
fn unwritable_path_reports_it() {
    let err = emit_csv(&[], std::path::Path::new("/nonexistent-dir/x.csv")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent-dir/x.csv"));
}
