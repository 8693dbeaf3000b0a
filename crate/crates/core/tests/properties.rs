//! Property tests for the serialization and invariant surfaces.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use qpfolio::data::{read_returns_csv, write_returns_csv, ReturnKind, ReturnsPanel};
use qpfolio::metrics;
use qpfolio::portfolio::random_dirichlet_portfolios;
use qpfolio::qp::QpProblem;
use qpfolio::sparse::CscMatrix;

fn finite_return() -> impl Strategy<Value = f64> {
    prop_oneof![
        (-0.99f64..5.0),
        Just(0.0),
        (-1e-12f64..1e-12),
        (-0.3f64..0.3),
    ]
}

fn panel_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<bool>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(n, t)| {
        (
            Just(n),
            Just(t),
            prop::collection::vec(finite_return(), n * t),
            prop::collection::vec(any::<bool>(), n * t),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn returns_csv_round_trip_is_bit_exact((n, t, values, mask) in panel_strategy()) {
        let dates: Vec<String> = (0..t)
            .map(|i| format!("{:04}-{:02}-01", 1990 + i / 12, i % 12 + 1))
            .collect();
        let assets: Vec<String> = (0..n).map(|i| format!("A{i}")).collect();
        let matrix = DMatrix::from_fn(t, n, |r, c| values[r * n + c]);
        let mask_matrix = DMatrix::from_fn(t, n, |r, c| mask[r * n + c]);
        let any_masked = mask.iter().any(|&m| !m);
        let panel = ReturnsPanel::new(
            dates,
            assets,
            matrix,
            any_masked.then_some(mask_matrix),
        )
        .unwrap();

        let mut buffer = Vec::new();
        write_returns_csv(&panel, &mut buffer).unwrap();
        let text = String::from_utf8(buffer.clone()).unwrap();
        prop_assert!(!text.contains('\r'), "line endings must be LF");

        let back = read_returns_csv(buffer.as_slice(), ReturnKind::Simple).unwrap();
        prop_assert_eq!(back.dates(), panel.dates());
        prop_assert_eq!(back.assets(), panel.assets());
        for r in 0..t {
            for c in 0..n {
                prop_assert_eq!(back.is_active(r, c), panel.is_active(r, c));
                if panel.is_active(r, c) {
                    prop_assert_eq!(
                        back.values()[(r, c)].to_bits(),
                        panel.values()[(r, c)].to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn qp_json_round_trip_preserves_problem(
        n in 1usize..5,
        m in 0usize..6,
        diag in prop::collection::vec(0.1f64..10.0, 5),
        entries in prop::collection::vec((-2.0f64..2.0, any::<u8>()), 0..24),
        bounds in prop::collection::vec((-5.0f64..5.0, 0.0f64..5.0, 0u8..4), 6),
    ) {
        let p = DMatrix::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 });
        let q = DVector::zeros(n);
        let triplets: Vec<(usize, usize, f64)> = entries
            .iter()
            .enumerate()
            .filter(|(_, &(v, _))| v != 0.0)
            .map(|(k, &(v, pos))| {
                if m == 0 {
                    (0, 0, v)
                } else {
                    ((pos as usize + k) % m, k % n, v)
                }
            })
            .collect();
        let a = if m == 0 {
            CscMatrix::zeros(0, n)
        } else {
            CscMatrix::from_triplets(m, n, &triplets).unwrap()
        };
        let mut l = DVector::zeros(m);
        let mut u = DVector::zeros(m);
        for i in 0..m {
            let (lo, width, kind) = bounds[i];
            match kind {
                0 => {
                    l[i] = lo;
                    u[i] = lo + width;
                }
                1 => {
                    l[i] = f64::NEG_INFINITY;
                    u[i] = lo;
                }
                2 => {
                    l[i] = lo;
                    u[i] = f64::INFINITY;
                }
                _ => {
                    l[i] = f64::NEG_INFINITY;
                    u[i] = f64::INFINITY;
                }
            }
        }
        let problem = QpProblem::new(p, q, a, l, u).unwrap();
        let text = problem.to_json().unwrap();
        let back = QpProblem::from_json(&text).unwrap();
        prop_assert_eq!(back.n(), problem.n());
        prop_assert_eq!(back.m(), problem.m());
        prop_assert!((back.p() - problem.p()).amax() == 0.0);
        for i in 0..m {
            prop_assert_eq!(back.l()[i].to_bits(), problem.l()[i].to_bits());
            prop_assert_eq!(back.u()[i].to_bits(), problem.u()[i].to_bits());
        }
        let a_back = back.a().to_dense();
        let a_orig = problem.a().to_dense();
        prop_assert_eq!(a_back.as_slice(), a_orig.as_slice());
    }

    #[test]
    fn dirichlet_draws_stay_on_the_simplex(
        n in 1usize..40,
        draws in 1usize..50,
        seed in any::<u64>(),
    ) {
        let w = random_dirichlet_portfolios(n, draws, seed).unwrap();
        for d in 0..draws {
            let mut sum = 0.0;
            for j in 0..n {
                prop_assert!(w[(d, j)] >= 0.0);
                sum += w[(d, j)];
            }
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_identities_hold(
        returns in prop::collection::vec(-0.5f64..1.0, 2..120),
    ) {
        let report = metrics::compute_metrics(&returns, None, 12).unwrap();
        let log_sum: f64 = returns.iter().map(|&r| r.ln_1p()).sum();
        let growth = log_sum.exp();
        prop_assert!(
            (report.cumulative_return - (growth - 1.0)).abs() <= 1e-12 * growth.max(1.0)
        );
        prop_assert!(report.max_drawdown <= 0.0);
        prop_assert!((0.0..=1.0).contains(&report.time_in_market));
        prop_assert!(report.cvar_95 <= report.var_95 + 1e-15);
        if let Some(calmar) = report.calmar {
            prop_assert!((calmar - report.cagr / report.max_drawdown.abs()).abs() <= 1e-12);
        }
        // self-benchmark regression is exact whenever it is defined
        let with_bench = metrics::compute_metrics(&returns, Some(&returns), 12).unwrap();
        if let Some(beta) = with_bench.beta {
            prop_assert!((beta - 1.0).abs() <= 1e-9);
            prop_assert!(with_bench.alpha.unwrap().abs() <= 1e-9);
        }
    }
}
