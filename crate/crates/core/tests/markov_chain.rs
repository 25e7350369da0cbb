use nalgebra::DMatrix;
use proptest::prelude::*;
use switchdiff::families::{BirthDeathKernel, Example52Kernel, Sequence, TwoStateKernel};
use switchdiff::markov_chain::{
    balance_residual, birth_death_invariant, drift_correction, ergodicity_diagnostic, ergodicity_time_grid,
    invariant_measure, solve_poisson, transition_matrix, truncate, ErgodicityVerdict,
};
use switchdiff::oracles::{birth_death_balance, poisson_by_integration};
use switchdiff::model::{FnKernel, Transition};
use switchdiff::{Regime, TruncatedChain, TruncationMode};

fn random_generator() -> impl Strategy<Value = DMatrix<f64>> {
    (2usize..7).prop_flat_map(|n| {
        proptest::collection::vec(0.05f64..3.0, n * n).prop_map(move |rates| {
            let mut q = DMatrix::from_row_slice(n, n, &rates);
            for i in 0..n {
                q[(i, i)] = 0.0;
                let out: f64 = q.row(i).sum();
                q[(i, i)] = -out;
            }
            q
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transition_rows_sum_to_one(q in random_generator(), t in 0.0f64..20.0) {
        let chain = TruncatedChain::from_generator(q).unwrap();
        let p = transition_matrix(&chain, t).unwrap();
        for row in p.row_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-10);
            prop_assert!(row.iter().all(|v| *v > -1e-12));
        }
    }

    #[test]
    fn semigroup_property(q in random_generator(), s in 0.0f64..5.0, t in 0.0f64..5.0) {
        let chain = TruncatedChain::from_generator(q).unwrap();
        let lhs = transition_matrix(&chain, s + t).unwrap();
        let rhs = transition_matrix(&chain, s).unwrap() * transition_matrix(&chain, t).unwrap();
        prop_assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn invariant_measure_balances(q in random_generator()) {
        let chain = TruncatedChain::from_generator(q).unwrap();
        let nu = invariant_measure(&chain).unwrap();
        prop_assert!((nu.nu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(nu.nu.iter().all(|v| *v > 0.0));
        prop_assert!(balance_residual(&chain, &nu.nu) < 1e-12);
        let far = transition_matrix(&chain, 200.0).unwrap();
        for j in 0..chain.size() {
            prop_assert!((far[(0, j)] - nu.nu[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn poisson_solution_is_centred(q in random_generator(), seed in proptest::collection::vec(-1.0f64..1.0, 7)) {
        let chain = TruncatedChain::from_generator(q).unwrap();
        let nu = invariant_measure(&chain).unwrap();
        let b: Vec<f64> = seed[..chain.size()].to_vec();
        let sol = solve_poisson(&chain, &nu, &b, true).unwrap();
        prop_assert!(sol.residual < 1e-8);
        let centre: f64 = sol.gamma.iter().zip(&nu.nu).map(|(g, v)| g * v).sum();
        prop_assert!(centre.abs() < 1e-10);
    }
}

#[test]
fn example52_measure_is_geometric() {
    let chain = truncate(&Example52Kernel::default(), 2, 30, TruncationMode::Lump).unwrap();
    let nu = invariant_measure(&chain).unwrap();
    for i in 1..=20 {
        let exact = 0.5f64.powi(i as i32);
        assert!((nu.at(Regime::new(i).unwrap()) - exact).abs() < 1e-8, "i = {i}");
    }
}

#[test]
fn measure_is_cauchy_in_truncation() {
    // Returns to 1 at a regime-dependent rate, so lumping the tail is not exact.
    let kernel = FnKernel::new(
        |_: &[f64], i: Regime, out: &mut Vec<Transition>| {
            if i.get() > 1 {
                out.push(Transition { to: Regime::FIRST, rate: 1.0 + 1.0 / i.get() as f64 });
            }
            out.push(Transition { to: i.next(), rate: 1.0 });
        },
        Some(3.0),
    );
    let head = |n: usize| invariant_measure(&truncate(&kernel, 1, n, TruncationMode::Lump).unwrap()).unwrap().nu[..8].to_vec();
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let (a, b, c) = (head(10), head(20), head(40));
    assert!(gap(&a, &b) > 0.0);
    assert!(gap(&b, &c) < gap(&a, &b));
    assert!(gap(&b, &c) < 1e-5);
}

#[test]
fn birth_death_formula_matches_balance_and_solver() {
    let kernel = BirthDeathKernel {
        check_p: Sequence::constant(1.0),
        hat_p: Sequence::constant(2.0),
        modulation: 0.5,
    };
    let formula = birth_death_invariant(&|i| kernel.check_p.at(i), &|i| kernel.hat_p.at(i), 60).unwrap();
    let balance = birth_death_balance(|_| 1.0, |_| 2.0, 60);
    let solved = invariant_measure(&truncate(&kernel, 1, 60, TruncationMode::Lump).unwrap()).unwrap();
    for k in 0..30 {
        assert!((formula.measure.nu[k] - balance[k]).abs() < 1e-12);
        assert!((formula.measure.nu[k] - solved.nu[k]).abs() < 1e-10);
    }
}

#[test]
fn poisson_direct_matches_integral_formula() {
    let chain = truncate(&TwoStateKernel::new(1.0, 1.0), 1, 2, TruncationMode::Lump).unwrap();
    let nu = invariant_measure(&chain).unwrap();
    let b = [1.0, -1.0];
    let direct = solve_poisson(&chain, &nu, &b, false).unwrap();
    let integral = poisson_by_integration(&chain, &nu, &b, 40.0, 4000).unwrap();
    for (d, i) in direct.gamma.iter().zip(&integral) {
        assert!((d - i).abs() < 1e-6, "{d} vs {i}");
    }
    assert!(direct.residual < 1e-8);

    let asym = truncate(&TwoStateKernel::new(0.7, 2.3), 1, 2, TruncationMode::Lump).unwrap();
    let nu = invariant_measure(&asym).unwrap();
    let b = [0.7, -2.3];
    let direct = solve_poisson(&asym, &nu, &b, false).unwrap();
    let integral = poisson_by_integration(&asym, &nu, &b, 30.0, 3000).unwrap();
    for (d, i) in direct.gamma.iter().zip(&integral) {
        assert!((d - i).abs() < 1e-6, "{d} vs {i}");
    }
}

#[test]
fn drift_correction_on_example52() {
    let chain = truncate(&Example52Kernel::default(), 2, 30, TruncationMode::Lump).unwrap();
    let nu = invariant_measure(&chain).unwrap();
    let c: Vec<f64> = (0..30).map(|k| if k == 0 { -5.0 } else { 1.5 }).collect();
    let (lambda, sol) = drift_correction(&chain, &nu, &c).unwrap();
    let mean: f64 = c.iter().zip(&nu.nu).map(|(c, v)| c * v).sum();
    assert!((lambda + mean).abs() < 1e-12);
    assert!(sol.residual < 1e-8);
}

#[test]
fn ergodicity_fits() {
    let chain = truncate(&TwoStateKernel::new(1.0, 1.0), 1, 2, TruncationMode::Lump).unwrap();
    let nu = invariant_measure(&chain).unwrap();
    let d = ergodicity_diagnostic(&chain, &nu, &ergodicity_time_grid(&chain, &nu).unwrap()).unwrap();
    assert!((d.fit.unwrap().lambda - 2.0).abs() < 0.1);

    let chain = truncate(&Example52Kernel::default(), 2, 30, TruncationMode::Lump).unwrap();
    let nu = invariant_measure(&chain).unwrap();
    let d = ergodicity_diagnostic(&chain, &nu, &ergodicity_time_grid(&chain, &nu).unwrap()).unwrap();
    let fit = d.fit.unwrap();
    assert!(fit.lambda > 0.0 && fit.r_squared > 0.99, "{fit:?}");
    assert_eq!(d.verdict, ErgodicityVerdict::StronglyExponentiallyErgodic);
}

#[test]
fn drop_mode_reports_leak() {
    let lump = truncate(&Example52Kernel::default(), 2, 10, TruncationMode::Lump).unwrap();
    let drop = truncate(&Example52Kernel::default(), 2, 10, TruncationMode::Drop).unwrap();
    assert_eq!(lump.truncation_leak, 0.0);
    assert!(drop.truncation_leak > 0.0);
}
