use proptest::prelude::*;
use switchdiff::rates::{lambda_grid, log_grid, RateProfile};
use std::sync::Arc;

fn profiles() -> Vec<RateProfile> {
    let mut out = vec![RateProfile::identity(1.0), RateProfile::identity(0.3)];
    for gamma in [0.25, 0.5, 0.75] {
        out.push(RateProfile::power(gamma, 0.5).unwrap());
    }
    out.push(RateProfile::custom("y+y^2", Arc::new(|y: f64| y + y * y), None, 1.0).unwrap());
    out
}

#[test]
fn roundtrip_on_log_grid() {
    for p in profiles() {
        for y in log_grid(1e-6 * p.h(), p.h(), 64) {
            let g = p.big_g(y).unwrap();
            let back = p.big_g_inverse(-g).unwrap();
            assert!((p.big_g(back).unwrap() - g).abs() < 1e-8, "{} at y = {y}", p.name());
        }
    }
}

#[test]
fn closed_forms_match_quadrature() {
    for p in profiles().into_iter().take(5) {
        for y in log_grid(1e-4 * p.h(), p.h(), 64) {
            let (a, b) = (p.big_g(y).unwrap(), p.big_g_quadrature(y).unwrap());
            assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{}: {a} vs {b}", p.name());
        }
    }
    // y + y² has G(y) = ln(y/(1+y)) − ln(h/(1+h)).
    let p = profiles().pop().unwrap();
    for y in log_grid(1e-4, 1.0, 32) {
        let exact = (y / (1.0 + y)).ln() - 0.5f64.ln();
        assert!((p.big_g(y).unwrap() - exact).abs() < 1e-9);
    }
}

#[test]
fn inverse_decays_to_zero() {
    for p in profiles().into_iter().take(5) {
        assert!(p.big_g_inverse(1e6).unwrap() < 1e-3, "{}", p.name());
        assert_eq!(p.big_g_inverse(0.0).unwrap(), p.h());
    }
}

#[test]
fn candidate_grid() {
    let g = lambda_grid();
    assert_eq!(g.len(), 64);
    assert!((g[0] - 1e-4).abs() < 1e-18 && (g[63] - 1e2).abs() < 1e-10);
}

proptest! {
    #[test]
    fn power_profile_is_increasing(gamma in 0.05f64..0.95, a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
        let p = RateProfile::power(gamma, 1.0).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(p.big_g(lo).unwrap() < p.big_g(hi).unwrap());
        prop_assert!(p.big_g(1.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn bisection_agrees_with_closed_form(gamma in 0.1f64..0.9, t in 0.0f64..100.0) {
        let p = RateProfile::power(gamma, 0.5).unwrap();
        let closed = p.big_g_inverse(t).unwrap();
        let bisect = p.big_g_inverse_bisection(t).unwrap();
        prop_assert!((p.big_g(bisect).unwrap() + t).abs() < 1e-8);
        prop_assert!((closed - bisect).abs() <= 1e-8 * closed.max(1e-12) + 1e-14);
    }
}
