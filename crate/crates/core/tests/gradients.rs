mod common;

use common::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(term: Term) {
    for seed in 0..3 {
        let m = toy_model(seed);
        let b = toy_batch(seed + 100);
        let g = analytic(&m, &b, term);
        let n = numeric(&m, &b, term, H);
        let r = compare(&g, &n, 1e-7);
        assert!(r.max_rel < TOL, "{term:?} seed {seed}: {} at {}", r.max_rel, r.worst);
    }
}

#[test]
fn pixel_loss_gradient() {
    check(Term::Sr);
}

#[test]
fn synthetic_identity_gradient() {
    check(Term::FrSyn);
}

#[test]
fn native_identity_gradient() {
    check(Term::FrNat);
}

#[test]
fn full_objective_gradient() {
    check(Term::Csrl);
}

#[test]
fn native_identity_loss_reaches_the_sr_parameters() {
    let m = toy_model(0);
    let b = toy_batch(1);
    let g = analytic(&m, &b, Term::FrNat);
    assert!(block_max(&g, "sr") > 1e-6);
    assert_eq!(block_max(&g, "head.synthetic"), 0.0);
    // the finite-difference view agrees that SR matters to the native term
    let n = numeric(&m, &b, Term::FrNat, H);
    let sr_entries = flat(&g).iter().take_while(|(name, _)| name.starts_with("sr.")).count();
    assert!(n[..sr_entries].iter().any(|v| v.abs() > 1e-6));
}
