use std::collections::BTreeMap;

use csp_core::eval::mi::{mi_bound_check, DiscreteJoint};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `I(X; Y)` in bits by direct summation over the joint table of `(x, y)`.
fn mutual_information(j: &DiscreteJoint, x: impl Fn(usize, usize, usize) -> usize, y: impl Fn(usize, usize, usize) -> usize) -> f64 {
    let mut pxy: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let (mut px, mut py): (BTreeMap<usize, f64>, BTreeMap<usize, f64>) = Default::default();
    for c in 0..j.nc {
        for a in 0..j.ns1 {
            for b in 0..j.ns2 {
                let p = j.p[(c * j.ns1 + a) * j.ns2 + b];
                *pxy.entry((x(c, a, b), y(c, a, b))).or_default() += p;
                *px.entry(x(c, a, b)).or_default() += p;
                *py.entry(y(c, a, b)).or_default() += p;
            }
        }
    }
    pxy.iter()
        .filter(|(_, &p)| p > 0.0)
        .map(|((u, v), &p)| p * (p / (px[u] * py[v])).log2())
        .sum()
}

#[test]
fn bound_and_chain_rule_on_random_premise_joints() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..150 {
        let j = DiscreteJoint::random_premise(&mut rng, 8).unwrap();
        let r = mi_bound_check(&j, |_, s1, _| s1).unwrap();
        assert!(r.premise_violation < 1e-12);
        assert!(r.holds, "lhs {} < rhs {}", r.lhs, r.rhs);
        assert!(r.chain.residual.abs() < 1e-12);
        let direct = mutual_information(&j, |c, _, _| c, |_, a, _| a);
        assert!((r.lhs - direct).abs() < 1e-12, "{} vs {direct}", r.lhs);
        // H(X) = I(X; X).
        let i_cz = mutual_information(&j, |c, _, _| c, |_, a, b| a + b);
        let h_s1 = mutual_information(&j, |_, a, _| a, |_, a, _| a);
        let h_z = mutual_information(&j, |_, a, b| a + b, |_, a, b| a + b);
        let rhs = i_cz + h_s1 - h_z;
        assert!((r.rhs - rhs).abs() < 1e-12, "{} vs {rhs}", r.rhs);
        assert!(direct >= rhs - 1e-12);
    }
}

#[test]
fn chain_rule_holds_for_arbitrary_context_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for i in 0..50 {
        let j = DiscreteJoint::random_premise(&mut rng, 6).unwrap();
        let r = mi_bound_check(&j, |c, a, b| (c * 3 + a * 5 + b * i) % 4).unwrap();
        assert!(r.chain.residual.abs() < 1e-12);
    }
}

#[test]
fn violated_premise_is_reported_not_hidden() {
    // s1 and s2 perfectly anti-correlated while c is independent of both.
    let mut p = vec![0.0; 2 * 2 * 2];
    for c in 0..2 {
        p[(c * 2) * 2 + 1] = 0.25;
        p[(c * 2 + 1) * 2] = 0.25;
    }
    let j = DiscreteJoint::new(2, 2, 2, p).unwrap();
    let r = mi_bound_check(&j, |_, s1, _| s1).unwrap();
    assert!(r.premise_violation > 0.1);
    assert!(r.chain.residual.abs() < 1e-12);
}
