//! Long-hand mutual-information oracle, kept in its own file and written
//! with explicit double loops so it shares nothing with the library path.
#![allow(clippy::needless_range_loop)]

use uib_core::bounds::{exact_mi_discrete, DiscreteJoint};
use uib_core::numerics::{Matrix, Prng};

#[test]
fn exact_mi_matches_longhand_double_loop_on_seeded_4x4() {
    let mut rng = Prng::new(20_24);
    for _ in 0..10 {
        let joint = DiscreteJoint::seeded(4, 4, &mut rng);
        // Long-hand: explicit marginals, explicit double loop over cells.
        let mut px = [0.0f64; 4];
        let mut py = [0.0f64; 4];
        for x in 0..4 {
            for y in 0..4 {
                px[x] += joint.p(x, y);
                py[y] += joint.p(x, y);
            }
        }
        let mut mi = 0.0;
        for x in 0..4 {
            for y in 0..4 {
                let pxy = joint.p(x, y);
                if pxy > 0.0 {
                    mi += pxy * (pxy / (px[x] * py[y])).ln();
                }
            }
        }
        let fast = exact_mi_discrete(&joint);
        assert!((fast - mi.max(0.0)).abs() < 1e-12, "{fast} vs {mi}");
    }
}

#[test]
fn exact_mi_of_deterministic_relation_is_marginal_entropy() {
    // X uniform over 4, Y = X: MI = H(X) = ln 4.
    let mut values = vec![0.0; 16];
    for i in 0..4 {
        values[i * 4 + i] = 0.25;
    }
    let joint = DiscreteJoint::new(Matrix::new(4, 4, values).unwrap()).unwrap();
    assert!((exact_mi_discrete(&joint) - 4.0f64.ln()).abs() < 1e-14);
}
