//! The exponential-integrator function phi_1(z) = (e^z - 1) / z.

use super::dense::EigDecomposition;

/// Below this |z| the Taylor expansion replaces the closed form.
pub const PHI1_SERIES_THRESHOLD: f64 = 1e-5;

pub fn phi1(z: f64) -> f64 {
    if z.abs() > PHI1_SERIES_THRESHOLD {
        z.exp_m1() / z
    } else {
        phi1_series(z)
    }
}

/// 1 + z/2 + z^2/6 + z^3/24 + z^4/120 + z^5/720
pub fn phi1_series(z: f64) -> f64 {
    1.0 + z * (1.0 / 2.0 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0 + z / 720.0))))
}

/// `Q phi1(Lambda) Q^T v` for an eigendecomposition `(Lambda, Q)`.
pub fn phi1_apply(decomp: &EigDecomposition, v: &[f64]) -> Vec<f64> {
    let q = &decomp.vectors;
    assert_eq!(v.len(), q.nrows());
    let mut coeffs = q.tr_mul(&nalgebra::DVector::from_column_slice(v));
    for (c, &l) in coeffs.iter_mut().zip(&decomp.eigenvalues) {
        *c *= phi1(l);
    }
    (q * coeffs).as_slice().to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert_eq!(phi1(0.0), 1.0);
        // 30-term series for (e^z - 1)/z = sum z^k / (k+1)!
        let oracle = |z: f64| {
            let mut term = 1.0;
            let mut sum = 0.0;
            for k in 0..30 {
                sum += term;
                term *= z / (k as f64 + 2.0);
            }
            sum
        };
        assert!((phi1(-1.0) - oracle(-1.0)).abs() < 1e-15);
        assert!((phi1(-1.0) - 0.6321205588285577).abs() < 1e-15);
    }

    #[test]
    fn branch_switch_is_continuous() {
        for k in 0..=200 {
            let a = 0.5e-5 + 1.5e-5 * k as f64 / 200.0;
            for z in [a, -a] {
                assert!((z.exp_m1() / z - phi1_series(z)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn bounded_on_negative_axis() {
        for k in 0..100 {
            let z = -(k as f64) * 0.37;
            let p = phi1(z);
            assert!(p > 0.0 && p <= 1.0);
        }
    }


    proptest::proptest! {
        #[test]
        fn phi1_identity(z in -700.0f64..50.0) {
            // z * phi1(z) = e^z - 1
            let lhs = z * phi1(z);
            proptest::prop_assert!((lhs - z.exp_m1()).abs() <= 1e-13 * (1.0 + z.exp_m1().abs()));
        }

        #[test]
        fn phi1_monotone(a in -50.0f64..5.0, d in 1e-6f64..1.0) {
            proptest::prop_assert!(phi1(a) <= phi1(a + d) * (1.0 + 1e-14));
        }
    }
}
