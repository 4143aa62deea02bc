//! Kappa-weighted L2 and H1 seminorm errors.

use serde::{Deserialize, Serialize};

use crate::assembly::{dot3, TetGeometry};
use crate::error::{Error, Result};
use crate::grid::{CoefficientField, FineGrid};

/// `(sqrt(int kappa p^2), sqrt(int kappa |grad p|^2))` for a full-length
/// nodal vector, integrated exactly element by element.
pub fn weighted_norms(grid: &FineGrid, field: &CoefficientField, p: &[f64]) -> Result<(f64, f64)> {
    weighted_norms_with(grid, &grid.element_kappa(field), p)
}

/// [`weighted_norms`] with precomputed element coefficients.
pub fn weighted_norms_with(grid: &FineGrid, kappa: &[f64], p: &[f64]) -> Result<(f64, f64)> {
    if p.len() != grid.node_count() {
        return Err(Error::DimensionMismatch {
            expected: grid.node_count(),
            found: p.len(),
        });
    }
    let (mut l2, mut h1) = (0.0, 0.0);
    for (e, t) in grid.tets.iter().enumerate() {
        let geo = TetGeometry::new(&grid.tet_vertices(e)).ok_or(Error::DegenerateElement {
            element: e,
            volume: grid.tet_volume(e),
        })?;
        let v = [p[t[0]], p[t[1]], p[t[2]], p[t[3]]];
        // int (sum v_i l_i)^2 = V/20 (sum v_i^2 + (sum v_i)^2)
        let s: f64 = v.iter().sum();
        let sq: f64 = v.iter().map(|x| x * x).sum();
        l2 += kappa[e] * geo.volume / 20.0 * (sq + s * s);
        let mut g = [0.0; 3];
        for (i, vi) in v.iter().enumerate() {
            for d in 0..3 {
                g[d] += vi * geo.grads[i][d];
            }
        }
        h1 += kappa[e] * geo.volume * dot3(g, g);
    }
    Ok((l2.sqrt(), h1.sqrt()))
}

/// Relative errors in percent at one time, with run identification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub l2_pct: f64,
    pub h1_pct: f64,
}

/// `||p1 - p2|| / ||p1|| * 100` in both weighted norms.
pub fn relative_errors(grid: &FineGrid, field: &CoefficientField, reference: &[f64], candidate: &[f64]) -> Result<ErrorReport> {
    let kappa = grid.element_kappa(field);
    if reference.len() != candidate.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            found: candidate.len(),
        });
    }
    let (r_l2, r_h1) = weighted_norms_with(grid, &kappa, reference)?;
    if r_l2 == 0.0 {
        return Err(Error::ZeroReferenceNorm("L2"));
    }
    if r_h1 == 0.0 {
        return Err(Error::ZeroReferenceNorm("H1"));
    }
    let diff: Vec<f64> = reference.iter().zip(candidate).map(|(a, b)| a - b).collect();
    let (d_l2, d_h1) = weighted_norms_with(grid, &kappa, &diff)?;
    Ok(ErrorReport {
        l2_pct: d_l2 / r_l2 * 100.0,
        h1_pct: d_h1 / r_h1 * 100.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{ChannelPreset, Velocity};
    use proptest::prelude::*;

    fn unit() -> CoefficientField {
        CoefficientField::homogeneous(1.0, Velocity::Zero)
    }

    fn bubble(grid: &FineGrid) -> Vec<f64> {
        grid.nodes.iter().map(|x| x.iter().map(|c| c * (1.0 - c)).product()).collect()
    }

    #[test]
    fn exact_cases() {
        let grid = FineGrid::new(5).unwrap();
        let n = grid.node_count();
        assert_eq!(weighted_norms(&grid, &unit(), &vec![0.0; n]).unwrap(), (0.0, 0.0));
        let (l2, h1) = weighted_norms(&grid, &unit(), &vec![1.0; n]).unwrap();
        assert!((l2 - 1.0).abs() < 1e-12 && h1.abs() < 1e-12);
        let x: Vec<f64> = grid.nodes.iter().map(|p| p[0]).collect();
        let (l2, h1) = weighted_norms(&grid, &unit(), &x).unwrap();
        assert!((h1 - 1.0).abs() < 1e-12);
        // int_0^1 x^2 = 1/3, exact for linear functions.
        assert!((l2 * l2 - 1.0 / 3.0).abs() < 1e-12);
        assert!(weighted_norms(&grid, &unit(), &[1.0]).is_err());
    }

    #[test]
    fn relative_error_cases() {
        let grid = FineGrid::new(6).unwrap();
        let field = CoefficientField::new(1000.0, &ChannelPreset::PaperLike, 1.0, Velocity::Zero).unwrap();
        let p = bubble(&grid);
        let same = relative_errors(&grid, &field, &p, &p).unwrap();
        assert_eq!((same.l2_pct, same.h1_pct), (0.0, 0.0));
        let zero = relative_errors(&grid, &field, &p, &vec![0.0; p.len()]).unwrap();
        assert!((zero.l2_pct - 100.0).abs() < 1e-10 && (zero.h1_pct - 100.0).abs() < 1e-10);
        let scaled: Vec<f64> = p.iter().map(|v| 1.1 * v).collect();
        let r = relative_errors(&grid, &field, &p, &scaled).unwrap();
        assert!((r.l2_pct - 10.0).abs() < 1e-10 && (r.h1_pct - 10.0).abs() < 1e-10);
        let z = vec![0.0; p.len()];
        assert!(matches!(relative_errors(&grid, &field, &z, &p), Err(Error::ZeroReferenceNorm(_))));
    }

    #[test]
    fn in_channel_errors_weigh_more_with_contrast() {
        let grid = FineGrid::new(10).unwrap();
        let p = bubble(&grid);
        // Perturb one node inside the channel centred at (0.4, 0.4) in (x2, x3).
        let target = grid.node_index(5, 4, 4);
        let mut q = p.clone();
        q[target] += 0.01;
        let err = |contrast: f64| {
            let field = CoefficientField::new(contrast, &ChannelPreset::PaperLike, 1.0, Velocity::Zero).unwrap();
            relative_errors(&grid, &field, &p, &q).unwrap().l2_pct
        };
        assert!(err(1000.0) > err(10.0));
    }

    proptest! {
        #[test]
        fn perturbation_bound(seed in 0u64..1000, amp in 1e-4f64..1.0) {
            let grid = FineGrid::new(4).unwrap();
            let field = CoefficientField::new(10.0, &ChannelPreset::PaperLike, 1.0, Velocity::Zero).unwrap();
            let p = bubble(&grid);
            let delta: Vec<f64> = (0..p.len())
                .map(|i| amp * (((i as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0 - 0.5))
                .collect();
            let q: Vec<f64> = p.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let r = relative_errors(&grid, &field, &p, &q).unwrap();
            let (pl2, ph1) = weighted_norms(&grid, &field, &p).unwrap();
            let (dl2, dh1) = weighted_norms(&grid, &field, &delta).unwrap();
            prop_assert!(r.l2_pct >= 0.0 && r.h1_pct >= 0.0);
            prop_assert!(r.l2_pct <= dl2 / pl2 * 100.0 * (1.0 + 1e-12));
            prop_assert!(r.h1_pct <= dh1 / ph1 * 100.0 * (1.0 + 1e-12));
        }
    }
}
