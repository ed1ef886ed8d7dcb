//! Classical lighting representations of matched dimensionality.
//!
//! Spherical harmonics are fit in closed form by sine-weighted linear least
//! squares; spherical Gaussians by gradient descent. [`dimension_plan`] maps
//! a model dimensionality `D = 3N` onto comparable baseline sizes: the SH
//! order satisfying `3 (l_max + 1)^2 = D`, and the lobe count `ceil(D / 6)`,
//! rounding up in the Gaussians' favor when `D` is not a multiple of 6.

mod sg;
mod sh;

pub use sg::{sg_eval, sg_eval_grid, sg_fit, SgFitConfig, SgLobe, SgLobes};
pub use sh::{sh_basis, sh_eval, sh_eval_grid, sh_fit, sh_fit_map, ShCoeffs};

use crate::error::{Error, Result};

/// Baseline sizes for a model dimensionality `D`.
///
/// Returns `(l_max, lobe count)`. Fails when `D/3` is not a perfect square,
/// since no SH order then matches exactly.
pub fn dimension_plan(d: usize) -> Result<(usize, usize)> {
    if d == 0 || d % 3 != 0 {
        return Err(Error::InvalidInput(format!(
            "dimensionality {d} is not a positive multiple of 3"
        )));
    }
    let per_channel = d / 3;
    let root = (per_channel as f64).sqrt().round() as usize;
    if root * root != per_channel || root == 0 {
        return Err(Error::InvalidInput(format!(
            "no spherical-harmonic order matches dimensionality {d}"
        )));
    }
    let l_max = root - 1;
    let k = d.div_ceil(6);
    Ok((l_max, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_matches_reference_sizes() {
        // D=27 pairs with order 2 and 5 lobes (SG dimensionality 30).
        assert_eq!(dimension_plan(27).unwrap(), (2, 5));
        assert_eq!(dimension_plan(108).unwrap(), (5, 18));
        // D=147 pairs with order 6 and 25 lobes (SG dimensionality 150).
        assert_eq!(dimension_plan(147).unwrap(), (6, 25));
        assert_eq!(dimension_plan(300).unwrap(), (9, 50));
    }

    #[test]
    fn sg_dimensionality_is_next_multiple_of_six() {
        let (_, k) = dimension_plan(27).unwrap();
        assert_eq!(6 * k, 30);
        let (_, k) = dimension_plan(147).unwrap();
        assert_eq!(6 * k, 150);
        let (_, k) = dimension_plan(108).unwrap();
        assert_eq!(6 * k, 108);
    }

    #[test]
    fn unmatched_dimensionalities_rejected() {
        assert!(dimension_plan(0).is_err());
        assert!(dimension_plan(28).is_err());
        assert!(dimension_plan(30).is_err()); // 10 is not a perfect square
    }
}
