use serde::{Deserialize, Serialize};

use super::TabulatedKernel;
use crate::error::{Error, Result};
use crate::grid::unit_ball_volume;

/// How the integral over `B_r(x)` is approximated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// Plain midpoint sum over the cells of the ball, self-cell omitted.
    CellSum,
    /// Cell sum plus the integrable singular contribution of the self-cell,
    /// `R^(2-2s)/(2-2s)` times the angular factor read off the nearest
    /// neighbours, where `R` is the radius of a ball of one cell volume.
    #[default]
    SingularCorrected,
}

/// `sum_{y in B_r(x)} ((y - x) . e)_+^2 K(x, y) h^d / r^(2-2s)`.
pub fn conjecture_ratio(
    k: &TabulatedKernel,
    x: usize,
    r: f64,
    e: &[f64],
    quadrature: Quadrature,
) -> Result<f64> {
    let grid = k.grid();
    let d = grid.dim();
    let h = grid.spacing();
    let m = grid.cell_count();
    if x >= m {
        return Err(Error::IndexOutOfRange { index: x, cells: m });
    }
    if r.is_nan() || r < 2.0 * h {
        return Err(Error::InsufficientResolution {
            radius: r,
            limit: 2.0 * h,
        });
    }
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if e.len() != d || (norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter {
            name: "e",
            reason: format!("need a unit vector of length {d}"),
        });
    }
    let s = k.s();
    let proj = |y: usize| -> f64 {
        let o = grid.offset(x, y);
        (0..d).map(|a| o[a] as f64 * h * e[a]).sum::<f64>().max(0.0)
    };

    let offsets = grid.centered_offsets(r / h);
    let mut sum = 0.0;
    for y in grid.centered_ball(x, &offsets) {
        if y == x {
            continue;
        }
        let p = proj(y);
        sum += p * p * k.get(x, y);
    }
    sum *= grid.cell_volume();

    if quadrature == Quadrature::SingularCorrected {
        let radius = (grid.cell_volume() / unit_ball_volume(d)).powf(1.0 / d as f64);
        let sphere = d as f64 * unit_ball_volume(d);
        let neighbours = 3usize.pow(d as u32) - 1;
        let weight = sphere / neighbours as f64;
        let expo = d as f64 + 2.0 * s;
        let mut angular = 0.0;
        for y in grid.centered_ball(x, &grid.centered_offsets(1.5)) {
            let o = grid.offset(x, y);
            let len2: i64 = o.iter().map(|v| v * v).sum();
            if y == x || o.iter().any(|v| v.abs() > 1) || len2 == 0 {
                continue;
            }
            let len = (len2 as f64).sqrt() * h;
            let cos = proj(y) / len;
            angular += weight * cos * cos * k.get(x, y) * len.powf(expo);
        }
        sum += angular * radius.powf(2.0 - 2.0 * s) / (2.0 - 2.0 * s);
    }
    Ok(sum / r.powf(2.0 - 2.0 * s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::kernels::{tabulate, KernelSpec, KernelVariant};

    #[test]
    fn fractional_ratio_near_continuum_value() {
        let g = Grid::periodic(1, 256, 1.0).unwrap();
        for s in [0.25, 0.5, 0.75] {
            let k = tabulate(&KernelSpec::fractional(s, 1.0).unwrap(), &g).unwrap();
            let v = conjecture_ratio(&k, 10, 0.4, &[1.0], Quadrature::default()).unwrap();
            let exact = 1.0 / (2.0 - 2.0 * s);
            assert!((v - exact).abs() / exact < 0.03, "s={s}: {v} vs {exact}");
        }
    }

    #[test]
    fn independent_of_base_point() {
        let g = Grid::periodic(1, 64, 1.0).unwrap();
        let k = tabulate(&KernelSpec::fractional(0.5, 1.0).unwrap(), &g).unwrap();
        let a = conjecture_ratio(&k, 3, 0.25, &[1.0], Quadrature::CellSum).unwrap();
        let b = conjecture_ratio(&k, 40, 0.25, &[1.0], Quadrature::CellSum).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
    }

    #[test]
    fn one_sided_away_from_support_is_zero() {
        let g = Grid::periodic(1, 64, 1.0).unwrap();
        let k = tabulate(&KernelSpec::new(KernelVariant::OneSided { axis: 0 }, 0.5, 1.0).unwrap(), &g).unwrap();
        let v = conjecture_ratio(&k, 5, 0.25, &[-1.0], Quadrature::default()).unwrap();
        assert_eq!(v, 0.0);
        let z = crate::kernels::TabulatedKernel::zeros(g, 0.5, "zero").unwrap();
        assert_eq!(conjecture_ratio(&z, 5, 0.25, &[1.0], Quadrature::default()).unwrap(), 0.0);
    }

    #[test]
    fn resolution_and_direction_checks() {
        let g = Grid::periodic(2, 16, 1.0).unwrap();
        let k = tabulate(&KernelSpec::fractional(0.5, 1.0).unwrap(), &g).unwrap();
        assert!(matches!(
            conjecture_ratio(&k, 0, 0.1, &[1.0, 0.0], Quadrature::default()),
            Err(Error::InsufficientResolution { .. })
        ));
        assert!(conjecture_ratio(&k, 0, 0.25, &[1.0, 1.0], Quadrature::default()).is_err());
        assert!(conjecture_ratio(&k, 0, 0.25, &[0.6, 0.8], Quadrature::default()).unwrap() > 0.0);
    }
}
