//! Quadratic energy forms and Gagliardo seminorms.
//!
//! All double sums run row by row: each row is accumulated sequentially and
//! the row totals are added in index order, so values do not depend on the
//! number of worker threads.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Ball, Grid, GridFunction};
use crate::kernels::{check_order, TabulatedKernel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormValue {
    pub value: f64,
    /// Ordered pairs `(i, j)`, `i != j`, entering the sum with a nonzero weight.
    pub pair_count: u64,
    pub kernel_id: String,
}

fn ordered_sum(rows: Vec<(f64, u64)>) -> (f64, u64) {
    rows.into_iter()
        .fold((0.0, 0), |(v, c), (rv, rc)| (v + rv, c + rc))
}

/// `sum_{i != j} (u_i - u_j)^2 w(i, j) h^(2d)` over `i, j` in `cells`.
fn pair_sum(grid: &Grid, u: &[f64], cells: &[usize], w: impl Fn(usize, usize) -> f64 + Sync) -> (f64, u64) {
    let rows: Vec<(f64, u64)> = cells
        .par_iter()
        .map(|&i| {
            let mut acc = 0.0;
            let mut count = 0;
            for &j in cells {
                if i == j {
                    continue;
                }
                let k = w(i, j);
                if k != 0.0 {
                    let d = u[i] - u[j];
                    acc += d * d * k;
                    count += 1;
                }
            }
            (acc, count)
        })
        .collect();
    let (v, c) = ordered_sum(rows);
    let hd = grid.cell_volume();
    (v * hd * hd, c)
}

pub fn energy(k: &TabulatedKernel, u: &GridFunction) -> Result<FormValue> {
    if k.grid() != &u.grid {
        return Err(Error::GridMismatch);
    }
    let cells: Vec<usize> = (0..k.size()).collect();
    let (value, pair_count) = pair_sum(k.grid(), &u.values, &cells, |i, j| k.get(i, j));
    Ok(FormValue {
        value,
        pair_count,
        kernel_id: k.id().to_string(),
    })
}

/// Energy restricted to pairs with both cells in `cells`.
pub fn energy_on(k: &TabulatedKernel, u: &GridFunction, cells: &[usize]) -> Result<FormValue> {
    if k.grid() != &u.grid {
        return Err(Error::GridMismatch);
    }
    let (value, pair_count) = pair_sum(k.grid(), &u.values, cells, |i, j| k.get(i, j));
    Ok(FormValue {
        value,
        pair_count,
        kernel_id: k.id().to_string(),
    })
}

fn gagliardo_weight(grid: &Grid, s: f64) -> impl Fn(usize, usize) -> f64 + Sync + '_ {
    let h = grid.spacing();
    let expo = -(grid.dim() as f64 + 2.0 * s) / 2.0;
    move |i, j| (grid.sq_steps(i, j) as f64 * h * h).powf(expo)
}

fn gagliardo_id(s: f64) -> String {
    format!("gagliardo;s={s}")
}

/// Squared Gagliardo seminorm with unit normalization constant.
pub fn hs_seminorm_sq(u: &GridFunction, s: f64) -> Result<FormValue> {
    check_order(s)?;
    let cells: Vec<usize> = (0..u.grid.cell_count()).collect();
    let (value, pair_count) = pair_sum(&u.grid, &u.values, &cells, gagliardo_weight(&u.grid, s));
    Ok(FormValue {
        value,
        pair_count,
        kernel_id: gagliardo_id(s),
    })
}

/// Gagliardo double sum over pairs of cells inside `ball`.
pub fn hs_seminorm_local_sq(u: &GridFunction, s: f64, ball: &Ball) -> Result<FormValue> {
    check_order(s)?;
    let cells = u.grid.ball_cells(ball).cells;
    if cells.len() < 2 {
        return Err(Error::BallTooSmall {
            cells: cells.len(),
            required: 2,
        });
    }
    let (value, pair_count) = pair_sum(&u.grid, &u.values, &cells, gagliardo_weight(&u.grid, s));
    Ok(FormValue {
        value,
        pair_count,
        kernel_id: gagliardo_id(s),
    })
}

/// Profile `k(o) = K(x_0, x_0 + o)` of a translation-invariant kernel on a
/// periodic grid, indexed by the cell index of `o`.
pub fn convolution_profile(k: &TabulatedKernel) -> Result<Vec<f64>> {
    let grid = k.grid();
    if !grid.is_periodic() {
        return Err(Error::Precondition(
            "translation invariance needs a periodic grid".into(),
        ));
    }
    let m = k.size();
    let n = grid.cells_per_axis() as i64;
    let profile: Vec<f64> = k.row(0).to_vec();
    let bad = (0..m).into_par_iter().find_first(|&i| {
        let ci = grid.coords(i);
        (0..m).any(|j| {
            let cj = grid.coords(j);
            let mut rel = [0i64; 3];
            for a in 0..grid.dim() {
                rel[a] = (cj[a] - ci[a]).rem_euclid(n);
            }
            let o = grid.index_of(&rel).expect("wrapped index");
            let (a, b) = (k.get(i, j), profile[o]);
            (a - b).abs() > 1e-12 * a.abs().max(b.abs())
        })
    });
    if let Some(i) = bad {
        let ci = grid.coords(i);
        let j = (0..m)
            .find(|&j| {
                let cj = grid.coords(j);
                let mut rel = [0i64; 3];
                for a in 0..grid.dim() {
                    rel[a] = (cj[a] - ci[a]).rem_euclid(n);
                }
                let (a, b) = (k.get(i, j), profile[grid.index_of(&rel).unwrap()]);
                (a - b).abs() > 1e-12 * a.abs().max(b.abs())
            })
            .unwrap();
        return Err(Error::NotTranslationInvariant { i, j });
    }
    Ok(profile)
}

/// Fourier symbol `sigma(xi) = sum_o k(o) (2 - 2 cos(2 pi xi.o / N))`, indexed
/// like grid cells.
pub fn symbol(k: &TabulatedKernel) -> Result<Vec<f64>> {
    let profile = convolution_profile(k)?;
    let grid = k.grid();
    let n = grid.cells_per_axis() as f64;
    let m = k.size();
    Ok((0..m)
        .into_par_iter()
        .map(|xi| {
            let cx = grid.coords(xi);
            let mut acc = 0.0;
            for (o, &kv) in profile.iter().enumerate() {
                if kv == 0.0 {
                    continue;
                }
                let co = grid.coords(o);
                let phase: f64 = (0..grid.dim()).map(|a| (cx[a] * co[a]) as f64).sum::<f64>() * PI / n;
                let s = phase.sin();
                acc += kv * 4.0 * s * s;
            }
            acc
        })
        .collect())
}

/// Multidimensional DFT of `u` (unnormalized, axis by axis).
fn dft(grid: &Grid, u: &[f64]) -> Vec<Complex<f64>> {
    let n = grid.cells_per_axis();
    let mut data: Vec<Complex<f64>> = u.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut line = vec![Complex::new(0.0, 0.0); n];
    for axis in 0..grid.dim() {
        let stride = n.pow(axis as u32);
        for start in 0..data.len() {
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for (t, slot) in line.iter_mut().enumerate() {
                *slot = data[start + t * stride];
            }
            fft.process(&mut line);
            for (t, v) in line.iter().enumerate() {
                data[start + t * stride] = *v;
            }
        }
    }
    data
}

/// Energy of a translation-invariant kernel on a periodic grid, computed in
/// the discrete Fourier basis: `h^(2d)/M * sum_xi |u^(xi)|^2 sigma(xi)`.
pub fn fourier_energy(k: &TabulatedKernel, u: &GridFunction) -> Result<FormValue> {
    if k.grid() != &u.grid {
        return Err(Error::GridMismatch);
    }
    let sigma = symbol(k)?;
    let uh = dft(k.grid(), &u.values);
    let m = k.size();
    let sum: f64 = uh.iter().zip(&sigma).map(|(c, s)| c.norm_sqr() * s).sum();
    let hd = k.grid().cell_volume();
    let pair_count = k.entries().iter().filter(|v| **v != 0.0).count() as u64;
    Ok(FormValue {
        value: sum * hd * hd / m as f64,
        pair_count,
        kernel_id: k.id().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{tabulate, KernelSpec, KernelVariant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_u(grid: &Grid, seed: u64) -> GridFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..grid.cell_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        GridFunction::new(grid.clone(), v).unwrap()
    }

    #[test]
    fn two_cell_hand_example() {
        let g = Grid::periodic(1, 2, 1.0).unwrap();
        let k = TabulatedKernel::from_entries(g.clone(), 0.5, vec![0.0, 4.0, 4.0, 0.0], "k").unwrap();
        let u = GridFunction::new(g, vec![0.0, 1.0]).unwrap();
        let e = energy(&k, &u).unwrap();
        assert!((e.value - 2.0).abs() < 1e-15);
        assert_eq!(e.pair_count, 2);
    }

    #[test]
    fn constant_has_zero_energy() {
        let g = Grid::periodic(2, 6, 1.0).unwrap();
        let k = tabulate(&KernelSpec::fractional(0.4, 1.0).unwrap(), &g).unwrap();
        let u = GridFunction::constant(&g, 3.0).unwrap();
        assert_eq!(energy(&k, &u).unwrap().value, 0.0);
        assert_eq!(hs_seminorm_sq(&u, 0.4).unwrap().value, 0.0);
        assert!(fourier_energy(&k, &u).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn one_sided_is_half_of_symmetrization() {
        let g = Grid::periodic(1, 32, 1.0).unwrap();
        let one = tabulate(&KernelSpec::new(KernelVariant::OneSided { axis: 0 }, 0.5, 1.0).unwrap(), &g).unwrap();
        let sym = one.sum(&one.transpose()).unwrap();
        let u = random_u(&g, 3);
        let a = energy(&one, &u).unwrap().value;
        let b = energy(&sym, &u).unwrap().value;
        assert!((2.0 * a - b).abs() <= 1e-13 * b);
    }

    #[test]
    fn indicator_matches_enumeration() {
        let g = Grid::periodic(1, 4, 1.0).unwrap();
        let s = 0.3;
        let mut v = vec![0.0; 4];
        v[1] = 1.0;
        let u = GridFunction::new(g.clone(), v.clone()).unwrap();
        let h = 0.25f64;
        let mut oracle = 0.0;
        for i in 0..4i64 {
            for j in 0..4i64 {
                if i == j {
                    continue;
                }
                let d = (i - j).rem_euclid(4).min((j - i).rem_euclid(4)) as f64 * h;
                oracle += (v[i as usize] - v[j as usize]).powi(2) * d.powf(-1.0 - 2.0 * s) * h * h;
            }
        }
        let got = hs_seminorm_sq(&u, s).unwrap().value;
        assert!(oracle > 0.0);
        assert!((got - oracle).abs() < 1e-13 * oracle);
        let k = tabulate(&KernelSpec::fractional(s, 1.0).unwrap(), &g).unwrap();
        assert_eq!(energy(&k, &u).unwrap().value, got);
    }

    #[test]
    fn local_seminorm_matches_restricted_enumeration() {
        let g = Grid::free(1, 32, 1.0).unwrap();
        let s = 0.6;
        let u = GridFunction::from_fn(&g, |p| (7.0 * p[0]).sin() + p[0] * p[0]).unwrap();
        let ball = Ball::new(vec![0.5], 0.25).unwrap();
        let got = hs_seminorm_local_sq(&u, s, &ball).unwrap().value;
        let h = 1.0 / 32.0;
        let inside: Vec<usize> = (0..32).filter(|&i| ((i as f64 + 0.5) * h - 0.5).abs() < 0.25).collect();
        let mut oracle = 0.0;
        for &i in &inside {
            for &j in &inside {
                if i != j {
                    let d = (i as f64 - j as f64).abs() * h;
                    oracle += (u.values[i] - u.values[j]).powi(2) * d.powf(-1.0 - 2.0 * s) * h * h;
                }
            }
        }
        assert!((got - oracle).abs() < 1e-12 * oracle);
        let tiny = Ball::new(vec![0.5], 0.01).unwrap();
        assert!(matches!(
            hs_seminorm_local_sq(&u, s, &tiny),
            Err(Error::BallTooSmall { .. })
        ));
    }

    #[test]
    fn fourier_matches_direct() {
        for (dim, n) in [(1, 64), (2, 16)] {
            let g = Grid::periodic(dim, n, 1.0).unwrap();
            for spec in [
                KernelSpec::fractional(0.5, 1.0).unwrap(),
                KernelSpec::new(KernelVariant::OneSided { axis: 0 }, 0.3, 2.0).unwrap(),
            ] {
                let k = tabulate(&spec, &g).unwrap();
                for seed in 0..5 {
                    let u = random_u(&g, seed);
                    let a = energy(&k, &u).unwrap().value;
                    let b = fourier_energy(&k, &u).unwrap().value;
                    assert!((a - b).abs() <= 1e-12 * a, "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn single_mode_picks_out_symbol() {
        let g = Grid::periodic(1, 64, 1.0).unwrap();
        let k = tabulate(&KernelSpec::fractional(0.5, 1.0).unwrap(), &g).unwrap();
        let u = GridFunction::from_fn(&g, |p| (2.0 * PI * p[0]).cos()).unwrap();
        let sigma = symbol(&k).unwrap();
        let h = g.spacing();
        // |u^(+-1)|^2 = (N/2)^2, so E = h^2/N * 2 (N/2)^2 sigma(1)
        let expected = h * h / 64.0 * 2.0 * 32.0 * 32.0 * sigma[1];
        let direct = energy(&k, &u).unwrap().value;
        assert!((direct - expected).abs() < 1e-12 * direct);
    }

    #[test]
    fn non_invariant_kernel_is_rejected() {
        let g = Grid::periodic(1, 8, 1.0).unwrap();
        let mut e = tabulate(&KernelSpec::fractional(0.5, 1.0).unwrap(), &g)
            .unwrap()
            .entries()
            .to_vec();
        e[3 * 8 + 5] *= 2.0;
        let k = TabulatedKernel::from_entries(g.clone(), 0.5, e, "x").unwrap();
        let u = random_u(&g, 1);
        assert_eq!(fourier_energy(&k, &u), Err(Error::NotTranslationInvariant { i: 3, j: 5 }));
        let free = Grid::free(1, 8, 1.0).unwrap();
        let k = tabulate(&KernelSpec::fractional(0.5, 1.0).unwrap(), &free).unwrap();
        assert!(fourier_energy(&k, &random_u(&free, 1)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn setup(seed: u64) -> (TabulatedKernel, TabulatedKernel, GridFunction) {
            let g = Grid::periodic(1, 16, 1.0).unwrap();
            let k1 = tabulate(&KernelSpec::fractional(0.5, 1.0).unwrap(), &g).unwrap();
            let k2 = tabulate(
                &KernelSpec::new(
                    KernelVariant::Tabulated {
                        source: crate::kernels::TabulatedSource::RandomMask { density: 0.5, seed },
                    },
                    0.5,
                    1.0,
                )
                .unwrap(),
                &g,
            )
            .unwrap();
            (k1, k2, random_u(&g, seed))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn shift_invariant(seed in 0u64..10_000, c in -5.0f64..5.0) {
                let (k, _, u) = setup(seed);
                let a = energy(&k, &u).unwrap().value;
                let b = energy(&k, &u.shifted(c)).unwrap().value;
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
            }

            #[test]
            fn quadratic_homogeneity(seed in 0u64..10_000, t in -4.0f64..4.0) {
                let (k, _, u) = setup(seed);
                let a = energy(&k, &u).unwrap().value;
                let b = energy(&k, &u.scaled(t)).unwrap().value;
                prop_assert!((b - t * t * a).abs() <= 1e-12 * b.abs().max(a));
            }

            #[test]
            fn additive_in_kernel(seed in 0u64..10_000) {
                let (k1, k2, u) = setup(seed);
                let sum = energy(&k1.sum(&k2).unwrap(), &u).unwrap().value;
                let parts = energy(&k1, &u).unwrap().value + energy(&k2, &u).unwrap().value;
                prop_assert!((sum - parts).abs() <= 1e-12 * sum);
            }

            #[test]
            fn local_below_global(seed in 0u64..10_000, cx in 0.1f64..0.9, r in 0.1f64..0.5) {
                let (_, _, u) = setup(seed);
                let ball = Ball::new(vec![cx], r).unwrap();
                let local = hs_seminorm_local_sq(&u, 0.5, &ball).unwrap().value;
                let global = hs_seminorm_sq(&u, 0.5).unwrap().value;
                prop_assert!(local <= global);
            }

            #[test]
            fn local_monotone_in_ball(seed in 0u64..10_000, r in 0.1f64..0.3, extra in 0.0f64..0.2) {
                let (_, _, u) = setup(seed);
                let small = hs_seminorm_local_sq(&u, 0.5, &Ball::new(vec![0.5], r).unwrap()).unwrap().value;
                let large = hs_seminorm_local_sq(&u, 0.5, &Ball::new(vec![0.5], r + extra).unwrap()).unwrap().value;
                prop_assert!(small <= large);
            }
        }
    }
}
