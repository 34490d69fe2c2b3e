//! Ball families: Vitali selection, covers of the unit ball, connecting chains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{unit_ball_volume, Ball, Grid};

/// Offsets are root-found to this absolute tolerance (in units of the radius).
pub const OFFSET_TOLERANCE: f64 = 1e-12;

/// Fraction of a ball's volume shared by consecutive chain members.
pub const CHAIN_OVERLAP: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallFamily {
    pub balls: Vec<Ball>,
    pub provenance: String,
}

impl BallFamily {
    pub fn new(balls: Vec<Ball>, provenance: impl Into<String>) -> Result<Self> {
        if let Some(b) = balls.iter().find(|b| b.radius.is_nan() || b.radius <= 0.0) {
            return Err(Error::InvalidParameter {
                name: "radius",
                reason: format!("family members need positive radius, got {}", b.radius),
            });
        }
        Ok(Self {
            balls,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.balls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ball family serializes")
    }
}

/// Greedy Vitali selection: scan by decreasing radius and keep every ball
/// disjoint from those already kept. Each discarded ball meets a kept ball
/// at least as large, so the 3-dilates of the selection cover the family.
pub fn vitali_select(family: &BallFamily) -> BallFamily {
    let mut order: Vec<usize> = (0..family.balls.len()).collect();
    // Stable sort keeps input order among equal radii.
    order.sort_by(|&a, &b| family.balls[b].radius.total_cmp(&family.balls[a].radius));
    let mut kept: Vec<Ball> = Vec::new();
    for i in order {
        let b = &family.balls[i];
        if kept.iter().all(|k| k.disjoint(b)) {
            kept.push(b.clone());
        }
    }
    BallFamily {
        balls: kept,
        provenance: format!("vitali({})", family.provenance),
    }
}

/// Cells whose centers lie in some ball of `targets` but in no ball of `covers`.
pub fn uncovered_cells(grid: &Grid, targets: &[Ball], covers: &[Ball]) -> Vec<usize> {
    (0..grid.cell_count())
        .filter(|&c| {
            let p = grid.center(c);
            targets.iter().any(|b| b.contains_point(&p)) && !covers.iter().any(|b| b.contains_point(&p))
        })
        .collect()
}

pub fn cover_radius(n: u32) -> f64 {
    1.0 / (3.0 * 5f64.powi(n as i32))
}

/// Upper bound on the number of balls in `cover_unit_ball(n, d)`.
pub fn cover_count_bound(n: u32, d: usize) -> f64 {
    (2.0 + 6.0 * 5f64.powi(n as i32)).powi(d as i32)
}

/// Cover of the unit ball by balls of radius `1/(3 5^n)` centered in it.
///
/// Centers sit on a cubic lattice of pitch `1.9 r / sqrt(d)`, so each lattice
/// cube lies within `0.95 r` of its center. Lattice points whose cube meets
/// the unit ball are kept; those outside it are pulled radially inside.
pub fn cover_unit_ball(n: u32, d: usize) -> Result<BallFamily> {
    if !(1..=3).contains(&d) {
        return Err(Error::InvalidParameter {
            name: "dim",
            reason: format!("covers are built for d in 1..=3, got {d}"),
        });
    }
    let r = cover_radius(n);
    let pitch = 1.9 * r / (d as f64).sqrt();
    let half_diag = 0.95 * r;
    let reach = ((1.0 + half_diag) / pitch).ceil() as i64;
    let shrink = 1.0 - 1e-12;
    let mut balls = Vec::new();
    let mut idx = vec![-reach; d];
    loop {
        let p: Vec<f64> = idx.iter().map(|&i| i as f64 * pitch).collect();
        let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1.0 + half_diag {
            let center = if norm < shrink {
                p
            } else {
                p.iter().map(|x| x * shrink / norm).collect()
            };
            balls.push(Ball { center, radius: r });
        }
        let mut axis = 0;
        loop {
            if axis == d {
                return BallFamily::new(balls, format!("cover(n={n}, d={d})"));
            }
            idx[axis] += 1;
            if idx[axis] <= reach {
                break;
            }
            idx[axis] = -reach;
            axis += 1;
        }
    }
}

/// Volume of the intersection of two balls of radius `r` whose centers are
/// `t` apart.
pub fn overlap_measure(d: usize, r: f64, t: f64) -> Result<f64> {
    let t = t.abs();
    if t >= 2.0 * r {
        return Ok(0.0);
    }
    match d {
        1 => Ok(2.0 * r - t),
        2 => Ok(2.0 * r * r * (t / (2.0 * r)).acos() - 0.5 * t * (4.0 * r * r - t * t).sqrt()),
        _ => Err(Error::InvalidParameter {
            name: "dim",
            reason: format!("lens volumes are implemented for d <= 2, got {d}"),
        }),
    }
}

/// Center offset at which two radius-`r` balls share `fraction` of their volume.
pub fn offset_for_overlap(d: usize, r: f64, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter {
            name: "fraction",
            reason: format!("must lie in (0, 1), got {fraction}"),
        });
    }
    let target = fraction * unit_ball_volume(d) * r.powi(d as i32);
    if d == 1 {
        return Ok(2.0 * r - target);
    }
    // The overlap decreases strictly in t on [0, 2r].
    let (mut lo, mut hi) = (0.0, 2.0 * r);
    while hi - lo > OFFSET_TOLERANCE * r {
        let mid = 0.5 * (lo + hi);
        if overlap_measure(d, r, mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainKind {
    Identical,
    Enlarged,
    Segment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallChain {
    pub kind: ChainKind,
    pub balls: Vec<Ball>,
    /// Spacing of consecutive centers (segment chains only).
    pub step: Option<f64>,
    /// Overlap of the last chain ball with the target, as a fraction of `|B|`.
    pub final_overlap: Option<f64>,
}

impl BallChain {
    pub fn family(&self) -> BallFamily {
        BallFamily {
            balls: self.balls.clone(),
            provenance: format!("chain({:?})", self.kind),
        }
    }
}

/// Balls connecting `bk` to `bl`.
///
/// Close pairs (center distance at most the radius) get a single ball of
/// triple radius at the midpoint. Otherwise the balls march along the
/// segment with spacing chosen so consecutive members share a tenth of their
/// volume; the first one overlaps `bk` exactly that much and the last one
/// overlaps `bl` at least that much.
pub fn ball_chain(bk: &Ball, bl: &Ball, n: u32) -> Result<BallChain> {
    let r = cover_radius(n);
    for b in [bk, bl] {
        if (b.radius - r).abs() > 1e-12 * r {
            return Err(Error::RadiusMismatch(format!(
                "chain endpoints need radius {r}, got {}",
                b.radius
            )));
        }
    }
    if bk.center.len() != bl.center.len() {
        return Err(Error::RadiusMismatch("endpoint dimensions differ".into()));
    }
    let d = bk.center.len();
    let dist = bk.center_distance(bl);
    if dist == 0.0 {
        return Ok(BallChain {
            kind: ChainKind::Identical,
            balls: Vec::new(),
            step: None,
            final_overlap: None,
        });
    }
    if dist <= r {
        let center = bk.center.iter().zip(&bl.center).map(|(a, b)| 0.5 * (a + b)).collect();
        return Ok(BallChain {
            kind: ChainKind::Enlarged,
            balls: vec![Ball { center, radius: 3.0 * r }],
            step: None,
            final_overlap: None,
        });
    }
    let step = offset_for_overlap(d, r, CHAIN_OVERLAP)?;
    let count = ((dist / step).ceil() as usize).saturating_sub(1);
    let dir: Vec<f64> = bk.center.iter().zip(&bl.center).map(|(a, b)| (b - a) / dist).collect();
    let balls: Vec<Ball> = (1..=count)
        .map(|j| Ball {
            center: bk.center.iter().zip(&dir).map(|(c, u)| c + j as f64 * step * u).collect(),
            radius: r,
        })
        .collect();
    let last_gap = dist - count as f64 * step;
    let full = unit_ball_volume(d) * r.powi(d as i32);
    Ok(BallChain {
        kind: ChainKind::Segment,
        balls,
        step: Some(step),
        final_overlap: Some(overlap_measure(d, r, last_gap)? / full),
    })
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn selection_is_disjoint(raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.01f64..0.3), 0..30)) {
            let balls = raw.iter().map(|&(x, y, r)| Ball { center: vec![x, y], radius: r }).collect();
            let sel = vitali_select(&BallFamily::new(balls, "p").unwrap());
            for (i, a) in sel.balls.iter().enumerate() {
                for b in &sel.balls[i + 1..] {
                    prop_assert!(a.disjoint(b));
                }
            }
        }

        #[test]
        fn consecutive_overlaps_are_a_tenth(x0 in -0.9f64..0.9, y0 in -0.4f64..0.4, x1 in -0.9f64..0.9, y1 in -0.4f64..0.4, n in 0u32..3) {
            let r = cover_radius(n);
            let a = Ball { center: vec![x0, y0], radius: r };
            let b = Ball { center: vec![x1, y1], radius: r };
            let c = ball_chain(&a, &b, n).unwrap();
            if c.kind == ChainKind::Segment {
                let full = std::f64::consts::PI * r * r;
                let mut prev = a.clone();
                for next in &c.balls {
                    let f = overlap_measure(2, r, prev.center_distance(next)).unwrap() / full;
                    prop_assert!((0.099..=0.101).contains(&f));
                    prev = next.clone();
                }
                prop_assert!(overlap_measure(2, r, prev.center_distance(&b)).unwrap() / full >= 0.1 - 1e-9);
            }
        }
    }
}
