//! Sample-based distribution comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndnum::Tensor2;

/// Bandwidth used when the median heuristic degenerates to zero.
pub const FALLBACK_BANDWIDTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mmd {
    pub value: f64,
    pub bandwidth: f64,
    /// True when the median heuristic returned 0 and [`FALLBACK_BANDWIDTH`] was used.
    pub fallback: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the pairwise Euclidean distances over all distinct pairs.
fn median_distance(z: &[&[f64]]) -> f64 {
    let n = z.len();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(z[i], z[j]));
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let len = d.len();
    let (lower, upper, _) = d.select_nth_unstable_by(len / 2, f64::total_cmp);
    let upper = *upper;
    if len % 2 == 1 {
        upper.sqrt()
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below.sqrt() + upper.sqrt())
    }
}

fn mean_kernel(a: &[&[f64]], b: &[&[f64]], inv_two_h2: f64) -> f64 {
    let mut total = 0.0;
    for x in a {
        let mut row = 0.0;
        for y in b {
            row += (-sq_dist(x, y) * inv_two_h2).exp();
        }
        total += row;
    }
    total / (a.len() * b.len()) as f64
}

/// Biased (V-statistic) MMD² with kernel `exp(−‖x − y‖² / (2h²))`.
pub fn mmd2(x: &Tensor2, y: &Tensor2, bandwidth: Bandwidth) -> Result<Mmd> {
    if x.cols() != y.cols() {
        return Err(Error::shape("mmd sample dim", x.cols(), y.cols()));
    }
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::Config("mmd2 needs non-empty sample sets".into()));
    }
    let xs: Vec<&[f64]> = (0..x.rows()).map(|r| x.row(r)).collect();
    let ys: Vec<&[f64]> = (0..y.rows()).map(|r| y.row(r)).collect();
    let (h, fallback) = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 => (h, false),
        Bandwidth::Fixed(h) => return Err(Error::Config(format!("bandwidth must be > 0, got {h}"))),
        Bandwidth::Median => {
            let all: Vec<&[f64]> = xs.iter().chain(&ys).copied().collect();
            let m = median_distance(&all);
            if m > 0.0 {
                (m, false)
            } else {
                (FALLBACK_BANDWIDTH, true)
            }
        }
    };
    let k = 1.0 / (2.0 * h * h);
    let value = mean_kernel(&xs, &xs, k) + mean_kernel(&ys, &ys, k) - 2.0 * mean_kernel(&xs, &ys, k);
    Ok(Mmd {
        value: value.max(0.0),
        bandwidth: h,
        fallback,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub center: Vec<f64>,
    pub radius: f64,
}

/// Fraction of samples within each mode's radius. A sample may count toward
/// several modes or none.
pub fn mode_coverage(samples: &Tensor2, modes: &[Mode]) -> Result<Vec<f64>> {
    if modes.is_empty() {
        return Err(Error::Config("mode_coverage needs at least one mode".into()));
    }
    let n = samples.rows().max(1) as f64;
    modes
        .iter()
        .map(|m| {
            if m.center.len() != samples.cols() {
                return Err(Error::shape("mode center dim", samples.cols(), m.center.len()));
            }
            let r2 = m.radius * m.radius;
            let hits = (0..samples.rows()).filter(|&r| sq_dist(samples.row(r), &m.center) <= r2).count();
            Ok(hits as f64 / n)
        })
        .collect()
}
