//! Modulation schemes and their symbol geometry.
//!
//! All constellations are normalized to unit mean power under a uniform
//! symbol prior, so SNR definitions do not depend on the scheme. Symbol
//! indices follow a fixed grid order documented on [`Constellation::new`]:
//! the real axis ascends fastest, the imaginary axis ascends slowest. Every
//! consumer of symbol indices (labels, detectors, reports) shares this
//! single ordering.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Modulation scheme selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Bpsk,
    Qpsk,
    Qam16,
    Qam64,
}

impl Scheme {
    /// Number of constellation points.
    pub fn class_count(self) -> usize {
        match self {
            Scheme::Bpsk => 2,
            Scheme::Qpsk => 4,
            Scheme::Qam16 => 16,
            Scheme::Qam64 => 64,
        }
    }

    pub fn all() -> [Scheme; 4] {
        [Scheme::Bpsk, Scheme::Qpsk, Scheme::Qam16, Scheme::Qam64]
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Scheme::Bpsk => "bpsk",
            Scheme::Qpsk => "qpsk",
            Scheme::Qam16 => "qam16",
            Scheme::Qam64 => "qam64",
        };
        f.write_str(s)
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bpsk" => Ok(Scheme::Bpsk),
            "qpsk" => Ok(Scheme::Qpsk),
            "qam16" => Ok(Scheme::Qam16),
            "qam64" => Ok(Scheme::Qam64),
            other => Err(format!(
                "unknown scheme {other:?} (expected bpsk, qpsk, qam16, or qam64)"
            )),
        }
    }
}

/// A unit-mean-power symbol constellation with precomputed neighbor sets.
#[derive(Clone, Debug)]
pub struct Constellation {
    scheme: Scheme,
    points: Vec<Complex64>,
    /// For each index, the indices of all points at the minimal Euclidean
    /// distance from it, ascending.
    neighbor_sets: Vec<Vec<usize>>,
}

impl Constellation {
    /// Builds the constellation for `scheme`.
    ///
    /// Index order: BPSK is `[+1, -1]`. Square QAM schemes (QPSK, 16QAM,
    /// 64QAM) lay points on the odd-integer grid `{-(m-1), ..., -1, +1,
    /// ..., m-1}^2` scaled to unit mean power; index `r * m + c` maps to
    /// real level `c` (ascending) and imaginary level `r` (ascending), so
    /// index 0 is the bottom-left point (most negative real and imaginary
    /// parts) and the real axis is the fast axis.
    pub fn new(scheme: Scheme) -> Self {
        let points = match scheme {
            Scheme::Bpsk => vec![Complex64::new(1.0, 0.0), Complex64::new(-1.0, 0.0)],
            Scheme::Qpsk => square_grid(2),
            Scheme::Qam16 => square_grid(4),
            Scheme::Qam64 => square_grid(8),
        };
        let neighbor_sets = neighbor_sets(&points);
        Constellation {
            scheme,
            points,
            neighbor_sets,
        }
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn class_count(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Complex64 {
        self.points[index]
    }

    /// Indices of the points closest to `index`, ascending.
    pub fn neighbors(&self, index: usize) -> &[usize] {
        &self.neighbor_sets[index]
    }

    /// Mean symbol power under a uniform prior.
    pub fn mean_power(&self) -> f64 {
        let n = self.points.len() as f64;
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / n
    }

    /// Expected fraction of nearest-neighbor confusions if a wrong label
    /// were drawn uniformly from the other `C - 1` points. This is the null
    /// model that error-locality statistics are compared against.
    pub fn uniform_neighbor_fraction(&self) -> f64 {
        let c = self.points.len();
        let total: usize = self.neighbor_sets.iter().map(|s| s.len()).sum();
        total as f64 / (c * (c - 1)) as f64
    }

    /// Ranks every other point by distance from `index`: result[j] = rank of
    /// point j (0 = nearest tier), usize::MAX at `index` itself. Ties share
    /// a rank and the next rank is skipped (competition ranking over the
    /// sorted distinct distances).
    pub fn distance_ranks(&self, index: usize) -> Vec<usize> {
        let me = self.points[index];
        let mut dists: Vec<(usize, f64)> = self
            .points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != index)
            .map(|(j, p)| (j, (p - me).norm()))
            .collect();
        dists.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut ranks = vec![usize::MAX; self.points.len()];
        let mut rank = 0usize;
        for (pos, &(j, d)) in dists.iter().enumerate() {
            if pos > 0 && d > dists[pos - 1].1 * (1.0 + 1e-9) {
                rank = pos;
            }
            ranks[j] = rank;
        }
        ranks
    }
}

/// Odd-integer m x m grid scaled to unit mean power, row-major with the
/// real axis fast and both axes ascending.
fn square_grid(m: usize) -> Vec<Complex64> {
    let levels: Vec<f64> = (0..m).map(|i| (2 * i) as f64 - (m - 1) as f64).collect();
    let mut raw = Vec::with_capacity(m * m);
    for &im in &levels {
        for &re in &levels {
            raw.push(Complex64::new(re, im));
        }
    }
    let power = raw.iter().map(|p| p.norm_sqr()).sum::<f64>() / raw.len() as f64;
    let scale = 1.0 / power.sqrt();
    raw.iter().map(|p| p * scale).collect()
}

fn neighbor_sets(points: &[Complex64]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut sets = Vec::with_capacity(n);
    for i in 0..n {
        let mut min_d = f64::INFINITY;
        for j in 0..n {
            if j != i {
                min_d = min_d.min((points[j] - points[i]).norm());
            }
        }
        // Grid spacings are exact up to one rounding of the final subtract;
        // a relative tolerance keeps equal-spacing ties intact.
        let cutoff = min_d * (1.0 + 1e-9);
        let set: Vec<usize> = (0..n)
            .filter(|&j| j != i && (points[j] - points[i]).norm() <= cutoff)
            .collect();
        sets.push(set);
    }
    sets
}
