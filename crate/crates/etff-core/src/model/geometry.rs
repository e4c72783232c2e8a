//! Geometry preprocessing for the model: directed neighbor lists, the
//! Gaussian radial basis, and the smooth cosine cutoff. The plain-value
//! functions here are the reference the taped forward pass is tested
//! against.

use ndarray::Array2;
use std::rc::Rc;

/// Directed neighbor pairs within a cutoff: whenever atoms i and j are
/// strictly closer than `cutoff`, both (i, j) and (j, i) appear. Entries are
/// sorted by (center, neighbor), so identical positions always produce an
/// identical list.
#[derive(Debug, Clone)]
pub struct PairList {
    /// Receiving atom of each pair (the "center" i).
    pub center: Rc<Vec<usize>>,
    /// Neighbor atom of each pair (the j whose features flow to i).
    pub neighbor: Rc<Vec<usize>>,
}

impl PairList {
    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    /// Row indices into a (3n)×D stacked-vector array such that pair p, axis
    /// a maps to the center atom's row 3·center[p] + a. Used to scatter
    /// per-pair 3-vector messages onto atoms.
    pub fn center_axis_rows(&self) -> Rc<Vec<usize>> {
        let mut rows = Vec::with_capacity(3 * self.center.len());
        for &i in self.center.iter() {
            rows.extend([3 * i, 3 * i + 1, 3 * i + 2]);
        }
        Rc::new(rows)
    }
}

/// Brute-force O(n²) neighbor search, exact and deterministic. Strict `<`:
/// a pair at exactly the cutoff does not interact (its weight would be zero
/// anyway).
pub fn neighbor_pairs(positions: &Array2<f64>, cutoff: f64) -> PairList {
    let n = positions.nrows();
    let mut center = Vec::new();
    let mut neighbor = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let d2: f64 = (0..3)
                .map(|a| (positions[[i, a]] - positions[[j, a]]).powi(2))
                .sum();
            if d2.sqrt() < cutoff {
                center.push(i);
                neighbor.push(j);
            }
        }
    }
    PairList {
        center: Rc::new(center),
        neighbor: Rc::new(neighbor),
    }
}

/// Centers and width of the Gaussian radial basis: `n_rbf` means spaced
/// evenly over [0, cutoff], with γ chosen so neighboring Gaussians overlap
/// at comparable density for any basis size.
pub fn rbf_centers_gamma(n_rbf: usize, cutoff: f64) -> (Vec<f64>, f64) {
    assert!(n_rbf >= 2, "radial basis needs at least two functions");
    let mu = (0..n_rbf)
        .map(|k| cutoff * k as f64 / (n_rbf - 1) as f64)
        .collect();
    let gamma = ((n_rbf - 1) as f64 / cutoff).powi(2);
    (mu, gamma)
}

/// e_k(d) = exp(−γ (d − μ_k)²).
pub fn rbf_expand(d: f64, n_rbf: usize, cutoff: f64) -> Vec<f64> {
    let (mu, gamma) = rbf_centers_gamma(n_rbf, cutoff);
    mu.iter()
        .map(|&m| (-gamma * (d - m) * (d - m)).exp())
        .collect()
}

/// Smooth cosine cutoff: ½(cos(πd/r_c) + 1) inside, exactly 0 at and beyond
/// the cutoff.
pub fn cosine_cutoff(d: f64, cutoff: f64) -> f64 {
    if d < cutoff {
        0.5 * ((std::f64::consts::PI * d / cutoff).cos() + 1.0)
    } else {
        0.0
    }
}
