use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Lattice;

/// Tolerance used when deciding that a fractional coordinate is integral.
const GRID_TOL: f64 = 1e-6;

/// Uniform `n × n × n` grid of the Brillouin zone, offset by `shift`
/// (fractions of a grid step, each in `[0,1)`).
///
/// Point `(j0, j1, j2)` has reciprocal fractional coordinates
/// `(j_i + shift_i)/n` and flat index `(j0·n + j1)·n + j2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KGrid {
    pub n: usize,
    pub shift: Vector3<f64>,
}

impl KGrid {
    pub fn new(n: usize, shift: Vector3<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("k-grid size must be >= 1".into()));
        }
        if !shift.iter().all(|s| (0.0..1.0).contains(s)) {
            return Err(Error::InvalidInput(format!(
                "k-grid shift must lie in [0,1)^3, got {:?}",
                shift.as_slice()
            )));
        }
        Ok(Self { n, shift })
    }

    /// Unshifted grid.
    pub fn gamma_centered(n: usize) -> Result<Self> {
        Self::new(n, Vector3::zeros())
    }

    pub fn len(&self) -> usize {
        self.n * self.n * self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Reciprocal fractional coordinates of every point, in flat order.
    pub fn fractional_points(&self) -> Vec<Vector3<f64>> {
        let n = self.n;
        let mut out = Vec::with_capacity(self.len());
        for j0 in 0..n {
            for j1 in 0..n {
                for j2 in 0..n {
                    let j = [j0, j1, j2];
                    out.push(Vector3::from_fn(|i, _| {
                        (j[i] as f64 + self.shift[i]) / n as f64
                    }));
                }
            }
        }
        out
    }

    /// Cartesian points, in flat order.
    pub fn points(&self, lattice: &Lattice) -> Vec<Vector3<f64>> {
        self.fractional_points()
            .iter()
            .map(|f| lattice.reciprocal_from_fractional(f))
            .collect()
    }

    /// Locate a wavevector given in reciprocal fractional coordinates:
    /// returns the flat index `i` and the integer triple `G0` with
    /// `k = k_i + G0`, or `None` when `k` is not on the grid modulo `𝕃*`.
    pub fn locate_fractional(&self, f: &Vector3<f64>) -> Option<(usize, [i32; 3])> {
        let n = self.n as i64;
        let mut flat = 0usize;
        let mut g0 = [0i32; 3];
        for i in 0..3 {
            let x = f[i] * self.n as f64 - self.shift[i];
            let j = x.round();
            if (x - j).abs() > GRID_TOL {
                return None;
            }
            let j = j as i64;
            g0[i] = j.div_euclid(n) as i32;
            flat = flat * self.n + j.rem_euclid(n) as usize;
        }
        Some((flat, g0))
    }

    /// Shift of the grid `K + q` for `q` in reciprocal fractional
    /// coordinates, reduced into `[0,1)`.
    pub fn offset_by(&self, q_frac: &Vector3<f64>) -> KGrid {
        let shift = Vector3::from_fn(|i, _| {
            let s = self.shift[i] + q_frac[i] * self.n as f64;
            let mut r = s - s.floor();
            // Snap values that are integral up to rounding.
            if r > 1.0 - 1e-10 || r < 1e-10 {
                r = 0.0;
            }
            r
        });
        KGrid { n: self.n, shift }
    }
}

/// The `n³` points `Σ_i ((j_i + shift_i)/n) b_i`.
pub fn kgrid(lattice: &Lattice, n: usize, shift: Vector3<f64>) -> Result<Vec<Vector3<f64>>> {
    Ok(KGrid::new(n, shift)?.points(lattice))
}
