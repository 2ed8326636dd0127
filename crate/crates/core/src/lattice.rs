use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bravais lattice together with its dual.
///
/// `direct[i]` is `a_i` (Bohr) and `reciprocal[j]` is `b_j` (Bohr⁻¹) with
/// `a_i·b_j = 2π δ_ij`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub direct: [Vector3<f64>; 3],
    pub reciprocal: [Vector3<f64>; 3],
    pub cell_volume: f64,
    pub reciprocal_volume: f64,
}

/// Build a lattice from three direct vectors.
///
/// Fails when the vectors are (numerically) linearly dependent.
pub fn reciprocal_lattice(a1: Vector3<f64>, a2: Vector3<f64>, a3: Vector3<f64>) -> Result<Lattice> {
    let det = a1.dot(&a2.cross(&a3));
    if det.abs() < 1e-12 {
        return Err(Error::SingularCell { det });
    }
    let scale = 2.0 * PI / det;
    let b1 = a2.cross(&a3) * scale;
    let b2 = a3.cross(&a1) * scale;
    let b3 = a1.cross(&a2) * scale;
    let volume = det.abs();
    Ok(Lattice {
        direct: [a1, a2, a3],
        reciprocal: [b1, b2, b3],
        cell_volume: volume,
        reciprocal_volume: (2.0 * PI).powi(3) / volume,
    })
}

impl Lattice {
    /// Simple cubic lattice with edge `a`.
    pub fn cubic(a: f64) -> Result<Self> {
        reciprocal_lattice(
            Vector3::new(a, 0.0, 0.0),
            Vector3::new(0.0, a, 0.0),
            Vector3::new(0.0, 0.0, a),
        )
    }

    /// Matrix whose columns are `a_1, a_2, a_3`.
    pub fn direct_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&self.direct)
    }

    /// Cartesian position of a fractional coordinate.
    pub fn to_cartesian(&self, frac: &Vector3<f64>) -> Vector3<f64> {
        self.direct[0] * frac[0] + self.direct[1] * frac[1] + self.direct[2] * frac[2]
    }

    /// Cartesian vector of an integer lattice translation.
    pub fn translation(&self, n: [i32; 3]) -> Vector3<f64> {
        self.direct[0] * n[0] as f64 + self.direct[1] * n[1] as f64 + self.direct[2] * n[2] as f64
    }

    /// Cartesian reciprocal vector `Σ n_i b_i`.
    pub fn reciprocal_vector(&self, n: [i32; 3]) -> Vector3<f64> {
        self.reciprocal[0] * n[0] as f64
            + self.reciprocal[1] * n[1] as f64
            + self.reciprocal[2] * n[2] as f64
    }

    /// Cartesian wavevector `Σ f_i b_i` from reciprocal fractional coordinates.
    pub fn reciprocal_from_fractional(&self, f: &Vector3<f64>) -> Vector3<f64> {
        self.reciprocal[0] * f[0] + self.reciprocal[1] * f[1] + self.reciprocal[2] * f[2]
    }

    /// Reciprocal fractional coordinates `f_i = k·a_i / 2π` of a wavevector.
    pub fn reciprocal_fractional(&self, k: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            k.dot(&self.direct[0]),
            k.dot(&self.direct[1]),
            k.dot(&self.direct[2]),
        ) / (2.0 * PI)
    }

    /// Shortest nonzero direct lattice vector length, found by enumerating
    /// small translations.
    pub fn min_translation_length(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in -2..=2 {
            for j in -2..=2 {
                for k in -2..=2 {
                    if (i, j, k) != (0, 0, 0) {
                        best = best.min(self.translation([i, j, k]).norm());
                    }
                }
            }
        }
        best
    }

    /// Shortest nonzero reciprocal lattice vector length.
    pub fn min_reciprocal_length(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in -2..=2 {
            for j in -2..=2 {
                for k in -2..=2 {
                    if (i, j, k) != (0, 0, 0) {
                        best = best.min(self.reciprocal_vector([i, j, k]).norm());
                    }
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_two_pi_has_unit_reciprocal_vectors() {
        let l = Lattice::cubic(2.0 * PI).unwrap();
        for i in 0..3 {
            let mut e = Vector3::zeros();
            e[i] = 1.0;
            assert!((l.reciprocal[i] - e).norm() < 1e-14);
        }
        assert!((l.cell_volume - (2.0 * PI).powi(3)).abs() < 1e-10);
        assert!((l.reciprocal_volume - 1.0).abs() < 1e-14);
    }

    #[test]
    fn unit_cube_has_two_pi_reciprocal_vectors() {
        let l = Lattice::cubic(1.0).unwrap();
        assert!((l.reciprocal[0] - Vector3::new(2.0 * PI, 0.0, 0.0)).norm() < 1e-14);
        assert!((l.reciprocal[2] - Vector3::new(0.0, 0.0, 2.0 * PI)).norm() < 1e-14);
    }

    #[test]
    fn singular_cell_is_rejected() {
        let err = reciprocal_lattice(
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingularCell { .. }));
    }

    #[test]
    fn fractional_round_trip() {
        let l = reciprocal_lattice(
            Vector3::new(1.0, 1.0, 0.0),
            Vector3::new(0.0, 1.0, 1.0),
            Vector3::new(1.0, 0.0, 1.0),
        )
        .unwrap();
        let f = Vector3::new(0.3, -0.7, 1.25);
        let k = l.reciprocal_from_fractional(&f);
        assert!((l.reciprocal_fractional(&k) - f).norm() < 1e-13);
    }
}
