use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::basis::PlaneWaveBasis;
use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::C64;

/// A nucleus: fractional position in `[0,1)³` and integer charge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub frac: Vector3<f64>,
    pub charge: u32,
}

/// Periodic arrangement of Gaussian-smeared nuclei.
///
/// Each nucleus carries the normalized density
/// `m(x) = (2πσ²)^{-3/2} e^{-|x|²/2σ²}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crystal {
    pub lattice: Lattice,
    pub atoms: Vec<Atom>,
    pub sigma: f64,
}

/// Reduce a fractional coordinate into `[0,1)`.
fn reduce_unit(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

impl Crystal {
    pub fn new(lattice: Lattice, atoms: Vec<Atom>, sigma: f64) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidInput(
                "crystal needs at least one atom".into(),
            ));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!(
                "sigma must be positive, got {sigma}"
            )));
        }
        let mut reduced = Vec::with_capacity(atoms.len());
        for (s, atom) in atoms.into_iter().enumerate() {
            if atom.charge < 1 {
                return Err(Error::InvalidInput(format!(
                    "atom {s}: charge must be >= 1"
                )));
            }
            if !atom.frac.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "atom {s}: non-finite position"
                )));
            }
            reduced.push(Atom {
                frac: atom.frac.map(reduce_unit),
                charge: atom.charge,
            });
        }
        Ok(Self {
            lattice,
            atoms: reduced,
            sigma,
        })
    }

    /// Total electron count `N_el = Σ Z_s`.
    pub fn n_electrons(&self) -> usize {
        self.atoms.iter().map(|a| a.charge as usize).sum()
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    /// Cartesian position `τ_s`.
    pub fn position(&self, s: usize) -> Vector3<f64> {
        self.lattice.to_cartesian(&self.atoms[s].frac)
    }

    /// Gaussian factor `e^{-σ²p²/2}`; equals `(2π)^{3/2} m̂(p)` for the
    /// unitary Fourier transform `m̂`.
    pub fn shape_factor(&self, p2: f64) -> f64 {
        (-0.5 * self.sigma * self.sigma * p2).exp()
    }

    /// Structure phase `e^{-iG·τ_s}` for the integer triple of `G`.
    ///
    /// Computed from fractional coordinates, so it is exactly invariant
    /// under integer shifts of `τ_s`.
    pub fn structure_phase(&self, s: usize, miller: [i32; 3]) -> C64 {
        let f = &self.atoms[s].frac;
        let phase = -2.0
            * std::f64::consts::PI
            * (miller[0] as f64 * f[0] + miller[1] as f64 * f[1] + miller[2] as f64 * f[2]);
        C64::from_polar(1.0, phase)
    }
}

/// Coefficients `c_G(ρ_nuc) = |Ω|^{-1/2} Σ_s Z_s e^{-iG·τ_s} e^{-σ²|G|²/2}`.
pub fn nuclear_coefficients(crystal: &Crystal, basis: &PlaneWaveBasis) -> Vec<C64> {
    let inv_sqrt_vol = 1.0 / crystal.lattice.cell_volume.sqrt();
    basis
        .millers()
        .iter()
        .zip(basis.gvectors())
        .map(|(m, g)| {
            let shape = crystal.shape_factor(g.norm_squared());
            let mut c = C64::new(0.0, 0.0);
            for (s, atom) in crystal.atoms.iter().enumerate() {
                c += crystal.structure_phase(s, *m) * atom.charge as f64;
            }
            c * shape * inv_sqrt_vol
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_basis;

    fn two_atoms() -> Crystal {
        Crystal::new(
            Lattice::cubic(5.0).unwrap(),
            vec![
                Atom {
                    frac: Vector3::new(0.0, 0.0, 0.0),
                    charge: 1,
                },
                Atom {
                    frac: Vector3::new(0.5, 0.5, 0.5),
                    charge: 2,
                },
            ],
            0.8,
        )
        .unwrap()
    }

    #[test]
    fn gamma_coefficient_counts_electrons() {
        let c = two_atoms();
        let b = build_basis(&c.lattice, 3.0);
        let coeffs = nuclear_coefficients(&c, &b);
        let expected = 3.0 / c.lattice.cell_volume.sqrt();
        assert!((coeffs[0] - C64::new(expected, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn positions_are_reduced() {
        let c = Crystal::new(
            Lattice::cubic(3.0).unwrap(),
            vec![Atom {
                frac: Vector3::new(1.25, -0.25, 3.0),
                charge: 1,
            }],
            1.0,
        )
        .unwrap();
        assert!((c.atoms[0].frac - Vector3::new(0.25, 0.75, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn invalid_atoms_are_rejected() {
        let l = Lattice::cubic(3.0).unwrap();
        let zero = Atom {
            frac: Vector3::zeros(),
            charge: 0,
        };
        assert!(Crystal::new(l.clone(), vec![zero], 1.0).is_err());
        let one = Atom {
            frac: Vector3::zeros(),
            charge: 1,
        };
        assert!(Crystal::new(l.clone(), vec![one.clone()], 0.0).is_err());
        assert!(Crystal::new(l, vec![], 1.0).is_err());
    }
}
