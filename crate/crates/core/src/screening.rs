use std::f64::consts::PI;

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use log::{debug, info};
use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::PlaneWaveBasis;
use crate::crystal::Crystal;
use crate::error::{Error, Result};
use crate::hamiltonian::{solve_spectrum_anchored, BlochSpectrum};
use crate::response::{chi0_block, chi0_block_with, screened_coulomb_block, BlochMatrix};
use crate::scf::GroundState;
use crate::C64;

/// Imaginary residue tolerated (relative to `Z_s`) before Born charges are
/// declared inconsistent.
pub const ZSTAR_IMAG_TOL: f64 = 1e-6;

/// Finite-difference extraction parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSettings {
    /// Initial step `h` (Bohr⁻¹); defaults to `1e-3 · min|b_i|`.
    pub h: Option<f64>,
    /// Relative residual of the quadratic head fit that stops halving.
    pub tol: f64,
    pub max_halvings: usize,
    pub n_bands_sum: usize,
}

impl ExtractionSettings {
    pub fn new(n_bands_sum: usize) -> Self {
        Self {
            h: None,
            tol: 1e-8,
            max_halvings: 4,
            n_bands_sum,
        }
    }
}

/// The nine sampling directions: the three Cartesian axes and the six face
/// diagonals (each sampled at `±h`).
pub fn extraction_directions() -> Vec<Vector3<f64>> {
    let s = 1.0 / 2f64.sqrt();
    vec![
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(0.0, 1.0, 0.0),
        Vector3::new(0.0, 0.0, 1.0),
        Vector3::new(s, s, 0.0),
        Vector3::new(s, 0.0, s),
        Vector3::new(0.0, s, s),
        Vector3::new(s, -s, 0.0),
        Vector3::new(s, 0.0, -s),
        Vector3::new(0.0, s, -s),
    ]
}

/// Small-q expansion `[χ₀]₀₀(q) ≈ −qᵀLq/4π`, `[χ₀]_{G0}(q) ≈ B_G·q`.
#[derive(Clone, Debug)]
pub struct HeadExpansion {
    pub l: Matrix3<f64>,
    /// `B_G` for every basis vector; entry 0 (the head) is zero.
    pub big_b: Vec<Vector3<C64>>,
    pub h: f64,
    pub directions: Vec<Vector3<f64>>,
    /// Relative least-squares residual of the quadratic head fit.
    pub head_residual: f64,
    /// Relative least-squares residual of the linear wing fit.
    pub wing_residual: f64,
    /// Largest odd part of the head relative to its even part; vanishes
    /// when the gradient of the head at `q = 0` does.
    pub gradient_residual: f64,
    pub halvings: usize,
}

/// Least-squares fit of `L` and `B_G` from a sampler returning the column
/// `[χ₀]_{G0}(q)` (head at index 0) at Cartesian `q`.
pub fn fit_head_expansion<F>(
    sampler: F,
    h: f64,
    directions: &[Vector3<f64>],
) -> Result<HeadExpansion>
where
    F: Fn(Vector3<f64>) -> Result<Vec<C64>> + Sync,
{
    let samples: Vec<(Vec<C64>, Vec<C64>)> = directions
        .par_iter()
        .map(|d| Ok((sampler(d * h)?, sampler(-d * h)?)))
        .collect::<Result<_>>()?;
    let n_dir = directions.len();
    let n_g = samples[0].0.len();

    // Head: even part = −(h²/4π) dᵀLd, six unknowns of the symmetric L.
    let mut a = DMatrix::<f64>::zeros(n_dir, 6);
    let mut y = DVector::<f64>::zeros(n_dir);
    let mut odd_max = 0.0f64;
    let mut even_max = 0.0f64;
    for (j, (d, (plus, minus))) in directions.iter().zip(&samples).enumerate() {
        let c = -h * h / (4.0 * PI);
        let row = [
            d[0] * d[0],
            d[1] * d[1],
            d[2] * d[2],
            2.0 * d[0] * d[1],
            2.0 * d[0] * d[2],
            2.0 * d[1] * d[2],
        ];
        for (k, r) in row.iter().enumerate() {
            a[(j, k)] = c * r;
        }
        let even = 0.5 * (plus[0] + minus[0]);
        let odd = 0.5 * (plus[0] - minus[0]);
        y[j] = even.re;
        odd_max = odd_max.max(odd.norm());
        even_max = even_max.max(even.norm());
    }
    let svd = a.clone().svd(true, true);
    let x = svd
        .solve(&y, 1e-14)
        .map_err(|e| Error::Singular(format!("head fit: {e}")))?;
    let head_residual = (&a * &x - &y).norm() / y.norm().max(f64::MIN_POSITIVE);
    let l = Matrix3::new(x[0], x[3], x[4], x[3], x[1], x[5], x[4], x[5], x[2]);

    // Wings: odd part / h = B_G·d.
    let dmat = DMatrix::<f64>::from_fn(n_dir, 3, |j, k| directions[j][k]);
    let dsvd = dmat.clone().svd(true, true);
    let mut big_b = vec![Vector3::<C64>::zeros(); n_g];
    let mut wing_res2 = 0.0;
    let mut wing_norm2 = 0.0;
    for g in 1..n_g {
        let mut re = DVector::<f64>::zeros(n_dir);
        let mut im = DVector::<f64>::zeros(n_dir);
        for (j, (plus, minus)) in samples.iter().enumerate() {
            let odd = (plus[g] - minus[g]) / (2.0 * h);
            re[j] = odd.re;
            im[j] = odd.im;
        }
        let bre = dsvd
            .solve(&re, 1e-14)
            .map_err(|e| Error::Singular(format!("wing fit: {e}")))?;
        let bim = dsvd
            .solve(&im, 1e-14)
            .map_err(|e| Error::Singular(format!("wing fit: {e}")))?;
        wing_res2 += (&dmat * &bre - &re).norm_squared() + (&dmat * &bim - &im).norm_squared();
        wing_norm2 += re.norm_squared() + im.norm_squared();
        big_b[g] = Vector3::from_fn(|k, _| C64::new(bre[k], bim[k]));
    }
    let wing_residual = if wing_norm2 > 0.0 {
        (wing_res2 / wing_norm2).sqrt()
    } else {
        0.0
    };
    Ok(HeadExpansion {
        l,
        big_b,
        h,
        directions: directions.to_vec(),
        head_residual,
        wing_residual,
        gradient_residual: if even_max > 0.0 {
            odd_max / even_max
        } else {
            odd_max
        },
        halvings: 0,
    })
}

/// Susceptibility at Cartesian `q` using spectra diagonalized on `K + q`.
pub fn chi0_at(gs: &GroundState, q: Vector3<f64>, n_bands_sum: usize) -> Result<BlochMatrix> {
    let q_frac = gs.basis.lattice.reciprocal_fractional(&q);
    let partner = partner_spectrum(gs, &q_frac)?;
    chi0_block_with(gs, &partner, q_frac, n_bands_sum)
}

/// Spectra on the grid `K + q`, each fiber on the plane-wave sphere of its
/// parent point in `K` so that `χ₀` is smooth in small `q`.
pub fn partner_spectrum(gs: &GroundState, q_frac: &Vector3<f64>) -> Result<BlochSpectrum> {
    if q_frac.norm() == 0.0 {
        return Ok(gs.spectrum.clone());
    }
    solve_spectrum_anchored(
        &gs.basis,
        &gs.potential,
        &gs.grid().offset_by(q_frac),
        *q_frac,
        gs.n_bands(),
    )
}

/// Extract `L` and `B_G` by central differences, halving `h` until the
/// quadratic head fit is consistent to `settings.tol`.
pub fn chi0_head_expansion(
    gs: &GroundState,
    settings: &ExtractionSettings,
) -> Result<HeadExpansion> {
    if gs.temperature > 0.0 {
        return Err(Error::InvalidInput(
            "head expansion requires a gapped zero-temperature ground state".into(),
        ));
    }
    let mut h = settings.h.unwrap_or(
        1e-3 * gs
            .basis
            .lattice
            .reciprocal
            .iter()
            .map(|b| b.norm())
            .fold(f64::INFINITY, f64::min),
    );
    let dirs = extraction_directions();
    let nbs = settings.n_bands_sum;
    let sampler = |q: Vector3<f64>| -> Result<Vec<C64>> {
        let chi = chi0_at(gs, q, nbs)?;
        Ok((0..chi.dim()).map(|g| chi.data[(g, 0)]).collect())
    };
    let mut halvings = 0;
    loop {
        let mut fit = fit_head_expansion(&sampler, h, &dirs)?;
        fit.halvings = halvings;
        debug!(
            "head expansion h = {h:.3e}: head residual {:.3e}, wing residual {:.3e}",
            fit.head_residual, fit.wing_residual
        );
        if fit.head_residual <= settings.tol {
            return Ok(fit);
        }
        if halvings >= settings.max_halvings {
            return Err(Error::ResidualTooLarge {
                residual: fit.head_residual,
                tolerance: settings.tol,
                h,
            });
        }
        h *= 0.5;
        halvings += 1;
    }
}

/// Body block `−χ₀^{≠0}(0) + diag(|G|²/4π)` on the `G ≠ 0` subspace.
pub fn body_block(chi0_at_zero: &BlochMatrix, basis: &PlaneWaveBasis) -> Mat<C64> {
    let n = basis.len() - 1;
    Mat::from_fn(n, n, |i, j| {
        let vinv = if i == j {
            basis.gvectors()[i + 1].norm_squared() / (4.0 * PI)
        } else {
            0.0
        };
        C64::new(vinv, 0.0) - chi0_at_zero.data[(i + 1, j + 1)]
    })
}

/// `ε_M = I + L − 4π Re(B† M⁻¹ B)` together with the local-field wings
/// `b_G = (M⁻¹B)_G` (entry 0 unused and zero).
pub fn macroscopic_dielectric(
    l: &Matrix3<f64>,
    big_b: &[Vector3<C64>],
    body: &Mat<C64>,
) -> Result<(Matrix3<f64>, Vec<Vector3<C64>>)> {
    let n = body.nrows();
    assert_eq!(big_b.len(), n + 1, "wing vector must cover the basis");
    let rhs = Mat::<C64>::from_fn(n, 3, |g, a| big_b[g + 1][a]);
    let x = if n == 0 {
        rhs.clone()
    } else {
        let llt = body
            .llt(Side::Lower)
            .map_err(|e| Error::Singular(format!("body block is not positive definite ({e:?})")))?;
        llt.solve(&rhs)
    };
    let mut correction = Matrix3::<C64>::zeros();
    for a in 0..3 {
        for b in 0..3 {
            let mut acc = C64::new(0.0, 0.0);
            for g in 0..n {
                acc += rhs[(g, a)].conj() * x[(g, b)];
            }
            correction[(a, b)] = acc;
        }
    }
    let raw = Matrix3::identity() + l - correction.map(|c| c.re) * (4.0 * PI);
    let eps = (raw + raw.transpose()) * 0.5;
    let eig = SymmetricEigen::new(eps);
    if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::NotPositiveDefinite(format!(
            "ε_M eigenvalues {:?}",
            eig.eigenvalues.as_slice()
        )));
    }
    let mut small_b = vec![Vector3::<C64>::zeros(); n + 1];
    for g in 0..n {
        small_b[g + 1] = Vector3::from_fn(|a, _| x[(g, a)]);
    }
    Ok((eps, small_b))
}

/// Born effective charges
/// `Z*_{s,αβ} = Z_s[δ_{αβ} + Σ_{G≠0} conj(b_{G,α}) G_β e^{−σ²|G|²/2} e^{−iG·τ_s}]`.
///
/// The factor `e^{−σ²|G|²/2}` is `(2π)^{3/2} m̂(G)` for the unitary transform
/// `m̂(p) = (2π)^{-3/2} ∫ m(x) e^{−ip·x} dx`.
pub fn born_charges(
    crystal: &Crystal,
    basis: &PlaneWaveBasis,
    b: &[Vector3<C64>],
) -> Result<Vec<Matrix3<f64>>> {
    let mut out = Vec::with_capacity(crystal.n_atoms());
    for s in 0..crystal.n_atoms() {
        let z = crystal.atoms[s].charge as f64;
        let mut acc = Matrix3::<C64>::zeros();
        for (g, (m, gv)) in basis
            .millers()
            .iter()
            .zip(basis.gvectors())
            .enumerate()
            .skip(1)
        {
            let w = crystal.structure_phase(s, *m) * crystal.shape_factor(gv.norm_squared());
            for a in 0..3 {
                for bb in 0..3 {
                    acc[(a, bb)] += b[g][a].conj() * gv[bb] * w;
                }
            }
        }
        let imag = acc.map(|c| c.im).abs().max() * z;
        if imag > ZSTAR_IMAG_TOL * z {
            return Err(Error::ImaginaryResidue {
                what: format!("Born charge of atom {s}"),
                residue: imag,
                tolerance: ZSTAR_IMAG_TOL,
            });
        }
        out.push((Matrix3::identity() + acc.map(|c| c.re)) * z);
    }
    Ok(out)
}

/// Everything extracted from the small-q analysis of a gapped crystal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScreeningSummary {
    pub eps_m: Matrix3<f64>,
    pub l: Matrix3<f64>,
    /// `b_G` per basis vector (entry 0 unused).
    pub wings: Vec<[C64; 3]>,
    pub zstar: Vec<Matrix3<f64>>,
    pub dos: f64,
    pub h: f64,
    pub halvings: usize,
    pub directions: Vec<Vector3<f64>>,
    pub head_residual: f64,
    pub wing_residual: f64,
    pub gradient_residual: f64,
    /// `max_G |[χ₀]_{0G}(0)|`, which must vanish for an insulator.
    pub chi0_wing_at_zero: f64,
}

impl ScreeningSummary {
    /// `‖Σ_s Z*_s‖_F`.
    pub fn sum_rule_defect(&self) -> f64 {
        self.zstar
            .iter()
            .fold(Matrix3::zeros(), |a, z| a + z)
            .norm()
    }

    /// `max_G ‖b_G + conj(b_{−G})‖`.
    pub fn wing_symmetry_residual(&self, basis: &PlaneWaveBasis) -> f64 {
        let neg = basis.negation_map();
        (1..self.wings.len())
            .map(|g| {
                let a = self.wings[g];
                let b = self.wings[neg[g]];
                (0..3)
                    .map(|k| (a[k] + b[k].conj()).norm())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

/// Full extraction: `L`, `B_G`, body block, `ε_M`, `b_G` and `Z*`.
pub fn screening_summary(
    gs: &GroundState,
    settings: &ExtractionSettings,
) -> Result<ScreeningSummary> {
    let fit = chi0_head_expansion(gs, settings)?;
    let chi0 = chi0_block(gs, Vector3::zeros(), settings.n_bands_sum)?;
    let wing0 = (1..chi0.dim())
        .map(|g| chi0.data[(0, g)].norm())
        .fold(0.0, f64::max);
    let body = body_block(&chi0, &gs.basis);
    let (eps_m, b) = macroscopic_dielectric(&fit.l, &fit.big_b, &body)?;
    let zstar = born_charges(&gs.crystal, &gs.basis, &b)?;
    info!(
        "ε_M diagonal {:?}",
        [eps_m[(0, 0)], eps_m[(1, 1)], eps_m[(2, 2)]]
    );
    Ok(ScreeningSummary {
        eps_m,
        l: fit.l,
        wings: b.iter().map(|v| [v[0], v[1], v[2]]).collect(),
        zstar,
        dos: gs.dos(),
        h: fit.h,
        halvings: fit.halvings,
        directions: fit.directions,
        head_residual: fit.head_residual,
        wing_residual: fit.wing_residual,
        gradient_residual: fit.gradient_residual,
        chi0_wing_at_zero: wing0,
    })
}

/// `[ε⁻¹]₀₀(h e) = [W]₀₀(h e)·h²/4π` for each step `h`.
pub fn inverse_head_limit(
    gs: &GroundState,
    e: Vector3<f64>,
    hs: &[f64],
    n_bands_sum: usize,
) -> Result<Vec<f64>> {
    let e = e.normalize();
    hs.iter()
        .map(|&h| {
            let chi = chi0_at(gs, e * h, n_bands_sum)?;
            let w = screened_coulomb_block(&chi, &gs.basis)?;
            Ok(w.data[(0, 0)].re * h * h / (4.0 * PI))
        })
        .collect()
}

/// Richardson extrapolation in `h²` of the last two entries.
pub fn extrapolate_head_limit(hs: &[f64], values: &[f64]) -> f64 {
    let n = hs.len();
    assert!(n >= 2 && values.len() == n, "need at least two samples");
    let (h1, h2) = (hs[n - 2], hs[n - 1]);
    let (v1, v2) = (values[n - 2], values[n - 1]);
    (h1 * h1 * v2 - h2 * h2 * v1) / (h1 * h1 - h2 * h2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_basis;
    use crate::lattice::Lattice;

    #[test]
    fn quadratic_toy_recovers_l_exactly() {
        let l0 = Matrix3::new(2.0, 0.3, -0.1, 0.3, 1.5, 0.2, -0.1, 0.2, 3.0);
        let sampler = |q: Vector3<f64>| -> Result<Vec<C64>> {
            Ok(vec![C64::new(
                -(q.transpose() * l0 * q)[0] / (4.0 * PI),
                0.0,
            )])
        };
        let fit = fit_head_expansion(sampler, 1e-3, &extraction_directions()).unwrap();
        assert!((fit.l - l0).norm() < 1e-10);
        assert!(fit.head_residual < 1e-10);
    }

    #[test]
    fn wing_toy_converges_quadratically() {
        let b0 = Vector3::new(C64::new(0.5, -0.2), C64::new(0.1, 0.3), C64::new(-0.4, 0.0));
        let sampler = |q: Vector3<f64>| -> Result<Vec<C64>> {
            let lin: C64 = (0..3).map(|k| b0[k] * q[k]).sum();
            let cubic = C64::new(0.7 * q[0].powi(3) + 0.2 * q[1] * q[2] * q[2], 0.0);
            Ok(vec![
                C64::new(-q.norm_squared(), 0.0),
                lin + q.norm_squared() + cubic,
            ])
        };
        let dirs = extraction_directions();
        let e1 = (fit_head_expansion(&sampler, 0.1, &dirs).unwrap().big_b[1] - b0).norm();
        let e2 = (fit_head_expansion(&sampler, 0.05, &dirs).unwrap().big_b[1] - b0).norm();
        assert!(e1 > 0.0);
        assert!((e1 / e2 - 4.0).abs() < 0.05, "ratio {}", e1 / e2);
    }

    #[test]
    fn no_wings_gives_identity_plus_l() {
        let l = Matrix3::new(1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0);
        let body = Mat::from_fn(2, 2, |i, j| {
            if i == j {
                C64::new(1.0, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let (eps, b) = macroscopic_dielectric(&l, &vec![Vector3::zeros(); 3], &body).unwrap();
        assert!((eps - (Matrix3::identity() + l)).norm() < 1e-15);
        assert!(b.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn unscreened_born_charges_are_bare() {
        let lat = Lattice::cubic(4.0).unwrap();
        let c = Crystal::new(
            lat.clone(),
            vec![crate::crystal::Atom {
                frac: Vector3::new(0.1, 0.2, 0.3),
                charge: 3,
            }],
            1.0,
        )
        .unwrap();
        let basis = build_basis(&lat, 3.0);
        let z = born_charges(&c, &basis, &vec![Vector3::zeros(); basis.len()]).unwrap();
        assert_eq!(z[0], Matrix3::identity() * 3.0);
    }

    #[test]
    fn richardson_removes_quadratic_term() {
        let hs = [0.1, 0.05];
        let vals: Vec<f64> = hs.iter().map(|h| 0.25 + 3.0 * h * h).collect();
        assert!((extrapolate_head_limit(&hs, &vals) - 0.25).abs() < 1e-14);
    }
}
