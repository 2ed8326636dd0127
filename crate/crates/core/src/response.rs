use std::f64::consts::PI;

use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, Side};
use log::{debug, warn};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::basis::{add3, PlaneWaveBasis};
use crate::error::{Error, Result};
use crate::hamiltonian::{fermi_derivative, fermi_dirac, BlochSpectrum, Fiber, OCCUPATION_EPS};
use crate::scf::GroundState;
use crate::C64;

/// Energy separation below which the divided difference of the occupation
/// function is replaced by its derivative.
pub const DEGENERACY_TOL: f64 = 1e-8;

/// Minimal global gap at which the sum over states may be truncated.
pub const BAND_CUT_GAP: f64 = 1e-3;

/// Coupling threshold above which the highest summed band triggers a
/// truncation warning.
pub const TRUNCATION_WARN: f64 = 1e-6;

/// Which periodic operator a [`BlochMatrix`] represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlochKind {
    Chi0,
    Epsilon,
    W,
    Vc,
}

impl BlochKind {
    pub fn code(self) -> u32 {
        match self {
            BlochKind::Chi0 => 0,
            BlochKind::Epsilon => 1,
            BlochKind::W => 2,
            BlochKind::Vc => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(BlochKind::Chi0),
            1 => Some(BlochKind::Epsilon),
            2 => Some(BlochKind::W),
            3 => Some(BlochKind::Vc),
            _ => None,
        }
    }
}

/// Dense block `[A]_{GG'}(q) = ⟨e_G, A_q e_{G'}⟩` on the response basis.
#[derive(Clone, Debug)]
pub struct BlochMatrix {
    /// Reciprocal fractional coordinates of `q`.
    pub q_frac: Vector3<f64>,
    /// Cartesian `q`.
    pub q: Vector3<f64>,
    pub kind: BlochKind,
    pub data: Mat<C64>,
    /// `max |A − A†|` of the assembled block before it was symmetrized.
    pub raw_hermiticity: f64,
}

impl BlochMatrix {
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    /// `max |A − A†|`.
    pub fn hermiticity_residual(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..=i {
                worst = worst.max((self.data[(i, j)] - self.data[(j, i)].conj()).norm());
            }
        }
        worst
    }
}

/// `true` when some `q + G` with `G` in the basis vanishes.
fn hits_reciprocal_lattice(q_frac: &Vector3<f64>) -> bool {
    q_frac.iter().all(|x| (x - x.round()).abs() < 1e-12)
}

/// Replace `A` by `(A + A†)/2`; returns `max |A − A†|` before the update.
pub(crate) fn hermitize(a: &mut Mat<C64>) -> f64 {
    let n = a.nrows();
    let mut residual = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            residual = residual.max((a[(i, j)] - a[(j, i)].conj()).norm());
            let avg = (a[(i, j)] + a[(j, i)].conj()) * 0.5;
            a[(i, j)] = avg;
            a[(j, i)] = avg.conj();
        }
        residual = residual.max(2.0 * a[(i, i)].im.abs());
        a[(i, i)] = C64::new(a[(i, i)].re, 0.0);
    }
    residual
}

/// Divided difference `(f(a−μ) − f(b−μ))/(a−b)` with the derivative at the
/// midpoint for (near-)degenerate arguments.
pub fn occupation_weight(a: f64, fa: f64, b: f64, fb: f64, mu: f64, t: f64) -> f64 {
    let d = a - b;
    if d.abs() < DEGENERACY_TOL {
        fermi_derivative(0.5 * (a + b) - mu, t)
    } else {
        (fa - fb) / d
    }
}

/// Occupations of a partner spectrum at the ground-state Fermi level.
fn partner_occupations(gs: &GroundState, spectrum: &BlochSpectrum) -> Result<Vec<Vec<f64>>> {
    let n_el = gs.n_electrons();
    let t = gs.temperature;
    spectrum
        .fibers
        .iter()
        .map(|f| {
            if t <= 0.0 {
                let homo = f.energies[n_el - 1];
                let lumo = f.energies[n_el];
                if !(homo < gs.mu && gs.mu < lumo) {
                    return Err(Error::NoGap { n_el, homo, lumo });
                }
                Ok((0..f.n_bands())
                    .map(|n| if n < n_el { 1.0 } else { 0.0 })
                    .collect())
            } else {
                Ok(f.energies
                    .iter()
                    .map(|&e| fermi_dirac(e - gs.mu, t))
                    .collect())
            }
        })
        .collect()
}

/// Independent-particle susceptibility at `q` (fractional), reusing the
/// ground-state spectra; `q` must map the k-grid onto itself.
pub fn chi0_block(
    gs: &GroundState,
    q_frac: Vector3<f64>,
    n_bands_sum: usize,
) -> Result<BlochMatrix> {
    let grid = gs.grid();
    if grid.offset_by(&q_frac) != *grid
        && grid
            .locate_fractional(&(grid.fractional_points()[0] + q_frac))
            .is_none()
    {
        return Err(Error::Incommensurate {
            q: [q_frac[0], q_frac[1], q_frac[2]],
        });
    }
    chi0_block_with(gs, &gs.spectrum, q_frac, n_bands_sum)
}

/// Adler–Wiser susceptibility
/// `[χ₀]_{GG'}(q) = (1/n_k) Σ_k Σ_{nm} w(ε_{n,k+q}, ε_{mk}) O_{nm}(G) conj(O_{nm}(G'))`
/// with `O_{nm}(G) = ⟨e_G u_{mk}, u_{n,k+q}⟩`, using `partner` for the
/// spectra at `k + q`.
pub fn chi0_block_with(
    gs: &GroundState,
    partner: &BlochSpectrum,
    q_frac: Vector3<f64>,
    n_bands_sum: usize,
) -> Result<BlochMatrix> {
    let nb = n_bands_sum;
    if nb == 0 || nb > gs.n_bands() || nb > partner.fibers[0].n_bands() {
        return Err(Error::InvalidInput(format!(
            "n_bands_sum = {nb} must lie in 1..={}",
            gs.n_bands()
        )));
    }
    if gs.temperature <= 0.0 && nb <= gs.n_electrons() {
        return Err(Error::InvalidInput(format!(
            "n_bands_sum = {nb} leaves no empty band above N_el = {}",
            gs.n_electrons()
        )));
    }
    let n_min = if gs.temperature <= 0.0 {
        gs.n_electrons() + 1
    } else {
        1
    };
    let cuts: Vec<usize> = gs
        .spectrum
        .fibers
        .iter()
        .map(|f| band_cut(f, n_min, nb))
        .collect();
    let occ_p = partner_occupations(gs, partner)?;
    let mut targets = Vec::with_capacity(gs.spectrum.n_k());
    for fk in &gs.spectrum.fibers {
        let p = fk.k_frac + q_frac;
        let (j, g0) = partner
            .grid
            .locate_fractional(&p)
            .ok_or(Error::Incommensurate {
                q: [q_frac[0], q_frac[1], q_frac[2]],
            })?;
        targets.push((j, g0));
    }
    let ctx = Chi0Context {
        basis: &gs.basis,
        mu: gs.mu,
        t: gs.temperature,
    };
    let n_k = gs.spectrum.n_k();
    let term = |i: usize| {
        let (j, g0) = targets[i];
        ctx.fiber_term(
            &gs.spectrum.fibers[i],
            &gs.occupations[i],
            &partner.fibers[j],
            &occ_p[j],
            g0,
            cuts[i],
        )
    };
    let (mut data, tail) = tree_reduce(0, n_k, &term);
    if tail > TRUNCATION_WARN {
        static FIRST: std::sync::Once = std::sync::Once::new();
        let mut first = false;
        FIRST.call_once(|| first = true);
        let msg = format!(
            "band truncation: top summed band couples with weight {tail:.2e} at q = {:?}; raise n_bands_sum",
            q_frac.as_slice()
        );
        if first {
            warn!("{msg} (further occurrences are logged at debug level)");
        } else {
            debug!("{msg}");
        }
    }
    let scale = 1.0 / n_k as f64;
    for j in 0..data.ncols() {
        for i in 0..data.nrows() {
            data[(i, j)] *= scale;
        }
    }
    let raw_hermiticity = hermitize(&mut data);
    Ok(BlochMatrix {
        q_frac,
        q: gs.basis.lattice.reciprocal_from_fractional(&q_frac),
        kind: BlochKind::Chi0,
        data,
        raw_hermiticity,
    })
}

/// Number of bands summed at one k-point: the largest `n` in
/// `n_min..=n_max` with a gap above band `n` on this fiber.
///
/// Truncating the sum over states inside a (near-)degenerate cluster makes
/// the result depend on the arbitrary basis chosen within the cluster and
/// breaks the smoothness of `χ₀` in `q`. The same count is used for the
/// partner fiber at `k + q`, whose spectrum differs by `O(q)`, so the summed
/// subspaces stay spectral projectors for small `q`. A fiber whose bands
/// are all computed is complete and is never cut. Falls back to `n_max`
/// when no gap can be verified.
pub fn band_cut(fiber: &Fiber, n_min: usize, n_max: usize) -> usize {
    if n_max >= fiber.basis.len() {
        return n_max;
    }
    let e = &fiber.energies;
    (n_min.max(1)..=n_max)
        .rev()
        .find(|&n| n < e.len() && e[n] - e[n - 1] > BAND_CUT_GAP)
        .unwrap_or(n_max)
}

/// Pairwise reduction with a topology fixed by the range only, so the
/// summation order does not depend on thread scheduling.
fn tree_reduce<F>(lo: usize, hi: usize, term: &F) -> (Mat<C64>, f64)
where
    F: Fn(usize) -> (Mat<C64>, f64) + Sync,
{
    if hi - lo == 1 {
        return term(lo);
    }
    let mid = lo + (hi - lo) / 2;
    let ((mut a, ta), (b, tb)) =
        rayon::join(|| tree_reduce(lo, mid, term), || tree_reduce(mid, hi, term));
    a += &b;
    (a, ta.max(tb))
}

struct Chi0Context<'a> {
    basis: &'a PlaneWaveBasis,
    mu: f64,
    t: f64,
}

impl Chi0Context<'_> {
    /// Unscaled contribution `−Σ |w| O O†` of one k-point, and the largest
    /// coupling of the highest summed band.
    fn fiber_term(
        &self,
        fk: &Fiber,
        occ_k: &[f64],
        fp: &Fiber,
        occ_p: &[f64],
        g0: [i32; 3],
        nb: usize,
    ) -> (Mat<C64>, f64) {
        let n_g = self.basis.len();
        let full = 1.0 - OCCUPATION_EPS;

        // Band pairs (m at k, n at k+q) with a nonzero occupation difference.
        let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
        for m in 0..nb {
            for n in 0..nb {
                let (fm, fn_) = (occ_k[m], occ_p[n]);
                let both_empty = fm <= OCCUPATION_EPS && fn_ <= OCCUPATION_EPS;
                let both_full = fm >= full && fn_ >= full;
                if both_empty || both_full {
                    continue;
                }
                let w = occupation_weight(fp.energies[n], fn_, fk.energies[m], fm, self.mu, self.t);
                if w != 0.0 {
                    pairs.push((m, n, w));
                }
            }
        }
        let mut out = Mat::<C64>::zeros(n_g, n_g);
        if pairs.is_empty() {
            return (out, 0.0);
        }

        // Shifted overlaps O(G, pair) = |Ω|^{-1/2} Σ_{G''} conj(C_k[G'',m]) C_{k+q}[G''+G, n];
        // the partner fiber stores k+q − G0, hence the extra G0.
        let inv_sqrt_vol = 1.0 / self.basis.lattice.cell_volume.sqrt();
        let mut overlaps = Mat::<C64>::zeros(n_g, pairs.len());
        let g_millers = self.basis.millers();
        let mut conj_row = vec![C64::new(0.0, 0.0); nb];
        for (a, ga) in fk.basis.millers().iter().enumerate() {
            let row_k = fk.row(a);
            for m in 0..nb {
                conj_row[m] = row_k[m].conj();
            }
            let base = add3(*ga, g0);
            for (g, gm) in g_millers.iter().enumerate() {
                if let Some(b) = fp.basis.lookup(add3(base, *gm)) {
                    let row_p = fp.row(b);
                    for (col, &(m, n, _)) in pairs.iter().enumerate() {
                        overlaps[(g, col)] += conj_row[m] * row_p[n];
                    }
                }
            }
        }

        let mut tail = 0.0f64;
        for (col, &(m, n, w)) in pairs.iter().enumerate() {
            let s = w.abs().sqrt() * inv_sqrt_vol;
            let mut weight2 = 0.0;
            for g in 0..n_g {
                overlaps[(g, col)] *= s;
                weight2 += overlaps[(g, col)].norm_sqr();
            }
            if m == nb - 1 || n == nb - 1 {
                tail = tail.max(weight2);
            }
        }
        // w ≤ 0 for a decreasing occupation function, so χ₀ = −A A†.
        let prod = &overlaps * overlaps.adjoint();
        out -= &prod;
        (out, tail)
    }
}

/// Bare Coulomb block `δ_{GG'} 4π/|q+G|²`.
pub fn coulomb_block(basis: &PlaneWaveBasis, q_frac: Vector3<f64>) -> Result<BlochMatrix> {
    if hits_reciprocal_lattice(&q_frac) {
        return Err(Error::OnReciprocalLattice {
            q: [q_frac[0], q_frac[1], q_frac[2]],
        });
    }
    let q = basis.lattice.reciprocal_from_fractional(&q_frac);
    let diag: Vec<f64> = basis
        .gvectors()
        .iter()
        .map(|g| 4.0 * PI / (q + g).norm_squared())
        .collect();
    Ok(BlochMatrix {
        q_frac,
        q,
        kind: BlochKind::Vc,
        raw_hermiticity: 0.0,
        data: Mat::from_fn(basis.len(), basis.len(), |i, j| {
            if i == j {
                C64::new(diag[i], 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        }),
    })
}

/// Dielectric block `ε = I − diag(4π/|q+G|²) χ₀`.
pub fn dielectric_block(chi0: &BlochMatrix, basis: &PlaneWaveBasis) -> Result<BlochMatrix> {
    if hits_reciprocal_lattice(&chi0.q_frac) {
        return Err(Error::OnReciprocalLattice {
            q: [chi0.q_frac[0], chi0.q_frac[1], chi0.q_frac[2]],
        });
    }
    let vc: Vec<f64> = basis
        .gvectors()
        .iter()
        .map(|g| 4.0 * PI / (chi0.q + g).norm_squared())
        .collect();
    let n = basis.len();
    let data = Mat::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        C64::new(delta, 0.0) - chi0.data[(i, j)] * vc[i]
    });
    Ok(BlochMatrix {
        q_frac: chi0.q_frac,
        q: chi0.q,
        kind: BlochKind::Epsilon,
        data,
        raw_hermiticity: 0.0,
    })
}

/// Inverse of a Hermitian positive-definite matrix via Cholesky.
pub(crate) fn hpd_inverse(a: &Mat<C64>, what: &str) -> Result<Mat<C64>> {
    let llt = a
        .llt(Side::Lower)
        .map_err(|e| Error::Singular(format!("{what} is not positive definite ({e:?})")))?;
    let mut inv = llt.inverse();
    hermitize(&mut inv);
    Ok(inv)
}

/// Screened Coulomb block `W = (−χ₀ + v_c⁻¹)⁻¹`.
///
/// Away from `𝕃*` the symmetrized form
/// `v^{1/2}(I − v^{1/2} χ₀ v^{1/2})⁻¹ v^{1/2}` is used; on `𝕃*` (finite
/// temperature only) the head of `v_c⁻¹` vanishes and the direct form is
/// inverted. A failed Cholesky factorization signals a gap/DOS
/// inconsistency.
pub fn screened_coulomb_block(chi0: &BlochMatrix, basis: &PlaneWaveBasis) -> Result<BlochMatrix> {
    let n = basis.len();
    let qg2: Vec<f64> = basis
        .gvectors()
        .iter()
        .map(|g| (chi0.q + g).norm_squared())
        .collect();
    let mut raw_hermiticity = 0.0;
    let data = if hits_reciprocal_lattice(&chi0.q_frac) {
        let m = Mat::from_fn(n, n, |i, j| {
            let vinv = if i == j { qg2[i] / (4.0 * PI) } else { 0.0 };
            C64::new(vinv, 0.0) - chi0.data[(i, j)]
        });
        hpd_inverse(&m, "−χ₀ + v_c⁻¹ at q ∈ 𝕃*")?
    } else {
        let sq: Vec<f64> = qg2.iter().map(|x| (4.0 * PI / x).sqrt()).collect();
        let m = Mat::from_fn(n, n, |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            C64::new(delta, 0.0) - chi0.data[(i, j)] * (sq[i] * sq[j])
        });
        let inv = hpd_inverse(&m, "I − v^{1/2} χ₀ v^{1/2}")?;
        let mut w = Mat::from_fn(n, n, |i, j| inv[(i, j)] * (sq[i] * sq[j]));
        raw_hermiticity = hermitize(&mut w);
        w
    };
    Ok(BlochMatrix {
        q_frac: chi0.q_frac,
        q: chi0.q,
        kind: BlochKind::W,
        data,
        raw_hermiticity,
    })
}

/// Smallest eigenvalue of the Hermitian matrix `−χ₀ + v_c⁻¹`, whose head
/// of `v_c⁻¹` vanishes on `𝕃*`.
pub fn screening_operator_min_eigenvalue(
    chi0: &BlochMatrix,
    basis: &PlaneWaveBasis,
) -> Result<f64> {
    let n = basis.len();
    let m = Mat::from_fn(n, n, |i, j| {
        let vinv = if i == j {
            (chi0.q + basis.gvectors()[i]).norm_squared() / (4.0 * PI)
        } else {
            0.0
        };
        C64::new(vinv, 0.0) - chi0.data[(i, j)]
    });
    let eig = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Singular(format!("eigensolver failed: {e:?}")))?;
    let s = eig.S().column_vector();
    Ok((0..n).map(|i| s[i].re).fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::build_basis;
    use crate::lattice::Lattice;

    fn vacuum(basis: &PlaneWaveBasis, q_frac: Vector3<f64>) -> BlochMatrix {
        BlochMatrix {
            q_frac,
            q: basis.lattice.reciprocal_from_fractional(&q_frac),
            kind: BlochKind::Chi0,
            data: Mat::zeros(basis.len(), basis.len()),
            raw_hermiticity: 0.0,
        }
    }

    #[test]
    fn vacuum_dielectric_is_identity() {
        let b = build_basis(&Lattice::cubic(5.0).unwrap(), 3.0);
        let eps = dielectric_block(&vacuum(&b, Vector3::new(0.1, 0.0, 0.0)), &b).unwrap();
        for i in 0..b.len() {
            for j in 0..b.len() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((eps.data[(i, j)] - C64::new(e, 0.0)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn vacuum_screened_coulomb_is_bare() {
        let b = build_basis(&Lattice::cubic(5.0).unwrap(), 3.0);
        let q = Vector3::new(0.1, -0.2, 0.05);
        let w = screened_coulomb_block(&vacuum(&b, q), &b).unwrap();
        let vc = coulomb_block(&b, q).unwrap();
        for i in 0..b.len() {
            for j in 0..b.len() {
                assert!(
                    (w.data[(i, j)] - vc.data[(i, j)]).norm() < 1e-12 * vc.data[(i, i)].re.max(1.0)
                );
            }
        }
    }

    #[test]
    fn diagonal_toy_dielectric() {
        let b = build_basis(&Lattice::cubic(5.0).unwrap(), 2.0);
        let q = Vector3::new(0.25, 0.0, 0.0);
        let mut chi = vacuum(&b, q);
        let c = 0.3;
        for i in 0..b.len() {
            chi.data[(i, i)] = C64::new(-c, 0.0);
        }
        let eps = dielectric_block(&chi, &b).unwrap();
        for i in 0..b.len() {
            let qg2 = (chi.q + b.gvectors()[i]).norm_squared();
            assert!((eps.data[(i, i)].re - (1.0 + 4.0 * PI * c / qg2)).abs() < 1e-13);
        }
    }

    #[test]
    fn on_lattice_requires_positive_head() {
        let b = build_basis(&Lattice::cubic(5.0).unwrap(), 2.0);
        let chi = vacuum(&b, Vector3::zeros());
        assert!(matches!(
            screened_coulomb_block(&chi, &b),
            Err(Error::Singular(_))
        ));
        assert!(matches!(
            dielectric_block(&chi, &b),
            Err(Error::OnReciprocalLattice { .. })
        ));
    }

    #[test]
    fn degenerate_weight_uses_derivative() {
        let t = 0.1;
        let w = occupation_weight(
            0.2,
            fermi_dirac(0.2, t),
            0.2 + 1e-10,
            fermi_dirac(0.2 + 1e-10, t),
            0.0,
            t,
        );
        assert!((w - fermi_derivative(0.2, t)).abs() < 1e-9);
    }
}
