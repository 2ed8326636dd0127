use faer::{Mat, Side};
use nalgebra::Vector3;
use rayon::prelude::*;

use crate::basis::{add3, sub3, PlaneWaveBasis};
use crate::error::{Error, Result};
use crate::kgrid::KGrid;
use crate::lattice::Lattice;
use crate::C64;

/// Occupations below this are treated as empty when selecting band pairs.
pub const OCCUPATION_EPS: f64 = 1e-13;

/// Diagonalized Bloch fiber `H_k = ½(-i∇+k)² + V`.
///
/// The fiber basis is the sphere `½|k+G|² ≤ Ecut` centred at `k`; the
/// coefficients are stored row-major, `coeffs[g * n_bands + n]` being the
/// component of `u_{nk}` on `e_G` for the `g`-th vector of `basis`.
#[derive(Clone, Debug)]
pub struct Fiber {
    /// Reciprocal fractional coordinates of `k`.
    pub k_frac: Vector3<f64>,
    pub basis: PlaneWaveBasis,
    pub energies: Vec<f64>,
    pub coeffs: Vec<C64>,
}

impl Fiber {
    pub fn n_bands(&self) -> usize {
        self.energies.len()
    }

    pub fn k(&self) -> Vector3<f64> {
        self.basis.k
    }

    #[inline]
    pub fn coeff(&self, g: usize, n: usize) -> C64 {
        self.coeffs[g * self.n_bands() + n]
    }

    /// Row `g` of the coefficient matrix (all bands).
    #[inline]
    pub fn row(&self, g: usize) -> &[C64] {
        let nb = self.n_bands();
        &self.coeffs[g * nb..(g + 1) * nb]
    }

    /// Mutable access used for gauge tests.
    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }
}

/// Spectra of every fiber of a k-grid, in the grid's flat order.
#[derive(Clone, Debug)]
pub struct BlochSpectrum {
    pub grid: KGrid,
    pub fibers: Vec<Fiber>,
}

impl BlochSpectrum {
    pub fn n_k(&self) -> usize {
        self.fibers.len()
    }

    pub fn energies(&self) -> Vec<Vec<f64>> {
        self.fibers.iter().map(|f| f.energies.clone()).collect()
    }

    /// Fiber containing `k_frac` modulo `𝕃*`, together with the integer
    /// triple `G0` such that `k = k_fiber + G0`.
    pub fn locate(&self, k_frac: &Vector3<f64>) -> Option<(&Fiber, [i32; 3])> {
        let (i, g0) = self.grid.locate_fractional(k_frac)?;
        Some((&self.fibers[i], g0))
    }
}

/// Fiber Hamiltonian at `k`: `[H_k]_{GG'} = ½|k+G|² δ_{GG'} + c_{G−G'}(V)/√|Ω|`
/// on the sphere centred at `k`. Potential components outside `basis` are
/// treated as zero.
pub fn assemble_fiber(
    basis: &PlaneWaveBasis,
    potential: &[C64],
    k: Vector3<f64>,
) -> (PlaneWaveBasis, Mat<C64>) {
    assemble_fiber_anchored(basis, potential, k, k)
}

/// [`assemble_fiber`] on the sphere around `anchor` instead of around `k`.
pub fn assemble_fiber_anchored(
    basis: &PlaneWaveBasis,
    potential: &[C64],
    k: Vector3<f64>,
    anchor: Vector3<f64>,
) -> (PlaneWaveBasis, Mat<C64>) {
    assert_eq!(
        potential.len(),
        basis.len(),
        "potential not indexed on basis"
    );
    let fiber = PlaneWaveBasis::anchored(&basis.lattice, basis.ecut, anchor, k);
    let inv_sqrt_vol = 1.0 / basis.lattice.cell_volume.sqrt();
    let kinetic = fiber.kinetic();
    let millers = fiber.millers();
    let h = Mat::<C64>::from_fn(fiber.len(), fiber.len(), |i, j| {
        let mut v = match basis.lookup(sub3(millers[i], millers[j])) {
            Some(idx) => potential[idx] * inv_sqrt_vol,
            None => C64::new(0.0, 0.0),
        };
        if i == j {
            v += kinetic[i];
        }
        v
    });
    (fiber, h)
}

/// Lowest `n_bands` eigenpairs of a Hermitian fiber matrix, ascending.
///
/// Returns the eigenvalues and the row-major `n_G × n_bands` coefficients.
pub fn diagonalize_fiber(
    h: &Mat<C64>,
    n_bands: usize,
    k: Vector3<f64>,
) -> Result<(Vec<f64>, Vec<C64>)> {
    let n = h.nrows();
    if n_bands > n {
        return Err(Error::TooManyBands {
            requested: n_bands,
            available: n,
            k: [k[0], k[1], k[2]],
        });
    }
    let eig = h
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigensolver {
            k: [k[0], k[1], k[2]],
            message: format!("{e:?}"),
        })?;
    let s = eig.S().column_vector();
    let u = eig.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| s[a].re.total_cmp(&s[b].re));
    order.truncate(n_bands);
    let energies: Vec<f64> = order.iter().map(|&i| s[i].re).collect();
    let mut coeffs = Vec::with_capacity(n * n_bands);
    for g in 0..n {
        for &i in &order {
            coeffs.push(u[(g, i)]);
        }
    }
    Ok((energies, coeffs))
}

/// Assemble and diagonalize the fiber at reciprocal fractional `k_frac`.
pub fn solve_fiber(
    basis: &PlaneWaveBasis,
    potential: &[C64],
    k_frac: Vector3<f64>,
    n_bands: usize,
) -> Result<Fiber> {
    solve_fiber_anchored(basis, potential, k_frac, k_frac, n_bands)
}

/// [`solve_fiber`] with the plane-wave sphere centred on `anchor_frac`.
pub fn solve_fiber_anchored(
    basis: &PlaneWaveBasis,
    potential: &[C64],
    k_frac: Vector3<f64>,
    anchor_frac: Vector3<f64>,
    n_bands: usize,
) -> Result<Fiber> {
    let k = basis.lattice.reciprocal_from_fractional(&k_frac);
    let anchor = basis.lattice.reciprocal_from_fractional(&anchor_frac);
    let (fiber_basis, h) = assemble_fiber_anchored(basis, potential, k, anchor);
    let (energies, coeffs) = diagonalize_fiber(&h, n_bands, k)?;
    Ok(Fiber {
        k_frac,
        basis: fiber_basis,
        energies,
        coeffs,
    })
}

/// Diagonalize every fiber of `grid` in parallel; results are ordered by
/// the grid's flat index.
pub fn solve_spectrum(
    basis: &PlaneWaveBasis,
    potential: &[C64],
    grid: &KGrid,
    n_bands: usize,
) -> Result<BlochSpectrum> {
    let fibers = grid
        .fractional_points()
        .into_par_iter()
        .map(|kf| solve_fiber(basis, potential, kf, n_bands))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlochSpectrum {
        grid: grid.clone(),
        fibers,
    })
}

/// Spectra on `grid` with every sphere anchored at `k − offset`.
///
/// With `grid = K + q` and `offset = q` each fiber uses exactly the sphere
/// of its parent point in `K`, so the spectra vary smoothly with a small `q`.
pub fn solve_spectrum_anchored(
    basis: &PlaneWaveBasis,
    potential: &[C64],
    grid: &KGrid,
    offset: Vector3<f64>,
    n_bands: usize,
) -> Result<BlochSpectrum> {
    let fibers = grid
        .fractional_points()
        .into_par_iter()
        .map(|kf| solve_fiber_anchored(basis, potential, kf, kf - offset, n_bands))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlochSpectrum {
        grid: grid.clone(),
        fibers,
    })
}

/// Fermi–Dirac occupation `1/(1+e^{x/T})`; a step (½ at 0) when `T = 0`.
pub fn fermi_dirac(x: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return if x < 0.0 {
            1.0
        } else if x > 0.0 {
            0.0
        } else {
            0.5
        };
    }
    let y = x / t;
    if y > 0.0 {
        let e = (-y).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + y.exp())
    }
}

/// Derivative `f_T'(x) = -(1/T) f (1-f)`; identically zero at `T = 0`.
pub fn fermi_derivative(x: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let f = fermi_dirac(x, t);
    -f * (1.0 - f) / t
}

/// Highest occupied and lowest unoccupied band energies over the grid for
/// `n_el` electrons per cell.
pub fn band_edges(energies: &[Vec<f64>], n_el: usize) -> Result<(f64, f64)> {
    let mut homo = f64::NEG_INFINITY;
    let mut lumo = f64::INFINITY;
    for e in energies {
        if e.len() <= n_el || n_el == 0 {
            return Err(Error::InvalidInput(format!(
                "need more than N_el = {n_el} bands, have {}",
                e.len()
            )));
        }
        homo = homo.max(e[n_el - 1]);
        lumo = lumo.min(e[n_el]);
    }
    Ok((homo, lumo))
}

/// Fermi level solving `(1/n_k) Σ f_T(ε − μ) = N_el`.
///
/// At `T = 0` this is the midpoint of the gap above band `N_el`; gapless
/// inputs are rejected. At `T > 0` it is found by bisection, and the
/// highest computed band must stay empty.
pub fn fermi_level(energies: &[Vec<f64>], t: f64, n_el: usize) -> Result<f64> {
    if t <= 0.0 {
        let (homo, lumo) = band_edges(energies, n_el)?;
        if homo >= lumo {
            return Err(Error::NoGap { n_el, homo, lumo });
        }
        return Ok(0.5 * (homo + lumo));
    }
    let n_k = energies.len() as f64;
    let count = |mu: f64| -> f64 {
        energies
            .iter()
            .map(|e| e.iter().map(|&x| fermi_dirac(x - mu, t)).sum::<f64>())
            .sum::<f64>()
            / n_k
    };
    let all = energies.iter().flatten().copied();
    let (lo_e, hi_e) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
        (a.min(x), b.max(x))
    });
    let mut lo = lo_e - 60.0 * t;
    let mut hi = hi_e + 60.0 * t;
    let target = n_el as f64;
    if count(hi) < target - 1e-12 {
        let top = energies
            .iter()
            .map(|e| *e.last().unwrap())
            .fold(f64::INFINITY, f64::min);
        return Err(Error::TopBandOccupied {
            occupation: fermi_dirac(top - hi, t),
        });
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if count(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
            break;
        }
    }
    let mu = 0.5 * (lo + hi);
    let top = energies
        .iter()
        .map(|e| fermi_dirac(*e.last().unwrap() - mu, t))
        .fold(0.0, f64::max);
    if top >= 1e-12 {
        return Err(Error::TopBandOccupied { occupation: top });
    }
    Ok(mu)
}

/// Occupations `f_{nk}`; at `T = 0` the lowest `N_el` bands are filled.
pub fn occupations(energies: &[Vec<f64>], mu: f64, t: f64, n_el: usize) -> Vec<Vec<f64>> {
    energies
        .iter()
        .map(|e| {
            e.iter()
                .enumerate()
                .map(|(n, &x)| {
                    if t <= 0.0 {
                        if n < n_el {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        fermi_dirac(x - mu, t)
                    }
                })
                .collect()
        })
        .collect()
}

/// Density of states at the Fermi level per cell,
/// `DOS = -(1/n_k) Σ f_T'(ε − μ)`; exactly zero at `T = 0`.
pub fn dos_fermi(energies: &[Vec<f64>], t: f64, mu: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let n_k = energies.len() as f64;
    -energies
        .iter()
        .map(|e| e.iter().map(|&x| fermi_derivative(x - mu, t)).sum::<f64>())
        .sum::<f64>()
        / n_k
}

/// Density coefficients
/// `c_G(ρ) = (1/(n_k√|Ω|)) Σ_k Σ_n f_{nk} Σ_{G'} conj(C_k[G',n]) C_k[G'+G,n]`.
pub fn density_coefficients(
    spectrum: &BlochSpectrum,
    occ: &[Vec<f64>],
    basis: &PlaneWaveBasis,
) -> Vec<C64> {
    let n_k = spectrum.n_k();
    let scale = 1.0 / (n_k as f64 * basis.lattice.cell_volume.sqrt());
    let partials: Vec<Vec<C64>> = spectrum
        .fibers
        .par_iter()
        .zip(occ.par_iter())
        .map(|(fiber, f)| fiber_density(fiber, f, basis))
        .collect();
    let mut rho = vec![C64::new(0.0, 0.0); basis.len()];
    for p in &partials {
        for (r, x) in rho.iter_mut().zip(p) {
            *r += x;
        }
    }
    rho.iter_mut().for_each(|r| *r *= scale);
    rho
}

fn fiber_density(fiber: &Fiber, occ: &[f64], basis: &PlaneWaveBasis) -> Vec<C64> {
    let bands: Vec<usize> = (0..fiber.n_bands())
        .filter(|&n| occ[n] > OCCUPATION_EPS)
        .collect();
    let fb = &fiber.basis;
    let mut out = vec![C64::new(0.0, 0.0); basis.len()];
    for (gi, g) in basis.millers().iter().enumerate() {
        let mut acc = C64::new(0.0, 0.0);
        for (a, ga) in fb.millers().iter().enumerate() {
            if let Some(b) = fb.lookup(add3(*ga, *g)) {
                let ra = fiber.row(a);
                let rb = fiber.row(b);
                for &n in &bands {
                    acc += ra[n].conj() * rb[n] * occ[n];
                }
            }
        }
        out[gi] = acc;
    }
    out
}

/// Fractional coordinates of `k` for CSV/JSON output.
pub fn fractional_of(lattice: &Lattice, k: &Vector3<f64>) -> [f64; 3] {
    let f = lattice.reciprocal_fractional(k);
    [f[0], f[1], f[2]]
}
