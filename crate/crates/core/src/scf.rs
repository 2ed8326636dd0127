use std::collections::VecDeque;

use log::{debug, info};
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::basis::PlaneWaveBasis;
use crate::crystal::{nuclear_coefficients, Crystal};
use crate::error::{Error, Result};
use crate::hamiltonian::{
    band_edges, density_coefficients, dos_fermi, fermi_level, occupations, solve_spectrum,
    BlochSpectrum,
};
use crate::kgrid::KGrid;
use crate::C64;

/// Width added (in quadrature) to the nuclear Gaussians to build the
/// neutral-atom electron guess.
const GUESS_EXTRA_WIDTH: f64 = 1.0;

/// Mixing parameters for the potential fixed-point iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScfSettings {
    /// Damping `α ∈ (0,1]`.
    #[serde(default = "default_mixing")]
    pub mixing: f64,
    /// Tolerance on `‖V_out − V_in‖₂` over the coefficient vector.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Anderson history depth; 0 gives plain damped mixing.
    #[serde(default = "default_history")]
    pub history: usize,
    /// For `T = 0` runs: converge first at this temperature and restart the
    /// zero-temperature iteration from that potential.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start_temperature: Option<f64>,
}

fn default_mixing() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    1e-9
}
fn default_max_iter() -> usize {
    100
}
fn default_history() -> usize {
    4
}

impl Default for ScfSettings {
    fn default() -> Self {
        Self {
            mixing: default_mixing(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            history: default_history(),
            warm_start_temperature: None,
        }
    }
}

impl ScfSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.mixing > 0.0 && self.mixing <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "mixing must lie in (0,1], got {}",
                self.mixing
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be >= 1".into()));
        }
        if let Some(t) = self.warm_start_temperature {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "warm_start_temperature must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }
}

/// Self-consistent (or prescribed) periodic ground state.
#[derive(Clone, Debug)]
pub struct GroundState {
    pub crystal: Crystal,
    /// Basis for potentials, densities and response matrices.
    pub basis: PlaneWaveBasis,
    pub temperature: f64,
    /// Coefficients `c_G(V)` on `basis`, with `c_0 = 0`.
    pub potential: Vec<C64>,
    pub spectrum: BlochSpectrum,
    pub mu: f64,
    pub occupations: Vec<Vec<f64>>,
    /// `‖V_out − V_in‖₂` per iteration; empty for a prescribed potential.
    pub trace: Vec<f64>,
    pub prescribed: bool,
}

impl GroundState {
    pub fn n_electrons(&self) -> usize {
        self.crystal.n_electrons()
    }

    pub fn n_bands(&self) -> usize {
        self.spectrum.fibers[0].n_bands()
    }

    pub fn grid(&self) -> &KGrid {
        &self.spectrum.grid
    }

    /// Density of states at the Fermi level (per cell).
    pub fn dos(&self) -> f64 {
        dos_fermi(&self.spectrum.energies(), self.temperature, self.mu)
    }

    /// Band gap above band `N_el` (negative when bands overlap).
    pub fn gap(&self) -> Option<f64> {
        band_edges(&self.spectrum.energies(), self.n_electrons())
            .ok()
            .map(|(homo, lumo)| lumo - homo)
    }

    /// Diagonalize the same Hamiltonian on another k-grid.
    pub fn spectrum_on(&self, grid: &KGrid) -> Result<BlochSpectrum> {
        if grid == &self.spectrum.grid {
            return Ok(self.spectrum.clone());
        }
        solve_spectrum(&self.basis, &self.potential, grid, self.n_bands())
    }
}

/// `c_G(V) = 4π c_G(ρ_tot)/|G|²` for `G ≠ 0` and `c_0(V) = 0`.
///
/// The total charge must be neutral: `|c_0(ρ_tot)|√|Ω| ≤ 1e-8`.
pub fn poisson_coefficients(rho_tot: &[C64], basis: &PlaneWaveBasis) -> Result<Vec<C64>> {
    let defect = rho_tot[0].norm() * basis.lattice.cell_volume.sqrt();
    if defect > 1e-8 {
        return Err(Error::NotNeutral { defect });
    }
    Ok(rho_tot
        .iter()
        .zip(basis.gvectors())
        .enumerate()
        .map(|(i, (r, g))| {
            if i == 0 {
                C64::new(0.0, 0.0)
            } else {
                r * (4.0 * std::f64::consts::PI / g.norm_squared())
            }
        })
        .collect())
}

/// Electron potential energy generated by a total electron-minus-nuclear
/// charge: `−ΔV = 4π(ρ_el − ρ_nuc)`.
fn electrostatic_potential(
    rho_el: &[C64],
    rho_nuc: &[C64],
    basis: &PlaneWaveBasis,
) -> Result<Vec<C64>> {
    let rho_tot: Vec<C64> = rho_el.iter().zip(rho_nuc).map(|(e, n)| e - n).collect();
    poisson_coefficients(&rho_tot, basis)
}

/// Neutral starting potential: every nucleus screened by a wider Gaussian
/// cloud of `Z_s` electrons.
pub fn initial_potential(crystal: &Crystal, basis: &PlaneWaveBasis) -> Result<Vec<C64>> {
    let rho_nuc = nuclear_coefficients(crystal, basis);
    let wide = Crystal {
        sigma: (crystal.sigma * crystal.sigma + GUESS_EXTRA_WIDTH).sqrt(),
        ..crystal.clone()
    };
    let rho_guess = nuclear_coefficients(&wide, basis);
    electrostatic_potential(&rho_guess, &rho_nuc, basis)
}

/// Prescribed separable potential `V(x) = 2v Σ_i cos(b_i·x)`.
pub fn cosine_potential(basis: &PlaneWaveBasis, amplitude: f64) -> Vec<C64> {
    let scale = amplitude * basis.lattice.cell_volume.sqrt();
    basis
        .millers()
        .iter()
        .map(|m| {
            let ones = m.iter().filter(|x| x.abs() == 1).count();
            let zeros = m.iter().filter(|x| **x == 0).count();
            if ones == 1 && zeros == 2 {
                C64::new(scale, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect()
}

/// Ground state for a fixed potential (no self-consistency).
pub fn ground_state_from_potential(
    crystal: &Crystal,
    basis: &PlaneWaveBasis,
    grid: &KGrid,
    temperature: f64,
    n_bands: usize,
    potential: Vec<C64>,
) -> Result<GroundState> {
    if potential.len() != basis.len() {
        return Err(Error::InvalidInput("potential not indexed on basis".into()));
    }
    let mut potential = potential;
    potential[0] = C64::new(0.0, 0.0);
    let spectrum = solve_spectrum(basis, &potential, grid, n_bands)?;
    let energies = spectrum.energies();
    let n_el = crystal.n_electrons();
    let mu = fermi_level(&energies, temperature, n_el)?;
    let occ = occupations(&energies, mu, temperature, n_el);
    Ok(GroundState {
        crystal: crystal.clone(),
        basis: basis.clone(),
        temperature,
        potential,
        spectrum,
        mu,
        occupations: occ,
        trace: Vec::new(),
        prescribed: true,
    })
}

/// Self-consistent solution starting from the neutral-atom guess, with an
/// optional finite-temperature warm start for `T = 0` runs.
pub fn scf_solve(
    crystal: &Crystal,
    basis: &PlaneWaveBasis,
    grid: &KGrid,
    temperature: f64,
    n_bands: usize,
    settings: &ScfSettings,
) -> Result<GroundState> {
    let mut v0 = initial_potential(crystal, basis)?;
    if let (Some(tw), true) = (settings.warm_start_temperature, temperature <= 0.0) {
        let warm = scf_solve_from(crystal, basis, grid, tw, n_bands, settings, v0)?;
        info!(
            "warm start at T = {tw} converged in {} iterations",
            warm.trace.len()
        );
        v0 = warm.potential;
    }
    scf_solve_from(crystal, basis, grid, temperature, n_bands, settings, v0)
}

/// Self-consistent solution of `V = Poisson(ρ[V] − ρ_nuc)` from a given
/// starting potential.
pub fn scf_solve_from(
    crystal: &Crystal,
    basis: &PlaneWaveBasis,
    grid: &KGrid,
    temperature: f64,
    n_bands: usize,
    settings: &ScfSettings,
    initial: Vec<C64>,
) -> Result<GroundState> {
    settings.validate()?;
    if initial.len() != basis.len() {
        return Err(Error::InvalidInput(
            "initial potential not indexed on basis".into(),
        ));
    }
    let n_el = crystal.n_electrons();
    let rho_nuc = nuclear_coefficients(crystal, basis);
    let mut mixer = Anderson::new(settings.history, settings.mixing);
    let mut v_in = initial;
    v_in[0] = C64::new(0.0, 0.0);
    let mut trace = Vec::new();

    for iteration in 1..=settings.max_iter {
        let abort = |e: Error| Error::ScfAborted {
            iteration,
            source: Box::new(e),
        };
        let spectrum = solve_spectrum(basis, &v_in, grid, n_bands).map_err(abort)?;
        let energies = spectrum.energies();
        let mu = fermi_level(&energies, temperature, n_el).map_err(abort)?;
        let occ = occupations(&energies, mu, temperature, n_el);
        let rho_el = density_coefficients(&spectrum, &occ, basis);
        let v_out = electrostatic_potential(&rho_el, &rho_nuc, basis).map_err(abort)?;
        let residual: Vec<C64> = v_out.iter().zip(&v_in).map(|(o, i)| o - i).collect();
        let norm = residual.iter().map(|r| r.norm_sqr()).sum::<f64>().sqrt();
        trace.push(norm);
        debug!("scf iteration {iteration}: residual {norm:.3e}, mu {mu:.8}");
        if norm <= settings.tol {
            info!("scf converged in {iteration} iterations (residual {norm:.3e})");
            return Ok(GroundState {
                crystal: crystal.clone(),
                basis: basis.clone(),
                temperature,
                potential: v_in,
                spectrum,
                mu,
                occupations: occ,
                trace,
                prescribed: false,
            });
        }
        v_in = mixer.step(&v_in, &residual);
        v_in[0] = C64::new(0.0, 0.0);
    }
    Err(Error::ScfNotConverged {
        iterations: settings.max_iter,
        last: *trace.last().unwrap_or(&f64::NAN),
        trace,
    })
}

/// Anderson (Pulay) acceleration of damped mixing on a complex vector
/// viewed as a real vector; real combination coefficients preserve the
/// conjugate symmetry `c_{−G} = conj(c_G)` of real potentials.
struct Anderson {
    depth: usize,
    alpha: f64,
    xs: VecDeque<Vec<C64>>,
    fs: VecDeque<Vec<C64>>,
}

impl Anderson {
    fn new(depth: usize, alpha: f64) -> Self {
        Self {
            depth,
            alpha,
            xs: VecDeque::new(),
            fs: VecDeque::new(),
        }
    }

    fn step(&mut self, x: &[C64], f: &[C64]) -> Vec<C64> {
        let damped: Vec<C64> = x.iter().zip(f).map(|(x, f)| x + f * self.alpha).collect();
        if self.depth == 0 {
            return damped;
        }
        self.xs.push_back(x.to_vec());
        self.fs.push_back(f.to_vec());
        while self.xs.len() > self.depth + 1 {
            self.xs.pop_front();
            self.fs.pop_front();
        }
        let m = self.xs.len() - 1;
        if m == 0 {
            return damped;
        }
        let n = x.len();
        let mut df = DMatrix::<f64>::zeros(2 * n, m);
        for j in 0..m {
            for i in 0..n {
                let d = self.fs[j + 1][i] - self.fs[j][i];
                df[(2 * i, j)] = d.re;
                df[(2 * i + 1, j)] = d.im;
            }
        }
        let rhs = DVector::from_iterator(2 * n, f.iter().flat_map(|c| [c.re, c.im]));
        let gamma = match df.svd(true, true).solve(&rhs, 1e-12) {
            Ok(g) => g,
            Err(_) => return damped,
        };
        let mut out = damped;
        for j in 0..m {
            let g = gamma[j];
            for i in 0..n {
                let dx = self.xs[j + 1][i] - self.xs[j][i];
                let dfi = self.fs[j + 1][i] - self.fs[j][i];
                out[i] -= (dx + dfi * self.alpha) * g;
            }
        }
        out
    }
}

/// Forces `F_{sα} = (Z_s/√|Ω|) Re Σ_{G≠0} c_G(V)(−iG_α) e^{−σ²|G|²/2} e^{iG·τ_s}`,
/// i.e. `∫ Z_s ∂_α m(x − τ_s) V(x) dx`.
pub fn reference_forces(gs: &GroundState) -> Vec<Vector3<f64>> {
    let crystal = &gs.crystal;
    let inv_sqrt_vol = 1.0 / crystal.lattice.cell_volume.sqrt();
    (0..crystal.n_atoms())
        .map(|s| {
            let mut f = Vector3::<f64>::zeros();
            for (i, (m, g)) in gs
                .basis
                .millers()
                .iter()
                .zip(gs.basis.gvectors())
                .enumerate()
                .skip(1)
            {
                let phase = crystal.structure_phase(s, *m).conj();
                let w = gs.potential[i] * phase * crystal.shape_factor(g.norm_squared());
                // Re[c (−i G_α)] = G_α Im c
                f += g * w.im;
            }
            f * (crystal.atoms[s].charge as f64 * inv_sqrt_vol)
        })
        .collect()
}
