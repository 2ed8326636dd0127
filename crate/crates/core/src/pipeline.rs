//! File-based pipeline `scf → bands → chi0 → screen → ifc → fit-decay`,
//! plus parameter sweeps.
//!
//! Every stage reads only the configuration and the artifacts of its
//! declared upstream stages, and writes deterministic JSON/CSV/binary files
//! whose checksums are recorded in the output directory's manifest.

use log::info;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::artifacts::ArtifactStore;
use crate::basis::build_basis;
use crate::config::{PotentialSpec, RunConfig};
use crate::crystal::Crystal;
use crate::error::{Error, Result};
use crate::hamiltonian::band_edges;
use crate::ifc::{
    asymptotic_ratio, chi0_on_q_grid, dynamical_matrices, fit_exponential_decay,
    ifc_from_dynamical, plan_q_grid, DecayFit, ForceConstantTable, Shell, ShellRatio,
};
use crate::kgrid::KGrid;
use crate::response::BlochMatrix;
use crate::scf::{cosine_potential, ground_state_from_potential, scf_solve, GroundState};
use crate::screening::{
    extrapolate_head_limit, inverse_head_limit, screening_summary, ScreeningSummary,
};
use crate::C64;

pub const GROUND_STATE: &str = "ground_state.json";
pub const BANDS: &str = "bands.csv";
pub const CHI0_INDEX: &str = "chi0/index.json";
pub const CHI0_DIR: &str = "chi0/";
pub const SCREENING: &str = "screening.json";
pub const IFC_JSON: &str = "ifc.json";
pub const IFC_CSV: &str = "ifc.csv";
pub const DECAY_REPORT: &str = "decay_report.json";
pub const CONVERGENCE: &str = "convergence.csv";

/// Pipeline stages, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    Scf,
    Bands,
    Chi0,
    Screen,
    Ifc,
    FitDecay,
    Sweep,
}

impl Step {
    pub fn name(self) -> &'static str {
        match self {
            Step::Scf => "scf",
            Step::Bands => "bands",
            Step::Chi0 => "chi0",
            Step::Screen => "screen",
            Step::Ifc => "ifc",
            Step::FitDecay => "fit-decay",
            Step::Sweep => "sweep",
        }
    }
}

/// `ground_state.json`: the converged potential plus derived observables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroundStateArtifact {
    pub crystal: Crystal,
    #[serde(rename = "Ecut")]
    pub ecut: f64,
    pub kgrid: KGrid,
    pub temperature: f64,
    pub n_bands: usize,
    pub n_electrons: usize,
    pub n_plane_waves: usize,
    pub prescribed: bool,
    pub mu: f64,
    pub homo: Option<f64>,
    pub lumo: Option<f64>,
    pub gap: Option<f64>,
    /// Density of states at the Fermi level (per cell).
    pub dos: f64,
    pub scf_iterations: usize,
    pub scf_trace: Vec<f64>,
    /// `c_G(V)` on the k = 0 sphere, in basis order.
    pub potential: Vec<C64>,
}

impl GroundStateArtifact {
    pub fn from_ground_state(gs: &GroundState, ecut: f64) -> Self {
        let edges = band_edges(&gs.spectrum.energies(), gs.n_electrons()).ok();
        Self {
            crystal: gs.crystal.clone(),
            ecut,
            kgrid: gs.grid().clone(),
            temperature: gs.temperature,
            n_bands: gs.n_bands(),
            n_electrons: gs.n_electrons(),
            n_plane_waves: gs.basis.len(),
            prescribed: gs.prescribed,
            mu: gs.mu,
            homo: edges.map(|e| e.0),
            lumo: edges.map(|e| e.1),
            gap: edges.map(|(h, l)| l - h),
            dos: gs.dos(),
            scf_iterations: gs.trace.len(),
            scf_trace: gs.trace.clone(),
            potential: gs.potential.clone(),
        }
    }

    /// Rebuild the ground state by diagonalizing the stored potential.
    pub fn restore(&self) -> Result<GroundState> {
        let basis = build_basis(&self.crystal.lattice, self.ecut);
        if basis.len() != self.potential.len() {
            return Err(Error::Artifact {
                path: GROUND_STATE.into(),
                message: format!(
                    "potential has {} coefficients but the basis has {}",
                    self.potential.len(),
                    basis.len()
                ),
            });
        }
        let mut gs = ground_state_from_potential(
            &self.crystal,
            &basis,
            &self.kgrid,
            self.temperature,
            self.n_bands,
            self.potential.clone(),
        )?;
        gs.trace = self.scf_trace.clone();
        gs.prescribed = self.prescribed;
        Ok(gs)
    }
}

/// One row of `bands.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BandRow {
    pub k: usize,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub band: usize,
    pub energy: f64,
    pub occupation: f64,
}

/// One stored `χ₀` block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Chi0Entry {
    pub file: String,
    /// Index of the point in the centred q-grid.
    pub point: usize,
    pub q_frac: [f64; 3],
    /// `max |χ₀ − χ₀†|` before symmetrization.
    pub raw_hermiticity: f64,
}

/// `chi0/index.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Chi0Index {
    pub n_q: usize,
    pub shifted: bool,
    pub n_bands_sum: usize,
    pub n_plane_waves: usize,
    /// Checksum of the ground state the blocks were computed from.
    pub ground_state_sha256: String,
    pub blocks: Vec<Chi0Entry>,
}

/// Cross-check of `ε_M` along one direction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadLimitCheck {
    pub direction: [f64; 3],
    pub steps: Vec<f64>,
    /// `[ε⁻¹]₀₀(h e)` per step.
    pub values: Vec<f64>,
    pub extrapolated: f64,
    /// `1/(eᵀ ε_M e)` from the Schur formula.
    pub schur: f64,
    pub relative_difference: f64,
}

/// `screening.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScreeningReport {
    pub summary: ScreeningSummary,
    pub eps_m_min_eigenvalue: f64,
    pub sum_rule_defect: f64,
    pub wing_symmetry_residual: f64,
    pub head_limit: Vec<HeadLimitCheck>,
}

/// One row of `ifc.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IfcRow {
    pub r1: i32,
    pub r2: i32,
    pub r3: i32,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub radius: f64,
    pub weight: f64,
    pub s: usize,
    pub s2: usize,
    pub cxx: f64,
    pub cxy: f64,
    pub cxz: f64,
    pub cyx: f64,
    pub cyy: f64,
    pub cyz: f64,
    pub czx: f64,
    pub czy: f64,
    pub czz: f64,
}

/// `decay_report.json`: exponential fit for `T > 0`, comparison with the
/// dipole law for `T = 0`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum DecayReport {
    Exponential {
        temperature: f64,
        eta: f64,
        intercept: f64,
        r_squared: f64,
        shells: Vec<Shell>,
    },
    Algebraic {
        aliasing_radius: f64,
        shells: Vec<ShellRatio>,
        /// Largest non-boundary shell inside the aliasing radius.
        outermost: Option<ShellRatio>,
        /// `|R|³ ‖C(R)‖` strictly decreasing over the last three shells.
        scaled_norm_decreasing: bool,
    },
}

impl DecayReport {
    pub fn from_fit(temperature: f64, fit: DecayFit) -> Self {
        DecayReport::Exponential {
            temperature,
            eta: fit.eta,
            intercept: fit.intercept,
            r_squared: fit.r_squared,
            shells: fit.shells,
        }
    }

    pub fn from_ratios(aliasing_radius: f64, shells: Vec<ShellRatio>) -> Self {
        let n = shells.len();
        let scaled_norm_decreasing = n >= 3
            && shells[n - 3].scaled_norm > shells[n - 2].scaled_norm
            && shells[n - 2].scaled_norm > shells[n - 1].scaled_norm;
        DecayReport::Algebraic {
            aliasing_radius,
            outermost: shells.last().cloned(),
            shells,
            scaled_norm_decreasing,
        }
    }
}

/// One row of `convergence.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub parameter: String,
    pub value: f64,
    pub n_plane_waves: usize,
    pub gap: Option<f64>,
    pub dos: f64,
    /// `tr(ε_M)/3` (zero temperature only).
    pub eps_m_mean: Option<f64>,
    pub sum_rule_defect: Option<f64>,
    pub eta: Option<f64>,
    pub r_squared: Option<f64>,
    pub outermost_radius: Option<f64>,
    pub outermost_ratio: Option<f64>,
}

/// Ground state described by a configuration (SCF or prescribed potential).
pub fn compute_ground_state(cfg: &RunConfig) -> Result<GroundState> {
    let crystal = cfg.crystal()?;
    let basis = cfg.basis()?;
    let grid = cfg.kgrid()?;
    info!(
        "ground state: {} plane waves, {} k-points, {} bands, T = {}",
        basis.len(),
        grid.len(),
        cfg.n_bands(),
        cfg.temperature
    );
    match cfg.potential {
        PotentialSpec::Scf => scf_solve(
            &crystal,
            &basis,
            &grid,
            cfg.temperature,
            cfg.n_bands(),
            &cfg.scf,
        ),
        PotentialSpec::Cosine { amplitude } => {
            let v = cosine_potential(&basis, amplitude);
            ground_state_from_potential(&crystal, &basis, &grid, cfg.temperature, cfg.n_bands(), v)
        }
    }
}

pub fn load_ground_state(store: &ArtifactStore) -> Result<(GroundStateArtifact, GroundState)> {
    let art: GroundStateArtifact = store.read_json(GROUND_STATE, Step::Scf.name())?;
    let gs = art.restore()?;
    Ok((art, gs))
}

/// `scf`: solve and write `ground_state.json`.
pub fn run_scf(cfg: &RunConfig, store: &ArtifactStore) -> Result<GroundStateArtifact> {
    let gs = compute_ground_state(cfg)?;
    let art = GroundStateArtifact::from_ground_state(&gs, cfg.ecut);
    store.write_json(GROUND_STATE, Step::Scf.name(), &art)?;
    info!("gap {:?}, DOS {:.6e}, mu {:.6}", art.gap, art.dos, art.mu);
    Ok(art)
}

/// `bands`: band energies and occupations on the ground-state k-grid.
pub fn run_bands(store: &ArtifactStore) -> Result<Vec<BandRow>> {
    let (_, gs) = load_ground_state(store)?;
    let mut rows = Vec::new();
    for (k, fiber) in gs.spectrum.fibers.iter().enumerate() {
        let f = fiber.k_frac;
        for (n, &e) in fiber.energies.iter().enumerate() {
            rows.push(BandRow {
                k,
                k1: f[0],
                k2: f[1],
                k3: f[2],
                band: n,
                energy: e,
                occupation: gs.occupations[k][n],
            });
        }
    }
    store.write_csv(BANDS, Step::Bands.name(), &rows)?;
    Ok(rows)
}

fn block_name(point: usize) -> String {
    format!("{CHI0_DIR}q{point:04}.bin")
}

fn ground_state_sha(store: &ArtifactStore) -> Result<String> {
    store
        .manifest()?
        .artifacts
        .get(GROUND_STATE)
        .map(|e| e.sha256.clone())
        .ok_or_else(|| Error::MissingArtifact {
            path: store.path(GROUND_STATE).display().to_string(),
            step: Step::Scf.name().into(),
        })
}

/// `chi0`: susceptibility blocks at the representatives of the q-grid.
pub fn run_chi0(cfg: &RunConfig, store: &ArtifactStore) -> Result<Chi0Index> {
    let (_, gs) = load_ground_state(store)?;
    let sha = ground_state_sha(store)?;
    let plan = plan_q_grid(cfg.qgrid.n, cfg.qgrid.shifted)?;
    let nbs = cfg.n_bands_sum().min(gs.n_bands());
    let blocks = chi0_on_q_grid(&gs, &plan, nbs)?;
    store.forget(CHI0_DIR)?;
    let mut entries = Vec::with_capacity(blocks.len());
    for (&point, block) in plan.representatives.iter().zip(&blocks) {
        let file = block_name(point);
        store.write_block(&file, Step::Chi0.name(), block)?;
        entries.push(Chi0Entry {
            file,
            point,
            q_frac: [block.q_frac[0], block.q_frac[1], block.q_frac[2]],
            raw_hermiticity: block.raw_hermiticity,
        });
    }
    let index = Chi0Index {
        n_q: plan.n_q,
        shifted: plan.shifted,
        n_bands_sum: nbs,
        n_plane_waves: gs.basis.len(),
        ground_state_sha256: sha,
        blocks: entries,
    };
    store.write_json(CHI0_INDEX, Step::Chi0.name(), &index)?;
    Ok(index)
}

/// Cross-check `ε_M` against `[ε⁻¹]₀₀` along the three extraction axes.
pub fn head_limit_checks(
    gs: &GroundState,
    eps_m: &Matrix3<f64>,
    steps: &[f64],
    n_bands_sum: usize,
) -> Result<Vec<HeadLimitCheck>> {
    let s3 = 1.0 / 3f64.sqrt();
    let s2 = 1.0 / 2f64.sqrt();
    let dirs = [
        Vector3::new(1.0, 0.0, 0.0),
        Vector3::new(s2, s2, 0.0),
        Vector3::new(s3, s3, s3),
    ];
    dirs.iter()
        .map(|e| {
            let values = inverse_head_limit(gs, *e, steps, n_bands_sum)?;
            let extrapolated = extrapolate_head_limit(steps, &values);
            let schur = 1.0 / (e.transpose() * eps_m * e)[0];
            Ok(HeadLimitCheck {
                direction: [e[0], e[1], e[2]],
                steps: steps.to_vec(),
                values,
                extrapolated,
                schur,
                relative_difference: (extrapolated - schur).abs() / schur.abs(),
            })
        })
        .collect()
}

/// `screen`: `ε_M`, Born charges and their consistency checks (`T = 0`).
pub fn run_screen(cfg: &RunConfig, store: &ArtifactStore) -> Result<ScreeningReport> {
    let (_, gs) = load_ground_state(store)?;
    if gs.temperature > 0.0 {
        return Err(Error::InvalidInput(format!(
            "screen extracts ε_M and Born charges of a gapped crystal and needs T = 0, got T = {}",
            gs.temperature
        )));
    }
    let mut settings = cfg.extraction();
    settings.n_bands_sum = settings.n_bands_sum.min(gs.n_bands());
    let summary = screening_summary(&gs, &settings)?;
    let eps_min = SymmetricEigen::new(summary.eps_m).eigenvalues.min();
    let head_limit = head_limit_checks(
        &gs,
        &summary.eps_m,
        &cfg.screening.head_limit_steps,
        settings.n_bands_sum,
    )?;
    let report = ScreeningReport {
        eps_m_min_eigenvalue: eps_min,
        sum_rule_defect: summary.sum_rule_defect(),
        wing_symmetry_residual: summary.wing_symmetry_residual(&gs.basis),
        head_limit,
        summary,
    };
    store.write_json(SCREENING, Step::Screen.name(), &report)?;
    Ok(report)
}

fn ifc_rows(table: &ForceConstantTable) -> Vec<IfcRow> {
    let n_at = table.n_atoms;
    let mut rows = Vec::new();
    for e in &table.entries {
        for s in 0..n_at {
            for s2 in 0..n_at {
                let c = e.block(n_at, s, s2);
                rows.push(IfcRow {
                    r1: e.r[0],
                    r2: e.r[1],
                    r3: e.r[2],
                    x: e.r_cart[0],
                    y: e.r_cart[1],
                    z: e.r_cart[2],
                    radius: e.r_cart.norm(),
                    weight: e.weight,
                    s,
                    s2,
                    cxx: c[(0, 0)],
                    cxy: c[(0, 1)],
                    cxz: c[(0, 2)],
                    cyx: c[(1, 0)],
                    cyy: c[(1, 1)],
                    cyz: c[(1, 2)],
                    czx: c[(2, 0)],
                    czy: c[(2, 1)],
                    czz: c[(2, 2)],
                });
            }
        }
    }
    rows
}

/// `ifc`: dynamical matrices from the stored `χ₀` blocks and their inverse
/// Fourier transform.
pub fn run_ifc(store: &ArtifactStore) -> Result<ForceConstantTable> {
    let (_, gs) = load_ground_state(store)?;
    let index: Chi0Index = store.read_json(CHI0_INDEX, Step::Chi0.name())?;
    if index.ground_state_sha256 != ground_state_sha(store)? {
        return Err(Error::Artifact {
            path: store.path(CHI0_INDEX).display().to_string(),
            message: "susceptibility blocks belong to a different ground state; re-run chi0".into(),
        });
    }
    let plan = plan_q_grid(index.n_q, index.shifted)?;
    if plan.representatives != index.blocks.iter().map(|b| b.point).collect::<Vec<_>>() {
        return Err(Error::Artifact {
            path: store.path(CHI0_INDEX).display().to_string(),
            message: "block list does not match the q-grid".into(),
        });
    }
    let lattice = &gs.basis.lattice;
    let chi0: Vec<BlochMatrix> = index
        .blocks
        .iter()
        .map(|b| store.read_block(&b.file, Step::Chi0.name(), lattice))
        .collect::<Result<_>>()?;
    let dmats = dynamical_matrices(&gs, &plan, &chi0)?;
    let table = ifc_from_dynamical(lattice, index.n_q, index.shifted, &dmats)?;
    store.write_json(IFC_JSON, Step::Ifc.name(), &table)?;
    store.write_csv(IFC_CSV, Step::Ifc.name(), &ifc_rows(&table))?;
    Ok(table)
}

fn decay_report(
    table: &ForceConstantTable,
    crystal: &Crystal,
    temperature: f64,
    screening: Option<&ScreeningSummary>,
) -> Result<DecayReport> {
    if temperature > 0.0 {
        return Ok(DecayReport::from_fit(
            temperature,
            fit_exponential_decay(table)?,
        ));
    }
    let summary = screening
        .ok_or_else(|| Error::InvalidInput("zero-temperature decay needs screening data".into()))?;
    let positions: Vec<Vector3<f64>> = (0..crystal.n_atoms())
        .map(|s| crystal.position(s))
        .collect();
    Ok(DecayReport::from_ratios(
        table.aliasing_radius,
        asymptotic_ratio(table, summary, &positions)?,
    ))
}

/// `fit-decay`: exponential fit (`T > 0`) or dipole-law comparison (`T = 0`).
pub fn run_fit_decay(store: &ArtifactStore) -> Result<DecayReport> {
    let art: GroundStateArtifact = store.read_json(GROUND_STATE, Step::Scf.name())?;
    let table: ForceConstantTable = store.read_json(IFC_JSON, Step::Ifc.name())?;
    let screening: Option<ScreeningReport> = if art.temperature > 0.0 {
        None
    } else {
        Some(store.read_json(SCREENING, Step::Screen.name())?)
    };
    let report = decay_report(
        &table,
        &art.crystal,
        art.temperature,
        screening.as_ref().map(|r| &r.summary),
    )?;
    store.write_json(DECAY_REPORT, Step::FitDecay.name(), &report)?;
    Ok(report)
}

/// Every stage in order (`screen` only at `T = 0`).
pub fn run_pipeline(cfg: &RunConfig, store: &ArtifactStore) -> Result<DecayReport> {
    run_scf(cfg, store)?;
    run_bands(store)?;
    run_chi0(cfg, store)?;
    if cfg.temperature <= 0.0 {
        run_screen(cfg, store)?;
    }
    run_ifc(store)?;
    run_fit_decay(store)
}

/// All observables of one configuration, computed in memory.
pub fn evaluate(cfg: &RunConfig, parameter: &str, value: f64) -> Result<ConvergenceRow> {
    let gs = compute_ground_state(cfg)?;
    let nbs = cfg.n_bands_sum().min(gs.n_bands());
    let mut row = ConvergenceRow {
        parameter: parameter.to_string(),
        value,
        n_plane_waves: gs.basis.len(),
        gap: gs.gap(),
        dos: gs.dos(),
        eps_m_mean: None,
        sum_rule_defect: None,
        eta: None,
        r_squared: None,
        outermost_radius: None,
        outermost_ratio: None,
    };
    let summary = if cfg.temperature <= 0.0 {
        let mut settings = cfg.extraction();
        settings.n_bands_sum = nbs;
        let s = screening_summary(&gs, &settings)?;
        row.eps_m_mean = Some(s.eps_m.trace() / 3.0);
        row.sum_rule_defect = Some(s.sum_rule_defect());
        Some(s)
    } else {
        None
    };
    let plan = plan_q_grid(cfg.qgrid.n, cfg.qgrid.shifted)?;
    let chi0 = chi0_on_q_grid(&gs, &plan, nbs)?;
    let dmats = dynamical_matrices(&gs, &plan, &chi0)?;
    let table = ifc_from_dynamical(&gs.basis.lattice, plan.n_q, plan.shifted, &dmats)?;
    match decay_report(&table, &gs.crystal, gs.temperature, summary.as_ref())? {
        DecayReport::Exponential { eta, r_squared, .. } => {
            row.eta = Some(eta);
            row.r_squared = Some(r_squared);
        }
        DecayReport::Algebraic { outermost, .. } => {
            row.outermost_radius = outermost.as_ref().map(|s| s.radius);
            row.outermost_ratio = outermost.and_then(|s| s.ratio);
        }
    }
    Ok(row)
}

/// `sweep`: the base configuration followed by one-parameter scans over
/// the configured lists; writes `convergence.csv`.
pub fn run_sweep(cfg: &RunConfig, store: &ArtifactStore) -> Result<Vec<ConvergenceRow>> {
    let mut variants: Vec<(String, f64, RunConfig)> = vec![("base".into(), 0.0, cfg.clone())];
    for &e in &cfg.sweep.ecut {
        let mut c = cfg.clone();
        c.ecut = e;
        variants.push(("Ecut".into(), e, c));
    }
    for &n in &cfg.sweep.n_k {
        let mut c = cfg.clone();
        c.kgrid.n = n;
        variants.push(("n_k".into(), n as f64, c));
    }
    for &n in &cfg.sweep.n_q {
        let mut c = cfg.clone();
        c.qgrid.n = n;
        variants.push(("n_q".into(), n as f64, c));
    }
    for &n in &cfg.sweep.n_bands_sum {
        let mut c = cfg.clone();
        c.n_bands_sum = Some(n);
        variants.push(("n_bands_sum".into(), n as f64, c));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (name, value, c) in variants {
        c.validate()?;
        info!("sweep point {name} = {value}");
        rows.push(evaluate(&c, &name, value)?);
    }
    store.write_csv(CONVERGENCE, Step::Sweep.name(), &rows)?;
    Ok(rows)
}
