use std::collections::BTreeMap;
use std::f64::consts::PI;

use faer::Mat;
use log::{debug, info};
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::BlochSpectrum;
use crate::kgrid::KGrid;
use crate::lattice::Lattice;
use crate::response::{chi0_block_with, screened_coulomb_block, BlochMatrix};
use crate::scf::GroundState;
use crate::screening::ScreeningSummary;
use crate::C64;

/// Imaginary residue of the force constants tolerated before failing.
pub const IFC_IMAG_TOL: f64 = 1e-6;

/// Onsite block `c_{s,αβ} = (Z_s/√|Ω|) Re Σ_{G≠0} c_G(V) G_α G_β e^{−σ²|G|²/2} e^{iG·τ_s}`,
/// i.e. `−Z_s ∫ ∂_α∂_β m(x − τ_s) V(x) dx`.
pub fn onsite_block(gs: &GroundState, s: usize) -> Matrix3<f64> {
    let crystal = &gs.crystal;
    let mut c = Matrix3::<f64>::zeros();
    for (i, (m, g)) in gs
        .basis
        .millers()
        .iter()
        .zip(gs.basis.gvectors())
        .enumerate()
        .skip(1)
    {
        let w = gs.potential[i]
            * crystal.structure_phase(s, *m).conj()
            * crystal.shape_factor(g.norm_squared());
        c += g * g.transpose() * w.re;
    }
    c * (crystal.atoms[s].charge as f64 / crystal.lattice.cell_volume.sqrt())
}

/// Dynamical matrix at one `q`, indexed `(s, α) × (s', β)`.
#[derive(Clone, Debug)]
pub struct DynamicalMatrix {
    pub q_frac: Vector3<f64>,
    pub q: Vector3<f64>,
    pub data: Mat<C64>,
    /// `max |D − D†|` before the Hermitian part was taken.
    pub antihermitian_residual: f64,
}

/// `ŵ^s_α(p) = i p_α m̂(p) e^{−ip·τ_s}` with `m̂(p) = (2π)^{-3/2} e^{−σ²|p|²/2}`,
/// for `p = q + G`.
fn displacement_form_factors(gs: &GroundState, q_frac: &Vector3<f64>) -> Vec<Vec<Vector3<C64>>> {
    let crystal = &gs.crystal;
    let lattice = &crystal.lattice;
    let norm = (2.0 * PI).powf(-1.5);
    (0..crystal.n_atoms())
        .map(|s| {
            let tau = &crystal.atoms[s].frac;
            gs.basis
                .millers()
                .iter()
                .map(|m| {
                    let pf = Vector3::new(
                        q_frac[0] + m[0] as f64,
                        q_frac[1] + m[1] as f64,
                        q_frac[2] + m[2] as f64,
                    );
                    let p = lattice.reciprocal_from_fractional(&pf);
                    let phase = C64::from_polar(
                        norm * crystal.shape_factor(p.norm_squared()),
                        -2.0 * PI * pf.dot(tau),
                    );
                    p.map(|x| C64::new(0.0, x) * phase)
                })
                .collect()
        })
        .collect()
}

/// `D_{ss'}(q) = δ_{ss'} c_s/√|Ω*| + √|Ω*| Z_s Z_{s'} conj(Σ_{GG'} conj(ŵ^s(q+G)) W_{GG'}(q) ŵ^{s'}(q+G'))`.
///
/// The outer conjugation makes `D(q)` the transform of `C_{ss'}(R)` with
/// kernel `e^{+iq·R}`, matching the inverse transform used in
/// [`ifc_from_dynamical`].
pub fn dynamical_matrix(gs: &GroundState, w: &BlochMatrix) -> DynamicalMatrix {
    let onsite: Vec<Matrix3<f64>> = (0..gs.crystal.n_atoms())
        .map(|s| onsite_block(gs, s))
        .collect();
    dynamical_matrix_with(gs, &onsite, w)
}

/// [`dynamical_matrix`] with precomputed onsite blocks.
pub fn dynamical_matrix_with(
    gs: &GroundState,
    onsite: &[Matrix3<f64>],
    w: &BlochMatrix,
) -> DynamicalMatrix {
    let crystal = &gs.crystal;
    let n_at = crystal.n_atoms();
    let n_g = gs.basis.len();
    let rv = crystal.lattice.reciprocal_volume;
    let sqrt_rv = rv.sqrt();
    let forms = displacement_form_factors(gs, &w.q_frac);

    // Y = W · ŵ for every (s', β) column.
    let wcols = Mat::<C64>::from_fn(n_g, 3 * n_at, |g, col| forms[col / 3][g][col % 3]);
    let y = &w.data * &wcols;
    let mut data = Mat::<C64>::zeros(3 * n_at, 3 * n_at);
    for r in 0..3 * n_at {
        for c in 0..3 * n_at {
            let mut f = C64::new(0.0, 0.0);
            for g in 0..n_g {
                f += wcols[(g, r)].conj() * y[(g, c)];
            }
            let zz = (crystal.atoms[r / 3].charge * crystal.atoms[c / 3].charge) as f64;
            let mut d = f.conj() * (sqrt_rv * zz);
            if r / 3 == c / 3 {
                d += onsite[r / 3][(r % 3, c % 3)] / sqrt_rv;
            }
            data[(r, c)] = d;
        }
    }
    let mut residual = 0.0f64;
    for r in 0..3 * n_at {
        for c in 0..=r {
            residual = residual.max((data[(r, c)] - data[(c, r)].conj()).norm());
        }
    }
    crate::response::hermitize(&mut data);
    DynamicalMatrix {
        q_frac: w.q_frac,
        q: w.q,
        data,
        antihermitian_residual: residual,
    }
}

/// One lattice vector of the force-constant table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IfcEntry {
    pub r: [i32; 3],
    pub r_cart: Vector3<f64>,
    /// `1/multiplicity` for vectors on the Wigner–Seitz boundary of the
    /// q-grid superlattice.
    pub weight: f64,
    /// Blocks `C_{ss'}(R)` in row-major order over `(s, s')`.
    pub blocks: Vec<Matrix3<f64>>,
}

impl IfcEntry {
    pub fn block(&self, n_at: usize, s: usize, s2: usize) -> &Matrix3<f64> {
        &self.blocks[s * n_at + s2]
    }

    pub fn on_boundary(&self) -> bool {
        self.weight < 1.0
    }

    /// `max_{ss'} ‖C_{ss'}(R)‖_F`.
    pub fn max_norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm()).fold(0.0, f64::max)
    }
}

/// Real-space force constants `C_{ss'}(R) = C_{Rs,0s'}` from an `n_q³` grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForceConstantTable {
    pub n_q: usize,
    pub shifted: bool,
    pub n_atoms: usize,
    pub lattice: Lattice,
    pub entries: Vec<IfcEntry>,
    /// Largest discarded imaginary part.
    pub max_imag: f64,
    /// Shells with `|R|` beyond `⌊n_q/2⌋ · min|a|` are not reported.
    pub aliasing_radius: f64,
}

/// Centred q-grid: reciprocal fractional coordinates in `(−½, ½]`.
pub fn q_points(n_q: usize, shifted: bool) -> Result<Vec<Vector3<f64>>> {
    let shift = if shifted { 0.5 } else { 0.0 };
    let grid = KGrid::new(n_q, Vector3::repeat(shift))?;
    Ok(grid
        .fractional_points()
        .into_iter()
        .map(|f| {
            f.map(|x| {
                let r = x - x.round();
                if r <= -0.5 + 1e-12 {
                    r + 1.0
                } else {
                    r
                }
            })
        })
        .collect())
}

/// Lattice vectors of the Wigner–Seitz cell of the superlattice `n_q 𝕃`,
/// with weight `1/multiplicity` for boundary vectors.
pub fn wigner_seitz_vectors(lattice: &Lattice, n_q: usize) -> Vec<([i32; 3], f64)> {
    let n = n_q as i32;
    let mut out = Vec::new();
    for j0 in 0..n {
        for j1 in 0..n {
            for j2 in 0..n {
                let mut images: Vec<([i32; 3], f64)> = Vec::new();
                for t0 in -2..=2 {
                    for t1 in -2..=2 {
                        for t2 in -2..=2 {
                            let r = [j0 + n * t0, j1 + n * t1, j2 + n * t2];
                            images.push((r, lattice.translation(r).norm()));
                        }
                    }
                }
                let best = images.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
                let tol = 1e-8 * (1.0 + best);
                let ties: Vec<[i32; 3]> = images
                    .iter()
                    .filter(|x| x.1 <= best + tol)
                    .map(|x| x.0)
                    .collect();
                let w = 1.0 / ties.len() as f64;
                out.extend(ties.into_iter().map(|r| (r, w)));
            }
        }
    }
    out.sort_by(|a, b| {
        let na = lattice.translation(a.0).norm_squared();
        let nb = lattice.translation(b.0).norm_squared();
        ((na * 1e9).round() as i64)
            .cmp(&((nb * 1e9).round() as i64))
            .then(a.0.cmp(&b.0))
    });
    out
}

/// Inverse transform `C_{ss'}(R) = (√|Ω*|/n_q³) Σ_q D_{ss'}(q) e^{−iq·R}`.
pub fn ifc_from_dynamical(
    lattice: &Lattice,
    n_q: usize,
    shifted: bool,
    dmats: &[DynamicalMatrix],
) -> Result<ForceConstantTable> {
    if dmats.len() != n_q * n_q * n_q {
        return Err(Error::InvalidInput(format!(
            "expected {} dynamical matrices, got {}",
            n_q * n_q * n_q,
            dmats.len()
        )));
    }
    let n3 = dmats[0].data.nrows();
    let n_at = n3 / 3;
    let scale = lattice.reciprocal_volume.sqrt() / dmats.len() as f64;
    let mut max_imag = 0.0f64;
    let mut entries = Vec::new();
    for (r, weight) in wigner_seitz_vectors(lattice, n_q) {
        let mut acc = vec![C64::new(0.0, 0.0); n3 * n3];
        for d in dmats {
            let phase = C64::from_polar(
                1.0,
                -2.0 * PI
                    * (d.q_frac[0] * r[0] as f64
                        + d.q_frac[1] * r[1] as f64
                        + d.q_frac[2] * r[2] as f64),
            );
            for i in 0..n3 {
                for j in 0..n3 {
                    acc[i * n3 + j] += d.data[(i, j)] * phase;
                }
            }
        }
        let mut blocks = vec![Matrix3::<f64>::zeros(); n_at * n_at];
        for i in 0..n3 {
            for j in 0..n3 {
                let v = acc[i * n3 + j] * scale;
                max_imag = max_imag.max(v.im.abs());
                blocks[(i / 3) * n_at + j / 3][(i % 3, j % 3)] = v.re;
            }
        }
        entries.push(IfcEntry {
            r,
            r_cart: lattice.translation(r),
            weight,
            blocks,
        });
    }
    if max_imag > IFC_IMAG_TOL * (1.0 + entries.iter().map(|e| e.max_norm()).fold(0.0, f64::max)) {
        return Err(Error::ImaginaryResidue {
            what: "force constants".into(),
            residue: max_imag,
            tolerance: IFC_IMAG_TOL,
        });
    }
    let a_min = lattice.min_translation_length();
    Ok(ForceConstantTable {
        n_q,
        shifted,
        n_atoms: n_at,
        lattice: lattice.clone(),
        entries,
        max_imag,
        aliasing_radius: (n_q / 2) as f64 * a_min,
    })
}

/// Forward transform `D(q) = (1/√|Ω*|) Σ_R w_R e^{iq·R} C(R)` of a table.
pub fn dynamical_from_ifc(table: &ForceConstantTable, q_frac: Vector3<f64>) -> Mat<C64> {
    let n_at = table.n_atoms;
    let n3 = 3 * n_at;
    let scale = 1.0 / table.lattice.reciprocal_volume.sqrt();
    let mut d = Mat::<C64>::zeros(n3, n3);
    for e in &table.entries {
        let phase = C64::from_polar(
            e.weight * scale,
            2.0 * PI
                * (q_frac[0] * e.r[0] as f64
                    + q_frac[1] * e.r[1] as f64
                    + q_frac[2] * e.r[2] as f64),
        );
        for i in 0..n3 {
            for j in 0..n3 {
                d[(i, j)] += phase * e.blocks[(i / 3) * n_at + j / 3][(i % 3, j % 3)];
            }
        }
    }
    d
}

/// Index of `−q` in a centred q list, if present.
fn negated_index(points: &[Vector3<f64>], i: usize) -> Option<usize> {
    let target = -points[i];
    points.iter().position(|p| {
        let d = p - target;
        d.iter().all(|x| (x - x.round()).abs() < 1e-9)
    })
}

/// A q-grid split into representatives and their time-reversal partners.
#[derive(Clone, Debug)]
pub struct QGridPlan {
    pub n_q: usize,
    pub shifted: bool,
    /// Centred points, in grid order.
    pub points: Vec<Vector3<f64>>,
    /// Indices of the points whose blocks are computed.
    pub representatives: Vec<usize>,
    /// For every point: the position in `representatives` of its source and
    /// whether the block is obtained by `D(−q) = conj(D(q))`.
    pub source: Vec<(usize, bool)>,
}

/// Pair every point with `−q`; the first of each pair is a representative.
pub fn plan_q_grid(n_q: usize, shifted: bool) -> Result<QGridPlan> {
    let points = q_points(n_q, shifted)?;
    let mut source: Vec<Option<(usize, bool)>> = vec![None; points.len()];
    let mut representatives = Vec::new();
    for i in 0..points.len() {
        if source[i].is_some() {
            continue;
        }
        let r = representatives.len();
        representatives.push(i);
        source[i] = Some((r, false));
        if let Some(j) = negated_index(&points, i) {
            if j != i && source[j].is_none() {
                source[j] = Some((r, true));
            }
        }
    }
    Ok(QGridPlan {
        n_q,
        shifted,
        points,
        representatives,
        source: source
            .into_iter()
            .map(|s| s.expect("every point assigned"))
            .collect(),
    })
}

/// `χ₀` at every representative of the plan. Spectra at `k + q` are
/// diagonalized once per distinct offset grid.
pub fn chi0_on_q_grid(
    gs: &GroundState,
    plan: &QGridPlan,
    n_bands_sum: usize,
) -> Result<Vec<BlochMatrix>> {
    if gs.temperature <= 0.0 && !plan.shifted {
        return Err(Error::UnshiftedGridAtZeroTemperature);
    }
    let mut cache: BTreeMap<[i64; 3], BlochSpectrum> = BTreeMap::new();
    let mut out = Vec::with_capacity(plan.representatives.len());
    for &i in &plan.representatives {
        let q_frac = plan.points[i];
        let partner_grid = gs.grid().offset_by(&q_frac);
        let key = partner_grid.shift.map(|x| (x * 1e9).round() as i64);
        let key = [key[0], key[1], key[2]];
        if !cache.contains_key(&key) {
            debug!(
                "diagonalizing offset grid with shift {:?}",
                partner_grid.shift.as_slice()
            );
            cache.insert(key, gs.spectrum_on(&partner_grid)?);
        }
        out.push(chi0_block_with(gs, &cache[&key], q_frac, n_bands_sum)?);
    }
    Ok(out)
}

/// Dynamical matrices on the whole grid from the representatives' `χ₀`.
pub fn dynamical_matrices(
    gs: &GroundState,
    plan: &QGridPlan,
    chi0: &[BlochMatrix],
) -> Result<Vec<DynamicalMatrix>> {
    if chi0.len() != plan.representatives.len() {
        return Err(Error::InvalidInput(format!(
            "expected {} susceptibility blocks, got {}",
            plan.representatives.len(),
            chi0.len()
        )));
    }
    let onsite: Vec<Matrix3<f64>> = (0..gs.crystal.n_atoms())
        .map(|s| onsite_block(gs, s))
        .collect();
    let reps: Vec<DynamicalMatrix> = chi0
        .iter()
        .map(|chi| {
            let w = screened_coulomb_block(chi, &gs.basis)?;
            Ok(dynamical_matrix_with(gs, &onsite, &w))
        })
        .collect::<Result<_>>()?;
    Ok(plan
        .source
        .iter()
        .enumerate()
        .map(|(i, &(r, conjugate))| {
            let d = &reps[r];
            if !conjugate {
                return d.clone();
            }
            let mut c = d.clone();
            c.q_frac = plan.points[i];
            c.q = gs.basis.lattice.reciprocal_from_fractional(&plan.points[i]);
            c.data = Mat::from_fn(d.data.nrows(), d.data.ncols(), |r, c| d.data[(r, c)].conj());
            c
        })
        .collect())
}

/// Force constants of a ground state on an `n_q³` q-grid.
///
/// Time reversal `D(−q) = conj(D(q))` halves the number of screened blocks.
pub fn ifc_table(
    gs: &GroundState,
    n_q: usize,
    shifted: bool,
    n_bands_sum: usize,
) -> Result<(ForceConstantTable, Vec<DynamicalMatrix>)> {
    let plan = plan_q_grid(n_q, shifted)?;
    let chi0 = chi0_on_q_grid(gs, &plan, n_bands_sum)?;
    let dmats = dynamical_matrices(gs, &plan, &chi0)?;
    let table = ifc_from_dynamical(&gs.basis.lattice, n_q, shifted, &dmats)?;
    info!(
        "force constants on {n_q}^3 q-grid: {} vectors, max imaginary part {:.2e}",
        table.entries.len(),
        table.max_imag
    );
    Ok((table, dmats))
}

/// Hessian of `Φ_M(x) = (det ε_M)^{-1/2} (xᵀ ε_M⁻¹ x)^{-1/2}`.
pub fn phi_m_hessian(eps_m: &Matrix3<f64>, x: &Vector3<f64>) -> Result<Matrix3<f64>> {
    if x.norm() == 0.0 {
        return Err(Error::ZeroSeparation);
    }
    let eig = SymmetricEigen::new(*eps_m);
    if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::NotPositiveDefinite("ε_M".into()));
    }
    let a = eps_m
        .try_inverse()
        .ok_or_else(|| Error::Singular("ε_M not invertible".into()))?;
    let det = eps_m.determinant();
    let ax = a * x;
    let r2 = x.dot(&ax);
    let r = r2.sqrt();
    Ok((ax * ax.transpose() * (3.0 / (r2 * r2 * r)) - a / (r2 * r)) / det.sqrt())
}

/// Leading dipole–dipole force constant `−(Z*_s)ᵀ ∇²Φ_M(x) Z*_{s'}`.
pub fn dipole_prediction(
    eps_m: &Matrix3<f64>,
    zs: &Matrix3<f64>,
    zs2: &Matrix3<f64>,
    x: &Vector3<f64>,
) -> Result<Matrix3<f64>> {
    Ok(-(zs.transpose() * phi_m_hessian(eps_m, x)? * zs2))
}

/// Norm of one shell `|R| = const`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Shell {
    pub radius: f64,
    /// `max_{R, ss'} ‖C_{ss'}(R)‖_F` over the shell.
    pub norm: f64,
    pub members: usize,
}

/// Non-boundary shells with `0 < |R| ≤ aliasing_radius`, by increasing
/// radius.
pub fn shells(table: &ForceConstantTable) -> Vec<Shell> {
    let mut map: BTreeMap<i64, Shell> = BTreeMap::new();
    for e in &table.entries {
        let r = e.r_cart.norm();
        if r == 0.0 || e.on_boundary() || r > table.aliasing_radius + 1e-8 {
            continue;
        }
        let key = (r * 1e6).round() as i64;
        let shell = map.entry(key).or_insert(Shell {
            radius: r,
            norm: 0.0,
            members: 0,
        });
        shell.norm = shell.norm.max(e.max_norm());
        shell.members += 1;
    }
    map.into_values().collect()
}

/// Exponential fit `log ‖C‖ ≈ a − η|R|` over shells.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayFit {
    pub eta: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub shells: Vec<Shell>,
}

/// Least-squares fit of `log max‖C‖` against `|R|` over shells with
/// `‖C‖ > 1e-13`; needs at least five shells.
pub fn fit_exponential_decay(table: &ForceConstantTable) -> Result<DecayFit> {
    let used: Vec<Shell> = shells(table)
        .into_iter()
        .filter(|s| s.norm > 1e-13)
        .collect();
    fit_shells(used)
}

pub(crate) fn fit_shells(used: Vec<Shell>) -> Result<DecayFit> {
    if used.len() < 5 {
        return Err(Error::InsufficientShells {
            needed: 5,
            found: used.len(),
        });
    }
    let n = used.len() as f64;
    let xs: Vec<f64> = used.iter().map(|s| s.radius).collect();
    let ys: Vec<f64> = used.iter().map(|s| s.norm.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Ok(DecayFit {
        eta: -slope,
        intercept,
        r_squared,
        shells: used,
    })
}

/// Comparison of one shell with the dipole–dipole law.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShellRatio {
    pub radius: f64,
    /// `‖C‖_F / ‖C_dipole‖_F` summed over the shell; `None` when the Born
    /// charges vanish.
    pub ratio: Option<f64>,
    /// `⟨C, C_dipole⟩ / ‖C_dipole‖²`, sensitive to sign.
    pub projection: Option<f64>,
    /// `|R|³ · max_{R,ss'} ‖C‖_F`.
    pub scaled_norm: f64,
}

/// Per-shell comparison of a zero-temperature table with the dipole law.
pub fn asymptotic_ratio(
    table: &ForceConstantTable,
    summary: &ScreeningSummary,
    positions: &[Vector3<f64>],
) -> Result<Vec<ShellRatio>> {
    let n_at = table.n_atoms;
    let zmax = summary.zstar.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let dipolar = zmax > 1e-3;
    let mut map: BTreeMap<i64, (f64, f64, f64, f64, f64)> = BTreeMap::new();
    for e in &table.entries {
        let r = e.r_cart.norm();
        if r == 0.0 || e.on_boundary() || r > table.aliasing_radius + 1e-8 {
            continue;
        }
        let key = (r * 1e6).round() as i64;
        let acc = map.entry(key).or_insert((r, 0.0, 0.0, 0.0, 0.0));
        for s in 0..n_at {
            for s2 in 0..n_at {
                let c = e.block(n_at, s, s2);
                acc.1 += c.norm_squared();
                acc.4 = acc.4.max(c.norm());
                if dipolar {
                    let x = e.r_cart + positions[s] - positions[s2];
                    let d = dipole_prediction(
                        &summary.eps_m,
                        &summary.zstar[s],
                        &summary.zstar[s2],
                        &x,
                    )?;
                    acc.2 += d.norm_squared();
                    acc.3 += c.dot(&d);
                }
            }
        }
    }
    Ok(map
        .into_values()
        .map(|(r, cc, dd, cd, cmax)| ShellRatio {
            radius: r,
            ratio: (dipolar && dd > 0.0).then(|| (cc / dd).sqrt()),
            projection: (dipolar && dd > 0.0).then(|| cd / dd),
            scaled_norm: r.powi(3) * cmax,
        })
        .collect())
}
