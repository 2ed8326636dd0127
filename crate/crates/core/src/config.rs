//! Run configuration: a JSON document describing the crystal, the
//! discretization and every pipeline stage.
//!
//! Parsing reports the JSON pointer of the offending field, both for schema
//! errors (wrong types, unknown keys) and for semantic checks (e.g. a
//! negative cutoff is reported at `/Ecut`).

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis, PlaneWaveBasis};
use crate::crystal::{Atom, Crystal};
use crate::error::{Error, Result};
use crate::kgrid::KGrid;
use crate::lattice::reciprocal_lattice;
use crate::scf::ScfSettings;
use crate::screening::ExtractionSettings;

/// One atom: fractional position and integer charge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomSpec {
    pub frac: [f64; 3],
    #[serde(rename = "Z")]
    pub z: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KGridSpec {
    pub n: usize,
    #[serde(default)]
    pub shift: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QGridSpec {
    pub n: usize,
    /// Half-step shifted grid, which excludes `q = 0`.
    pub shifted: bool,
}

/// Where the effective potential comes from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialSpec {
    /// Self-consistent rHF potential.
    #[default]
    Scf,
    /// Prescribed separable potential `2v Σ_i cos(b_i·x)`.
    Cosine { amplitude: f64 },
}

/// Small-q extraction parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScreeningSpec {
    /// Initial finite-difference step (Bohr⁻¹); default `1e-3 · min|b_i|`.
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default = "default_screen_tol")]
    pub tol: f64,
    #[serde(default = "default_halvings")]
    pub max_halvings: usize,
    /// Steps used to extrapolate `[ε⁻¹]₀₀` for the cross-check of `ε_M`.
    #[serde(default = "default_head_steps")]
    pub head_limit_steps: Vec<f64>,
}

fn default_screen_tol() -> f64 {
    1e-8
}
fn default_halvings() -> usize {
    4
}
fn default_head_steps() -> Vec<f64> {
    vec![2e-2, 1e-2]
}

impl Default for ScreeningSpec {
    fn default() -> Self {
        Self {
            h: None,
            tol: default_screen_tol(),
            max_halvings: default_halvings(),
            head_limit_steps: default_head_steps(),
        }
    }
}

/// Parameter lists for `sweep`; each list is scanned with the other
/// parameters held at their base values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default, rename = "Ecut")]
    pub ecut: Vec<f64>,
    #[serde(default)]
    pub n_k: Vec<usize>,
    #[serde(default)]
    pub n_q: Vec<usize>,
    #[serde(default)]
    pub n_bands_sum: Vec<usize>,
}

/// Full run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Lattice vectors `a1, a2, a3` (rows, Bohr).
    pub lattice: [[f64; 3]; 3],
    pub atoms: Vec<AtomSpec>,
    /// Width of the nuclear Gaussians (Bohr).
    pub sigma: f64,
    #[serde(rename = "Ecut")]
    pub ecut: f64,
    pub kgrid: KGridSpec,
    /// Electronic temperature (Hartree); 0 selects the gapped-insulator path.
    pub temperature: f64,
    /// Bands per k-point; default `N_el + 20`.
    #[serde(default)]
    pub n_bands: Option<usize>,
    /// Upper bound on the bands summed in `χ₀`; default `n_bands`.
    #[serde(default)]
    pub n_bands_sum: Option<usize>,
    pub qgrid: QGridSpec,
    #[serde(default)]
    pub scf: ScfSettings,
    #[serde(default)]
    pub potential: PotentialSpec,
    #[serde(default)]
    pub screening: ScreeningSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn config_error(pointer: &str, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

/// Convert a `serde_path_to_error` path (`atoms[0].Z`) to a JSON pointer
/// (`/atoms/0/Z`).
fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push('/');
                out.push_str(&key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

impl RunConfig {
    /// Parse and validate a configuration document.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            config_error(&pointer, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, parse and validate a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error("/", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn positive(value: f64, pointer: &str) -> Result<()> {
        if value > 0.0 && value.is_finite() {
            Ok(())
        } else {
            Err(config_error(
                pointer,
                format!("must be positive and finite, got {value}"),
            ))
        }
    }

    /// Semantic checks beyond the schema.
    pub fn validate(&self) -> Result<()> {
        let det = self.lattice_vectors().0.determinant();
        if !(det.abs() > 1e-12) {
            return Err(config_error(
                "/lattice",
                format!("lattice vectors are singular (det = {det:.3e})"),
            ));
        }
        if self.atoms.is_empty() {
            return Err(config_error("/atoms", "at least one atom is required"));
        }
        for (i, a) in self.atoms.iter().enumerate() {
            if a.z == 0 {
                return Err(config_error(
                    &format!("/atoms/{i}/Z"),
                    "charge must be a positive integer",
                ));
            }
            if let Some(c) = a.frac.iter().position(|x| !x.is_finite()) {
                return Err(config_error(
                    &format!("/atoms/{i}/frac/{c}"),
                    "must be finite",
                ));
            }
        }
        Self::positive(self.sigma, "/sigma")?;
        Self::positive(self.ecut, "/Ecut")?;
        if self.kgrid.n == 0 {
            return Err(config_error("/kgrid/n", "must be >= 1"));
        }
        if let Some(c) = self
            .kgrid
            .shift
            .iter()
            .position(|x| !(0.0..1.0).contains(x))
        {
            return Err(config_error(
                &format!("/kgrid/shift/{c}"),
                "must lie in [0, 1)",
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(config_error(
                "/temperature",
                format!("must be non-negative, got {}", self.temperature),
            ));
        }
        if self.qgrid.n == 0 {
            return Err(config_error("/qgrid/n", "must be >= 1"));
        }
        if self.temperature == 0.0 && !self.qgrid.shifted {
            return Err(config_error(
                "/qgrid/shifted",
                "a zero-temperature run needs a shifted q-grid (q = 0 is singular for an insulator)",
            ));
        }
        let n_el = self.n_electrons();
        let n_bands = self.n_bands();
        if n_bands <= n_el {
            return Err(config_error(
                "/n_bands",
                format!("must exceed N_el = {n_el}, got {n_bands}"),
            ));
        }
        let nbs = self.n_bands_sum();
        if nbs == 0 || nbs > n_bands {
            return Err(config_error(
                "/n_bands_sum",
                format!("must lie in 1..={n_bands}, got {nbs}"),
            ));
        }
        if self.temperature == 0.0 && nbs <= n_el {
            return Err(config_error(
                "/n_bands_sum",
                format!("must exceed N_el = {n_el} at zero temperature"),
            ));
        }
        self.scf
            .validate()
            .map_err(|e| config_error("/scf", e.to_string()))?;
        if let PotentialSpec::Cosine { amplitude } = self.potential {
            if !amplitude.is_finite() {
                return Err(config_error("/potential/amplitude", "must be finite"));
            }
        }
        if let Some(h) = self.screening.h {
            Self::positive(h, "/screening/h")?;
        }
        Self::positive(self.screening.tol, "/screening/tol")?;
        if self.screening.head_limit_steps.len() < 2 {
            return Err(config_error(
                "/screening/head_limit_steps",
                "need at least two steps",
            ));
        }
        for (i, h) in self.screening.head_limit_steps.iter().enumerate() {
            Self::positive(*h, &format!("/screening/head_limit_steps/{i}"))?;
        }
        for (i, e) in self.sweep.ecut.iter().enumerate() {
            Self::positive(*e, &format!("/sweep/Ecut/{i}"))?;
        }
        for (name, list) in [
            ("n_k", &self.sweep.n_k),
            ("n_q", &self.sweep.n_q),
            ("n_bands_sum", &self.sweep.n_bands_sum),
        ] {
            if let Some(i) = list.iter().position(|&n| n == 0) {
                return Err(config_error(&format!("/sweep/{name}/{i}"), "must be >= 1"));
            }
        }
        Ok(())
    }

    fn lattice_vectors(&self) -> (nalgebra::Matrix3<f64>, [Vector3<f64>; 3]) {
        let v = self.lattice.map(Vector3::from);
        (nalgebra::Matrix3::from_columns(&v), v)
    }

    pub fn n_electrons(&self) -> usize {
        self.atoms.iter().map(|a| a.z as usize).sum()
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands.unwrap_or(self.n_electrons() + 20)
    }

    pub fn n_bands_sum(&self) -> usize {
        self.n_bands_sum.unwrap_or_else(|| self.n_bands())
    }

    pub fn crystal(&self) -> Result<Crystal> {
        let (_, v) = self.lattice_vectors();
        let lattice = reciprocal_lattice(v[0], v[1], v[2])?;
        let atoms = self
            .atoms
            .iter()
            .map(|a| Atom {
                frac: Vector3::from(a.frac),
                charge: a.z,
            })
            .collect();
        Crystal::new(lattice, atoms, self.sigma)
    }

    pub fn basis(&self) -> Result<PlaneWaveBasis> {
        Ok(build_basis(&self.crystal()?.lattice, self.ecut))
    }

    pub fn kgrid(&self) -> Result<KGrid> {
        KGrid::new(self.kgrid.n, Vector3::from(self.kgrid.shift))
    }

    pub fn extraction(&self) -> ExtractionSettings {
        ExtractionSettings {
            h: self.screening.h,
            tol: self.screening.tol,
            max_halvings: self.screening.max_halvings,
            n_bands_sum: self.n_bands_sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "lattice": [[6.283185307179586, 0, 0], [0, 6.283185307179586, 0], [0, 0, 6.283185307179586]],
        "atoms": [{"frac": [0, 0, 0], "Z": 1}],
        "sigma": 1.0,
        "Ecut": 4.0,
        "kgrid": {"n": 2},
        "temperature": 0.0,
        "qgrid": {"n": 2, "shifted": true},
        "potential": {"kind": "cosine", "amplitude": 1.0}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.n_bands(), 21);
        assert_eq!(cfg.n_bands_sum(), 21);
        assert_eq!(cfg.scf, ScfSettings::default());
        assert_eq!(cfg.potential, PotentialSpec::Cosine { amplitude: 1.0 });
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
    }

    fn pointer_of(text: &str) -> String {
        match RunConfig::from_json(text) {
            Err(Error::Config { pointer, .. }) => pointer,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn negative_cutoff_points_at_ecut() {
        assert_eq!(
            pointer_of(&MINIMAL.replace("\"Ecut\": 4.0", "\"Ecut\": -4.0")),
            "/Ecut"
        );
    }

    #[test]
    fn type_errors_point_into_nested_fields() {
        assert_eq!(
            pointer_of(&MINIMAL.replace("\"Z\": 1", "\"Z\": \"one\"")),
            "/atoms/0/Z"
        );
    }

    #[test]
    fn zero_temperature_requires_shifted_q_grid() {
        assert_eq!(
            pointer_of(&MINIMAL.replace("\"shifted\": true", "\"shifted\": false")),
            "/qgrid/shifted"
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(
            pointer_of(&MINIMAL.replace("\"sigma\": 1.0", "\"sigma\": 1.0, \"sigmaa\": 2"))
                .starts_with('/')
        );
    }
}
