use thiserror::Error;

/// Failures raised by the numerical pipeline.
///
/// Variants are grouped by how a caller is expected to react: configuration
/// problems, numerical breakdowns, and violations of the gapped-insulator
/// assumption at zero temperature.
#[derive(Debug, Error)]
pub enum Error {
    #[error("singular cell: |det[a1 a2 a3]| = {det:.3e}")]
    SingularCell { det: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("eigensolver failed at k = {k:?}: {message}")]
    Eigensolver { k: [f64; 3], message: String },

    #[error("requested {requested} bands but the fiber basis at k = {k:?} only has {available}")]
    TooManyBands {
        requested: usize,
        available: usize,
        k: [f64; 3],
    },

    #[error("highest computed band carries occupation {occupation:.3e}; increase n_bands")]
    TopBandOccupied { occupation: f64 },

    #[error("no gap at the Fermi level: max band {n_el} = {homo:.6} >= min band {} = {lumo:.6}", n_el + 1)]
    NoGap { n_el: usize, homo: f64, lumo: f64 },

    #[error("charge neutrality violated: sqrt|Omega| c_0 = {defect:.3e}")]
    NotNeutral { defect: f64 },

    #[error("SCF did not converge in {iterations} iterations (last residual {last:.3e})")]
    ScfNotConverged {
        iterations: usize,
        last: f64,
        trace: Vec<f64>,
    },

    #[error("SCF aborted at iteration {iteration}: {source}")]
    ScfAborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("q = {q:?} (fractional) is not commensurate with the k-grid spectra")]
    Incommensurate { q: [f64; 3] },

    #[error("q = {q:?} lies on the reciprocal lattice")]
    OnReciprocalLattice { q: [f64; 3] },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error(
        "fit residual {residual:.3e} exceeds tolerance {tolerance:.3e} (h = {h:.3e}); reduce h"
    )]
    ResidualTooLarge {
        residual: f64,
        tolerance: f64,
        h: f64,
    },

    #[error("imaginary residue {residue:.3e} exceeds {tolerance:.1e} in {what}")]
    ImaginaryResidue {
        what: String,
        residue: f64,
        tolerance: f64,
    },

    #[error("need at least {needed} shells for the decay fit, found {found}")]
    InsufficientShells { needed: usize, found: usize },

    #[error("zero-temperature force constants require a q-grid that excludes q = 0")]
    UnshiftedGridAtZeroTemperature,

    #[error("point x = 0 is outside the domain of the dipole kernel")]
    ZeroSeparation,

    #[error("missing artifact {path}: run `{step}` first")]
    MissingArtifact { path: String, step: String },

    #[error("malformed artifact {path}: {message}")]
    Artifact { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for this failure: 2 for configuration problems,
    /// 4 when the gapped-insulator assumption fails, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::InvalidInput(_)
            | Error::UnshiftedGridAtZeroTemperature
            | Error::MissingArtifact { .. } => 2,
            Error::NoGap { .. } => 4,
            Error::ScfAborted { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
