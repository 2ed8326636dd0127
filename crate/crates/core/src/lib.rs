//! Plane-wave reduced Hartree–Fock for periodic crystals, its linear
//! response, and the interatomic force constants derived from it.
//!
//! The crate is organised bottom-up:
//!
//! * [`lattice`], [`crystal`], [`basis`], [`kgrid`] — geometry, the
//!   truncated plane-wave basis and Fourier conventions;
//! * [`hamiltonian`] — Bloch fibers, Fermi level, densities, DOS;
//! * [`scf`] — self-consistent ground state and reference forces;
//! * [`response`] — independent-particle susceptibility, dielectric and
//!   screened Coulomb blocks;
//! * [`screening`] — macroscopic dielectric tensor and Born charges;
//! * [`ifc`] — dynamical matrices, force constants and their decay;
//! * [`config`], [`artifacts`], [`pipeline`] — the file-based workflow
//!   driven by the command-line tool.
//!
//! Everything uses Hartree atomic units. Periodic functions are expanded in
//! the orthonormal basis `e_G(x) = |Ω|^{-1/2} e^{iG·x}`, so a coefficient
//! `c_G(f) = ⟨e_G, f⟩`.

pub mod artifacts;
pub mod basis;
pub mod config;
pub mod crystal;
pub mod error;
pub mod hamiltonian;
pub mod ifc;
pub mod kgrid;
pub mod lattice;
pub mod pipeline;
pub mod response;
pub mod scf;
pub mod screening;

pub use error::{Error, Result};

/// Complex scalar used throughout; identical to faer's `c64`.
pub type C64 = num_complex::Complex<f64>;
