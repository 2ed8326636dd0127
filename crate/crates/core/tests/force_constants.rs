//! Force-constant transforms and decay analysis.

use faer::Mat;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rhf_ifc::ifc::{
    dynamical_from_ifc, fit_exponential_decay, ifc_from_dynamical, plan_q_grid, shells, wigner_seitz_vectors,
    DynamicalMatrix, ForceConstantTable, IfcEntry,
};
use rhf_ifc::lattice::{reciprocal_lattice, Lattice};
use rhf_ifc::C64;

fn lattice(s: f64) -> Lattice {
    reciprocal_lattice(
        Vector3::new(3.0, 0.0, 0.0),
        Vector3::new(s, 3.2, 0.0),
        Vector3::new(0.0, s, 2.9),
    )
    .unwrap()
}

/// Random Hermitian `D(q)` on a q-grid obeying `D(−q) = conj(D(q))`.
fn random_dynamical(lattice: &Lattice, n_q: usize, shifted: bool, n_at: usize, seed: u64) -> Vec<DynamicalMatrix> {
    let plan = plan_q_grid(n_q, shifted).unwrap();
    let n3 = 3 * n_at;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reps: Vec<Mat<C64>> = plan
        .representatives
        .iter()
        .map(|&i| {
            let a = Mat::from_fn(n3, n3, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
            let h = Mat::from_fn(n3, n3, |r, c| a[(r, c)] + a[(c, r)].conj());
            // A point equal to its own partner carries a real matrix.
            let q = plan.points[i];
            let self_partner = (q * 2.0).iter().all(|x| (x - x.round()).abs() < 1e-9);
            if self_partner {
                Mat::from_fn(n3, n3, |r, c| C64::new(h[(r, c)].re, 0.0))
            } else {
                h
            }
        })
        .collect();
    plan.points
        .iter()
        .zip(&plan.source)
        .map(|(q, &(r, conj))| {
            let d = &reps[r];
            DynamicalMatrix {
                q_frac: *q,
                q: lattice.reciprocal_from_fractional(q),
                data: Mat::from_fn(n3, n3, |i, j| if conj { d[(i, j)].conj() } else { d[(i, j)] }),
                antihermitian_residual: 0.0,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dynamical_to_force_constants_round_trip(n_q in 1usize..5, shifted: bool, n_at in 1usize..3,
                                               s in 0.0f64..0.6, seed: u64) {
        let lattice = lattice(s);
        let dmats = random_dynamical(&lattice, n_q, shifted, n_at, seed);
        let table = ifc_from_dynamical(&lattice, n_q, shifted, &dmats).unwrap();
        prop_assert!(table.max_imag < 1e-12);
        for d in &dmats {
            let back = dynamical_from_ifc(&table, d.q_frac);
            for i in 0..3 * n_at {
                for j in 0..3 * n_at {
                    prop_assert!((back[(i, j)] - d.data[(i, j)]).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn wigner_seitz_weights_cover_the_supercell(n_q in 1usize..6, s in 0.0f64..0.6) {
        let lattice = lattice(s);
        let ws = wigner_seitz_vectors(&lattice, n_q);
        let total: f64 = ws.iter().map(|(_, w)| w).sum();
        prop_assert!((total - (n_q * n_q * n_q) as f64).abs() < 1e-9);
        for (r, w) in &ws {
            prop_assert!(*w > 0.0 && *w <= 1.0);
            // No image of r modulo n_q is strictly shorter.
            let n = n_q as i32;
            let len = lattice.translation(*r).norm();
            for t in [[n, 0, 0], [0, n, 0], [0, 0, n], [-n, 0, 0], [0, -n, 0], [0, 0, -n]] {
                let image = [r[0] + t[0], r[1] + t[1], r[2] + t[2]];
                prop_assert!(lattice.translation(image).norm() >= len - 1e-8);
            }
        }
    }
}

#[test]
fn time_reversal_plan_pairs_every_point_with_its_negative() {
    for (n_q, shifted) in [(4, true), (5, false), (6, true), (6, false)] {
        let plan = plan_q_grid(n_q, shifted).unwrap();
        assert!(plan.representatives.len() * 2 >= plan.points.len());
        for (i, &(r, conj)) in plan.source.iter().enumerate() {
            let rep = plan.points[plan.representatives[r]];
            let q = plan.points[i];
            let target = if conj { -rep } else { rep };
            assert!((q - target).iter().all(|x| (x - x.round()).abs() < 1e-9));
        }
    }
}

/// Synthetic table with `C(R) = A e^{−η|R|}` on every lattice vector.
fn exponential_table(eta: f64, n_q: usize) -> ForceConstantTable {
    let lattice = Lattice::cubic(2.0).unwrap();
    let entries = wigner_seitz_vectors(&lattice, n_q)
        .into_iter()
        .map(|(r, weight)| {
            let r_cart = lattice.translation(r);
            IfcEntry {
                r,
                r_cart,
                weight,
                blocks: vec![Matrix3::identity() * 3.0 * (-eta * r_cart.norm()).exp()],
            }
        })
        .collect();
    ForceConstantTable {
        n_q,
        shifted: false,
        n_atoms: 1,
        lattice: lattice.clone(),
        entries,
        max_imag: 0.0,
        aliasing_radius: (n_q / 2) as f64 * lattice.min_translation_length(),
    }
}

#[test]
fn decay_fit_recovers_a_synthetic_rate() {
    let table = exponential_table(0.8, 8);
    let fit = fit_exponential_decay(&table).unwrap();
    assert!((fit.eta - 0.8).abs() < 1e-10);
    assert!((fit.r_squared - 1.0).abs() < 1e-12);
    // Shells stay inside the aliasing radius and exclude boundary vectors.
    for s in shells(&table) {
        assert!(s.radius > 0.0 && s.radius <= table.aliasing_radius + 1e-9);
    }
}

#[test]
fn too_few_shells_is_an_error() {
    let table = exponential_table(0.8, 2);
    assert!(fit_exponential_decay(&table).is_err());
}
