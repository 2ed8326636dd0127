//! Lattice, plane-wave basis and k-grid invariants.

use nalgebra::Vector3;
use proptest::prelude::*;
use rhf_ifc::basis::{build_basis, PlaneWaveBasis};
use rhf_ifc::kgrid::KGrid;
use rhf_ifc::lattice::{reciprocal_lattice, Lattice};

/// Slightly sheared cell with lattice constant `a`.
fn sheared(a: f64, s: f64) -> Lattice {
    reciprocal_lattice(
        Vector3::new(a, 0.0, 0.0),
        Vector3::new(s * a, a, 0.0),
        Vector3::new(0.0, s * a, 1.1 * a),
    )
    .unwrap()
}

/// Brute-force count of `G` with `½|G + k|² ≤ Ecut`.
fn brute_count(lattice: &Lattice, ecut: f64, k: &Vector3<f64>) -> usize {
    let m = 12;
    let mut n = 0;
    for i in -m..=m {
        for j in -m..=m {
            for l in -m..=m {
                if 0.5 * (k + lattice.reciprocal_vector([i, j, l])).norm_squared() <= ecut {
                    n += 1;
                }
            }
        }
    }
    n
}

#[test]
fn reciprocal_vectors_are_dual() {
    let l = sheared(4.0, 0.2);
    for i in 0..3 {
        for j in 0..3 {
            let mut ni = [0; 3];
            let mut nj = [0; 3];
            ni[i] = 1;
            nj[j] = 1;
            let dot = l.translation(ni).dot(&l.reciprocal_vector(nj));
            let expected = if i == j { 2.0 * std::f64::consts::PI } else { 0.0 };
            assert!((dot - expected).abs() < 1e-12);
        }
    }
    assert!((l.cell_volume * l.reciprocal_volume - (2.0 * std::f64::consts::PI).powi(3)).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sphere_matches_brute_force(a in 3.0f64..7.0, s in 0.0f64..0.3, ecut in 0.5f64..4.0,
                                  k in prop::array::uniform3(-0.5f64..0.5)) {
        let lattice = sheared(a, s);
        let k = lattice.reciprocal_from_fractional(&Vector3::from(k));
        let basis = PlaneWaveBasis::centered(&lattice, ecut, k);
        prop_assert_eq!(basis.len(), brute_count(&lattice, ecut, &k));
        for g in basis.gvectors() {
            prop_assert!(0.5 * (k + g).norm_squared() <= ecut);
        }
    }

    #[test]
    fn lookup_inverts_enumeration(a in 3.0f64..7.0, s in 0.0f64..0.3, ecut in 0.5f64..4.0) {
        let basis = build_basis(&sheared(a, s), ecut);
        for (i, m) in basis.millers().iter().enumerate() {
            prop_assert_eq!(basis.lookup(*m), Some(i));
        }
        prop_assert_eq!(basis.millers()[0], [0, 0, 0]);
    }

    #[test]
    fn negation_map_is_an_involution(a in 3.0f64..7.0, s in 0.0f64..0.3, ecut in 0.5f64..4.0) {
        let basis = build_basis(&sheared(a, s), ecut);
        let neg = basis.negation_map();
        for (i, m) in basis.millers().iter().enumerate() {
            prop_assert_eq!(neg[neg[i]], i);
            prop_assert_eq!(basis.millers()[neg[i]], [-m[0], -m[1], -m[2]]);
        }
    }

    #[test]
    fn kinetic_energies_are_sorted_by_shell(a in 3.0f64..7.0, ecut in 0.5f64..4.0) {
        let basis = build_basis(&Lattice::cubic(a).unwrap(), ecut);
        let t = basis.kinetic();
        for w in t.windows(2) {
            prop_assert!(w[0] <= w[1] + 1e-12);
        }
    }

    #[test]
    fn kgrid_locates_every_point_up_to_umklapp(n in 1usize..5, shift in prop::array::uniform3(0.0f64..1.0),
                                               g in prop::array::uniform3(-2i32..3)) {
        let grid = KGrid::new(n, Vector3::from(shift)).unwrap();
        for (i, f) in grid.fractional_points().iter().enumerate() {
            let moved = f + Vector3::new(g[0] as f64, g[1] as f64, g[2] as f64);
            let (j, _) = grid.locate_fractional(&moved).expect("on grid");
            prop_assert_eq!(i, j);
        }
    }

    #[test]
    fn fractional_coordinates_round_trip(a in 3.0f64..7.0, s in 0.0f64..0.3,
                                         f in prop::array::uniform3(-1.0f64..1.0)) {
        let lattice = sheared(a, s);
        let f = Vector3::from(f);
        let back = lattice.reciprocal_fractional(&lattice.reciprocal_from_fractional(&f));
        prop_assert!((back - f).norm() < 1e-12);
    }
}
