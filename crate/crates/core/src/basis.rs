use nalgebra::Vector3;

use crate::lattice::Lattice;

/// Relative slack applied to the cutoff test so that shells lying exactly on
/// the sphere are not lost to rounding in the reciprocal vectors.
const CUTOFF_SLACK: f64 = 1e-12;

/// Dense lookup table from integer triples to basis indices, covering the
/// bounding box `[-m_i, m_i]` of the stored triples.
#[derive(Clone, Debug)]
struct BoxIndex {
    half: [i32; 3],
    slots: Vec<u32>,
}

impl BoxIndex {
    fn new(millers: &[[i32; 3]]) -> Self {
        let mut half = [0i32; 3];
        for m in millers {
            for d in 0..3 {
                half[d] = half[d].max(m[d].abs());
            }
        }
        let dims = half.map(|h| (2 * h + 1) as usize);
        let mut slots = vec![u32::MAX; dims[0] * dims[1] * dims[2]];
        let mut index = Self {
            half,
            slots: Vec::new(),
        };
        for (i, m) in millers.iter().enumerate() {
            let at = index.slot(*m).expect("triple inside its own bounding box");
            slots[at] = i as u32;
        }
        index.slots = slots;
        index
    }

    #[inline]
    fn slot(&self, m: [i32; 3]) -> Option<usize> {
        let mut at = 0usize;
        for d in 0..3 {
            let h = self.half[d];
            if m[d] < -h || m[d] > h {
                return None;
            }
            at = at * (2 * h + 1) as usize + (m[d] + h) as usize;
        }
        Some(at)
    }

    #[inline]
    fn get(&self, m: [i32; 3]) -> Option<usize> {
        let v = self.slots[self.slot(m)?];
        (v != u32::MAX).then_some(v as usize)
    }
}

/// Truncated plane-wave basis `{e_G : ½|k+G|² ≤ Ecut}` around a centre `k`.
///
/// With `k = 0` this is the basis used for periodic functions (densities,
/// potentials) and for all response matrices: it is inversion-symmetric and
/// index 0 is `G = 0`. Wavefunction fibers use the same construction centred
/// at their own `k`, which keeps the spectra exactly periodic in `k`.
#[derive(Clone, Debug)]
pub struct PlaneWaveBasis {
    pub ecut: f64,
    pub k: Vector3<f64>,
    pub lattice: Lattice,
    millers: Vec<[i32; 3]>,
    gvectors: Vec<Vector3<f64>>,
    index: BoxIndex,
}

/// Basis of all `G` with `½|G|² ≤ Ecut`, ordered by `|G|²` then by the
/// integer triple.
pub fn build_basis(lattice: &Lattice, ecut: f64) -> PlaneWaveBasis {
    PlaneWaveBasis::centered(lattice, ecut, Vector3::zeros())
}

impl PlaneWaveBasis {
    /// Basis of all `G` with `½|k+G|² ≤ Ecut`, ordered by `|k+G|²` then by the
    /// integer triple.
    pub fn centered(lattice: &Lattice, ecut: f64, k: Vector3<f64>) -> Self {
        Self::anchored(lattice, ecut, k, k)
    }

    /// Sphere `{G : ½|c + G|² ≤ Ecut}` around an anchor `c`, carrying the
    /// Bloch vector `k` for the kinetic energy. Keeping the anchor fixed while
    /// `k` moves makes fiber spectra smooth in `k`.
    pub fn anchored(lattice: &Lattice, ecut: f64, anchor: Vector3<f64>, k: Vector3<f64>) -> Self {
        assert!(ecut > 0.0, "cutoff must be positive");
        let gmax = (2.0 * ecut).sqrt();
        let limit = 2.0 * ecut * (1.0 + CUTOFF_SLACK) + CUTOFF_SLACK;
        let reach = gmax + anchor.norm();
        let bound: [i32; 3] = std::array::from_fn(|i| {
            (reach * lattice.direct[i].norm() / (2.0 * std::f64::consts::PI)).floor() as i32 + 1
        });

        let mut entries: Vec<(i64, [i32; 3], Vector3<f64>)> = Vec::new();
        for n0 in -bound[0]..=bound[0] {
            for n1 in -bound[1]..=bound[1] {
                for n2 in -bound[2]..=bound[2] {
                    let m = [n0, n1, n2];
                    let g = lattice.reciprocal_vector(m);
                    let kg2 = (anchor + g).norm_squared();
                    if kg2 <= limit {
                        // Quantised key gives a total order that still groups
                        // symmetry-equivalent shells despite rounding.
                        let key = (kg2 * 1e9).round() as i64;
                        entries.push((key, m, g));
                    }
                }
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));

        let millers: Vec<[i32; 3]> = entries.iter().map(|e| e.1).collect();
        let gvectors = entries.iter().map(|e| e.2).collect();
        let index = BoxIndex::new(&millers);
        Self {
            ecut,
            k,
            lattice: lattice.clone(),
            millers,
            gvectors,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.millers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.millers.is_empty()
    }

    /// Integer triples `n` with `G = Σ n_i b_i`, in basis order.
    pub fn millers(&self) -> &[[i32; 3]] {
        &self.millers
    }

    /// Cartesian `G` vectors, in basis order.
    pub fn gvectors(&self) -> &[Vector3<f64>] {
        &self.gvectors
    }

    /// Index of the integer triple `n`, if stored.
    #[inline]
    pub fn lookup(&self, n: [i32; 3]) -> Option<usize> {
        self.index.get(n)
    }

    /// Kinetic energies `½|k+G|²`.
    pub fn kinetic(&self) -> Vec<f64> {
        self.gvectors
            .iter()
            .map(|g| 0.5 * (self.k + g).norm_squared())
            .collect()
    }

    /// Index of `-G` for every `G`; only meaningful for `k = 0` bases.
    pub fn negation_map(&self) -> Vec<usize> {
        self.millers
            .iter()
            .map(|m| {
                self.lookup([-m[0], -m[1], -m[2]])
                    .expect("centred basis is inversion symmetric")
            })
            .collect()
    }
}

#[inline]
pub(crate) fn add3(a: [i32; 3], b: [i32; 3]) -> [i32; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn sub3(a: [i32; 3], b: [i32; 3]) -> [i32; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
