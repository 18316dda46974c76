//! Shared fixtures for the benchmarks.

use gradphi::lattice::make_torus;
use gradphi::{QMatrix, Torus};

/// Torus with `d = 2`, `L = 3` and the given number of scales.
pub fn planar_torus(n: u32) -> Torus {
    make_torus(2, 3, n).expect("valid benchmark geometry")
}

/// A fixed anisotropic `q` used across benchmarks.
pub fn bench_q() -> QMatrix {
    QMatrix::new(2, vec![0.1, 0.05, 0.05, -0.1]).expect("valid q")
}
