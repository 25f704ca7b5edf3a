//! Fixtures shared by the benchmarks.

use hkm::pipeline::{inspector_p1, inspector_p2, P1Config, P2Config};
use hkm::points::synth_points;
use hkm::{DenseMatrix, Executor, Kernel, PlanDefaults, PointSet, Shape};

pub struct Fixture {
    pub points: PointSet,
    pub kernel: Kernel,
    pub executor: Executor,
}

/// Compressed inverse-distance matrix on a 2-d grid.
pub fn grid_fixture(n: usize, workers: usize) -> Fixture {
    let points = synth_points(Shape::Grid2d, n, 0).expect("synthetic points");
    let p1 = inspector_p1(&points, &P1Config::default()).expect("phase one");
    let cfg = P2Config {
        kernel: Kernel::InverseDistance,
        bacc: 1e-3,
        plan: PlanDefaults { workers, ..PlanDefaults::default() },
        ..P2Config::default()
    };
    let p2 = inspector_p2(&p1, &cfg).expect("phase two");
    let executor = p2.executor().expect("executor");
    Fixture { points, kernel: cfg.kernel, executor }
}

impl Fixture {
    pub fn kernel_matrix(&self) -> DenseMatrix {
        let n = self.points.len();
        DenseMatrix::from_fn(n, n, |r, c| self.kernel.from_sq_dist(self.points.dist2(r, c)))
    }
}

/// Deterministic right-hand side with entries in `[-1, 1]`.
pub fn rhs(n: usize, q: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n, q, |r, c| (((r * 31 + c * 17) % 97) as f64) / 48.0 - 1.0)
}
