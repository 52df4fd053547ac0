//! The dense QP solver on its own: a box-constrained least-distance problem
//! with one coupling row, solved cold and then warm.

use pcca::qp::{kkt_residuals, QpProblem, QpSolver, SparseRow};

fn main() {
    // min (z0 - 3)^2 + 2 (z1 + 1)^2   s.t.  z0 + z1 <= 1,  -2 <= z <= 2
    let p = QpProblem::diagonal(&[2.0, 4.0], vec![-6.0, 4.0])
        .with_rows(vec![SparseRow::new(vec![(0, -1.0), (1, -1.0)], 1.0)])
        .with_bounds(vec![-2.0, -2.0], vec![2.0, 2.0]);

    let mut solver = QpSolver::new();
    let cold = solver.solve(&p, None);
    println!("status {:?} after {} iterations", cold.status, cold.iterations);
    println!("z = [{:.6}, {:.6}], objective {:.6}", cold.z[0], cold.z[1], p.objective(&cold.z));
    println!("active set {:?}", cold.active_set);
    println!("KKT residuals {:?}", kkt_residuals(&p, &cold));

    let warm = solver.solve(&p, Some(&cold.active_set));
    println!("warm start: {} iterations", warm.iterations);
}
