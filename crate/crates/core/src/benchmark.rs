//! The two-mode, two-state benchmark with identity state weights and unit
//! input weights, together with its published bound matrices.

use crate::linalg::Matrix;
use crate::system::{ModeData, SwitchedSystem};

pub fn system() -> SwitchedSystem {
    let q = Matrix::identity(2, 2);
    let r = Matrix::identity(1, 1);
    let modes = vec![
        ModeData {
            a: Matrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 1.0]),
            b: Matrix::from_row_slice(2, 1, &[1.0, 1.0]),
            q: q.clone(),
            r: r.clone(),
        },
        ModeData {
            a: Matrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 0.5]),
            b: Matrix::from_row_slice(2, 1, &[1.0, 2.0]),
            q,
            r,
        },
    ];
    SwitchedSystem::new(modes).expect("benchmark system is well formed")
}

/// Published upper-bound matrix, two decimals.
pub fn upper_bound() -> Matrix {
    Matrix::from_row_slice(2, 2, &[6.91, 1.32, 1.32, 1.92])
}

/// Published terminal matrix, two decimals.
pub fn terminal() -> Matrix {
    Matrix::from_row_slice(2, 2, &[5.05, 1.40, 1.40, 1.5])
}

/// The published terminal matrix shrunk by bisection onto the largest
/// multiple that satisfies the terminal-cost condition. The two-decimal
/// rounding leaves the published matrix slightly infeasible on mode 2.
pub fn feasible_terminal() -> Matrix {
    let sys = system();
    let candidate = terminal();
    crate::certificates::scalar_feasible_terminal(&sys, &candidate, 0.0)
        .expect("benchmark matrices have matching shapes")
        .p
}
