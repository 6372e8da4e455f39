//! Exhaustive enumeration of all `M^d` mode sequences.

use crate::linalg::{quad_form, Vector};
use crate::riccati::MemoCache;
use crate::system::{ModeSequence, SwitchedSystem};
use crate::{Error, Result};

pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub sequence: ModeSequence,
    pub value: f64,
    /// Number of sequences whose cost was evaluated.
    pub visited: u128,
}

/// `M^d`, or `None` on overflow.
pub fn sequence_count(modes: usize, d: usize) -> Option<u128> {
    (modes as u128).checked_pow(u32::try_from(d).ok()?)
}

/// Lexicographically first minimizer of `xᵀ P_seq x` over all sequences of
/// length `d`.
pub fn brute_force_plan(
    system: &SwitchedSystem,
    x: &Vector,
    d: usize,
    cache: &mut MemoCache,
    cap: u128,
) -> Result<OracleResult> {
    if x.len() != system.n_x() {
        return Err(Error::Dimension(format!(
            "state has length {}, expected {}",
            x.len(),
            system.n_x()
        )));
    }
    let modes = system.num_modes();
    let count = sequence_count(modes, d).unwrap_or(u128::MAX);
    if count > cap {
        return Err(Error::EnumerationCap { count, cap });
    }

    let mut digits = vec![0usize; d];
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut visited = 0u128;
    loop {
        let value = quad_form(cache.cost_matrix(system, &digits)?, x);
        visited += 1;
        if best.as_ref().is_none_or(|(_, v)| value < *v) {
            best = Some((digits.clone(), value));
        }
        // Odometer increment, last position fastest.
        let mut pos = d;
        loop {
            if pos == 0 {
                let (seq, value) = best.expect("at least one sequence visited");
                return Ok(OracleResult {
                    sequence: ModeSequence::new(seq),
                    value,
                    visited,
                });
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < modes {
                break;
            }
            digits[pos] = 0;
        }
    }
}
