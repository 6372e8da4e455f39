//! Certificates around the planner: the terminal-cost condition that makes
//! finite-horizon costs monotone, the quadratic upper bound `P̄`, the decay
//! constants `α`, `α₀`, `λ_d`, `β`, the minimum horizon, the worst-case budget
//! and the near-optimality gap.

use log::warn;
use serde::Serialize;

use crate::linalg::{
    max_abs_entry, max_eigenvalue, min_eigenvalue, quad_form, symmetrize, Matrix, Vector,
};
use crate::riccati::{
    dare_fixed_point, discrete_lyapunov, lyapunov_default_tol, DareSolution, DARE_MAX_ITER,
    DARE_TOL,
};
use crate::system::SwitchedSystem;
use crate::{Error, Result};

/// Upper clamp applied to `α`.
pub const ALPHA_CEILING: f64 = 1.0 - 1e-9;

fn scale_tol(ms: &[&Matrix]) -> f64 {
    1e-9 * (1.0 + ms.iter().map(|m| max_abs_entry(m)).fold(0.0, f64::max))
}

fn check_state_matrix(system: &SwitchedSystem, p: &Matrix, what: &str) -> Result<()> {
    let n = system.n_x();
    if p.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "{what} is {}x{}, expected {n}x{n}",
            p.nrows(),
            p.ncols()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TerminalConditionReport {
    /// Minimum eigenvalue of each mode's block matrix, in mode order.
    pub block_min_eigenvalues: Vec<f64>,
    pub terminal_min_eigenvalue: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl TerminalConditionReport {
    pub fn min_block_eigenvalue(&self) -> f64 {
        self.block_min_eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Checks, for every mode, that
///
/// ```text
/// [ AᵀPA − P + Q   AᵀPB     ]
/// [ BᵀPA           R + BᵀPB ]  ⪰ 0
/// ```
///
/// and that `P ⪰ 0`, both up to `−tol`.
pub fn verify_terminal_condition(
    system: &SwitchedSystem,
    p_lower: &Matrix,
    tol: f64,
) -> Result<TerminalConditionReport> {
    check_state_matrix(system, p_lower, "terminal matrix")?;
    let (n, m) = (system.n_x(), system.n_u());
    let block_min_eigenvalues = system
        .modes()
        .iter()
        .map(|md| {
            let pa = p_lower * &md.a;
            let pb = p_lower * &md.b;
            let mut block = Matrix::zeros(n + m, n + m);
            block
                .view_mut((0, 0), (n, n))
                .copy_from(&(md.a.transpose() * &pa - p_lower + &md.q));
            let cross = md.a.transpose() * &pb;
            block.view_mut((0, n), (n, m)).copy_from(&cross);
            block.view_mut((n, 0), (m, n)).copy_from(&cross.transpose());
            block
                .view_mut((n, n), (m, m))
                .copy_from(&(&md.r + md.b.transpose() * &pb));
            min_eigenvalue(&block)
        })
        .collect::<Vec<_>>();
    let terminal_min_eigenvalue = min_eigenvalue(p_lower);
    let passed =
        terminal_min_eigenvalue >= -tol && block_min_eigenvalues.iter().all(|&e| e >= -tol);
    Ok(TerminalConditionReport {
        block_min_eigenvalues,
        terminal_min_eigenvalue,
        tolerance: tol,
        passed,
    })
}

/// Tolerance used by [`verify_terminal_condition`] when callers have no
/// opinion: the system's scale-aware tolerance, widened by the terminal
/// matrix's magnitude.
pub fn default_terminal_tol(system: &SwitchedSystem, p_lower: &Matrix) -> f64 {
    system.default_tolerance().max(scale_tol(&[p_lower]))
}

#[derive(Debug, Clone)]
pub struct UpperBound {
    pub p: Matrix,
    /// 0-based mode whose LQR policy certifies the bound.
    pub mode: usize,
    pub gain: Matrix,
}

/// Cost of the single-mode LQR policy of `mode`: solves the mode's Riccati
/// fixed point, then the Lyapunov equation of the resulting closed loop.
pub fn upper_bound_from_mode(system: &SwitchedSystem, mode: usize) -> Result<UpperBound> {
    let DareSolution { gain, .. } = dare_fixed_point(system, mode, DARE_MAX_ITER, DARE_TOL)?;
    let md = system.mode(mode)?;
    let a_cl = &md.a - &md.b * &gain;
    let w = symmetrize(&(&md.q + gain.transpose() * &md.r * &gain));
    let p = discrete_lyapunov(&a_cl, &w, lyapunov_default_tol(&w))?;
    Ok(UpperBound { p, mode, gain })
}

/// Upper bound from the first mode whose Riccati fixed point converges.
pub fn construct_upper_bound(system: &SwitchedSystem) -> Result<UpperBound> {
    (0..system.num_modes())
        .find_map(|i| upper_bound_from_mode(system, i).ok())
        .ok_or(Error::NoStabilizableMode)
}

fn require_pd(p: &Matrix, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    nalgebra::Cholesky::new(symmetrize(p)).ok_or_else(|| Error::NotPositiveDefinite(what.into()))
}

/// Largest `α` with `α P̄ ⪯ Q_i` for every mode, i.e. the smallest generalized
/// eigenvalue of the pencils `(Q_i, P̄)`. Values at or above one are clamped
/// to [`ALPHA_CEILING`].
pub fn compute_alpha(system: &SwitchedSystem, p_upper: &Matrix) -> Result<f64> {
    check_state_matrix(system, p_upper, "upper-bound matrix")?;
    let chol = require_pd(p_upper, "upper-bound matrix")?;
    let l = chol.l();
    let alpha = system
        .modes()
        .iter()
        .map(|md| {
            // L⁻¹ Q L⁻ᵀ
            let left = l
                .solve_lower_triangular(&md.q)
                .expect("Cholesky factor is invertible");
            let both = l
                .solve_lower_triangular(&left.transpose())
                .expect("Cholesky factor is invertible");
            min_eigenvalue(&both)
        })
        .fold(f64::INFINITY, f64::min);
    if alpha >= 1.0 {
        warn!("alpha = {alpha} is not below one; clamping to {ALPHA_CEILING}");
        return Ok(ALPHA_CEILING);
    }
    Ok(alpha)
}

/// `min_i λ_min(Q_i) / λ_max(P̄)`, always feasible but usually smaller than
/// [`compute_alpha`].
pub fn conservative_alpha(system: &SwitchedSystem, p_upper: &Matrix) -> f64 {
    system.min_q_eigenvalue() / max_eigenvalue(p_upper)
}

/// Largest `α₀` with `α₀ (P̄ − P̲) ⪯ Q_i` for every mode; `f64::INFINITY` when
/// `P̄ − P̲` vanishes.
///
/// Only directions in the range of `D = P̄ − P̲` constrain `α₀`. In the
/// eigenbasis of `D`, `α₀` is the smallest eigenvalue of `Λ^{-1/2} S_i Λ^{-1/2}`
/// where `Λ` holds the nonzero eigenvalues of `D` and `S_i` is the Schur
/// complement of `Q_i` onto the corresponding block.
pub fn compute_alpha0(system: &SwitchedSystem, p_upper: &Matrix, p_lower: &Matrix) -> Result<f64> {
    check_state_matrix(system, p_upper, "upper-bound matrix")?;
    check_state_matrix(system, p_lower, "terminal matrix")?;
    let d = symmetrize(&(p_upper - p_lower));
    let tol = scale_tol(&[p_upper, p_lower]);
    let eig = d.clone().symmetric_eigen();
    let lowest = eig
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if lowest < -tol {
        return Err(Error::NotPositiveDefinite(format!(
            "upper minus lower bound has eigenvalue {lowest}"
        )));
    }
    let range: Vec<usize> = (0..d.nrows())
        .filter(|&k| eig.eigenvalues[k] > tol)
        .collect();
    if range.is_empty() {
        return Ok(f64::INFINITY);
    }
    let null: Vec<usize> = (0..d.nrows())
        .filter(|&k| eig.eigenvalues[k] <= tol)
        .collect();
    let v_r = eig.eigenvectors.select_columns(range.iter());
    let v_n = eig.eigenvectors.select_columns(null.iter());
    let inv_sqrt: Vec<f64> = range
        .iter()
        .map(|&k| eig.eigenvalues[k].sqrt().recip())
        .collect();

    let mut alpha0 = f64::INFINITY;
    for md in system.modes() {
        let q_rr = v_r.transpose() * &md.q * &v_r;
        let s = if null.is_empty() {
            q_rr
        } else {
            let q_rn = v_r.transpose() * &md.q * &v_n;
            let q_nn = v_n.transpose() * &md.q * &v_n;
            let chol = require_pd(&q_nn, "Q restricted to the null space of the bound gap")?;
            q_rr - &q_rn * chol.solve(&q_rn.transpose())
        };
        let mut scaled = s;
        for (a, &sa) in inv_sqrt.iter().enumerate() {
            for (b, &sb) in inv_sqrt.iter().enumerate() {
                scaled[(a, b)] *= sa * sb;
            }
        }
        alpha0 = alpha0.min(min_eigenvalue(&scaled));
    }
    Ok(alpha0)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

fn check_alpha0(alpha0: f64) -> Result<()> {
    if !(alpha0 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha0 must be positive, got {alpha0}"
        )));
    }
    Ok(())
}

/// Smallest integer `d > max{1, log(α₀α)/log(1−α) + 1}`.
pub fn min_stabilizing_horizon(alpha: f64, alpha0: f64) -> Result<usize> {
    check_alpha(alpha)?;
    check_alpha0(alpha0)?;
    if alpha0.is_infinite() {
        return Ok(2);
    }
    let bound = ((alpha0 * alpha).ln() / (1.0 - alpha).ln() + 1.0).max(1.0);
    let nearest = bound.round();
    let d = if (bound - nearest).abs() < 1e-12 {
        nearest + 1.0
    } else {
        bound.floor() + 1.0
    };
    Ok(d as usize)
}

/// `λ_d = 1 − α + (1−α)^{d−1}/α₀`.
pub fn decay_rate(alpha: f64, alpha0: f64, d: usize) -> f64 {
    let tail = if alpha0.is_infinite() {
        0.0
    } else {
        (1.0 - alpha).powi(d as i32 - 1) / alpha0
    };
    1.0 - alpha + tail
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayConstants {
    pub d: usize,
    pub lambda_d: f64,
    pub beta: f64,
    /// `λ_d < 1`: the closed loop at this horizon carries a stability guarantee.
    pub certified: bool,
}

/// `λ_d` together with `β = λ_max(P̄) / min_i λ_min(Q_i)`.
pub fn decay_constants(
    system: &SwitchedSystem,
    p_upper: &Matrix,
    alpha: f64,
    alpha0: f64,
    d: usize,
) -> Result<DecayConstants> {
    check_alpha(alpha)?;
    check_alpha0(alpha0)?;
    if d < 2 {
        return Err(Error::InvalidParameter(format!(
            "decay constants need d >= 2, got {d}"
        )));
    }
    let lambda_d = decay_rate(alpha, alpha0, d);
    Ok(DecayConstants {
        d,
        lambda_d,
        beta: max_eigenvalue(p_upper) / system.min_q_eigenvalue(),
        certified: lambda_d < 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuboptimalityGap {
    /// Bound on `V*(x) − V*_d(x)`.
    pub absolute: f64,
    /// Bound on `(V*(x) − V*_d(x)) / V*(x)`; zero by convention at `x = 0`.
    pub relative: f64,
}

/// `(1/α₀)(1−α)^{d−1} xᵀP̄x` and its state-free relative form.
pub fn suboptimality_bound(
    alpha: f64,
    alpha0: f64,
    d: usize,
    p_upper: &Matrix,
    x: &Vector,
) -> Result<SuboptimalityGap> {
    check_alpha(alpha)?;
    check_alpha0(alpha0)?;
    if d < 2 {
        return Err(Error::InvalidParameter(format!(
            "the near-optimality gap needs d > 1, got {d}"
        )));
    }
    let relative = if alpha0.is_infinite() {
        0.0
    } else {
        (1.0 - alpha).powi(d as i32 - 1) / alpha0
    };
    let absolute = relative * quad_form(p_upper, x);
    let relative = if x.iter().all(|&v| v == 0.0) {
        0.0
    } else {
        relative
    };
    Ok(SuboptimalityGap { absolute, relative })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaledTerminal {
    pub scale: f64,
    pub p: Matrix,
    pub report: TerminalConditionReport,
}

/// Largest `c ∈ [0, 1]` (by bisection) such that `c · candidate` satisfies the
/// terminal condition. `c = 0` is always feasible.
pub fn scalar_feasible_terminal(
    system: &SwitchedSystem,
    candidate: &Matrix,
    tol: f64,
) -> Result<ScaledTerminal> {
    let check = |c: f64| verify_terminal_condition(system, &(candidate * c), tol);
    let full = check(1.0)?;
    if full.passed {
        return Ok(ScaledTerminal {
            scale: 1.0,
            p: candidate.clone(),
            report: full,
        });
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if check(mid)?.passed {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = candidate * lo;
    let report = check(lo)?;
    Ok(ScaledTerminal {
        scale: lo,
        p,
        report,
    })
}

/// `(M^{d+1} − 1)/(M − 1) + 1`, or `d + 2` when `M = 1`.
pub fn worst_case_budget(modes: usize, d: usize) -> Result<u128> {
    if modes == 0 {
        return Err(Error::InvalidParameter("need at least one mode".into()));
    }
    let overflow = Error::BudgetOverflow { modes, depth: d };
    if modes == 1 {
        return (d as u128).checked_add(2).ok_or(overflow);
    }
    let m = modes as u128;
    let exp = u32::try_from(d + 1).map_err(|_| overflow.clone())?;
    let power = m.checked_pow(exp).ok_or(overflow)?;
    Ok((power - 1) / (m - 1) + 1)
}

fn serialize_matrix<S: serde::Serializer>(
    m: &Matrix,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

/// Everything the guarantees need for one choice of `P̄`, `P̲` and horizon.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateReport {
    #[serde(serialize_with = "serialize_matrix")]
    pub p_upper: Matrix,
    #[serde(serialize_with = "serialize_matrix")]
    pub p_lower: Matrix,
    pub terminal_condition: TerminalConditionReport,
    pub alpha: f64,
    pub conservative_alpha: f64,
    /// `None` stands for an unbounded `α₀` (`P̲ = P̄`).
    pub alpha0: Option<f64>,
    pub d_min: usize,
    pub decay: DecayConstants,
    /// Stored as `u128` internally; serialized as a decimal string so large
    /// values survive JSON.
    #[serde(serialize_with = "serialize_u128")]
    pub worst_case_budget: u128,
}

fn serialize_u128<S: serde::Serializer>(v: &u128, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

impl CertificateReport {
    pub fn alpha0_value(&self) -> f64 {
        self.alpha0.unwrap_or(f64::INFINITY)
    }
}

/// Builds the full report. `horizon` defaults to the minimum stabilizing one.
pub fn certify(
    system: &SwitchedSystem,
    p_upper: &Matrix,
    p_lower: &Matrix,
    horizon: Option<usize>,
) -> Result<CertificateReport> {
    let terminal_condition =
        verify_terminal_condition(system, p_lower, default_terminal_tol(system, p_lower))?;
    let alpha = compute_alpha(system, p_upper)?;
    let alpha0 = compute_alpha0(system, p_upper, p_lower)?;
    let d_min = min_stabilizing_horizon(alpha, alpha0)?;
    let d = horizon.unwrap_or(d_min).max(2);
    let decay = decay_constants(system, p_upper, alpha, alpha0, d)?;
    Ok(CertificateReport {
        p_upper: p_upper.clone(),
        p_lower: p_lower.clone(),
        terminal_condition,
        alpha,
        conservative_alpha: conservative_alpha(system, p_upper),
        alpha0: alpha0.is_finite().then_some(alpha0),
        d_min,
        decay,
        worst_case_budget: worst_case_budget(system.num_modes(), d)?,
    })
}
