//! Switched linear systems with per-mode quadratic stage costs.
//!
//! Mode indices are 0-based in the API and 1-based in every user-facing
//! rendering (`Display`, CSV, DOT, JSON sequences).

use std::fmt;

use serde::Serialize;

use crate::linalg::{max_abs_entry, min_eigenvalue, quad_form, Matrix, Vector};
use crate::{Error, Result};

/// Matrices `(A, B, Q, R)` of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeData {
    pub a: Matrix,
    pub b: Matrix,
    pub q: Matrix,
    pub r: Matrix,
}

/// `x⁺ = A_i x + B_i u` with stage cost `xᵀQ_i x + uᵀR_i u`.
///
/// Immutable once built; share freely across planner runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchedSystem {
    n_x: usize,
    n_u: usize,
    modes: Vec<ModeData>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeDiagnostics {
    /// 1-based mode index.
    pub mode: usize,
    pub dimension_errors: Vec<String>,
    pub min_eig_q: f64,
    pub min_eig_r: f64,
    pub issues: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub n_x: usize,
    pub n_u: usize,
    pub tolerance: f64,
    pub modes: Vec<ModeDiagnostics>,
    pub valid: bool,
}

impl ValidationReport {
    pub fn issues(&self) -> impl Iterator<Item = &str> {
        self.modes
            .iter()
            .flat_map(|m| m.dimension_errors.iter().chain(m.issues.iter()))
            .map(String::as_str)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid {
            return write!(
                f,
                "valid ({} modes, n_x = {}, n_u = {})",
                self.modes.len(),
                self.n_x,
                self.n_u
            );
        }
        let issues: Vec<&str> = self.issues().collect();
        write!(f, "invalid: {}", issues.join("; "))
    }
}

impl SwitchedSystem {
    /// Builds a system without checking it. `n_x` and `n_u` are taken from the
    /// first mode's `B`; call [`SwitchedSystem::validate`] before use.
    pub fn new(modes: Vec<ModeData>) -> Result<Self> {
        let first = modes
            .first()
            .ok_or_else(|| Error::InvalidSystem("system needs at least one mode".into()))?;
        let (n_x, n_u) = first.b.shape();
        if n_x == 0 || n_u == 0 {
            return Err(Error::InvalidSystem("n_x and n_u must be positive".into()));
        }
        Ok(Self { n_x, n_u, modes })
    }

    /// Builds and validates with the default tolerance.
    pub fn checked(modes: Vec<ModeData>) -> Result<Self> {
        let system = Self::new(modes)?;
        let report = system.validate(system.default_tolerance());
        if !report.valid {
            return Err(Error::InvalidSystem(report.to_string()));
        }
        Ok(system)
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn modes(&self) -> &[ModeData] {
        &self.modes
    }

    pub fn mode(&self, i: usize) -> Result<&ModeData> {
        self.modes.get(i).ok_or(Error::ModeOutOfRange {
            index: i,
            modes: self.modes.len(),
        })
    }

    /// `1e-9 · (1 + largest absolute matrix entry)`.
    pub fn default_tolerance(&self) -> f64 {
        let largest = self
            .modes
            .iter()
            .flat_map(|m| [&m.a, &m.b, &m.q, &m.r])
            .map(max_abs_entry)
            .fold(0.0, f64::max);
        1e-9 * (1.0 + largest)
    }

    /// Smallest eigenvalue of `Q_i` over all modes.
    pub fn min_q_eigenvalue(&self) -> f64 {
        self.modes
            .iter()
            .map(|m| min_eigenvalue(&m.q))
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks shapes, symmetry and `Q_i, R_i ≻ 0`. Never aborts: every
    /// violation is collected in the report.
    pub fn validate(&self, tol: f64) -> ValidationReport {
        let (n_x, n_u) = (self.n_x, self.n_u);
        let mut valid = true;
        let modes = self
            .modes
            .iter()
            .enumerate()
            .map(|(idx, m)| {
                let label = idx + 1;
                let mut dimension_errors = Vec::new();
                let mut check = |name: &str, mat: &Matrix, rows: usize, cols: usize| {
                    if mat.shape() != (rows, cols) {
                        dimension_errors.push(format!(
                            "{name} of mode {label} is {}x{}, expected {rows}x{cols}",
                            mat.nrows(),
                            mat.ncols()
                        ));
                    }
                };
                check("A", &m.a, n_x, n_x);
                check("B", &m.b, n_x, n_u);
                check("Q", &m.q, n_x, n_x);
                check("R", &m.r, n_u, n_u);

                let mut issues = Vec::new();
                let mut definite = |name: &str, mat: &Matrix| -> f64 {
                    if !mat.is_square() {
                        return f64::NAN;
                    }
                    if mat.iter().any(|v| !v.is_finite()) {
                        issues.push(format!("{name} has non-finite entries, mode {label}"));
                        return f64::NAN;
                    }
                    let asym = max_abs_entry(&(mat - mat.transpose()));
                    if asym > tol {
                        issues.push(format!("{name} not symmetric, mode {label}"));
                    }
                    let lambda = min_eigenvalue(mat);
                    if !(lambda > tol) {
                        issues.push(format!("{name} not positive definite, mode {label}"));
                    }
                    lambda
                };
                let min_eig_q = definite("Q", &m.q);
                let min_eig_r = definite("R", &m.r);
                if !dimension_errors.is_empty() || !issues.is_empty() {
                    valid = false;
                }
                ModeDiagnostics {
                    mode: label,
                    dimension_errors,
                    min_eig_q,
                    min_eig_r,
                    issues,
                }
            })
            .collect();
        ValidationReport {
            n_x,
            n_u,
            tolerance: tol,
            modes,
            valid,
        }
    }

    fn check_vectors(&self, x: &Vector, u: &Vector) -> Result<()> {
        if x.len() != self.n_x {
            return Err(Error::Dimension(format!(
                "state has length {}, expected {}",
                x.len(),
                self.n_x
            )));
        }
        if u.len() != self.n_u {
            return Err(Error::Dimension(format!(
                "input has length {}, expected {}",
                u.len(),
                self.n_u
            )));
        }
        Ok(())
    }

    /// `A_i x + B_i u`.
    pub fn step(&self, x: &Vector, u: &Vector, i: usize) -> Result<Vector> {
        let m = self.mode(i)?;
        self.check_vectors(x, u)?;
        Ok(&m.a * x + &m.b * u)
    }

    /// `xᵀQ_i x + uᵀR_i u`.
    pub fn stage_cost(&self, x: &Vector, u: &Vector, i: usize) -> Result<f64> {
        let m = self.mode(i)?;
        self.check_vectors(x, u)?;
        Ok(quad_form(&m.q, x) + quad_form(&m.r, u))
    }
}

/// Finite ordered list of 0-based mode indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ModeSequence(Vec<usize>);

impl ModeSequence {
    pub fn new(modes: Vec<usize>) -> Self {
        Self(modes)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// Parses 1-based mode labels.
    pub fn from_one_based(labels: &[usize]) -> Result<Self> {
        labels
            .iter()
            .map(|&l| {
                l.checked_sub(1)
                    .ok_or(Error::InvalidParameter("mode labels are 1-based".into()))
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn head(&self) -> Option<usize> {
        self.0.first().copied()
    }

    /// The sequence with its head removed.
    pub fn tail(&self) -> &[usize] {
        self.0.get(1..).unwrap_or(&[])
    }

    /// `self ⊕ mode`.
    pub fn extended(&self, mode: usize) -> Self {
        let mut v = Vec::with_capacity(self.0.len() + 1);
        v.extend_from_slice(&self.0);
        v.push(mode);
        Self(v)
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.0.iter().map(|i| i + 1).collect()
    }

    pub fn validate_for(&self, system: &SwitchedSystem) -> Result<()> {
        match self.0.iter().find(|&&i| i >= system.num_modes()) {
            Some(&index) => Err(Error::ModeOutOfRange {
                index,
                modes: system.num_modes(),
            }),
            None => Ok(()),
        }
    }
}

impl fmt::Display for ModeSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", i + 1)?;
        }
        write!(f, ")")
    }
}

impl Serialize for ModeSequence {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        self.one_based().serialize(serializer)
    }
}
