//! Riccati recursion on cost matrices.
//!
//! A sequence `(i₀, …, i_{d−1})` has cost matrix
//! `P = R_{i₀} ∘ ⋯ ∘ R_{i_{d−1}}(P_terminal)`, folded from the last mode to the
//! first. Appending a mode to a sequence therefore changes the innermost
//! application, which is why the cache is keyed by suffixes.

use std::collections::HashMap;

use nalgebra::Cholesky;

use crate::linalg::{
    max_abs_diff, max_abs_entry, quad_form, spectral_radius, symmetrize, Matrix, Vector,
};
use crate::system::{ModeSequence, SwitchedSystem};
use crate::{Error, Result};

pub const DARE_TOL: f64 = 1e-10;
pub const DARE_MAX_ITER: usize = 10_000;

fn check_square(p: &Matrix, n: usize, what: &str) -> Result<()> {
    if p.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "{what} is {}x{}, expected {n}x{n}",
            p.nrows(),
            p.ncols()
        )));
    }
    Ok(())
}

/// Returns `(K, AᵀPA, AᵀPB)` with `K = (R + BᵀPB)⁻¹ BᵀPA`.
fn gain_parts(system: &SwitchedSystem, p: &Matrix, i: usize) -> Result<(Matrix, Matrix, Matrix)> {
    let m = system.mode(i)?;
    check_square(p, system.n_x(), "cost matrix")?;
    let pa = p * &m.a;
    let pb = p * &m.b;
    let inner = symmetrize(&(&m.r + m.b.transpose() * &pb));
    let chol = Cholesky::new(inner).ok_or(Error::InnerNotPositiveDefinite { mode: i })?;
    let k = chol.solve(&(m.b.transpose() * &pa));
    Ok((k, m.a.transpose() * pa, m.a.transpose() * pb))
}

/// The Riccati operator of mode `i`:
/// `Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA`, symmetrized.
pub fn riccati_op(system: &SwitchedSystem, p: &Matrix, i: usize) -> Result<Matrix> {
    let (k, apa, apb) = gain_parts(system, p, i)?;
    let q = &system.mode(i)?.q;
    Ok(symmetrize(&(q + apa - apb * k)))
}

/// Feedback gain `K = (R_i + B_iᵀ P_tail B_i)⁻¹ B_iᵀ P_tail A_i` for head mode
/// `i` in front of a tail whose cost matrix is `p_tail`.
pub fn gain(system: &SwitchedSystem, p_tail: &Matrix, i: usize) -> Result<Matrix> {
    gain_parts(system, p_tail, i).map(|(k, _, _)| k)
}

/// Uncached right-to-left composition seeded at `p_terminal`.
pub fn sequence_cost_matrix(
    system: &SwitchedSystem,
    seq: &[usize],
    p_terminal: &Matrix,
) -> Result<Matrix> {
    check_square(p_terminal, system.n_x(), "terminal matrix")?;
    seq.iter()
        .rev()
        .try_fold(p_terminal.clone(), |p, &i| riccati_op(system, &p, i))
}

/// Suffix-keyed store of cost matrices, all seeded at one terminal matrix.
///
/// Entries do not depend on the state, so one cache serves any number of
/// planning calls on the same system and terminal matrix.
#[derive(Debug, Clone)]
pub struct MemoCache {
    terminal: Matrix,
    entries: HashMap<Vec<usize>, Matrix>,
    evaluations: usize,
}

impl MemoCache {
    pub fn new(terminal: Matrix) -> Self {
        Self {
            terminal,
            entries: HashMap::new(),
            evaluations: 0,
        }
    }

    pub fn terminal(&self) -> &Matrix {
        &self.terminal
    }

    /// Number of stored (non-empty) suffixes.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Riccati operator applications performed through this cache.
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn get(&self, seq: &[usize]) -> Option<&Matrix> {
        if seq.is_empty() {
            Some(&self.terminal)
        } else {
            self.entries.get(seq)
        }
    }

    /// Cost matrix of `seq`, computing and storing every missing suffix.
    pub fn cost_matrix(&mut self, system: &SwitchedSystem, seq: &[usize]) -> Result<&Matrix> {
        check_square(&self.terminal, system.n_x(), "terminal matrix")?;
        // Stored suffixes are closed under taking further suffixes, so the
        // first hit from the left is the longest one.
        let start = (0..seq.len())
            .find(|&k| self.entries.contains_key(&seq[k..]))
            .unwrap_or(seq.len());
        for k in (0..start).rev() {
            let inner = self.get(&seq[k + 1..]).expect("suffix was stored");
            let p = riccati_op(system, inner, seq[k])?;
            self.evaluations += 1;
            self.entries.insert(seq[k..].to_vec(), p);
        }
        Ok(self.get(seq).expect("sequence was stored"))
    }
}

/// `xᵀ P_seq x`.
pub fn finite_horizon_value(
    system: &SwitchedSystem,
    x: &Vector,
    seq: &ModeSequence,
    cache: &mut MemoCache,
) -> Result<f64> {
    if x.len() != system.n_x() {
        return Err(Error::Dimension(format!(
            "state has length {}, expected {}",
            x.len(),
            system.n_x()
        )));
    }
    seq.validate_for(system)?;
    Ok(quad_form(cache.cost_matrix(system, seq.as_slice())?, x))
}

#[derive(Debug, Clone)]
pub struct DareSolution {
    pub p: Matrix,
    pub gain: Matrix,
    pub closed_loop_radius: f64,
    pub iterations: usize,
}

/// Fixed point of `P ← R_i(P)` seeded at `Q_i`.
pub fn dare_fixed_point(
    system: &SwitchedSystem,
    i: usize,
    max_iter: usize,
    tol: f64,
) -> Result<DareSolution> {
    let m = system.mode(i)?;
    let mut p = m.q.clone();
    for iter in 1..=max_iter {
        let next = riccati_op(system, &p, i)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotConverged {
                mode: i,
                iterations: iter,
            });
        }
        let delta = max_abs_diff(&next, &p);
        p = next;
        if delta < tol {
            let k = gain(system, &p, i)?;
            let radius = spectral_radius(&(&m.a - &m.b * &k));
            if radius >= 1.0 {
                return Err(Error::NotSchurStable(radius));
            }
            return Ok(DareSolution {
                p,
                gain: k,
                closed_loop_radius: radius,
                iterations: iter,
            });
        }
    }
    Err(Error::NotConverged {
        mode: i,
        iterations: max_iter,
    })
}

/// `1e-12 · ‖W‖_max`.
pub fn lyapunov_default_tol(w: &Matrix) -> f64 {
    1e-12 * max_abs_entry(w)
}

/// Solves `A_clᵀ P A_cl − P = −W` for Schur `A_cl` by summing
/// `Σ (A_clᵀ)ᵏ W A_clᵏ` in doubling form: after `j` rounds the partial sum
/// holds `2ʲ` terms.
pub fn discrete_lyapunov(a_cl: &Matrix, w: &Matrix, tol: f64) -> Result<Matrix> {
    let n = a_cl.nrows();
    check_square(a_cl, n, "closed-loop matrix")?;
    check_square(w, n, "weight matrix")?;
    let radius = spectral_radius(a_cl);
    if !(radius < 1.0) {
        return Err(Error::NotSchurStable(radius));
    }
    let mut p = symmetrize(w);
    let mut a = a_cl.clone();
    for _ in 0..128 {
        let increment = a.transpose() * &p * &a;
        p += &increment;
        if max_abs_entry(&increment) <= tol {
            return Ok(symmetrize(&p));
        }
        a = &a * &a;
    }
    Err(Error::NotSchurStable(radius))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark;
    use crate::linalg::min_eigenvalue;
    use crate::system::ModeData;
    use proptest::prelude::*;

    fn scalar_system(a: f64, b: f64) -> SwitchedSystem {
        let one = Matrix::from_element(1, 1, 1.0);
        SwitchedSystem::new(vec![ModeData {
            a: Matrix::from_element(1, 1, a),
            b: Matrix::from_element(1, 1, b),
            q: one.clone(),
            r: one,
        }])
        .unwrap()
    }

    fn mat2(v: [f64; 4]) -> Matrix {
        Matrix::from_row_slice(2, 2, &v)
    }

    /// Minimizes the d-step cost over the stacked continuous inputs by a
    /// direct quadratic solve, with no Riccati recursion involved.
    fn batch_optimal_cost(
        system: &SwitchedSystem,
        x: &Vector,
        seq: &[usize],
        terminal: &Matrix,
    ) -> f64 {
        let (n, m, d) = (system.n_x(), system.n_u(), seq.len());
        if d == 0 {
            return quad_form(terminal, x);
        }
        // x_k = phi_k x + gamma_k u
        let mut phi = Matrix::identity(n, n);
        let mut gamma = Matrix::zeros(n, m * d);
        let mut h = Matrix::zeros(m * d, m * d);
        let mut g = Vector::zeros(m * d);
        let mut c = 0.0;
        for (k, &i) in seq.iter().enumerate() {
            let md = &system.modes()[i];
            let xk_free = &phi * x;
            h += gamma.transpose() * &md.q * &gamma;
            g += gamma.transpose() * &md.q * &xk_free;
            c += quad_form(&md.q, &xk_free);
            let mut sel = Matrix::zeros(m, m * d);
            sel.view_mut((0, k * m), (m, m))
                .copy_from(&Matrix::identity(m, m));
            h += sel.transpose() * &md.r * &sel;
            gamma = &md.a * gamma + &md.b * sel;
            phi = &md.a * phi;
        }
        let xd_free = &phi * x;
        h += gamma.transpose() * terminal * &gamma;
        g += gamma.transpose() * terminal * &xd_free;
        c += quad_form(terminal, &xd_free);
        let u = h.clone().cholesky().unwrap().solve(&g);
        c - g.dot(&u)
    }

    #[test]
    fn riccati_of_zero_is_q() {
        let sys = benchmark::system();
        for i in 0..2 {
            assert_eq!(
                riccati_op(&sys, &Matrix::zeros(2, 2), i).unwrap(),
                sys.modes()[i].q
            );
        }
    }

    #[test]
    fn riccati_on_published_terminal_mode_one() {
        // Frozen from a direct numpy evaluation of the operator.
        let sys = benchmark::system();
        let p = riccati_op(&sys, &benchmark::terminal(), 0).unwrap();
        let expected = mat2([
            5.121739130434786,
            1.2463768115942049,
            1.2463768115942049,
            1.9033816425120786,
        ]);
        assert!(max_abs_diff(&p, &expected) < 1e-12, "{p}");
    }

    #[test]
    fn gain_on_published_terminal_mode_one() {
        let sys = benchmark::system();
        let k = gain(&sys, &benchmark::terminal(), 0).unwrap();
        let expected = Matrix::from_row_slice(1, 2, &[1.2463768115942027, 0.9033816425120772]);
        assert!(max_abs_diff(&k, &expected) < 1e-12, "{k}");
        assert_eq!(
            gain(&sys, &Matrix::zeros(2, 2), 0).unwrap(),
            Matrix::zeros(1, 2)
        );
    }

    #[test]
    fn inner_matrix_failure_is_reported() {
        let mut modes = benchmark::system().modes().to_vec();
        modes[0].r = Matrix::from_element(1, 1, -1.0);
        let sys = SwitchedSystem::new(modes).unwrap();
        assert_eq!(
            riccati_op(&sys, &Matrix::zeros(2, 2), 0),
            Err(Error::InnerNotPositiveDefinite { mode: 0 })
        );
    }

    #[test]
    fn composition_base_cases() {
        let sys = benchmark::system();
        let t = benchmark::terminal();
        assert_eq!(sequence_cost_matrix(&sys, &[], &t).unwrap(), t);
        assert_eq!(
            sequence_cost_matrix(&sys, &[1], &t).unwrap(),
            riccati_op(&sys, &t, 1).unwrap()
        );
        let mut cache = MemoCache::new(t.clone());
        assert_eq!(cache.cost_matrix(&sys, &[]).unwrap(), &t);
        assert_eq!(cache.evaluations(), 0);
    }

    #[test]
    fn cache_stores_every_suffix() {
        let sys = benchmark::system();
        let mut cache = MemoCache::new(Matrix::zeros(2, 2));
        cache.cost_matrix(&sys, &[0, 1, 1, 0]).unwrap();
        assert_eq!(cache.evaluations(), 4);
        for k in 0..4 {
            assert!(cache.get(&[0, 1, 1, 0][k..]).is_some());
        }
        // Shares the (1,1,0) suffix.
        cache.cost_matrix(&sys, &[1, 1, 1, 0]).unwrap();
        assert_eq!(cache.evaluations(), 5);
    }

    #[test]
    fn value_examples() {
        let sys = benchmark::system();
        let mut cache = MemoCache::new(benchmark::terminal());
        let zero = Vector::zeros(2);
        let e1 = Vector::from_row_slice(&[1.0, 0.0]);
        let seq = ModeSequence::new(vec![0, 1, 0]);
        assert_eq!(
            finite_horizon_value(&sys, &zero, &seq, &mut cache).unwrap(),
            0.0
        );
        assert_eq!(
            finite_horizon_value(&sys, &e1, &ModeSequence::empty(), &mut cache).unwrap(),
            5.05
        );
        assert!(finite_horizon_value(&sys, &e1, &ModeSequence::new(vec![2]), &mut cache).is_err());
    }

    #[test]
    fn scalar_dare() {
        let sys = scalar_system(0.5, 1.0);
        let sol = dare_fixed_point(&sys, 0, DARE_MAX_ITER, DARE_TOL).unwrap();
        let residual = (riccati_op(&sys, &sol.p, 0).unwrap() - &sol.p)[(0, 0)].abs();
        assert!(residual < DARE_TOL);
        // Frozen from 200 scalar iterations of p ← 1 + a²p − (abp)²/(1 + b²p).
        assert!((sol.p[(0, 0)] - 1.1327822185373186).abs() < 1e-9);
        assert!(sol.closed_loop_radius < 1.0);
    }

    #[test]
    fn benchmark_mode_one_dare_is_stabilizing() {
        let sys = benchmark::system();
        let sol = dare_fixed_point(&sys, 0, DARE_MAX_ITER, DARE_TOL).unwrap();
        assert!(sol.closed_loop_radius < 1.0);
        assert!(max_abs_diff(&riccati_op(&sys, &sol.p, 0).unwrap(), &sol.p) < 1e-9);
    }

    #[test]
    fn uncontrollable_unstable_dare_fails() {
        let sys = scalar_system(2.0, 0.0);
        assert!(matches!(
            dare_fixed_point(&sys, 0, DARE_MAX_ITER, DARE_TOL),
            Err(Error::NotConverged { .. })
        ));
    }

    #[test]
    fn lyapunov_examples() {
        let w = mat2([2.0, 0.5, 0.5, 1.0]);
        assert_eq!(
            discrete_lyapunov(&Matrix::zeros(2, 2), &w, 1e-14).unwrap(),
            w
        );
        let p = discrete_lyapunov(
            &Matrix::from_element(1, 1, 0.5),
            &Matrix::from_element(1, 1, 1.0),
            1e-14,
        )
        .unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
        assert!(matches!(
            discrete_lyapunov(
                &Matrix::from_element(1, 1, 1.0),
                &Matrix::from_element(1, 1, 1.0),
                1e-14
            ),
            Err(Error::NotSchurStable(_))
        ));
    }

    #[test]
    fn lyapunov_residual_on_benchmark_closed_loop() {
        let sys = benchmark::system();
        let sol = dare_fixed_point(&sys, 0, DARE_MAX_ITER, DARE_TOL).unwrap();
        let m = &sys.modes()[0];
        let a_cl = &m.a - &m.b * &sol.gain;
        let w = &m.q + sol.gain.transpose() * &m.r * &sol.gain;
        let p = discrete_lyapunov(&a_cl, &w, lyapunov_default_tol(&w)).unwrap();
        let residual = a_cl.transpose() * &p * &a_cl - &p + &w;
        assert!(max_abs_entry(&residual) < 1e-9);
    }

    fn psd_strategy(n: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0..2.0f64, n * n).prop_map(move |v| {
            let g = Matrix::from_row_slice(n, n, &v);
            &g * g.transpose()
        })
    }

    proptest! {
        #[test]
        fn riccati_output_dominates_q(p in psd_strategy(2), i in 0usize..2) {
            let sys = benchmark::system();
            let r = riccati_op(&sys, &p, i).unwrap();
            prop_assert!(min_eigenvalue(&r) >= min_eigenvalue(&sys.modes()[i].q) - 1e-9);
            prop_assert!(max_abs_entry(&(&r - r.transpose())) == 0.0);
        }

        #[test]
        fn completion_identity(p in psd_strategy(2), i in 0usize..2) {
            let sys = benchmark::system();
            let m = &sys.modes()[i];
            let p = p + Matrix::identity(2, 2) * 0.1;
            let k = gain(&sys, &p, i).unwrap();
            let a_cl = &m.a - &m.b * &k;
            let completed = &m.q + k.transpose() * &m.r * &k + a_cl.transpose() * &p * &a_cl;
            let r = riccati_op(&sys, &p, i).unwrap();
            prop_assert!(max_abs_diff(&r, &completed) < 1e-9 * (1.0 + max_abs_entry(&r)));
        }

        #[test]
        fn operator_is_monotone(p in psd_strategy(2), extra in psd_strategy(2), i in 0usize..2) {
            let sys = benchmark::system();
            let lo = riccati_op(&sys, &p, i).unwrap();
            let hi = riccati_op(&sys, &(&p + &extra), i).unwrap();
            prop_assert!(min_eigenvalue(&(hi - lo)) >= -1e-9 * (1.0 + max_abs_entry(&p) + max_abs_entry(&extra)));
        }

        #[test]
        fn value_matches_batch_minimization(
            seq in proptest::collection::vec(0usize..2, 0..7),
            x in proptest::collection::vec(-2.0..2.0f64, 2),
        ) {
            let sys = benchmark::system();
            let terminal = benchmark::terminal() * 0.9;
            let x = Vector::from_vec(x);
            let mut cache = MemoCache::new(terminal.clone());
            let v = finite_horizon_value(&sys, &x, &ModeSequence::new(seq.clone()), &mut cache).unwrap();
            let oracle = batch_optimal_cost(&sys, &x, &seq, &terminal);
            prop_assert!((v - oracle).abs() <= 1e-9 * (1.0 + oracle.abs()), "{v} vs {oracle}");
        }

        #[test]
        fn warm_and_cold_cache_agree_bitwise(
            warmup in proptest::collection::vec(proptest::collection::vec(0usize..2, 0..6), 0..5),
            seq in proptest::collection::vec(0usize..2, 0..8),
        ) {
            let sys = benchmark::system();
            let terminal = benchmark::terminal();
            let mut warm = MemoCache::new(terminal.clone());
            for w in &warmup {
                warm.cost_matrix(&sys, w).unwrap();
            }
            let a = warm.cost_matrix(&sys, &seq).unwrap().clone();
            let b = MemoCache::new(terminal.clone()).cost_matrix(&sys, &seq).unwrap().clone();
            let c = sequence_cost_matrix(&sys, &seq, &terminal).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&a, &c);
        }
    }
}
