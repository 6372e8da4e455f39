//! Receding-horizon closed loop: plan at the current state, apply the first
//! input pair, advance, repeat.

use serde::Serialize;

use crate::certificates::DecayConstants;
use crate::linalg::{quad_form, Matrix, Vector};
use crate::planner::{troop_plan, PlanOptions};
use crate::riccati::MemoCache;
use crate::system::SwitchedSystem;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `K + 1` states, the initial one first.
    pub states: Vec<Vector>,
    /// Applied `(u, i)` pairs, `i` 0-based.
    pub inputs: Vec<(Vector, usize)>,
    pub stage_costs: Vec<f64>,
    /// `V*_d` at each visited state (before the input is applied).
    pub plan_values: Vec<f64>,
    pub budgets: Vec<usize>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn final_state(&self) -> &Vector {
        self.states
            .last()
            .expect("trajectory holds the initial state")
    }
}

/// Runs `steps` receding-horizon steps from `x0`, reusing `cache` throughout.
pub fn simulate_closed_loop(
    system: &SwitchedSystem,
    x0: &Vector,
    d: usize,
    steps: usize,
    cache: &mut MemoCache,
) -> Result<Trajectory> {
    if d == 0 {
        return Err(Error::InvalidParameter(
            "closed-loop simulation needs d >= 1".into(),
        ));
    }
    if x0.len() != system.n_x() {
        return Err(Error::Dimension(format!(
            "state has length {}, expected {}",
            x0.len(),
            system.n_x()
        )));
    }
    let mut traj = Trajectory {
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps),
        stage_costs: Vec::with_capacity(steps),
        plan_values: Vec::with_capacity(steps),
        budgets: Vec::with_capacity(steps),
    };
    let mut x = x0.clone();
    for _ in 0..steps {
        let plan = troop_plan(system, &x, d, cache, PlanOptions::default())?;
        let (u, i) = plan.first_input.expect("d >= 1 yields a first input");
        let next = system.step(&x, &u, i)?;
        traj.stage_costs.push(system.stage_cost(&x, &u, i)?);
        traj.plan_values.push(plan.value);
        traj.budgets.push(plan.budget);
        traj.inputs.push((u, i));
        traj.states.push(std::mem::replace(&mut x, next));
    }
    traj.states.push(x);
    Ok(traj)
}

/// Sum of the stage costs along the simulated horizon.
pub fn realized_cost(trajectory: &Trajectory) -> f64 {
    trajectory.stage_costs.iter().sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DecayReport {
    /// `λ_d ≥ 1`: no guarantee at this horizon.
    Skipped { lambda_d: f64, reason: String },
    Checked {
        lambda_d: f64,
        beta: f64,
        /// Whether `|x_k|² ≤ β λ_d^k x₀ᵀP̄x₀ / min_i λ_min(Q_i)` holds, per state.
        satisfied: Vec<bool>,
        passed: bool,
        /// States violating the stronger `|x_k| ≤ β λ_d^k |x₀|` form (reported only).
        literal_form_violations: usize,
    },
}

impl DecayReport {
    pub fn passed(&self) -> Option<bool> {
        match self {
            DecayReport::Skipped { .. } => None,
            DecayReport::Checked { passed, .. } => Some(*passed),
        }
    }
}

/// Evaluates the certified decay envelope along `trajectory`.
pub fn check_decay(
    trajectory: &Trajectory,
    decay: &DecayConstants,
    p_upper: &Matrix,
    system: &SwitchedSystem,
) -> DecayReport {
    if !decay.certified {
        return DecayReport::Skipped {
            lambda_d: decay.lambda_d,
            reason: format!(
                "lambda_d = {} >= 1 at d = {}; no stability guarantee at this horizon",
                decay.lambda_d, decay.d
            ),
        };
    }
    let x0 = &trajectory.states[0];
    let scale = decay.beta * quad_form(p_upper, x0) / system.min_q_eigenvalue();
    let x0_norm = x0.norm();
    let mut literal_form_violations = 0;
    let satisfied: Vec<bool> = trajectory
        .states
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let rate = decay.lambda_d.powi(k as i32);
            if x.norm() > decay.beta * rate * x0_norm * (1.0 + 1e-12) {
                literal_form_violations += 1;
            }
            x.norm_squared() <= scale * rate * (1.0 + 1e-12)
        })
        .collect();
    DecayReport::Checked {
        lambda_d: decay.lambda_d,
        beta: decay.beta,
        passed: satisfied.iter().all(|&s| s),
        satisfied,
        literal_form_violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark;
    use crate::certificates::{
        compute_alpha, compute_alpha0, decay_constants, min_stabilizing_horizon,
        suboptimality_bound,
    };

    fn unit(theta: f64) -> Vector {
        Vector::from_row_slice(&[theta.cos(), theta.sin()])
    }

    #[test]
    fn origin_stays_put() {
        let sys = benchmark::system();
        let mut cache = MemoCache::new(benchmark::feasible_terminal());
        let t = simulate_closed_loop(&sys, &Vector::zeros(2), 19, 10, &mut cache).unwrap();
        assert!(t.states.iter().all(|x| x.iter().all(|&v| v == 0.0)));
        assert_eq!(realized_cost(&t), 0.0);
        assert_eq!(t.steps(), 10);
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let sys = benchmark::system();
        let mut cache = MemoCache::new(benchmark::feasible_terminal());
        assert!(simulate_closed_loop(&sys, &unit(1.0), 0, 3, &mut cache).is_err());
    }

    #[test]
    fn trajectory_records_are_exact() {
        let sys = benchmark::system();
        let mut cache = MemoCache::new(benchmark::feasible_terminal());
        let t = simulate_closed_loop(&sys, &unit(0.9), 10, 15, &mut cache).unwrap();
        for k in 0..t.steps() {
            let (u, i) = &t.inputs[k];
            assert_eq!(t.states[k + 1], sys.step(&t.states[k], u, *i).unwrap());
            assert_eq!(
                t.stage_costs[k],
                sys.stage_cost(&t.states[k], u, *i).unwrap()
            );
        }
    }

    #[test]
    fn single_mode_matches_receding_lqr() {
        let md = benchmark::system().modes()[0].clone();
        let sys = SwitchedSystem::new(vec![md.clone()]).unwrap();
        let d = 25;
        let mut p = Matrix::zeros(2, 2);
        let mut k = Matrix::zeros(1, 2);
        for _ in 0..d {
            let s = &md.r + md.b.transpose() * &p * &md.b;
            k = s.try_inverse().unwrap() * md.b.transpose() * &p * &md.a;
            let a_cl = &md.a - &md.b * &k;
            p = &md.q + k.transpose() * &md.r * &k + a_cl.transpose() * &p * &a_cl;
        }
        let x0 = Vector::from_row_slice(&[1.0, -0.5]);
        let t = simulate_closed_loop(&sys, &x0, d, 20, &mut MemoCache::new(Matrix::zeros(2, 2)))
            .unwrap();
        let mut x = x0;
        for k_step in 0..20 {
            let u = -(&k * &x);
            assert!((&t.inputs[k_step].0 - &u).norm() <= 1e-9 * (1.0 + u.norm()));
            x = &md.a * &x + &md.b * u;
        }
        assert!((t.final_state() - x).norm() < 1e-9);
    }

    struct Certs {
        alpha: f64,
        alpha0: f64,
        p_upper: Matrix,
    }

    fn certs() -> Certs {
        let sys = benchmark::system();
        let p_upper = benchmark::upper_bound();
        Certs {
            alpha: compute_alpha(&sys, &p_upper).unwrap(),
            alpha0: compute_alpha0(&sys, &p_upper, &benchmark::feasible_terminal()).unwrap(),
            p_upper,
        }
    }

    #[test]
    fn benchmark_converges_with_certified_envelope() {
        let sys = benchmark::system();
        let c = certs();
        let d = min_stabilizing_horizon(c.alpha, c.alpha0).unwrap();
        assert_eq!(d, 19);
        let decay = decay_constants(&sys, &c.p_upper, c.alpha, c.alpha0, d).unwrap();
        let mut cache = MemoCache::new(benchmark::feasible_terminal());
        for j in 0..8 {
            let x0 = unit(j as f64 * std::f64::consts::PI / 4.0 + 0.1);
            let t = simulate_closed_loop(&sys, &x0, d, 60, &mut cache).unwrap();
            assert!(t.final_state().norm() < 1e-6);
            assert!(
                t.budgets.iter().all(|&b| (d + 1..=40).contains(&b)),
                "{:?}",
                t.budgets
            );
            assert_eq!(
                check_decay(&t, &decay, &c.p_upper, &sys).passed(),
                Some(true)
            );

            let realized = realized_cost(&t);
            let v0 = t.plan_values[0];
            assert!(realized >= v0 - 1e-9 * v0);
            let gap = suboptimality_bound(c.alpha, c.alpha0, d, &c.p_upper, &x0).unwrap();
            let tail = quad_form(&c.p_upper, t.final_state());
            assert!(realized <= v0 + gap.absolute + tail + 1e-9);

            // One-step decrease assembled from the stability argument.
            let slack = (1.0 - c.alpha).powi(d as i32 - 1) / c.alpha0;
            for k in 0..t.steps() - 1 {
                let bound = t.plan_values[k] - t.stage_costs[k]
                    + slack * quad_form(&c.p_upper, &t.states[k]);
                assert!(t.plan_values[k + 1] <= bound + 1e-9 * t.plan_values[k]);
            }
        }
    }

    #[test]
    fn short_horizon_check_is_skipped() {
        let sys = benchmark::system();
        let c = certs();
        let decay = decay_constants(&sys, &c.p_upper, c.alpha, c.alpha0, 2).unwrap();
        assert!(!decay.certified);
        let t = simulate_closed_loop(
            &sys,
            &unit(1.0),
            1,
            5,
            &mut MemoCache::new(benchmark::feasible_terminal()),
        )
        .unwrap();
        assert!(matches!(
            check_decay(&t, &decay, &c.p_upper, &sys),
            DecayReport::Skipped { .. }
        ));
    }

    #[test]
    fn zero_trajectory_passes_decay() {
        let sys = benchmark::system();
        let c = certs();
        let decay = decay_constants(&sys, &c.p_upper, c.alpha, c.alpha0, 19).unwrap();
        let t = simulate_closed_loop(
            &sys,
            &Vector::zeros(2),
            19,
            4,
            &mut MemoCache::new(benchmark::feasible_terminal()),
        )
        .unwrap();
        assert_eq!(
            check_decay(&t, &decay, &c.p_upper, &sys).passed(),
            Some(true)
        );
    }
}
