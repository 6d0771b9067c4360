//! Finite-horizon optimal control by iterative LQR over the physical input.
//!
//! The decision variable is the raw input sequence v_0..v_{N-1} applied to
//! one RK4 step per knot. Each iteration linearizes the discrete map along
//! the nominal trajectory with central differences, runs a backward Riccati
//! sweep with a Levenberg shift on the input Hessian, and line-searches the
//! resulting affine policy. The terminal cost is the quadratic value
//! `zeta^T P zeta` of the infinite-horizon problem on the linearization
//! about the origin, so short horizons still price the tail.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::dynamics::{rk4_step, NormalFormSystem, NzState};
use crate::error::{Error, Result};
use crate::linalg::{jacobian_fd, linearize_about_origin, lqr_gain, GainMatrix};

const FD_STEP: f64 = 1e-6;
const ESCAPE_NORM: f64 = 1e6;
const REG_MAX: f64 = 1e8;
const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct IlqrConfig {
    pub horizon_s: f64,
    pub dt_s: f64,
    pub max_iters: usize,
    /// Relative cost decrease below which the solve counts as converged.
    pub cost_tol: f64,
    /// Initial Levenberg shift on the input Hessian, as a fraction of the
    /// local curvature scale.
    pub regularization: f64,
    /// Step fractions tried on the feedforward correction, largest first.
    pub line_search_betas: Vec<f64>,
}

impl Default for IlqrConfig {
    fn default() -> Self {
        Self {
            horizon_s: 5.0,
            dt_s: 0.01,
            max_iters: 50,
            cost_tol: 1e-6,
            regularization: 1e-6,
            line_search_betas: vec![1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125],
        }
    }
}

impl IlqrConfig {
    pub fn steps(&self) -> usize {
        ((self.horizon_s / self.dt_s).round() as usize).max(1)
    }
}

/// Quadratic-cost problem `sum dt (zeta^T Q zeta + r v^2) + zeta_N^T P zeta_N`
/// on a split-coordinate system.
pub struct IlqrProblem<'a> {
    nf: &'a dyn NormalFormSystem,
    q: DMatrix<f64>,
    r: f64,
    terminal_p: DMatrix<f64>,
    init_gain: GainMatrix,
    config: IlqrConfig,
}

/// Locally optimal trajectory with its time-varying feedback.
#[derive(Debug, Clone)]
pub struct IlqrSolution {
    pub times: Vec<f64>,
    /// N+1 knots, nominal states.
    pub states: Vec<DVector<f64>>,
    /// N physical inputs.
    pub inputs: Vec<f64>,
    /// N feedback rows; the policy near the nominal is v_i + gains_i * (zeta - states_i).
    pub gains: Vec<RowDVector<f64>>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl IlqrSolution {
    pub fn initial_input(&self) -> f64 {
        self.inputs[0]
    }

    /// Sensitivity of the first input to the initial state.
    pub fn initial_gain(&self) -> &RowDVector<f64> {
        &self.gains[0]
    }

    pub fn final_state_norm(&self) -> f64 {
        self.states.last().map(|s| s.norm()).unwrap_or(0.0)
    }
}

/// First input of a solve together with its state sensitivity.
#[derive(Debug, Clone)]
pub struct OptimalControl {
    pub input: f64,
    pub gain: RowDVector<f64>,
    pub converged: bool,
}

struct BackwardPass {
    ks: Vec<f64>,
    gains: Vec<RowDVector<f64>>,
    grad_max: f64,
}

impl<'a> IlqrProblem<'a> {
    /// Build the problem; the terminal value and the warm-start feedback both
    /// come from the infinite-horizon gain on the origin linearization.
    pub fn new(
        nf: &'a dyn NormalFormSystem,
        q: DMatrix<f64>,
        r: f64,
        config: IlqrConfig,
    ) -> Result<Self> {
        let n = nf.dim();
        assert_eq!(q.nrows(), n, "state weight must match the state dimension");
        let model = linearize_about_origin(nf)?;
        let (init_gain, terminal_p) = lqr_gain(&model, &q, r)?;
        Ok(Self {
            nf,
            q,
            r,
            terminal_p,
            init_gain,
            config,
        })
    }

    pub fn config(&self) -> &IlqrConfig {
        &self.config
    }

    /// Quadratic tail value used at the horizon end.
    pub fn terminal_value(&self, zeta: &DVector<f64>) -> f64 {
        (zeta.transpose() * &self.terminal_p * zeta)[0]
    }

    pub fn solve(&self, zeta0: &DVector<f64>) -> Result<IlqrSolution> {
        let dt = self.config.dt_s;
        let n = self.config.steps();
        assert_eq!(zeta0.len(), self.nf.dim());
        if zeta0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "optimal control initial state",
            });
        }

        // Warm start: the infinite-horizon feedback realized through the
        // decoupling input; fall back to zero input if it leaves the envelope.
        let init = self
            .rollout(zeta0, n, dt, |_, x| {
                let s = NzState::from_flat(x, self.nf.gamma());
                let u_aux = -(&self.init_gain.k * x)[0];
                self.nf.feedback_linearize(&s, u_aux).ok()
            })
            .or_else(|| self.rollout(zeta0, n, dt, |_, _| Some(0.0)));
        let (mut states, mut inputs, mut cost) = init.ok_or_else(|| Error::Diverged {
            reason: "every initial rollout left the integration envelope".into(),
        })?;

        let mut reg = self.config.regularization;
        let mut converged = false;
        let mut iterations = 0;
        let mut gains: Vec<RowDVector<f64>> = Vec::new();

        'iterate: while iterations < self.config.max_iters {
            iterations += 1;
            let bp = loop {
                match self.backward(&states, &inputs, dt, reg)? {
                    Some(bp) => break bp,
                    None => {
                        reg *= 10.0;
                        if reg > REG_MAX {
                            break 'iterate;
                        }
                    }
                }
            };
            let u_scale = inputs.iter().fold(0.0_f64, |m, u| m.max(u.abs()));
            gains = bp.gains;
            if bp.grad_max < GRAD_TOL * (1.0 + u_scale) {
                converged = true;
                break;
            }

            let mut accepted = false;
            for &beta in &self.config.line_search_betas {
                let trial = self.rollout(zeta0, n, dt, |i, x| {
                    let delta = x - &states[i];
                    Some(inputs[i] + beta * bp.ks[i] + (&gains[i] * delta)[0])
                });
                if let Some((s2, u2, c2)) = trial {
                    if c2 < cost {
                        let decrease = cost - c2;
                        states = s2;
                        inputs = u2;
                        cost = c2;
                        accepted = true;
                        if decrease < self.config.cost_tol * cost.abs().max(1.0) {
                            converged = true;
                        }
                        break;
                    }
                }
            }
            if accepted {
                reg = (reg / 10.0).max(self.config.regularization);
                if converged {
                    break;
                }
            } else {
                reg *= 10.0;
                if reg > REG_MAX {
                    break;
                }
            }
        }

        if gains.is_empty() {
            // No backward pass survived; report the nominal with zero feedback.
            gains = vec![RowDVector::zeros(self.nf.dim()); n];
            converged = false;
        }
        Ok(IlqrSolution {
            times: (0..=n).map(|i| i as f64 * dt).collect(),
            states,
            inputs,
            gains,
            cost,
            iterations,
            converged,
        })
    }

    /// Solve and report only the first input and its state sensitivity.
    pub fn query(&self, zeta0: &DVector<f64>) -> Result<OptimalControl> {
        let sol = self.solve(zeta0)?;
        Ok(OptimalControl {
            input: sol.inputs[0],
            gain: sol.gains[0].clone(),
            converged: sol.converged,
        })
    }

    fn stage_cost(&self, x: &DVector<f64>, v: f64, dt: f64) -> f64 {
        dt * ((x.transpose() * &self.q * x)[0] + self.r * v * v)
    }

    fn rollout<F>(
        &self,
        x0: &DVector<f64>,
        n: usize,
        dt: f64,
        policy: F,
    ) -> Option<(Vec<DVector<f64>>, Vec<f64>, f64)>
    where
        F: Fn(usize, &DVector<f64>) -> Option<f64>,
    {
        let mut states = Vec::with_capacity(n + 1);
        let mut inputs = Vec::with_capacity(n);
        let mut cost = 0.0;
        let mut x = x0.clone();
        for i in 0..n {
            let v = policy(i, &x)?;
            if !v.is_finite() {
                return None;
            }
            cost += self.stage_cost(&x, v, dt);
            states.push(x.clone());
            inputs.push(v);
            x = rk4_step(self.nf, &x, v, dt);
            let norm = x.norm();
            if !norm.is_finite() || norm > ESCAPE_NORM {
                return None;
            }
        }
        cost += (x.transpose() * &self.terminal_p * &x)[0];
        if !cost.is_finite() {
            return None;
        }
        states.push(x);
        Some((states, inputs, cost))
    }

    /// Riccati sweep along the nominal. None asks for a larger Levenberg
    /// shift; linearization failures surface as errors.
    fn backward(
        &self,
        states: &[DVector<f64>],
        inputs: &[f64],
        dt: f64,
        reg: f64,
    ) -> Result<Option<BackwardPass>> {
        let n = inputs.len();
        let dim = self.nf.dim();
        let mut vx: DVector<f64> = &self.terminal_p * &states[n] * 2.0;
        let mut vxx: DMatrix<f64> = &self.terminal_p * 2.0;
        let mut ks = vec![0.0; n];
        let mut gains = vec![RowDVector::zeros(dim); n];
        let mut grad_max = 0.0_f64;

        for i in (0..n).rev() {
            let x = &states[i];
            let u = inputs[i];
            let a = jacobian_fd(|z| rk4_step(self.nf, z, u, dt), x, FD_STEP)?;
            let b = (rk4_step(self.nf, x, u + FD_STEP, dt) - rk4_step(self.nf, x, u - FD_STEP, dt))
                / (2.0 * FD_STEP);
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "input derivative of the discrete map",
                });
            }

            let lx = &self.q * x * (2.0 * dt);
            let lxx = &self.q * (2.0 * dt);
            let lu = 2.0 * dt * self.r * u;
            let luu = 2.0 * dt * self.r;

            let qx = lx + a.transpose() * &vx;
            let qu = lu + b.dot(&vx);
            let vxx_a = &vxx * &a;
            let qxx = lxx + a.transpose() * &vxx_a;
            let vxx_b = &vxx * &b;
            let quu = luu + b.dot(&vxx_b);
            let qux: RowDVector<f64> = vxx_b.transpose() * &a;

            // The Levenberg shift is relative to the local curvature scale;
            // an absolute shift would swamp quu = O(r dt) at fine steps.
            let quu_shifted = quu + reg * quu.abs().max(luu);
            if !quu_shifted.is_finite() || quu_shifted <= 0.0 {
                return Ok(None);
            }
            let k = -qu / quu_shifted;
            let gain = &qux * (-1.0 / quu_shifted);

            vx = qx + gain.transpose() * (quu * k + qu) + qux.transpose() * k;
            vxx = qxx
                + gain.transpose() * quu * &gain
                + gain.transpose() * &qux
                + qux.transpose() * &gain;
            vxx = (&vxx + vxx.transpose()) * 0.5;

            grad_max = grad_max.max(k.abs());
            ks[i] = k;
            gains[i] = gain;
        }
        Ok(Some(BackwardPass {
            ks,
            gains,
            grad_max,
        }))
    }
}
