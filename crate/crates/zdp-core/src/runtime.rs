//! Closed-loop machinery: manifold maps, output-tracking control, fixed-step
//! simulation, decay-envelope fitting, and attraction-region sweeps.
//!
//! A manifold map psi: z -> eta defines error coordinates
//! `e1 = eta_1 - psi_1(z)` and `e2 = eta_2 - grad psi_1(z) . omega(eta, z)`;
//! the tracking controller cancels the drift of e2 and imposes a stable
//! second-order law `e2' = -kp e1 - kd e2`, which steers the state onto the
//! graph of psi and then rides the zero dynamics.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::{rk4_step, ControlAffineSystem, NormalFormSystem, NzState};
use crate::error::{Error, Result};
use crate::linalg::{care_raw, jacobian_fd, GainMatrix};
use crate::linear_zdp::InvariantSubspace;
use crate::mlp::Mlp;

const ZETA_FD_STEP: f64 = 1e-6;
const DECOUPLING_TOL: f64 = 1e-10;

/// A candidate invariant-graph map from zero coordinates to outputs.
pub trait ManifoldMap: Sync {
    /// psi(z), all gamma components.
    fn eval(&self, z: &DVector<f64>) -> DVector<f64>;
    /// First component psi_1(z).
    fn first(&self, z: &DVector<f64>) -> f64 {
        self.eval(z)[0]
    }
    /// Gradient of psi_1 over z.
    fn first_grad(&self, z: &DVector<f64>) -> DVector<f64>;
}

/// psi == 0: the graph is the eta = 0 slice.
pub struct ZeroMap {
    pub gamma: usize,
    pub nz: usize,
}

impl ManifoldMap for ZeroMap {
    fn eval(&self, _z: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.gamma)
    }

    fn first_grad(&self, _z: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.nz)
    }
}

/// psi(z) = S_eta^T z from a constructed invariant subspace; `s_eta` is the
/// nz x gamma block whose column i is the gradient of the i-th component.
pub struct LinearMap {
    s_eta: DMatrix<f64>,
}

impl LinearMap {
    pub fn new(s_eta: DMatrix<f64>) -> Self {
        Self { s_eta }
    }

    pub fn from_subspace(sub: &InvariantSubspace) -> Self {
        Self {
            s_eta: sub.s_eta.clone(),
        }
    }

    pub fn s_eta(&self) -> &DMatrix<f64> {
        &self.s_eta
    }
}

impl ManifoldMap for LinearMap {
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        self.s_eta.transpose() * z
    }

    fn first_grad(&self, z: &DVector<f64>) -> DVector<f64> {
        let _ = z;
        self.s_eta.column(0).into_owned()
    }
}

/// psi given by a trained network.
pub struct NetworkMap {
    mlp: Mlp,
}

impl NetworkMap {
    pub fn new(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn network(&self) -> &Mlp {
        &self.mlp
    }
}

impl ManifoldMap for NetworkMap {
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        self.mlp.forward(z)
    }

    fn first_grad(&self, z: &DVector<f64>) -> DVector<f64> {
        self.mlp.input_jacobian(z).row(0).transpose()
    }
}

/// Transverse error coordinates (e1, e2) of a state relative to the graph of
/// the map. Requires a two-integrator output chain.
pub fn error_coordinates(
    nf: &dyn NormalFormSystem,
    map: &dyn ManifoldMap,
    s: &NzState,
) -> DVector<f64> {
    assert_eq!(nf.gamma(), 2, "error coordinates need a length-2 chain");
    let e1 = s.eta[0] - map.first(&s.z);
    let e2 = s.eta[1] - map.first_grad(&s.z).dot(&nf.omega(s));
    DVector::from_column_slice(&[e1, e2])
}

/// First-order tangency defect of the map at z: how far d/dt psi_1 along the
/// lifted flow is from psi_2.
pub fn tangency_residual(
    nf: &dyn NormalFormSystem,
    map: &dyn ManifoldMap,
    z: &DVector<f64>,
) -> f64 {
    let psi = map.eval(z);
    let psi2 = psi[1];
    let s = NzState::new(psi, z.clone());
    (map.first_grad(z).dot(&nf.omega(&s)) - psi2).abs()
}

/// A state-feedback law in the split coordinates.
pub trait StateFeedback: Sync {
    fn control(&self, zeta: &DVector<f64>) -> Result<f64>;
}

/// Output-tracking controller that exponentially contracts the error
/// coordinates toward the graph of the map.
pub struct TrackingController<'a> {
    nf: &'a dyn NormalFormSystem,
    map: &'a dyn ManifoldMap,
    kp: f64,
    kd: f64,
}

impl<'a> TrackingController<'a> {
    pub fn new(nf: &'a dyn NormalFormSystem, map: &'a dyn ManifoldMap, kp: f64, kd: f64) -> Self {
        assert_eq!(nf.gamma(), 2, "tracking law needs a length-2 chain");
        assert!(kp > 0.0 && kd > 0.0, "gains must be positive");
        Self { nf, map, kp, kd }
    }

    fn e2(&self, zeta: &DVector<f64>) -> f64 {
        let s = NzState::from_flat(zeta, 2);
        s.eta[1] - self.map.first_grad(&s.z).dot(&self.nf.omega(&s))
    }
}

impl StateFeedback for TrackingController<'_> {
    fn control(&self, zeta: &DVector<f64>) -> Result<f64> {
        let s = NzState::from_flat(zeta, 2);
        let e = error_coordinates(self.nf, self.map, &s);

        // Central differences of e2 over the full state.
        let n = zeta.len();
        let mut grad_e2 = DVector::zeros(n);
        for i in 0..n {
            let mut zp = zeta.clone();
            let mut zm = zeta.clone();
            zp[i] += ZETA_FD_STEP;
            zm[i] -= ZETA_FD_STEP;
            grad_e2[i] = (self.e2(&zp) - self.e2(&zm)) / (2.0 * ZETA_FD_STEP);
        }

        let drift = self.nf.zeta_rhs(zeta, 0.0);
        let input_dir = self.nf.zeta_rhs(zeta, 1.0) - &drift;
        let denom = grad_e2.dot(&input_dir);
        if denom.abs() < DECOUPLING_TOL {
            return Err(Error::SingularDecoupling {
                value: denom,
                tol: DECOUPLING_TOL,
            });
        }
        let v = (-grad_e2.dot(&drift) - self.kp * e[0] - self.kd * e[1]) / denom;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "tracking control",
            });
        }
        Ok(v)
    }
}

/// Linear state feedback v = -K x in the system's native coordinates.
pub struct PhysicalLqr<'a> {
    nf: &'a dyn NormalFormSystem,
    gain: GainMatrix,
}

impl<'a> PhysicalLqr<'a> {
    pub fn new(nf: &'a dyn NormalFormSystem, gain: GainMatrix) -> Self {
        Self { nf, gain }
    }
}

impl StateFeedback for PhysicalLqr<'_> {
    fn control(&self, zeta: &DVector<f64>) -> Result<f64> {
        let s = NzState::from_flat(zeta, self.nf.gamma());
        let x = self.nf.from_nz(&s);
        Ok(-(&self.gain.k * x)[0])
    }
}

/// Infinite-horizon gain for the linearization of a native-coordinate system
/// about the origin.
pub fn physical_lqr_gain(
    sys: &dyn ControlAffineSystem,
    q: &DMatrix<f64>,
    r: f64,
) -> Result<GainMatrix> {
    let x0 = DVector::zeros(sys.dim());
    let a = jacobian_fd(|x| sys.drift(x), &x0, ZETA_FD_STEP)?;
    let b = sys.actuation(&x0);
    let (gain, _) = care_raw(&a, &b, q, r)?;
    Ok(gain)
}

/// When the feedback is re-evaluated during integration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputHold {
    /// Recompute the control at every integrator stage.
    Stage,
    /// Hold the knot value across the whole step (zero-order hold).
    Step,
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub dt_s: f64,
    pub t_final_s: f64,
    pub escape_norm: f64,
    pub input_hold: InputHold,
    /// Stop early once the state norm falls below this.
    pub stop_below: Option<f64>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            dt_s: 0.001,
            t_final_s: 10.0,
            escape_norm: 1e6,
            input_hold: InputHold::Stage,
            stop_below: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<f64>,
    pub escaped: bool,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory is never empty")
    }

    /// First time the state norm drops below tol, if it ever does.
    pub fn first_time_below(&self, tol: f64) -> Option<f64> {
        self.times
            .iter()
            .zip(&self.states)
            .find(|(_, s)| s.norm() < tol)
            .map(|(t, _)| *t)
    }
}

/// Integrate the closed loop from a flat (eta, z) state with fixed-step RK4.
/// Escape past the configured norm ends the run with `escaped` set; a
/// non-finite state or a failed control evaluation is an error.
pub fn simulate(
    nf: &dyn NormalFormSystem,
    ctrl: &dyn StateFeedback,
    init: &DVector<f64>,
    opts: &SimOptions,
) -> Result<Trajectory> {
    assert!(
        opts.dt_s > 0.0 && opts.t_final_s > 0.0,
        "times must be positive"
    );
    let steps = (opts.t_final_s / opts.dt_s).round() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut state = init.clone();
    let mut escaped = false;

    for k in 0..=steps {
        let t = k as f64 * opts.dt_s;
        if !state.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                context: "simulated state",
            });
        }
        let u = match ctrl.control(&state) {
            Ok(u) => u,
            // Keep the sample grid intact if only the terminal control fails.
            Err(_) if k == steps && !inputs.is_empty() => *inputs.last().unwrap(),
            Err(e) => return Err(e),
        };
        times.push(t);
        states.push(state.clone());
        inputs.push(u);

        if state.norm() > opts.escape_norm {
            escaped = true;
            break;
        }
        if let Some(tol) = opts.stop_below {
            if state.norm() < tol {
                break;
            }
        }
        if k == steps {
            break;
        }

        state = match opts.input_hold {
            InputHold::Step => rk4_step(nf, &state, u, opts.dt_s),
            InputHold::Stage => rk4_stage_resampled(nf, ctrl, &state, opts.dt_s)?,
        };
    }

    Ok(Trajectory {
        times,
        states,
        inputs,
        escaped,
    })
}

fn rk4_stage_resampled(
    nf: &dyn NormalFormSystem,
    ctrl: &dyn StateFeedback,
    zeta: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let rhs = |z: &DVector<f64>| -> Result<DVector<f64>> { Ok(nf.zeta_rhs(z, ctrl.control(z)?)) };
    let k1 = rhs(zeta)?;
    let k2 = rhs(&(zeta + &k1 * (dt / 2.0)))?;
    let k3 = rhs(&(zeta + &k2 * (dt / 2.0)))?;
    let k4 = rhs(&(zeta + &k3 * dt))?;
    Ok(zeta + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Largest first-order tangency defect of the map along a trajectory's zero
/// coordinates.
pub fn verify_invariance_along_trajectory(
    nf: &dyn NormalFormSystem,
    map: &dyn ManifoldMap,
    traj: &Trajectory,
) -> f64 {
    traj.states
        .iter()
        .map(|zeta| {
            let s = NzState::from_flat(zeta, nf.gamma());
            tangency_residual(nf, map, &s.z)
        })
        .fold(0.0, f64::max)
}

/// Exponential envelope v(t) <= m exp(-lambda t), fitted by least squares on
/// the logs of the samples above the floor.
#[derive(Debug, Clone, Copy)]
pub struct EnvelopeFit {
    pub m: f64,
    pub lambda: f64,
}

pub fn fit_exponential_envelope(times: &[f64], values: &[f64], floor: f64) -> Result<EnvelopeFit> {
    assert_eq!(times.len(), values.len());
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, v)| **v > floor)
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(Error::AllBelowFloor);
    }
    let n = pts.len() as f64;
    let st: f64 = pts.iter().map(|(t, _)| t).sum();
    let sy: f64 = pts.iter().map(|(_, y)| y).sum();
    let stt: f64 = pts.iter().map(|(t, _)| t * t).sum();
    let sty: f64 = pts.iter().map(|(t, y)| t * y).sum();
    let det = n * stt - st * st;
    if det.abs() < 1e-12 * (n * stt).max(1.0) {
        return Err(Error::AllBelowFloor);
    }
    let slope = (n * sty - st * sy) / det;
    let intercept = (sy - slope * st) / n;
    Ok(EnvelopeFit {
        m: intercept.exp(),
        lambda: -slope,
    })
}

/// Grid sweep over initial pendulum conditions; the cart starts at rest.
#[derive(Debug, Clone)]
pub struct RoaOptions {
    pub theta_range: (f64, f64),
    pub theta_dot_range: (f64, f64),
    pub grid: (usize, usize),
    pub dt_s: f64,
    pub t_final_s: f64,
    pub escape_norm: f64,
    /// Norm below which the run ends as an immediate success.
    pub early_tol: f64,
    /// Norm the final state must reach for the cell to count as settled.
    pub settle_tol: f64,
}

impl Default for RoaOptions {
    fn default() -> Self {
        Self {
            theta_range: (-std::f64::consts::PI, std::f64::consts::PI),
            theta_dot_range: (-6.0, 6.0),
            grid: (61, 61),
            dt_s: 0.01,
            t_final_s: 10.0,
            escape_norm: 50.0,
            early_tol: 1e-4,
            settle_tol: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RoaCell {
    pub theta: f64,
    pub theta_dot: f64,
    pub success: bool,
    pub settle_time: Option<f64>,
}

/// Simulate every grid cell under zero-order-hold feedback and classify it.
/// A failed control evaluation or an escape marks the cell unsuccessful.
/// Rows are ordered theta-major, matching a nested loop over the two axes.
pub fn roa_sweep(
    nf: &dyn NormalFormSystem,
    ctrl: &dyn StateFeedback,
    opts: &RoaOptions,
) -> Vec<RoaCell> {
    let (n1, n2) = opts.grid;
    assert!(
        n1 >= 2 && n2 >= 2,
        "grid needs at least two points per axis"
    );
    let thetas: Vec<f64> = (0..n1)
        .map(|i| {
            opts.theta_range.0
                + (opts.theta_range.1 - opts.theta_range.0) * i as f64 / (n1 - 1) as f64
        })
        .collect();
    let theta_dots: Vec<f64> = (0..n2)
        .map(|j| {
            opts.theta_dot_range.0
                + (opts.theta_dot_range.1 - opts.theta_dot_range.0) * j as f64 / (n2 - 1) as f64
        })
        .collect();

    let sim = SimOptions {
        dt_s: opts.dt_s,
        t_final_s: opts.t_final_s,
        escape_norm: opts.escape_norm,
        input_hold: InputHold::Step,
        stop_below: Some(opts.early_tol),
    };

    (0..n1 * n2)
        .into_par_iter()
        .map(|idx| {
            let theta = thetas[idx / n2];
            let theta_dot = theta_dots[idx % n2];
            let x = DVector::from_column_slice(&[0.0, theta, 0.0, theta_dot]);
            let init = nf.to_nz(&x).to_flat();
            match simulate(nf, ctrl, &init, &sim) {
                Ok(traj) if !traj.escaped => {
                    let success = traj.final_state().norm() < opts.settle_tol;
                    RoaCell {
                        theta,
                        theta_dot,
                        success,
                        settle_time: if success {
                            traj.first_time_below(opts.settle_tol)
                        } else {
                            None
                        },
                    }
                }
                _ => RoaCell {
                    theta,
                    theta_dot,
                    success: false,
                    settle_time: None,
                },
            }
        })
        .collect()
}
