//! Control-affine systems and their actuation decomposition.
//!
//! A system `x' = f(x) + g(x) v` with scalar input is split by a
//! diffeomorphism into output coordinates `eta` (a chain of gamma
//! integrators driven by the input) and zero coordinates `z` whose
//! velocity `omega(eta, z)` is independent of the input.

use nalgebra::DVector;

use crate::error::{Error, Result};

pub mod cartpole;
pub mod linear;

pub use cartpole::{CartpoleNormalForm, CartpoleParams, CartpoleSystem};
pub use linear::AuxLinearSystem;

/// State in the split coordinates: `eta` stacked over `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct NzState {
    pub eta: DVector<f64>,
    pub z: DVector<f64>,
}

impl NzState {
    pub fn new(eta: DVector<f64>, z: DVector<f64>) -> Self {
        Self { eta, z }
    }

    pub fn zeros(gamma: usize, nz: usize) -> Self {
        Self {
            eta: DVector::zeros(gamma),
            z: DVector::zeros(nz),
        }
    }

    /// Concatenate into a flat vector, eta first.
    pub fn to_flat(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.eta.len() + self.z.len());
        v.rows_mut(0, self.eta.len()).copy_from(&self.eta);
        v.rows_mut(self.eta.len(), self.z.len()).copy_from(&self.z);
        v
    }

    pub fn from_flat(v: &DVector<f64>, gamma: usize) -> Self {
        let nz = v.len() - gamma;
        Self {
            eta: v.rows(0, gamma).into_owned(),
            z: v.rows(gamma, nz).into_owned(),
        }
    }

    pub fn norm(&self) -> f64 {
        (self.eta.norm_squared() + self.z.norm_squared()).sqrt()
    }
}

/// Smooth single-input system in its native coordinates.
pub trait ControlAffineSystem {
    fn dim(&self) -> usize;
    fn name(&self) -> &str;
    /// Uncontrolled velocity f(x). Vanishes at the origin.
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    /// Input direction g(x).
    fn actuation(&self, x: &DVector<f64>) -> DVector<f64>;

    fn rhs(&self, x: &DVector<f64>, v: f64) -> DVector<f64> {
        self.drift(x) + self.actuation(x) * v
    }
}

/// A system expressed in the split (eta, z) coordinates.
///
/// The output chain is `eta_i' = eta_{i+1}` for i < gamma and
/// `eta_gamma' = fhat_gamma + ghat_gamma * v`; the zero coordinates obey
/// `z' = omega(eta, z)` with no input term. `fhat`/`ghat` are the raw output
/// dynamics before feedback linearization.
pub trait NormalFormSystem: Sync {
    fn gamma(&self) -> usize;
    fn nz(&self) -> usize;
    fn name(&self) -> &str;

    fn dim(&self) -> usize {
        self.gamma() + self.nz()
    }

    /// Coordinate change from native state to (eta, z).
    fn to_nz(&self, x: &DVector<f64>) -> NzState;
    /// Inverse coordinate change.
    fn from_nz(&self, s: &NzState) -> DVector<f64>;
    /// Input-free velocity of the zero coordinates.
    fn omega(&self, s: &NzState) -> DVector<f64>;
    /// Drift of the output chain: (eta_2, ..., eta_gamma, fhat_gamma).
    fn fhat(&self, s: &NzState) -> DVector<f64>;
    /// Input direction of the output chain: (0, ..., 0, ghat_gamma).
    fn ghat(&self, s: &NzState) -> DVector<f64>;

    /// Full velocity of the flat (eta, z) state under physical input v.
    fn zeta_rhs(&self, zeta: &DVector<f64>, v: f64) -> DVector<f64> {
        let s = NzState::from_flat(zeta, self.gamma());
        let eta_dot = self.fhat(&s) + self.ghat(&s) * v;
        let z_dot = self.omega(&s);
        NzState::new(eta_dot, z_dot).to_flat()
    }

    /// Physical input realizing a commanded gamma-th output derivative.
    ///
    /// Returns v with eta_gamma' = u_aux, i.e. v = (u_aux - fhat_gamma) / ghat_gamma.
    fn feedback_linearize(&self, s: &NzState, u_aux: f64) -> Result<f64> {
        let g = self.ghat(s)[self.gamma() - 1];
        let tol = 1e-10;
        if g.abs() < tol {
            return Err(Error::SingularDecoupling { value: g, tol });
        }
        let f = self.fhat(s)[self.gamma() - 1];
        Ok((u_aux - f) / g)
    }
}

/// One fixed-step RK4 update of the flat (eta, z) state with the input held
/// across the step.
pub fn rk4_step(nf: &dyn NormalFormSystem, zeta: &DVector<f64>, v: f64, dt: f64) -> DVector<f64> {
    let k1 = nf.zeta_rhs(zeta, v);
    let k2 = nf.zeta_rhs(&(zeta + &k1 * (dt / 2.0)), v);
    let k3 = nf.zeta_rhs(&(zeta + &k2 * (dt / 2.0)), v);
    let k4 = nf.zeta_rhs(&(zeta + &k3 * dt), v);
    zeta + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Zero-coordinate velocity on the graph of a map psi: z -> eta.
pub fn zero_dynamics_rhs<F>(nf: &dyn NormalFormSystem, psi: F, z: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let s = NzState::new(psi(z), z.clone());
    nf.omega(&s)
}

/// How far the z coordinates are from being input-free at x.
///
/// Measures the norm of (d Phi_z / dx) g(x) with a central-difference
/// Jacobian of the z part of the coordinate change. Zero (to rounding) for a
/// valid actuation decomposition.
pub fn annihilation_residual(
    nf: &dyn NormalFormSystem,
    sys: &dyn ControlAffineSystem,
    x: &DVector<f64>,
) -> f64 {
    let h = 1e-6;
    let n = sys.dim();
    let nz = nf.nz();
    let g = sys.actuation(x);
    let mut acc = DVector::zeros(nz);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let zp = nf.to_nz(&xp).z;
        let zm = nf.to_nz(&xm).z;
        acc += (zp - zm) * (g[j] / (2.0 * h));
    }
    acc.norm()
}
