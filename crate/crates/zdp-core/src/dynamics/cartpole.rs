//! Cartpole with nonlinear cart damping, upright equilibrium at the origin.
//!
//! Native state (x, theta, xdot, thetadot) with theta measured from upright
//! and a force input on the cart. The damping force d(xdot) = sigma(xdot) xdot
//! switches on only above a small speed threshold, which makes the drift
//! discontinuous in xdot.
//!
//! Split coordinates: eta = (x, xdot), z = (theta, p_theta) where p_theta is
//! the conjugate momentum of theta. Because the input forces only the cart,
//! p_theta' contains neither the input nor the damping, so z' is input-free.

use nalgebra::DVector;

use super::{ControlAffineSystem, NormalFormSystem, NzState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartpoleParams {
    pub cart_mass_kg: f64,
    pub pole_mass_kg: f64,
    pub pole_length_m: f64,
    pub gravity_m_s2: f64,
    /// Cart speed below which the damping force is zero.
    pub damping_threshold_m_s: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            cart_mass_kg: 1.0,
            pole_mass_kg: 0.1,
            pole_length_m: 1.0,
            gravity_m_s2: 9.8,
            damping_threshold_m_s: 1e-3,
        }
    }
}

impl CartpoleParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.cart_mass_kg > 0.0) {
            return Err("cart mass must be positive".into());
        }
        if !(self.pole_mass_kg > 0.0) {
            return Err("pole mass must be positive".into());
        }
        if !(self.pole_length_m > 0.0) {
            return Err("pole length must be positive".into());
        }
        if !(self.gravity_m_s2 > 0.0) {
            return Err("gravity must be positive".into());
        }
        if !(self.damping_threshold_m_s >= 0.0) {
            return Err("damping threshold must be non-negative".into());
        }
        Ok(())
    }

    /// Damping force on the cart at speed xdot.
    pub fn damping(&self, xdot: f64) -> f64 {
        if xdot.abs() < self.damping_threshold_m_s {
            0.0
        } else {
            xdot
        }
    }

    /// Cart acceleration given angle, angular rate, cart speed, and force.
    fn xddot(&self, theta: f64, thetadot: f64, xdot: f64, force: f64) -> f64 {
        let (mc, mp, l, g) = (
            self.cart_mass_kg,
            self.pole_mass_kg,
            self.pole_length_m,
            self.gravity_m_s2,
        );
        let s = theta.sin();
        let c = theta.cos();
        let denom = mc + mp * s * s;
        (force - self.damping(xdot) - mp * g * s * c + mp * l * thetadot * thetadot * s) / denom
    }
}

/// Cartpole in native coordinates.
#[derive(Debug, Clone)]
pub struct CartpoleSystem {
    pub params: CartpoleParams,
}

impl CartpoleSystem {
    pub fn new(params: CartpoleParams) -> Self {
        Self { params }
    }

    /// Kinetic plus potential energy, zero at the upright rest state.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let p = &self.params;
        let (theta, xdot, thetadot) = (x[1], x[2], x[3]);
        let kinetic = 0.5 * (p.cart_mass_kg + p.pole_mass_kg) * xdot * xdot
            + p.pole_mass_kg * p.pole_length_m * xdot * thetadot * theta.cos()
            + 0.5 * p.pole_mass_kg * p.pole_length_m * p.pole_length_m * thetadot * thetadot;
        let potential = p.pole_mass_kg * p.gravity_m_s2 * p.pole_length_m * (theta.cos() - 1.0);
        kinetic + potential
    }
}

impl ControlAffineSystem for CartpoleSystem {
    fn dim(&self) -> usize {
        4
    }

    fn name(&self) -> &str {
        "cartpole"
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let (theta, xdot, thetadot) = (x[1], x[2], x[3]);
        let xdd = p.xddot(theta, thetadot, xdot, 0.0);
        let thetadd = (p.gravity_m_s2 * theta.sin() - xdd * theta.cos()) / p.pole_length_m;
        DVector::from_column_slice(&[xdot, thetadot, xdd, thetadd])
    }

    fn actuation(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = &self.params;
        let theta = x[1];
        let s = theta.sin();
        let inv_denom = 1.0 / (p.cart_mass_kg + p.pole_mass_kg * s * s);
        DVector::from_column_slice(&[
            0.0,
            0.0,
            inv_denom,
            -theta.cos() * inv_denom / p.pole_length_m,
        ])
    }
}

/// Cartpole in split coordinates eta = (x, xdot), z = (theta, p_theta).
#[derive(Debug, Clone)]
pub struct CartpoleNormalForm {
    pub params: CartpoleParams,
}

impl CartpoleNormalForm {
    pub fn new(params: CartpoleParams) -> Self {
        Self { params }
    }

    fn thetadot(&self, s: &NzState) -> f64 {
        let p = &self.params;
        let (theta, p_theta) = (s.z[0], s.z[1]);
        let xdot = s.eta[1];
        (p_theta - p.pole_mass_kg * p.pole_length_m * xdot * theta.cos())
            / (p.pole_mass_kg * p.pole_length_m * p.pole_length_m)
    }
}

impl NormalFormSystem for CartpoleNormalForm {
    fn gamma(&self) -> usize {
        2
    }

    fn nz(&self) -> usize {
        2
    }

    fn name(&self) -> &str {
        "cartpole"
    }

    fn to_nz(&self, x: &DVector<f64>) -> NzState {
        let p = &self.params;
        let (pos, theta, xdot, thetadot) = (x[0], x[1], x[2], x[3]);
        let p_theta = p.pole_mass_kg * p.pole_length_m * p.pole_length_m * thetadot
            + p.pole_mass_kg * p.pole_length_m * xdot * theta.cos();
        NzState::new(
            DVector::from_column_slice(&[pos, xdot]),
            DVector::from_column_slice(&[theta, p_theta]),
        )
    }

    fn from_nz(&self, s: &NzState) -> DVector<f64> {
        DVector::from_column_slice(&[s.eta[0], s.z[0], s.eta[1], self.thetadot(s)])
    }

    fn omega(&self, s: &NzState) -> DVector<f64> {
        let p = &self.params;
        let theta = s.z[0];
        let xdot = s.eta[1];
        let thetadot = self.thetadot(s);
        // p_theta evolves free of both input and damping: neither acts on theta.
        let p_theta_dot =
            p.pole_mass_kg * p.pole_length_m * theta.sin() * (p.gravity_m_s2 - thetadot * xdot);
        DVector::from_column_slice(&[thetadot, p_theta_dot])
    }

    fn fhat(&self, s: &NzState) -> DVector<f64> {
        let xdot = s.eta[1];
        let thetadot = self.thetadot(s);
        let xdd = self.params.xddot(s.z[0], thetadot, xdot, 0.0);
        DVector::from_column_slice(&[xdot, xdd])
    }

    fn ghat(&self, s: &NzState) -> DVector<f64> {
        let p = &self.params;
        let sin = s.z[0].sin();
        DVector::from_column_slice(&[0.0, 1.0 / (p.cart_mass_kg + p.pole_mass_kg * sin * sin)])
    }
}
