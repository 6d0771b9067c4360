//! Linear systems already in split coordinates.
//!
//! zeta' = A zeta + e_gamma v, with the top gamma-1 rows of A forming the
//! integrator shift. Used as test articles (double integrator, decoupled toy)
//! and as the bridge between the linear construction and the nonlinear
//! interfaces.

use nalgebra::{DMatrix, DVector};

use super::{NormalFormSystem, NzState};

#[derive(Debug, Clone)]
pub struct AuxLinearSystem {
    a: DMatrix<f64>,
    gamma: usize,
    name: String,
}

impl AuxLinearSystem {
    /// Wrap a system matrix whose top gamma-1 rows are the integrator shift.
    ///
    /// Row gamma (the driven row) and the zero-coordinate rows are free.
    pub fn new(a: DMatrix<f64>, gamma: usize, name: impl Into<String>) -> Self {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "system matrix must be square");
        assert!(gamma >= 1 && gamma <= n);
        for i in 0..gamma - 1 {
            for j in 0..n {
                let expected = if j == i + 1 { 1.0 } else { 0.0 };
                assert!(
                    (a[(i, j)] - expected).abs() < 1e-12,
                    "row {i} must be the integrator shift"
                );
            }
        }
        Self {
            a,
            gamma,
            name: name.into(),
        }
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Two integrators from input to position: eta = (pos, vel), no zero coordinates.
    pub fn double_integrator() -> Self {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        Self::new(a, 2, "double_integrator")
    }

    /// Output chain weakly driving two self-stable zero coordinates.
    ///
    /// z1' = 0.1 eta1 - 3 z1, z2' = 0.1 eta2 - 4 z2. Controllable, and the
    /// closed loop from poles {-1,-2,-3,-4} is block triangular, so the
    /// {-3,-4} eigenvectors carry no eta component and the constructed
    /// manifold map is identically zero.
    pub fn decoupled_toy() -> Self {
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, //
                0.1, 0.0, -3.0, 0.0, //
                0.0, 0.1, 0.0, -4.0,
            ],
        );
        Self::new(a, 2, "decoupled_toy")
    }
}

impl NormalFormSystem for AuxLinearSystem {
    fn gamma(&self) -> usize {
        self.gamma
    }

    fn nz(&self) -> usize {
        self.a.nrows() - self.gamma
    }

    fn name(&self) -> &str {
        &self.name
    }

    fn to_nz(&self, x: &DVector<f64>) -> NzState {
        NzState::from_flat(x, self.gamma)
    }

    fn from_nz(&self, s: &NzState) -> DVector<f64> {
        s.to_flat()
    }

    fn omega(&self, s: &NzState) -> DVector<f64> {
        let zeta = s.to_flat();
        let full = &self.a * zeta;
        full.rows(self.gamma, self.nz()).into_owned()
    }

    fn fhat(&self, s: &NzState) -> DVector<f64> {
        let zeta = s.to_flat();
        let full = &self.a * zeta;
        full.rows(0, self.gamma).into_owned()
    }

    fn ghat(&self, _s: &NzState) -> DVector<f64> {
        let mut g = DVector::zeros(self.gamma);
        g[self.gamma - 1] = 1.0;
        g
    }
}
