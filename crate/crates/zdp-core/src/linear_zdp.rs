//! Constructive local synthesis of the manifold map from the linearization.
//!
//! Pipeline: place poles on the integrator-form model, grab the closed-loop
//! eigenvectors whose z-projections span the zero coordinates, normalize the
//! spanned subspace S so its bottom block is the identity, and read off the
//! linear map psi_lin(z) = S_eta^T z together with the output row
//! C = [1 0 -s_eta1^T] whose relative degree is certified by the scalar
//! p = 1 - s_eta1^T a_eta2.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::dynamics::{NormalFormSystem, NzState};
use crate::error::{Error, Result};
use crate::linalg::{eig_decompose, GainMatrix, LinearModel};

/// Closed-loop invariant subspace with identity-normalized z block.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantSubspace {
    /// n x nz basis; bottom nz x nz block is the identity.
    pub s: DMatrix<f64>,
    /// nz x gamma block, column i is the gradient of the i-th map component.
    pub s_eta: DMatrix<f64>,
    /// Reduced dynamics on the subspace: A_cl S = S J.
    pub j: DMatrix<f64>,
    pub chosen_eigenvalues: Vec<f64>,
}

impl InvariantSubspace {
    pub fn gamma(&self) -> usize {
        self.s_eta.ncols()
    }

    pub fn nz(&self) -> usize {
        self.s_eta.nrows()
    }
}

/// Output construction certifying the relative degree.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearZdp {
    pub s_eta1: DVector<f64>,
    /// Output row [1 0 -s_eta1^T].
    pub c: RowDVector<f64>,
    /// Placement gain the subspace was built from.
    pub k: GainMatrix,
    /// Input gain of the constructed output's second derivative.
    pub p: f64,
}

/// Stacked output rows C A_cl^i and their ladder against B.
#[derive(Debug, Clone, PartialEq)]
pub struct EMatrixReport {
    /// Row i is C A_cl^i, i = 0..gamma-1.
    pub e: DMatrix<f64>,
    /// C A_cl^i B for i = 0..gamma-1; all but the last vanish.
    pub q: Vec<f64>,
    /// Leading scalar of each row past the first.
    pub m: Vec<f64>,
    /// z block of each row past the first.
    pub o: Vec<RowDVector<f64>>,
    pub p: f64,
}

/// Pick nz closed-loop eigenvectors whose z-projections span the zero
/// coordinates, greedily maximizing the smallest singular value of the
/// projection, and normalize so the bottom block of S is the identity.
pub fn select_invariant_subspace(
    a_cl: &DMatrix<f64>,
    gamma: usize,
    nz: usize,
) -> Result<InvariantSubspace> {
    let n = a_cl.nrows();
    assert_eq!(gamma + nz, n, "blocks must partition the state");
    assert!(nz >= 1, "need at least one zero coordinate");

    let scale = a_cl.norm().max(1.0);
    let (eigs, vecs) = eig_decompose(a_cl)?;
    for (i, l) in eigs.iter().enumerate() {
        if l.im.abs() > 1e-8 * scale {
            return Err(Error::BadPoles {
                reason: format!("closed-loop eigenvalue {l} is not real"),
            });
        }
        for m in &eigs[i + 1..] {
            if (l.re - m.re).abs() < 1e-9 * scale {
                return Err(Error::BadPoles {
                    reason: format!("closed-loop eigenvalue {} is repeated", l.re),
                });
            }
        }
    }
    let v_real: DMatrix<f64> = vecs.map(|c| c.re);

    // Greedy column selection on the z-projection.
    let mut chosen: Vec<usize> = Vec::with_capacity(nz);
    for _ in 0..nz {
        let mut best: Option<(usize, f64)> = None;
        for cand in 0..n {
            if chosen.contains(&cand) {
                continue;
            }
            let mut cols = chosen.clone();
            cols.push(cand);
            let mut zproj = DMatrix::zeros(nz, cols.len());
            for (j, &c) in cols.iter().enumerate() {
                zproj.set_column(j, &v_real.view((gamma, c), (nz, 1)).column(0));
            }
            let sv = zproj.svd(false, false).singular_values;
            let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
            let better = match best {
                None => true,
                Some((_, cur)) => smin > cur + 1e-15,
            };
            if better {
                best = Some((cand, smin));
            }
        }
        let (idx, smin) = best.expect("candidate set is nonempty");
        if smin <= 1e-8 {
            return Err(Error::DegenerateProjection);
        }
        chosen.push(idx);
    }
    chosen.sort_unstable();

    let mut s_raw = DMatrix::zeros(n, nz);
    let mut lambda = DMatrix::zeros(nz, nz);
    for (j, &c) in chosen.iter().enumerate() {
        s_raw.set_column(j, &v_real.column(c));
        lambda[(j, j)] = eigs[c].re;
    }

    // Normalize: S = S_raw N^{-1} with N the z block, so the bottom of S is I.
    let n_block = s_raw.view((gamma, 0), (nz, nz)).into_owned();
    let n_lu = n_block.clone().lu();
    let n_inv = n_lu.try_inverse().ok_or(Error::DegenerateProjection)?;
    let s = &s_raw * &n_inv;
    let j = &n_block * lambda * &n_inv;

    let s_eta = s.view((0, 0), (gamma, nz)).transpose();
    Ok(InvariantSubspace {
        s,
        s_eta,
        j,
        chosen_eigenvalues: chosen.iter().map(|&c| eigs[c].re).collect(),
    })
}

/// Extract the output construction from a selected subspace.
pub fn build_linear_zdp(
    sub: &InvariantSubspace,
    model: &LinearModel,
    k: &GainMatrix,
) -> Result<LinearZdp> {
    let gamma = sub.gamma();
    let nz = sub.nz();
    assert_eq!(
        gamma, 2,
        "output construction is built for two output coordinates"
    );
    let s_eta1 = sub.s_eta.column(0).into_owned();

    let mut c = RowDVector::zeros(gamma + nz);
    c[0] = 1.0;
    for i in 0..nz {
        c[gamma + i] = -s_eta1[i];
    }

    let p = 1.0 - s_eta1.dot(&model.a_eta2);
    if p.abs() < 1e-8 {
        return Err(Error::RelativeDegreeLoss { p_abs: p.abs() });
    }
    Ok(LinearZdp {
        s_eta1,
        c,
        k: k.clone(),
        p,
    })
}

/// Stack the rows C A_cl^i and report the input ladder.
pub fn build_e_matrix(zdp: &LinearZdp, a_cl: &DMatrix<f64>, gamma: usize) -> EMatrixReport {
    let n = a_cl.nrows();
    let nz = n - gamma;
    let mut b = DVector::zeros(n);
    b[gamma - 1] = 1.0;

    let mut e = DMatrix::zeros(gamma, n);
    let mut q = Vec::with_capacity(gamma);
    let mut m = Vec::new();
    let mut o = Vec::new();
    let mut row = zdp.c.clone();
    for i in 0..gamma {
        e.row_mut(i).copy_from(&row);
        q.push((&row * &b)[0]);
        if i >= 1 {
            m.push(row[0]);
            o.push(row.columns(gamma, nz).into_owned());
        }
        row = &row * a_cl;
    }
    EMatrixReport {
        e,
        q,
        m,
        o,
        p: zdp.p,
    }
}

/// Input gain of the error output's top derivative at a general state:
/// 1 - (d psi1 / d z) (d omega / d eta_2), the nonlinear counterpart of p.
pub fn check_relative_degree_nonlinear(
    nf: &dyn NormalFormSystem,
    psi1_grad: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    zeta: &NzState,
) -> f64 {
    let h = 1e-6;
    let mut sp = zeta.clone();
    let mut sm = zeta.clone();
    sp.eta[1] += h;
    sm.eta[1] -= h;
    let domega = (nf.omega(&sp) - nf.omega(&sm)) / (2.0 * h);
    1.0 - psi1_grad(&zeta.z).dot(&domega)
}

/// Evaluate the linear manifold map psi_lin(z) = S_eta^T z.
pub fn psi_lin_eval(sub: &InvariantSubspace, z: &DVector<f64>) -> DVector<f64> {
    sub.s_eta.transpose() * z
}
