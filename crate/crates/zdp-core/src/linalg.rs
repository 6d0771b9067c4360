//! Dense linear-algebra kernels: finite-difference Jacobians, eigenpairs,
//! pole placement, the continuous Riccati equation, and controllability.

use nalgebra::{Complex, DMatrix, DVector, RowDVector};

use crate::dynamics::NormalFormSystem;
use crate::error::{Error, Result};

/// Linearization of a split-coordinate system about the origin, in the form
/// where the output chain is a pure integrator chain driven by the input.
///
/// A stacks the shift block over [a_eta1 | a_eta2 | a_z]; B is the unit
/// vector on the last output row. The named blocks are the partials of omega
/// with respect to eta_1, eta_2, and z.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub a_eta1: DVector<f64>,
    pub a_eta2: DVector<f64>,
    pub a_z: DMatrix<f64>,
    pub gamma: usize,
    pub nz: usize,
}

/// Single-input state-feedback row.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    pub k: RowDVector<f64>,
}

/// Central-difference Jacobian of f at x0.
pub fn jacobian_fd<F>(f: F, x0: &DVector<f64>, step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x0.len();
    let m = f(x0).len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[j] += step;
        xm[j] -= step;
        let fp = f(&xp);
        let fm = f(&xm);
        for i in 0..m {
            let v = (fp[i] - fm[i]) / (2.0 * step);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "finite-difference Jacobian",
                });
            }
            jac[(i, j)] = v;
        }
    }
    Ok(jac)
}

/// Assemble the integrator-form linear model from the system's omega blocks.
pub fn linearize_about_origin(nf: &dyn NormalFormSystem) -> Result<LinearModel> {
    let gamma = nf.gamma();
    let nz = nf.nz();
    assert_eq!(
        gamma, 2,
        "integrator-form layout is built for two output coordinates"
    );
    let n = gamma + nz;
    let zero = DVector::zeros(n);
    let j_omega = jacobian_fd(
        |zeta| {
            let s = crate::dynamics::NzState::from_flat(zeta, gamma);
            nf.omega(&s)
        },
        &zero,
        1e-6,
    )?;

    let mut a = DMatrix::zeros(n, n);
    for i in 0..gamma - 1 {
        a[(i, i + 1)] = 1.0;
    }
    for i in 0..nz {
        for j in 0..n {
            a[(gamma + i, j)] = j_omega[(i, j)];
        }
    }
    let mut b = DVector::zeros(n);
    b[gamma - 1] = 1.0;

    Ok(LinearModel {
        a_eta1: j_omega.column(0).into_owned(),
        a_eta2: j_omega.column(1).into_owned(),
        a_z: j_omega.columns(gamma, nz).into_owned(),
        a,
        b,
        gamma,
        nz,
    })
}

fn complex_id(n: usize) -> DMatrix<Complex<f64>> {
    DMatrix::from_diagonal_element(n, n, Complex::new(1.0, 0.0))
}

/// Eigenvalues and eigenvectors, ordered by ascending real part then
/// imaginary part. Eigenvalues come from the real Schur form; each
/// eigenvector is refined by inverse iteration and normalized so its
/// largest-modulus entry is real positive.
pub fn eig_decompose(m: &DMatrix<f64>) -> Result<(Vec<Complex<f64>>, DMatrix<Complex<f64>>)> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "matrix must be square");
    let scale = m.norm().max(1.0);

    let schur =
        nalgebra::linalg::Schur::try_new(m.clone(), 1e-14, 10_000).ok_or(Error::NoConvergence)?;
    let mut eigs: Vec<Complex<f64>> = schur.complex_eigenvalues().iter().copied().collect();
    eigs.sort_by(|a, b| {
        (a.re, a.im)
            .partial_cmp(&(b.re, b.im))
            .expect("eigenvalues are finite")
    });

    let mc: DMatrix<Complex<f64>> = m.map(|v| Complex::new(v, 0.0));
    let mut vectors = DMatrix::<Complex<f64>>::zeros(n, n);
    for (idx, &lambda) in eigs.iter().enumerate() {
        let v = inverse_iteration(&mc, lambda, scale)?;
        vectors.set_column(idx, &v);
    }
    Ok((eigs, vectors))
}

fn inverse_iteration(
    mc: &DMatrix<Complex<f64>>,
    lambda: Complex<f64>,
    scale: f64,
) -> Result<DVector<Complex<f64>>> {
    let n = mc.nrows();
    // A deterministic start with all directions populated.
    let mut v = DVector::from_fn(n, |i, _| Complex::new(1.0, 0.3 + i as f64));
    v /= Complex::new(v.norm(), 0.0);

    let mut jitter = 0.0;
    for _attempt in 0..4 {
        let shift = lambda + Complex::new(jitter, 0.0);
        let shifted = mc - complex_id(n) * shift;
        let lu = shifted.lu();
        let mut ok = true;
        for _ in 0..50 {
            match lu.solve(&v) {
                Some(w) => {
                    let norm = w.norm();
                    if !norm.is_finite() || norm == 0.0 {
                        ok = false;
                        break;
                    }
                    v = w / Complex::new(norm, 0.0);
                }
                None => {
                    ok = false;
                    break;
                }
            }
            let residual = (mc * &v - &v * lambda).norm();
            if residual < 1e-12 * scale {
                break;
            }
        }
        let residual = (mc * &v - &v * lambda).norm();
        if ok && residual < 1e-9 * scale {
            return Ok(normalize_phase(v));
        }
        jitter = if jitter == 0.0 {
            1e-11 * scale
        } else {
            jitter * 100.0
        };
    }
    Err(Error::NoConvergence)
}

/// Fix the arbitrary phase: rotate so the largest-modulus entry is real
/// positive, then scale to unit norm. Makes eigenvectors reproducible.
fn normalize_phase(mut v: DVector<Complex<f64>>) -> DVector<Complex<f64>> {
    let mut best = 0;
    let mut best_mod = 0.0;
    for i in 0..v.len() {
        let m = v[i].norm();
        if m > best_mod * (1.0 + 1e-12) {
            best = i;
            best_mod = m;
        }
    }
    if best_mod > 0.0 {
        let phase = v[best] / Complex::new(best_mod, 0.0);
        v /= phase;
        let norm = v.norm();
        v /= Complex::new(norm, 0.0);
    }
    v
}

fn validate_poles(poles: &[f64]) -> Result<()> {
    for (i, p) in poles.iter().enumerate() {
        if !p.is_finite() || *p >= 0.0 {
            return Err(Error::BadPoles {
                reason: format!("pole {p} is not negative real"),
            });
        }
        for q in &poles[i + 1..] {
            if (p - q).abs() < 1e-9 {
                return Err(Error::BadPoles {
                    reason: format!("repeated pole {p}"),
                });
            }
        }
    }
    Ok(())
}

/// Single-input pole placement by Ackermann's formula on raw (A, B).
pub fn place_poles_raw(a: &DMatrix<f64>, b: &DVector<f64>, poles: &[f64]) -> Result<GainMatrix> {
    let n = a.nrows();
    assert_eq!(poles.len(), n, "need one pole per state");
    validate_poles(poles)?;

    let ctrb = controllability_matrix_raw(a, b);
    let rank = matrix_rank(&ctrb, 1e-8);
    if rank < n {
        return Err(Error::Uncontrollable { rank, n });
    }

    // phi(A) for the desired characteristic polynomial, as a product of
    // linear factors.
    let mut phi = DMatrix::identity(n, n);
    for &p in poles {
        phi = phi * (a - DMatrix::from_diagonal_element(n, n, p));
    }

    // K = e_n^T C^{-1} phi(A), computed as (C^-T e_n)^T phi(A).
    let mut e_n = DVector::zeros(n);
    e_n[n - 1] = 1.0;
    let w = ctrb
        .transpose()
        .lu()
        .solve(&e_n)
        .ok_or(Error::Uncontrollable { rank, n })?;
    let k = w.transpose() * phi;
    Ok(GainMatrix { k })
}

/// Pole placement for an integrator-form linear model.
pub fn place_poles(model: &LinearModel, poles: &[f64]) -> Result<GainMatrix> {
    place_poles_raw(&model.a, &model.b, poles)
}

/// Solve A^T X + X A + C = 0 for symmetric C by Kronecker expansion.
fn lyap_solve(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    // vec(A^T X) = (I kron A^T) vec(X); vec(X A) = (A^T kron I) vec(X).
    let lhs = id.kronecker(&at) + at.kronecker(&id);
    let rhs = DVector::from_column_slice((-c).as_slice());
    let x = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NoStabilizingSolution {
            reason: "singular Lyapunov operator".into(),
        })?;
    let mut out = DMatrix::from_column_slice(n, n, x.as_slice());
    // Symmetrize against rounding.
    out = (out.clone() + out.transpose()) * 0.5;
    Ok(out)
}

/// Stabilizing solution of A^T P + P A - P B r^{-1} B^T P + Q = 0 on raw
/// matrices, by Newton-Kleinman iteration seeded from pole placement.
/// Returns (K, P) with K = r^{-1} B^T P.
pub fn care_raw(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    q: &DMatrix<f64>,
    r: f64,
) -> Result<(GainMatrix, DMatrix<f64>)> {
    let n = a.nrows();
    assert_eq!(q.nrows(), n);
    assert!(r > 0.0, "input weight must be positive");
    if (q - q.transpose()).norm() > 1e-10 * q.norm().max(1.0) {
        return Err(Error::NoStabilizingSolution {
            reason: "state weight is not symmetric".into(),
        });
    }

    let seed_poles: Vec<f64> = (1..=n).map(|i| -(i as f64)).collect();
    let mut k = place_poles_raw(a, b, &seed_poles)?.k;

    let mut p_prev: Option<DMatrix<f64>> = None;
    for _ in 0..100 {
        let a_cl = a - b * &k;
        let c = q + k.transpose() * k.clone() * r;
        let p = lyap_solve(&a_cl, &c)?;
        k = (b.transpose() * &p) / r;
        let done = match &p_prev {
            Some(prev) => (&p - prev).norm() <= 1e-14 * p.norm().max(1.0),
            None => false,
        };
        p_prev = Some(p);
        if done {
            break;
        }
    }
    let p = p_prev.expect("at least one iteration ran");

    let residual = (a.transpose() * &p + &p * a - &p * b * (b.transpose() * &p) / r + q).norm();
    if residual > 1e-8 * q.norm() {
        return Err(Error::NoStabilizingSolution {
            reason: format!("Riccati residual {residual:e}"),
        });
    }
    let a_cl = a - b * &k;
    let schur =
        nalgebra::linalg::Schur::try_new(a_cl, 1e-14, 10_000).ok_or(Error::NoConvergence)?;
    if schur.complex_eigenvalues().iter().any(|l| l.re >= 0.0) {
        return Err(Error::NoStabilizingSolution {
            reason: "closed loop is not Hurwitz".into(),
        });
    }
    Ok((GainMatrix { k }, p))
}

/// Infinite-horizon quadratic-cost gain for an integrator-form model.
pub fn lqr_gain(
    model: &LinearModel,
    q: &DMatrix<f64>,
    r: f64,
) -> Result<(GainMatrix, DMatrix<f64>)> {
    care_raw(&model.a, &model.b, q, r)
}

/// [B, AB, ..., A^{n-1} B] on raw matrices.
pub fn controllability_matrix_raw(a: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut ctrb = DMatrix::zeros(n, n);
    let mut col = b.clone();
    for j in 0..n {
        ctrb.set_column(j, &col);
        col = a * col;
    }
    ctrb
}

/// Controllability matrix of an integrator-form model.
pub fn controllability_matrix(model: &LinearModel) -> DMatrix<f64> {
    controllability_matrix_raw(&model.a, &model.b)
}

/// Numerical rank from singular values, relative to the largest.
pub fn matrix_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn symmetric_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::linalg::SymmetricEigen::new(sym);
    eig.eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}
