//! Learned extension of the manifold map beyond the linearization.
//!
//! The network psi_theta: z -> eta is trained so that the vector field on its
//! graph stays tangent to the graph when the input is the optimal-control
//! query at the lifted point: the residual
//! `fhat + ghat u* - (d psi/d z) omega`, evaluated at (psi(z), z), is driven
//! to zero in mean square. The training loop keeps psi(0) = 0 exactly by
//! absorbing any drift into the output bias after each step, so the
//! equilibrium stays on the learned manifold throughout.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};
use rayon::prelude::*;

use crate::dynamics::{NormalFormSystem, NzState};
use crate::error::{Error, Result};
use crate::mlp::{Mlp, MlpGradients};
use crate::ocp::IlqrProblem;

const ETA_FD_STEP: f64 = 1e-6;

/// Whether the gradient sees the dependence of the optimal input on the
/// lifted point, or treats the queried input as a constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UstarTreatment {
    Differentiated,
    Frozen,
}

/// One training point: a zero-coordinate sample with its queried input.
#[derive(Debug, Clone)]
pub struct SamplePoint {
    pub z: DVector<f64>,
    pub u_star: f64,
    /// d u*/d eta at the lifted point; None freezes u* in the gradient.
    pub input_gain_eta: Option<DVector<f64>>,
}

/// Residual statistics for one batch. Residual norms are reported unsquared.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub mean_residual: f64,
    pub max_residual: f64,
    pub residuals: Vec<f64>,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Step at which the learning rate is multiplied by `lr_drop_factor`;
    /// None keeps it constant. Constant-rate SGD settles into a stochastic
    /// bounce around the optimum whose size scales with the rate, so a single
    /// late drop lowers the final loss without more steps.
    pub lr_drop_step: Option<usize>,
    pub lr_drop_factor: f64,
    pub z_min: DVector<f64>,
    pub z_max: DVector<f64>,
    pub ustar: UstarTreatment,
    /// Abort when the batch residual exceeds this multiple of the first one.
    pub divergence_factor: f64,
    /// Cap on the batch-gradient norm before the momentum update. Residuals
    /// grow with the distance to the graph, so raw gradients can dwarf the
    /// parameters early in training; None applies the gradient unscaled.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            momentum: 0.9,
            lr_drop_step: None,
            lr_drop_factor: 0.1,
            z_min: DVector::from_column_slice(&[-1.2, -2.0]),
            z_max: DVector::from_column_slice(&[1.2, 2.0]),
            ustar: UstarTreatment::Differentiated,
            divergence_factor: 10.0,
            grad_clip: Some(10.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub initial_mean: f64,
    pub final_mean: f64,
    pub steps: Vec<LossReport>,
    pub total_skipped: usize,
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub tol: f64,
    pub z_min: DVector<f64>,
    pub z_max: DVector<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 20_000,
            batch_size: 64,
            learning_rate: 5e-3,
            momentum: 0.9,
            tol: 1e-4,
            z_min: DVector::from_column_slice(&[-1.2, -2.0]),
            z_max: DVector::from_column_slice(&[1.2, 2.0]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_mse: f64,
    pub reached_tol: bool,
}

/// Two-hidden-layer network mapping z to eta.
pub fn default_network<R: Rng>(
    nz: usize,
    gamma: usize,
    width: usize,
    activation: crate::mlp::Activation,
    rng: &mut R,
) -> Mlp {
    Mlp::new(&[nz, width, width, gamma], activation, rng)
}

/// Tangency defect of the learned graph at z under the input u_star.
pub fn invariance_residual(
    nf: &dyn NormalFormSystem,
    mlp: &Mlp,
    z: &DVector<f64>,
    u_star: f64,
) -> DVector<f64> {
    let s = NzState::new(mlp.forward(z), z.clone());
    let jac = mlp.input_jacobian(z);
    nf.fhat(&s) + nf.ghat(&s) * u_star - jac * nf.omega(&s)
}

/// Mean squared residual over the batch plus the origin anchor. This is the
/// quantity the gradient below differentiates.
pub fn batch_objective(
    nf: &dyn NormalFormSystem,
    mlp: &Mlp,
    samples: &[SamplePoint],
    anchor_weight: f64,
) -> f64 {
    let m = samples.len().max(1) as f64;
    let sum: f64 = samples
        .iter()
        .map(|sp| invariance_residual(nf, mlp, &sp.z, sp.u_star).norm_squared())
        .sum();
    let origin = mlp.forward(&DVector::zeros(mlp.input_dim()));
    sum / m + anchor_weight * origin.norm_squared()
}

/// Residual norms of a batch, for reporting.
pub fn batch_report(nf: &dyn NormalFormSystem, mlp: &Mlp, samples: &[SamplePoint]) -> LossReport {
    let residuals: Vec<f64> = samples
        .iter()
        .map(|sp| invariance_residual(nf, mlp, &sp.z, sp.u_star).norm())
        .collect();
    summarize(residuals, 0)
}

fn summarize(residuals: Vec<f64>, skipped: usize) -> LossReport {
    let mean = if residuals.is_empty() {
        f64::NAN
    } else {
        residuals.iter().sum::<f64>() / residuals.len() as f64
    };
    let max = residuals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    LossReport {
        mean_residual: mean,
        max_residual: if residuals.is_empty() { f64::NAN } else { max },
        residuals,
        skipped,
    }
}

/// Parameter gradient of `batch_objective`.
pub fn batch_gradient(
    nf: &dyn NormalFormSystem,
    mlp: &Mlp,
    samples: &[SamplePoint],
    anchor_weight: f64,
) -> MlpGradients {
    let mut grads = MlpGradients::zeros_like(mlp);
    let m = samples.len().max(1) as f64;
    for sp in samples {
        let r = invariance_residual(nf, mlp, &sp.z, sp.u_star);
        let a = &r * (2.0 / m);
        let (out_seed, jac_seed) = residual_seeds(nf, mlp, sp, &a);
        let g = mlp.loss_gradients(&sp.z, &out_seed, &jac_seed);
        grads.axpy(&g, 1.0);
    }
    grads.axpy(&anchor_gradient(mlp, anchor_weight), 1.0);
    grads
}

/// Parameter gradient of the origin-anchor term w * ||psi(0)||^2.
fn anchor_gradient(mlp: &Mlp, weight: f64) -> MlpGradients {
    let zero = DVector::zeros(mlp.input_dim());
    let origin = mlp.forward(&zero);
    mlp.loss_gradients(
        &zero,
        &(origin * (2.0 * weight)),
        &DMatrix::zeros(mlp.output_dim(), mlp.input_dim()),
    )
}

/// Seeds for the network gradient: how the residual-squared term moves with
/// the network output (through the vector fields and optionally the queried
/// input) and with the network's input jacobian.
fn residual_seeds(
    nf: &dyn NormalFormSystem,
    mlp: &Mlp,
    sp: &SamplePoint,
    a: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let gamma = nf.gamma();
    let psi = mlp.forward(&sp.z);
    let s = NzState::new(psi, sp.z.clone());
    let jac = mlp.input_jacobian(&sp.z);
    let omega = nf.omega(&s);

    // Central differences of the vector fields over eta at the lifted point.
    let mut dfhat = DMatrix::zeros(gamma, gamma);
    let mut dghat = DMatrix::zeros(gamma, gamma);
    let mut domega = DMatrix::zeros(nf.nz(), gamma);
    for j in 0..gamma {
        let mut sp_ = s.clone();
        let mut sm_ = s.clone();
        sp_.eta[j] += ETA_FD_STEP;
        sm_.eta[j] -= ETA_FD_STEP;
        dfhat.set_column(j, &((nf.fhat(&sp_) - nf.fhat(&sm_)) / (2.0 * ETA_FD_STEP)));
        dghat.set_column(j, &((nf.ghat(&sp_) - nf.ghat(&sm_)) / (2.0 * ETA_FD_STEP)));
        domega.set_column(
            j,
            &((nf.omega(&sp_) - nf.omega(&sm_)) / (2.0 * ETA_FD_STEP)),
        );
    }

    let mut out_seed = dfhat.transpose() * a + dghat.transpose() * a * sp.u_star
        - domega.transpose() * (jac.transpose() * a);
    if let Some(gain_eta) = &sp.input_gain_eta {
        let ghat = nf.ghat(&s);
        out_seed += gain_eta * a.dot(&ghat);
    }
    let jac_seed = -a * omega.transpose();
    (out_seed, jac_seed)
}

/// Regress the network onto a target map until the batch MSE drops below the
/// configured tolerance.
pub fn pretrain<R, F>(
    mlp: &mut Mlp,
    target: F,
    config: &PretrainConfig,
    rng: &mut R,
) -> PretrainReport
where
    R: Rng,
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let dim = mlp.input_dim();
    let mut velocity = MlpGradients::zeros_like(mlp);
    let mut steps = 0;
    let mut mse = f64::INFINITY;
    for _ in 0..config.max_steps {
        steps += 1;
        let batch: Vec<DVector<f64>> = (0..config.batch_size)
            .map(|_| sample_box(dim, &config.z_min, &config.z_max, rng))
            .collect();
        let m = batch.len() as f64;
        let mut grads = MlpGradients::zeros_like(mlp);
        let mut sum_sq = 0.0;
        for z in &batch {
            let err = mlp.forward(z) - target(z);
            sum_sq += err.norm_squared();
            let g = mlp.loss_gradients(
                z,
                &(err * (2.0 / m)),
                &DMatrix::zeros(mlp.output_dim(), dim),
            );
            grads.axpy(&g, 1.0);
        }
        mse = sum_sq / m;
        if mse < config.tol {
            return PretrainReport {
                steps,
                final_mse: mse,
                reached_tol: true,
            };
        }
        velocity.scale(config.momentum);
        velocity.axpy(&grads, 1.0);
        mlp.apply_scaled(&velocity, -config.learning_rate);
    }
    PretrainReport {
        steps,
        final_mse: mse,
        reached_tol: false,
    }
}

/// Stochastic training loop: sample zero coordinates, query the optimal
/// input at each lifted point, and descend the invariance objective with
/// norm-clipped momentum steps. After every parameter update the output bias
/// is shifted so psi(0) = 0 holds exactly; a penalty stiff enough to hold the
/// origin against the batch updates is unstable at useful learning rates,
/// while the projection costs one forward pass and cannot overshoot.
/// `on_step` sees every batch report in order.
pub fn train<R, F>(
    nf: &dyn NormalFormSystem,
    problem: &IlqrProblem,
    mlp: &mut Mlp,
    config: &TrainConfig,
    rng: &mut R,
    mut on_step: F,
) -> Result<TrainReport>
where
    R: Rng,
    F: FnMut(usize, &LossReport),
{
    assert_eq!(config.z_min.len(), mlp.input_dim());
    assert_eq!(config.z_max.len(), mlp.input_dim());
    let gamma = nf.gamma();
    let mut velocity = MlpGradients::zeros_like(mlp);
    let mut reports: Vec<LossReport> = Vec::with_capacity(config.steps);
    let mut initial_mean = f64::NAN;
    let mut total_skipped = 0;
    pin_origin(mlp);

    for step in 0..config.steps {
        let zs: Vec<DVector<f64>> = (0..config.batch_size)
            .map(|_| sample_box(mlp.input_dim(), &config.z_min, &config.z_max, rng))
            .collect();

        // Queries are pure and independent; order is restored by collect.
        let queried: Vec<Option<SamplePoint>> = zs
            .par_iter()
            .map(|z| {
                let zeta = NzState::new(mlp.forward(z), z.clone()).to_flat();
                match problem.query(&zeta) {
                    Ok(oc) if oc.converged => {
                        let gain_eta = match config.ustar {
                            UstarTreatment::Differentiated => {
                                Some(oc.gain.columns(0, gamma).transpose())
                            }
                            UstarTreatment::Frozen => None,
                        };
                        Some(SamplePoint {
                            z: z.clone(),
                            u_star: oc.input,
                            input_gain_eta: gain_eta,
                        })
                    }
                    _ => None,
                }
            })
            .collect();

        let skipped = queried.iter().filter(|q| q.is_none()).count();
        let samples: Vec<SamplePoint> = queried.into_iter().flatten().collect();
        total_skipped += skipped;

        let mut report = batch_report(nf, mlp, &samples);
        report.skipped = skipped;

        if !samples.is_empty() {
            if initial_mean.is_nan() {
                initial_mean = report.mean_residual;
            }
            if report.mean_residual > config.divergence_factor * initial_mean {
                return Err(Error::TrainingDiverged {
                    loss: report.mean_residual,
                    initial: initial_mean,
                });
            }
            let mut grads = batch_gradient(nf, mlp, &samples, 0.0);
            if !grads.is_finite() {
                return Err(Error::NonFinite {
                    context: "training gradient",
                });
            }
            if let Some(cap) = config.grad_clip {
                let norm = grads.norm();
                if norm > cap {
                    grads.scale(cap / norm);
                }
            }
            velocity.scale(config.momentum);
            velocity.axpy(&grads, 1.0);
            let lr = match config.lr_drop_step {
                Some(drop) if step >= drop => config.learning_rate * config.lr_drop_factor,
                _ => config.learning_rate,
            };
            mlp.apply_scaled(&velocity, -lr);
            pin_origin(mlp);
        }

        on_step(step, &report);
        reports.push(report);
    }

    let final_mean = reports
        .iter()
        .rev()
        .find(|r| !r.mean_residual.is_nan())
        .map(|r| r.mean_residual)
        .unwrap_or(f64::NAN);
    Ok(TrainReport {
        initial_mean,
        final_mean,
        steps: reports,
        total_skipped,
    })
}

fn sample_box<R: Rng>(
    dim: usize,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    DVector::from_fn(dim, |i, _| rng.random_range(lo[i]..hi[i]))
}

/// Translate the map so psi(0) = 0 exactly. The output bias shifts the whole
/// graph rigidly, so this is a projection onto maps that keep the equilibrium
/// on the manifold; the residual objective is then minimized within that set.
fn pin_origin(mlp: &mut Mlp) {
    let origin = mlp.forward(&DVector::zeros(mlp.input_dim()));
    let mut shift = MlpGradients::zeros_like(mlp);
    *shift.biases.last_mut().expect("mlp has layers") = origin;
    mlp.apply_scaled(&shift, -1.0);
}
