//! Implementations of the command-line workflows.
//!
//! Each command loads the shared configuration, builds the selected system,
//! and drives the corresponding toolkit routines. Output files are CSV for
//! trajectories, sweeps, and loss streams, and the line-oriented model format
//! for construct artifacts and checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zdp_core::dynamics::{
    AuxLinearSystem, CartpoleNormalForm, CartpoleSystem, NormalFormSystem, NzState,
};
use zdp_core::learning::{self, PretrainConfig, TrainConfig};
use zdp_core::linalg::{linearize_about_origin, lqr_gain, place_poles, GainMatrix};
use zdp_core::linear_zdp::{build_linear_zdp, psi_lin_eval, select_invariant_subspace};
use zdp_core::model::{self, Checkpoint, ConstructArtifact, Model};
use zdp_core::ocp::{IlqrConfig, IlqrProblem};
use zdp_core::runtime::{
    self, LinearMap, ManifoldMap, NetworkMap, PhysicalLqr, RoaOptions, SimOptions, StateFeedback,
    TrackingController,
};

use crate::config::{self, Config, SystemKind};
use crate::{CliError, ControllerChoice};

/// Scale of the sample points for the near-origin tangency check.
const TANGENCY_PROBE_SCALE: f64 = 1e-4;

fn load(config_path: &Path) -> Result<Config, CliError> {
    config::load_config(config_path).map_err(CliError::Config)
}

fn build_system(cfg: &Config) -> Box<dyn NormalFormSystem> {
    match cfg.system.kind {
        SystemKind::Cartpole => Box::new(CartpoleNormalForm::new(cfg.system.cartpole_params())),
        SystemKind::DecoupledToy => Box::new(AuxLinearSystem::decoupled_toy()),
    }
}

fn check_system(artifact: &ConstructArtifact, nf: &dyn NormalFormSystem) -> Result<(), CliError> {
    if artifact.system != nf.name() {
        return Err(CliError::Config(format!(
            "model was built for system '{}' but the config selects '{}'",
            artifact.system,
            nf.name()
        )));
    }
    Ok(())
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))
}

fn create_out(path: &Path) -> Result<BufWriter<File>, CliError> {
    let file = File::create(path).map_err(zdp_core::Error::from)?;
    Ok(BufWriter::new(file))
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Core(e.into())
}

/// Run the linear synthesis stage and store the resulting artifact.
pub fn construct(config_path: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load(config_path)?;
    let nf = build_system(&cfg);
    let artifact = build_artifact(&*nf, &cfg.construct.poles)?;
    model::save_construct(out, &artifact)?;
    println!(
        "system {}  output chain {}  zero coordinates {}",
        artifact.system,
        artifact.gamma(),
        artifact.nz()
    );
    println!("requested poles {}", fmt_list(&artifact.poles));
    println!(
        "subspace eigenvalues {}  input gain p {:.6}",
        fmt_list(&artifact.chosen),
        artifact.p
    );
    println!("wrote construct model to {}", out.display());
    Ok(())
}

fn build_artifact(nf: &dyn NormalFormSystem, poles: &[f64]) -> Result<ConstructArtifact, CliError> {
    let model = linearize_about_origin(nf)?;
    let k = place_poles(&model, poles)?;
    let a_cl = &model.a - &model.b * &k.k;
    let sub = select_invariant_subspace(&a_cl, model.gamma, model.nz)?;
    let zdp = build_linear_zdp(&sub, &model, &k)?;
    Ok(ConstructArtifact {
        system: nf.name().to_string(),
        poles: poles.to_vec(),
        chosen: sub.chosen_eigenvalues.clone(),
        p: zdp.p,
        k: zdp.k.k.clone(),
        s: sub.s,
        s_eta: sub.s_eta,
        j: sub.j,
    })
}

/// Pretrain onto the linear map, then descend the invariance objective with
/// inputs queried from the finite-horizon optimal control problem.
pub fn train(
    config_path: &Path,
    model_path: &Path,
    out: &Path,
    loss_out: Option<&Path>,
    seed: u64,
    jobs: usize,
) -> Result<(), CliError> {
    let cfg = load(config_path)?;
    let artifact = model::load_construct(model_path)?;
    let nf = build_system(&cfg);
    check_system(&artifact, &*nf)?;

    let nz = artifact.nz();
    let gamma = artifact.gamma();
    if cfg.train.z_half_widths.len() != nz {
        return Err(CliError::Config(format!(
            "train.z_half_widths has {} entries but the system has {} zero coordinates",
            cfg.train.z_half_widths.len(),
            nz
        )));
    }
    let z_max = DVector::from_column_slice(&cfg.train.z_half_widths);
    let z_min = -&z_max;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mlp = learning::default_network(
        nz,
        gamma,
        cfg.train.width,
        cfg.train.activation.into(),
        &mut rng,
    );

    let sub = artifact.subspace();
    let pre_cfg = PretrainConfig {
        max_steps: cfg.pretrain.max_steps,
        batch_size: cfg.pretrain.batch_size,
        learning_rate: cfg.pretrain.learning_rate,
        momentum: cfg.pretrain.momentum,
        tol: cfg.pretrain.tol,
        z_min: z_min.clone(),
        z_max: z_max.clone(),
    };
    let pre = learning::pretrain(&mut mlp, |z| psi_lin_eval(&sub, z), &pre_cfg, &mut rng);
    println!(
        "pretrain: {} steps, mse {:.3e}, reached tolerance: {}",
        pre.steps, pre.final_mse, pre.reached_tol
    );
    if !pre.reached_tol {
        log::warn!("pretraining stopped above tolerance; continuing with the warm start");
    }

    let dim = nf.dim();
    let q = DMatrix::identity(dim, dim) * cfg.ocp.state_weight;
    let ilqr_cfg = IlqrConfig {
        horizon_s: cfg.ocp.horizon_s,
        dt_s: cfg.ocp.dt_s,
        max_iters: cfg.ocp.max_iters,
        ..IlqrConfig::default()
    };
    let problem = IlqrProblem::new(&*nf, q, cfg.ocp.input_weight, ilqr_cfg)?;

    let train_cfg = TrainConfig {
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        learning_rate: cfg.train.learning_rate,
        momentum: cfg.train.momentum,
        lr_drop_step: (cfg.train.lr_drop_step > 0).then_some(cfg.train.lr_drop_step),
        lr_drop_factor: cfg.train.lr_drop_factor,
        z_min,
        z_max,
        ustar: cfg.train.ustar.into(),
        divergence_factor: cfg.train.divergence_factor,
        grad_clip: (cfg.train.grad_clip > 0.0).then_some(cfg.train.grad_clip),
    };

    let mut csv = match loss_out {
        Some(path) => {
            let mut w = create_out(path)?;
            writeln!(w, "step,mean_residual,max_residual").map_err(io_err)?;
            Some(w)
        }
        None => None,
    };
    let mut write_err: Option<std::io::Error> = None;

    let pool = thread_pool(jobs)?;
    let report = pool.install(|| {
        learning::train(
            &*nf,
            &problem,
            &mut mlp,
            &train_cfg,
            &mut rng,
            |step, loss| {
                if let Some(w) = csv.as_mut() {
                    if write_err.is_none() {
                        if let Err(e) =
                            writeln!(w, "{},{},{}", step, loss.mean_residual, loss.max_residual)
                        {
                            write_err = Some(e);
                        }
                    }
                }
                if step % 100 == 0 {
                    log::info!("step {step}: mean residual {:.4e}", loss.mean_residual);
                }
            },
        )
    })?;
    if let Some(e) = write_err {
        return Err(io_err(e));
    }
    if let Some(mut w) = csv {
        w.flush().map_err(io_err)?;
    }

    let origin_norm = mlp.forward(&DVector::zeros(nz)).norm();
    model::save_checkpoint(
        out,
        &Checkpoint {
            mlp,
            construct: artifact,
        },
    )?;
    println!(
        "training: mean residual {:.4e} -> {:.4e} over {} steps ({} queries skipped)",
        report.initial_mean,
        report.final_mean,
        report.steps.len(),
        report.total_skipped
    );
    println!("map at the origin has norm {:.3e}", origin_norm);
    println!("wrote checkpoint to {}", out.display());
    Ok(())
}

/// The map a controller tracks, together with the network when present.
struct LoadedModel {
    artifact: ConstructArtifact,
    network: Option<zdp_core::mlp::Mlp>,
}

fn load_model_parts(path: &Path) -> Result<LoadedModel, CliError> {
    Ok(match model::load_model(path)? {
        Model::Construct(artifact) => LoadedModel {
            artifact,
            network: None,
        },
        Model::Checkpoint(c) => LoadedModel {
            artifact: c.construct,
            network: Some(c.mlp),
        },
    })
}

/// Build the tracked map for a controller choice. The benchmark regulator
/// does not track a map; it gets the linear one for diagnostics only.
fn build_map(
    loaded: &LoadedModel,
    controller: ControllerChoice,
) -> Result<Box<dyn ManifoldMap>, CliError> {
    match controller {
        ControllerChoice::Zdp => {
            let mlp = loaded.network.as_ref().ok_or_else(|| {
                CliError::Config(
                    "controller 'zdp' needs a trained checkpoint, not a construct model".into(),
                )
            })?;
            if mlp.input_dim() != loaded.artifact.nz()
                || mlp.output_dim() != loaded.artifact.gamma()
            {
                return Err(CliError::Config(
                    "checkpoint network dimensions do not match its construction".into(),
                ));
            }
            Ok(Box::new(NetworkMap::new(mlp.clone())))
        }
        ControllerChoice::ZdpLinear | ControllerChoice::Lqr => {
            Ok(Box::new(LinearMap::new(loaded.artifact.s_eta.clone())))
        }
    }
}

fn baseline_gain(cfg: &Config, nf: &dyn NormalFormSystem) -> Result<GainMatrix, CliError> {
    let r = cfg.baseline.input_weight;
    match cfg.system.kind {
        SystemKind::Cartpole => {
            let sys = CartpoleSystem::new(cfg.system.cartpole_params());
            let q = DMatrix::identity(4, 4) * cfg.baseline.state_weight;
            Ok(runtime::physical_lqr_gain(&sys, &q, r)?)
        }
        SystemKind::DecoupledToy => {
            let model = linearize_about_origin(nf)?;
            let n = nf.dim();
            let q = DMatrix::identity(n, n) * cfg.baseline.state_weight;
            Ok(lqr_gain(&model, &q, r)?.0)
        }
    }
}

fn build_controller<'a>(
    cfg: &Config,
    nf: &'a dyn NormalFormSystem,
    map: &'a dyn ManifoldMap,
    controller: ControllerChoice,
) -> Result<Box<dyn StateFeedback + 'a>, CliError> {
    match controller {
        ControllerChoice::Zdp | ControllerChoice::ZdpLinear => Ok(Box::new(
            TrackingController::new(nf, map, cfg.simulate.kp, cfg.simulate.kd),
        )),
        ControllerChoice::Lqr => Ok(Box::new(PhysicalLqr::new(nf, baseline_gain(cfg, nf)?))),
    }
}

/// Roll out the closed loop and write one CSV row per knot.
pub fn simulate(
    config_path: &Path,
    model_path: &Path,
    controller: ControllerChoice,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = load(config_path)?;
    let loaded = load_model_parts(model_path)?;
    let nf = build_system(&cfg);
    check_system(&loaded.artifact, &*nf)?;
    let map = build_map(&loaded, controller)?;
    let ctrl = build_controller(&cfg, &*nf, &*map, controller)?;

    let dim = nf.dim();
    if cfg.simulate.initial_state.len() != dim {
        return Err(CliError::Config(format!(
            "simulate.initial_state has {} entries but the flat state has {}",
            cfg.simulate.initial_state.len(),
            dim
        )));
    }
    let init = DVector::from_column_slice(&cfg.simulate.initial_state);
    let opts = SimOptions {
        dt_s: cfg.simulate.dt_s,
        t_final_s: cfg.simulate.t_final_s,
        escape_norm: cfg.simulate.escape_norm,
        input_hold: cfg.simulate.input_hold.into(),
        stop_below: None,
    };
    let traj = runtime::simulate(&*nf, &*ctrl, &init, &opts)?;

    let gamma = nf.gamma();
    let nz = nf.nz();
    let mut w = create_out(out)?;
    write!(w, "t").map_err(io_err)?;
    for i in 1..=gamma {
        write!(w, ",eta{i}").map_err(io_err)?;
    }
    for i in 1..=nz {
        write!(w, ",z{i}").map_err(io_err)?;
    }
    writeln!(w, ",u,e_norm,z_norm,invariance_residual").map_err(io_err)?;

    let mut error_norms = Vec::with_capacity(traj.states.len());
    for (i, (t, state)) in traj.times.iter().zip(&traj.states).enumerate() {
        let s = NzState::from_flat(state, gamma);
        let e = runtime::error_coordinates(&*nf, &*map, &s);
        let defect = runtime::tangency_residual(&*nf, &*map, &s.z);
        error_norms.push(e.norm());
        write!(w, "{t}").map_err(io_err)?;
        for v in state.iter() {
            write!(w, ",{v}").map_err(io_err)?;
        }
        writeln!(
            w,
            ",{},{},{},{}",
            traj.inputs[i],
            e.norm(),
            s.z.norm(),
            defect
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    println!(
        "simulated {} knots under '{}'; escaped: {}",
        traj.times.len(),
        controller.name(),
        traj.escaped
    );
    println!("final state norm {:.4e}", traj.final_state().norm());
    if matches!(
        controller,
        ControllerChoice::Zdp | ControllerChoice::ZdpLinear
    ) {
        match runtime::fit_exponential_envelope(&traj.times, &error_norms, 1e-9) {
            Ok(fit) => println!(
                "tracking error envelope ~ {:.3e} * exp(-{:.3} t)",
                fit.m, fit.lambda
            ),
            Err(_) => println!("tracking error stayed below the envelope-fit floor"),
        }
    }
    println!("wrote trajectory to {}", out.display());
    Ok(())
}

/// Sweep the pendulum initial-condition grid and write one CSV row per cell.
pub fn roa(
    config_path: &Path,
    model_path: &Path,
    controller: ControllerChoice,
    out: &Path,
    jobs: usize,
) -> Result<(), CliError> {
    let cfg = load(config_path)?;
    if cfg.system.kind != SystemKind::Cartpole {
        return Err(CliError::Config(
            "the initial-condition sweep is defined for the cartpole system".into(),
        ));
    }
    let loaded = load_model_parts(model_path)?;
    let nf = build_system(&cfg);
    check_system(&loaded.artifact, &*nf)?;
    let map = build_map(&loaded, controller)?;
    let ctrl = build_controller(&cfg, &*nf, &*map, controller)?;

    let opts = RoaOptions {
        theta_range: (cfg.roa.theta_min, cfg.roa.theta_max),
        theta_dot_range: (cfg.roa.theta_dot_min, cfg.roa.theta_dot_max),
        grid: (cfg.roa.grid_theta, cfg.roa.grid_theta_dot),
        dt_s: cfg.roa.dt_s,
        t_final_s: cfg.roa.t_final_s,
        escape_norm: cfg.roa.escape_norm,
        early_tol: cfg.roa.early_tol,
        settle_tol: cfg.roa.settle_tol,
    };
    let pool = thread_pool(jobs)?;
    let cells = pool.install(|| runtime::roa_sweep(&*nf, &*ctrl, &opts));

    let mut w = create_out(out)?;
    writeln!(w, "theta,theta_dot,controller,success,settle_time").map_err(io_err)?;
    for cell in &cells {
        let settle = cell.settle_time.map(|t| t.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{}",
            cell.theta,
            cell.theta_dot,
            controller.name(),
            cell.success,
            settle
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;

    let wins = cells.iter().filter(|c| c.success).count();
    println!(
        "{} of {} cells stabilized under '{}'",
        wins,
        cells.len(),
        controller.name()
    );
    println!("wrote sweep to {}", out.display());
    Ok(())
}

struct CheckList {
    failures: usize,
}

impl CheckList {
    fn check(&mut self, name: &str, ok: bool, detail: impl FnOnce() -> String) {
        if ok {
            println!("ok   {name}");
        } else {
            self.failures += 1;
            println!("FAIL {name}: {}", detail());
        }
    }
}

/// Re-derive the linear-stage certificates for a stored model and, for a
/// checkpoint, the origin anchor of the learned map.
pub fn verify(config_path: &Path, model_path: &Path) -> Result<(), CliError> {
    let cfg = load(config_path)?;
    let loaded = load_model_parts(model_path)?;
    let nf = build_system(&cfg);
    check_system(&loaded.artifact, &*nf)?;
    let artifact = &loaded.artifact;

    let model = linearize_about_origin(&*nf)?;
    let a_cl = &model.a - &model.b * &artifact.k;
    let gamma = artifact.gamma();
    let nz = artifact.nz();
    let c = artifact.output_row();

    let mut list = CheckList { failures: 0 };

    let inv_defect =
        (&a_cl * &artifact.s - &artifact.s * &artifact.j).norm() / a_cl.norm().max(1.0);
    list.check(
        "subspace is closed-loop invariant",
        inv_defect <= 1e-8,
        || format!("relative defect {inv_defect:.3e}"),
    );

    let bottom = artifact.s.view((gamma, 0), (nz, nz)) - DMatrix::identity(nz, nz);
    let bottom_defect = bottom.norm();
    list.check(
        "subspace basis is normalized on the zero block",
        bottom_defect <= 1e-10,
        || format!("defect {bottom_defect:.3e}"),
    );

    let annihilation = (&c * &artifact.s).norm();
    list.check(
        "constructed output vanishes on the subspace",
        annihilation <= 1e-10,
        || format!("norm {annihilation:.3e}"),
    );

    let direct = (&c * &model.b)[0].abs();
    list.check("output has no direct input term", direct <= 1e-12, || {
        format!("|C B| = {direct:.3e}")
    });

    let ladder = (&c * &a_cl * &model.b)[0];
    let ladder_defect = (ladder - artifact.p).abs() / artifact.p.abs().max(1.0);
    list.check(
        "second derivative reproduces the stored input gain",
        ladder_defect <= 1e-10,
        || format!("C A_cl B = {ladder:.6e} vs stored {:.6e}", artifact.p),
    );

    list.check("relative degree margin", artifact.p.abs() >= 1e-3, || {
        format!("|p| = {:.3e}", artifact.p.abs())
    });

    let spectrum_ok = artifact.chosen.iter().all(|lambda| {
        artifact
            .poles
            .iter()
            .any(|pole| (lambda - pole).abs() <= 1e-6 * pole.abs().max(1.0))
    });
    list.check(
        "subspace eigenvalues come from the requested poles",
        spectrum_ok,
        || {
            format!(
                "chosen {} vs requested {}",
                fmt_list(&artifact.chosen),
                fmt_list(&artifact.poles)
            )
        },
    );

    let linear_map = LinearMap::new(artifact.s_eta.clone());
    let tangency = probe_tangency(&*nf, &linear_map, nz);
    list.check(
        "linear map is tangent to the flow near the origin",
        tangency <= 1e-6,
        || format!("max defect {tangency:.3e}"),
    );

    if let Some(mlp) = &loaded.network {
        let shape_ok = mlp.input_dim() == nz && mlp.output_dim() == gamma;
        list.check(
            "checkpoint network matches the construction dimensions",
            shape_ok,
            || {
                format!(
                    "network {}->{} vs construction {}->{}",
                    mlp.input_dim(),
                    mlp.output_dim(),
                    nz,
                    gamma
                )
            },
        );
        if shape_ok {
            let origin = mlp.forward(&DVector::zeros(nz)).norm();
            list.check(
                "learned map is anchored at the origin",
                origin <= 1e-2,
                || format!("norm {origin:.3e}"),
            );
        }
    }

    if list.failures == 0 {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CliError::Verification {
            failures: list.failures,
        })
    }
}

/// Max tangency defect over axis points and the all-ones corner at the probe scale.
fn probe_tangency(nf: &dyn NormalFormSystem, map: &dyn ManifoldMap, nz: usize) -> f64 {
    let mut points: Vec<DVector<f64>> = Vec::new();
    for i in 0..nz {
        for sign in [-1.0, 1.0] {
            let mut z = DVector::zeros(nz);
            z[i] = sign * TANGENCY_PROBE_SCALE;
            points.push(z);
        }
    }
    points.push(DVector::from_element(
        nz,
        TANGENCY_PROBE_SCALE / (nz as f64).sqrt(),
    ));
    points
        .iter()
        .map(|z| runtime::tangency_residual(nf, map, z))
        .fold(0.0, f64::max)
}

fn fmt_list(values: &[f64]) -> String {
    let inner: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
    format!("[{}]", inner.join(", "))
}
