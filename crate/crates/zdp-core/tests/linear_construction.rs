use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zdp_core::dynamics::{AuxLinearSystem, CartpoleNormalForm, CartpoleParams, NzState};
use zdp_core::linalg::{linearize_about_origin, place_poles, GainMatrix, LinearModel};
use zdp_core::linear_zdp::{
    build_e_matrix, build_linear_zdp, check_relative_degree_nonlinear, psi_lin_eval,
    select_invariant_subspace, InvariantSubspace,
};
use zdp_core::Error;

const POLES: [f64; 4] = [-1.0, -2.0, -3.0, -4.0];

fn cartpole_construction() -> (LinearModel, GainMatrix, DMatrix<f64>, InvariantSubspace) {
    let nf = CartpoleNormalForm::new(CartpoleParams::default());
    let model = linearize_about_origin(&nf).unwrap();
    let k = place_poles(&model, &POLES).unwrap();
    let a_cl = &model.a - &model.b * &k.k;
    let sub = select_invariant_subspace(&a_cl, model.gamma, model.nz).unwrap();
    (model, k, a_cl, sub)
}

#[test]
fn cartpole_selection_picks_expected_modes() {
    let (_, _, _, sub) = cartpole_construction();
    assert_eq!(sub.chosen_eigenvalues.len(), 2);
    assert!((sub.chosen_eigenvalues[0] - (-3.0)).abs() < 1e-7);
    assert!((sub.chosen_eigenvalues[1] - (-1.0)).abs() < 1e-7);
}

#[test]
fn cartpole_subspace_frozen_values() {
    let (_, _, _, sub) = cartpole_construction();
    // Column 0 is the gradient of the first map component, column 1 the second.
    let want_col0 = [-4.266666666666757, -13.333333333333448];
    let want_col1 = [3.9999999999999307, 13.06122448979587];
    for i in 0..2 {
        assert!(
            (sub.s_eta[(i, 0)] - want_col0[i]).abs() < 1e-7,
            "s_eta[{i},0] = {}",
            sub.s_eta[(i, 0)]
        );
        assert!(
            (sub.s_eta[(i, 1)] - want_col1[i]).abs() < 1e-7,
            "s_eta[{i},1] = {}",
            sub.s_eta[(i, 1)]
        );
    }
}

#[test]
fn cartpole_subspace_invariance() {
    let (_, _, a_cl, sub) = cartpole_construction();
    // Bottom block of S is the identity.
    let bottom = sub.s.view((2, 0), (2, 2)).into_owned();
    assert!((&bottom - DMatrix::<f64>::identity(2, 2)).norm() < 1e-10);
    // A_cl S = S J.
    let gap = (&a_cl * &sub.s - &sub.s * &sub.j).norm();
    assert!(gap < 1e-8 * a_cl.norm(), "invariance gap {gap:e}");
    // J carries the chosen spectrum.
    let (eigs, _) = zdp_core::linalg::eig_decompose(&sub.j).unwrap();
    assert!((eigs[0].re - (-3.0)).abs() < 1e-7);
    assert!((eigs[1].re - (-1.0)).abs() < 1e-7);
}

#[test]
fn cartpole_output_row_and_input_gain() {
    let (model, k, a_cl, sub) = cartpole_construction();
    let zdp = build_linear_zdp(&sub, &model, &k).unwrap();

    assert!((zdp.p - (-3.266666666666757)).abs() < 1e-7);

    // C = [1, 0, -s_eta1^T].
    assert_eq!(zdp.c[0], 1.0);
    assert_eq!(zdp.c[1], 0.0);
    assert!((zdp.c[2] - 4.266666666666757).abs() < 1e-7);
    assert!((zdp.c[3] - 13.333333333333448).abs() < 1e-7);

    // C annihilates the subspace and the input column.
    assert!((&zdp.c * &sub.s).norm() < 1e-10);
    assert!((&zdp.c * &model.b)[0].abs() < 1e-12);
    // The second derivative of the constructed output sees the input with gain p.
    let cab = (&zdp.c * &a_cl * &model.b)[0];
    assert!((cab - zdp.p).abs() < 1e-10);
}

#[test]
fn cartpole_e_matrix_report() {
    let (model, k, a_cl, sub) = cartpole_construction();
    let zdp = build_linear_zdp(&sub, &model, &k).unwrap();
    let rep = build_e_matrix(&zdp, &a_cl, model.gamma);

    assert_eq!(rep.e.nrows(), 2);
    assert!(rep.q[0].abs() < 1e-12);
    assert!((rep.q[1] - zdp.p).abs() < 1e-10);

    // Second row: [0, p, -s_eta1^T A_z] given a_eta1 = 0.
    let row1 = rep.e.row(1).into_owned();
    assert!(row1[0].abs() < 1e-9);
    assert!((row1[1] - zdp.p).abs() < 1e-9);
    assert!((row1[2] - 13.066666666666779).abs() < 1e-6);
    assert!((row1[3] - 42.66666666666757).abs() < 1e-6);
    assert_eq!(rep.m.len(), 1);
    assert_eq!(rep.o.len(), 1);
    assert!((rep.o[0][0] - 13.066666666666779).abs() < 1e-6);
}

#[test]
fn psi_lin_is_linear_in_z() {
    let (_, _, _, sub) = cartpole_construction();
    let e1 = DVector::from_column_slice(&[1.0, 0.0]);
    let psi = psi_lin_eval(&sub, &e1);
    assert!((psi[0] - (-4.266666666666757)).abs() < 1e-7);
    assert!((psi[1] - 3.9999999999999307).abs() < 1e-7);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z1 = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
    let z2 = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
    let lhs = psi_lin_eval(&sub, &(&z1 * 2.0 + &z2));
    let rhs = psi_lin_eval(&sub, &z1) * 2.0 + psi_lin_eval(&sub, &z2);
    assert!((lhs - rhs).norm() < 1e-12);

    // Graph points (psi_lin(z), z) lie in the span of S.
    let graph = NzState::new(psi_lin_eval(&sub, &z1), z1.clone()).to_flat();
    let recon = &sub.s * z1;
    assert!((graph - recon).norm() < 1e-10);
}

#[test]
fn nonlinear_relative_degree_matches_linear_at_origin() {
    let nf = CartpoleNormalForm::new(CartpoleParams::default());
    let (model, k, _, sub) = cartpole_construction();
    let zdp = build_linear_zdp(&sub, &model, &k).unwrap();

    let s_eta1 = sub.s_eta.column(0).into_owned();
    let grad = move |_z: &DVector<f64>| s_eta1.clone();
    let p0 = check_relative_degree_nonlinear(&nf, &grad, &NzState::zeros(2, 2));
    assert!((p0 - zdp.p).abs() < 1e-6);

    // Stays bounded away from zero near the origin.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let s = NzState::new(
            DVector::from_fn(2, |_, _| rng.random_range(-0.3..0.3)),
            DVector::from_fn(2, |_, _| rng.random_range(-0.3..0.3)),
        );
        let p = check_relative_degree_nonlinear(&nf, &grad, &s);
        assert!(p.abs() > 1e-3, "input gain collapsed: {p}");
    }
}

#[test]
fn decoupled_toy_has_trivial_map() {
    let sys = AuxLinearSystem::decoupled_toy();
    let model = linearize_about_origin(&sys).unwrap();
    let k = place_poles(&model, &POLES).unwrap();
    let expected_k = [2.0, 3.0, 0.0, 0.0];
    for (got, want) in k.k.iter().zip(expected_k) {
        assert!((got - want).abs() < 1e-8, "got {got}, want {want}");
    }

    let a_cl = &model.a - &model.b * &k.k;
    let sub = select_invariant_subspace(&a_cl, model.gamma, model.nz).unwrap();
    assert!((sub.chosen_eigenvalues[0] - (-4.0)).abs() < 1e-7);
    assert!((sub.chosen_eigenvalues[1] - (-3.0)).abs() < 1e-7);
    // The slow z modes decouple from the outputs: the map is identically zero.
    assert!(sub.s_eta.norm() < 1e-8);

    let zdp = build_linear_zdp(&sub, &model, &k).unwrap();
    assert!((zdp.p - 1.0).abs() < 1e-8);
    assert_eq!(zdp.c[0], 1.0);
    assert!(zdp.c.columns(1, 3).norm() < 1e-8);
}

#[test]
fn selection_rejects_complex_spectrum() {
    // Block with a rotation: eigenvalues -1 +/- i alongside -2, -3.
    let a_cl = DMatrix::from_row_slice(
        4,
        4,
        &[
            -1.0, -1.0, 0.0, 0.0, //
            1.0, -1.0, 0.0, 0.0, //
            0.0, 0.0, -2.0, 0.0, //
            0.0, 0.0, 0.0, -3.0,
        ],
    );
    assert!(matches!(
        select_invariant_subspace(&a_cl, 2, 2),
        Err(Error::BadPoles { .. })
    ));
}

#[test]
fn selection_rejects_repeated_spectrum() {
    let a_cl = DMatrix::from_diagonal(&DVector::from_column_slice(&[-1.0, -1.0, -2.0, -3.0]));
    assert!(matches!(
        select_invariant_subspace(&a_cl, 2, 2),
        Err(Error::BadPoles { .. })
    ));
}

#[test]
fn construction_detects_relative_degree_loss() {
    // Hand-built subspace whose first-component gradient cancels the
    // eta_2 sensitivity exactly.
    let sub = InvariantSubspace {
        s: DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 1.0]),
        s_eta: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
        j: DMatrix::from_row_slice(1, 1, &[-1.0]),
        chosen_eigenvalues: vec![-1.0],
    };
    let model = LinearModel {
        a: DMatrix::zeros(3, 3),
        b: DVector::from_column_slice(&[0.0, 1.0, 0.0]),
        a_eta1: DVector::from_column_slice(&[0.0]),
        a_eta2: DVector::from_column_slice(&[1.0]),
        a_z: DMatrix::zeros(1, 1),
        gamma: 2,
        nz: 1,
    };
    let k = GainMatrix {
        k: RowDVector::zeros(3),
    };
    assert!(matches!(
        build_linear_zdp(&sub, &model, &k),
        Err(Error::RelativeDegreeLoss { .. })
    ));
}
