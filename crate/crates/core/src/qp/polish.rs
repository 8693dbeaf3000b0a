//! Active-set polish: re-solves the equality-constrained QP on the active
//! rows identified by the dual signs, with iterative refinement against
//! the unregularized KKT system. The polished pair replaces the ADMM
//! iterate only when it does not worsen either residual.

use super::QpProblem;
use crate::ldl::LdlFactor;
use nalgebra::DVector;

const POLISH_DELTA: f64 = 1e-7;
const REFINE_STEPS: usize = 3;

pub(super) fn polish(
    problem: &QpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = problem.n();
    let m = problem.m();

    let mut active = Vec::new();
    let mut bounds = Vec::new();
    for i in 0..m {
        if y[i] < 0.0 && problem.l()[i].is_finite() {
            active.push(i);
            bounds.push(problem.l()[i]);
        } else if y[i] > 0.0 && problem.u()[i].is_finite() {
            active.push(i);
            bounds.push(problem.u()[i]);
        }
    }
    let ma = active.len();
    let a_act = problem.a().select_rows(&active);

    let rho = DVector::from_element(ma, 1.0 / POLISH_DELTA);
    let (kkt, _) = super::solver::assemble_kkt(problem.p(), &a_act, POLISH_DELTA, &rho);
    let mut dsigns = vec![1i8; n + ma];
    for s in dsigns.iter_mut().skip(n) {
        *s = -1;
    }
    let mut factor = LdlFactor::new(&kkt, &dsigns).ok()?;

    let mut rhs = vec![0.0f64; n + ma];
    for j in 0..n {
        rhs[j] = -problem.q()[j];
    }
    rhs[n..].copy_from_slice(&bounds);

    let mut sol = rhs.clone();
    factor.solve_in_place(&mut sol);
    for _ in 0..REFINE_STEPS {
        let mut residual = rhs.clone();
        apply_unregularized_kkt(problem, &a_act, &sol, &mut residual);
        factor.solve_in_place(&mut residual);
        for k in 0..n + ma {
            sol[k] += residual[k];
        }
    }

    let x_pol = DVector::from_column_slice(&sol[..n]);
    let mut y_pol = DVector::zeros(m);
    for (k, &i) in active.iter().enumerate() {
        y_pol[i] = sol[n + k];
    }

    let (prim0, dual0) = residual_norms(problem, x, y);
    let (prim1, dual1) = residual_norms(problem, &x_pol, &y_pol);
    let better = |new: f64, old: f64| new <= old || new < 1e-10;
    if better(prim1, prim0) && better(dual1, dual0) {
        Some((x_pol, y_pol))
    } else {
        None
    }
}

/// residual -= [P x + A' nu; A x] for the unregularized KKT operator
fn apply_unregularized_kkt(
    problem: &QpProblem,
    a_act: &crate::sparse::CscMatrix,
    sol: &[f64],
    residual: &mut [f64],
) {
    let n = problem.n();
    let ma = a_act.nrows();
    let x = DVector::from_column_slice(&sol[..n]);
    let nu = DVector::from_column_slice(&sol[n..]);
    let px = problem.p() * &x;
    let at_nu = a_act.tr_mul_vec(&nu);
    let ax = a_act.mul_vec(&x);
    for j in 0..n {
        residual[j] -= px[j] + at_nu[j];
    }
    for k in 0..ma {
        residual[n + k] -= ax[k];
    }
}

fn residual_norms(problem: &QpProblem, x: &DVector<f64>, y: &DVector<f64>) -> (f64, f64) {
    let ax = problem.a().mul_vec(x);
    let mut prim = 0.0f64;
    for i in 0..problem.m() {
        let z = ax[i].clamp(problem.l()[i], problem.u()[i]);
        prim = prim.max((ax[i] - z).abs());
    }
    let dual = (problem.p() * x + problem.q() + problem.a().tr_mul_vec(y)).amax();
    (prim, dual)
}
