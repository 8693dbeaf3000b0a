//! ADMM iteration, equilibration, step-size adaptation and termination.

use super::polish::polish;
use super::{QpError, QpProblem, QpSettings, QpSolution, QpStatus};
use crate::ldl::LdlFactor;
use crate::sparse::CscMatrix;
use nalgebra::{DMatrix, DVector};

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
/// Step-size multiplier on equality rows.
const RHO_EQ_FACTOR: f64 = 1e3;
/// Refactorize only when the adapted step size moves by more than this.
const RHO_REFACTOR_RATIO: f64 = 5.0;
const ADAPTIVE_INTERVAL: usize = 100;
const CHECK_INTERVAL: usize = 25;
const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;

/// Solves the QP with the ADMM scheme. Infeasibility is reported through
/// the solution status, not as an error.
pub fn solve_qp(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    settings.validate()?;
    let mut work = Workspace::new(problem, settings)?;
    Ok(work.run())
}

struct Workspace<'a> {
    problem: &'a QpProblem,
    settings: &'a QpSettings,
    n: usize,
    m: usize,
    // scaled data
    p_s: DMatrix<f64>,
    q_s: DVector<f64>,
    a_s: CscMatrix,
    l_s: DVector<f64>,
    u_s: DVector<f64>,
    // scaling diagonals and cost factor
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    // step sizes
    rho_bar: f64,
    rho: DVector<f64>,
    eq_row: Vec<bool>,
    loose_row: Vec<bool>,
    kkt: LdlFactor,
    rho_positions: Vec<usize>,
    // iterates (scaled)
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
}

struct Residuals {
    prim: f64,
    dual: f64,
    eps_prim: f64,
    eps_dual: f64,
    // relative residuals feeding the step-size rule
    prim_rel: f64,
    dual_rel: f64,
}

impl<'a> Workspace<'a> {
    fn new(problem: &'a QpProblem, settings: &'a QpSettings) -> Result<Self, QpError> {
        let n = problem.n();
        let m = problem.m();

        let mut p_s = problem.p().clone();
        let mut q_s = problem.q().clone();
        let mut a_s = problem.a().clone();
        let mut d = DVector::from_element(n, 1.0);
        let mut e = DVector::from_element(m, 1.0);
        let mut c = 1.0;
        ruiz_equilibrate(
            settings.scaling_iters,
            &mut p_s,
            &mut q_s,
            &mut a_s,
            &mut d,
            &mut e,
            &mut c,
        );
        let l_s = DVector::from_fn(m, |i, _| problem.l()[i] * e[i]);
        let u_s = DVector::from_fn(m, |i, _| problem.u()[i] * e[i]);

        let mut eq_row = vec![false; m];
        let mut loose_row = vec![false; m];
        for i in 0..m {
            let lo = problem.l()[i];
            let hi = problem.u()[i];
            if lo.is_infinite() && hi.is_infinite() {
                loose_row[i] = true;
            } else if hi - lo <= 1e-12 * (1.0 + lo.abs() + hi.abs()) {
                eq_row[i] = true;
            }
        }

        let rho_bar = settings.rho.clamp(RHO_MIN, RHO_MAX);
        let rho = rho_vector(rho_bar, &eq_row, &loose_row);

        let (kkt_upper, rho_positions) = assemble_kkt(&p_s, &a_s, settings.sigma, &rho);
        let mut dsigns = vec![1i8; n + m];
        for s in dsigns.iter_mut().skip(n) {
            *s = -1;
        }
        let kkt = LdlFactor::new(&kkt_upper, &dsigns)?;

        Ok(Self {
            problem,
            settings,
            n,
            m,
            p_s,
            q_s,
            a_s,
            l_s,
            u_s,
            d,
            e,
            c,
            rho_bar,
            rho,
            eq_row,
            loose_row,
            kkt,
            rho_positions,
            x: DVector::zeros(n),
            z: DVector::zeros(m),
            y: DVector::zeros(m),
        })
    }

    fn run(&mut self) -> QpSolution {
        let alpha = self.settings.alpha;
        let sigma = self.settings.sigma;
        let mut rhs = vec![0.0f64; self.n + self.m];
        let mut delta_x = DVector::zeros(self.n);
        let mut delta_y = DVector::zeros(self.m);
        let mut iter = 0usize;

        let (status, iterations) = loop {
            iter += 1;

            // (1) linear system for the auxiliary iterates
            for j in 0..self.n {
                rhs[j] = sigma * self.x[j] - self.q_s[j];
            }
            for i in 0..self.m {
                rhs[self.n + i] = self.z[i] - self.y[i] / self.rho[i];
            }
            self.kkt.solve_in_place(&mut rhs);

            // (2) over-relaxed primal updates and projection
            for j in 0..self.n {
                let x_tilde = rhs[j];
                let next = alpha * x_tilde + (1.0 - alpha) * self.x[j];
                delta_x[j] = next - self.x[j];
                self.x[j] = next;
            }
            for i in 0..self.m {
                let nu = rhs[self.n + i];
                let z_tilde = self.z[i] + (nu - self.y[i]) / self.rho[i];
                let z_relaxed = alpha * z_tilde + (1.0 - alpha) * self.z[i] + self.y[i] / self.rho[i];
                let z_next = z_relaxed.clamp(self.l_s[i], self.u_s[i]);
                let y_next = self.rho[i] * (z_relaxed - z_next);
                delta_y[i] = y_next - self.y[i];
                self.z[i] = z_next;
                self.y[i] = y_next;
            }

            // (3) periodic termination and infeasibility checks
            let checking = iter % CHECK_INTERVAL == 0 || iter == self.settings.max_iter;
            if checking {
                let res = self.residuals();
                if iter % 500 == 0 && std::env::var_os("QPFOLIO_TRACE").is_some() {
                    eprintln!(
                        "iter {iter}: prim {:.3e}/{:.3e} dual {:.3e}/{:.3e} rho {:.3e}",
                        res.prim, res.eps_prim, res.dual, res.eps_dual, self.rho_bar
                    );
                }
                if res.prim <= res.eps_prim && res.dual <= res.eps_dual {
                    break (QpStatus::Solved, iter);
                }
                if self.primal_infeasible(&delta_y) {
                    break (QpStatus::PrimalInfeasible, iter);
                }
                if self.dual_infeasible(&delta_x) {
                    break (QpStatus::DualInfeasible, iter);
                }
                if iter >= self.settings.max_iter {
                    break (QpStatus::MaxIterReached, iter);
                }
                if self.settings.adaptive_rho && iter % ADAPTIVE_INTERVAL == 0 {
                    self.adapt_rho(&res);
                }
            }
        };

        // unscale
        let mut x = DVector::zeros(self.n);
        for j in 0..self.n {
            x[j] = self.d[j] * self.x[j];
        }
        let mut y = DVector::zeros(self.m);
        let mut z = DVector::zeros(self.m);
        for i in 0..self.m {
            y[i] = self.e[i] * self.y[i] / self.c;
            z[i] = self.z[i] / self.e[i];
        }

        let mut solution = QpSolution {
            objective: self.problem.objective(&x),
            x,
            y,
            status,
            iterations,
            polished: false,
        };
        let try_polish = self.settings.polish
            && matches!(status, QpStatus::Solved | QpStatus::MaxIterReached);
        if try_polish {
            if let Some((px, py)) = polish(self.problem, &solution.x, &solution.y) {
                solution.objective = self.problem.objective(&px);
                solution.x = px;
                solution.y = py;
                solution.polished = true;
                // an iteration-capped run whose polished pair meets the
                // termination tolerances is a solution
                if status == QpStatus::MaxIterReached {
                    let report = super::check_kkt(self.problem, &solution, self.settings)
                        .expect("dimensions match");
                    if report.primal <= report.eps_primal && report.dual <= report.eps_dual {
                        solution.status = QpStatus::Solved;
                    }
                }
            }
        }
        solution
    }

    /// Unscaled residual norms plus the scaled relative ones used by the
    /// step-size rule.
    fn residuals(&self) -> Residuals {
        let ax_s = self.a_s.mul_vec(&self.x);
        let px_s = &self.p_s * &self.x;
        let aty_s = self.a_s.tr_mul_vec(&self.y);

        let mut prim = 0.0f64;
        let mut ax_norm = 0.0f64;
        let mut z_norm = 0.0f64;
        for i in 0..self.m {
            let inv_e = 1.0 / self.e[i];
            prim = prim.max(((ax_s[i] - self.z[i]) * inv_e).abs());
            ax_norm = ax_norm.max((ax_s[i] * inv_e).abs());
            z_norm = z_norm.max((self.z[i] * inv_e).abs());
        }

        let mut dual = 0.0f64;
        let mut px_norm = 0.0f64;
        let mut q_norm = 0.0f64;
        let mut aty_norm = 0.0f64;
        let cinv = 1.0 / self.c;
        for j in 0..self.n {
            let s = cinv / self.d[j];
            dual = dual.max(((px_s[j] + self.q_s[j] + aty_s[j]) * s).abs());
            px_norm = px_norm.max((px_s[j] * s).abs());
            q_norm = q_norm.max((self.q_s[j] * s).abs());
            aty_norm = aty_norm.max((aty_s[j] * s).abs());
        }

        let eps_prim = self.settings.eps_abs + self.settings.eps_rel * ax_norm.max(z_norm);
        let eps_dual =
            self.settings.eps_abs + self.settings.eps_rel * px_norm.max(q_norm).max(aty_norm);

        let tiny = 1e-30;
        Residuals {
            prim,
            dual,
            eps_prim,
            eps_dual,
            prim_rel: prim / ax_norm.max(z_norm).max(tiny),
            dual_rel: dual / px_norm.max(q_norm).max(aty_norm).max(tiny),
        }
    }

    /// Residual-balancing step-size update; refactorizes the KKT system
    /// when the change is large enough to matter.
    fn adapt_rho(&mut self, res: &Residuals) {
        let ratio = (res.prim_rel / res.dual_rel.max(1e-30)).sqrt();
        let candidate = (self.rho_bar * ratio).clamp(RHO_MIN, RHO_MAX);
        if candidate > self.rho_bar * RHO_REFACTOR_RATIO
            || candidate < self.rho_bar / RHO_REFACTOR_RATIO
        {
            self.rho_bar = candidate;
            self.rho = rho_vector(self.rho_bar, &self.eq_row, &self.loose_row);
            let values: Vec<f64> = (0..self.m).map(|i| -1.0 / self.rho[i]).collect();
            self.kkt.update_values(&self.rho_positions, &values);
            if self.kkt.refactor().is_err() {
                // keep iterating with the previous factor
            }
        }
    }

    /// Certificate check for primal infeasibility, on unscaled data.
    fn primal_infeasible(&self, delta_y_scaled: &DVector<f64>) -> bool {
        let eps = self.settings.eps_prim_inf;
        let mut dy = DVector::zeros(self.m);
        for i in 0..self.m {
            dy[i] = self.e[i] * delta_y_scaled[i] / self.c;
        }
        let norm = dy.amax();
        if norm <= 1e-30 {
            return false;
        }
        let mut support = 0.0;
        for i in 0..self.m {
            let v = dy[i];
            let u = self.problem.u()[i];
            let l = self.problem.l()[i];
            if v > 0.0 {
                if u.is_infinite() {
                    if v > eps * norm {
                        return false;
                    }
                } else {
                    support += u * v;
                }
            } else if v < 0.0 {
                if l.is_infinite() {
                    if v < -eps * norm {
                        return false;
                    }
                } else {
                    support += l * v;
                }
            }
        }
        if support > -eps * norm {
            return false;
        }
        let aty = self.problem.a().tr_mul_vec(&dy);
        aty.amax() <= eps * norm
    }

    /// Certificate check for dual infeasibility, on unscaled data.
    fn dual_infeasible(&self, delta_x_scaled: &DVector<f64>) -> bool {
        let eps = self.settings.eps_dual_inf;
        let mut dx = DVector::zeros(self.n);
        for j in 0..self.n {
            dx[j] = self.d[j] * delta_x_scaled[j];
        }
        let norm = dx.amax();
        if norm <= 1e-30 {
            return false;
        }
        if self.problem.q().dot(&dx) > -eps * norm {
            return false;
        }
        let pdx = self.problem.p() * &dx;
        if pdx.amax() > eps * norm {
            return false;
        }
        let adx = self.problem.a().mul_vec(&dx);
        for i in 0..self.m {
            let u = self.problem.u()[i];
            let l = self.problem.l()[i];
            let v = adx[i];
            let ok = if u.is_infinite() && l.is_infinite() {
                true
            } else if u.is_infinite() {
                v >= -eps * norm
            } else if l.is_infinite() {
                v <= eps * norm
            } else {
                v.abs() <= eps * norm
            };
            if !ok {
                return false;
            }
        }
        true
    }
}

fn rho_vector(rho_bar: f64, eq_row: &[bool], loose_row: &[bool]) -> DVector<f64> {
    DVector::from_fn(eq_row.len(), |i, _| {
        if loose_row[i] {
            RHO_MIN
        } else if eq_row[i] {
            (rho_bar * RHO_EQ_FACTOR).clamp(RHO_MIN, RHO_MAX)
        } else {
            rho_bar
        }
    })
}

/// Modified Ruiz equilibration of the KKT data, including the cost
/// normalization pass. Mutates the problem data in place and accumulates
/// the diagonal scalings in `d`, `e` and the cost factor in `c`.
fn ruiz_equilibrate(
    iters: usize,
    p: &mut DMatrix<f64>,
    q: &mut DVector<f64>,
    a: &mut CscMatrix,
    d: &mut DVector<f64>,
    e: &mut DVector<f64>,
    c: &mut f64,
) {
    let n = p.nrows();
    let m = a.nrows();
    for _ in 0..iters {
        let a_col_norms = a.col_norms_inf();
        let a_row_norms = a.row_norms_inf();
        let mut dx = vec![1.0f64; n];
        for j in 0..n {
            let p_col = p.column(j).amax();
            let norm = p_col.max(a_col_norms[j]);
            dx[j] = scaling_factor(norm);
        }
        let mut de = vec![1.0f64; m];
        for i in 0..m {
            de[i] = scaling_factor(a_row_norms[i]);
        }

        for jj in 0..n {
            for ii in 0..n {
                p[(ii, jj)] *= dx[ii] * dx[jj];
            }
        }
        for j in 0..n {
            q[j] *= dx[j];
            d[j] *= dx[j];
        }
        a.scale(&de, &dx);
        for i in 0..m {
            e[i] *= de[i];
        }

        // cost normalization
        let mut mean_col_norm = 0.0;
        for j in 0..n {
            mean_col_norm += p.column(j).amax();
        }
        if n > 0 {
            mean_col_norm /= n as f64;
        }
        let gamma = 1.0 / mean_col_norm.max(q.amax()).max(1e-12);
        let gamma = gamma.clamp(MIN_SCALING, MAX_SCALING);
        *p *= gamma;
        *q *= gamma;
        *c *= gamma;
    }
}

fn scaling_factor(norm: f64) -> f64 {
    if norm < 1e-12 {
        1.0
    } else {
        (1.0 / norm.sqrt()).clamp(MIN_SCALING, MAX_SCALING)
    }
}

/// Assembles the upper triangle of the KKT matrix
/// `[P + sigma I, A'; A, -diag(1/rho)]` and reports the nnz positions of
/// the step-size diagonal for later updates.
pub(super) fn assemble_kkt(
    p: &DMatrix<f64>,
    a: &CscMatrix,
    sigma: f64,
    rho: &DVector<f64>,
) -> (CscMatrix, Vec<usize>) {
    let n = p.nrows();
    let m = a.nrows();
    let at = a.transpose();

    let mut colptr = Vec::with_capacity(n + m + 1);
    let mut rowind = Vec::new();
    let mut values = Vec::new();
    colptr.push(0);
    for j in 0..n {
        for i in 0..j {
            let v = p[(i, j)];
            if v != 0.0 {
                rowind.push(i);
                values.push(v);
            }
        }
        rowind.push(j);
        values.push(p[(j, j)] + sigma);
        colptr.push(rowind.len());
    }
    let mut rho_positions = Vec::with_capacity(m);
    for i in 0..m {
        // column n+i holds row i of A (= column i of A')
        for k in at.colptr()[i]..at.colptr()[i + 1] {
            rowind.push(at.rowind()[k]);
            values.push(at.values()[k]);
        }
        rho_positions.push(rowind.len());
        rowind.push(n + i);
        values.push(-1.0 / rho[i]);
        colptr.push(rowind.len());
    }
    (
        CscMatrix::from_parts(n + m, n + m, colptr, rowind, values),
        rho_positions,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn solve_dense(
        p: &DMatrix<f64>,
        q: &DVector<f64>,
        a: &DMatrix<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        settings: &QpSettings,
    ) -> QpSolution {
        let problem =
            QpProblem::with_dense_a(p.clone(), q.clone(), a, l.clone(), u.clone()).unwrap();
        solve_qp(&problem, settings).unwrap()
    }

    #[test]
    fn identity_on_simplex_is_uniform() {
        let p = DMatrix::identity(2, 2);
        let q = DVector::zeros(2);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let l = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let u = DVector::from_vec(vec![1.0, f64::INFINITY, f64::INFINITY]);
        let sol = solve_dense(&p, &q, &a, &l, &u, &QpSettings::HIGH);
        assert_eq!(sol.status, QpStatus::Solved);
        assert_abs_diff_eq!(sol.x[0], 0.5, epsilon = 1e-7);
        assert_abs_diff_eq!(sol.x[1], 0.5, epsilon = 1e-7);
    }

    #[test]
    fn diagonal_budget_matches_closed_form() {
        // min 1/2 x' diag(1,4) x on {1'x = 1}: x = (0.8, 0.2)
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let q = DVector::zeros(2);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let l = DVector::from_vec(vec![1.0]);
        let u = DVector::from_vec(vec![1.0]);
        let sol = solve_dense(&p, &q, &a, &l, &u, &QpSettings::HIGH);
        assert_eq!(sol.status, QpStatus::Solved);
        assert_abs_diff_eq!(sol.x[0], 0.8, epsilon = 1e-8);
        assert_abs_diff_eq!(sol.x[1], 0.2, epsilon = 1e-8);
        let report = super::super::check_kkt(
            &QpProblem::with_dense_a(p, q, &a, l, u).unwrap(),
            &sol,
            &QpSettings::HIGH,
        )
        .unwrap();
        assert!(report.primal < 1e-9 && report.dual < 1e-9 && report.gap < 1e-9);
    }

    #[test]
    fn contradictory_rows_detected_primal_infeasible() {
        // x1 >= 1 and x1 <= 0
        let p = DMatrix::identity(1, 1);
        let q = DVector::zeros(1);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let l = DVector::from_vec(vec![1.0, f64::NEG_INFINITY]);
        let u = DVector::from_vec(vec![f64::INFINITY, 0.0]);
        let sol = solve_dense(&p, &q, &a, &l, &u, &QpSettings::DEFAULT);
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
        let sol_high = solve_dense(&p, &q, &a, &l, &u, &QpSettings::HIGH);
        assert_eq!(sol_high.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn unbounded_direction_detected_dual_infeasible() {
        // min -x with x >= 0 only: unbounded below
        let p = DMatrix::zeros(1, 1);
        let q = DVector::from_vec(vec![-1.0]);
        let a = DMatrix::from_row_slice(1, 1, &[1.0]);
        let l = DVector::from_vec(vec![0.0]);
        let u = DVector::from_vec(vec![f64::INFINITY]);
        let sol = solve_dense(&p, &q, &a, &l, &u, &QpSettings::DEFAULT);
        assert_eq!(sol.status, QpStatus::DualInfeasible);
    }

    #[test]
    fn objective_scaling_leaves_argmin_unchanged() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]);
        let q = DVector::from_vec(vec![0.3, -0.7]);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        let l = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let u = DVector::from_vec(vec![1.0, f64::INFINITY, f64::INFINITY]);
        let base = solve_dense(&p, &q, &a, &l, &u, &QpSettings::HIGH);
        for scale in [3.0, 0.01, 250.0] {
            let scaled = solve_dense(
                &(&p * scale),
                &(&q * scale),
                &a,
                &l,
                &u,
                &QpSettings::HIGH,
            );
            assert_eq!(scaled.status, QpStatus::Solved);
            assert!((scaled.x - &base.x).amax() < 1e-8);
        }
    }

    #[test]
    fn high_precision_terminates_at_least_as_feasible_as_default() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..15 {
            let n = 3 + (rng.random::<u32>() % 10) as usize;
            let g = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
            let p = &g * g.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1;
            let q = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
            let mut a = DMatrix::zeros(n + 1, n);
            for j in 0..n {
                a[(0, j)] = 1.0;
                a[(j + 1, j)] = 1.0;
            }
            let mut l = DVector::from_element(n + 1, 0.0);
            let mut u = DVector::from_element(n + 1, 0.6);
            l[0] = 1.0;
            u[0] = 1.0;
            let problem = QpProblem::with_dense_a(p, q, &a, l, u).unwrap();
            let loose = solve_qp(&problem, &QpSettings::DEFAULT).unwrap();
            let tight = solve_qp(&problem, &QpSettings::HIGH).unwrap();
            let r_loose =
                super::super::check_kkt(&problem, &loose, &QpSettings::DEFAULT).unwrap();
            let r_tight = super::super::check_kkt(&problem, &tight, &QpSettings::HIGH).unwrap();
            assert!(
                r_tight.primal <= r_loose.primal + 1e-15,
                "high-precision primal residual {} exceeds default {}",
                r_tight.primal,
                r_loose.primal
            );
        }
    }

    #[test]
    fn unconstrained_problem_solves() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        let q = DVector::from_vec(vec![-2.0, -4.0]);
        let a = CscMatrix::zeros(0, 2);
        let problem =
            QpProblem::new(p, q, a, DVector::zeros(0), DVector::zeros(0)).unwrap();
        let sol = solve_qp(&problem, &QpSettings::HIGH).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(sol.x[1], 2.0, epsilon = 1e-6);
    }
}
