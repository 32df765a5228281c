//! Suggest-Improve solver for the non-convex feasibility programs of
//! local-metric models.
//!
//! Each feasibility row `1/2 x'Qx + q'x + r + eps <= 0` with indefinite
//! `Q = lambda_i - lambda_j` splits into a difference of convex quadratics
//! `f(x) - g(x) <= 0` with `f` built from `lambda_i` and `g(x) =
//! 1/2 x' lambda_j x`. The Improve step repeatedly replaces `g` by its
//! affine minorant at the current iterate, attaches one nonnegative slack
//! per relaxed row, and solves the convex subproblem
//!
//! ```text
//!   minimize  theta(x', x) + tau * sum(s)
//!   s.t.      f_k(x') - ghat_k(x') <= s_k,  s >= 0,  user rows
//! ```
//!
//! with the penalty weight `tau` growing while slacks remain. Rows whose
//! difference matrix is already psd need no relaxation and enter the
//! subproblem as hard convex rows; when every row is hard the first
//! subproblem *is* the original program and one iteration suffices.
//!
//! The Suggest step starts from the target prototype, which satisfies every
//! feasibility row whenever the margin is below the inter-prototype
//! distances.

use nalgebra::{DMatrix, DVector};

use crate::constraints::{
    apply_user_constraints, linearize_concave_part, QuadraticConstraint, UserConstraints,
};
use crate::error::{Error, Result};
use crate::model::LvqModel;
use crate::program::{
    LinearRow, ProgramSpec, QuadRow, SolveOutcome, SolveStatus, SolverTolerances,
};
use crate::regularizer::{ObjectiveSpec, Regularizer};
use crate::solver;

/// Penalty schedule and stopping rules for the Improve step.
#[derive(Clone, Copy, Debug)]
pub struct CcpConfig {
    pub tau0: f64,
    pub mu: f64,
    pub tau_max: f64,
    pub max_outer: usize,
    pub slack_tol: f64,
    pub obj_tol: f64,
}

impl Default for CcpConfig {
    fn default() -> Self {
        CcpConfig {
            tau0: 1.0,
            mu: 2.0,
            tau_max: 1e6,
            max_outer: 50,
            slack_tol: 1e-6,
            obj_tol: 1e-6,
        }
    }
}

impl CcpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0) || !(self.mu > 1.0) || self.tau_max < self.tau0 {
            return Err(Error::input(
                "penalty schedule requires tau0 > 0, mu > 1 and tau_max >= tau0",
            ));
        }
        if self.max_outer == 0 {
            return Err(Error::input("max_outer must be at least 1"));
        }
        Ok(())
    }
}

/// The difference-of-convex program for one target prototype.
#[derive(Clone, Debug)]
pub struct DcpProblem {
    pub dim: usize,
    pub objective: ObjectiveSpec,
    pub regularizer: Regularizer,
    pub origin: DVector<f64>,
    /// `lambda_i` of the target prototype (convex part of every row).
    pub lambda_target: DMatrix<f64>,
    /// One feasibility row per rival prototype.
    pub constraints: Vec<QuadraticConstraint>,
    /// `lambda_j` per row (the concave part that gets linearized).
    pub lambda_rivals: Vec<DMatrix<f64>>,
    pub user: UserConstraints,
}

impl DcpProblem {
    pub fn build(
        model: &LvqModel,
        target: usize,
        regularizer: &Regularizer,
        epsilon: f64,
        user: &UserConstraints,
    ) -> Result<Self> {
        let constraints = crate::constraints::quadratic_constraints(model, target, epsilon)?;
        let lambda_rivals = constraints
            .iter()
            .map(|c| model.lambda_dense(c.rival))
            .collect();
        Ok(DcpProblem {
            dim: model.dim(),
            objective: crate::regularizer::build_objective(
                regularizer,
                &DVector::zeros(model.dim()),
            ),
            regularizer: regularizer.clone(),
            origin: DVector::zeros(model.dim()),
            lambda_target: model.lambda_dense(target),
            constraints,
            lambda_rivals,
            user: user.clone(),
        })
    }

    pub fn with_origin(mut self, x: &DVector<f64>) -> Self {
        self.origin = x.clone();
        self.objective = crate::regularizer::build_objective(&self.regularizer, x);
        self
    }

    /// True exact-penalty value `theta + tau * sum(max(0, row lhs))`.
    fn penalized(&self, x: &DVector<f64>, tau: f64) -> f64 {
        let theta = self.regularizer.evaluate(x, &self.origin).unwrap_or(f64::NAN);
        let viol: f64 = self
            .constraints
            .iter()
            .map(|c| c.lhs(x).max(0.0))
            .sum();
        theta + tau * viol
    }
}

/// Per-outer-iteration trace, kept for diagnostics and invariant checks.
#[derive(Clone, Debug)]
pub struct CcpIteration {
    pub tau: f64,
    /// Exact-penalty value of the incoming iterate at this tau.
    pub penalized_before: f64,
    /// Exact-penalty value of the subproblem solution at this tau.
    pub penalized_after: f64,
    pub slack_sum: f64,
    pub objective: f64,
    /// `max_k (ghat_k - g_k)` at the new iterate; the minorant property
    /// keeps this nonpositive up to rounding.
    pub minorant_excess: f64,
}

#[derive(Clone, Debug)]
pub struct CcpOutcome {
    pub outcome: SolveOutcome,
    pub trace: Vec<CcpIteration>,
}

/// Suggest step: the target prototype itself.
pub fn suggest(model: &LvqModel, target: usize) -> Result<DVector<f64>> {
    if target >= model.prototypes().len() {
        return Err(Error::input(format!(
            "target prototype {target} out of range"
        )));
    }
    Ok(model.prototypes()[target].w.clone())
}

struct SubproblemLayout {
    dim: usize,
    aux: usize,
    relaxed: Vec<usize>,
    hard: Vec<usize>,
    n_vars: usize,
}

/// Improve step: penalty convex-concave iterations from `x0`.
pub fn improve(
    problem: &DcpProblem,
    x0: &DVector<f64>,
    cfg: &CcpConfig,
    tol: &SolverTolerances,
) -> CcpOutcome {
    if let Err(e) = cfg.validate() {
        return CcpOutcome {
            outcome: SolveOutcome::failed(SolveStatus::NumericalFailure, 0, e.to_string()),
            trace: Vec::new(),
        };
    }
    let dim = problem.dim;
    let aux = problem.objective.aux_vars();
    let mut relaxed = Vec::new();
    let mut hard = Vec::new();
    for (k, c) in problem.constraints.iter().enumerate() {
        if c.is_convex() {
            hard.push(k);
        } else {
            relaxed.push(k);
        }
    }
    let layout = SubproblemLayout {
        dim,
        aux,
        n_vars: dim + aux + relaxed.len(),
        relaxed,
        hard,
    };

    // Subproblems are solved tighter than the outer tolerances so that the
    // measured penalized-objective decrease is not swamped by solver noise.
    let sub_tol = SolverTolerances {
        feas: tol.feas.min(1e-9),
        kkt: tol.kkt.min(1e-7),
        max_iter: tol.max_iter,
    };

    let mut x = x0.clone();
    let mut tau = cfg.tau0;
    let mut trace: Vec<CcpIteration> = Vec::new();
    let mut prev_theta = problem
        .regularizer
        .evaluate(&x, &problem.origin)
        .unwrap_or(f64::INFINITY);
    let mut iterations = 0;

    for outer in 0..cfg.max_outer {
        iterations = outer + 1;
        let minorants: Vec<_> = layout
            .relaxed
            .iter()
            .map(|&k| linearize_concave_part(&problem.lambda_rivals[k], &x))
            .collect();

        let spec = match build_subproblem(problem, &layout, &minorants, tau) {
            Ok(s) => s,
            Err(e) => {
                return CcpOutcome {
                    outcome: SolveOutcome::failed(
                        SolveStatus::NumericalFailure,
                        iterations,
                        format!("subproblem build failed at outer iteration {outer}: {e}"),
                    ),
                    trace,
                }
            }
        };

        let z0 = warm_start(problem, &layout, &minorants, &x);
        let sub = solver::solve_from(&spec, &sub_tol, Some(&z0));
        let Some(z) = sub.z.as_ref().filter(|_| sub.is_optimal()) else {
            let status = match sub.status {
                SolveStatus::Infeasible => SolveStatus::Infeasible,
                _ => SolveStatus::NumericalFailure,
            };
            return CcpOutcome {
                outcome: SolveOutcome::failed(
                    status,
                    iterations,
                    format!(
                        "subproblem {} at outer iteration {outer}",
                        sub.status
                    ),
                ),
                trace,
            };
        };

        let x_new = DVector::from(z.rows(0, dim));
        let slack_sum: f64 = (0..layout.relaxed.len())
            .map(|k| z[dim + aux + k].max(0.0))
            .sum();
        let theta = problem
            .regularizer
            .evaluate(&x_new, &problem.origin)
            .unwrap_or(f64::NAN);
        let minorant_excess = layout
            .relaxed
            .iter()
            .zip(&minorants)
            .map(|(&k, m)| {
                m.value(&x_new) - crate::math::half_quad(&problem.lambda_rivals[k], &x_new)
            })
            .fold(f64::NEG_INFINITY, f64::max);

        trace.push(CcpIteration {
            tau,
            penalized_before: problem.penalized(&x, tau),
            penalized_after: problem.penalized(&x_new, tau),
            slack_sum,
            objective: theta,
            minorant_excess: if minorant_excess.is_finite() {
                minorant_excess
            } else {
                0.0
            },
        });

        let improvement = (prev_theta - theta).abs();
        x = x_new;
        prev_theta = theta;

        // With nothing relaxed the subproblem was the original program.
        if layout.relaxed.is_empty() {
            break;
        }
        if slack_sum <= cfg.slack_tol && improvement <= cfg.obj_tol {
            break;
        }
        // Grow the penalty only while slacks persist; once they are gone
        // tau no longer influences the subproblem solution.
        if slack_sum > cfg.slack_tol {
            tau = (cfg.mu * tau).min(cfg.tau_max);
        }
    }

    // Accept only if the original (unrelaxed) rows hold at the final point.
    let worst = problem
        .constraints
        .iter()
        .map(|c| c.lhs(&x))
        .fold(f64::NEG_INFINITY, f64::max);
    let status = if worst <= cfg.slack_tol {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIterations
    };
    let theta = problem
        .regularizer
        .evaluate(&x, &problem.origin)
        .unwrap_or(f64::NAN);
    CcpOutcome {
        outcome: SolveOutcome {
            status,
            z: Some(x),
            objective_value: theta,
            iterations,
            max_violation: worst.max(0.0),
            duals: None,
            message: if status == SolveStatus::Optimal {
                None
            } else {
                Some(format!("residual feasibility violation {worst:.3e}"))
            },
        },
        trace,
    }
}

fn pad_matrix(m: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, n);
    out.view_mut((0, 0), (m.nrows(), m.ncols())).copy_from(m);
    out
}

fn pad_vector(v: &DVector<f64>, n: usize) -> DVector<f64> {
    let mut out = DVector::zeros(n);
    out.rows_mut(0, v.len()).copy_from(v);
    out
}

fn build_subproblem(
    problem: &DcpProblem,
    layout: &SubproblemLayout,
    minorants: &[crate::constraints::AffineMinorant],
    tau: f64,
) -> Result<ProgramSpec> {
    let dim = layout.dim;
    let aux = layout.aux;
    let n = layout.n_vars;

    let mut spec = match &problem.objective {
        ObjectiveSpec::Epigraph { .. } => {
            let mut c = DVector::zeros(n);
            for j in 0..aux {
                c[dim + j] = 1.0;
            }
            for k in 0..layout.relaxed.len() {
                c[dim + aux + k] = tau;
            }
            ProgramSpec::linear(n, c)
        }
        ObjectiveSpec::Quadratic { p, q } => {
            let mut q_full = pad_vector(q, n);
            for k in 0..layout.relaxed.len() {
                q_full[dim + aux + k] = tau;
            }
            ProgramSpec::quadratic(n, pad_matrix(p, n), q_full)
        }
    };

    if let ObjectiveSpec::Epigraph { alpha, origin } = &problem.objective {
        for j in 0..dim {
            let mut up = DVector::zeros(n);
            up[j] = alpha[j];
            up[dim + j] = -1.0;
            spec.ineq.push(LinearRow {
                a: up,
                b: alpha[j] * origin[j],
            });
            let mut dn = DVector::zeros(n);
            dn[j] = -alpha[j];
            dn[dim + j] = -1.0;
            spec.ineq.push(LinearRow {
                a: dn,
                b: -alpha[j] * origin[j],
            });
            spec.set_lower(dim + j, 0.0);
        }
    }

    for &k in &layout.hard {
        let c = &problem.constraints[k];
        if c.is_effectively_linear() {
            spec.ineq.push(LinearRow {
                a: pad_vector(&c.q, n),
                b: -c.r - c.epsilon,
            });
        } else {
            spec.qineq.push(QuadRow {
                p: pad_matrix(&c.q_mat, n),
                q: pad_vector(&c.q, n),
                r: c.r + c.epsilon,
            });
        }
    }

    for (slot, (&k, m)) in layout.relaxed.iter().zip(minorants).enumerate() {
        let c = &problem.constraints[k];
        let mut q_full = pad_vector(&(&c.q - &m.rho), n);
        q_full[dim + aux + slot] = -1.0;
        spec.qineq.push(QuadRow {
            p: pad_matrix(&problem.lambda_target, n),
            q: q_full,
            r: c.r + c.epsilon - m.r_tilde,
        });
        spec.set_lower(dim + aux + slot, 0.0);
    }

    apply_user_constraints(spec, &problem.user, &problem.origin)
}

fn warm_start(
    problem: &DcpProblem,
    layout: &SubproblemLayout,
    minorants: &[crate::constraints::AffineMinorant],
    x: &DVector<f64>,
) -> DVector<f64> {
    let mut z = DVector::zeros(layout.n_vars);
    z.rows_mut(0, layout.dim).copy_from(x);
    if let ObjectiveSpec::Epigraph { alpha, origin } = &problem.objective {
        for j in 0..layout.dim {
            z[layout.dim + j] = alpha[j] * (x[j] - origin[j]).abs();
        }
    }
    for (slot, (&k, m)) in layout.relaxed.iter().zip(minorants).enumerate() {
        let c = &problem.constraints[k];
        let f_minus_ghat = crate::math::half_quad(&problem.lambda_target, x)
            + c.q.dot(x)
            + c.r
            + c.epsilon
            - m.value(x);
        z[layout.dim + layout.aux + slot] = f_minus_ghat.max(0.0) + 1e-3;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Metric, Prototype};
    use crate::regularizer::Regularizer;

    fn tols() -> SolverTolerances {
        SolverTolerances::default()
    }

    /// Two prototypes on the x-axis with lambda_1 = I, lambda_2 = 4I.
    fn nonconvex_model() -> LvqModel {
        LvqModel::new(
            vec![
                Prototype::with_omega(DVector::from_vec(vec![0.0, 0.0]), 0, DMatrix::identity(2, 2)),
                Prototype::with_omega(
                    DVector::from_vec(vec![2.0, 0.0]),
                    1,
                    DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]),
                ),
            ],
            Metric::Local,
        )
        .unwrap()
    }

    #[test]
    fn suggest_returns_the_target_prototype() {
        let model = nonconvex_model();
        assert_eq!(suggest(&model, 0).unwrap(), model.prototypes()[0].w);
        assert_eq!(suggest(&model, 1).unwrap(), model.prototypes()[1].w);
        assert!(suggest(&model, 5).is_err());
    }

    #[test]
    fn suggest_point_is_feasible_for_small_margins() {
        let model = nonconvex_model();
        let x = DVector::from_vec(vec![3.0, 0.0]);
        let problem = DcpProblem::build(&model, 0, &Regularizer::Euclidean, 1e-4, &Default::default())
            .unwrap()
            .with_origin(&x);
        let p0 = suggest(&model, 0).unwrap();
        for c in &problem.constraints {
            assert!(c.lhs(&p0) < 0.0);
        }
    }

    #[test]
    fn equal_metrics_converge_in_one_iteration_to_the_convex_answer() {
        let model = LvqModel::new(
            vec![
                Prototype::with_omega(DVector::from_vec(vec![0.0, 0.0]), 0, DMatrix::identity(2, 2)),
                Prototype::with_omega(DVector::from_vec(vec![2.0, 0.0]), 1, DMatrix::identity(2, 2)),
            ],
            Metric::Local,
        )
        .unwrap();
        let x = DVector::from_vec(vec![3.0, 0.0]);
        let eps = 1e-4;
        let problem = DcpProblem::build(&model, 0, &Regularizer::Euclidean, eps, &Default::default())
            .unwrap()
            .with_origin(&x);
        let x0 = suggest(&model, 0).unwrap();
        let res = improve(&problem, &x0, &CcpConfig::default(), &tols());
        assert_eq!(res.outcome.status, SolveStatus::Optimal);
        assert_eq!(res.outcome.iterations, 1);
        // Identical metrics reduce the row to 2 x1 - 2 + eps <= 0.
        let z = res.outcome.z.unwrap();
        assert!((z[0] - (1.0 - eps / 2.0)).abs() < 1e-6, "{z:?}");
        assert!(z[1].abs() < 1e-6);
    }

    #[test]
    fn nonconvex_instance_lands_in_a_good_basin() {
        // Feasible set on the axis is x1 <~ 4/3 or x1 >~ 4; the optimum is
        // near (4, 0) at Euclidean cost 1, the other basin costs (5/3)^2.
        let model = nonconvex_model();
        let x = DVector::from_vec(vec![3.0, 0.0]);
        let problem = DcpProblem::build(&model, 0, &Regularizer::Euclidean, 1e-4, &Default::default())
            .unwrap()
            .with_origin(&x);
        let x0 = suggest(&model, 0).unwrap();
        let res = improve(&problem, &x0, &CcpConfig::default(), &tols());
        assert_eq!(res.outcome.status, SolveStatus::Optimal);
        let z = res.outcome.z.unwrap();
        assert_eq!(model.predict(&z).unwrap(), 0, "counterfactual must be valid");
        let dist = (&z - &x).norm();
        assert!(
            dist <= 5.0 / 3.0 + 1e-3,
            "distance {dist} outside both admissible basins"
        );
    }

    #[test]
    fn penalized_objective_is_monotone_and_minorants_hold() {
        let model = nonconvex_model();
        let x = DVector::from_vec(vec![3.0, 0.5]);
        let problem = DcpProblem::build(&model, 0, &Regularizer::Euclidean, 1e-4, &Default::default())
            .unwrap()
            .with_origin(&x);
        let x0 = suggest(&model, 0).unwrap();
        let res = improve(&problem, &x0, &CcpConfig::default(), &tols());
        assert!(res.outcome.is_optimal());
        assert!(!res.trace.is_empty());
        for step in &res.trace {
            assert!(
                step.penalized_after <= step.penalized_before + 1e-9,
                "penalized objective increased: {step:?}"
            );
            assert!(step.minorant_excess <= 1e-9, "{step:?}");
        }
    }

    #[test]
    fn infeasible_user_box_reports_non_convergence() {
        let model = nonconvex_model();
        let x = DVector::from_vec(vec![3.0, 0.0]);
        // Box keeps x' pinned in a region classified as label 1.
        let uc = UserConstraints {
            bounds: Some(crate::constraints::BoxConstraint {
                lower: Some(vec![1.9, -0.1]),
                upper: Some(vec![2.1, 0.1]),
            }),
            ..Default::default()
        };
        let problem = DcpProblem::build(&model, 0, &Regularizer::Euclidean, 1e-4, &uc)
            .unwrap()
            .with_origin(&x);
        let x0 = suggest(&model, 0).unwrap();
        let res = improve(&problem, &x0, &CcpConfig::default(), &tols());
        assert_ne!(res.outcome.status, SolveStatus::Optimal);
        if res.outcome.status == SolveStatus::MaxIterations {
            let last = res.trace.last().unwrap();
            assert!(last.slack_sum > 0.0, "slacks should stay active: {last:?}");
        }
    }

    #[test]
    fn convex_rows_match_the_direct_solution() {
        // lambda_1 = 4I, lambda_2 = I makes Q = 3I psd: the program is
        // convex and one subproblem solves it exactly.
        let model = LvqModel::new(
            vec![
                Prototype::with_omega(
                    DVector::from_vec(vec![0.0, 0.0]),
                    0,
                    DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]),
                ),
                Prototype::with_omega(DVector::from_vec(vec![2.0, 0.0]), 1, DMatrix::identity(2, 2)),
            ],
            Metric::Local,
        )
        .unwrap();
        let x = DVector::from_vec(vec![3.0, 0.0]);
        let eps = 1e-4;
        let problem = DcpProblem::build(&model, 0, &Regularizer::Euclidean, eps, &Default::default())
            .unwrap()
            .with_origin(&x);
        let x0 = suggest(&model, 0).unwrap();
        let res = improve(&problem, &x0, &CcpConfig::default(), &tols());
        assert!(res.outcome.is_optimal());
        assert_eq!(res.outcome.iterations, 1);

        // Direct convex QCQP through the generic solver.
        let c = &problem.constraints[0];
        let mut direct = ProgramSpec::quadratic(2, DMatrix::identity(2, 2), -x.clone());
        direct.qineq.push(QuadRow {
            p: c.q_mat.clone(),
            q: c.q.clone(),
            r: c.r + eps,
        });
        let direct_out = crate::solver::solve(&direct, &tols());
        assert!(direct_out.is_optimal());
        let z_ccp = res.outcome.z.unwrap();
        let theta_direct = (&DVector::from(direct_out.z.unwrap()) - &x).norm_squared();
        let theta_ccp = (&z_ccp - &x).norm_squared();
        assert!((theta_ccp - theta_direct).abs() < 1e-5);
    }
}
