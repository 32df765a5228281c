//! Orchestration: one optimization problem per candidate prototype, keep
//! the cheapest valid counterfactual.
//!
//! Every prototype carrying the requested label is tried. Identity/global
//! metrics yield an LP (manhattan penalty) or convex QP (quadratic
//! penalties); local metrics go through the convex-concave solver. The
//! winner is the solution with the smallest penalty value; a request where
//! every target fails produces a first-class no-solution result rather
//! than an error, with per-target statuses preserved for diagnosis.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde_json::json;

use crate::ccp::{self, CcpConfig, CcpIteration, DcpProblem};
use crate::constraints::{
    apply_user_constraints, linear_constraints, LinearConstraint, UserConstraints,
};
use crate::error::{Error, Result};
use crate::model::{LvqModel, Metric};
use crate::program::{LinearRow, ProgramSpec, SolveStatus, SolverTolerances};
use crate::regularizer::{build_objective, ObjectiveSpec, Regularizer};
use crate::solver;

/// Two penalty values within this distance count as a tie, resolved toward
/// the lower prototype index.
const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CfRequest {
    pub x: DVector<f64>,
    pub y_target: i64,
    pub regularizer: Regularizer,
    pub epsilon: f64,
    pub user_constraints: UserConstraints,
    pub parallel: bool,
}

impl CfRequest {
    pub fn new(x: DVector<f64>, y_target: i64, regularizer: Regularizer) -> Self {
        CfRequest {
            x,
            y_target,
            regularizer,
            epsilon: 1e-4,
            user_constraints: UserConstraints::default(),
            parallel: false,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_constraints(mut self, uc: UserConstraints) -> Self {
        self.user_constraints = uc;
        self
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }
}

/// Per-target solve diagnostics.
#[derive(Clone, Debug)]
pub struct TargetReport {
    pub index: usize,
    pub status: String,
    pub distance: Option<f64>,
    pub wall_time_ms: f64,
    /// Outer-iteration trace when the target went through the
    /// convex-concave path; not part of the serialized result.
    pub ccp_trace: Option<Vec<CcpIteration>>,
}

#[derive(Clone, Debug)]
pub struct CfSolution {
    pub x_cf: DVector<f64>,
    pub distance: f64,
    pub target_prototype: usize,
}

#[derive(Clone, Debug)]
pub struct CfResult {
    pub solution: Option<CfSolution>,
    pub per_target: Vec<TargetReport>,
    pub total_wall_time_ms: f64,
}

impl CfResult {
    pub fn is_no_solution(&self) -> bool {
        self.solution.is_none()
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "x_cf": self.solution.as_ref().map(|s| s.x_cf.as_slice().to_vec()),
            "distance": self.solution.as_ref().map(|s| s.distance),
            "target_prototype": self.solution.as_ref().map(|s| s.target_prototype),
            "per_target": self.per_target.iter().map(|t| json!({
                "index": t.index,
                "status": t.status,
                "distance": t.distance,
                "wall_time_ms": t.wall_time_ms,
            })).collect::<Vec<_>>(),
            "total_wall_time_ms": self.total_wall_time_ms,
        })
    }
}

fn validate_request(model: &LvqModel, req: &CfRequest) -> Result<()> {
    if req.x.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: req.x.len(),
        });
    }
    if !crate::math::all_finite(req.x.as_slice()) {
        return Err(Error::input("input vector contains a non-finite entry"));
    }
    if !(req.epsilon > 0.0) || !req.epsilon.is_finite() {
        return Err(Error::input("epsilon must be a positive finite number"));
    }
    if !model.labels().contains(&req.y_target) {
        return Err(Error::input(format!(
            "no prototype carries the requested label {}",
            req.y_target
        )));
    }
    req.regularizer.validate(model.dim())?;
    req.user_constraints.validate(model.dim())?;
    Ok(())
}

/// Compute the minimum-deviation counterfactual for `req`.
pub fn explain(model: &LvqModel, req: &CfRequest) -> Result<CfResult> {
    explain_ordered(model, req, model.targets_for(req.y_target))
}

/// Identical result to [`explain`]; targets are merely *processed* in order
/// of increasing distance from the input, which front-loads the most
/// promising programs in the timing log. No target is ever pruned: with a
/// weighted penalty a farther prototype can still win.
pub fn explain_with_nearest_fallback(model: &LvqModel, req: &CfRequest) -> Result<CfResult> {
    validate_request(model, req)?;
    let mut targets = model.targets_for(req.y_target);
    targets.sort_by(|&a, &b| {
        let da = model.distance(&req.x, a).unwrap_or(f64::INFINITY);
        let db = model.distance(&req.x, b).unwrap_or(f64::INFINITY);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    explain_ordered(model, req, targets)
}

fn explain_ordered(model: &LvqModel, req: &CfRequest, targets: Vec<usize>) -> Result<CfResult> {
    validate_request(model, req)?;
    let start = Instant::now();
    let objective = build_objective(&req.regularizer, &req.x);

    let outcomes: Vec<TargetOutcome> = if req.parallel {
        targets
            .par_iter()
            .map(|&i| solve_target(model, req, &objective, i))
            .collect()
    } else {
        targets
            .iter()
            .map(|&i| solve_target(model, req, &objective, i))
            .collect()
    };

    // Reduce over ascending prototype index so the tie rule and the
    // processing order cannot interact.
    let mut by_index: Vec<&TargetOutcome> = outcomes.iter().collect();
    by_index.sort_by_key(|o| o.report.index);
    let mut winner: Option<(usize, f64)> = None;
    for o in &by_index {
        if let Some(theta) = o.theta {
            match winner {
                None => winner = Some((o.report.index, theta)),
                Some((_, best)) if theta < best - TIE_TOL => {
                    winner = Some((o.report.index, theta))
                }
                _ => {}
            }
        }
    }

    let solution = winner.map(|(index, theta)| {
        let x_cf = outcomes
            .iter()
            .find(|o| o.report.index == index)
            .and_then(|o| o.x_cf.clone())
            .expect("winning target carries a point");
        CfSolution {
            x_cf,
            distance: theta,
            target_prototype: index,
        }
    });

    Ok(CfResult {
        solution,
        per_target: outcomes.into_iter().map(|o| o.report).collect(),
        total_wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

struct TargetOutcome {
    report: TargetReport,
    x_cf: Option<DVector<f64>>,
    theta: Option<f64>,
}

impl TargetOutcome {
    fn failed(index: usize, status: String, wall_time_ms: f64) -> Self {
        TargetOutcome {
            report: TargetReport {
                index,
                status,
                distance: None,
                wall_time_ms,
                ccp_trace: None,
            },
            x_cf: None,
            theta: None,
        }
    }
}

fn solve_target(
    model: &LvqModel,
    req: &CfRequest,
    objective: &ObjectiveSpec,
    target: usize,
) -> TargetOutcome {
    let t0 = Instant::now();
    let ms = |t: Instant| t.elapsed().as_secs_f64() * 1e3;

    // The input itself may already sit strictly inside the target's
    // feasibility cone; then it is the exact optimum of this program.
    if input_is_feasible(model, req, target) {
        return TargetOutcome {
            report: TargetReport {
                index: target,
                status: SolveStatus::Optimal.to_string(),
                distance: Some(0.0),
                wall_time_ms: ms(t0),
                ccp_trace: None,
            },
            x_cf: Some(req.x.clone()),
            theta: Some(0.0),
        };
    }

    match model.metric() {
        Metric::Identity | Metric::Global(_) => {
            let rows = match linear_constraints(model, target, req.epsilon) {
                Ok(rows) => rows,
                Err(e) => return TargetOutcome::failed(target, format!("error: {e}"), ms(t0)),
            };
            if rows.iter().any(LinearConstraint::is_degenerate) {
                return TargetOutcome::failed(
                    target,
                    SolveStatus::Infeasible.to_string(),
                    ms(t0),
                );
            }
            let spec = match convex_program(objective, &rows, req) {
                Ok(spec) => spec,
                Err(e) => return TargetOutcome::failed(target, format!("error: {e}"), ms(t0)),
            };
            let z0 = warm_start(objective, &req.x, spec.n);
            let out = solver::solve_from(&spec, &SolverTolerances::default(), Some(&z0));
            finish_target(model, req, target, out.status, out.z, None, ms(t0))
        }
        Metric::Local => {
            let problem = match DcpProblem::build(
                model,
                target,
                &req.regularizer,
                req.epsilon,
                &req.user_constraints,
            ) {
                Ok(p) => p.with_origin(&req.x),
                Err(e) => return TargetOutcome::failed(target, format!("error: {e}"), ms(t0)),
            };
            if problem.constraints.iter().any(|c| c.is_degenerate()) {
                return TargetOutcome::failed(
                    target,
                    SolveStatus::Infeasible.to_string(),
                    ms(t0),
                );
            }
            let x0 = match ccp::suggest(model, target) {
                Ok(x0) => x0,
                Err(e) => return TargetOutcome::failed(target, format!("error: {e}"), ms(t0)),
            };
            let res = ccp::improve(&problem, &x0, &CcpConfig::default(), &SolverTolerances::default());
            finish_target(
                model,
                req,
                target,
                res.outcome.status,
                res.outcome.z,
                Some(res.trace),
                ms(t0),
            )
        }
    }
}

fn finish_target(
    model: &LvqModel,
    req: &CfRequest,
    target: usize,
    status: SolveStatus,
    z: Option<DVector<f64>>,
    ccp_trace: Option<Vec<CcpIteration>>,
    wall_time_ms: f64,
) -> TargetOutcome {
    if status != SolveStatus::Optimal {
        let mut out = TargetOutcome::failed(target, status.to_string(), wall_time_ms);
        out.report.ccp_trace = ccp_trace;
        return out;
    }
    let Some(z) = z else {
        return TargetOutcome::failed(
            target,
            SolveStatus::NumericalFailure.to_string(),
            wall_time_ms,
        );
    };
    let mut x_cf = DVector::from(z.rows(0, model.dim()));
    // Frozen features are pinned by equality rows; make them bit-exact.
    for &j in &req.user_constraints.frozen {
        x_cf[j] = req.x[j];
    }
    // Validity is decided by the model itself, never by the solver's view
    // of the constraints.
    if model.predict(&x_cf).ok() != Some(req.y_target) {
        let mut out = TargetOutcome::failed(
            target,
            SolveStatus::NumericalFailure.to_string(),
            wall_time_ms,
        );
        out.report.ccp_trace = ccp_trace;
        return out;
    }
    let theta = match req.regularizer.evaluate(&x_cf, &req.x) {
        Ok(t) => t,
        Err(e) => {
            return TargetOutcome::failed(target, format!("error: {e}"), wall_time_ms);
        }
    };
    TargetOutcome {
        report: TargetReport {
            index: target,
            status: SolveStatus::Optimal.to_string(),
            distance: Some(theta),
            wall_time_ms,
            ccp_trace,
        },
        x_cf: Some(x_cf),
        theta: Some(theta),
    }
}

/// Strict feasibility of the request input for one target: every
/// nearest-prototype row holds and the user constraints accept the point.
fn input_is_feasible(model: &LvqModel, req: &CfRequest, target: usize) -> bool {
    let d_target = match model.distance(&req.x, target) {
        Ok(d) => d,
        Err(_) => return false,
    };
    let label = model.prototypes()[target].label;
    for j in model.rivals_for(label) {
        let d_j = model.distance(&req.x, j).unwrap_or(f64::NEG_INFINITY);
        // Margin convention of the constraint rows: 2*eps in squared
        // distance units.
        if d_target + 2.0 * req.epsilon > d_j {
            return false;
        }
    }
    req.user_constraints.satisfied_at(&req.x, 0.0)
}

/// Assemble the convex program for one target under an identity or global
/// metric: feature variables first, then any epigraph auxiliaries.
fn convex_program(
    objective: &ObjectiveSpec,
    rows: &[LinearConstraint],
    req: &CfRequest,
) -> Result<ProgramSpec> {
    let dim = req.x.len();
    let aux = objective.aux_vars();
    let n = dim + aux;
    let mut spec = match objective {
        ObjectiveSpec::Epigraph { alpha, origin } => {
            let mut c = DVector::zeros(n);
            for j in 0..aux {
                c[dim + j] = 1.0;
            }
            let mut spec = ProgramSpec::linear(n, c);
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
            spec
        }
        ObjectiveSpec::Quadratic { p, q } => ProgramSpec::quadratic(n, p.clone(), q.clone()),
    };
    for row in rows {
        let mut a = DVector::zeros(n);
        a.rows_mut(0, dim).copy_from(&row.q);
        spec.ineq.push(LinearRow {
            a,
            b: -row.r - row.epsilon,
        });
    }
    apply_user_constraints(spec, &req.user_constraints, &req.x)
}

fn warm_start(objective: &ObjectiveSpec, x: &DVector<f64>, n: usize) -> DVector<f64> {
    let mut z = DVector::zeros(n);
    z.rows_mut(0, x.len()).copy_from(x);
    // Epigraph auxiliaries start at zero, matching x' = x.
    let _ = objective;
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Prototype;
    use nalgebra::DMatrix;

    fn two_proto_model() -> LvqModel {
        LvqModel::new(
            vec![
                Prototype::new(DVector::from_vec(vec![0.0, 0.0]), 0),
                Prototype::new(DVector::from_vec(vec![2.0, 0.0]), 1),
            ],
            Metric::Identity,
        )
        .unwrap()
    }

    #[test]
    fn manhattan_counterfactual_hits_the_closed_form() {
        let model = two_proto_model();
        let eps = 1e-4;
        let req = CfRequest::new(
            DVector::from_vec(vec![3.0, 0.0]),
            0,
            Regularizer::manhattan(vec![1.0, 1.0]),
        )
        .with_epsilon(eps);
        let res = explain(&model, &req).unwrap();
        let sol = res.solution.expect("solution");
        // Single active row 2 x1' - 2 + eps <= 0.
        assert!((sol.x_cf[0] - (1.0 - eps / 2.0)).abs() < 1e-6, "{:?}", sol.x_cf);
        assert!(sol.x_cf[1].abs() < 1e-6);
        assert!((sol.distance - (2.0 + eps / 2.0)).abs() < 1e-6);
        assert_eq!(sol.target_prototype, 0);
        assert_eq!(model.predict(&sol.x_cf).unwrap(), 0);
    }

    #[test]
    fn already_requested_label_returns_the_input_exactly() {
        let model = two_proto_model();
        let x = DVector::from_vec(vec![-1.0, 0.5]);
        let req = CfRequest::new(x.clone(), 0, Regularizer::manhattan(vec![1.0, 1.0]));
        let res = explain(&model, &req).unwrap();
        let sol = res.solution.unwrap();
        assert_eq!(sol.x_cf, x);
        assert_eq!(sol.distance, 0.0);
    }

    #[test]
    fn engine_picks_the_cheapest_target() {
        // Three label-0 targets; the one at (0.5, 0) admits the cheapest
        // counterfactual from (3, 0) against the rival at (2, 0).
        let model = LvqModel::new(
            vec![
                Prototype::new(DVector::from_vec(vec![0.0, 0.0]), 0),
                Prototype::new(DVector::from_vec(vec![5.0, 5.0]), 0),
                Prototype::new(DVector::from_vec(vec![0.5, 0.0]), 0),
                Prototype::new(DVector::from_vec(vec![2.0, 0.0]), 1),
            ],
            Metric::Identity,
        )
        .unwrap();
        let req = CfRequest::new(
            DVector::from_vec(vec![3.0, 0.0]),
            0,
            Regularizer::manhattan(vec![1.0, 1.0]),
        );
        let res = explain(&model, &req).unwrap();
        let sol = res.solution.unwrap();
        assert_eq!(sol.target_prototype, 2);
        // Boundary between (0.5,0) and (2,0) is x1 = 1.25.
        assert!((sol.distance - 1.75).abs() < 1e-3, "{}", sol.distance);
        assert_eq!(res.per_target.len(), 3);
    }

    #[test]
    fn all_targets_blocked_is_a_result_not_an_error() {
        let model = two_proto_model();
        let req = CfRequest::new(
            DVector::from_vec(vec![3.0, 0.0]),
            0,
            Regularizer::manhattan(vec![1.0, 1.0]),
        )
        .with_constraints(UserConstraints {
            frozen: vec![0, 1],
            ..Default::default()
        });
        let res = explain(&model, &req).unwrap();
        assert!(res.is_no_solution());
        assert_eq!(res.per_target.len(), 1);
        assert_eq!(res.per_target[0].status, "infeasible");
    }

    #[test]
    fn unknown_label_is_rejected() {
        let model = two_proto_model();
        let req = CfRequest::new(
            DVector::from_vec(vec![3.0, 0.0]),
            7,
            Regularizer::Euclidean,
        );
        assert!(explain(&model, &req).is_err());
    }

    #[test]
    fn fallback_ordering_matches_plain_explain() {
        let model = LvqModel::new(
            vec![
                Prototype::new(DVector::from_vec(vec![0.0, 0.0]), 0),
                Prototype::new(DVector::from_vec(vec![4.0, 1.0]), 0),
                Prototype::new(DVector::from_vec(vec![2.0, 0.0]), 1),
            ],
            Metric::Identity,
        )
        .unwrap();
        let req = CfRequest::new(
            DVector::from_vec(vec![3.0, 0.2]),
            0,
            Regularizer::Euclidean,
        );
        let plain = explain(&model, &req).unwrap();
        let ordered = explain_with_nearest_fallback(&model, &req).unwrap();
        let a = plain.solution.unwrap();
        let b = ordered.solution.unwrap();
        assert_eq!(a.target_prototype, b.target_prototype);
        assert!((&a.x_cf - &b.x_cf).norm() < 1e-9);

        // Processing order is by distance from x: prototype 1 (d=1.64)
        // before prototype 0 (d=9.04).
        let order: Vec<usize> = ordered.per_target.iter().map(|t| t.index).collect();
        assert_eq!(order, vec![1, 0]);
    }

    #[test]
    fn parallel_and_serial_agree() {
        let model = LvqModel::new(
            vec![
                Prototype::new(DVector::from_vec(vec![0.0, 0.0]), 0),
                Prototype::new(DVector::from_vec(vec![-1.0, 2.0]), 0),
                Prototype::new(DVector::from_vec(vec![2.0, 0.0]), 1),
                Prototype::new(DVector::from_vec(vec![2.0, 2.0]), 1),
            ],
            Metric::Identity,
        )
        .unwrap();
        let base = CfRequest::new(
            DVector::from_vec(vec![3.0, 1.0]),
            0,
            Regularizer::manhattan(vec![1.0, 2.0]),
        );
        let serial = explain(&model, &base).unwrap();
        let parallel = explain(&model, &base.clone().with_parallel(true)).unwrap();
        let a = serial.solution.unwrap();
        let b = parallel.solution.unwrap();
        assert_eq!(a.target_prototype, b.target_prototype);
        assert!((a.distance - b.distance).abs() <= 1e-12);
        assert_eq!(a.x_cf, b.x_cf);
    }

    #[test]
    fn deterministic_across_runs() {
        let model = two_proto_model();
        let req = CfRequest::new(
            DVector::from_vec(vec![3.0, -0.7]),
            0,
            Regularizer::Euclidean,
        );
        let a = explain(&model, &req).unwrap();
        let b = explain(&model, &req).unwrap();
        assert_eq!(a.solution.as_ref().unwrap().x_cf, b.solution.as_ref().unwrap().x_cf);
        assert_eq!(
            a.solution.as_ref().unwrap().distance,
            b.solution.as_ref().unwrap().distance
        );
    }

    #[test]
    fn frozen_features_are_bitwise_preserved() {
        let model = two_proto_model();
        let x = DVector::from_vec(vec![3.0, 0.1234567890123456]);
        let req = CfRequest::new(x.clone(), 0, Regularizer::Euclidean).with_constraints(
            UserConstraints {
                frozen: vec![1],
                ..Default::default()
            },
        );
        let res = explain(&model, &req).unwrap();
        let sol = res.solution.unwrap();
        assert_eq!(sol.x_cf[1].to_bits(), x[1].to_bits());
        assert_eq!(model.predict(&sol.x_cf).unwrap(), 0);
    }

    #[test]
    fn local_metric_requests_route_through_ccp() {
        let model = LvqModel::new(
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
        .unwrap();
        let x = DVector::from_vec(vec![3.0, 0.0]);
        let req = CfRequest::new(x.clone(), 0, Regularizer::Euclidean);
        let res = explain(&model, &req).unwrap();
        let sol = res.solution.unwrap();
        assert_eq!(model.predict(&sol.x_cf).unwrap(), 0);
        assert!((&sol.x_cf - &x).norm() <= 5.0 / 3.0 + 1e-3);
        assert!(res.per_target[0].ccp_trace.is_some());
    }

    #[test]
    fn result_serializes_to_the_wire_shape() {
        let model = two_proto_model();
        let req = CfRequest::new(
            DVector::from_vec(vec![3.0, 0.0]),
            0,
            Regularizer::manhattan(vec![1.0, 1.0]),
        );
        let res = explain(&model, &req).unwrap();
        let v = res.to_json();
        assert!(v["x_cf"].is_array());
        assert!(v["distance"].is_number());
        assert!(v["target_prototype"].is_number());
        assert!(v["per_target"][0]["status"].is_string());
        assert!(v["per_target"][0]["wall_time_ms"].is_number());
        assert!(v["total_wall_time_ms"].is_number());
    }
}
