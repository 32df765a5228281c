//! Nearest-prototype feasibility constraints.
//!
//! For a counterfactual that should be classified as the label of target
//! prototype `p_i`, every prototype `p_j` with a different label contributes
//! one constraint `d(x', p_i) + margin <= d(x', p_j)`. Expanding the squared
//! distances and dividing by two gives the stored form
//!
//! ```text
//!   1/2 x' Q x' + q'x' + r + eps <= 0
//!   Q = lambda_i - lambda_j
//!   q = lambda_j p_j - lambda_i p_i
//!   r = 1/2 (p_i' lambda_i p_i - p_j' lambda_j p_j)
//! ```
//!
//! With a shared metric `Q` vanishes and the rows are linear. Because the
//! division by two happens before `eps` is added, the enforced margin in
//! squared-distance units is `2 eps`; [`QuadraticConstraint::distance_margin`]
//! evaluates the constraint back in those units.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math;
use crate::model::{LvqModel, Metric};
use crate::program::{LinearRow, ProgramSpec};
use serde::{Deserialize, Serialize};

/// Linear feasibility row `q'x' + r + eps <= 0` for one rival prototype.
#[derive(Clone, Debug)]
pub struct LinearConstraint {
    pub q: DVector<f64>,
    pub r: f64,
    pub epsilon: f64,
    /// Index of the rival prototype this row fences off.
    pub rival: usize,
}

impl LinearConstraint {
    /// Left-hand side of the row; feasible iff `<= 0`.
    pub fn lhs(&self, x: &DVector<f64>) -> f64 {
        self.q.dot(x) + self.r + self.epsilon
    }

    /// Constraint value in squared-distance units:
    /// `d(x, p_i) + eps - d(x, p_j)`.
    pub fn distance_margin(&self, x: &DVector<f64>) -> f64 {
        2.0 * (self.q.dot(x) + self.r) + self.epsilon
    }

    /// True when the target and rival prototype coincide, which makes the
    /// row `eps <= 0`: unsatisfiable for any positive margin.
    pub fn is_degenerate(&self) -> bool {
        self.q.iter().all(|&v| v == 0.0) && self.r == 0.0
    }
}

/// Quadratic feasibility row `1/2 x'Qx + q'x + r + eps <= 0`.
#[derive(Clone, Debug)]
pub struct QuadraticConstraint {
    pub q_mat: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: f64,
    pub epsilon: f64,
    pub rival: usize,
}

impl QuadraticConstraint {
    pub fn lhs(&self, x: &DVector<f64>) -> f64 {
        math::half_quad(&self.q_mat, x) + self.q.dot(x) + self.r + self.epsilon
    }

    pub fn distance_margin(&self, x: &DVector<f64>) -> f64 {
        2.0 * (math::half_quad(&self.q_mat, x) + self.q.dot(x) + self.r) + self.epsilon
    }

    /// Whether the row is already convex (difference matrix psd), in which
    /// case no concave part needs relaxing.
    pub fn is_convex(&self) -> bool {
        math::is_psd(&self.q_mat, 1e-10)
    }

    /// `Q ~ 0`: the row degrades to the linear case.
    pub fn is_effectively_linear(&self) -> bool {
        let scale = self.q_mat.amax().max(1.0);
        self.q_mat.amax() <= 1e-12 * scale || self.q_mat.amax() <= 1e-14
    }

    pub fn is_degenerate(&self) -> bool {
        self.q_mat.amax() == 0.0 && self.q.iter().all(|&v| v == 0.0) && self.r == 0.0
    }
}

fn check_target(model: &LvqModel, target: usize, epsilon: f64) -> Result<()> {
    if target >= model.prototypes().len() {
        return Err(Error::input(format!(
            "target prototype {target} out of range (model has {})",
            model.prototypes().len()
        )));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::input("epsilon must be a positive finite number"));
    }
    Ok(())
}

/// Rows for identity/global metrics: one linear constraint per rival.
pub fn linear_constraints(
    model: &LvqModel,
    target: usize,
    epsilon: f64,
) -> Result<Vec<LinearConstraint>> {
    check_target(model, target, epsilon)?;
    if matches!(model.metric(), Metric::Local) {
        return Err(Error::ContractViolation(
            "linear_constraints called on a local-metric model".to_string(),
        ));
    }
    let p_i = &model.prototypes()[target].w;
    let lambda = model.lambda(target);
    let mut rows = Vec::new();
    for j in model.rivals_for(model.prototypes()[target].label) {
        let p_j = &model.prototypes()[j].w;
        let (q, r) = match lambda {
            None => (
                p_j - p_i,
                0.5 * (p_i.norm_squared() - p_j.norm_squared()),
            ),
            Some(l) => (
                l * (p_j - p_i),
                0.5 * ((l * p_i).dot(p_i) - (l * p_j).dot(p_j)),
            ),
        };
        rows.push(LinearConstraint {
            q,
            r,
            epsilon,
            rival: j,
        });
    }
    Ok(rows)
}

/// Rows for local metrics: one quadratic constraint per rival. The
/// difference matrix `Q` is symmetric but in general indefinite.
pub fn quadratic_constraints(
    model: &LvqModel,
    target: usize,
    epsilon: f64,
) -> Result<Vec<QuadraticConstraint>> {
    check_target(model, target, epsilon)?;
    if !matches!(model.metric(), Metric::Local) {
        return Err(Error::ContractViolation(
            "quadratic_constraints requires a local-metric model".to_string(),
        ));
    }
    let p_i = &model.prototypes()[target].w;
    let lambda_i = model.lambda_dense(target);
    let mut rows = Vec::new();
    for j in model.rivals_for(model.prototypes()[target].label) {
        let p_j = &model.prototypes()[j].w;
        let lambda_j = model.lambda_dense(j);
        rows.push(QuadraticConstraint {
            q_mat: &lambda_i - &lambda_j,
            q: &lambda_j * p_j - &lambda_i * p_i,
            r: 0.5 * ((&lambda_i * p_i).dot(p_i) - (&lambda_j * p_j).dot(p_j)),
            epsilon,
            rival: j,
        });
    }
    Ok(rows)
}

/// Affine minorant of the convex part `g(x) = 1/2 x' lambda x` at `x_k`:
/// `ghat(x) = rho'x + r_tilde` with `ghat(x_k) = g(x_k)` and `ghat <= g`
/// everywhere.
#[derive(Clone, Debug)]
pub struct AffineMinorant {
    pub rho: DVector<f64>,
    pub r_tilde: f64,
}

impl AffineMinorant {
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        self.rho.dot(x) + self.r_tilde
    }
}

pub fn linearize_concave_part(lambda_j: &DMatrix<f64>, x_k: &DVector<f64>) -> AffineMinorant {
    let rho = lambda_j * x_k;
    AffineMinorant {
        r_tilde: -0.5 * rho.dot(x_k),
        rho,
    }
}

// --- user-supplied plausibility constraints -----------------------------

/// Box bounds over the feature variables. Either side may be absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxConstraint {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
}

/// One user row `a'x' <= b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearUserRow {
    pub a: Vec<f64>,
    pub b: f64,
}

/// Side constraints callers can impose on counterfactuals: value boxes,
/// frozen (unchangeable) features, and arbitrary linear rows. Adding them
/// never changes the program class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UserConstraints {
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoxConstraint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frozen: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub linear: Vec<LinearUserRow>,
}

impl UserConstraints {
    pub fn is_empty(&self) -> bool {
        self.bounds.is_none() && self.frozen.is_empty() && self.linear.is_empty()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(format!("constraints file: {e}")))
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if let Some(b) = &self.bounds {
            for (name, side) in [("lower", &b.lower), ("upper", &b.upper)] {
                if let Some(v) = side {
                    if v.len() != dim {
                        return Err(Error::input(format!(
                            "box.{name}: expected length {dim}, got {}",
                            v.len()
                        )));
                    }
                    if !math::all_finite(v) {
                        return Err(Error::input(format!("box.{name}: non-finite entry")));
                    }
                }
            }
            if let (Some(lo), Some(up)) = (&b.lower, &b.upper) {
                for j in 0..dim {
                    if lo[j] > up[j] {
                        return Err(Error::input(format!(
                            "box: lower[{j}] = {} exceeds upper[{j}] = {}",
                            lo[j], up[j]
                        )));
                    }
                }
            }
        }
        for &j in &self.frozen {
            if j >= dim {
                return Err(Error::input(format!(
                    "frozen feature index {j} out of range for dimension {dim}"
                )));
            }
        }
        for (k, row) in self.linear.iter().enumerate() {
            if row.a.len() != dim {
                return Err(Error::input(format!(
                    "linear[{k}].a: expected length {dim}, got {}",
                    row.a.len()
                )));
            }
            if !math::all_finite(&row.a) || !row.b.is_finite() {
                return Err(Error::input(format!("linear[{k}]: non-finite entry")));
            }
        }
        Ok(())
    }

    /// Whether `x` itself satisfies every user constraint.
    pub fn satisfied_at(&self, x: &DVector<f64>, tol: f64) -> bool {
        if let Some(b) = &self.bounds {
            if let Some(lo) = &b.lower {
                if (0..x.len()).any(|j| x[j] < lo[j] - tol) {
                    return false;
                }
            }
            if let Some(up) = &b.upper {
                if (0..x.len()).any(|j| x[j] > up[j] + tol) {
                    return false;
                }
            }
        }
        for row in &self.linear {
            let v: f64 = row.a.iter().zip(x.iter()).map(|(a, x)| a * x).sum();
            if v > row.b + tol {
                return false;
            }
        }
        true
    }
}

/// Fold user constraints into a program whose first `x.len()` variables are
/// the feature variables: frozen features become equalities pinned at the
/// original value, boxes become bounds, linear rows are appended (padded
/// with zeros over any auxiliary variables). The program class is
/// unchanged.
pub fn apply_user_constraints(
    mut spec: ProgramSpec,
    uc: &UserConstraints,
    x: &DVector<f64>,
) -> Result<ProgramSpec> {
    let dim = x.len();
    if dim > spec.n {
        return Err(Error::input(
            "user constraints refer to more features than the program has variables",
        ));
    }
    uc.validate(dim)?;
    if uc.is_empty() {
        return Ok(spec);
    }
    for &j in &uc.frozen {
        let mut a = DVector::zeros(spec.n);
        a[j] = 1.0;
        spec.eq.push(LinearRow { a, b: x[j] });
    }
    if let Some(b) = &uc.bounds {
        if let Some(lo) = &b.lower {
            for j in 0..dim {
                spec.set_lower(j, lo[j]);
            }
        }
        if let Some(up) = &b.upper {
            for j in 0..dim {
                spec.set_upper(j, up[j]);
            }
        }
    }
    for row in &uc.linear {
        let mut a = DVector::zeros(spec.n);
        for j in 0..dim {
            a[j] = row.a[j];
        }
        spec.ineq.push(LinearRow { a, b: row.b });
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Metric, Prototype};
    use crate::program::SolverTolerances;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_model() -> LvqModel {
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
    fn identity_case_reads_off() {
        let rows = linear_constraints(&identity_model(), 0, 1e-4).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].q, DVector::from_vec(vec![2.0, 0.0]));
        assert_eq!(rows[0].r, -2.0);
        // Feasibility row is 2 x1 - 2 + eps <= 0.
        let x = DVector::from_vec(vec![1.0 - 1e-4 / 2.0, 0.0]);
        assert!(rows[0].lhs(&x).abs() < 1e-12);
    }

    #[test]
    fn global_metric_case() {
        let omega = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
        let model = LvqModel::new(
            vec![
                Prototype::new(DVector::from_vec(vec![0.0, 0.0]), 0),
                Prototype::new(DVector::from_vec(vec![1.0, 1.0]), 1),
            ],
            Metric::Global(omega),
        )
        .unwrap();
        let rows = linear_constraints(&model, 0, 1e-4).unwrap();
        assert_eq!(rows[0].q, DVector::from_vec(vec![4.0, 1.0]));
        assert_eq!(rows[0].r, -2.5);
    }

    #[test]
    fn local_metric_on_linear_builder_is_a_contract_violation() {
        let model = LvqModel::new(
            vec![
                Prototype::with_omega(DVector::from_vec(vec![0.0]), 0, DMatrix::identity(1, 1)),
                Prototype::with_omega(DVector::from_vec(vec![1.0]), 1, DMatrix::identity(1, 1)),
            ],
            Metric::Local,
        )
        .unwrap();
        assert!(matches!(
            linear_constraints(&model, 0, 1e-4),
            Err(Error::ContractViolation(_))
        ));
    }

    fn local_model_4i() -> LvqModel {
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
    fn quadratic_case_matches_hand_substitution() {
        let rows = quadratic_constraints(&local_model_4i(), 0, 1e-4).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].q_mat, DMatrix::identity(2, 2) * -3.0);
        assert_eq!(rows[0].q, DVector::from_vec(vec![8.0, 0.0]));
        assert_eq!(rows[0].r, -8.0);
        assert!(!rows[0].is_convex(), "difference matrix -3I is indefinite");
    }

    #[test]
    fn equal_local_metrics_degrade_to_the_linear_fields() {
        let model = LvqModel::new(
            vec![
                Prototype::with_omega(DVector::from_vec(vec![0.0, 0.0]), 0, DMatrix::identity(2, 2)),
                Prototype::with_omega(DVector::from_vec(vec![2.0, 0.0]), 1, DMatrix::identity(2, 2)),
            ],
            Metric::Local,
        )
        .unwrap();
        let qrows = quadratic_constraints(&model, 0, 1e-4).unwrap();
        assert!(qrows[0].is_effectively_linear());
        assert_eq!(qrows[0].q, DVector::from_vec(vec![2.0, 0.0]));
        assert_eq!(qrows[0].r, -2.0);
    }

    #[test]
    fn minorant_touches_at_the_linearization_point() {
        let lambda = DMatrix::identity(2, 2);
        let xk = DVector::from_vec(vec![2.0, 0.0]);
        let m = linearize_concave_part(&lambda, &xk);
        assert_eq!(m.rho, DVector::from_vec(vec![2.0, 0.0]));
        assert_eq!(m.r_tilde, -2.0);
        assert_eq!(m.value(&xk), 2.0);

        let zero = DVector::zeros(2);
        let m0 = linearize_concave_part(&lambda, &zero);
        assert_eq!(m0.rho, zero);
        assert_eq!(m0.r_tilde, 0.0);
    }

    #[test]
    fn minorant_stays_below_g_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let omega = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
        let lambda = omega.transpose() * &omega;
        let xk = DVector::from_fn(3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let m = linearize_concave_part(&lambda, &xk);
        for _ in 0..1000 {
            let x = DVector::from_fn(3, |_, _| rng.random::<f64>() * 8.0 - 4.0);
            let g = math::half_quad(&lambda, &x);
            assert!(m.value(&x) <= g + 1e-9);
        }
    }

    #[test]
    fn degenerate_pair_is_flagged() {
        // Same vector with the same label is legal in a model; force the
        // degenerate row directly.
        let row = LinearConstraint {
            q: DVector::zeros(2),
            r: 0.0,
            epsilon: 1e-4,
            rival: 1,
        };
        assert!(row.is_degenerate());
        assert!(row.lhs(&DVector::zeros(2)) > 0.0);
    }

    #[test]
    fn margin_value_matches_distance_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = local_model_4i();
        let rows = quadratic_constraints(&model, 0, 1e-4).unwrap();
        for _ in 0..200 {
            let x = DVector::from_fn(2, |_, _| rng.random::<f64>() * 8.0 - 4.0);
            let direct =
                model.distance(&x, 0).unwrap() + 1e-4 - model.distance(&x, 1).unwrap();
            assert!((rows[0].distance_margin(&x) - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn feasible_rows_imply_the_requested_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for round in 0..10 {
            let dim = 2 + (round % 2);
            let protos: Vec<Prototype> = (0..4)
                .map(|i| {
                    Prototype::new(
                        DVector::from_fn(dim, |_, _| rng.random::<f64>() * 6.0 - 3.0),
                        (i % 2) as i64,
                    )
                })
                .collect();
            let model = LvqModel::new(protos, Metric::Identity).unwrap();
            for target in 0..4 {
                let label = model.prototypes()[target].label;
                let rows = linear_constraints(&model, target, 1e-4).unwrap();
                let mut hits = 0;
                for _ in 0..1000 {
                    let x = DVector::from_fn(dim, |_, _| rng.random::<f64>() * 8.0 - 4.0);
                    if rows.iter().all(|r| r.lhs(&x) <= 0.0) {
                        hits += 1;
                        assert_eq!(model.predict(&x).unwrap(), label);
                    }
                }
                // The sampled box always hits the feasible cone somewhere.
                assert!(hits > 0, "round {round} target {target} sampled no feasible points");
            }
        }
    }

    #[test]
    fn target_prototype_is_feasible_for_small_margins() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let protos: Vec<Prototype> = (0..4)
                .map(|i| {
                    Prototype::new(
                        DVector::from_fn(3, |_, _| rng.random::<f64>() * 6.0 - 3.0),
                        (i % 2) as i64,
                    )
                })
                .collect();
            let model = LvqModel::new(protos, Metric::Identity).unwrap();
            for target in 0..4 {
                let p_i = model.prototypes()[target].w.clone();
                let label = model.prototypes()[target].label;
                let min_rival_d = model
                    .rivals_for(label)
                    .into_iter()
                    .map(|j| model.distance(&p_i, j).unwrap())
                    .fold(f64::INFINITY, f64::min);
                // Enforced margin is 2 eps in squared-distance units.
                let eps = 0.49 * min_rival_d;
                let rows = linear_constraints(&model, target, eps).unwrap();
                assert!(rows.iter().all(|r| r.lhs(&p_i) <= 1e-12));
            }
        }
    }

    #[test]
    fn frozen_features_become_equalities() {
        let spec = ProgramSpec::quadratic(
            2,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-5.0, -1.0]),
        );
        let uc = UserConstraints {
            frozen: vec![0],
            ..Default::default()
        };
        let x = DVector::from_vec(vec![5.0, 1.0]);
        let spec = apply_user_constraints(spec, &uc, &x).unwrap();
        let out = crate::solver::solve(&spec, &SolverTolerances::default());
        let z = out.z.unwrap();
        assert!((z[0] - 5.0).abs() < 1e-8);
    }

    #[test]
    fn linear_row_is_honored_by_the_solver() {
        // Unconstrained optimum (5,1) violates x0 <= x1.
        let spec = ProgramSpec::quadratic(
            2,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-5.0, -1.0]),
        );
        let uc = UserConstraints {
            linear: vec![LinearUserRow {
                a: vec![1.0, -1.0],
                b: 0.0,
            }],
            ..Default::default()
        };
        let x = DVector::from_vec(vec![0.0, 0.0]);
        let spec = apply_user_constraints(spec, &uc, &x).unwrap();
        let out = crate::solver::solve(&spec, &SolverTolerances::default());
        let z = out.z.unwrap();
        assert!(z[0] - z[1] <= 1e-8, "{z:?}");
        assert!((z[0] - 3.0).abs() < 1e-6 && (z[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn empty_user_constraints_change_nothing() {
        let mut spec = ProgramSpec::linear(3, DVector::from_vec(vec![1.0, 0.0, 0.0]));
        spec.ineq.push(LinearRow {
            a: DVector::from_vec(vec![-1.0, 0.0, 0.0]),
            b: 0.0,
        });
        let x = DVector::from_vec(vec![0.0, 0.0]);
        let out = apply_user_constraints(spec.clone(), &UserConstraints::default(), &x).unwrap();
        assert_eq!(out, spec);
    }

    #[test]
    fn conflicting_box_rejected() {
        let uc = UserConstraints {
            bounds: Some(BoxConstraint {
                lower: Some(vec![1.0]),
                upper: Some(vec![0.0]),
            }),
            ..Default::default()
        };
        assert!(uc.validate(1).is_err());
    }

    #[test]
    fn constraints_parse_from_json() {
        let uc = UserConstraints::from_json_str(
            r#"{"box": {"lower": [0.0, 0.0], "upper": [10.0, 10.0]},
                "frozen": [1],
                "linear": [{"a": [1.0, -1.0], "b": 0.0}]}"#,
        )
        .unwrap();
        assert_eq!(uc.frozen, vec![1]);
        assert_eq!(uc.linear.len(), 1);
        assert!(uc.validate(2).is_ok());
    }
}
