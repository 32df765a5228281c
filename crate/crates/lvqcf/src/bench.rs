//! Benchmark harness: cross-validated comparison of the exact engine
//! against the black-box baseline, plus the brute-force grid oracle used
//! for optimality cross-checks.
//!
//! Per fold the protocol is: fit the plumbing model on the training split
//! (in standardized coordinates), compute MAD weights on the training fold
//! only, then request one counterfactual per test point toward the next
//! label after the predicted one (cyclically). Everything is driven by a
//! single seed.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_explain, BaselineConfig};
use crate::data::{self, Dataset, Standardizer};
use crate::engine::{explain, CfRequest};
use crate::error::{Error, Result};
use crate::fit::{fit_plumbing, FitMetric};
use crate::model::LvqModel;
use crate::regularizer::{mad_weights, Regularizer};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Glvq,
    Gmlvq,
    Lgmlvq,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Glvq => "glvq",
            ModelKind::Gmlvq => "gmlvq",
            ModelKind::Lgmlvq => "lgmlvq",
        }
    }

    fn fit_metric(&self) -> FitMetric {
        match self {
            ModelKind::Glvq => FitMetric::Identity,
            ModelKind::Gmlvq => FitMetric::Global(None),
            ModelKind::Lgmlvq => FitMetric::Local,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ours,
    BaselineDs,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::BaselineDs => "baseline-ds",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        dim: usize,
        n: usize,
        separation: f64,
        seed: u64,
    },
    Csv {
        path: String,
        label_column: String,
    },
}

impl DatasetSpec {
    fn load(&self) -> Result<(Dataset, String)> {
        match self {
            DatasetSpec::Synthetic {
                classes,
                dim,
                n,
                separation,
                seed,
            } => {
                let ds = data::synthetic_blobs(*classes, *dim, *n, *separation, *seed)?;
                let name = format!("synthetic-c{classes}-d{dim}-n{n}");
                Ok((ds, name))
            }
            DatasetSpec::Csv { path, label_column } => {
                let ds = data::ingest_csv(path, label_column)?;
                let name = std::path::Path::new(path)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "csv".to_string());
                Ok((ds, name))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum BenchRegularizer {
    /// Weighted manhattan with inverse-MAD weights from the training fold.
    Manhattan,
    Euclidean,
}

fn default_prototypes_per_class() -> usize {
    3
}
fn default_folds() -> usize {
    4
}
fn default_epsilon() -> f64 {
    1e-4
}
fn default_regularizer() -> BenchRegularizer {
    BenchRegularizer::Manhattan
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchSpec {
    pub dataset: DatasetSpec,
    pub model_kinds: Vec<ModelKind>,
    #[serde(default = "default_prototypes_per_class")]
    pub prototypes_per_class: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_regularizer")]
    pub regularizer: BenchRegularizer,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub parallel: bool,
}

impl BenchSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(format!("bench spec: {e}")))
    }
}

/// One aggregated table row.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub dataset: String,
    pub model: String,
    pub method: String,
    pub cases: usize,
    pub successes: usize,
    pub mean_distance: f64,
    pub median_wall_ms: f64,
    pub failure_rate: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpeedupRow {
    pub dataset: String,
    pub model: String,
    /// median baseline time / median engine time.
    pub speedup: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub speedups: Vec<SpeedupRow>,
    /// Feature indices whose MAD was zero in some fold (unit-weight
    /// fallback applied); surfaced so the CLI can warn loudly.
    pub zero_mad_events: usize,
}

impl BenchReport {
    pub fn row(&self, model: &str, method: &str) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "dataset,model,method,cases,successes,mean_distance,median_wall_ms,failure_rate\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.dataset,
                r.model,
                r.method,
                r.cases,
                r.successes,
                r.mean_distance,
                r.median_wall_ms,
                r.failure_rate
            ));
        }
        out
    }

    /// Aligned plain-text table, one block per dataset: models as rows,
    /// methods as columns (mean distance), with failure rates and the
    /// speedup column alongside.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let mut datasets: Vec<&str> = self.rows.iter().map(|r| r.dataset.as_str()).collect();
        datasets.sort_unstable();
        datasets.dedup();
        for ds in datasets {
            out.push_str(&format!("dataset: {ds}\n"));
            out.push_str(&format!(
                "{:<8} {:>14} {:>14} {:>12} {:>12} {:>9}\n",
                "model", "ours", "baseline-ds", "fail(ours)", "fail(ds)", "speedup"
            ));
            let mut models: Vec<&str> = self
                .rows
                .iter()
                .filter(|r| r.dataset == ds)
                .map(|r| r.model.as_str())
                .collect();
            models.sort_unstable();
            models.dedup();
            for model in models {
                let ours = self
                    .rows
                    .iter()
                    .find(|r| r.dataset == ds && r.model == model && r.method == "ours");
                let base = self
                    .rows
                    .iter()
                    .find(|r| r.dataset == ds && r.model == model && r.method == "baseline-ds");
                let fmt = |r: Option<&BenchRow>, f: fn(&BenchRow) -> String| {
                    r.map_or("-".to_string(), f)
                };
                let speedup = self
                    .speedups
                    .iter()
                    .find(|s| s.dataset == ds && s.model == model)
                    .map_or("-".to_string(), |s| format!("{:.1}x", s.speedup));
                out.push_str(&format!(
                    "{:<8} {:>14} {:>14} {:>12} {:>12} {:>9}\n",
                    model,
                    fmt(ours.as_deref(), |r| format!("{:.4}", r.mean_distance)),
                    fmt(base.as_deref(), |r| format!("{:.4}", r.mean_distance)),
                    fmt(ours.as_deref(), |r| format!("{:.1}%", r.failure_rate * 100.0)),
                    fmt(base.as_deref(), |r| format!("{:.1}%", r.failure_rate * 100.0)),
                    speedup
                ));
            }
            out.push('\n');
        }
        out
    }
}

struct CaseResult {
    method: Method,
    model: String,
    success: bool,
    distance: Option<f64>,
    wall_ms: f64,
}

/// Run the full cross-validated comparison described by `spec`.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    if spec.folds < 2 {
        return Err(Error::input("folds must be at least 2"));
    }
    if spec.model_kinds.is_empty() || spec.methods.is_empty() {
        return Err(Error::input("model_kinds and methods must be non-empty"));
    }
    let (dataset, ds_name) = spec.dataset.load()?;
    let classes = dataset.classes();
    if dataset.len() < spec.folds * classes.len() {
        return Err(Error::input(format!(
            "dataset too small: {} points for {} folds x {} classes",
            dataset.len(),
            spec.folds,
            classes.len()
        )));
    }

    let folds = data::stratified_folds(&dataset.labels, spec.folds, spec.seed)?;
    let mut cases: Vec<CaseResult> = Vec::new();
    let mut zero_mad_events = 0usize;

    for kind in &spec.model_kinds {
        for test_idx in &folds {
            let train_idx = data::train_indices(dataset.len(), test_idx);
            // Standardization and MAD weights come from the training fold
            // only; the test fold never influences them.
            let scaler = Standardizer::fit(&dataset.points, &train_idx)?;
            let train_points = scaler.transform_subset(&dataset.points, &train_idx);
            let train_labels: Vec<i64> = train_idx.iter().map(|&i| dataset.labels[i]).collect();

            let model = fit_plumbing(
                &train_points,
                &train_labels,
                spec.prototypes_per_class,
                kind.fit_metric(),
                spec.seed,
            )?;

            let regularizer = match spec.regularizer {
                BenchRegularizer::Manhattan => {
                    let w = mad_weights(&train_points)?;
                    zero_mad_events += w.zero_mad.len();
                    Regularizer::WeightedManhattan { alpha: w.alpha }
                }
                BenchRegularizer::Euclidean => Regularizer::Euclidean,
            };

            let fold_cases = run_fold_cases(
                spec,
                kind,
                &model,
                &regularizer,
                &scaler,
                &dataset,
                test_idx,
                &classes,
            );
            cases.extend(fold_cases);
        }
    }

    Ok(aggregate(spec, &ds_name, cases, zero_mad_events))
}

#[allow(clippy::too_many_arguments)]
fn run_fold_cases(
    spec: &BenchSpec,
    kind: &ModelKind,
    model: &LvqModel,
    regularizer: &Regularizer,
    scaler: &Standardizer,
    dataset: &Dataset,
    test_idx: &[usize],
    classes: &[i64],
) -> Vec<CaseResult> {
    let solve_case = |&i: &usize| -> Vec<CaseResult> {
        let x = scaler.transform(&dataset.points[i]);
        let predicted = match model.predict(&x) {
            Ok(p) => p,
            Err(_) => return Vec::new(),
        };
        // Cyclic next-label rule for the requested class.
        let pos = classes.iter().position(|&c| c == predicted).unwrap_or(0);
        let y_target = classes[(pos + 1) % classes.len()];

        let mut out = Vec::new();
        for method in &spec.methods {
            let t0 = Instant::now();
            let result = match method {
                Method::Ours => {
                    let req = CfRequest::new(x.clone(), y_target, regularizer.clone())
                        .with_epsilon(spec.epsilon);
                    explain(model, &req)
                }
                Method::BaselineDs => baseline_explain(
                    model,
                    &x,
                    y_target,
                    regularizer,
                    spec.epsilon,
                    &BaselineConfig::default(),
                ),
            };
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
            let (success, distance) = match result {
                Ok(res) => match res.solution {
                    Some(sol) => (true, Some(sol.distance)),
                    None => (false, None),
                },
                Err(_) => (false, None),
            };
            out.push(CaseResult {
                method: method.clone(),
                model: kind.name().to_string(),
                success,
                distance,
                wall_ms,
            });
        }
        out
    };

    if spec.parallel {
        test_idx.par_iter().flat_map_iter(|i| solve_case(i)).collect()
    } else {
        test_idx.iter().flat_map(solve_case).collect()
    }
}

fn aggregate(
    spec: &BenchSpec,
    ds_name: &str,
    cases: Vec<CaseResult>,
    zero_mad_events: usize,
) -> BenchReport {
    let mut rows = Vec::new();
    for kind in &spec.model_kinds {
        for method in &spec.methods {
            let subset: Vec<&CaseResult> = cases
                .iter()
                .filter(|c| c.model == kind.name() && c.method == *method)
                .collect();
            if subset.is_empty() {
                continue;
            }
            let successes = subset.iter().filter(|c| c.success).count();
            let mean_distance = if successes > 0 {
                subset
                    .iter()
                    .filter_map(|c| c.distance)
                    .sum::<f64>()
                    / successes as f64
            } else {
                f64::NAN
            };
            let mut times: Vec<f64> = subset.iter().map(|c| c.wall_ms).collect();
            times.sort_by(|a, b| a.total_cmp(b));
            let median_wall_ms = median_sorted(&times);
            rows.push(BenchRow {
                dataset: ds_name.to_string(),
                model: kind.name().to_string(),
                method: method.name().to_string(),
                cases: subset.len(),
                successes,
                mean_distance,
                median_wall_ms,
                failure_rate: 1.0 - successes as f64 / subset.len() as f64,
            });
        }
    }

    let mut speedups = Vec::new();
    for kind in &spec.model_kinds {
        let ours = rows
            .iter()
            .find(|r| r.model == kind.name() && r.method == "ours");
        let base = rows
            .iter()
            .find(|r| r.model == kind.name() && r.method == "baseline-ds");
        if let (Some(o), Some(b)) = (ours, base) {
            if o.median_wall_ms > 0.0 {
                speedups.push(SpeedupRow {
                    dataset: ds_name.to_string(),
                    model: kind.name().to_string(),
                    speedup: b.median_wall_ms / o.median_wall_ms,
                });
            }
        }
    }

    BenchReport {
        rows,
        speedups,
        zero_mad_events,
    }
}

fn median_sorted(sorted: &[f64]) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Exhaustive low-dimensional search: the independent optimality oracle.
/// Scans the grid `lower + k*step` inside the box and returns the best
/// point that the model classifies as `y_target` with the requested margin,
/// or `None` when no grid point qualifies.
pub fn grid_oracle(
    model: &LvqModel,
    x: &DVector<f64>,
    y_target: i64,
    regularizer: &Regularizer,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    step: f64,
    epsilon: f64,
) -> Result<Option<(DVector<f64>, f64)>> {
    let dim = model.dim();
    if dim > 3 {
        return Err(Error::input(format!(
            "grid oracle supports dimension <= 3, got {dim}"
        )));
    }
    if lower.len() != dim || upper.len() != dim || x.len() != dim {
        return Err(Error::input("box/input dimension mismatch"));
    }
    if !(step > 0.0) {
        return Err(Error::input("step must be positive"));
    }
    for j in 0..dim {
        if !(lower[j] <= x[j] && x[j] <= upper[j]) {
            return Err(Error::input("box must contain the input point"));
        }
    }
    let targets = model.targets_for(y_target);
    let rivals = model.rivals_for(y_target);
    if targets.is_empty() {
        return Err(Error::input(format!("no prototype with label {y_target}")));
    }

    let counts: Vec<usize> = (0..dim)
        .map(|j| ((upper[j] - lower[j]) / step).floor() as usize + 1)
        .collect();
    let total: usize = counts.iter().product();
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut point = DVector::zeros(dim);

    for flat in 0..total {
        let mut rem = flat;
        for j in 0..dim {
            let k = rem % counts[j];
            rem /= counts[j];
            point[j] = lower[j] + k as f64 * step;
        }
        let d_target = targets
            .iter()
            .map(|&i| model.distance(&point, i).unwrap_or(f64::INFINITY))
            .fold(f64::INFINITY, f64::min);
        let d_rival = rivals
            .iter()
            .map(|&j| model.distance(&point, j).unwrap_or(f64::INFINITY))
            .fold(f64::INFINITY, f64::min);
        if d_target + epsilon > d_rival {
            continue;
        }
        if model.predict(&point).ok() != Some(y_target) {
            continue;
        }
        let theta = regularizer.evaluate(&point, x)?;
        if best.as_ref().is_none_or(|(_, b)| theta < *b) {
            best = Some((point.clone(), theta));
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Metric, Prototype};

    fn tiny_spec(methods: Vec<Method>, kinds: Vec<ModelKind>) -> BenchSpec {
        BenchSpec {
            dataset: DatasetSpec::Synthetic {
                classes: 2,
                dim: 2,
                n: 48,
                separation: 5.0,
                seed: 7,
            },
            model_kinds: kinds,
            prototypes_per_class: 2,
            folds: 4,
            regularizer: BenchRegularizer::Manhattan,
            epsilon: 1e-4,
            methods,
            seed: 0,
            parallel: false,
        }
    }

    #[test]
    fn bench_produces_complete_rows() {
        let spec = tiny_spec(
            vec![Method::Ours, Method::BaselineDs],
            vec![ModelKind::Glvq],
        );
        let report = run_bench(&spec).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert_eq!(row.cases, 48, "every test point of every fold appears once");
        }
        assert_eq!(report.speedups.len(), 1);
        assert!(!report.to_csv().is_empty());
        assert!(report.to_table().contains("glvq"));
    }

    #[test]
    fn bench_is_reproducible_in_substance() {
        let spec = tiny_spec(vec![Method::Ours], vec![ModelKind::Glvq, ModelKind::Lgmlvq]);
        let a = run_bench(&spec).unwrap();
        let b = run_bench(&spec).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.model, rb.model);
            assert_eq!(ra.cases, rb.cases);
            assert_eq!(ra.successes, rb.successes);
            assert_eq!(ra.mean_distance.to_bits(), rb.mean_distance.to_bits());
            assert_eq!(ra.failure_rate, rb.failure_rate);
        }
    }

    #[test]
    fn minimum_size_boundary_runs() {
        // n = 4 * classes with 2 folds and one prototype per class.
        let spec = BenchSpec {
            dataset: DatasetSpec::Synthetic {
                classes: 2,
                dim: 2,
                n: 8,
                separation: 6.0,
                seed: 1,
            },
            model_kinds: vec![ModelKind::Glvq],
            prototypes_per_class: 1,
            folds: 2,
            regularizer: BenchRegularizer::Manhattan,
            epsilon: 1e-4,
            methods: vec![Method::Ours],
            seed: 0,
            parallel: false,
        };
        let report = run_bench(&spec).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].cases, 8);
    }

    #[test]
    fn too_small_dataset_is_rejected() {
        let mut spec = tiny_spec(vec![Method::Ours], vec![ModelKind::Glvq]);
        spec.dataset = DatasetSpec::Synthetic {
            classes: 2,
            dim: 2,
            n: 6,
            separation: 5.0,
            seed: 7,
        };
        assert!(run_bench(&spec).is_err());
    }

    #[test]
    fn spec_parses_with_defaults() {
        let spec = BenchSpec::from_json_str(
            r#"{
                "dataset": {"synthetic": {"classes": 2, "dim": 2, "n": 40, "separation": 4.0, "seed": 3}},
                "model_kinds": ["glvq", "gmlvq"],
                "methods": ["ours"]
            }"#,
        )
        .unwrap();
        assert_eq!(spec.prototypes_per_class, 3);
        assert_eq!(spec.folds, 4);
        assert_eq!(spec.epsilon, 1e-4);
        assert_eq!(spec.regularizer, BenchRegularizer::Manhattan);
    }

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
    fn oracle_agrees_with_the_hand_derivation() {
        let model = two_proto_model();
        let x = DVector::from_vec(vec![3.0, 0.0]);
        let reg = Regularizer::manhattan(vec![1.0, 1.0]);
        let (point, theta) = grid_oracle(
            &model,
            &x,
            0,
            &reg,
            &DVector::from_vec(vec![-1.0, -1.0]),
            &DVector::from_vec(vec![5.0, 5.0]),
            0.01,
            1e-4,
        )
        .unwrap()
        .expect("feasible grid point exists");
        // Continuous optimum is (1 - eps/2, 0) at theta = 2 + eps/2; the
        // grid can be off by at most step * sum(alpha).
        assert!((theta - 2.00005).abs() <= 0.02, "theta = {theta}");
        assert!((point[0] - 1.0).abs() <= 0.02);
        assert!(point[1].abs() <= 1e-12);
    }

    #[test]
    fn oracle_returns_none_in_a_hopeless_box() {
        let model = two_proto_model();
        let x = DVector::from_vec(vec![3.0, 0.0]);
        let out = grid_oracle(
            &model,
            &x,
            0,
            &Regularizer::Euclidean,
            &DVector::from_vec(vec![2.9, -0.1]),
            &DVector::from_vec(vec![3.1, 0.1]),
            0.05,
            1e-4,
        )
        .unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn oracle_rejects_high_dimensions() {
        let model = LvqModel::new(
            vec![
                Prototype::new(DVector::from_vec(vec![0.0; 4]), 0),
                Prototype::new(DVector::from_vec(vec![1.0; 4]), 1),
            ],
            Metric::Identity,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.5; 4]);
        let b = DVector::from_vec(vec![0.0; 4]);
        let u = DVector::from_vec(vec![1.0; 4]);
        assert!(grid_oracle(&model, &x, 1, &Regularizer::Euclidean, &b, &u, 0.1, 1e-4).is_err());
    }
}
