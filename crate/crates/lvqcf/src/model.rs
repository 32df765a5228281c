//! LVQ models: labeled prototypes plus a metric specification.
//!
//! Prediction is winner-takes-all: a point gets the label of the prototype
//! with the smallest (generalized) squared distance. Metrics come in three
//! flavors: plain squared Euclidean, one global matrix shared by all
//! prototypes, or one matrix per prototype. Learned factors `omega` are
//! stored; the effective distance matrices `lambda = omega' * omega` are
//! cached when the model is constructed.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Maximum tolerated asymmetry in a cached distance matrix.
const LAMBDA_SYM_TOL: f64 = 1e-10;
/// Relative eigenvalue floor for the psd check on cached matrices.
const LAMBDA_PSD_TOL: f64 = 1e-8;

/// A labeled prototype. `omega` is only present for per-prototype metrics.
#[derive(Clone, Debug)]
pub struct Prototype {
    pub w: DVector<f64>,
    pub label: i64,
    pub omega: Option<DMatrix<f64>>,
}

impl Prototype {
    pub fn new(w: DVector<f64>, label: i64) -> Self {
        Prototype {
            w,
            label,
            omega: None,
        }
    }

    pub fn with_omega(w: DVector<f64>, label: i64, omega: DMatrix<f64>) -> Self {
        Prototype {
            w,
            label,
            omega: Some(omega),
        }
    }
}

/// Which distance the model uses.
#[derive(Clone, Debug)]
pub enum Metric {
    /// Squared Euclidean distance.
    Identity,
    /// One learned factor shared by every prototype.
    Global(DMatrix<f64>),
    /// Each prototype carries its own factor.
    Local,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Identity => "identity",
            Metric::Global(_) => "global",
            Metric::Local => "local",
        }
    }
}

/// An immutable LVQ classifier. Construction validates all invariants and
/// caches the effective distance matrices, so shared read access from
/// parallel solver workers is safe.
#[derive(Clone, Debug)]
pub struct LvqModel {
    dim: usize,
    prototypes: Vec<Prototype>,
    metric: Metric,
    lambda_global: Option<DMatrix<f64>>,
    lambda_local: Vec<DMatrix<f64>>,
}

impl LvqModel {
    pub fn new(prototypes: Vec<Prototype>, metric: Metric) -> Result<Self> {
        if prototypes.len() < 2 {
            return Err(Error::model("need at least 2 prototypes"));
        }
        let dim = prototypes[0].w.len();
        if dim == 0 {
            return Err(Error::model("prototype vectors must be non-empty"));
        }
        for (i, p) in prototypes.iter().enumerate() {
            if p.w.len() != dim {
                return Err(Error::model(format!(
                    "prototypes[{i}].w: expected length {dim}, got {}",
                    p.w.len()
                )));
            }
            if !math::all_finite(p.w.as_slice()) {
                return Err(Error::model(format!(
                    "prototypes[{i}].w: contains a non-finite entry"
                )));
            }
        }
        let mut labels: Vec<i64> = prototypes.iter().map(|p| p.label).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() < 2 {
            return Err(Error::model("need at least 2 distinct labels"));
        }
        // Identical vectors with different labels make every feasibility
        // region for either label empty; reject up front.
        for i in 0..prototypes.len() {
            for j in (i + 1)..prototypes.len() {
                if prototypes[i].label != prototypes[j].label
                    && prototypes[i].w == prototypes[j].w
                {
                    return Err(Error::model(format!(
                        "prototypes {i} and {j} are identical but carry different labels"
                    )));
                }
            }
        }

        let mut lambda_global = None;
        let mut lambda_local = Vec::new();
        match &metric {
            Metric::Identity => {
                if let Some(i) = prototypes.iter().position(|p| p.omega.is_some()) {
                    return Err(Error::model(format!(
                        "prototypes[{i}].omega: not allowed with the identity metric"
                    )));
                }
            }
            Metric::Global(omega) => {
                if let Some(i) = prototypes.iter().position(|p| p.omega.is_some()) {
                    return Err(Error::model(format!(
                        "prototypes[{i}].omega: not allowed with a global metric"
                    )));
                }
                lambda_global = Some(build_lambda(omega, dim, "omega")?);
            }
            Metric::Local => {
                for (i, p) in prototypes.iter().enumerate() {
                    let omega = p.omega.as_ref().ok_or_else(|| {
                        Error::model(format!(
                            "prototypes[{i}].omega: required for a local metric"
                        ))
                    })?;
                    lambda_local
                        .push(build_lambda(omega, dim, &format!("prototypes[{i}].omega"))?);
                }
            }
        }

        Ok(LvqModel {
            dim,
            prototypes,
            metric,
            lambda_global,
            lambda_local,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prototypes(&self) -> &[Prototype] {
        &self.prototypes
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    /// Sorted distinct labels.
    pub fn labels(&self) -> Vec<i64> {
        let mut labels: Vec<i64> = self.prototypes.iter().map(|p| p.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    /// Effective distance matrix for prototype `i`; `None` means identity.
    pub fn lambda(&self, i: usize) -> Option<&DMatrix<f64>> {
        match self.metric {
            Metric::Identity => None,
            Metric::Global(_) => self.lambda_global.as_ref(),
            Metric::Local => Some(&self.lambda_local[i]),
        }
    }

    /// Effective distance matrix for prototype `i`, materialized.
    pub fn lambda_dense(&self, i: usize) -> DMatrix<f64> {
        match self.lambda(i) {
            Some(l) => l.clone(),
            None => DMatrix::identity(self.dim, self.dim),
        }
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.prototypes.len() {
            return Err(Error::input(format!(
                "prototype index {i} out of range (model has {})",
                self.prototypes.len()
            )));
        }
        Ok(())
    }

    /// Squared distance `(x - p_i)' lambda_i (x - p_i)`.
    pub fn distance(&self, x: &DVector<f64>, i: usize) -> Result<f64> {
        self.check_dim(x)?;
        self.check_index(i)?;
        let diff = x - &self.prototypes[i].w;
        let d = match self.lambda(i) {
            None => diff.norm_squared(),
            Some(l) => (l * &diff).dot(&diff),
        };
        Ok(d.max(0.0))
    }

    /// Index of the nearest prototype; ties go to the lowest index.
    pub fn nearest(&self, x: &DVector<f64>) -> Result<usize> {
        self.check_dim(x)?;
        let mut best = 0;
        let mut best_d = self.distance(x, 0)?;
        for i in 1..self.prototypes.len() {
            let d = self.distance(x, i)?;
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        Ok(best)
    }

    /// Winner-takes-all prediction.
    pub fn predict(&self, x: &DVector<f64>) -> Result<i64> {
        Ok(self.prototypes[self.nearest(x)?].label)
    }

    /// Indices of prototypes carrying `label`.
    pub fn targets_for(&self, label: i64) -> Vec<usize> {
        (0..self.prototypes.len())
            .filter(|&i| self.prototypes[i].label == label)
            .collect()
    }

    /// Indices of prototypes *not* carrying `label` (the competitors a
    /// counterfactual of that label has to beat).
    pub fn rivals_for(&self, label: i64) -> Vec<usize> {
        (0..self.prototypes.len())
            .filter(|&i| self.prototypes[i].label != label)
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path.as_ref(), self.to_json_string())?;
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let raw: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::parse(format!("model file: {e}")))?;
        raw.into_model()
    }

    pub fn to_json_string(&self) -> String {
        let raw = ModelFile::from_model(self);
        let mut out = serde_json::to_string_pretty(&raw).expect("model serialization");
        out.push('\n');
        out
    }
}

fn build_lambda(omega: &DMatrix<f64>, dim: usize, field: &str) -> Result<DMatrix<f64>> {
    if omega.nrows() != dim || omega.ncols() != dim {
        return Err(Error::model(format!(
            "{field}: expected a {dim}x{dim} matrix, got {}x{}",
            omega.nrows(),
            omega.ncols()
        )));
    }
    if !math::all_finite(omega.as_slice()) {
        return Err(Error::model(format!("{field}: contains a non-finite entry")));
    }
    let lambda = omega.transpose() * omega;
    if math::asymmetry(&lambda) > LAMBDA_SYM_TOL {
        return Err(Error::model(format!("{field}: omega'omega is not symmetric")));
    }
    let lambda = math::symmetrize(&lambda);
    if !math::is_psd(&lambda, LAMBDA_PSD_TOL) {
        return Err(Error::model(format!(
            "{field}: omega'omega is not positive semi-definite"
        )));
    }
    Ok(lambda)
}

// --- file format ------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    omega: Option<Vec<Vec<f64>>>,
    prototypes: Vec<PrototypeFile>,
}

#[derive(Serialize, Deserialize)]
struct PrototypeFile {
    w: Vec<f64>,
    label: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    omega: Option<Vec<Vec<f64>>>,
}

fn matrix_from_rows(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::parse(format!("{field}: empty matrix")));
    }
    let ncols = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != ncols {
            return Err(Error::parse(format!(
                "{field}: row {i} has {} entries, expected {ncols}",
                row.len()
            )));
        }
    }
    let mut m = DMatrix::zeros(rows.len(), ncols);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

impl ModelFile {
    fn into_model(self) -> Result<LvqModel> {
        if self.prototypes.is_empty() {
            return Err(Error::parse("prototypes: must not be empty"));
        }
        let dim = match self.dim {
            Some(d) => d,
            None => self.prototypes[0].w.len(),
        };
        let metric = match self.metric.as_str() {
            "identity" => {
                if self.omega.is_some() {
                    return Err(Error::parse(
                        "omega: not allowed when metric is \"identity\"",
                    ));
                }
                Metric::Identity
            }
            "global" => {
                let rows = self
                    .omega
                    .as_ref()
                    .ok_or_else(|| Error::parse("omega: required when metric is \"global\""))?;
                Metric::Global(matrix_from_rows(rows, "omega")?)
            }
            "local" => {
                if self.omega.is_some() {
                    return Err(Error::parse(
                        "omega: place per-prototype matrices inside each prototype for a local metric",
                    ));
                }
                Metric::Local
            }
            other => {
                return Err(Error::parse(format!(
                    "metric: expected \"identity\", \"global\" or \"local\", got \"{other}\""
                )))
            }
        };
        let mut prototypes = Vec::with_capacity(self.prototypes.len());
        for (i, p) in self.prototypes.into_iter().enumerate() {
            if p.w.len() != dim {
                return Err(Error::parse(format!(
                    "prototypes[{i}].w: expected length {dim}, got {}",
                    p.w.len()
                )));
            }
            let omega = match p.omega {
                Some(rows) => Some(matrix_from_rows(&rows, &format!("prototypes[{i}].omega"))?),
                None => None,
            };
            prototypes.push(Prototype {
                w: DVector::from_vec(p.w),
                label: p.label,
                omega,
            });
        }
        LvqModel::new(prototypes, metric)
    }

    fn from_model(model: &LvqModel) -> Self {
        ModelFile {
            dim: Some(model.dim),
            metric: model.metric.name().to_string(),
            omega: match &model.metric {
                Metric::Global(omega) => Some(matrix_to_rows(omega)),
                _ => None,
            },
            prototypes: model
                .prototypes
                .iter()
                .map(|p| PrototypeFile {
                    w: p.w.as_slice().to_vec(),
                    label: p.label,
                    omega: p.omega.as_ref().map(matrix_to_rows),
                })
                .collect(),
        }
    }
}
