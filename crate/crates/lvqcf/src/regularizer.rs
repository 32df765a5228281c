//! Deviation penalties between a counterfactual and the original input,
//! plus the canonical objective forms the solvers consume.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math;

/// How deviation from the original input is scored.
#[derive(Clone, Debug)]
pub enum Regularizer {
    /// `sum_j alpha_j |x_j - xcf_j|` with positive feature weights.
    WeightedManhattan { alpha: DVector<f64> },
    /// Squared Euclidean distance.
    Euclidean,
    /// `(x - xcf)' lambda (x - xcf)` for a symmetric psd `lambda`.
    GeneralizedL2 { lambda: DMatrix<f64> },
}

impl Regularizer {
    pub fn manhattan(alpha: Vec<f64>) -> Self {
        Regularizer::WeightedManhattan {
            alpha: DVector::from_vec(alpha),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::WeightedManhattan { .. } => "manhattan",
            Regularizer::Euclidean => "euclidean",
            Regularizer::GeneralizedL2 { .. } => "gl2",
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            Regularizer::WeightedManhattan { alpha } => {
                if alpha.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: alpha.len(),
                    });
                }
                if alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
                    return Err(Error::input("manhattan weights must be positive and finite"));
                }
            }
            Regularizer::Euclidean => {}
            Regularizer::GeneralizedL2 { lambda } => {
                if lambda.nrows() != dim || lambda.ncols() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: lambda.nrows(),
                    });
                }
                if math::asymmetry(lambda) > 1e-8 || !math::is_psd(lambda, 1e-8) {
                    return Err(Error::input(
                        "generalized-l2 matrix must be symmetric positive semi-definite",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Penalty value; zero iff `xcf` differs from `x` only inside the
    /// metric's null space (exactly `xcf == x` for manhattan/euclidean).
    pub fn evaluate(&self, xcf: &DVector<f64>, x: &DVector<f64>) -> Result<f64> {
        if xcf.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                got: xcf.len(),
            });
        }
        let v = match self {
            Regularizer::WeightedManhattan { alpha } => {
                if alpha.len() != x.len() {
                    return Err(Error::DimensionMismatch {
                        expected: x.len(),
                        got: alpha.len(),
                    });
                }
                alpha
                    .iter()
                    .zip(x.iter().zip(xcf.iter()))
                    .map(|(a, (xi, ci))| a * (xi - ci).abs())
                    .sum()
            }
            Regularizer::Euclidean => (x - xcf).norm_squared(),
            Regularizer::GeneralizedL2 { lambda } => {
                let d = x - xcf;
                (lambda * &d).dot(&d)
            }
        };
        Ok(v.max(0.0))
    }
}

/// Inverse-MAD feature weights computed from training data.
///
/// Features with zero MAD (constant or majority-constant columns) fall back
/// to weight 1; their indices are reported so callers can warn about it.
pub struct MadWeights {
    pub alpha: DVector<f64>,
    pub zero_mad: Vec<usize>,
}

pub fn mad_weights(data: &[DVector<f64>]) -> Result<MadWeights> {
    if data.is_empty() {
        return Err(Error::input("cannot compute MAD weights from empty data"));
    }
    let dim = data[0].len();
    let mut alpha = DVector::zeros(dim);
    let mut zero_mad = Vec::new();
    let mut column = vec![0.0; data.len()];
    for j in 0..dim {
        for (i, x) in data.iter().enumerate() {
            column[i] = x[j];
        }
        let med = median(&mut column.clone());
        let mut dev: Vec<f64> = column.iter().map(|v| (v - med).abs()).collect();
        let mad = median(&mut dev);
        if mad > 0.0 {
            alpha[j] = 1.0 / mad;
        } else {
            alpha[j] = 1.0;
            zero_mad.push(j);
        }
    }
    Ok(MadWeights { alpha, zero_mad })
}

/// Median with the even-length convention: midpoint of the two central
/// order statistics.
fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Canonical objective handed to the solvers.
///
/// The manhattan penalty is not smooth, so it is carried in epigraph form:
/// the program gets auxiliary variables `beta` (one per feature), objective
/// `1' beta`, and rows tying `beta_j >= alpha_j |x'_j - x_j|`. The quadratic
/// penalties keep only the terms that depend on the variable; the dropped
/// constant does not move the argmin.
#[derive(Clone, Debug)]
pub enum ObjectiveSpec {
    Epigraph {
        alpha: DVector<f64>,
        origin: DVector<f64>,
    },
    Quadratic {
        p: DMatrix<f64>,
        q: DVector<f64>,
    },
}

impl ObjectiveSpec {
    /// Number of auxiliary variables appended after the `d` feature
    /// variables.
    pub fn aux_vars(&self) -> usize {
        match self {
            ObjectiveSpec::Epigraph { alpha, .. } => alpha.len(),
            ObjectiveSpec::Quadratic { .. } => 0,
        }
    }
}

pub fn build_objective(reg: &Regularizer, x: &DVector<f64>) -> ObjectiveSpec {
    match reg {
        Regularizer::WeightedManhattan { alpha } => ObjectiveSpec::Epigraph {
            alpha: alpha.clone(),
            origin: x.clone(),
        },
        Regularizer::Euclidean => ObjectiveSpec::Quadratic {
            p: DMatrix::identity(x.len(), x.len()),
            q: -x,
        },
        Regularizer::GeneralizedL2 { lambda } => ObjectiveSpec::Quadratic {
            p: lambda.clone(),
            q: -(lambda * x),
        },
    }
}
