//! Black-box comparison method: hinge-penalized objective minimized by
//! Nelder-Mead downhill-simplex search.
//!
//! The model is only touched through `distance`/`predict`; no constraint
//! structure leaks in. The scalarized objective is
//!
//! ```text
//!   F(x') = C * max(0, (d_best_target(x') - d_best_rival(x')) / 2 + eps) + theta(x', x)
//! ```
//!
//! where `d_best_target` is the distance to the nearest prototype with the
//! requested label and `d_best_rival` the distance to the nearest other
//! prototype. The halved difference matches the margin convention of the
//! exact programs, so both methods chase the same feasible set and their
//! penalty values are directly comparable. When the search ends on an
//! invalid point the penalty weight
//! is raised tenfold and the search restarts from the best point so far;
//! running out of restarts yields a no-solution result, which is a known
//! failure mode of this kind of method on local-metric models.

use std::time::Instant;

use nalgebra::DVector;

use crate::engine::{CfResult, CfSolution, TargetReport};
use crate::error::{Error, Result};
use crate::model::LvqModel;
use crate::regularizer::Regularizer;

#[derive(Clone, Copy, Debug)]
pub struct BaselineConfig {
    /// Initial hinge weight.
    pub penalty: f64,
    /// Additional attempts with a tenfold larger penalty after an invalid
    /// finish.
    pub restarts: usize,
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Iteration budget per attempt, scaled by the dimension.
    pub max_iter_per_dim: usize,
    pub ftol: f64,
    /// Spread of the initial simplex around the input.
    pub init_scale: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            penalty: 10.0,
            restarts: 3,
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            max_iter_per_dim: 200,
            ftol: 1e-6,
            init_scale: 0.1,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty > 0.0) {
            return Err(Error::input("penalty weight must be positive"));
        }
        if !(self.reflection > 0.0)
            || !(self.expansion > 1.0)
            || !(self.contraction > 0.0 && self.contraction < 1.0)
            || !(self.shrink > 0.0 && self.shrink < 1.0)
        {
            return Err(Error::input("simplex coefficients out of range"));
        }
        Ok(())
    }
}

/// Derivative-free counterfactual search treating the model as a black box.
pub fn baseline_explain(
    model: &LvqModel,
    x: &DVector<f64>,
    y_target: i64,
    regularizer: &Regularizer,
    epsilon: f64,
    cfg: &BaselineConfig,
) -> Result<CfResult> {
    cfg.validate()?;
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: x.len(),
        });
    }
    if !model.labels().contains(&y_target) {
        return Err(Error::input(format!(
            "no prototype carries the requested label {y_target}"
        )));
    }
    regularizer.validate(model.dim())?;

    let targets = model.targets_for(y_target);
    let rivals = model.rivals_for(y_target);
    let start = Instant::now();

    let objective = |p: &DVector<f64>, c: f64| -> f64 {
        let d_target = targets
            .iter()
            .map(|&i| model.distance(p, i).unwrap_or(f64::INFINITY))
            .fold(f64::INFINITY, f64::min);
        let d_rival = rivals
            .iter()
            .map(|&j| model.distance(p, j).unwrap_or(f64::INFINITY))
            .fold(f64::INFINITY, f64::min);
        let hinge = (0.5 * (d_target - d_rival) + epsilon).max(0.0);
        let theta = regularizer.evaluate(p, x).unwrap_or(f64::INFINITY);
        c * hinge + theta
    };

    let mut c = cfg.penalty;
    let mut start_point = x.clone();
    let mut per_target = Vec::new();

    for attempt in 0..=cfg.restarts {
        let t0 = Instant::now();
        let f = |p: &DVector<f64>| objective(p, c);
        let best = nelder_mead(&f, &start_point, cfg);
        let elapsed = t0.elapsed().as_secs_f64() * 1e3;
        let valid = model.predict(&best).ok() == Some(y_target);
        let theta = regularizer.evaluate(&best, x)?;
        per_target.push(TargetReport {
            index: attempt,
            status: if valid {
                "optimal".to_string()
            } else {
                "invalid".to_string()
            },
            distance: Some(theta),
            wall_time_ms: elapsed,
            ccp_trace: None,
        });
        if valid {
            let winner = model.nearest(&best).unwrap_or(0);
            return Ok(CfResult {
                solution: Some(CfSolution {
                    x_cf: best,
                    distance: theta,
                    target_prototype: winner,
                }),
                per_target,
                total_wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        c *= 10.0;
        start_point = best;
    }

    Ok(CfResult {
        solution: None,
        per_target,
        total_wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Standard Nelder-Mead on an explicit simplex around `x0`.
fn nelder_mead(
    f: &dyn Fn(&DVector<f64>) -> f64,
    x0: &DVector<f64>,
    cfg: &BaselineConfig,
) -> DVector<f64> {
    let dim = x0.len();
    let max_iter = cfg.max_iter_per_dim * dim;

    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push((x0.clone(), f(x0)));
    for j in 0..dim {
        let mut p = x0.clone();
        p[j] += cfg.init_scale;
        let v = f(&p);
        simplex.push((p, v));
    }

    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[dim].1;
        if (worst - best).abs() <= cfg.ftol * (1.0 + best.abs()) {
            break;
        }

        let mut centroid = DVector::zeros(dim);
        for (p, _) in simplex.iter().take(dim) {
            centroid += p;
        }
        centroid /= dim as f64;

        let xw = simplex[dim].0.clone();
        let reflected = &centroid + cfg.reflection * (&centroid - &xw);
        let fr = f(&reflected);

        if fr < simplex[0].1 {
            let expanded = &centroid + cfg.expansion * (&reflected - &centroid);
            let fe = f(&expanded);
            simplex[dim] = if fe < fr {
                (expanded, fe)
            } else {
                (reflected, fr)
            };
        } else if fr < simplex[dim - 1].1 {
            simplex[dim] = (reflected, fr);
        } else {
            let (contracted, fc) = if fr < simplex[dim].1 {
                let p = &centroid + cfg.contraction * (&reflected - &centroid);
                let v = f(&p);
                (p, v)
            } else {
                let p = &centroid + cfg.contraction * (&xw - &centroid);
                let v = f(&p);
                (p, v)
            };
            if fc < simplex[dim].1.min(fr) {
                simplex[dim] = (contracted, fc);
            } else {
                let xb = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    entry.0 = &xb + cfg.shrink * (&entry.0 - &xb);
                    entry.1 = f(&entry.0);
                }
            }
        }
    }

    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0).0
}
