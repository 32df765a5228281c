//! Canonical optimization problems and solver outcome types.
//!
//! A [`ProgramSpec`] is what every path of the engine bottoms out in:
//!
//! ```text
//!   minimize    c'z                 or   1/2 z'Pz + q'z
//!   subject to  a'z  = b            (eq rows)
//!               a'z <= b            (ineq rows)
//!               1/2 z'P_k z + q_k'z + r_k <= 0   (qineq rows, P_k psd)
//!               lower <= z <= upper (optional per-variable bounds)
//! ```

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    Linear { c: DVector<f64> },
    Quadratic { p: DMatrix<f64>, q: DVector<f64> },
}

/// One linear row `a'z (<=|=) b`; the sense is decided by which list the
/// row lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRow {
    pub a: DVector<f64>,
    pub b: f64,
}

/// One convex quadratic row `1/2 z'Pz + q'z + r <= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadRow {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub r: f64,
}

impl QuadRow {
    pub fn value(&self, z: &DVector<f64>) -> f64 {
        math::half_quad(&self.p, z) + self.q.dot(z) + self.r
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VarBounds {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

impl VarBounds {
    pub fn free(n: usize) -> Self {
        VarBounds {
            lower: vec![None; n],
            upper: vec![None; n],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProgramSpec {
    pub n: usize,
    pub objective: Objective,
    pub eq: Vec<LinearRow>,
    pub ineq: Vec<LinearRow>,
    pub qineq: Vec<QuadRow>,
    pub bounds: Option<VarBounds>,
}

impl ProgramSpec {
    pub fn linear(n: usize, c: DVector<f64>) -> Self {
        ProgramSpec {
            n,
            objective: Objective::Linear { c },
            eq: Vec::new(),
            ineq: Vec::new(),
            qineq: Vec::new(),
            bounds: None,
        }
    }

    pub fn quadratic(n: usize, p: DMatrix<f64>, q: DVector<f64>) -> Self {
        ProgramSpec {
            n,
            objective: Objective::Quadratic { p, q },
            eq: Vec::new(),
            ineq: Vec::new(),
            qineq: Vec::new(),
            bounds: None,
        }
    }

    pub fn bounds_mut(&mut self) -> &mut VarBounds {
        let n = self.n;
        self.bounds.get_or_insert_with(|| VarBounds::free(n))
    }

    /// Tighten the lower bound of variable `j`.
    pub fn set_lower(&mut self, j: usize, v: f64) {
        let b = self.bounds_mut();
        b.lower[j] = Some(b.lower[j].map_or(v, |old: f64| old.max(v)));
    }

    /// Tighten the upper bound of variable `j`.
    pub fn set_upper(&mut self, j: usize, v: f64) {
        let b = self.bounds_mut();
        b.upper[j] = Some(b.upper[j].map_or(v, |old: f64| old.min(v)));
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        match &self.objective {
            Objective::Linear { c } => {
                if c.len() != n {
                    return Err(Error::input("objective length mismatch"));
                }
            }
            Objective::Quadratic { p, q } => {
                if p.nrows() != n || p.ncols() != n || q.len() != n {
                    return Err(Error::input("objective shape mismatch"));
                }
                if math::asymmetry(p) > 1e-8 || !math::is_psd(p, 1e-8) {
                    return Err(Error::input("objective matrix must be symmetric psd"));
                }
            }
        }
        for (name, rows) in [("eq", &self.eq), ("ineq", &self.ineq)] {
            for (k, row) in rows.iter().enumerate() {
                if row.a.len() != n {
                    return Err(Error::input(format!("{name} row {k}: length mismatch")));
                }
                if !math::all_finite(row.a.as_slice()) || !row.b.is_finite() {
                    return Err(Error::input(format!("{name} row {k}: non-finite entry")));
                }
            }
        }
        for (k, row) in self.qineq.iter().enumerate() {
            if row.p.nrows() != n || row.p.ncols() != n || row.q.len() != n {
                return Err(Error::input(format!("qineq row {k}: shape mismatch")));
            }
            if math::asymmetry(&row.p) > 1e-8 || !math::is_psd(&row.p, 1e-8) {
                return Err(Error::input(format!(
                    "qineq row {k}: matrix must be symmetric psd"
                )));
            }
        }
        if let Some(b) = &self.bounds {
            if b.lower.len() != n || b.upper.len() != n {
                return Err(Error::input("bounds length mismatch"));
            }
            for j in 0..n {
                if let (Some(lo), Some(up)) = (b.lower[j], b.upper[j]) {
                    if lo > up {
                        return Err(Error::input(format!(
                            "bounds for variable {j}: lower {lo} > upper {up}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn objective_value(&self, z: &DVector<f64>) -> f64 {
        match &self.objective {
            Objective::Linear { c } => c.dot(z),
            Objective::Quadratic { p, q } => math::half_quad(p, z) + q.dot(z),
        }
    }

    /// Largest constraint violation at `z` (0 when feasible).
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        let mut worst = 0.0_f64;
        for row in &self.eq {
            worst = worst.max((row.a.dot(z) - row.b).abs());
        }
        for row in &self.ineq {
            worst = worst.max(row.a.dot(z) - row.b);
        }
        for row in &self.qineq {
            worst = worst.max(row.value(z));
        }
        if let Some(b) = &self.bounds {
            for j in 0..self.n {
                if let Some(lo) = b.lower[j] {
                    worst = worst.max(lo - z[j]);
                }
                if let Some(up) = b.upper[j] {
                    worst = worst.max(z[j] - up);
                }
            }
        }
        worst
    }

    /// Plain-text dump for solver triage: one line for the objective, then
    /// one line per constraint row. The format is
    /// `eq|ineq: <coeffs> (<= | =) <rhs>`, `qineq: P=<rows>; q=<coeffs>; r=<r>`
    /// and `bound: lower <= z_j <= upper`.
    pub fn dump(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        match &self.objective {
            Objective::Linear { c } => {
                let _ = writeln!(out, "minimize linear: c = {:?}", c.as_slice());
            }
            Objective::Quadratic { p, q } => {
                let _ = writeln!(
                    out,
                    "minimize quadratic: P = {:?}; q = {:?}",
                    matrix_rows(p),
                    q.as_slice()
                );
            }
        }
        for row in &self.eq {
            let _ = writeln!(out, "eq: {:?} = {}", row.a.as_slice(), row.b);
        }
        for row in &self.ineq {
            let _ = writeln!(out, "ineq: {:?} <= {}", row.a.as_slice(), row.b);
        }
        for row in &self.qineq {
            let _ = writeln!(
                out,
                "qineq: P = {:?}; q = {:?}; r = {}",
                matrix_rows(&row.p),
                row.q.as_slice(),
                row.r
            );
        }
        if let Some(b) = &self.bounds {
            for j in 0..self.n {
                if b.lower[j].is_some() || b.upper[j].is_some() {
                    let lo = b.lower[j].map_or("-inf".to_string(), |v| v.to_string());
                    let up = b.upper[j].map_or("inf".to_string(), |v| v.to_string());
                    let _ = writeln!(out, "bound: {lo} <= z{j} <= {up}");
                }
            }
        }
        out
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Solver termination state. `Infeasible` is only reported after a phase-1
/// certificate; everything the solver cannot prove lands in
/// `MaxIterations` or `NumericalFailure`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIterations,
    NumericalFailure,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIterations => "max-iterations",
            SolveStatus::NumericalFailure => "numerical-failure",
        };
        f.write_str(s)
    }
}

/// Multipliers aligned with the originating [`ProgramSpec`]: `ineq` and
/// `qineq` match those row lists, `lower`/`upper` are per-variable (zero
/// where the bound is absent).
#[derive(Clone, Debug)]
pub struct Duals {
    pub eq: DVector<f64>,
    pub ineq: DVector<f64>,
    pub qineq: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    pub z: Option<DVector<f64>>,
    pub objective_value: f64,
    pub iterations: usize,
    pub max_violation: f64,
    pub duals: Option<Duals>,
    pub message: Option<String>,
}

impl SolveOutcome {
    pub fn failed(status: SolveStatus, iterations: usize, message: impl Into<String>) -> Self {
        SolveOutcome {
            status,
            z: None,
            objective_value: f64::NAN,
            iterations,
            max_violation: f64::NAN,
            duals: None,
            message: Some(message.into()),
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolverTolerances {
    /// Primal feasibility tolerance.
    pub feas: f64,
    /// Stationarity / complementarity tolerance.
    pub kkt: f64,
    pub max_iter: usize,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        SolverTolerances {
            feas: 1e-8,
            kkt: 1e-6,
            max_iter: 200,
        }
    }
}
