//! Primal-dual interior-point solver for the canonical programs.
//!
//! One code path covers LPs, convex QPs and convex QCQPs: every inequality
//! (linear row, psd quadratic row, variable bound) is treated as a smooth
//! convex constraint `F_i(z) <= 0` with slack `s_i > 0` and multiplier
//! `lambda_i > 0`, and a Mehrotra-style predictor-corrector drives the
//! perturbed KKT conditions to zero. Quadratic rows contribute their
//! curvature to the Newton system through the Lagrangian Hessian, so no
//! cone reformulation is needed.
//!
//! Infeasibility is never inferred from stalling alone: a phase-1 program
//! (minimize the worst constraint violation) is solved to classify
//! non-converged runs, so `Infeasible` always comes with a certificate-like
//! positive phase-1 optimum.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::math;
use crate::program::{
    Duals, Objective, ProgramSpec, SolveOutcome, SolveStatus, SolverTolerances,
};

/// Residual report for a candidate optimum. All entries are absolute.
#[derive(Clone, Copy, Debug)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub dual_feasibility: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .max(self.primal_feasibility)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

/// Solve a canonical program with default start.
pub fn solve(spec: &ProgramSpec, tol: &SolverTolerances) -> SolveOutcome {
    solve_from(spec, tol, None)
}

/// Solve with an optional primal warm start (slacks and multipliers are
/// re-initialized either way).
pub fn solve_from(
    spec: &ProgramSpec,
    tol: &SolverTolerances,
    z0: Option<&DVector<f64>>,
) -> SolveOutcome {
    if let Err(e) = spec.validate() {
        return SolveOutcome::failed(SolveStatus::NumericalFailure, 0, format!("invalid spec: {e}"));
    }
    let canon = Canonical::build(spec);
    canon.solve(tol, z0, true)
}

/// Evaluate KKT residuals of `(z, duals)` for `spec`. Used as the
/// independent correctness oracle for the solver.
pub fn verify_kkt(spec: &ProgramSpec, z: &DVector<f64>, duals: &Duals) -> KktReport {
    let n = spec.n;
    let mut grad = match &spec.objective {
        Objective::Linear { c } => c.clone(),
        Objective::Quadratic { p, q } => p * z + q,
    };
    let mut dual_feas = 0.0_f64;
    let mut comp = 0.0_f64;
    let mut primal = 0.0_f64;

    for (row, &lam) in spec.eq.iter().zip(duals.eq.iter()) {
        grad += lam * &row.a;
        primal = primal.max((row.a.dot(z) - row.b).abs());
    }
    for (row, &lam) in spec.ineq.iter().zip(duals.ineq.iter()) {
        let val = row.a.dot(z) - row.b;
        grad += lam * &row.a;
        dual_feas = dual_feas.max(-lam);
        comp = comp.max((lam * val).abs());
        primal = primal.max(val);
    }
    for (row, &lam) in spec.qineq.iter().zip(duals.qineq.iter()) {
        let val = row.value(z);
        grad += lam * (&row.p * z + &row.q);
        dual_feas = dual_feas.max(-lam);
        comp = comp.max((lam * val).abs());
        primal = primal.max(val);
    }
    if let Some(b) = &spec.bounds {
        for j in 0..n {
            if let Some(lo) = b.lower[j] {
                let lam = duals.lower[j];
                let val = lo - z[j];
                grad[j] -= lam;
                dual_feas = dual_feas.max(-lam);
                comp = comp.max((lam * val).abs());
                primal = primal.max(val);
            }
            if let Some(up) = b.upper[j] {
                let lam = duals.upper[j];
                let val = z[j] - up;
                grad[j] += lam;
                dual_feas = dual_feas.max(-lam);
                comp = comp.max((lam * val).abs());
                primal = primal.max(val);
            }
        }
    }

    KktReport {
        stationarity: math::inf_norm(&grad),
        primal_feasibility: primal.max(0.0),
        dual_feasibility: dual_feas.max(0.0),
        complementarity: comp,
    }
}

// --- canonical form ----------------------------------------------------

#[derive(Clone, Copy)]
enum RowSrc {
    Ineq(usize),
    QIneq(usize),
    Lower(usize),
    Upper(usize),
    /// Phase-1 artifacts; never mapped back.
    Internal,
}

enum Row {
    Lin { a: DVector<f64>, b: f64, src: RowSrc },
    Quad { p: DMatrix<f64>, q: DVector<f64>, r: f64, src: RowSrc },
}

impl Row {
    fn value(&self, z: &DVector<f64>) -> f64 {
        match self {
            Row::Lin { a, b, .. } => a.dot(z) - b,
            Row::Quad { p, q, r, .. } => math::half_quad(p, z) + q.dot(z) + r,
        }
    }

    fn grad(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            Row::Lin { a, .. } => a.clone(),
            Row::Quad { p, q, .. } => p * z + q,
        }
    }

    fn hess(&self) -> Option<&DMatrix<f64>> {
        match self {
            Row::Lin { .. } => None,
            Row::Quad { p, .. } => Some(p),
        }
    }

    fn src(&self) -> RowSrc {
        match self {
            Row::Lin { src, .. } | Row::Quad { src, .. } => *src,
        }
    }
}

struct Canonical {
    n: usize,
    p_obj: Option<DMatrix<f64>>,
    q_obj: DVector<f64>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    rows: Vec<Row>,
    phase1: bool,
}

impl Canonical {
    fn build(spec: &ProgramSpec) -> Self {
        let n = spec.n;
        let (p_obj, q_obj) = match &spec.objective {
            Objective::Linear { c } => (None, c.clone()),
            Objective::Quadratic { p, q } => (Some(math::symmetrize(p)), q.clone()),
        };
        let mut a_eq = DMatrix::zeros(spec.eq.len(), n);
        let mut b_eq = DVector::zeros(spec.eq.len());
        for (k, row) in spec.eq.iter().enumerate() {
            a_eq.row_mut(k).copy_from(&row.a.transpose());
            b_eq[k] = row.b;
        }
        let mut rows = Vec::new();
        for (k, row) in spec.ineq.iter().enumerate() {
            rows.push(Row::Lin {
                a: row.a.clone(),
                b: row.b,
                src: RowSrc::Ineq(k),
            });
        }
        for (k, row) in spec.qineq.iter().enumerate() {
            rows.push(Row::Quad {
                p: math::symmetrize(&row.p),
                q: row.q.clone(),
                r: row.r,
                src: RowSrc::QIneq(k),
            });
        }
        if let Some(b) = &spec.bounds {
            for j in 0..n {
                if let Some(lo) = b.lower[j] {
                    let mut a = DVector::zeros(n);
                    a[j] = -1.0;
                    rows.push(Row::Lin {
                        a,
                        b: -lo,
                        src: RowSrc::Lower(j),
                    });
                }
                if let Some(up) = b.upper[j] {
                    let mut a = DVector::zeros(n);
                    a[j] = 1.0;
                    rows.push(Row::Lin {
                        a,
                        b: up,
                        src: RowSrc::Upper(j),
                    });
                }
            }
        }
        Canonical {
            n,
            p_obj,
            q_obj,
            a_eq,
            b_eq,
            rows,
            phase1: false,
        }
    }

    fn objective_value(&self, z: &DVector<f64>) -> f64 {
        let mut v = self.q_obj.dot(z);
        if let Some(p) = &self.p_obj {
            v += math::half_quad(p, z);
        }
        v
    }

    fn has_quad_rows(&self) -> bool {
        self.rows.iter().any(|r| matches!(r, Row::Quad { .. }))
    }

    /// Worst true primal violation at `z`.
    fn primal_violation(&self, z: &DVector<f64>) -> f64 {
        let mut worst = 0.0_f64;
        if self.a_eq.nrows() > 0 {
            worst = math::inf_norm(&(&self.a_eq * z - &self.b_eq));
        }
        for row in &self.rows {
            worst = worst.max(row.value(z));
        }
        worst
    }

    fn solve(
        &self,
        tol: &SolverTolerances,
        z0: Option<&DVector<f64>>,
        allow_phase1: bool,
    ) -> SolveOutcome {
        if self.rows.is_empty() {
            return self.solve_equality_only(tol);
        }
        let outcome = self.ipm(tol, z0);
        if outcome.status == SolveStatus::Optimal || !allow_phase1 || self.phase1 {
            return outcome;
        }
        // Could not converge: decide between "genuinely infeasible" and
        // "solver ran out of budget" with a phase-1 run.
        match self.classify_infeasibility(tol) {
            Some(true) => SolveOutcome {
                status: SolveStatus::Infeasible,
                message: Some("phase-1 optimum is positive".to_string()),
                ..outcome
            },
            Some(false) | None => outcome,
        }
    }

    /// No inequality rows: the KKT system is linear.
    fn solve_equality_only(&self, _tol: &SolverTolerances) -> SolveOutcome {
        let n = self.n;
        let p = self.a_eq.nrows();
        let mut kkt = DMatrix::zeros(n + p, n + p);
        if let Some(pm) = &self.p_obj {
            kkt.view_mut((0, 0), (n, n)).copy_from(pm);
        }
        for i in 0..n {
            kkt[(i, i)] += 1e-12;
        }
        if p > 0 {
            kkt.view_mut((0, n), (n, p)).copy_from(&self.a_eq.transpose());
            kkt.view_mut((n, 0), (p, n)).copy_from(&self.a_eq);
            for i in 0..p {
                kkt[(n + i, n + i)] = -1e-12;
            }
        }
        let mut rhs = DVector::zeros(n + p);
        rhs.rows_mut(0, n).copy_from(&(-&self.q_obj));
        if p > 0 {
            rhs.rows_mut(n, p).copy_from(&self.b_eq);
        }
        let lu = kkt.lu();
        let sol = match lu.solve(&rhs) {
            Some(s) if math::all_finite(s.as_slice()) => s,
            _ => {
                return SolveOutcome::failed(
                    SolveStatus::NumericalFailure,
                    0,
                    "singular unconstrained KKT system",
                )
            }
        };
        let z = DVector::from(sol.rows(0, n));
        let nu = DVector::from(sol.rows(n, p));
        // A linear objective without constraints is unbounded unless the
        // stationarity condition happens to hold.
        let grad = match &self.p_obj {
            Some(pm) => pm * &z + &self.q_obj + self.a_eq.transpose() * &nu,
            None => self.q_obj.clone() + self.a_eq.transpose() * &nu,
        };
        if math::inf_norm(&grad) > 1e-6 * (1.0 + math::inf_norm(&self.q_obj)) {
            return SolveOutcome::failed(
                SolveStatus::NumericalFailure,
                0,
                "stationarity unattainable (problem unbounded or singular)",
            );
        }
        let violation = self.primal_violation(&z);
        SolveOutcome {
            status: SolveStatus::Optimal,
            objective_value: self.objective_value(&z),
            max_violation: violation,
            z: Some(z),
            iterations: 0,
            duals: Some(Duals {
                eq: nu,
                ineq: DVector::zeros(0),
                qineq: DVector::zeros(0),
                lower: DVector::zeros(n),
                upper: DVector::zeros(n),
            }),
            message: None,
        }
    }

    #[allow(clippy::too_many_lines)]
    fn ipm(&self, tol: &SolverTolerances, z0: Option<&DVector<f64>>) -> SolveOutcome {
        let n = self.n;
        let p = self.a_eq.nrows();
        let m = self.rows.len();
        let quad = self.has_quad_rows();
        let dscale = 1.0 + math::inf_norm(&self.q_obj);

        let mut z = z0.cloned().unwrap_or_else(|| DVector::zeros(n));
        if !math::all_finite(z.as_slice()) {
            z = DVector::zeros(n);
        }
        let mut f: Vec<f64> = self.rows.iter().map(|r| r.value(&z)).collect();
        let mut grads: Vec<DVector<f64>> = self.rows.iter().map(|r| r.grad(&z)).collect();
        let mut s = DVector::from_fn(m, |i, _| (-f[i]).max(1.0));
        let mut lam = DVector::from_element(m, 1.0);
        let mut nu = DVector::zeros(p);

        let mut iterations = 0;
        let mut tiny_steps = 0;

        for iter in 0..tol.max_iter {
            iterations = iter + 1;

            // True KKT residuals at the current point.
            let mut r_dual = self.q_obj.clone();
            if let Some(pm) = &self.p_obj {
                r_dual += pm * &z;
            }
            for i in 0..m {
                r_dual += lam[i] * &grads[i];
            }
            if p > 0 {
                r_dual += self.a_eq.transpose() * &nu;
            }
            let r_eq = if p > 0 {
                &self.a_eq * &z - &self.b_eq
            } else {
                DVector::zeros(0)
            };
            let r_in = DVector::from_fn(m, |i, _| f[i] + s[i]);
            let mu = s.dot(&lam) / m as f64;

            let pfeas = {
                let mut v = if p > 0 { math::inf_norm(&r_eq) } else { 0.0 };
                for &fi in &f {
                    v = v.max(fi);
                }
                v
            };
            let drift = math::inf_norm(&r_in);
            let dres = math::inf_norm(&r_dual);
            let objscale = 1.0 + self.objective_value(&z).abs();

            if pfeas <= tol.feas
                && drift <= 10.0 * tol.feas
                && dres <= 1e-2 * tol.kkt * dscale
                && mu <= 1e-3 * tol.kkt * objscale
            {
                return self.finish_optimal(z, s, lam, nu, iterations);
            }

            // Suspected infeasibility: complementarity collapsed while the
            // primal residual is stuck, or the duals are diverging.
            if mu < 1e-12 && pfeas > tol.feas {
                break;
            }
            if mu > 1e14 || lam.amax() > 1e14 {
                break;
            }
            if !math::all_finite(z.as_slice())
                || !math::all_finite(s.as_slice())
                || !math::all_finite(lam.as_slice())
            {
                return SolveOutcome::failed(
                    SolveStatus::NumericalFailure,
                    iterations,
                    "iterates became non-finite",
                );
            }

            // Newton matrix: Lagrangian Hessian plus the diagonal scaling of
            // the eliminated slack/multiplier block.
            let mut big_m = DMatrix::zeros(n, n);
            if let Some(pm) = &self.p_obj {
                big_m.copy_from(pm);
            }
            for i in 0..m {
                if let Some(h) = self.rows[i].hess() {
                    big_m += lam[i] * h;
                }
            }
            for i in 0..m {
                let w = lam[i] / s[i];
                let g = &grads[i];
                for a in 0..n {
                    if g[a] == 0.0 {
                        continue;
                    }
                    for b in 0..n {
                        big_m[(a, b)] += w * g[a] * g[b];
                    }
                }
            }
            let scale = (0..n).fold(1.0_f64, |acc, i| acc.max(big_m[(i, i)].abs()));

            // Assemble and factor the (regularized) KKT system once per
            // iteration; predictor and corrector reuse the factorization.
            let mut lu = None;
            for delta_rel in [1e-13, 1e-10, 1e-7] {
                let delta = delta_rel * scale;
                let mut kkt = DMatrix::zeros(n + p, n + p);
                kkt.view_mut((0, 0), (n, n)).copy_from(&big_m);
                for i in 0..n {
                    kkt[(i, i)] += delta;
                }
                if p > 0 {
                    kkt.view_mut((0, n), (n, p)).copy_from(&self.a_eq.transpose());
                    kkt.view_mut((n, 0), (p, n)).copy_from(&self.a_eq);
                    for i in 0..p {
                        kkt[(n + i, n + i)] = -delta.max(1e-12);
                    }
                }
                let fact = kkt.clone().lu();
                // Probe the factorization with a solve.
                let probe = fact.solve(&DVector::from_element(n + p, 1.0));
                if probe.map(|v| math::all_finite(v.as_slice())).unwrap_or(false) {
                    lu = Some((fact, kkt));
                    break;
                }
            }
            let Some((lu, kkt)) = lu else {
                return SolveOutcome::failed(
                    SolveStatus::NumericalFailure,
                    iterations,
                    "KKT factorization failed",
                );
            };

            let newton = |rc: &DVector<f64>| -> Option<Directions> {
                let mut rhs = DVector::zeros(n + p);
                let mut top = -r_dual.clone();
                for i in 0..m {
                    top -= ((lam[i] * r_in[i] - rc[i]) / s[i]) * &grads[i];
                }
                rhs.rows_mut(0, n).copy_from(&top);
                if p > 0 {
                    rhs.rows_mut(n, p).copy_from(&(-&r_eq));
                }
                let mut sol = lu.solve(&rhs)?;
                // One step of iterative refinement.
                let res = &rhs - &kkt * &sol;
                if let Some(corr) = lu.solve(&res) {
                    sol += corr;
                }
                if !math::all_finite(sol.as_slice()) {
                    return None;
                }
                let dz = DVector::from(sol.rows(0, n));
                let dnu = DVector::from(sol.rows(n, p));
                let mut ds = DVector::zeros(m);
                let mut dlam = DVector::zeros(m);
                for i in 0..m {
                    ds[i] = -r_in[i] - grads[i].dot(&dz);
                    dlam[i] = -(rc[i] + lam[i] * ds[i]) / s[i];
                }
                Some(Directions { dz, ds, dlam, dnu })
            };

            // Predictor (affine scaling direction).
            let rc_aff = DVector::from_fn(m, |i, _| s[i] * lam[i]);
            let Some(aff) = newton(&rc_aff) else {
                return SolveOutcome::failed(
                    SolveStatus::NumericalFailure,
                    iterations,
                    "Newton solve failed",
                );
            };
            let ap_aff = max_step(&s, &aff.ds).min(1.0);
            let ad_aff = max_step(&lam, &aff.dlam).min(1.0);
            let mu_aff = (0..m)
                .map(|i| (s[i] + ap_aff * aff.ds[i]) * (lam[i] + ad_aff * aff.dlam[i]))
                .sum::<f64>()
                / m as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(1e-9, 1.0);

            // Corrector.
            let rc = DVector::from_fn(m, |i, _| {
                s[i] * lam[i] + aff.ds[i] * aff.dlam[i] - sigma * mu
            });
            let Some(dir) = newton(&rc) else {
                return SolveOutcome::failed(
                    SolveStatus::NumericalFailure,
                    iterations,
                    "Newton solve failed",
                );
            };

            let eta = if mu < 1e-5 { 0.999 } else { 0.99 };
            let mut alpha_p = (eta * max_step(&s, &dir.ds)).min(1.0);
            let mut alpha_d = (eta * max_step(&lam, &dir.dlam)).min(1.0);
            if quad {
                // Nonlinear rows: keep primal and dual in lockstep so the
                // Lagrangian Hessian stays consistent.
                let a = alpha_p.min(alpha_d);
                alpha_p = a;
                alpha_d = a;
            }
            if alpha_p < 1e-13 && alpha_d < 1e-13 {
                tiny_steps += 1;
                if tiny_steps >= 3 {
                    break;
                }
            } else {
                tiny_steps = 0;
            }

            z += alpha_p * &dir.dz;
            s += alpha_p * &dir.ds;
            lam += alpha_d * &dir.dlam;
            nu += alpha_d * &dir.dnu;

            for i in 0..m {
                f[i] = self.rows[i].value(&z);
            }
            for (i, row) in self.rows.iter().enumerate() {
                if matches!(row, Row::Quad { .. }) {
                    grads[i] = row.grad(&z);
                }
            }
        }

        // Budget exhausted: accept if the plain tolerances hold.
        let pfeas = self.primal_violation(&z);
        let mut r_dual = self.q_obj.clone();
        if let Some(pm) = &self.p_obj {
            r_dual += pm * &z;
        }
        for i in 0..m {
            r_dual += lam[i] * &grads[i];
        }
        if p > 0 {
            r_dual += self.a_eq.transpose() * &nu;
        }
        let comp = (0..m).fold(0.0_f64, |acc, i| acc.max((lam[i] * f[i]).abs()));
        let objscale = 1.0 + self.objective_value(&z).abs();
        if pfeas <= tol.feas
            && math::inf_norm(&r_dual) <= tol.kkt * dscale
            && comp <= tol.kkt * objscale
        {
            return self.finish_optimal(z, s, lam, nu, iterations);
        }
        SolveOutcome::failed(
            SolveStatus::MaxIterations,
            iterations,
            format!("no convergence (primal violation {pfeas:.3e})"),
        )
    }

    fn finish_optimal(
        &self,
        z: DVector<f64>,
        _s: DVector<f64>,
        lam: DVector<f64>,
        nu: DVector<f64>,
        iterations: usize,
    ) -> SolveOutcome {
        let n = self.n;
        let mut duals = Duals {
            eq: nu,
            ineq: DVector::zeros(count_src(&self.rows, |s| matches!(s, RowSrc::Ineq(_)))),
            qineq: DVector::zeros(count_src(&self.rows, |s| matches!(s, RowSrc::QIneq(_)))),
            lower: DVector::zeros(n),
            upper: DVector::zeros(n),
        };
        for (i, row) in self.rows.iter().enumerate() {
            match row.src() {
                RowSrc::Ineq(k) => duals.ineq[k] = lam[i],
                RowSrc::QIneq(k) => duals.qineq[k] = lam[i],
                RowSrc::Lower(j) => duals.lower[j] = lam[i],
                RowSrc::Upper(j) => duals.upper[j] = lam[i],
                RowSrc::Internal => {}
            }
        }
        SolveOutcome {
            status: SolveStatus::Optimal,
            objective_value: self.objective_value(&z),
            max_violation: self.primal_violation(&z).max(0.0),
            z: Some(z),
            iterations,
            duals: Some(duals),
            message: None,
        }
    }

    /// Phase-1: minimize `t` subject to `F_i(z) <= t`, `Az = b`, `t >= -1`.
    /// A positive optimum certifies an empty feasible region.
    fn classify_infeasibility(&self, tol: &SolverTolerances) -> Option<bool> {
        let n = self.n;
        let p = self.a_eq.nrows();

        // Inconsistent equalities are already a certificate.
        let z_eq = if p > 0 {
            let svd = nalgebra::SVD::new(self.a_eq.clone(), true, true);
            let sol = svd.solve(&self.b_eq, 1e-12).ok()?;
            let res = math::inf_norm(&(&self.a_eq * &sol - &self.b_eq));
            if res > 1e-6 * (1.0 + math::inf_norm(&self.b_eq)) {
                return Some(true);
            }
            sol
        } else {
            DVector::zeros(n)
        };

        let mut c = DVector::zeros(n + 1);
        c[n] = 1.0;
        let mut rows = Vec::with_capacity(self.rows.len() + 1);
        for row in &self.rows {
            rows.push(match row {
                Row::Lin { a, b, .. } => {
                    let mut a2 = DVector::zeros(n + 1);
                    a2.rows_mut(0, n).copy_from(a);
                    a2[n] = -1.0;
                    Row::Lin {
                        a: a2,
                        b: *b,
                        src: RowSrc::Internal,
                    }
                }
                Row::Quad { p: pm, q, r, .. } => {
                    let mut p2 = DMatrix::zeros(n + 1, n + 1);
                    p2.view_mut((0, 0), (n, n)).copy_from(pm);
                    let mut q2 = DVector::zeros(n + 1);
                    q2.rows_mut(0, n).copy_from(q);
                    q2[n] = -1.0;
                    Row::Quad {
                        p: p2,
                        q: q2,
                        r: *r,
                        src: RowSrc::Internal,
                    }
                }
            });
        }
        // Keep the objective bounded below.
        let mut tmin = DVector::zeros(n + 1);
        tmin[n] = -1.0;
        rows.push(Row::Lin {
            a: tmin,
            b: 1.0,
            src: RowSrc::Internal,
        });
        let mut a_eq = DMatrix::zeros(p, n + 1);
        if p > 0 {
            a_eq.view_mut((0, 0), (p, n)).copy_from(&self.a_eq);
        }

        let aux = Canonical {
            n: n + 1,
            p_obj: None,
            q_obj: c,
            a_eq,
            b_eq: self.b_eq.clone(),
            rows,
            phase1: true,
        };
        let mut z0 = DVector::zeros(n + 1);
        z0.rows_mut(0, n).copy_from(&z_eq);
        z0[n] = self
            .rows
            .iter()
            .map(|r| r.value(&z_eq))
            .fold(1.0_f64, f64::max)
            + 1.0;
        let out = aux.solve(tol, Some(&z0), false);
        match (out.status, out.z) {
            (SolveStatus::Optimal, Some(z)) => Some(z[n] > 100.0 * tol.feas),
            _ => None,
        }
    }
}

struct Directions {
    dz: DVector<f64>,
    ds: DVector<f64>,
    dlam: DVector<f64>,
    dnu: DVector<f64>,
}

/// Largest step keeping `v + alpha dv` strictly positive (before the
/// fraction-to-boundary factor).
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..v.len() {
        if dv[i] < 0.0 {
            alpha = alpha.min(-v[i] / dv[i]);
        }
    }
    alpha
}

fn count_src(rows: &[Row], pred: impl Fn(&RowSrc) -> bool) -> usize {
    let mut max_k = 0;
    let mut any = false;
    for row in rows {
        let src = row.src();
        if pred(&src) {
            any = true;
            let k = match src {
                RowSrc::Ineq(k) | RowSrc::QIneq(k) => k,
                _ => 0,
            };
            max_k = max_k.max(k);
        }
    }
    if any {
        max_k + 1
    } else {
        0
    }
}

/// Convenience used by tests and the engine: solve and insist on a point.
pub fn solve_expect_point(spec: &ProgramSpec, tol: &SolverTolerances) -> Result<DVector<f64>> {
    let out = solve(spec, tol);
    out.z.ok_or_else(|| {
        crate::error::Error::input(format!(
            "solver returned {} ({})",
            out.status,
            out.message.unwrap_or_default()
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::{LinearRow, QuadRow};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tols() -> SolverTolerances {
        SolverTolerances::default()
    }

    #[test]
    fn lp_simple_bound() {
        // minimize z1 s.t. z1 >= 1
        let mut spec = ProgramSpec::linear(1, DVector::from_vec(vec![1.0]));
        spec.ineq.push(LinearRow {
            a: DVector::from_vec(vec![-1.0]),
            b: -1.0,
        });
        let out = solve(&spec, &tols());
        assert_eq!(out.status, SolveStatus::Optimal);
        let z = out.z.unwrap();
        assert!((z[0] - 1.0).abs() < 1e-7, "z = {}", z[0]);
    }

    #[test]
    fn qp_clipped_by_active_constraint() {
        // minimize 1/2 z'z - (3,0)'z s.t. z1 <= 1 -> z = (1,0), objective -2.5
        let mut spec = ProgramSpec::quadratic(
            2,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-3.0, 0.0]),
        );
        spec.ineq.push(LinearRow {
            a: DVector::from_vec(vec![1.0, 0.0]),
            b: 1.0,
        });
        let out = solve(&spec, &tols());
        assert_eq!(out.status, SolveStatus::Optimal);
        let z = out.z.as_ref().unwrap();
        assert!((z[0] - 1.0).abs() < 1e-7);
        assert!(z[1].abs() < 1e-7);
        assert!((out.objective_value + 2.5).abs() < 1e-7);

        let report = verify_kkt(&spec, z, out.duals.as_ref().unwrap());
        assert!(report.max_residual() <= 1e-6, "{report:?}");
    }

    #[test]
    fn qcqp_projects_onto_disc() {
        // minimize 1/2||z-(3,0)||^2 s.t. 1/2 z'z - 0.5 <= 0 -> z = (1,0)
        let mut spec = ProgramSpec::quadratic(
            2,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-3.0, 0.0]),
        );
        spec.qineq.push(QuadRow {
            p: DMatrix::identity(2, 2),
            q: DVector::zeros(2),
            r: -0.5,
        });
        let out = solve(&spec, &tols());
        assert_eq!(out.status, SolveStatus::Optimal);
        let z = out.z.unwrap();
        assert!((z[0] - 1.0).abs() < 1e-6, "z = {z:?}");
        assert!(z[1].abs() < 1e-6);
    }

    #[test]
    fn infeasible_lp_is_certified() {
        // z1 <= 0 and z1 >= 1
        let mut spec = ProgramSpec::linear(1, DVector::from_vec(vec![1.0]));
        spec.ineq.push(LinearRow {
            a: DVector::from_vec(vec![1.0]),
            b: 0.0,
        });
        spec.ineq.push(LinearRow {
            a: DVector::from_vec(vec![-1.0]),
            b: -1.0,
        });
        let out = solve(&spec, &tols());
        assert_eq!(out.status, SolveStatus::Infeasible);
    }

    #[test]
    fn kkt_flags_a_perturbed_point() {
        let mut spec = ProgramSpec::quadratic(
            2,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-3.0, 0.0]),
        );
        spec.ineq.push(LinearRow {
            a: DVector::from_vec(vec![1.0, 0.0]),
            b: 1.0,
        });
        let out = solve(&spec, &tols());
        let z = out.z.unwrap() + DVector::from_vec(vec![0.1, 0.0]);
        let report = verify_kkt(&spec, &z, out.duals.as_ref().unwrap());
        assert!(report.primal_feasibility >= 0.09, "{report:?}");
    }

    #[test]
    fn unconstrained_quadratic_is_exact() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let q = DVector::from_vec(vec![1.0, -2.0]);
        let spec = ProgramSpec::quadratic(2, p.clone(), q.clone());
        let out = solve(&spec, &tols());
        assert_eq!(out.status, SolveStatus::Optimal);
        let z = out.z.unwrap();
        let report = verify_kkt(
            &spec,
            &z,
            &Duals {
                eq: DVector::zeros(0),
                ineq: DVector::zeros(0),
                qineq: DVector::zeros(0),
                lower: DVector::zeros(2),
                upper: DVector::zeros(2),
            },
        );
        assert!(report.stationarity <= 1e-10, "{report:?}");
    }

    #[test]
    fn equality_rows_pin_variables() {
        let mut spec = ProgramSpec::quadratic(
            2,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-3.0, -4.0]),
        );
        spec.eq.push(LinearRow {
            a: DVector::from_vec(vec![1.0, 0.0]),
            b: 0.5,
        });
        spec.ineq.push(LinearRow {
            a: DVector::from_vec(vec![0.0, 1.0]),
            b: 10.0,
        });
        let out = solve(&spec, &tols());
        assert_eq!(out.status, SolveStatus::Optimal);
        let z = out.z.unwrap();
        assert!((z[0] - 0.5).abs() < 1e-8);
        assert!((z[1] - 4.0).abs() < 1e-7);
    }

    #[test]
    fn bounds_are_respected() {
        let mut spec = ProgramSpec::linear(2, DVector::from_vec(vec![1.0, 1.0]));
        spec.set_lower(0, -0.25);
        spec.set_lower(1, 2.0);
        spec.set_upper(1, 5.0);
        let out = solve(&spec, &tols());
        assert_eq!(out.status, SolveStatus::Optimal);
        let z = out.z.unwrap();
        assert!((z[0] + 0.25).abs() < 1e-7);
        assert!((z[1] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn max_iterations_reported_when_budget_is_one() {
        let mut spec = ProgramSpec::quadratic(
            2,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-3.0, 0.0]),
        );
        spec.ineq.push(LinearRow {
            a: DVector::from_vec(vec![1.0, 0.0]),
            b: 1.0,
        });
        let tiny = SolverTolerances {
            max_iter: 1,
            ..SolverTolerances::default()
        };
        let canon = Canonical::build(&spec);
        let out = canon.ipm(&tiny, None);
        assert_eq!(out.status, SolveStatus::MaxIterations);
    }

    #[test]
    fn objective_invariant_under_row_permutation() {
        let mut spec = ProgramSpec::quadratic(
            2,
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-1.0, -2.0]),
        );
        spec.ineq.push(LinearRow {
            a: DVector::from_vec(vec![1.0, 1.0]),
            b: 1.0,
        });
        spec.ineq.push(LinearRow {
            a: DVector::from_vec(vec![1.0, -1.0]),
            b: 0.5,
        });
        spec.ineq.push(LinearRow {
            a: DVector::from_vec(vec![-1.0, 0.0]),
            b: 2.0,
        });
        let a = solve(&spec, &tols());
        spec.ineq.reverse();
        let b = solve(&spec, &tols());
        assert!((a.objective_value - b.objective_value).abs() < 1e-9);
    }

    #[test]
    fn planted_qp_suite_recovers_optima() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..20 {
            let n = 2 + rng.random_range(0..4);
            let f = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
            let p = f.transpose() * &f + DMatrix::identity(n, n) * 0.5;
            let z_star = DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0);

            // Half the rows active with positive multipliers, half slack.
            let m_rows = n + 2;
            let mut rows = Vec::new();
            let mut stat = &p * &z_star;
            for k in 0..m_rows {
                let a = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
                if k < n / 2 + 1 {
                    // Active at z* with a strictly positive multiplier.
                    let lam = 0.5 + rng.random::<f64>();
                    stat += lam * &a;
                    let b = a.dot(&z_star);
                    rows.push(LinearRow { a, b });
                } else {
                    let b = a.dot(&z_star) + 0.1 + rng.random::<f64>();
                    rows.push(LinearRow { a, b });
                }
            }
            let q = -stat;
            let mut spec = ProgramSpec::quadratic(n, p.clone(), q.clone());
            spec.ineq = rows;

            let expected = 0.5 * (&p * &z_star).dot(&z_star) + q.dot(&z_star);
            let out = solve(&spec, &tols());
            assert_eq!(out.status, SolveStatus::Optimal, "case {case}");
            assert!(
                (out.objective_value - expected).abs() <= 1e-6,
                "case {case}: {} vs {}",
                out.objective_value,
                expected
            );
        }
    }

    #[test]
    fn degenerate_constant_violation_is_infeasible() {
        // 0'z <= -eps can never hold.
        let mut spec = ProgramSpec::linear(2, DVector::from_vec(vec![0.0, 0.0]));
        spec.ineq.push(LinearRow {
            a: DVector::zeros(2),
            b: -1e-4,
        });
        spec.set_lower(0, -1.0);
        spec.set_upper(0, 1.0);
        let out = solve(&spec, &tols());
        assert_eq!(out.status, SolveStatus::Infeasible);
    }
}
