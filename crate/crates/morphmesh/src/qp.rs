//! Dense convex quadratic programming:
//!
//! ```text
//! minimize   1/2 x' H x + g' x
//! subject to b_lo <= x <= b_hi          (per-variable box)
//!            l    <= A x <= u           (general two-sided rows)
//! ```
//!
//! solved by operator splitting (ADMM) with a fixed penalty, followed by an
//! active-set polish step that solves the equality-constrained KKT system of
//! the detected active rows. The polish drives stationarity to rounding
//! level when the active set is identified correctly; when its output is
//! not feasible it is discarded and the ADMM iterate stands. Box bounds are
//! satisfied exactly on return (final clamp). Everything is deterministic:
//! no randomization, fixed iteration order, optional warm start.
//!
//! The controller uses this for motor-rate selection, where the box is the
//! velocity limit and the general rows are range-of-motion constraints;
//! `x = 0` is always strictly feasible there, which keeps the solver in its
//! comfortable regime.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("QP did not converge in {iterations} iterations (primal {primal:.3e}, stationarity {stationarity:.3e})")]
    MaxIterations {
        iterations: usize,
        primal: f64,
        stationarity: f64,
    },
    #[error("malformed QP: {0}")]
    BadProblem(String),
}

/// Problem data. `rows` may have zero rows; bounds with `lower == upper`
/// encode equalities.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub rows: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub box_lower: DVector<f64>,
    pub box_upper: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub max_iter: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// ADMM penalty (fixed).
    pub rho: f64,
    /// Proximal regularization on the x update.
    pub sigma: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            eps_abs: 1e-8,
            eps_rel: 1e-9,
            rho: 0.1,
            sigma: 1e-6,
        }
    }
}

/// Converged output with its certificates.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the stacked constraints (box rows first, then
    /// general rows); useful for warm-starting the next solve.
    pub multipliers: DVector<f64>,
    pub iterations: usize,
    /// `max |stacked_row_i(x) - clamp(stacked_row_i(x))|` at return.
    pub primal_residual: f64,
    /// `||H x + g + A' y||_inf` at return.
    pub stationarity: f64,
    pub polished: bool,
}

/// Warm-start data, typically `(previous x, previous multipliers)`.
pub type WarmStart<'a> = (&'a DVector<f64>, &'a DVector<f64>);

fn validate(p: &QpProblem) -> Result<(), QpError> {
    let n = p.gradient.len();
    if p.hessian.nrows() != n || p.hessian.ncols() != n {
        return Err(QpError::BadProblem(format!(
            "hessian is {}x{}, gradient has length {n}",
            p.hessian.nrows(),
            p.hessian.ncols()
        )));
    }
    let sym_err = (&p.hessian - p.hessian.transpose()).abs().max();
    if sym_err > 1e-10 {
        return Err(QpError::BadProblem(format!(
            "hessian asymmetry {sym_err:.3e} exceeds 1e-10"
        )));
    }
    if p.rows.nrows() != p.lower.len() || p.rows.nrows() != p.upper.len() {
        return Err(QpError::BadProblem(
            "row bounds do not match row count".into(),
        ));
    }
    if p.rows.nrows() > 0 && p.rows.ncols() != n {
        return Err(QpError::BadProblem(
            "row matrix width does not match variable count".into(),
        ));
    }
    if p.box_lower.len() != n || p.box_upper.len() != n {
        return Err(QpError::BadProblem("box bounds must cover every variable".into()));
    }
    for i in 0..p.rows.nrows() {
        if !(p.lower[i] <= p.upper[i]) {
            return Err(QpError::BadProblem(format!(
                "row {i} has lower {} > upper {}",
                p.lower[i], p.upper[i]
            )));
        }
    }
    for i in 0..n {
        if !(p.box_lower[i] <= p.box_upper[i]) {
            return Err(QpError::BadProblem(format!(
                "variable {i} has box lower {} > upper {}",
                p.box_lower[i], p.box_upper[i]
            )));
        }
    }
    Ok(())
}

/// Stacked constraint view: identity block for the box, then general rows.
struct Stacked<'a> {
    p: &'a QpProblem,
    m: usize,
}

impl<'a> Stacked<'a> {
    fn new(p: &'a QpProblem) -> Self {
        Self {
            p,
            m: p.gradient.len() + p.rows.nrows(),
        }
    }

    fn lo(&self, i: usize) -> f64 {
        let n = self.p.gradient.len();
        if i < n {
            self.p.box_lower[i]
        } else {
            self.p.lower[i - n]
        }
    }

    fn hi(&self, i: usize) -> f64 {
        let n = self.p.gradient.len();
        if i < n {
            self.p.box_upper[i]
        } else {
            self.p.upper[i - n]
        }
    }

    /// `out = A x` over the stacked rows.
    fn mul(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        let n = self.p.gradient.len();
        out.rows_mut(0, n).copy_from(x);
        if self.p.rows.nrows() > 0 {
            out.rows_mut(n, self.p.rows.nrows())
                .copy_from(&(&self.p.rows * x));
        }
    }

    /// `A' y` over the stacked rows.
    fn tr_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        let n = self.p.gradient.len();
        let mut out = y.rows(0, n).clone_owned();
        if self.p.rows.nrows() > 0 {
            out += self.p.rows.transpose() * y.rows(n, self.p.rows.nrows());
        }
        out
    }
}

/// Solves the QP. `warm_start` carries `(x, multipliers)` from a previous
/// related solve; pass `None` to start cold at zero.
pub fn solve_qp(
    problem: &QpProblem,
    settings: &QpSettings,
    warm_start: Option<WarmStart<'_>>,
) -> Result<QpSolution, QpError> {
    validate(problem)?;
    let n = problem.gradient.len();
    let m_rows = problem.rows.nrows();

    // Row equilibration: general rows are normalized to unit infinity
    // norm. Range-of-motion rows carry a factor of dt and can sit several
    // decades below the identity box rows; a fixed-penalty splitting
    // method stalls badly on that spread. Scaling row i by 1/d_i scales
    // its multiplier by d_i and leaves the solution unchanged.
    let mut d = DVector::from_element(m_rows, 1.0);
    let mut scaled = problem.clone();
    for r in 0..m_rows {
        let norm = problem.rows.row(r).amax();
        if norm > 0.0 && norm.is_finite() {
            let s = norm.clamp(1e-10, 1e10);
            d[r] = s;
            scaled.rows.row_mut(r).apply(|v| *v /= s);
            scaled.lower[r] /= s;
            scaled.upper[r] /= s;
        }
    }
    let stacked = Stacked::new(&scaled);
    let m = stacked.m;
    let (rho, sigma) = (settings.rho, settings.sigma);

    // KKT matrix of the x update: H + sigma I + rho A'A, factored once.
    let mut kkt = scaled.hessian.clone();
    for i in 0..n {
        kkt[(i, i)] += sigma + rho; // identity block of the stacked A
    }
    if scaled.rows.nrows() > 0 {
        kkt += rho * scaled.rows.transpose() * &scaled.rows;
    }
    let chol = kkt
        .cholesky()
        .ok_or_else(|| QpError::BadProblem("hessian is not positive semidefinite".into()))?;

    let mut x = match warm_start {
        Some((x0, _)) if x0.len() == n => x0.clone(),
        _ => DVector::zeros(n),
    };
    // Multipliers are stored and returned in the original row scaling;
    // the iteration works on the scaled rows.
    let mut y = match warm_start {
        Some((_, y0)) if y0.len() == m => {
            let mut y = y0.clone();
            for r in 0..m_rows {
                y[n + r] *= d[r];
            }
            y
        }
        _ => DVector::zeros(m),
    };
    let mut v = DVector::zeros(m); // A x
    stacked.mul(&x, &mut v);
    let mut z = v.clone();
    for i in 0..m {
        z[i] = z[i].clamp(stacked.lo(i), stacked.hi(i));
    }

    // Per-row gap in ORIGINAL units, so the tolerance keeps its meaning.
    let gap_scale = |i: usize| if i < n { 1.0 } else { d[i - n] };

    let mut iterations = 0;
    let mut converged = false;
    while iterations < settings.max_iter {
        iterations += 1;
        // x update: (H + sigma I + rho A'A) x = sigma x - g + A'(rho z - y)
        let mut rhs = stacked.tr_mul(&(rho * &z - &y));
        rhs.axpy(sigma, &x, 1.0);
        rhs -= &scaled.gradient;
        x = chol.solve(&rhs);
        stacked.mul(&x, &mut v);
        // z update (projection) and dual ascent.
        let mut primal = 0.0f64;
        for i in 0..m {
            let zi = (v[i] + y[i] / rho).clamp(stacked.lo(i), stacked.hi(i));
            z[i] = zi;
            y[i] += rho * (v[i] - zi);
            primal = primal.max((v[i] - zi).abs() * gap_scale(i));
        }
        // Convergence: primal gap and true stationarity. The scaled-row
        // transpose product equals the original one because the
        // multipliers carry the inverse factor.
        if iterations % 25 == 0 || primal <= settings.eps_abs {
            let station = (&scaled.hessian * &x + &scaled.gradient + stacked.tr_mul(&y))
                .abs()
                .max();
            let scale = x.abs().max().max(1.0);
            let eps_p = settings.eps_abs + settings.eps_rel * scale;
            let eps_d = settings.eps_abs + settings.eps_rel * scale;
            if primal <= eps_p && station <= eps_d {
                converged = true;
                break;
            }
        }
    }

    // Back to original row scaling for everything the caller sees.
    for r in 0..m_rows {
        y[n + r] /= d[r];
    }
    let stacked = Stacked::new(problem);

    if !converged {
        let station = (&problem.hessian * &x + &problem.gradient + stacked.tr_mul(&y))
            .abs()
            .max();
        let mut primal = 0.0f64;
        stacked.mul(&x, &mut v);
        for i in 0..m {
            primal = primal.max((v[i] - v[i].clamp(stacked.lo(i), stacked.hi(i))).abs());
        }
        return Err(QpError::MaxIterations {
            iterations,
            primal,
            stationarity: station,
        });
    }

    // Active-set polish: equality-solve the rows the multipliers flag.
    let mut polished = false;
    if let Some((px, py)) = polish(problem, &stacked, &x, &y) {
        x = px;
        y = py;
        polished = true;
    }

    // Exact box satisfaction.
    for i in 0..n {
        x[i] = x[i].clamp(problem.box_lower[i], problem.box_upper[i]);
    }

    stacked.mul(&x, &mut v);
    let mut primal = 0.0f64;
    for i in 0..m {
        primal = primal.max((v[i] - v[i].clamp(stacked.lo(i), stacked.hi(i))).abs());
    }
    let stationarity = (&problem.hessian * &x + &problem.gradient + stacked.tr_mul(&y))
        .abs()
        .max();
    Ok(QpSolution {
        x,
        multipliers: y,
        iterations,
        primal_residual: primal,
        stationarity,
        polished,
    })
}

/// Solves the KKT system of the active rows. Returns `None` when the
/// polished point is not feasible or the KKT system is singular, in which
/// case the caller keeps the ADMM iterate.
fn polish(
    problem: &QpProblem,
    stacked: &Stacked<'_>,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    const ACTIVE_TOL: f64 = 1e-9;
    const FEAS_SLACK: f64 = 1e-9;
    let n = problem.gradient.len();
    let m = stacked.m;

    // A row is active at the bound its multiplier sign points to, or when
    // it encodes an equality.
    let mut active: Vec<(usize, f64)> = Vec::new(); // (stacked row, bound value)
    for i in 0..m {
        let (lo, hi) = (stacked.lo(i), stacked.hi(i));
        if lo == hi {
            active.push((i, lo));
        } else if y[i] > ACTIVE_TOL {
            active.push((i, hi));
        } else if y[i] < -ACTIVE_TOL {
            active.push((i, lo));
        }
    }
    let k = active.len();
    // KKT: [H  A_act'; A_act  0] [x; nu] = [-g; b_act]
    let mut kkt = DMatrix::<f64>::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&problem.hessian);
    for (slot, &(row, _)) in active.iter().enumerate() {
        if row < n {
            kkt[(n + slot, row)] = 1.0;
            kkt[(row, n + slot)] = 1.0;
        } else {
            let r = row - n;
            for c in 0..n {
                let a = problem.rows[(r, c)];
                kkt[(n + slot, c)] = a;
                kkt[(c, n + slot)] = a;
            }
        }
    }
    let mut rhs = DVector::<f64>::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&problem.gradient));
    for (slot, &(_, b)) in active.iter().enumerate() {
        rhs[n + slot] = b;
    }
    // Tiny diagonal regularization for rank-deficient active sets, with the
    // sign split that keeps the saddle system quasi-definite.
    for i in 0..n {
        kkt[(i, i)] += 1e-12;
    }
    for i in n..n + k {
        kkt[(i, i)] -= 1e-12;
    }
    let lu = kkt.lu();
    let sol = lu.solve(&rhs)?;
    let px = sol.rows(0, n).clone_owned();

    // Feasibility screen over every stacked row.
    let mut v = DVector::zeros(m);
    stacked.mul(&px, &mut v);
    for i in 0..m {
        if v[i] < stacked.lo(i) - FEAS_SLACK || v[i] > stacked.hi(i) + FEAS_SLACK {
            return None;
        }
    }
    let mut py = DVector::zeros(m);
    for (slot, &(row, _)) in active.iter().enumerate() {
        py[row] = sol[n + slot];
    }
    // Multiplier signs must match their bounds (dual feasibility); a wrong
    // sign means the active set was misidentified.
    for &(row, b) in &active {
        let (lo, hi) = (stacked.lo(row), stacked.hi(row));
        if lo != hi {
            let nu = py[row];
            if b == hi && nu < -ACTIVE_TOL {
                return None;
            }
            if b == lo && nu > ACTIVE_TOL {
                return None;
            }
        }
    }
    // Accept only if stationarity actually improved to polish quality.
    let station = (&problem.hessian * &px + &problem.gradient + stacked.tr_mul(&py))
        .abs()
        .max();
    let before = (&problem.hessian * x + &problem.gradient + stacked.tr_mul(y))
        .abs()
        .max();
    if station <= before.max(1e-12) {
        Some((px, py))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn free_box(n: usize) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(n, -1e30),
            DVector::from_element(n, 1e30),
        )
    }

    fn no_rows(n: usize) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        (DMatrix::zeros(0, n), DVector::zeros(0), DVector::zeros(0))
    }

    fn random_psd(rng: &mut impl Rng, n: usize, floor: f64) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose() + DMatrix::identity(n, n) * floor
    }

    /// Projected gradient descent on the box-constrained problem, the
    /// independent oracle for small cases.
    fn projected_gradient_oracle(
        h: &DMatrix<f64>,
        g: &DVector<f64>,
        lo: &DVector<f64>,
        hi: &DVector<f64>,
    ) -> DVector<f64> {
        let n = g.len();
        // Step below 1/L with L = ||H||_inf (valid bound for symmetric H).
        let l: f64 = (0..n)
            .map(|i| h.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let step = 1.0 / (l + 1e-12);
        let mut x = DVector::zeros(n);
        for _ in 0..2_000_000 {
            let grad = h * &x + g;
            let mut next = &x - step * grad;
            for i in 0..n {
                next[i] = next[i].clamp(lo[i], hi[i]);
            }
            let delta = (&next - &x).abs().max();
            x = next;
            if delta < 1e-16 {
                break;
            }
        }
        x
    }

    #[test]
    fn unconstrained_matches_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_psd(&mut rng, 5, 0.5);
        let g = DVector::from_fn(5, |i, _| (i as f64 - 2.0) * 0.3);
        let (rows, lower, upper) = no_rows(5);
        let (bl, bu) = free_box(5);
        let p = QpProblem {
            hessian: h.clone(),
            gradient: g.clone(),
            rows,
            lower,
            upper,
            box_lower: bl,
            box_upper: bu,
        };
        let sol = solve_qp(&p, &QpSettings::default(), None).unwrap();
        let direct = h.lu().solve(&(-&g)).unwrap();
        assert!((&sol.x - &direct).abs().max() < 1e-8);
        assert!(sol.primal_residual <= 1e-6);
        assert!(sol.stationarity <= 1e-6);
    }

    #[test]
    fn one_dof_clamps_at_box() {
        let p = QpProblem {
            hessian: DMatrix::from_element(1, 1, 1.0),
            gradient: DVector::from_element(1, -10.0), // wants x = 10
            rows: DMatrix::zeros(0, 1),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
            box_lower: DVector::from_element(1, -5.0),
            box_upper: DVector::from_element(1, 5.0),
        };
        let sol = solve_qp(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.x[0], 5.0, "box bound must hold exactly");
        assert!(sol.stationarity <= 1e-6 || sol.multipliers[0] > 0.0);
    }

    #[test]
    fn matches_projected_gradient_oracle_on_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..8 {
            let n = rng.random_range(2..=6);
            let h = random_psd(&mut rng, n, 0.3);
            let g = DVector::from_fn(n, |i, _| rng.random_range(-2.0..2.0) + i as f64 * 0.1);
            let lo = DVector::from_fn(n, |_, _| rng.random_range(-1.0..-0.1));
            let hi = DVector::from_fn(n, |_, _| rng.random_range(0.1..1.0));
            let p = QpProblem {
                hessian: h.clone(),
                gradient: g.clone(),
                rows: DMatrix::zeros(0, n),
                lower: DVector::zeros(0),
                upper: DVector::zeros(0),
                box_lower: lo.clone(),
                box_upper: hi.clone(),
            };
            let sol = solve_qp(&p, &QpSettings::default(), None).unwrap();
            let oracle = projected_gradient_oracle(&h, &g, &lo, &hi);
            assert!(
                (&sol.x - &oracle).abs().max() < 1e-9,
                "trial {trial}: {:?} vs oracle {:?}",
                sol.x,
                oracle
            );
        }
    }

    #[test]
    fn equality_row_is_honored() {
        // min 1/2 ||x||^2 s.t. sum x = 1 -> x = 1/n each.
        let n = 4;
        let p = QpProblem {
            hessian: DMatrix::identity(n, n),
            gradient: DVector::zeros(n),
            rows: DMatrix::from_element(1, n, 1.0),
            lower: DVector::from_element(1, 1.0),
            upper: DVector::from_element(1, 1.0),
            box_lower: DVector::from_element(n, -10.0),
            box_upper: DVector::from_element(n, 10.0),
        };
        let sol = solve_qp(&p, &QpSettings::default(), None).unwrap();
        for i in 0..n {
            assert!((sol.x[i] - 0.25).abs() < 1e-9);
        }
        assert!(sol.primal_residual <= 1e-6);
        assert!(sol.stationarity <= 1e-6);
    }

    #[test]
    fn two_sided_row_activates_correct_side() {
        // min 1/2 (x - 3)^2 with 0 <= x <= 10 (box) and -1 <= 2x <= 4
        // (row). Row's upper side binds: x = 2.
        let p = QpProblem {
            hessian: DMatrix::from_element(1, 1, 1.0),
            gradient: DVector::from_element(1, -3.0),
            rows: DMatrix::from_element(1, 1, 2.0),
            lower: DVector::from_element(1, -1.0),
            upper: DVector::from_element(1, 4.0),
            box_lower: DVector::from_element(1, 0.0),
            box_upper: DVector::from_element(1, 10.0),
        };
        let sol = solve_qp(&p, &QpSettings::default(), None).unwrap();
        assert!((sol.x[0] - 2.0).abs() < 1e-9, "x = {}", sol.x[0]);
    }

    #[test]
    fn warm_start_is_deterministic_and_fast() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let h = random_psd(&mut rng, n, 0.4);
        let g = DVector::from_fn(n, |i, _| (i as f64).sin());
        let p = QpProblem {
            hessian: h,
            gradient: g,
            rows: DMatrix::from_fn(2, n, |r, c| ((r + c) as f64 * 0.7).cos()),
            lower: DVector::from_element(2, -0.5),
            upper: DVector::from_element(2, 0.5),
            box_lower: DVector::from_element(n, -0.8),
            box_upper: DVector::from_element(n, 0.8),
        };
        let a = solve_qp(&p, &QpSettings::default(), None).unwrap();
        let b = solve_qp(&p, &QpSettings::default(), None).unwrap();
        assert_eq!(a.x, b.x, "determinism");
        let warm = solve_qp(&p, &QpSettings::default(), Some((&a.x, &a.multipliers))).unwrap();
        assert!((&warm.x - &a.x).abs().max() < 1e-7);
        assert!(warm.iterations <= a.iterations);
    }

    #[test]
    fn max_iterations_is_reported() {
        let p = QpProblem {
            hessian: DMatrix::identity(3, 3),
            gradient: DVector::from_element(3, 1.0),
            rows: DMatrix::from_fn(1, 3, |_, c| (c + 1) as f64),
            lower: DVector::from_element(1, 0.5),
            upper: DVector::from_element(1, 0.5),
            box_lower: DVector::from_element(3, -1.0),
            box_upper: DVector::from_element(3, 1.0),
        };
        let settings = QpSettings {
            max_iter: 1,
            ..QpSettings::default()
        };
        assert!(matches!(
            solve_qp(&p, &settings, None),
            Err(QpError::MaxIterations { iterations: 1, .. })
        ));
    }

    #[test]
    fn malformed_problems_are_rejected() {
        let base = QpProblem {
            hessian: DMatrix::identity(2, 2),
            gradient: DVector::zeros(2),
            rows: DMatrix::zeros(0, 2),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
            box_lower: DVector::from_element(2, -1.0),
            box_upper: DVector::from_element(2, 1.0),
        };
        let mut asym = base.clone();
        asym.hessian[(0, 1)] = 0.5; // (1,0) stays 0
        assert!(matches!(
            solve_qp(&asym, &QpSettings::default(), None),
            Err(QpError::BadProblem(_))
        ));
        let mut crossed = base.clone();
        crossed.box_lower[0] = 2.0;
        assert!(matches!(
            solve_qp(&crossed, &QpSettings::default(), None),
            Err(QpError::BadProblem(_))
        ));
        let mut indefinite = base;
        indefinite.hessian = DMatrix::from_fn(2, 2, |r, c| if r == c { -1.0 } else { 0.0 });
        assert!(matches!(
            solve_qp(&indefinite, &QpSettings::default(), None),
            Err(QpError::BadProblem(_))
        ));
    }
}
