//! Kalman-type density filters on the grid.
//!
//! A [`FilterState`] holds the estimate `p_hat`, the dense covariance `P` and
//! the diagonal noise model `R`. Each outer step of length `dt` is
//!
//! 1. prediction with the frozen generator `A`, split into stable substeps:
//!    `p_hat <- M p_hat`, `P <- M P M^T` with `M = I + h A`;
//! 2. correction with the new measurement `y`, integrating the gain and the
//!    `-P R^-1 P` Riccati term linearly-implicitly over `dt`:
//!    `P+ = (P^-1 + dt R^-1)^-1`, `p_hat+ = p_hat + dt P+ R^-1 (y - p_hat)`;
//! 3. `R <- max(kbar * y, floor)` for use in the next step.
//!
//! The centralized filter and the per-agent local filters share this code;
//! they differ only in which measurement they are fed.

use std::fmt;

use faer::linalg::solvers::DenseSolveCore;
use faer::{Col, Mat, Scale, Side};

use crate::error::{Error, Result};
use crate::grid::{Grid, SparseOperator};
use crate::kde::Measurement;
use crate::sparse::CsrMatrix;

/// Power-iteration limits for [`gain_distance`].
pub const POWER_ITERATIONS: usize = 50;
pub const POWER_TOLERANCE: f64 = 1e-6;

/// Relative size of the noise floor with respect to the uniform density.
pub const FLOOR_FRACTION: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FilterLabel {
    Centralized,
    Agent(usize),
}

impl fmt::Display for FilterLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterLabel::Centralized => write!(f, "centralized"),
            FilterLabel::Agent(i) => write!(f, "agent_{i}"),
        }
    }
}

/// `1e-6` times the uniform density on the grid's domain.
pub fn noise_floor(grid: &Grid) -> f64 {
    FLOOR_FRACTION / grid.domain_area()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterState {
    label: FilterLabel,
    p_hat: Vec<f64>,
    p_bar: Mat<f64>,
    r_diag: Vec<f64>,
    floor: f64,
    t: f64,
    step: u64,
}

impl FilterState {
    pub fn new(
        label: FilterLabel,
        p_hat: Vec<f64>,
        p_bar: Mat<f64>,
        r_diag: Vec<f64>,
        floor: f64,
        t: f64,
    ) -> Result<Self> {
        let n = p_hat.len();
        for got in [p_bar.nrows(), p_bar.ncols(), r_diag.len()] {
            if got != n {
                return Err(Error::ShapeMismatch { expected: n, got });
            }
        }
        if !(floor > 0.0) {
            return Err(Error::Config(format!("noise floor must be positive, got {floor}")));
        }
        let state = Self {
            label,
            p_hat,
            p_bar,
            r_diag,
            floor,
            t,
            step: 0,
        };
        state.check_floor()?;
        Ok(state)
    }

    pub fn label(&self) -> FilterLabel {
        self.label
    }

    pub fn estimate(&self) -> &[f64] {
        &self.p_hat
    }

    pub fn covariance(&self) -> &Mat<f64> {
        &self.p_bar
    }

    pub fn noise_diag(&self) -> &[f64] {
        &self.r_diag
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn dim(&self) -> usize {
        self.p_hat.len()
    }

    pub fn trace_p(&self) -> f64 {
        (0..self.dim()).map(|i| self.p_bar[(i, i)]).sum()
    }

    /// Largest `|P_ij - P_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            for i in 0..j {
                worst = worst.max((self.p_bar[(i, j)] - self.p_bar[(j, i)]).abs());
            }
        }
        worst
    }

    /// Smallest eigenvalue of the symmetric part of `P` (dense, for checks).
    pub fn min_eigenvalue(&self) -> f64 {
        let sym = Mat::<f64>::from_fn(self.dim(), self.dim(), |i, j| {
            0.5 * (self.p_bar[(i, j)] + self.p_bar[(j, i)])
        });
        sym.self_adjoint_eigenvalues(Side::Lower)
            .expect("eigendecomposition of a finite symmetric matrix")
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Frobenius norm of `P_self - P_other`.
    pub fn covariance_distance(&self, other: &FilterState) -> Result<f64> {
        if other.dim() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let mut sum = 0.0;
        for j in 0..self.dim() {
            for (a, b) in self.p_bar.col_as_slice(j).iter().zip(other.p_bar.col_as_slice(j)) {
                sum += (a - b) * (a - b);
            }
        }
        Ok(sum.sqrt())
    }

    fn check_floor(&self) -> Result<()> {
        match self.r_diag.iter().position(|r| !(*r >= self.floor)) {
            Some(cell) => Err(Error::FloorViolation {
                cell,
                value: self.r_diag[cell],
                floor: self.floor,
            }),
            None => Ok(()),
        }
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Filter {
            label: self.label.to_string(),
            step: self.step + 1,
            msg: msg.into(),
        }
    }

    /// Prediction over `dt` with `substeps` equal steps of `M = I + h A`.
    pub fn predict(&mut self, a: &CsrMatrix, substeps: usize, dt: f64) -> Result<()> {
        let n = self.dim();
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: a.nrows(),
            });
        }
        let m = substeps.max(1);
        let h = dt / m as f64;
        let mut ax = vec![0.0; n];
        let mut w = Mat::<f64>::zeros(n, n);
        for _ in 0..m {
            a.mul_vec_into(&self.p_hat, &mut ax);
            for (x, d) in self.p_hat.iter_mut().zip(&ax) {
                *x += h * d;
            }
            // M P M^T = (W^T M^T)^T with W = P M^T; the outer transpose is
            // dropped since the result is symmetric
            right_mul_mt(a, h, &self.p_bar, &mut w);
            self.p_bar.copy_from(w.transpose());
            right_mul_mt(a, h, &self.p_bar, &mut w);
            std::mem::swap(&mut self.p_bar, &mut w);
        }
        symmetrize(&mut self.p_bar, &mut w);
        Ok(())
    }

    /// Measurement update over an interval `dt` with the current `R`.
    pub fn correct(&mut self, y: &[f64], dt: f64) -> Result<()> {
        let n = self.dim();
        if y.len() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: y.len(),
            });
        }
        self.check_floor()?;
        // scale by S = (R / dt)^(-1/2) so that B = I + S P S is well conditioned
        let s: Vec<f64> = self.r_diag.iter().map(|r| (dt / r).sqrt()).collect();
        let mut b = Mat::<f64>::zeros(n, n);
        for j in 0..n {
            for ((bij, pij), si) in b.col_as_slice_mut(j).iter_mut().zip(self.p_bar.col_as_slice(j)).zip(&s) {
                *bij = si * pij * s[j];
            }
            b[(j, j)] += 1.0;
        }
        let llt = b
            .llt(Side::Lower)
            .map_err(|_| self.fail("covariance is not positive definite"))?;
        let b_inv = llt.inverse();
        for j in 0..n {
            let col = self.p_bar.col_as_slice_mut(j);
            for ((pij, binv), si) in col.iter_mut().zip(b_inv.col_as_slice(j)).zip(&s) {
                *pij = -binv / (si * s[j]);
            }
            col[j] += 1.0 / (s[j] * s[j]);
        }
        symmetrize(&mut self.p_bar, &mut b);

        let g: Vec<f64> = y
            .iter()
            .zip(&self.p_hat)
            .zip(&self.r_diag)
            .map(|((yi, pi), r)| dt * (yi - pi) / r)
            .collect();
        let correction = sym_mul_vec(&self.p_bar, &g);
        for (p, c) in self.p_hat.iter_mut().zip(&correction) {
            *p += c;
        }
        Ok(())
    }

    /// `R <- max(kbar * y, floor)` elementwise.
    pub fn refresh_noise(&mut self, kbar: f64, y: &[f64]) {
        for (r, v) in self.r_diag.iter_mut().zip(y) {
            *r = (kbar * v).max(self.floor);
        }
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(cell) = self.p_hat.iter().position(|v| !v.is_finite()) {
            return Err(self.fail(format!("non-finite estimate at cell {cell}")));
        }
        let n = self.dim();
        for j in 0..n {
            if self.p_bar.col_as_slice(j).iter().any(|v| !v.is_finite()) {
                return Err(self.fail(format!("non-finite covariance in column {j}")));
            }
        }
        Ok(())
    }
}

/// `out = x (I + h A)^T`: column `i` is `x_i + h sum_k A_ik x_k`.
fn right_mul_mt(a: &CsrMatrix, h: f64, x: &Mat<f64>, out: &mut Mat<f64>) {
    for i in 0..x.ncols() {
        let o = out.col_as_slice_mut(i);
        o.copy_from_slice(x.col_as_slice(i));
        let (cols, vals) = a.row(i);
        for (&k, &aik) in cols.iter().zip(vals) {
            let c = h * aik;
            for (ov, xv) in o.iter_mut().zip(x.col_as_slice(k)) {
                *ov += c * xv;
            }
        }
    }
}

/// `P <- (P + P^T) / 2`, using `scratch` for the transpose.
fn symmetrize(p: &mut Mat<f64>, scratch: &mut Mat<f64>) {
    scratch.copy_from(p.transpose());
    for j in 0..p.ncols() {
        for (x, y) in p.col_as_slice_mut(j).iter_mut().zip(scratch.col_as_slice(j)) {
            *x = 0.5 * (*x + y);
        }
    }
}

/// `P v` for symmetric column-major `P`, computed as column dot products.
fn sym_mul_vec(p: &Mat<f64>, v: &[f64]) -> Vec<f64> {
    (0..p.ncols())
        .map(|i| p.col_as_slice(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `p_hat = y0`, `R = max(kbar * y0, floor)`, `P = diag(R)`.
pub fn init_filter(label: FilterLabel, y0: &Measurement) -> Result<FilterState> {
    let floor = noise_floor(y0.field.grid());
    init_from_values(label, y0.field.values(), y0.kbar, floor, y0.t)
}

/// [`init_filter`] on a bare vector.
pub fn init_from_values(label: FilterLabel, y0: &[f64], kbar: f64, floor: f64, t: f64) -> Result<FilterState> {
    let r: Vec<f64> = y0.iter().map(|v| (kbar * v).max(floor)).collect();
    let p = Mat::<f64>::from_fn(r.len(), r.len(), |i, j| if i == j { r[i] } else { 0.0 });
    FilterState::new(label, y0.to_vec(), p, r, floor, t)
}

/// `L v = P (R^-1 v)` without forming `L`.
pub fn gain_apply(state: &FilterState, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != state.dim() {
        return Err(Error::ShapeMismatch {
            expected: state.dim(),
            got: v.len(),
        });
    }
    state.check_floor()?;
    let scaled: Vec<f64> = v.iter().zip(&state.r_diag).map(|(x, r)| x / r).collect();
    Ok(sym_mul_vec(&state.p_bar, &scaled))
}

/// Dense `L = P R^-1`, for diagnostics and tests.
pub fn gain_matrix(state: &FilterState) -> Result<Mat<f64>> {
    state.check_floor()?;
    let n = state.dim();
    Ok(Mat::from_fn(n, n, |i, j| state.p_bar[(i, j)] / state.r_diag[j]))
}

/// One full filter step from `state.t()` to `state.t() + dt`: prediction
/// with `op`, correction with `y`, then `R` refreshed from `y`.
pub fn filter_step(state: &mut FilterState, op: &SparseOperator, y: &Measurement, dt: f64) -> Result<()> {
    if y.field.grid() != op.grid() {
        return Err(Error::GridMismatch {
            left: op.grid().to_string(),
            right: y.field.grid().to_string(),
        });
    }
    filter_step_values(state, op.matrix(), op.substeps(dt), y.field.values(), y.kbar, dt)
}

/// [`filter_step`] with an explicit generator and substep count.
pub fn filter_step_values(
    state: &mut FilterState,
    a: &CsrMatrix,
    substeps: usize,
    y: &[f64],
    kbar: f64,
    dt: f64,
) -> Result<()> {
    if !(dt > 0.0) {
        return Err(state.fail(format!("time step must be positive, got {dt}")));
    }
    state.predict(a, substeps, dt)?;
    state.correct(y, dt)?;
    state.refresh_noise(kbar, y);
    state.check_finite()?;
    state.t += dt;
    state.step += 1;
    Ok(())
}

/// Operator 2-norm of `L_a - L_b` by power iteration on `(L_a - L_b)^T (L_a - L_b)`.
pub fn gain_distance(a: &FilterState, b: &FilterState) -> Result<f64> {
    let mut v = Vec::new();
    gain_distance_warm(a, b, &mut v)
}

/// [`gain_distance`] that starts from, and leaves behind, the dominant right
/// singular vector estimate in `v`. An empty or zero `v` starts from ones.
pub fn gain_distance_warm(a: &FilterState, b: &FilterState, v: &mut Vec<f64>) -> Result<f64> {
    let n = a.dim();
    if b.dim() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: b.dim(),
        });
    }
    a.check_floor()?;
    b.check_floor()?;
    let mut diff = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let (ra, rb) = (a.r_diag[j], b.r_diag[j]);
        let cols = a.p_bar.col_as_slice(j).iter().zip(b.p_bar.col_as_slice(j));
        for (d, (pa, pb)) in diff.col_as_slice_mut(j).iter_mut().zip(cols) {
            *d = pa / ra - pb / rb;
        }
    }

    if v.len() != n || norm(v) == 0.0 {
        *v = vec![1.0; n];
    }
    let v_norm = norm(v);
    let mut x = Col::<f64>::from_fn(n, |i| v[i] / v_norm);
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w = &diff * &x;
        let u = diff.transpose() * &w;
        let next = w.squared_norm_l2();
        let u_norm = u.norm_l2();
        if u_norm == 0.0 {
            v.iter_mut().for_each(|e| *e = 0.0);
            return Ok(0.0);
        }
        x = u * Scale(1.0 / u_norm);
        let converged = (next - lambda).abs() <= POWER_TOLERANCE * next;
        lambda = next;
        if converged {
            break;
        }
    }
    v.clear();
    v.extend(x.iter().copied());
    Ok(lambda.sqrt())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_state(p: &[f64], r: &[f64]) -> FilterState {
        let n = p.len();
        let pm = Mat::<f64>::from_fn(n, n, |i, j| if i == j { p[i] } else { 0.0 });
        FilterState::new(FilterLabel::Centralized, vec![0.0; n], pm, r.to_vec(), 1e-9, 0.0).unwrap()
    }

    #[test]
    fn labels() {
        assert_eq!(FilterLabel::Centralized.to_string(), "centralized");
        assert_eq!(FilterLabel::Agent(3).to_string(), "agent_3");
    }

    #[test]
    fn identity_and_scalar_gain() {
        let s = diag_state(&[0.3, 0.7], &[0.3, 0.7]);
        let l = gain_matrix(&s).unwrap();
        assert!((l[(0, 0)] - 1.0).abs() < 1e-15 && (l[(1, 1)] - 1.0).abs() < 1e-15);
        let s = diag_state(&[2.0], &[4.0]);
        assert_eq!(gain_apply(&s, &[1.0]).unwrap(), vec![0.5]);
    }

    #[test]
    fn floor_applies_at_zeros() {
        let s = init_from_values(FilterLabel::Centralized, &[0.0, 1.0, -0.2], 0.5, 1e-6, 0.0).unwrap();
        assert_eq!(s.noise_diag(), &[1e-6, 0.5, 1e-6]);
        assert_eq!(s.covariance()[(1, 1)], 0.5);
    }

    #[test]
    fn floor_violation_is_reported() {
        let pm = Mat::<f64>::identity(2, 2);
        let err = FilterState::new(FilterLabel::Agent(1), vec![0.0; 2], pm, vec![1.0, 1e-12], 1e-9, 0.0);
        assert!(matches!(err, Err(Error::FloorViolation { cell: 1, .. })));
    }

    #[test]
    fn identical_states_have_zero_gain_distance() {
        let s = diag_state(&[1.0, 2.0, 3.0], &[1.0, 1.0, 2.0]);
        assert_eq!(gain_distance(&s, &s).unwrap(), 0.0);
    }

    #[test]
    fn scalar_update_is_exact_reciprocal_sum() {
        // with y = p_hat only the Riccati term acts: 1/P grows by dt/r
        let mut s = diag_state(&[1.0], &[4.0]);
        s.correct(&[0.0], 0.5).unwrap();
        assert!((s.covariance()[(0, 0)] - 1.0 / (1.0 + 0.5 / 4.0)).abs() < 1e-13);
    }
}
