//! Deterministic survival recursion `u_n = 1 − (1 − L[u_{n−1}]/d)^d` and the
//! moment identities of the killed branching process.
//!
//! `u_n^f(x) = 1 − E_x[∏_{v ∈ N_n} f(φ_v)]` with `u_0 = 1 − f`. With `f ≡ 0`
//! this is the one-arm probability; with `f = exp(−αχ/n)` it yields the
//! Laplace transform of the rescaled generation-`n` population.

use crate::spectral::{project_off_chi, GridFunction, SpectralModel};
use crate::stats::least_squares_slope;
use thiserror::Error;

/// Entries of `u_n` may leave `[0, 1]` by at most this much.
const BOUNDS_SLACK: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum RecursionError {
    #[error("boundary function must lie in [0, 1]; node {node} has {value}")]
    BoundaryOutOfRange { node: usize, value: f64 },
    #[error("u_{n} has entry {value} outside [0, 1] at node {node}")]
    OutOfBounds { n: usize, node: usize, value: f64 },
    #[error("1/a_n stopped increasing at n = {0}")]
    NonMonotone(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Boundary function `f` with `u_0 = 1 − f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryTag {
    /// `f ≡ 0`.
    Zero,
    /// `f_λ = exp(−χ/λ)`.
    FLambda(f64),
    Custom,
}

#[derive(Debug, Clone)]
pub struct RecursionSeries<'m> {
    pub model: &'m SpectralModel,
    pub f_tag: BoundaryTag,
    pub u: Vec<GridFunction>,
    /// `a_n = ⟨χ, u_n⟩`.
    pub a: Vec<f64>,
    /// `b_n = ‖β[u_n]‖`.
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneArm {
    pub slope_inverse_a: f64,
    pub rho_hat: f64,
    pub c1_hat: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// `f_λ = exp(−χ/λ)`; `λ = 0` gives `f ≡ 0`.
pub fn f_lambda(model: &SpectralModel, lambda: f64) -> GridFunction {
    if lambda == 0.0 {
        return model.constant(0.0);
    }
    model.chi.map(|c| (-c / lambda).exp())
}

/// Boundary function of the Laplace transform at `α` for generation `n`.
pub fn laplace_boundary(model: &SpectralModel, alpha: f64, n: usize) -> GridFunction {
    f_lambda(model, n as f64 / alpha)
}

/// One recursion step on values; `1 − (1 − y)^d` evaluated as `−expm1(d·ln(1 − y))`.
fn step(model: &SpectralModel, u: &[f64], out: &mut [f64]) {
    model.operator.apply_values(u, out);
    let d = model.d as f64;
    for v in out.iter_mut() {
        *v = survival_map(d, *v / d);
    }
}

#[inline]
fn survival_map(d: f64, y: f64) -> f64 {
    -(d * (-y).ln_1p()).exp_m1()
}

fn check_bounds(n: usize, values: &[f64]) -> Result<(), RecursionError> {
    for (node, &value) in values.iter().enumerate() {
        if !(-BOUNDS_SLACK..=1.0 + BOUNDS_SLACK).contains(&value) {
            return Err(RecursionError::OutOfBounds { n, node, value });
        }
    }
    Ok(())
}

fn initial(f0: &GridFunction) -> Result<Vec<f64>, RecursionError> {
    for (node, &value) in f0.values().iter().enumerate() {
        if !(-BOUNDS_SLACK..=1.0 + BOUNDS_SLACK).contains(&value) {
            return Err(RecursionError::BoundaryOutOfRange { node, value });
        }
    }
    Ok(f0.values().iter().map(|f| 1.0 - f).collect())
}

/// Full series `u_0 … u_{n_max}` with `a_n` and `b_n`.
pub fn iterate_u<'m>(
    model: &'m SpectralModel,
    f0: &GridFunction,
    n_max: usize,
) -> Result<RecursionSeries<'m>, RecursionError> {
    iterate_tagged(model, f0, BoundaryTag::Custom, n_max)
}

pub fn iterate_tagged<'m>(
    model: &'m SpectralModel,
    f0: &GridFunction,
    f_tag: BoundaryTag,
    n_max: usize,
) -> Result<RecursionSeries<'m>, RecursionError> {
    let grid = model.grid().clone();
    let mut cur = initial(f0)?;
    let mut next = vec![0.0; cur.len()];
    let mut u = Vec::with_capacity(n_max + 1);
    let mut a = Vec::with_capacity(n_max + 1);
    let mut b = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        if n > 0 {
            step(model, &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
            check_bounds(n, &cur)?;
        }
        let f = GridFunction::new(grid.clone(), cur.clone());
        a.push(model.chi.inner(&f));
        b.push(project_off_chi(model, &f).norm());
        u.push(f);
    }
    Ok(RecursionSeries {
        model,
        f_tag,
        u,
        a,
        b,
    })
}

/// `u_n` only, without storing the series.
pub fn final_u(model: &SpectralModel, f0: &GridFunction, n: usize) -> Result<GridFunction, RecursionError> {
    let mut cur = initial(f0)?;
    let mut next = vec![0.0; cur.len()];
    for k in 1..=n {
        step(model, &cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
        check_bounds(k, &cur)?;
    }
    Ok(GridFunction::new(model.grid().clone(), cur))
}

/// `u_n(x)` at an arbitrary point `x ≥ h*`, for `n ≥ 1`.
pub fn final_u_at(model: &SpectralModel, f0: &GridFunction, n: usize, x: f64) -> Result<f64, RecursionError> {
    if n == 0 {
        return Err(RecursionError::InvalidArgument("off-grid evaluation needs n ≥ 1".into()));
    }
    let prev = final_u(model, f0, n - 1)?;
    let d = model.d as f64;
    Ok(survival_map(d, model.apply_at(x, &prev) / d))
}

/// [`yaglom_laplace`] at an arbitrary point `x ≥ h*`.
pub fn yaglom_laplace_at(model: &SpectralModel, alpha: f64, n: usize, x: f64) -> Result<f64, RecursionError> {
    if !(alpha > 0.0) || n == 0 {
        return Err(RecursionError::InvalidArgument(format!(
            "Laplace transform needs alpha > 0 and n ≥ 1, got alpha = {alpha}, n = {n}"
        )));
    }
    let p = final_u_at(model, &model.constant(0.0), n, x)?;
    let q = final_u_at(model, &laplace_boundary(model, alpha, n), n, x)?;
    Ok(if p > 0.0 { 1.0 - q / p } else { 1.0 })
}

impl RecursionSeries<'_> {
    pub fn n_max(&self) -> usize {
        self.u.len() - 1
    }

    /// `u_n(x)` at an arbitrary point `x ≥ h*`, for `n ≥ 1`.
    pub fn u_at(&self, n: usize, x: f64) -> f64 {
        assert!(n >= 1 && n <= self.n_max());
        let d = self.model.d as f64;
        survival_map(d, self.model.apply_at(x, &self.u[n - 1]) / d)
    }
}

/// Least-squares slope of `1/a_n^0` over the second half of `0..=n_max`,
/// the matching log-log decay exponent, and `C₁ = 1/slope`.
pub fn one_arm_series(model: &SpectralModel, n_max: usize) -> Result<OneArm, RecursionError> {
    if n_max < 500 {
        return Err(RecursionError::InvalidArgument(format!("one-arm fit needs n_max ≥ 500, got {n_max}")));
    }
    let series = iterate_tagged(model, &model.constant(0.0), BoundaryTag::Zero, n_max)?;
    let inv: Vec<f64> = series.a.iter().map(|a| 1.0 / a).collect();
    if let Some(n) = (1..inv.len()).find(|&n| inv[n] <= inv[n - 1]) {
        return Err(RecursionError::NonMonotone(n));
    }
    let lo = n_max / 2;
    let ns: Vec<f64> = (lo..=n_max).map(|n| n as f64).collect();
    let slope = least_squares_slope(&ns, &inv[lo..]);
    let log_n: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let log_a: Vec<f64> = series.a[lo..].iter().map(|a| a.ln()).collect();
    let rho_hat = -least_squares_slope(&log_n, &log_a);
    Ok(OneArm {
        slope_inverse_a: slope,
        rho_hat,
        c1_hat: 1.0 / slope,
        a: series.a,
        b: series.b,
    })
}

/// `1 − u_n^{n/α}/u_n^0` on the grid: the conditional Laplace transform of
/// `Z_n = (1/n)Σ_{N_n} χ` at `α`, given survival to generation `n`.
pub fn yaglom_laplace(model: &SpectralModel, alpha: f64, n: usize) -> Result<GridFunction, RecursionError> {
    if !(alpha > 0.0) || n == 0 {
        return Err(RecursionError::InvalidArgument(format!(
            "Laplace transform needs alpha > 0 and n ≥ 1, got alpha = {alpha}, n = {n}"
        )));
    }
    let u0 = final_u(model, &model.constant(0.0), n)?;
    let uf = final_u(model, &laplace_boundary(model, alpha, n), n)?;
    Ok(u0.zip_map(&uf, |p, q| if p > 0.0 { 1.0 - q / p } else { 1.0 }))
}

/// `Lⁿ[f]`.
pub fn moment_first(model: &SpectralModel, f: &GridFunction, n: usize) -> GridFunction {
    model.operator.power(f, n)
}

/// `Lⁿ[f](x)` at an arbitrary point; `n = 0` needs `f` off-grid and is rejected.
pub fn moment_first_at(model: &SpectralModel, f: &GridFunction, n: usize, x: f64) -> f64 {
    assert!(n >= 1, "off-grid evaluation needs at least one operator application");
    model.apply_at(x, &model.operator.power(f, n - 1))
}

/// Powers `L^0 f, …, L^n f`.
fn powers(model: &SpectralModel, f: &GridFunction, n: usize) -> Vec<GridFunction> {
    let mut out = Vec::with_capacity(n + 1);
    out.push(f.clone());
    for k in 1..=n {
        out.push(model.operator.apply(&out[k - 1]));
    }
    out
}

/// `E_x[Σ_{v,w ∈ N_n} f(φ_v) g(φ_w)] = (d−1)/d · Σ_{k<n} L^k[L^{n−k}f · L^{n−k}g] + Lⁿ[fg]`.
pub fn moment_second(model: &SpectralModel, f: &GridFunction, g: &GridFunction, n: usize) -> GridFunction {
    assert!(n >= 1);
    let pf = powers(model, f, n);
    let pg = powers(model, g, n);
    let coef = (model.d as f64 - 1.0) / model.d as f64;
    let mut total = model.operator.power(&f.product(g), n);
    for k in 0..n {
        let inner = pf[n - k].product(&pg[n - k]);
        let term = model.operator.power(&inner, k);
        total = total.add_scaled(coef, &term);
    }
    total
}

/// [`moment_second`] evaluated at an arbitrary point `x ≥ h*`.
pub fn moment_second_at(model: &SpectralModel, f: &GridFunction, g: &GridFunction, n: usize, x: f64) -> f64 {
    assert!(n >= 1);
    let pf = powers(model, f, n - 1);
    let pg = powers(model, g, n - 1);
    let coef = (model.d as f64 - 1.0) / model.d as f64;
    let at = |h: &GridFunction, k: usize| model.apply_at(x, &model.operator.power(h, k - 1));
    let mut total = at(&f.product(g), n);
    total += coef * model.apply_at(x, &pf[n - 1]) * model.apply_at(x, &pg[n - 1]);
    for k in 1..n {
        total += coef * at(&pf[n - k].product(&pg[n - k]), k);
    }
    total
}
