use super::function::inner_values;
use super::{GridFunction, OperatorMatrix, SpectralError};

const MAX_ITER: usize = 20_000;
const LAMBDA_RTOL: f64 = 1e-13;
const RESIDUAL_TOL: f64 = 1e-11;

/// Power iteration with ν-norm renormalization.
///
/// Stops once the Rayleigh quotient moves by less than `1e-13` relative and
/// the eigen-residual is below `1e-11`. The returned vector has unit ν-norm
/// and its largest-magnitude entry is positive.
pub fn leading_eigenpair(m: &OperatorMatrix) -> Result<(f64, GridFunction), SpectralError> {
    let grid = m.grid().clone();
    let mass = &grid.nu_mass;
    let n = m.dim();
    let mut v = vec![1.0; n];
    normalize(mass, &mut v);
    let mut w = vec![0.0; n];
    let mut lambda_prev = f64::NAN;
    for _ in 0..MAX_ITER {
        m.apply_values(&v, &mut w);
        let lambda = inner_values(mass, &w, &v);
        let residual = residual_norm(mass, &w, &v, lambda);
        std::mem::swap(&mut v, &mut w);
        normalize(mass, &mut v);
        if (lambda - lambda_prev).abs() < LAMBDA_RTOL * lambda.abs() && residual < RESIDUAL_TOL {
            fix_sign(&mut v);
            return Ok((lambda, GridFunction::new(grid, v)));
        }
        lambda_prev = lambda;
    }
    Err(SpectralError::NoConvergence {
        what: "leading eigenpair",
        iterations: MAX_ITER,
    })
}

/// `|λ₂|` by power iteration on the ν-orthogonal complement of `chi`.
///
/// Uses the Rayleigh quotient of `M²` so that a negative `λ₂` does not
/// produce sign oscillation.
pub fn second_eigenvalue(m: &OperatorMatrix, chi: &GridFunction) -> Result<f64, SpectralError> {
    let mass = &m.grid().nu_mass;
    let c = chi.values();
    let n = m.dim();
    let mut v: Vec<f64> = m
        .grid()
        .nodes
        .iter()
        .map(|&x| (1.7 * x).cos() + 0.3 * x)
        .collect();
    project(mass, c, &mut v);
    normalize(mass, &mut v);
    let mut w = vec![0.0; n];
    let mut gamma_prev = f64::NAN;
    for _ in 0..10 * MAX_ITER {
        m.apply_values(&v, &mut w);
        project(mass, c, &mut w);
        let gamma = inner_values(mass, &w, &w).sqrt();
        std::mem::swap(&mut v, &mut w);
        normalize(mass, &mut v);
        debug_assert!(inner_values(mass, &v, c).abs() < 1e-9);
        if (gamma - gamma_prev).abs() < 1e-12 * gamma {
            if !(gamma > 0.0 && gamma < 1.0) {
                return Err(SpectralError::DeflationFailure(gamma));
            }
            return Ok(gamma);
        }
        gamma_prev = gamma;
    }
    Err(SpectralError::NoConvergence {
        what: "deflated power iteration",
        iterations: 10 * MAX_ITER,
    })
}

/// Removes the `c`-component twice for numerical orthogonality.
pub(crate) fn project(mass: &[f64], c: &[f64], v: &mut [f64]) {
    let cc = inner_values(mass, c, c);
    for _ in 0..2 {
        let a = inner_values(mass, v, c) / cc;
        for (x, y) in v.iter_mut().zip(c) {
            *x -= a * y;
        }
    }
}

fn normalize(mass: &[f64], v: &mut [f64]) {
    let s = inner_values(mass, v, v).sqrt();
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn residual_norm(mass: &[f64], w: &[f64], v: &[f64], lambda: f64) -> f64 {
    mass.iter()
        .zip(w)
        .zip(v)
        .map(|((m, a), b)| m * (a - lambda * b).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn fix_sign(v: &mut [f64]) {
    let k = (0..v.len())
        .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
        .unwrap_or(0);
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}
