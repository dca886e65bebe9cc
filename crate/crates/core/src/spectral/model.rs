use super::eigen::project;
use super::kernel::KERNEL_SAMPLES;
use super::{
    assemble_operator, build_grid, leading_eigenpair, second_eigenvalue, Extrapolation, FineTable,
    GridFunction, GridParams, GridSpec, KernelCdf, KernelTables, OperatorMatrix, SpectralError,
};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Samples in the off-grid χ and 𝒱 interpolation tables.
const FINE_SAMPLES: usize = 16385;
const MAX_BRACKET_STEPS: usize = 60;

/// Everything the simulation layers consume, solved at the critical level.
///
/// Immutable once built; share it across workers behind an `Arc` or `&`.
#[derive(Debug, Clone)]
pub struct SpectralModel {
    pub d: u32,
    pub params: GridParams,
    pub h_star: f64,
    /// Leading eigenvalue of the discretized operator at `h_star`.
    pub lambda: f64,
    /// Levels visited while locating `h_star`, with their leading eigenvalues.
    pub lambda_of_h: Vec<(f64, f64)>,
    pub operator: OperatorMatrix,
    pub chi: GridFunction,
    pub gamma: f64,
    pub c1: f64,
    pub c1_tilde: f64,
    pub v: GridFunction,
    pub sigma2: f64,
    chi_table: FineTable,
    v_table: FineTable,
    kernel: KernelTables,
}

/// Serialized form of a [`SpectralModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub d: u32,
    pub h_star: f64,
    pub gamma: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    #[serde(rename = "C1_tilde")]
    pub c1_tilde: f64,
    pub sigma2: f64,
    pub lambda: f64,
    pub n_points: usize,
    pub tail_tol: f64,
    pub lambda_of_h: Vec<[f64; 2]>,
    pub grid: GridDocument,
    pub chi: Vec<f64>,
    #[serde(rename = "V")]
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDocument {
    pub x_max: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChiRegularity {
    pub max_slope: f64,
    pub monotone: bool,
    /// Forward finite-difference slopes between consecutive nodes.
    pub slopes: Vec<f64>,
}

/// Leading eigenpair of the operator discretized at level `h`.
pub fn lambda_at_level(
    d: u32,
    h: f64,
    params: &GridParams,
) -> Result<(f64, GridFunction, OperatorMatrix), SpectralError> {
    let grid = Arc::new(build_grid(d, h, params.n_points, params.tail_tol)?);
    let m = assemble_operator(grid);
    let (lambda, chi) = leading_eigenpair(&m)?;
    Ok((lambda, chi, m))
}

/// Locates the level where the leading eigenvalue crosses 1 by bisection to
/// width `tol`, then assembles the full model there.
pub fn find_h_star(d: u32, params: &GridParams, tol: f64) -> Result<SpectralModel, SpectralError> {
    if d < 2 {
        return Err(SpectralError::InvalidBranching(d));
    }
    params.validate()?;
    if !(tol >= 1e-12) {
        return Err(SpectralError::InvalidGrid(format!("bisection tolerance must be ≥ 1e-12, got {tol}")));
    }
    let mut visited = Vec::new();
    let mut lambda = |h: f64| -> Result<f64, SpectralError> {
        let (l, _, _) = lambda_at_level(d, h, params)?;
        visited.push((h, l));
        Ok(l)
    };
    let (mut lo, mut hi) = (0.0_f64, 2.0_f64);
    let mut steps = 0;
    while lambda(hi)? > 1.0 {
        lo = hi;
        hi *= 2.0;
        steps += 1;
        if steps > MAX_BRACKET_STEPS {
            return Err(SpectralError::BracketFailure(format!("lambda > 1 up to h = {hi}")));
        }
    }
    let mut width = hi - lo;
    while lambda(lo)? < 1.0 {
        hi = lo;
        lo -= width;
        width *= 2.0;
        steps += 1;
        if steps > MAX_BRACKET_STEPS {
            return Err(SpectralError::BracketFailure(format!("lambda < 1 down to h = {lo}")));
        }
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if lambda(mid)? > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let h_star = 0.5 * (lo + hi);
    let (lam, chi, m) = lambda_at_level(d, h_star, params)?;
    visited.push((h_star, lam));
    visited.sort_by(|a, b| a.0.total_cmp(&b.0));
    visited.dedup_by(|a, b| a.0 == b.0);
    let gamma = second_eigenvalue(&m, &chi)?;
    let chi2 = chi.product(&chi);
    let v = m.apply(&chi2).add_scaled(-1.0 / d as f64, &chi2);
    let c1 = c1_from(d, &chi);
    let sigma2 = chi.inner(&v) / chi.integral();
    SpectralModel::assemble(d, *params, h_star, lam, visited, m, chi, gamma, c1, v, sigma2)
}

fn c1_from(d: u32, chi: &GridFunction) -> f64 {
    let d = d as f64;
    let chi3: f64 = chi.product(chi).inner(chi);
    2.0 * d / ((d - 1.0) * chi3)
}

impl SpectralModel {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        d: u32,
        params: GridParams,
        h_star: f64,
        lambda: f64,
        lambda_of_h: Vec<(f64, f64)>,
        operator: OperatorMatrix,
        chi: GridFunction,
        gamma: f64,
        c1: f64,
        v: GridFunction,
        sigma2: f64,
    ) -> Result<Self, SpectralError> {
        let grid = operator.grid().clone();
        let df = d as f64;
        let chi_values = chi.values().to_vec();
        let chi_table = FineTable::build(h_star, grid.x_max, FINE_SAMPLES, Extrapolation::Linear, |y| {
            operator.apply_at(y, &chi_values) / lambda
        });
        let chi2: Vec<f64> = chi_values.iter().map(|c| c * c).collect();
        let v_table = FineTable::build(h_star, grid.x_max, FINE_SAMPLES, Extrapolation::Constant, |y| {
            let c = chi_table.eval(y);
            operator.apply_at(y, &chi2) - c * c / df
        });
        let kernel = KernelTables::build(
            d,
            &grid.nodes,
            &chi_values,
            &chi_table,
            h_star,
            grid.x_max,
            KERNEL_SAMPLES,
        )?;
        Ok(SpectralModel {
            d,
            params,
            h_star,
            lambda,
            lambda_of_h,
            operator,
            chi,
            gamma,
            c1,
            c1_tilde: c1 * (df + 1.0) / df,
            v,
            sigma2,
            chi_table,
            v_table,
            kernel,
        })
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        self.operator.grid()
    }

    /// Off-grid χ; zero below `h_star`, linear continuation above `x_max`.
    #[inline]
    pub fn chi_at(&self, x: f64) -> f64 {
        self.chi_table.eval(x)
    }

    /// Off-grid 𝒱; zero below `h_star`, held constant above `x_max`.
    #[inline]
    pub fn v_at(&self, x: f64) -> f64 {
        self.v_table.eval(x)
    }

    pub fn chi_table(&self) -> &FineTable {
        &self.chi_table
    }

    pub fn kernel(&self) -> &KernelTables {
        &self.kernel
    }

    /// `L[f](x)` at an arbitrary point.
    pub fn apply_at(&self, x: f64, f: &GridFunction) -> f64 {
        self.operator.apply_at(x, f.values())
    }

    pub fn constant(&self, c: f64) -> GridFunction {
        GridFunction::constant(self.grid(), c)
    }

    pub fn function(&self, f: impl FnMut(f64) -> f64) -> GridFunction {
        GridFunction::from_fn(self.grid(), f)
    }

    /// Eigen-residual `‖Lχ − λχ‖_ν`.
    pub fn eigen_residual(&self) -> f64 {
        self.operator
            .apply(&self.chi)
            .add_scaled(-self.lambda, &self.chi)
            .norm()
    }

    pub fn to_document(&self) -> ModelDocument {
        let g = self.grid();
        ModelDocument {
            d: self.d,
            h_star: self.h_star,
            gamma: self.gamma,
            c1: self.c1,
            c1_tilde: self.c1_tilde,
            sigma2: self.sigma2,
            lambda: self.lambda,
            n_points: self.params.n_points,
            tail_tol: self.params.tail_tol,
            lambda_of_h: self.lambda_of_h.iter().map(|&(h, l)| [h, l]).collect(),
            grid: GridDocument {
                x_max: g.x_max,
                nodes: g.nodes.clone(),
                weights: g.weights.clone(),
            },
            chi: self.chi.values().to_vec(),
            v: self.v.values().to_vec(),
        }
    }

    /// Rebuilds a model from its document without re-solving the eigenproblem.
    pub fn from_document(doc: &ModelDocument) -> Result<Self, SpectralError> {
        let grid = Arc::new(GridSpec::from_parts(
            doc.d,
            doc.h_star,
            doc.grid.x_max,
            doc.grid.nodes.clone(),
            doc.grid.weights.clone(),
        )?);
        if doc.chi.len() != grid.len() || doc.v.len() != grid.len() {
            return Err(SpectralError::InvalidDocument("chi and V must have one value per node".into()));
        }
        if !doc.chi.iter().all(|c| c.is_finite() && *c >= 0.0) {
            return Err(SpectralError::InvalidDocument("chi must be finite and nonnegative".into()));
        }
        let operator = assemble_operator(grid.clone());
        let chi = GridFunction::new(grid.clone(), doc.chi.clone());
        let v = GridFunction::new(grid, doc.v.clone());
        let params = GridParams {
            n_points: doc.n_points,
            tail_tol: doc.tail_tol,
        };
        let mut model = SpectralModel::assemble(
            doc.d,
            params,
            doc.h_star,
            doc.lambda,
            doc.lambda_of_h.iter().map(|p| (p[0], p[1])).collect(),
            operator,
            chi,
            doc.gamma,
            doc.c1,
            v,
            doc.sigma2,
        )?;
        model.c1_tilde = doc.c1_tilde;
        Ok(model)
    }
}

/// `β[f] = f − ⟨χ,f⟩χ`.
pub fn project_off_chi(model: &SpectralModel, f: &GridFunction) -> GridFunction {
    let mut v = f.values().to_vec();
    project(&model.grid().nu_mass, model.chi.values(), &mut v);
    GridFunction::new(model.grid().clone(), v)
}

/// Tabulated CDF of `𝒦(x_i, ·)` for grid node `i`.
pub fn spine_kernel_cdf(model: &SpectralModel, x_index: usize) -> KernelCdf<'_> {
    model.kernel.row(x_index)
}

pub fn chi_regularity_report(model: &SpectralModel) -> ChiRegularity {
    let x = &model.grid().nodes;
    let c = model.chi.values();
    let slopes: Vec<f64> = (1..x.len()).map(|i| (c[i] - c[i - 1]) / (x[i] - x[i - 1])).collect();
    ChiRegularity {
        max_slope: slopes.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        monotone: slopes.iter().all(|&s| s >= -1e-9),
        slopes,
    }
}
