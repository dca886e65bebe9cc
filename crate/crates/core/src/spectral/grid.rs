use super::SpectralError;
use crate::gaussian::{interval_mass, normal_pdf, sigma_nu2, sigma_y2, upper_quantile};
use crate::quadrature::composite;
use serde::{Deserialize, Serialize};

/// Points per Gauss–Legendre panel; grids are rounded up to a multiple.
pub const PANEL_ORDER: usize = 16;

/// Maximum absolute disagreement between quadrature and the analytic
/// Gaussian masses before a grid is declared under-resolved.
const QUADRATURE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridParams {
    pub n_points: usize,
    pub tail_tol: f64,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            n_points: 256,
            tail_tol: 1e-12,
        }
    }
}

impl GridParams {
    pub fn validate(&self) -> Result<(), SpectralError> {
        if self.n_points < 64 {
            return Err(SpectralError::InvalidGrid(format!(
                "n_points must be at least 64, got {}",
                self.n_points
            )));
        }
        if !(self.tail_tol > 0.0 && self.tail_tol <= 1e-6) {
            return Err(SpectralError::InvalidGrid(format!(
                "tail_tol must lie in (0, 1e-6], got {}",
                self.tail_tol
            )));
        }
        Ok(())
    }

    pub fn doubled(&self) -> Self {
        GridParams {
            n_points: 2 * self.n_points,
            ..*self
        }
    }
}

/// Quadrature grid on `[h, x_max]` with Lebesgue weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub d: u32,
    pub h: f64,
    pub x_max: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub nu_density: Vec<f64>,
    /// `weights[i] * nu_density[i]`: the ν-measure of node `i`.
    pub nu_mass: Vec<f64>,
}

impl GridSpec {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn sigma_nu2(&self) -> f64 {
        sigma_nu2(self.d)
    }

    pub fn sigma_y2(&self) -> f64 {
        sigma_y2(self.d)
    }

    /// Reassembles a grid from stored nodes and weights.
    pub fn from_parts(
        d: u32,
        h: f64,
        x_max: f64,
        nodes: Vec<f64>,
        weights: Vec<f64>,
    ) -> Result<Self, SpectralError> {
        if d < 2 {
            return Err(SpectralError::InvalidBranching(d));
        }
        if nodes.len() != weights.len() || nodes.is_empty() {
            return Err(SpectralError::InvalidGrid(
                "nodes and weights must be non-empty and of equal length".into(),
            ));
        }
        if !nodes.windows(2).all(|p| p[0] < p[1]) || nodes[0] < h || *nodes.last().unwrap() > x_max
        {
            return Err(SpectralError::InvalidGrid(
                "nodes must increase strictly inside [h, x_max]".into(),
            ));
        }
        if !weights.iter().all(|&w| w > 0.0 && w.is_finite()) {
            return Err(SpectralError::InvalidGrid("weights must be positive".into()));
        }
        let var = sigma_nu2(d);
        let nu_density: Vec<f64> = nodes.iter().map(|&x| normal_pdf(x, var)).collect();
        let nu_mass = weights.iter().zip(&nu_density).map(|(w, p)| w * p).collect();
        Ok(GridSpec {
            d,
            h,
            x_max,
            nodes,
            weights,
            nu_density,
            nu_mass,
        })
    }

    /// Largest absolute quadrature error over the ν-mass and every kernel row mass.
    pub fn quadrature_error(&self) -> f64 {
        let nu_exact = interval_mass(self.h, self.x_max, self.sigma_nu2());
        let nu_quad: f64 = self.nu_mass.iter().sum();
        let mut err = (nu_quad - nu_exact).abs();
        let var_y = self.sigma_y2();
        let d = self.d as f64;
        for &x in &self.nodes {
            let c = x / d;
            let exact = interval_mass(self.h - c, self.x_max - c, var_y);
            let quad: f64 = self
                .nodes
                .iter()
                .zip(&self.weights)
                .map(|(&y, &w)| w * normal_pdf(y - c, var_y))
                .sum();
            err = err.max((quad - exact).abs());
        }
        err
    }
}

/// Truncation point beyond which both the ν-tail and the innovation tail
/// seen from any node fall below `tail_tol`.
pub fn truncation_point(d: u32, h: f64, tail_tol: f64) -> f64 {
    let z_nu = upper_quantile(tail_tol, sigma_nu2(d));
    let z_y = upper_quantile(tail_tol, sigma_y2(d));
    let shrink = 1.0 - 1.0 / d as f64;
    // Column tail at x = x_max: P(Y > x_max - h_eff) with h_eff = x_max / d.
    let x_col = z_y / shrink;
    z_nu.max(x_col).max(h + 1.0)
}

/// Composite Gauss–Legendre grid for the level `h`.
pub fn build_grid(d: u32, h: f64, n_points: usize, tail_tol: f64) -> Result<GridSpec, SpectralError> {
    if d < 2 {
        return Err(SpectralError::InvalidBranching(d));
    }
    if !h.is_finite() {
        return Err(SpectralError::InvalidGrid(format!("level must be finite, got {h}")));
    }
    GridParams { n_points, tail_tol }.validate()?;
    let x_max = truncation_point(d, h, tail_tol);
    let panels = n_points.div_ceil(PANEL_ORDER);
    let (nodes, weights) = composite(h, x_max, panels, PANEL_ORDER);
    let grid = GridSpec::from_parts(d, h, x_max, nodes, weights)?;
    let error = grid.quadrature_error();
    if error > QUADRATURE_TOL {
        return Err(SpectralError::ResolutionInsufficient {
            n_points: grid.len(),
            error,
            tolerance: QUADRATURE_TOL,
        });
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::upper_tail;

    #[test]
    fn nu_variance_matches_branching() {
        let g2 = build_grid(2, 0.5, 128, 1e-12).unwrap();
        assert_eq!(g2.sigma_nu2(), 2.0);
        let i = 40;
        assert!((g2.nu_density[i] - normal_pdf(g2.nodes[i], 2.0)).abs() < 1e-16);
        let g3 = build_grid(3, 0.5, 128, 1e-12).unwrap();
        assert_eq!(g3.sigma_nu2(), 1.5);
        assert!((g3.sigma_y2() - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn half_mass_at_level_zero() {
        let g = build_grid(2, 0.0, 256, 1e-12).unwrap();
        let m: f64 = g.nu_mass.iter().sum();
        assert!((m - 0.5).abs() < 1e-10);
    }

    #[test]
    fn tails_beyond_truncation_are_small() {
        for d in [2, 3, 5] {
            let g = build_grid(d, 1.0, 256, 1e-12).unwrap();
            assert!(upper_tail(g.x_max, g.sigma_nu2()) < 1e-12);
            let shrink = 1.0 - 1.0 / d as f64;
            assert!(upper_tail(g.x_max * shrink, g.sigma_y2()) < 1e-12);
            let exact = upper_tail(g.h, g.sigma_nu2());
            let m: f64 = g.nu_mass.iter().sum();
            assert!((m - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert_eq!(build_grid(1, 0.0, 128, 1e-12), Err(SpectralError::InvalidBranching(1)));
        assert!(matches!(build_grid(2, 0.0, 32, 1e-12), Err(SpectralError::InvalidGrid(_))));
        assert!(matches!(build_grid(2, 0.0, 128, 1e-3), Err(SpectralError::InvalidGrid(_))));
    }

    #[test]
    fn coarse_grid_on_wide_domain_is_under_resolved() {
        let r = build_grid(2, -40.0, 64, 1e-12);
        assert!(matches!(r, Err(SpectralError::ResolutionInsufficient { .. })), "{r:?}");
    }
}
