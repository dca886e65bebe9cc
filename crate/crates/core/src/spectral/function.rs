use super::GridSpec;
use std::sync::Arc;

/// Element of `L²(ν)` sampled at the grid nodes; zero below the grid level.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Arc<GridSpec>,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Arc<GridSpec>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.len(), "one value per node");
        GridFunction { grid, values }
    }

    pub fn from_fn(grid: &Arc<GridSpec>, mut f: impl FnMut(f64) -> f64) -> Self {
        let values = grid.nodes.iter().map(|&x| f(x)).collect();
        GridFunction::new(grid.clone(), values)
    }

    pub fn constant(grid: &Arc<GridSpec>, c: f64) -> Self {
        GridFunction::new(grid.clone(), vec![c; grid.len()])
    }

    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// ν-weighted inner product over the grid.
    pub fn inner(&self, other: &GridFunction) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        inner_values(&self.grid.nu_mass, &self.values, &other.values)
    }

    /// `⟨f, 1⟩`.
    pub fn integral(&self) -> f64 {
        self.grid.nu_mass.iter().zip(&self.values).map(|(m, v)| m * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> GridFunction {
        debug_assert_eq!(self.len(), other.len());
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        GridFunction::new(self.grid.clone(), values)
    }

    pub fn scaled(&self, c: f64) -> GridFunction {
        self.map(|v| c * v)
    }

    pub fn product(&self, other: &GridFunction) -> GridFunction {
        self.zip_map(other, |a, b| a * b)
    }

    /// `self + c * other`.
    pub fn add_scaled(&self, c: f64, other: &GridFunction) -> GridFunction {
        self.zip_map(other, |a, b| a + c * b)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

pub(crate) fn inner_values(mass: &[f64], a: &[f64], b: &[f64]) -> f64 {
    mass.iter().zip(a).zip(b).map(|((m, x), y)| m * x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::build_grid;
    use proptest::prelude::*;

    fn grid() -> Arc<GridSpec> {
        Arc::new(build_grid(2, 0.8, 128, 1e-12).unwrap())
    }

    proptest! {
        #[test]
        fn inner_product_is_symmetric_bilinear(
            a in prop::collection::vec(-3.0..3.0f64, 128),
            b in prop::collection::vec(-3.0..3.0f64, 128),
            c in prop::collection::vec(-3.0..3.0f64, 128),
            s in -2.0..2.0f64,
        ) {
            let g = grid();
            let f = GridFunction::new(g.clone(), a);
            let h = GridFunction::new(g.clone(), b);
            let k = GridFunction::new(g, c);
            prop_assert!(f.inner(&f) >= 0.0);
            prop_assert!((f.inner(&h) - h.inner(&f)).abs() < 1e-14);
            let lhs = f.add_scaled(s, &h).inner(&k);
            let rhs = f.inner(&k) + s * h.inner(&k);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
