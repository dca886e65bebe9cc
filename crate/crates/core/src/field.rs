//! Test functions of the field value, evaluable both off-grid (for Monte
//! Carlo) and on the quadrature grid (for the matrix identities).

use crate::spectral::{GridFunction, SpectralModel};
use std::fmt;
use std::sync::Arc;

#[derive(Clone)]
pub enum TestFunction {
    One,
    Chi,
    ChiSquared,
    /// `min(χ, cap)`.
    ChiCapped(f64),
    /// Indicator of `[lo, hi)`.
    Indicator(f64, f64),
    /// Any other function, with a label.
    Custom(&'static str, Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

impl TestFunction {
    pub fn custom(label: &'static str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        TestFunction::Custom(label, Arc::new(f))
    }

    pub fn label(&self) -> String {
        match self {
            TestFunction::One => "1".into(),
            TestFunction::Chi => "chi".into(),
            TestFunction::ChiSquared => "chi^2".into(),
            TestFunction::ChiCapped(c) => format!("min(chi,{c})"),
            TestFunction::Indicator(a, b) => format!("1[{a},{b})"),
            TestFunction::Custom(name, _) => (*name).into(),
        }
    }

    #[inline]
    pub fn eval(&self, model: &SpectralModel, x: f64) -> f64 {
        match self {
            TestFunction::One => 1.0,
            TestFunction::Chi => model.chi_at(x),
            TestFunction::ChiSquared => model.chi_at(x).powi(2),
            TestFunction::ChiCapped(c) => model.chi_at(x).min(*c),
            TestFunction::Indicator(a, b) => f64::from(x >= *a && x < *b),
            TestFunction::Custom(_, f) => f(x),
        }
    }

    /// Grid representative; χ-based variants use the eigenvector values.
    pub fn on_grid(&self, model: &SpectralModel) -> GridFunction {
        match self {
            TestFunction::Chi => model.chi.clone(),
            TestFunction::ChiSquared => model.chi.product(&model.chi),
            TestFunction::ChiCapped(c) => model.chi.map(|v| v.min(*c)),
            _ => model.function(|x| self.eval(model, x)),
        }
    }
}
