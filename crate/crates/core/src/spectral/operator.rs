use super::{GridFunction, GridSpec};
use crate::gaussian::normal_pdf;
use std::sync::Arc;

/// Nyström matrix `M[i][j] = d·ρ_Y(x_j − x_i/d)·w_j`, row-major.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    grid: Arc<GridSpec>,
    entries: Vec<f64>,
}

pub fn assemble_operator(grid: Arc<GridSpec>) -> OperatorMatrix {
    let n = grid.len();
    let mut entries = vec![0.0; n * n];
    for (i, row) in entries.chunks_exact_mut(n).enumerate() {
        kernel_row(&grid, grid.nodes[i], row);
    }
    OperatorMatrix { grid, entries }
}

/// Fills `row[j] = d·ρ_Y(x_j − x/d)·w_j`.
fn kernel_row(grid: &GridSpec, x: f64, row: &mut [f64]) {
    let d = grid.d as f64;
    let var = grid.sigma_y2();
    let c = x / d;
    for ((r, &y), &w) in row.iter_mut().zip(&grid.nodes).zip(&grid.weights) {
        *r = d * normal_pdf(y - c, var) * w;
    }
}

impl OperatorMatrix {
    pub fn grid(&self) -> &Arc<GridSpec> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.len()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.dim();
        &self.entries[i * n..(i + 1) * n]
    }

    pub fn apply_values(&self, f: &[f64], out: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(f.len(), n);
        for (o, row) in out.iter_mut().zip(self.entries.chunks_exact(n)) {
            *o = dot(row, f);
        }
    }

    pub fn apply(&self, f: &GridFunction) -> GridFunction {
        let mut out = vec![0.0; self.dim()];
        self.apply_values(f.values(), &mut out);
        GridFunction::new(self.grid.clone(), out)
    }

    /// `Lⁿ[f]`.
    pub fn power(&self, f: &GridFunction, n: usize) -> GridFunction {
        let mut cur = f.values().to_vec();
        let mut next = vec![0.0; self.dim()];
        for _ in 0..n {
            self.apply_values(&cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        GridFunction::new(self.grid.clone(), cur)
    }

    /// Nyström evaluation of `L[f](x)` at an arbitrary point; zero below the level.
    pub fn apply_at(&self, x: f64, f: &[f64]) -> f64 {
        if x < self.grid.h {
            return 0.0;
        }
        let d = self.grid.d as f64;
        let var = self.grid.sigma_y2();
        let c = x / d;
        self.grid
            .nodes
            .iter()
            .zip(&self.grid.weights)
            .zip(f)
            .map(|((&y, &w), &v)| d * normal_pdf(y - c, var) * w * v)
            .sum()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators keep the reduction vectorizable and deterministic.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}
