use super::{FineTable, SpectralError};
use crate::gaussian::{normal_pdf, sigma_y2};

/// Default number of `y` samples per kernel row.
pub(crate) const KERNEL_SAMPLES: usize = 8193;
/// Pre-normalization mass deviation treated as a truncation failure.
const MASS_FAILURE: f64 = 1e-4;

/// Tabulated CDFs of the spine kernel `𝒦(x, dy) = d·χ(y)/χ(x)·ρ_Y(y − x/d) dy`,
/// one row per grid node, on a shared uniform `y` grid over `[h*, x_max]`.
#[derive(Debug, Clone)]
pub struct KernelTables {
    rows_x: Vec<f64>,
    y0: f64,
    dy: f64,
    samples: usize,
    cdf: Vec<f64>,
    mass: Vec<f64>,
}

/// One tabulated row.
#[derive(Debug, Clone, Copy)]
pub struct KernelCdf<'a> {
    pub x: f64,
    pub y0: f64,
    pub dy: f64,
    pub values: &'a [f64],
    pub mass_before_normalization: f64,
}

impl KernelTables {
    pub(crate) fn build(
        d: u32,
        rows_x: &[f64],
        chi_rows: &[f64],
        chi: &FineTable,
        h_star: f64,
        x_max: f64,
        samples: usize,
    ) -> Result<Self, SpectralError> {
        let dy = (x_max - h_star) / (samples - 1) as f64;
        let ys: Vec<f64> = (0..samples).map(|k| h_star + dy * k as f64).collect();
        let chi_y: Vec<f64> = ys.iter().map(|&y| chi.eval(y)).collect();
        let df = d as f64;
        let var = sigma_y2(d);
        let mut cdf = vec![0.0; rows_x.len() * samples];
        let mut mass = Vec::with_capacity(rows_x.len());
        let mut dens = vec![0.0; samples];
        for (r, (&x, &cx)) in rows_x.iter().zip(chi_rows).enumerate() {
            let c = x / df;
            for ((p, &y), &cy) in dens.iter_mut().zip(&ys).zip(&chi_y) {
                *p = df * cy / cx * normal_pdf(y - c, var);
            }
            let row = &mut cdf[r * samples..(r + 1) * samples];
            row[0] = 0.0;
            for k in 1..samples {
                row[k] = row[k - 1] + 0.5 * dy * (dens[k - 1] + dens[k]);
            }
            let total = row[samples - 1];
            if !((total - 1.0).abs() <= MASS_FAILURE) {
                return Err(SpectralError::KernelTruncation { row: r, mass: total });
            }
            row.iter_mut().for_each(|v| *v /= total);
            row[samples - 1] = 1.0;
            mass.push(total);
        }
        Ok(KernelTables {
            rows_x: rows_x.to_vec(),
            y0: h_star,
            dy,
            samples,
            cdf,
            mass,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows_x.len()
    }

    pub fn row(&self, i: usize) -> KernelCdf<'_> {
        KernelCdf {
            x: self.rows_x[i],
            y0: self.y0,
            dy: self.dy,
            values: &self.cdf[i * self.samples..(i + 1) * self.samples],
            mass_before_normalization: self.mass[i],
        }
    }

    pub fn max_mass_deviation(&self) -> f64 {
        self.mass.iter().fold(0.0, |m, v| m.max((v - 1.0).abs()))
    }

    /// Inverse-CDF draw from `𝒦(x, ·)` at uniform `u`, interpolating the
    /// quantile linearly in `x` between neighbouring rows.
    #[inline]
    pub fn sample(&self, x: f64, u: f64) -> f64 {
        let n = self.rows_x.len();
        let j = self.rows_x.partition_point(|&r| r <= x).clamp(1, n - 1);
        let (x0, x1) = (self.rows_x[j - 1], self.rows_x[j]);
        let t = (x - x0) / (x1 - x0);
        let q0 = self.row(j - 1).quantile(u);
        let q1 = self.row(j).quantile(u);
        let y = q0 + t * (q1 - q0);
        y.clamp(self.y0, self.y0 + self.dy * (self.samples - 1) as f64)
    }
}

impl KernelCdf<'_> {
    pub fn y(&self, k: usize) -> f64 {
        self.y0 + self.dy * k as f64
    }

    /// Piecewise-linear CDF value at `y`.
    pub fn eval(&self, y: f64) -> f64 {
        if y <= self.y0 {
            return 0.0;
        }
        let t = (y - self.y0) / self.dy;
        let last = self.values.len() - 1;
        if t >= last as f64 {
            return 1.0;
        }
        let k = t as usize;
        let r = t - k as f64;
        self.values[k] + r * (self.values[k + 1] - self.values[k])
    }

    #[inline]
    pub fn quantile(&self, u: f64) -> f64 {
        let c = self.values;
        let k = c.partition_point(|&v| v < u);
        if k == 0 {
            return self.y0;
        }
        if k >= c.len() {
            return self.y(c.len() - 1);
        }
        let span = c[k] - c[k - 1];
        let r = if span > 0.0 { (u - c[k - 1]) / span } else { 0.0 };
        self.y0 + self.dy * ((k - 1) as f64 + r)
    }

    /// Mean `y0 + ∫(1 − F)` of the tabulated law.
    pub fn mean(&self) -> f64 {
        let tail: f64 = self
            .values
            .windows(2)
            .map(|p| 0.5 * self.dy * ((1.0 - p[0]) + (1.0 - p[1])))
            .sum();
        self.y0 + tail
    }
}
