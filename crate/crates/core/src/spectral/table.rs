/// Behaviour of a [`FineTable`] above its last sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extrapolation {
    /// Continue with the slope of the final interval.
    Linear,
    /// Hold the final value.
    Constant,
}

/// Uniformly sampled function with linear interpolation; zero below `lo`.
#[derive(Debug, Clone)]
pub struct FineTable {
    lo: f64,
    step: f64,
    values: Vec<f64>,
    tail: Extrapolation,
}

impl FineTable {
    pub fn build(lo: f64, hi: f64, samples: usize, tail: Extrapolation, f: impl Fn(f64) -> f64) -> Self {
        assert!(samples >= 2 && hi > lo);
        let step = (hi - lo) / (samples - 1) as f64;
        let values = (0..samples).map(|k| f(lo + step * k as f64)).collect();
        FineTable { lo, step, values, tail }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.step * (self.values.len() - 1) as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        if x < self.lo {
            return 0.0;
        }
        let t = (x - self.lo) / self.step;
        let last = self.values.len() - 1;
        if t >= last as f64 {
            let v = self.values[last];
            return match self.tail {
                Extrapolation::Constant => v,
                Extrapolation::Linear => v + (v - self.values[last - 1]) * (t - last as f64),
            };
        }
        let k = t as usize;
        let r = t - k as f64;
        self.values[k] + r * (self.values[k + 1] - self.values[k])
    }
}
