use crate::spectral::GridParams;
use serde::Serialize;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown experiment kind '{0}'")]
    UnknownKind(String),
    #[error("unknown configuration key '{0}'")]
    UnknownKey(String),
    #[error("cannot parse {key} = '{value}'")]
    Parse { key: String, value: String },
    #[error("line {line}: expected key = value, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("cannot read config file: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Spectral,
    Recursion,
    Simulate,
    Spine,
    Traversal,
    Yaglom,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Spectral,
        ExperimentKind::Recursion,
        ExperimentKind::Simulate,
        ExperimentKind::Spine,
        ExperimentKind::Traversal,
        ExperimentKind::Yaglom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Spectral => "spectral",
            ExperimentKind::Recursion => "recursion",
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Spine => "spine",
            ExperimentKind::Traversal => "traversal",
            ExperimentKind::Yaglom => "yaglom",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConfigError::UnknownKind(s.to_string()))
    }
}

/// A fully specified experiment. `x = None` starts from `h* + 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub d: u32,
    pub grid: GridParams,
    pub n: usize,
    pub x: Option<f64>,
    pub alpha: Vec<f64>,
    pub reps: u64,
    pub eta: f64,
    pub r_cut: u32,
    pub k: usize,
    /// Conditioning heights of the tree-shape statistics.
    pub heights: Vec<usize>,
    /// Conditioned trees per height.
    pub trees: usize,
    pub master_seed: u64,
    pub workers: usize,
}

/// Keys accepted by [`ExperimentConfig::set`]; `_` and `-` are interchangeable.
pub const KEYS: [&str; 15] = [
    "kind", "d", "n_points", "tail_tol", "n", "x", "alpha", "reps", "eta", "r_cut", "k", "heights", "trees", "seed",
    "workers",
];

impl ExperimentConfig {
    /// Defaults for `kind`, sized to finish in seconds on one core.
    pub fn new(kind: ExperimentKind) -> Self {
        let (n, reps) = match kind {
            ExperimentKind::Spectral => (0, 0),
            ExperimentKind::Recursion => (2000, 0),
            ExperimentKind::Simulate => (64, 100_000),
            ExperimentKind::Spine => (50, 100_000),
            ExperimentKind::Traversal => (10_000, 200),
            ExperimentKind::Yaglom => (60, 5000),
        };
        ExperimentConfig {
            kind,
            d: 2,
            grid: GridParams::default(),
            n,
            x: None,
            alpha: vec![0.5, 1.0, 2.0],
            reps,
            eta: 0.5,
            r_cut: 20,
            k: 2,
            heights: vec![20, 40, 80],
            trees: 100,
            master_seed: 1,
            workers: 1,
        }
    }

    /// Sets one parameter from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let bad = || ConfigError::Parse {
            key: key.to_string(),
            value: value.to_string(),
        };
        fn num<T: FromStr>(v: &str, bad: impl Fn() -> ConfigError) -> Result<T, ConfigError> {
            v.replace('_', "").parse().map_err(|_| bad())
        }
        fn list<T: FromStr>(v: &str, bad: impl Fn() -> ConfigError) -> Result<Vec<T>, ConfigError> {
            v.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
        }
        match key.replace('-', "_").as_str() {
            "kind" => self.kind = value.parse()?,
            "d" => self.d = num(value, bad)?,
            "n_points" => self.grid.n_points = num(value, bad)?,
            "tail_tol" => self.grid.tail_tol = num(value, bad)?,
            "n" | "n_max" => self.n = num(value, bad)?,
            "x" => self.x = Some(num(value, bad)?),
            "alpha" => self.alpha = list(value, bad)?,
            "reps" => self.reps = parse_count(value).ok_or_else(bad)?,
            "eta" => self.eta = num(value, bad)?,
            "r_cut" => self.r_cut = num(value, bad)?,
            "k" => self.k = num(value, bad)?,
            "heights" => self.heights = list(value, bad)?,
            "trees" => self.trees = num(value, bad)?,
            "seed" | "master_seed" => self.master_seed = num(value, bad)?,
            "workers" => self.workers = num(value, bad)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies a flat `key = value` document; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Checks every parameter the chosen experiment consumes. Constraints
    /// that need `h*` are checked once the model exists, before sampling.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key, message: String| Err(ConfigError::Invalid { key, message });
        if self.d < 2 {
            return invalid("d", format!("branching number must be at least 2, got {}", self.d));
        }
        if let Err(e) = self.grid.validate() {
            return invalid("grid", e.to_string());
        }
        if self.workers == 0 || self.workers > 1024 {
            return invalid("workers", format!("must lie in 1..=1024, got {}", self.workers));
        }
        if let Some(x) = self.x {
            if !x.is_finite() {
                return invalid("x", format!("must be finite, got {x}"));
            }
        }
        let reps = |min: u64| {
            if self.reps < min {
                invalid("reps", format!("{} needs at least {min} replicates, got {}", self.kind, self.reps))
            } else {
                Ok(())
            }
        };
        match self.kind {
            ExperimentKind::Spectral => {}
            ExperimentKind::Recursion => {
                if self.n < 500 {
                    return invalid("n", format!("the one-arm fit needs n ≥ 500, got {}", self.n));
                }
                self.check_alpha()?;
            }
            ExperimentKind::Simulate => {
                if self.n == 0 {
                    return invalid("n", "must be at least 1".into());
                }
                reps(1000)?;
            }
            ExperimentKind::Spine => {
                if self.n == 0 {
                    return invalid("n", "chain length must be at least 1".into());
                }
                reps(1000)?;
            }
            ExperimentKind::Traversal => {
                if self.n < 10 {
                    return invalid("n", format!("traversal length must be at least 10, got {}", self.n));
                }
                reps(2)?;
                if self.k < 2 {
                    return invalid("k", format!("distance matrices need k ≥ 2, got {}", self.k));
                }
                if !(self.eta > 0.0 && self.eta.is_finite()) {
                    return invalid("eta", format!("must be positive, got {}", self.eta));
                }
                if self.r_cut == 0 {
                    return invalid("r_cut", "must be at least 1".into());
                }
                if self.heights.is_empty() || self.heights.contains(&0) {
                    return invalid("heights", "need at least one positive height".into());
                }
                if self.trees == 0 {
                    return invalid("trees", "must be at least 1".into());
                }
            }
            ExperimentKind::Yaglom => {
                if self.n == 0 {
                    return invalid("n", "must be at least 1".into());
                }
                reps(100)?;
                self.check_alpha()?;
            }
        }
        Ok(())
    }

    fn check_alpha(&self) -> Result<(), ConfigError> {
        if self.alpha.is_empty() || !self.alpha.iter().all(|a| *a > 0.0 && a.is_finite()) {
            return Err(ConfigError::Invalid {
                key: "alpha",
                message: format!("need positive finite values, got {:?}", self.alpha),
            });
        }
        Ok(())
    }
}

/// Accepts plain integers, `_` separators and exact scientific forms like `1e6`.
fn parse_count(s: &str) -> Option<u64> {
    let s = s.replace('_', "");
    if let Ok(v) = s.parse::<u64>() {
        return Some(v);
    }
    let v: f64 = s.parse().ok()?;
    (v >= 0.0 && v.fract() == 0.0 && v <= 2f64.powi(53)).then_some(v as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_file_then_overrides() {
        let mut c = ExperimentConfig::new(ExperimentKind::Simulate);
        c.apply_text("# survival run\nd = 3\nreps = 1e6  # clusters\nalpha=0.5, 2\n\nr-cut = 7\n").unwrap();
        assert_eq!((c.d, c.reps, c.r_cut), (3, 1_000_000, 7));
        assert_eq!(c.alpha, vec![0.5, 2.0]);
        c.set("seed", "99").unwrap();
        assert_eq!(c.master_seed, 99);
        assert!(matches!(c.apply_text("d 3"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(c.set("colour", "red"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.set("reps", "1.5"), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn validation_is_per_kind() {
        let mut c = ExperimentConfig::new(ExperimentKind::Recursion);
        assert!(c.validate().is_ok());
        c.n = 100;
        assert!(matches!(c.validate(), Err(ConfigError::Invalid { key: "n", .. })));
        let mut t = ExperimentConfig::new(ExperimentKind::Traversal);
        t.k = 1;
        assert!(matches!(t.validate(), Err(ConfigError::Invalid { key: "k", .. })));
        let mut s = ExperimentConfig::new(ExperimentKind::Spectral);
        s.d = 1;
        assert!(s.validate().is_err());
        s.d = 2;
        s.grid.n_points = 8;
        assert!(matches!(s.validate(), Err(ConfigError::Invalid { key: "grid", .. })));
        for kind in ExperimentKind::ALL {
            assert_eq!(kind.name().parse::<ExperimentKind>().unwrap(), kind);
            assert!(ExperimentConfig::new(kind).validate().is_ok(), "{kind}");
        }
    }
}
