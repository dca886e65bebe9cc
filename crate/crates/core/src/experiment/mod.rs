//! Experiment driver: validated configuration, cached models, and stable
//! CSV/JSON outputs with a run manifest.
//!
//! Every CSV body is a function of the configuration and master seed alone.
//! The manifest additionally records wall time and so differs between runs.

mod cache;
mod config;
mod output;

pub use cache::{cache_key, cache_path, load_or_build_model, model_fingerprint, CacheStatus, H_STAR_TOL};
pub use config::{ConfigError, ExperimentConfig, ExperimentKind, KEYS};
pub use output::{format_float, sha256_hex, Field, OutputDir, Table};

use crate::cluster::{conditional_generation_statistic, estimate_survival, fit_tail, log_thresholds, rescaled, size_tail_table};
use crate::field::TestFunction;
use crate::mc::{McError, Plan};
use crate::recursion::{one_arm_series, yaglom_laplace_at, RecursionError};
use crate::row;
use crate::spectral::{find_h_star, SpectralError, SpectralModel};
use crate::spine::{pi_bin_edges, pi_histogram, verify_many_to_few_1, verify_many_to_few_2, Comparison};
use crate::stats::{ks_statistic, median, MeanAccumulator};
use crate::traversal::{conditioned_run, lln_average, lln_limit, martingale_suite, ConditionedConfig};
use serde::Serialize;
use serde_json::json;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

/// Node cap of the cluster-size tail table.
const TAIL_NODE_CAP: u64 = 100_000;
const MARTINGALE_BINS: usize = 20;
const PI_BINS: usize = 30;
const PI_WINDOW: f64 = 6.0;
/// Generations of the many-to-few table.
const MOMENT_GENERATIONS: [usize; 5] = [0, 1, 2, 4, 8];

#[derive(Debug, Error)]
pub enum ModuleError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Recursion(#[from] RecursionError),
    #[error(transparent)]
    Mc(#[from] McError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("{experiment} experiment failed: {source}")]
    Failed {
        experiment: ExperimentKind,
        #[source]
        source: ModuleError,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub model_fingerprint: String,
    pub model_cache: String,
    pub tool_version: String,
    pub wall_time_seconds: f64,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
}

/// Validates `config`, obtains the model (through `cache_dir` when given),
/// runs the experiment and writes its outputs and `manifest.json`.
pub fn run(config: &ExperimentConfig, out_dir: &Path, cache_dir: Option<&Path>) -> Result<RunManifest, ExperimentError> {
    config.validate()?;
    let start = Instant::now();
    let fail = |source: ModuleError| ExperimentError::Failed {
        experiment: config.kind,
        source,
    };
    let (model, status) = match cache_dir {
        Some(dir) => load_or_build_model(config.d, &config.grid, dir).map_err(|e| fail(e.into()))?,
        None => (find_h_star(config.d, &config.grid, H_STAR_TOL).map_err(|e| fail(e.into()))?, CacheStatus::Built),
    };
    let x = config.x.unwrap_or(model.h_star + 1.0);
    if x < model.h_star {
        return Err(ConfigError::Invalid {
            key: "x",
            message: format!("root value {x} lies below h* = {}", model.h_star),
        }
        .into());
    }
    let mut out = OutputDir::create(out_dir).map_err(|e| fail(e.into()))?;
    let doc = model.to_document();
    out.write_json("model.json", &doc).map_err(|e| fail(e.into()))?;
    let ctx = Context {
        config,
        model: &model,
        x,
        plan: Plan::new(config.master_seed, config.kind.name(), config.workers),
    };
    match config.kind {
        ExperimentKind::Spectral => ctx.spectral(&mut out),
        ExperimentKind::Recursion => ctx.recursion(&mut out),
        ExperimentKind::Simulate => ctx.simulate(&mut out),
        ExperimentKind::Spine => ctx.spine(&mut out),
        ExperimentKind::Traversal => ctx.traversal(&mut out),
        ExperimentKind::Yaglom => ctx.yaglom(&mut out),
    }
    .map_err(fail)?;
    let mut manifest = RunManifest {
        config: config.clone(),
        model_fingerprint: model_fingerprint(&doc),
        model_cache: match status {
            CacheStatus::Hit => "hit".into(),
            CacheStatus::Built => "built".into(),
            CacheStatus::Rebuilt(reason) => format!("rebuilt: {reason}"),
        },
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_seconds: 0.0,
        outputs: out.files.clone(),
    };
    manifest.outputs.push("manifest.json".into());
    manifest.wall_time_seconds = start.elapsed().as_secs_f64();
    out.write_json("manifest.json", &manifest).map_err(|e| fail(e.into()))?;
    Ok(manifest)
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    model: &'a SpectralModel,
    x: f64,
    plan: Plan,
}

type Outcome = Result<(), ModuleError>;

impl Context<'_> {
    fn spectral(&self, out: &mut OutputDir) -> Outcome {
        let m = self.model;
        out.write_json(
            "spectral.json",
            &json!({
                "d": m.d,
                "h_star": m.h_star,
                "C1": m.c1,
                "gamma": m.gamma,
                "sigma2": m.sigma2,
                "lambda": m.lambda,
                "eigen_residual": m.eigen_residual(),
            }),
        )?;
        let mut t = Table::new(&["x", "weight", "chi", "V"]);
        let g = m.grid();
        for i in 0..g.len() {
            t.push(row![g.nodes[i], g.weights[i], m.chi.values()[i], m.v.values()[i]]);
        }
        out.write_csv("chi.csv", &t)?;
        Ok(())
    }

    fn recursion(&self, out: &mut OutputDir) -> Outcome {
        let m = self.model;
        let n = self.config.n;
        let arm = one_arm_series(m, n)?;
        let mut t = Table::new(&["n", "a_n", "b_n", "inv_a_slope_estimate"]);
        let inv_a0 = 1.0 / arm.a[0];
        for (k, (a, b)) in arm.a.iter().zip(&arm.b).enumerate() {
            // (1/a_n − 1/a_0)/n tends to 1/C₁; undefined at n = 0.
            let slope = if k == 0 { f64::NAN } else { (1.0 / a - inv_a0) / k as f64 };
            t.push(row![k, *a, *b, slope]);
        }
        out.write_csv("recursion.csv", &t)?;
        out.write_json(
            "one_arm.json",
            &json!({
                "n_max": n,
                "slope_inverse_a": arm.slope_inverse_a,
                "rho_hat": arm.rho_hat,
                "C1_hat": arm.c1_hat,
                "C1": m.c1,
            }),
        )?;
        // Laplace transforms at powers of two and at n itself.
        let mut checkpoints: Vec<usize> = std::iter::successors(Some(1usize), |k| Some(k * 2)).take_while(|&k| k < n).collect();
        checkpoints.push(n);
        let mut t = Table::new(&["alpha", "n", "x", "laplace", "limit"]);
        for &alpha in &self.config.alpha {
            for &k in &checkpoints {
                let v = yaglom_laplace_at(m, alpha, k, self.x)?;
                t.push(row![alpha, k, self.x, v, m.c1 / (m.c1 + alpha)]);
            }
        }
        out.write_csv("laplace.csv", &t)?;
        Ok(())
    }

    fn simulate(&self, out: &mut OutputDir) -> Outcome {
        let (m, n, reps) = (self.model, self.config.n, self.config.reps);
        let mut ns: Vec<usize> = std::iter::successors(Some(1usize), |k| Some(k * 2)).take_while(|&k| k < n).collect();
        ns.push(n);
        let mut t = Table::new(&["n", "p_hat", "se", "n_phat_over_C1chi"]);
        for &k in &ns {
            let e = estimate_survival(&self.plan.derive(&format!("survival/{k}")), m, self.x, k, reps)?;
            t.push(row![k, e.mean, e.std_error, e.meta["n_phat_over_c1chi"]]);
        }
        out.write_csv("survival.csv", &t)?;
        let ms = log_thresholds(10, 10_000);
        let table = size_tail_table(&self.plan.derive("tail"), m, self.x, reps, TAIL_NODE_CAP, &ms)?;
        let mut t = Table::new(&["m", "p_hat", "se"]);
        for ((&m_j, &p), &se) in ms.iter().zip(&table.p_hat).zip(&table.std_error) {
            t.push(row![m_j, p, se]);
        }
        out.write_csv("tail.csv", &t)?;
        // The slope is fitted over the upper two decades only.
        let lo = ms.partition_point(|&v| v < 100);
        let fit = fit_tail(crate::cluster::TailTable {
            m: table.m[lo..].to_vec(),
            p_hat: table.p_hat[lo..].to_vec(),
            std_error: table.std_error[lo..].to_vec(),
            ..table.clone()
        });
        out.write_json(
            "tail_fit.json",
            &json!({
                "slope": fit.slope,
                "intercept": fit.intercept,
                "m_min": 100,
                "m_max": 10_000,
                "reps": reps,
                "truncated_fraction": table.truncated_fraction,
                "flagged": fit.flagged,
            }),
        )?;
        Ok(())
    }

    fn spine(&self, out: &mut OutputDir) -> Outcome {
        let (m, n, reps) = (self.model, self.config.n, self.config.reps);
        let edges = pi_bin_edges(m, PI_BINS, PI_WINDOW);
        let h = pi_histogram(&self.plan.derive("pi"), m, self.x, n, reps, &edges)?;
        let mut t = Table::new(&["lo", "hi", "count", "expected_count", "pi_mass"]);
        for j in 0..h.counts.len() {
            let hi = h.edges.get(j + 1).copied().unwrap_or(m.grid().x_max);
            t.push(row![h.edges[j], hi, h.counts[j], h.expected[j] * reps as f64, h.expected[j]]);
        }
        out.write_csv("spine_histogram.csv", &t)?;
        out.write_json(
            "spine_gof.json",
            &json!({"n": n, "chains": reps, "statistic": h.statistic, "dof": h.dof, "p_value": h.p_value}),
        )?;
        let fs = [TestFunction::One, TestFunction::Chi];
        let mut t = Table::new(&["quantity", "n", "lhs", "lhs_se", "rhs", "rhs_se", "truth", "z_score"]);
        let mut push = |c: &Comparison, k: usize| {
            t.push(row![
                c.quantity.as_str(),
                k,
                c.lhs.mean,
                c.lhs.std_error,
                c.rhs.mean,
                c.rhs.std_error,
                c.truth,
                c.max_abs_z()
            ]);
        };
        for &k in MOMENT_GENERATIONS.iter().filter(|&&k| k <= n) {
            let plan = self.plan.derive(&format!("moments/{k}"));
            for f in &fs {
                push(&verify_many_to_few_1(&plan.derive(&f.label()), m, self.x, k, f, reps)?, k);
            }
            for (i, f) in fs.iter().enumerate() {
                for g in &fs[i..] {
                    let p = plan.derive(&format!("{}x{}", f.label(), g.label()));
                    push(&verify_many_to_few_2(&p, m, self.x, k, f, g, reps)?, k);
                }
            }
        }
        out.write_csv("many_to_few.csv", &t)?;
        Ok(())
    }

    fn traversal(&self, out: &mut OutputDir) -> Outcome {
        let (m, c) = (self.model, self.config);
        let s = martingale_suite(&self.plan.derive("martingale"), m, self.x, c.n, c.reps, MARTINGALE_BINS)?;
        let mut t = Table::new(&["bin", "lo", "count", "increment_mean", "increment_se", "z", "squared_mean", "v_mean"]);
        let z = s.increment_z();
        for (b, (inc, z)) in s.increment.iter().zip(&z).enumerate() {
            t.push(row![b, s.edges[b], inc.count, inc.mean(), inc.std_error(), *z, s.squared[b].mean(), s.v[b].mean()]);
        }
        out.write_csv("trace_summary.csv", &t)?;
        out.write_json(
            "martingale.json",
            &json!({
                "n": c.n,
                "traces": s.traces,
                "v_slope": s.v_slope(),
                "variance_rate": s.variance_rate(),
                "sigma2": m.sigma2,
                "s_final_mean": s.s_final.mean(),
                "s_final_se": s.s_final.std_error(),
            }),
        )?;

        let fs = [
            TestFunction::ChiCapped(m.chi_at(m.h_star + 1.0)),
            TestFunction::Indicator(m.h_star + 0.5, m.h_star + 1.5),
        ];
        let accs = lln_average(&self.plan.derive("lln"), m, self.x, c.n, &fs, c.reps)?;
        let mut t = Table::new(&["f", "m_n", "se", "limit", "rel_error"]);
        for (f, a) in fs.iter().zip(&accs) {
            let limit = lln_limit(m, f);
            t.push(row![f.label(), a.mean(), a.std_error(), limit, a.mean() / limit - 1.0]);
        }
        out.write_csv("lln.csv", &t)?;

        let cfg = ConditionedConfig {
            k: c.k,
            bad: vec![(c.eta, c.r_cut)],
            ..ConditionedConfig::default()
        };
        let mut bad = Table::new(&["n", "eta", "r_cut", "mean_fraction", "se"]);
        let mut norms = Table::new(&[
            "n",
            "k",
            "trees",
            "median_frobenius",
            "mean_frobenius",
            "median_size_over_n2",
            "over_cap",
            "attempts",
        ]);
        for &h in &c.heights {
            let run = conditioned_run(&self.plan.derive(&format!("conditioned/{h}")), m, self.x, h, c.trees, &cfg)?;
            let mut acc = MeanAccumulator::default();
            run.samples.iter().for_each(|s| acc.push(s.bad[0]));
            bad.push(row![h, c.eta, c.r_cut, acc.mean(), acc.std_error()]);
            let mut f: Vec<f64> = run.samples.iter().map(|s| s.frobenius).collect();
            let mean_f = f.iter().sum::<f64>() / f.len() as f64;
            let mut sz: Vec<f64> = run.samples.iter().map(|s| s.size as f64 / (h * h) as f64).collect();
            norms.push(row![h, c.k, run.samples.len(), median(&mut f), mean_f, median(&mut sz), run.over_cap, run.attempts]);
        }
        out.write_csv("bad_fraction.csv", &bad)?;
        out.write_csv("matrix_norms.csv", &norms)?;
        Ok(())
    }

    fn yaglom(&self, out: &mut OutputDir) -> Outcome {
        let (m, c) = (self.model, self.config);
        let s = conditional_generation_statistic(&self.plan, m, self.x, c.n, &TestFunction::Chi, c.reps as usize)?;
        let r = rescaled(m, &s, &TestFunction::Chi);
        let mut t = Table::new(&["index", "z", "rescaled"]);
        for (i, (z, w)) in s.z_chi.iter().zip(&r.0).enumerate() {
            t.push(row![i, *z, *w]);
        }
        out.write_csv("yaglom_samples.csv", &t)?;
        let mut t = Table::new(&["alpha", "mc", "mc_se", "recursion", "z_score", "limit"]);
        for &alpha in &c.alpha {
            let mut acc = MeanAccumulator::default();
            s.z_chi.iter().for_each(|z| acc.push((-alpha * z).exp()));
            let exact = yaglom_laplace_at(m, alpha, c.n, self.x)?;
            t.push(row![alpha, acc.mean(), acc.std_error(), exact, (acc.mean() - exact) / acc.std_error(), m.c1 / (m.c1 + alpha)]);
        }
        out.write_csv("yaglom_laplace.csv", &t)?;
        out.write_json(
            "yaglom.json",
            &json!({
                "n": c.n,
                "x": self.x,
                "accepted": s.z_chi.len(),
                "attempts": s.attempts,
                "ks_exp1": ks_statistic(&r.0, |v| if v > 0.0 { -(-v).exp_m1() } else { 0.0 }),
            }),
        )?;
        Ok(())
    }
}
