//! Level-set clusters of the forward tree as a branching process with
//! killing: each vertex has `d` children with value `parent/d + Y`, and
//! children below the level are discarded together with their subtrees.

use crate::field::TestFunction;
use crate::gaussian::{sigma_nu2, sigma_y2};
use crate::mc::{EstimatorResult, McError, McRng, Merge, Plan, Samples};
use crate::spectral::SpectralModel;
use crate::stats::{linear_fit, MeanAccumulator};
use rand::Rng;
use rand_distr::StandardNormal;
use std::ops::Range;

/// Parent marker of the root.
pub const ROOT: u32 = u32::MAX;

/// Offspring law of the killed branching process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branching {
    pub d: u32,
    pub h: f64,
    inv_d: f64,
    sd: f64,
}

impl Branching {
    pub fn new(d: u32, h: f64) -> Self {
        assert!(d >= 2);
        Branching {
            d,
            h,
            inv_d: 1.0 / d as f64,
            sd: sigma_y2(d).sqrt(),
        }
    }

    pub fn critical(model: &SpectralModel) -> Self {
        Branching::new(model.d, model.h_star)
    }

    /// Value of one child, before killing.
    #[inline]
    pub fn child<R: Rng + ?Sized>(&self, parent: f64, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        parent * self.inv_d + self.sd * z
    }

    /// Appends the surviving children of every value in `cur` to `next`.
    #[inline]
    pub fn next_generation<R: Rng + ?Sized>(&self, rng: &mut R, cur: &[f64], next: &mut Vec<f64>) {
        next.clear();
        for &p in cur {
            for _ in 0..self.d {
                let c = self.child(p, rng);
                if c >= self.h {
                    next.push(c);
                }
            }
        }
    }

    /// Field values of generation `n` from a root at `x`; empty after extinction.
    pub fn generation<R: Rng + ?Sized>(&self, rng: &mut R, x: f64, n: usize, buf: &mut Vec<f64>, scratch: &mut Vec<f64>) {
        buf.clear();
        buf.push(x);
        for _ in 0..n {
            if buf.is_empty() {
                return;
            }
            self.next_generation(rng, buf, scratch);
            std::mem::swap(buf, scratch);
        }
    }

    /// Total progeny from a root at `x`, counted depth-first up to `cap`.
    /// Returns the count and whether the cap stopped the exploration.
    pub fn total_size<R: Rng + ?Sized>(&self, rng: &mut R, x: f64, cap: u64, stack: &mut Vec<f64>) -> (u64, bool) {
        stack.clear();
        stack.push(x);
        let mut count = 0u64;
        while let Some(v) = stack.pop() {
            count += 1;
            if count >= cap {
                return (count, true);
            }
            for _ in 0..self.d {
                let c = self.child(v, rng);
                if c >= self.h {
                    stack.push(c);
                }
            }
        }
        (count, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterNode {
    pub value: f64,
    pub parent: u32,
    pub generation: u32,
    pub first_child: u32,
    pub n_children: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationReason {
    GenerationCap,
    NodeCap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Truncation {
    pub generation: u32,
    pub reason: TruncationReason,
}

/// Breadth-first arena: generations and sibling groups are contiguous.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cluster {
    pub nodes: Vec<ClusterNode>,
    gen_start: Vec<u32>,
    pub truncated_at: Option<Truncation>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Root {
    Value(f64),
    /// Root drawn from ν; below the level the cluster is empty.
    Nu,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-empty generations.
    pub fn depth(&self) -> usize {
        self.gen_start.len()
    }

    /// Largest generation index, if any node exists.
    pub fn height(&self) -> Option<u32> {
        self.nodes.last().map(|n| n.generation)
    }

    pub fn generation_range(&self, k: usize) -> Range<usize> {
        if k >= self.gen_start.len() {
            return self.nodes.len()..self.nodes.len();
        }
        let lo = self.gen_start[k] as usize;
        let hi = self.gen_start.get(k + 1).map_or(self.nodes.len(), |&s| s as usize);
        lo..hi
    }

    pub fn generation(&self, k: usize) -> &[ClusterNode] {
        &self.nodes[self.generation_range(k)]
    }

    pub fn children(&self, i: usize) -> Range<usize> {
        let n = &self.nodes[i];
        n.first_child as usize..(n.first_child + n.n_children) as usize
    }

    /// Appends a node, keeping generations contiguous.
    pub(crate) fn push(&mut self, value: f64, parent: u32) -> u32 {
        let generation = if parent == ROOT {
            0
        } else {
            self.nodes[parent as usize].generation + 1
        };
        let idx = self.nodes.len() as u32;
        if generation as usize == self.gen_start.len() {
            self.gen_start.push(idx);
        }
        debug_assert_eq!(generation as usize + 1, self.gen_start.len());
        if parent != ROOT {
            let p = &mut self.nodes[parent as usize];
            if p.n_children == 0 {
                p.first_child = idx;
            }
            debug_assert_eq!(p.first_child + p.n_children, idx);
            p.n_children += 1;
        }
        self.nodes.push(ClusterNode {
            value,
            parent,
            generation,
            first_child: 0,
            n_children: 0,
        });
        idx
    }

    /// Grows the breadth-first arena from `start` (the first unexpanded node)
    /// until extinction or a cap.
    pub(crate) fn grow<R: Rng + ?Sized>(&mut self, br: &Branching, rng: &mut R, gen_cap: u32, node_cap: usize) {
        let mut i = 0usize;
        while i < self.nodes.len() {
            let (value, generation) = (self.nodes[i].value, self.nodes[i].generation);
            if generation >= gen_cap {
                self.truncated_at = Some(Truncation {
                    generation,
                    reason: TruncationReason::GenerationCap,
                });
                return;
            }
            for _ in 0..br.d {
                let c = br.child(value, rng);
                if c >= br.h {
                    if self.nodes.len() >= node_cap {
                        self.truncated_at = Some(Truncation {
                            generation: generation + 1,
                            reason: TruncationReason::NodeCap,
                        });
                        return;
                    }
                    self.push(c, i as u32);
                }
            }
            i += 1;
        }
    }
}

/// Breadth-first cluster sample with generation and node caps.
pub fn sample_cluster(
    rng: &mut McRng,
    d: u32,
    h: f64,
    root: Root,
    gen_cap: u32,
    node_cap: usize,
) -> Result<Cluster, McError> {
    if d < 2 || gen_cap == 0 || node_cap == 0 {
        return Err(McError::InvalidArgument(format!(
            "need d ≥ 2 and positive caps, got d = {d}, gen_cap = {gen_cap}, node_cap = {node_cap}"
        )));
    }
    let x = match root {
        Root::Value(x) if x >= h => x,
        Root::Value(x) => {
            return Err(McError::InvalidArgument(format!("root value {x} is below the level {h}")));
        }
        Root::Nu => {
            let z: f64 = rng.sample(StandardNormal);
            let x = sigma_nu2(d).sqrt() * z;
            if x < h {
                return Ok(Cluster::default());
            }
            x
        }
    };
    let br = Branching::new(d, h);
    let mut c = Cluster::default();
    c.push(x, ROOT);
    c.grow(&br, rng, gen_cap, node_cap);
    Ok(c)
}

pub(crate) fn check_root(model: &SpectralModel, x: f64) -> Result<(), McError> {
    if !(x >= model.h_star) || !x.is_finite() {
        return Err(McError::InvalidArgument(format!(
            "root value {x} must be at least h* = {}",
            model.h_star
        )));
    }
    Ok(())
}

/// `P_x[N_n ≠ ∅]` by plain sampling.
pub fn estimate_survival(plan: &Plan, model: &SpectralModel, x: f64, n: usize, reps: u64) -> Result<EstimatorResult, McError> {
    check_root(model, x)?;
    let scale = n as f64 / (model.c1 * model.chi_at(x));
    if n == 0 {
        return Ok(EstimatorResult::exact(1.0, plan.master_seed).with_meta("n_phat_over_c1chi", 0.0));
    }
    let br = Branching::critical(model);
    let acc = plan.replicate(
        reps,
        || (MeanAccumulator::default(), Scratch::default()),
        |(acc, Scratch { buf, next }), rng, _| {
            br.generation(rng, x, n, buf, next);
            acc.push(f64::from(!buf.is_empty()));
        },
    )?;
    finish_survival(plan, acc.0, n, reps, scale)
}

/// `P_x[N_n ≠ ∅]` on the full regular tree, whose root has `d + 1` children.
pub fn estimate_survival_full_tree(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    n: usize,
    reps: u64,
) -> Result<EstimatorResult, McError> {
    check_root(model, x)?;
    if n == 0 {
        return Ok(EstimatorResult::exact(1.0, plan.master_seed));
    }
    let br = Branching::critical(model);
    let acc = plan.replicate(
        reps,
        || (MeanAccumulator::default(), Scratch::default()),
        |(acc, Scratch { buf, next }), rng, _| {
            let mut alive = false;
            for _ in 0..=model.d {
                let c = br.child(x, rng);
                if c >= br.h {
                    br.generation(rng, c, n - 1, buf, next);
                    alive |= !buf.is_empty();
                }
            }
            acc.push(f64::from(alive));
        },
    )?;
    finish_survival(plan, acc.0, n, reps, 0.0)
}

fn finish_survival(plan: &Plan, acc: MeanAccumulator, n: usize, reps: u64, scale: f64) -> Result<EstimatorResult, McError> {
    if acc.sum == 0.0 && reps < 10 * n as u64 {
        return Err(McError::Underpowered(format!(
            "no surviving cluster in {reps} replicates at n = {n}; use at least {}",
            10 * n
        )));
    }
    let r = EstimatorResult::from_accumulator(&acc, plan.master_seed);
    let ratio = r.mean * scale;
    Ok(r.with_meta("n_phat_over_c1chi", ratio))
}

/// Per-block working buffers; merging discards them.
#[derive(Debug, Default)]
pub struct Scratch {
    pub buf: Vec<f64>,
    pub next: Vec<f64>,
}

impl Merge for Scratch {
    fn merge(&mut self, _other: Self) {}
}

/// Means of `stat(generation-n values)` over `reps` clusters rooted at `x`.
pub fn generation_statistics<F>(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    n: usize,
    reps: u64,
    n_stats: usize,
    stat: F,
) -> Result<Vec<EstimatorResult>, McError>
where
    F: Fn(&[f64], &mut [f64]) + Sync + Send,
{
    check_root(model, x)?;
    let br = Branching::critical(model);
    let (accs, _) = plan.replicate(
        reps,
        || (vec![MeanAccumulator::default(); n_stats], Scratch::default()),
        |(accs, Scratch { buf, next }), rng, _| {
            br.generation(rng, x, n, buf, next);
            let mut out = vec![0.0; n_stats];
            stat(buf, &mut out);
            for (a, v) in accs.iter_mut().zip(out) {
                a.push(v);
            }
        },
    )?;
    Ok(accs
        .iter()
        .map(|a| EstimatorResult::from_accumulator(a, plan.master_seed))
        .collect())
}

/// `E_x[Σ_{N_n} f]` for each test function.
pub fn generation_sums(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    n: usize,
    fs: &[TestFunction],
    reps: u64,
) -> Result<Vec<EstimatorResult>, McError> {
    generation_statistics(plan, model, x, n, reps, fs.len(), |vals, out| {
        for (o, f) in out.iter_mut().zip(fs) {
            *o = vals.iter().map(|&v| f.eval(model, v)).sum();
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailTable {
    pub m: Vec<u64>,
    pub p_hat: Vec<f64>,
    pub std_error: Vec<f64>,
    pub reps: u64,
    /// Fraction of replicates stopped by the node cap.
    pub truncated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailEstimate {
    pub slope: f64,
    pub intercept: f64,
    pub table: TailTable,
    /// Set when more than 1% of replicates hit the node cap.
    pub flagged: bool,
}

/// `P_x[|𝒞| > m]` for each threshold in `ms` (ascending).
pub fn size_tail_table(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    reps: u64,
    node_cap: u64,
    ms: &[u64],
) -> Result<TailTable, McError> {
    check_root(model, x)?;
    if ms.is_empty() || !ms.windows(2).all(|w| w[0] < w[1]) || *ms.last().unwrap() >= node_cap {
        return Err(McError::InvalidArgument(
            "tail thresholds must be ascending and below the node cap".into(),
        ));
    }
    let br = Branching::critical(model);
    let k = ms.len();
    let (hist, (capped, _)) = plan.replicate(
        reps,
        || (vec![0u64; k + 1], (0u64, Scratch::default())),
        |(hist, (capped, stack)), rng, _| {
            let (size, hit) = br.total_size(rng, x, node_cap, &mut stack.buf);
            *capped += u64::from(hit);
            hist[ms.partition_point(|&m| m < size)] += 1;
        },
    )?;
    // hist[j] counts sizes exceeding exactly the first j thresholds.
    let mut above = vec![0u64; k];
    let mut running = 0u64;
    for j in (1..=k).rev() {
        running += hist[j];
        above[j - 1] = running;
    }
    let r = reps as f64;
    let p_hat: Vec<f64> = above.iter().map(|&c| c as f64 / r).collect();
    let std_error = p_hat.iter().map(|p| (p * (1.0 - p) / r).sqrt()).collect();
    Ok(TailTable {
        m: ms.to_vec(),
        p_hat,
        std_error,
        reps,
        truncated_fraction: capped as f64 / r,
    })
}

/// Log-spaced thresholds, ten per decade, from `lo` to `hi`.
pub fn log_thresholds(lo: u64, hi: u64) -> Vec<u64> {
    let (a, b) = ((lo as f64).log10(), (hi as f64).log10());
    let steps = ((b - a) * 10.0).round() as usize;
    let mut ms: Vec<u64> = (0..=steps)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / steps as f64).round() as u64)
        .collect();
    ms.dedup();
    ms
}

/// Log-log slope of the cluster-size tail over `m ∈ [10², 10⁴]`.
pub fn size_tail_exponent(plan: &Plan, model: &SpectralModel, x: f64, reps: u64) -> Result<TailEstimate, McError> {
    if reps < 1_000_000 {
        return Err(McError::Underpowered(format!("tail fit needs at least 10^6 clusters, got {reps}")));
    }
    let table = size_tail_table(plan, model, x, reps, 100_000, &log_thresholds(100, 10_000))?;
    Ok(fit_tail(table))
}

pub fn fit_tail(table: TailTable) -> TailEstimate {
    let lx: Vec<f64> = table.m.iter().map(|&m| (m as f64).ln()).collect();
    let ly: Vec<f64> = table.p_hat.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect();
    let (intercept, slope) = linear_fit(&lx, &ly);
    TailEstimate {
        slope,
        intercept,
        flagged: table.truncated_fraction > 0.01,
        table,
    }
}

/// Samples of `Z = (1/n)Σ_{N_n} f` conditioned on `N_n ≠ ∅`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSample {
    pub z_f: Vec<f64>,
    pub z_chi: Vec<f64>,
    /// `Σ f / Σ χ` per accepted cluster.
    pub ratio: Vec<f64>,
    pub attempts: u64,
}

pub fn conditional_generation_statistic(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    n: usize,
    f: &TestFunction,
    accepted: usize,
) -> Result<ConditionalSample, McError> {
    check_root(model, x)?;
    if n == 0 || accepted == 0 {
        return Err(McError::InvalidArgument("need n ≥ 1 and a positive sample size".into()));
    }
    let br = Branching::critical(model);
    let out = plan.accept(accepted, u64::MAX, |rng, _| {
        let (mut buf, mut scratch) = (Vec::new(), Vec::new());
        br.generation(rng, x, n, &mut buf, &mut scratch);
        if buf.is_empty() {
            return None;
        }
        let sf: f64 = buf.iter().map(|&v| f.eval(model, v)).sum();
        let sc: f64 = buf.iter().map(|&v| model.chi_at(v)).sum();
        Some((sf, sc))
    })?;
    let nf = n as f64;
    Ok(ConditionalSample {
        z_f: out.values.iter().map(|(sf, _)| sf / nf).collect(),
        z_chi: out.values.iter().map(|(_, sc)| sc / nf).collect(),
        ratio: out.values.iter().map(|(sf, sc)| sf / sc).collect(),
        attempts: out.attempts,
    })
}

/// Conditional samples of `C₁·Z/⟨χ,f⟩`, asymptotically `Exp(1)`.
pub fn rescaled(model: &SpectralModel, sample: &ConditionalSample, f: &TestFunction) -> Samples {
    let a = model.chi.inner(&f.on_grid(model));
    Samples(sample.z_f.iter().map(|z| model.c1 * z / a).collect())
}
