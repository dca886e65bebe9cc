//! Depth-first traversal of an i.i.d. forest of clusters rooted at `x`,
//! the martingale `S_n`, the height process, and the conditioned-tree
//! statistics relating `S̄` to the height.

use crate::cluster::{check_root, Branching, Cluster, Root, ROOT};
use crate::field::TestFunction;
use crate::gaussian::{normal_pdf, sigma_nu2};
use crate::mc::{McError, McRng, Plan};
use crate::quadrature::composite;
use crate::spectral::SpectralModel;
use crate::stats::MeanAccumulator;
use rand::Rng;
use serde::Serialize;

/// One visited vertex `v_k` of the forest traversal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub s: f64,
    pub height: u32,
    pub tree: u64,
    pub phi: f64,
    /// `S_{k+1} − S_k = −χ(φ_{v_k}) + Σ_{children} χ`.
    pub increment: f64,
    /// `Σ_{w ∈ Y(v_k)} χ(φ_w)`, the pending-sibling sum.
    pub pending: f64,
}

/// Lazy depth-first walk over the forest. The stack holds exactly the
/// unvisited later siblings of the current vertex's ancestors.
pub struct Traversal<'m> {
    model: &'m SpectralModel,
    br: Branching,
    x: f64,
    chi_x: f64,
    stack: Vec<(f64, u32)>,
    pending: f64,
    current: (f64, u32),
    tree: u64,
    step: u64,
    spot_key: u64,
}

/// Relative drift tolerated between the incremental and recomputed sums.
const SPOT_TOL: f64 = 1e-9;

impl<'m> Traversal<'m> {
    pub fn new(model: &'m SpectralModel, x: f64, spot_key: u64) -> Result<Self, McError> {
        check_root(model, x)?;
        Ok(Traversal {
            model,
            br: Branching::critical(model),
            x,
            chi_x: model.chi_at(x),
            stack: Vec::new(),
            pending: 0.0,
            current: (x, 0),
            tree: 1,
            step: 0,
            spot_key,
        })
    }

    /// Pending-sibling sum recomputed from the stack.
    pub fn pending_exact(&self) -> f64 {
        self.stack.iter().map(|&(v, _)| self.model.chi_at(v)).sum()
    }

    fn spot_check(&self) -> bool {
        let mut z = self.step ^ self.spot_key;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        (z ^ (z >> 31)).is_multiple_of(100)
    }

    /// Visits the current vertex, expands its children and moves on.
    pub fn advance(&mut self, rng: &mut McRng) -> Result<Step, McError> {
        let (phi, height) = self.current;
        let chi_phi = self.model.chi_at(phi);
        let s = chi_phi - self.tree as f64 * self.chi_x + self.pending;
        if self.spot_check() {
            let exact = self.pending_exact();
            if (exact - self.pending).abs() > SPOT_TOL * (1.0 + exact.abs()) {
                return Err(McError::VerificationFailure(format!(
                    "pending sum drifted at step {}: {} vs {exact}",
                    self.step, self.pending
                )));
            }
        }
        let top = self.stack.len();
        let mut children = 0.0;
        for _ in 0..self.br.d {
            let c = self.br.child(phi, rng);
            if c >= self.br.h {
                children += self.model.chi_at(c);
                self.stack.push((c, height + 1));
            }
        }
        // First child in sampling order is visited first.
        self.stack[top..].reverse();
        let step = Step {
            s,
            height,
            tree: self.tree,
            phi,
            increment: children - chi_phi,
            pending: self.pending,
        };
        self.pending += children;
        match self.stack.pop() {
            Some((v, h)) => {
                self.pending -= self.model.chi_at(v);
                self.current = (v, h);
            }
            None => {
                self.tree += 1;
                self.current = (self.x, 0);
                self.pending = 0.0;
            }
        }
        self.step += 1;
        Ok(step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraversalTrace {
    pub s: Vec<f64>,
    pub h: Vec<u32>,
    pub lambda: Vec<u64>,
    pub phi: Vec<f64>,
}

impl TraversalTrace {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

pub fn run_traversal(model: &SpectralModel, rng: &mut McRng, x: f64, n_steps: usize) -> Result<TraversalTrace, McError> {
    if n_steps == 0 {
        return Err(McError::InvalidArgument("a traversal needs at least one step".into()));
    }
    let mut t = Traversal::new(model, x, rng.random())?;
    let mut trace = TraversalTrace {
        s: Vec::with_capacity(n_steps),
        h: Vec::with_capacity(n_steps),
        lambda: Vec::with_capacity(n_steps),
        phi: Vec::with_capacity(n_steps),
    };
    for _ in 0..n_steps {
        let st = t.advance(rng)?;
        trace.s.push(st.s);
        trace.h.push(st.height);
        trace.lambda.push(st.tree);
        trace.phi.push(st.phi);
    }
    Ok(trace)
}

/// `m_n^f = (1/n)Σ_{i ≤ n} f(φ_{v_i})`.
pub fn traversal_lln(model: &SpectralModel, trace: &TraversalTrace, f: &TestFunction) -> f64 {
    trace.phi.iter().map(|&v| f.eval(model, v)).sum::<f64>() / trace.len() as f64
}

/// `⟨χ, f⟩ / ⟨χ, 1⟩`.
pub fn lln_limit(model: &SpectralModel, f: &TestFunction) -> f64 {
    model.chi.inner(&f.on_grid(model)) / model.chi.integral()
}

/// `∫_a^b χ dν / ⟨χ, 1⟩`, by composite Gauss–Legendre on the χ table.
pub fn visit_mass(model: &SpectralModel, a: f64, b: f64) -> f64 {
    let var = sigma_nu2(model.d);
    let (b, a) = (b.min(model.grid().x_max), a.max(model.h_star));
    if b <= a {
        return 0.0;
    }
    let (xs, ws) = composite(a, b, 8, 16);
    let m: f64 = xs.iter().zip(&ws).map(|(&y, &w)| w * model.chi_at(y) * normal_pdf(y, var)).sum();
    m / model.chi.integral()
}

/// Field-value edges splitting the visit law `χν/⟨χ,1⟩` into `bins` equal parts.
pub fn visit_quantile_edges(model: &SpectralModel, bins: usize) -> Vec<f64> {
    let (lo, hi) = (model.h_star, model.grid().x_max);
    let steps = 4096;
    let dx = (hi - lo) / steps as f64;
    let mut cum = vec![0.0];
    for i in 0..steps {
        let a = lo + dx * i as f64;
        cum.push(cum[i] + visit_mass(model, a, a + dx));
    }
    let total = cum[steps];
    let mut edges = vec![lo];
    for b in 1..bins {
        let target = total * b as f64 / bins as f64;
        let i = cum.partition_point(|&c| c < target).clamp(1, steps);
        let r = (target - cum[i - 1]) / (cum[i] - cum[i - 1]);
        edges.push(lo + dx * ((i - 1) as f64 + r));
    }
    edges
}

/// Per-bin increment statistics of `S` accumulated over many traces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MartingaleStats {
    /// Lower edges of the field-value bins.
    pub edges: Vec<f64>,
    /// `ΔS` per bin.
    pub increment: Vec<MeanAccumulator>,
    /// `(ΔS)²` per bin.
    pub squared: Vec<MeanAccumulator>,
    /// `𝒱(φ)` per bin.
    pub v: Vec<MeanAccumulator>,
    /// `(ΔS)⁴` over the first and second half of each trace.
    pub fourth: [MeanAccumulator; 2],
    /// `S_n` at the final step, one entry per trace.
    pub s_final: MeanAccumulator,
    pub traces: u64,
    pub n: usize,
}

impl crate::mc::Merge for MartingaleStats {
    fn merge(&mut self, o: Self) {
        for (a, b) in self.increment.iter_mut().zip(&o.increment) {
            a.merge(b);
        }
        for (a, b) in self.squared.iter_mut().zip(&o.squared) {
            a.merge(b);
        }
        for (a, b) in self.v.iter_mut().zip(&o.v) {
            a.merge(b);
        }
        self.fourth[0].merge(&o.fourth[0]);
        self.fourth[1].merge(&o.fourth[1]);
        self.s_final.merge(&o.s_final);
        self.traces += o.traces;
    }
}

impl MartingaleStats {
    /// Bin-conditional mean increments in standard errors.
    pub fn increment_z(&self) -> Vec<f64> {
        self.increment.iter().map(|a| a.mean() / a.std_error()).collect()
    }

    /// Least-squares slope through the origin of bin means of `(ΔS)²`
    /// against bin means of `𝒱`.
    pub fn v_slope(&self) -> f64 {
        let x: Vec<f64> = self.v.iter().map(|a| a.mean()).collect();
        let y: Vec<f64> = self.squared.iter().map(|a| a.mean()).collect();
        crate::stats::slope_through_origin(&x, &y, &vec![1.0; x.len()])
    }

    /// `Var(S_n) / n`.
    pub fn variance_rate(&self) -> f64 {
        let a = &self.s_final;
        a.sum_sq / a.count as f64 / self.n as f64
    }
}

/// Runs `traces` independent traversals of `n` steps and accumulates the
/// increment statistics.
pub fn martingale_suite(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    n: usize,
    traces: u64,
    bins: usize,
) -> Result<MartingaleStats, McError> {
    check_root(model, x)?;
    let edges = visit_quantile_edges(model, bins);
    let empty = || MartingaleStats {
        edges: edges.clone(),
        increment: vec![MeanAccumulator::default(); bins],
        squared: vec![MeanAccumulator::default(); bins],
        v: vec![MeanAccumulator::default(); bins],
        fourth: [MeanAccumulator::default(); 2],
        s_final: MeanAccumulator::default(),
        traces: 0,
        n,
    };
    let failure = std::sync::Mutex::new(None);
    let stats = plan.replicate(traces, empty, |st, rng, _| {
        let mut t = match Traversal::new(model, x, rng.random()) {
            Ok(t) => t,
            Err(e) => {
                failure.lock().unwrap().get_or_insert(e);
                return;
            }
        };
        let mut last = None;
        for k in 0..n {
            let step = match t.advance(rng) {
                Ok(s) => s,
                Err(e) => {
                    failure.lock().unwrap().get_or_insert(e);
                    return;
                }
            };
            let b = edges.partition_point(|&e| e <= step.phi).saturating_sub(1);
            let dsq = step.increment * step.increment;
            st.increment[b].push(step.increment);
            st.squared[b].push(dsq);
            st.v[b].push(model.v_at(step.phi));
            st.fourth[usize::from(2 * k >= n)].push(dsq * dsq);
            last = Some(step);
        }
        // S_n is the value at the n-th visited vertex.
        st.s_final.push(last.map_or(0.0, |s| s.s));
        st.traces += 1;
    })?;
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(stats),
    }
}

/// Mean `m_n^f` over independent traversals of `n` steps, one entry per
/// test function.
pub fn lln_average(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    n: usize,
    fs: &[TestFunction],
    traces: u64,
) -> Result<Vec<MeanAccumulator>, McError> {
    check_root(model, x)?;
    plan.replicate(
        traces,
        || vec![MeanAccumulator::default(); fs.len()],
        |accs, rng, _| {
            let trace = run_traversal(model, rng, x, n).expect("root checked");
            for (a, f) in accs.iter_mut().zip(fs) {
                a.push(traversal_lln(model, &trace, f));
            }
        },
    )
}

/// Samples of `Λ_n / √n` for each `n` in `ns`, from the same traces.
pub fn lambda_scaling(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    ns: &[usize],
    traces: u64,
) -> Result<Vec<MeanAccumulator>, McError> {
    check_root(model, x)?;
    let n_max = ns.iter().copied().max().unwrap_or(0);
    plan.replicate(
        traces,
        || vec![MeanAccumulator::default(); ns.len()],
        |accs, rng, _| {
            let mut t = Traversal::new(model, x, rng.random()).expect("root checked");
            let mut checkpoints = ns.iter().zip(accs.iter_mut()).collect::<Vec<_>>();
            checkpoints.sort_by_key(|(n, _)| **n);
            let mut next = 0;
            for k in 1..=n_max {
                let lambda = t.advance(rng).expect("spot check").tree;
                while next < checkpoints.len() && *checkpoints[next].0 == k {
                    checkpoints[next].1.push(lambda as f64 / (k as f64).sqrt());
                    next += 1;
                }
            }
        },
    )
}

/// Whether `max_{i ≤ trees} S^i > trees · y`, where `S^i` is the largest
/// pending-sibling sum seen in tree `i`. Exploration stops at the first
/// exceedance.
pub fn forest_sup_exceeds(model: &SpectralModel, rng: &mut McRng, x: f64, trees: u64, y: f64) -> bool {
    let threshold = trees as f64 * y;
    let mut t = Traversal::new(model, x, rng.random()).expect("root checked");
    loop {
        let step = t.advance(rng).expect("spot check");
        if step.tree > trees {
            return false;
        }
        if step.pending > threshold {
            return true;
        }
    }
}

/// Empirical `P[max_{i ≤ trees} S^i > trees · y]` over `forests` forests.
pub fn sup_statistic(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    trees: u64,
    y: f64,
    forests: u64,
) -> Result<MeanAccumulator, McError> {
    check_root(model, x)?;
    plan.replicate(forests, MeanAccumulator::default, |acc, rng, _| {
        acc.push(f64::from(forest_sup_exceeds(model, rng, x, trees, y)));
    })
}

/// Depth-first data of a single stored tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeWalk {
    /// `S̄(v) = Σ_{w ∈ Y(v)} χ(φ_w)` per arena node.
    pub s_bar: Vec<f64>,
    /// Arena indices in depth-first order.
    pub order: Vec<u32>,
}

impl TreeWalk {
    /// `Y(v) = Y(p(v)) ∪ {later siblings of v}`, with children in arena order.
    pub fn new(model: &SpectralModel, cluster: &Cluster) -> Self {
        let n = cluster.size();
        let mut s_bar = vec![0.0; n];
        for i in 0..n {
            let kids = cluster.children(i);
            if kids.is_empty() {
                continue;
            }
            let mut later: f64 = kids.clone().map(|j| model.chi_at(cluster.nodes[j].value)).sum();
            for j in kids {
                later -= model.chi_at(cluster.nodes[j].value);
                s_bar[j] = s_bar[i] + later.max(0.0);
            }
        }
        let mut order = Vec::with_capacity(n);
        let mut stack = if n > 0 { vec![0u32] } else { Vec::new() };
        while let Some(v) = stack.pop() {
            order.push(v);
            stack.extend(cluster.children(v as usize).rev().map(|j| j as u32));
        }
        TreeWalk { s_bar, order }
    }

    pub fn sup_s_bar(&self) -> f64 {
        self.s_bar.iter().copied().fold(0.0, f64::max)
    }
}

/// Most recent common ancestor in the arena.
pub fn mrca(cluster: &Cluster, mut a: usize, mut b: usize) -> usize {
    let g = |i: usize| cluster.nodes[i].generation;
    while g(a) > g(b) {
        a = cluster.nodes[a].parent as usize;
    }
    while g(b) > g(a) {
        b = cluster.nodes[b].parent as usize;
    }
    while a != b {
        a = cluster.nodes[a].parent as usize;
        b = cluster.nodes[b].parent as usize;
    }
    a
}

/// Fraction of generation-`n` vertices with an `η`-bad strict ancestor at
/// height at least `r`.
pub fn bad_fraction(model: &SpectralModel, cluster: &Cluster, walk: &TreeWalk, eta: f64, r: u32, n: usize) -> f64 {
    let gen = cluster.generation_range(n);
    if gen.is_empty() {
        return 0.0;
    }
    let target = 1.0 / model.c1;
    let mut bad = vec![false; gen.end];
    for i in 1..gen.end {
        let p = cluster.nodes[i].parent as usize;
        let hp = cluster.nodes[p].generation;
        let p_bad = hp >= r.max(1) && (walk.s_bar[p] / hp as f64 - target).abs() > eta;
        bad[i] = bad[p] || p_bad;
    }
    gen.clone().filter(|&i| bad[i]).count() as f64 / gen.len() as f64
}

/// Fraction of vertices with height in `[n/2, n]` whose `S̄/H` is more than
/// `eta` away from `1/C₁`.
pub fn ratio_deviation_fraction(model: &SpectralModel, cluster: &Cluster, walk: &TreeWalk, n: usize, eta: f64) -> f64 {
    let lo = n.div_ceil(2).max(1);
    let range = cluster.generation_range(lo).start..cluster.generation_range(n).end;
    if range.is_empty() {
        return 0.0;
    }
    let target = 1.0 / model.c1;
    let bad = range
        .clone()
        .filter(|&i| {
            let h = cluster.nodes[i].generation as f64;
            (walk.s_bar[i] / h - target).abs() > eta
        })
        .count();
    bad as f64 / range.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceMatrices {
    pub k: usize,
    pub n: usize,
    /// Row-major `k × k`.
    pub dh: Vec<f64>,
    pub ds: Vec<f64>,
}

impl DistanceMatrices {
    /// `‖C₁⁻¹ D^H − D^S̄‖_F`.
    pub fn frobenius_gap(&self, c1: f64) -> f64 {
        self.dh
            .iter()
            .zip(&self.ds)
            .map(|(h, s)| (h / c1 - s).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Distance matrices of `k` uniform vertices drawn with replacement.
pub fn distance_matrices(cluster: &Cluster, walk: &TreeWalk, rng: &mut McRng, k: usize, n: usize) -> DistanceMatrices {
    assert!(k >= 2 && n >= 1 && !cluster.is_empty());
    let tau: Vec<usize> = (0..k).map(|_| rng.random_range(0..cluster.size())).collect();
    let scale = 1.0 / n as f64;
    let mut dh = vec![0.0; k * k];
    let mut ds = vec![0.0; k * k];
    for i in 0..k {
        for j in i + 1..k {
            let (a, b) = (tau[i], tau[j]);
            let m = mrca(cluster, a, b);
            let g = |v: usize| cluster.nodes[v].generation as f64;
            let h = scale * (g(a) + g(b) - 2.0 * g(m));
            let s = scale * (walk.s_bar[a] + walk.s_bar[b] - 2.0 * walk.s_bar[m]);
            dh[i * k + j] = h;
            dh[j * k + i] = h;
            ds[i * k + j] = s;
            ds[j * k + i] = s;
        }
    }
    DistanceMatrices { k, n, dh, ds }
}

/// One rejection attempt for a cluster rooted at `x` that reaches
/// generation `n`: `None` is a rejection, `Some(None)` a cluster that hit
/// `node_cap`.
pub fn conditioned_attempt(model: &SpectralModel, rng: &mut McRng, x: f64, n: usize, node_cap: usize) -> Option<Option<Cluster>> {
    let br = Branching::critical(model);
    let mut c = Cluster::default();
    c.push(x, ROOT);
    let mut i = 0usize;
    while i < c.nodes.len() {
        let v = c.nodes[i].value;
        for _ in 0..br.d {
            let y = br.child(v, rng);
            if y >= br.h {
                if c.nodes.len() >= node_cap {
                    return Some(None);
                }
                c.push(y, i as u32);
            }
        }
        i += 1;
    }
    (c.depth() > n).then_some(Some(c))
}

/// Statistics of one conditioned cluster.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionedSummary {
    pub size: usize,
    pub height: u32,
    pub sup_s_bar: f64,
    pub frobenius: f64,
    /// One entry per `(η, R)` pair requested.
    pub bad: Vec<f64>,
    pub ratio_deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedConfig {
    pub k: usize,
    pub node_cap: usize,
    pub bad: Vec<(f64, u32)>,
    pub ratio_eta: f64,
}

impl Default for ConditionedConfig {
    fn default() -> Self {
        ConditionedConfig {
            k: 2,
            node_cap: 2_000_000,
            bad: vec![(0.5, 20)],
            ratio_eta: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedRun {
    pub samples: Vec<ConditionedSummary>,
    /// Surviving clusters discarded for exceeding the node cap.
    pub over_cap: usize,
    pub attempts: u64,
}

pub fn summarize(model: &SpectralModel, cluster: &Cluster, rng: &mut McRng, n: usize, cfg: &ConditionedConfig) -> ConditionedSummary {
    let walk = TreeWalk::new(model, cluster);
    let dm = distance_matrices(cluster, &walk, rng, cfg.k, n);
    ConditionedSummary {
        size: cluster.size(),
        height: cluster.height().unwrap_or(0),
        sup_s_bar: walk.sup_s_bar(),
        frobenius: dm.frobenius_gap(model.c1),
        bad: cfg.bad.iter().map(|&(eta, r)| bad_fraction(model, cluster, &walk, eta, r, n)).collect(),
        ratio_deviation: ratio_deviation_fraction(model, cluster, &walk, n, cfg.ratio_eta),
    }
}

/// `count` conditioned clusters, summarized as they are drawn.
pub fn conditioned_run(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    n: usize,
    count: usize,
    cfg: &ConditionedConfig,
) -> Result<ConditionedRun, McError> {
    check_root(model, x)?;
    if n == 0 || cfg.k < 2 {
        return Err(McError::InvalidArgument("need n ≥ 1 and k ≥ 2".into()));
    }
    let out = plan.accept_where(
        count,
        u64::MAX,
        |rng, _| {
            conditioned_attempt(model, rng, x, n, cfg.node_cap).map(|c| c.map(|c| summarize(model, &c, rng, n, cfg)))
        },
        |v| v.is_some(),
    )?;
    let over_cap = out.values.iter().filter(|v| v.is_none()).count();
    Ok(ConditionedRun {
        samples: out.values.into_iter().flatten().collect(),
        over_cap,
        attempts: out.attempts,
    })
}

/// A single conditioned cluster with its depth-first data.
pub fn conditioned_tree(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    n: usize,
    node_cap: usize,
) -> Result<(Cluster, TreeWalk, u64), McError> {
    check_root(model, x)?;
    let out = plan.accept(1, u64::MAX, |rng, _| conditioned_attempt(model, rng, x, n, node_cap).flatten())?;
    let c = out.values.into_iter().next().expect("one accepted");
    let walk = TreeWalk::new(model, &c);
    Ok((c, walk, out.attempts))
}

/// Unconditioned sampler for comparison and tests.
pub fn sample_tree(model: &SpectralModel, rng: &mut McRng, x: f64, node_cap: usize) -> Result<Cluster, McError> {
    crate::cluster::sample_cluster(rng, model.d, model.h_star, Root::Value(x), u32::MAX, node_cap)
}
