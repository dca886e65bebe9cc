//! Spine measures: the `𝒦`-chain along one or two marked lines of descent,
//! the marked trees `Q_x^k` for `k ∈ {1, 2}`, and Monte Carlo checks of the
//! many-to-one and many-to-two formulas against the matrix truth.

use crate::cluster::{check_root, Branching, Cluster, Scratch, ROOT};
use crate::field::TestFunction;
use crate::gaussian::{normal_pdf, sigma_nu2};
use crate::mc::{EstimatorResult, McError, McRng, Plan};
use crate::quadrature::composite;
use crate::recursion::{moment_first_at, moment_second_at};
use crate::spectral::SpectralModel;
use crate::stats::{chi_square_gof, ChiSquareResult, MeanAccumulator};
use rand::Rng;
use serde::Serialize;

/// Relative standard-error floor for estimators whose variance vanishes
/// identically (for instance `f = χ` on the spine side).
pub const SE_FLOOR_REL: f64 = 1e-6;
/// Disagreement in combined standard errors treated as a failure.
pub const FAILURE_Z: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SpinePath {
    /// `ξ_0 = x, ξ_1, …, ξ_n`.
    pub xi: Vec<f64>,
}

impl SpinePath {
    pub fn len(&self) -> usize {
        self.xi.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.xi.len() == 1
    }

    pub fn last(&self) -> f64 {
        *self.xi.last().expect("path holds its root")
    }
}

/// One `𝒦(x, ·)` step.
#[inline]
pub fn spine_step<R: Rng + ?Sized>(model: &SpectralModel, rng: &mut R, x: f64) -> f64 {
    model.kernel().sample(x, rng.random::<f64>())
}

pub fn sample_spine_chain(model: &SpectralModel, rng: &mut McRng, x: f64, n: usize) -> Result<SpinePath, McError> {
    check_root(model, x)?;
    let mut xi = Vec::with_capacity(n + 1);
    xi.push(x);
    for k in 0..n {
        xi.push(spine_step(model, rng, xi[k]));
    }
    Ok(SpinePath { xi })
}

/// A cluster sampled under `Q_x^k`, with mark counts and spine positions.
#[derive(Debug, Clone, PartialEq)]
pub struct QTree {
    pub cluster: Cluster,
    /// Mark count `l_v` per node.
    pub marks: Vec<u8>,
    /// `spines[i][j]`: node carrying mark `i` in generation `j`.
    pub spines: Vec<Vec<u32>>,
}

impl QTree {
    pub fn k(&self) -> usize {
        self.spines.len()
    }

    /// Field values along spine `i`.
    pub fn spine_values(&self, i: usize) -> Vec<f64> {
        self.spines[i].iter().map(|&v| self.cluster.nodes[v as usize].value).collect()
    }

    /// Last generation where the two marks share a node.
    pub fn split_time(&self) -> Option<usize> {
        if self.k() != 2 {
            return None;
        }
        self.spines[0].iter().zip(&self.spines[1]).rposition(|(a, b)| a == b)
    }
}

/// `Q_x^k` tree up to generation `n`: marks move to uniform children, marked
/// children redraw from `𝒦`, unmarked ones follow the killed forward law.
pub fn sample_q_tree(model: &SpectralModel, rng: &mut McRng, x: f64, n: usize, k: usize) -> Result<QTree, McError> {
    check_root(model, x)?;
    if !(1..=2).contains(&k) {
        return Err(McError::InvalidArgument(format!("spine count must be 1 or 2, got {k}")));
    }
    let br = Branching::critical(model);
    let d = model.d as usize;
    let mut cluster = Cluster::default();
    cluster.push(x, ROOT);
    let mut marks = vec![k as u8];
    let mut spines = vec![vec![0u32]; k];
    let mut i = 0usize;
    let mut target = [0usize; 2];
    while i < cluster.nodes.len() {
        let v = cluster.nodes[i];
        if v.generation as usize >= n {
            break;
        }
        let mut mark_child = [usize::MAX; 2];
        if marks[i] > 0 {
            for (m, spine) in spines.iter().enumerate() {
                if spine[v.generation as usize] as usize == i {
                    mark_child[m] = rng.random_range(0..d);
                }
            }
        }
        for c in 0..d {
            let l = mark_child.iter().filter(|&&t| t == c).count();
            let value = if l > 0 {
                spine_step(model, rng, v.value)
            } else {
                let y = br.child(v.value, rng);
                if y < br.h {
                    continue;
                }
                y
            };
            let id = cluster.push(value, i as u32);
            marks.push(l as u8);
            for (m, &t) in mark_child.iter().enumerate().take(k) {
                if t == c {
                    target[m] = id as usize;
                }
            }
        }
        for (m, spine) in spines.iter_mut().enumerate() {
            if mark_child[m] != usize::MAX {
                spine.push(target[m] as u32);
            }
        }
        i += 1;
    }
    Ok(QTree { cluster, marks, spines })
}

/// Law of the two-spine split time: `P[s = j] = (d−1)d^{−(j+1)}` for `j < n`
/// and `P[s = n] = d^{−n}`.
pub fn split_time_law(d: u32, n: usize) -> Vec<f64> {
    let d = d as f64;
    let mut p: Vec<f64> = (0..n).map(|j| (d - 1.0) * d.powi(-(j as i32 + 1))).collect();
    p.push(d.powi(-(n as i32)));
    p
}

/// Three-way comparison of a moment identity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub quantity: String,
    pub lhs: EstimatorResult,
    pub rhs: EstimatorResult,
    pub truth: f64,
}

impl Comparison {
    fn floor(&self) -> f64 {
        SE_FLOOR_REL * self.truth.abs().max(1e-300)
    }

    pub fn z_lhs_rhs(&self) -> f64 {
        self.lhs.z_between(&self.rhs, self.floor())
    }

    pub fn z_lhs_truth(&self) -> f64 {
        self.lhs.z_against(self.truth, self.floor())
    }

    pub fn z_rhs_truth(&self) -> f64 {
        self.rhs.z_against(self.truth, self.floor())
    }

    /// Largest pairwise disagreement in standard errors.
    pub fn max_abs_z(&self) -> f64 {
        self.z_lhs_rhs().abs().max(self.z_lhs_truth().abs()).max(self.z_rhs_truth().abs())
    }

    fn checked(self) -> Result<Self, McError> {
        if self.max_abs_z() > FAILURE_Z {
            return Err(McError::VerificationFailure(format!(
                "{}: lhs {} ± {}, rhs {} ± {}, truth {}",
                self.quantity, self.lhs.mean, self.lhs.std_error, self.rhs.mean, self.rhs.std_error, self.truth
            )));
        }
        Ok(self)
    }
}

/// `E_x[Σ_{N_n} f] = Q_x[f(ξ_n)χ(x)/χ(ξ_n)] = Lⁿ[f](x)`.
pub fn verify_many_to_few_1(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    n: usize,
    f: &TestFunction,
    reps: u64,
) -> Result<Comparison, McError> {
    check_root(model, x)?;
    if n > 12 {
        return Err(McError::InvalidArgument(format!("first-moment check supports n ≤ 12, got {n}")));
    }
    let quantity = format!("E[sum f], f={}, n={n}", f.label());
    if n == 0 {
        let v = f.eval(model, x);
        let e = EstimatorResult::exact(v, plan.master_seed);
        return Ok(Comparison { quantity, lhs: e.clone(), rhs: e, truth: v });
    }
    let br = Branching::critical(model);
    let (lhs, _) = plan.derive("P").replicate(
        reps,
        || (MeanAccumulator::default(), Scratch::default()),
        |(acc, Scratch { buf, next }), rng, _| {
            br.generation(rng, x, n, buf, next);
            acc.push(buf.iter().map(|&v| f.eval(model, v)).sum());
        },
    )?;
    let chi_x = model.chi_at(x);
    let rhs = plan.derive("Q").replicate(reps, MeanAccumulator::default, |acc, rng, _| {
        let mut xi = x;
        for _ in 0..n {
            xi = spine_step(model, rng, xi);
        }
        acc.push(f.eval(model, xi) * chi_x / model.chi_at(xi));
    })?;
    let truth = moment_first_at(model, &f.on_grid(model), n, x);
    Comparison {
        quantity,
        lhs: EstimatorResult::from_accumulator(&lhs, plan.master_seed),
        rhs: EstimatorResult::from_accumulator(&rhs, plan.master_seed),
        truth,
    }
    .checked()
}

/// Two-spine estimate of `E_x[Σ_{v,w ∈ N_n} f(φ_v)g(φ_w)]` from a skeleton:
/// the marks share the path up to generation `split`, where the common value
/// is `xi_split`, and end at values `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub fn two_spine_weight(
    model: &SpectralModel,
    x: f64,
    n: usize,
    split: usize,
    xi_split: f64,
    a: f64,
    b: f64,
    f: &TestFunction,
    g: &TestFunction,
) -> f64 {
    let d = model.d as f64;
    let chi_x = model.chi_at(x);
    if split >= n {
        return chi_x * d.powi(n as i32) * f.eval(model, a) * g.eval(model, a) / model.chi_at(a);
    }
    chi_x * d.powi(split as i32) * model.chi_at(xi_split) * f.eval(model, a) * g.eval(model, b)
        / (model.chi_at(a) * model.chi_at(b))
}

/// Skeleton of `Q_x^2`: split time, common value at the split, end values.
pub fn sample_two_spine_skeleton(model: &SpectralModel, rng: &mut McRng, x: f64, n: usize) -> (usize, f64, f64, f64) {
    let d = model.d;
    let mut xi = x;
    let mut split = n;
    for j in 0..n {
        let (c1, c2) = (rng.random_range(0..d), rng.random_range(0..d));
        if c1 != c2 {
            split = j;
            break;
        }
        xi = spine_step(model, rng, xi);
    }
    if split == n {
        return (n, xi, xi, xi);
    }
    let (mut a, mut b) = (xi, xi);
    for _ in split..n {
        a = spine_step(model, rng, a);
    }
    for _ in split..n {
        b = spine_step(model, rng, b);
    }
    (split, xi, a, b)
}

/// P-side, two-spine side and matrix truth of the second-moment formula.
pub fn verify_many_to_few_2(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    n: usize,
    f: &TestFunction,
    g: &TestFunction,
    reps: u64,
) -> Result<Comparison, McError> {
    check_root(model, x)?;
    if n > 8 {
        return Err(McError::InvalidArgument(format!("second-moment check supports n ≤ 8, got {n}")));
    }
    let quantity = format!("E[sum f sum g], f={}, g={}, n={n}", f.label(), g.label());
    if n == 0 {
        let v = f.eval(model, x) * g.eval(model, x);
        let e = EstimatorResult::exact(v, plan.master_seed);
        return Ok(Comparison { quantity, lhs: e.clone(), rhs: e, truth: v });
    }
    let br = Branching::critical(model);
    let (lhs, _) = plan.derive("P").replicate(
        reps,
        || (MeanAccumulator::default(), Scratch::default()),
        |(acc, Scratch { buf, next }), rng, _| {
            br.generation(rng, x, n, buf, next);
            let sf: f64 = buf.iter().map(|&v| f.eval(model, v)).sum();
            let sg: f64 = buf.iter().map(|&v| g.eval(model, v)).sum();
            acc.push(sf * sg);
        },
    )?;
    let rhs = plan.derive("Q2").replicate(reps, MeanAccumulator::default, |acc, rng, _| {
        let (s, xi, a, b) = sample_two_spine_skeleton(model, rng, x, n);
        acc.push(two_spine_weight(model, x, n, s, xi, a, b, f, g));
    })?;
    let truth = moment_second_at(model, &f.on_grid(model), &g.on_grid(model), n, x);
    Comparison {
        quantity,
        lhs: EstimatorResult::from_accumulator(&lhs, plan.master_seed),
        rhs: EstimatorResult::from_accumulator(&rhs, plan.master_seed),
        truth,
    }
    .checked()
}

/// `E_x[dⁿ χ(ξ_n)]` for a mark walking uniformly under the forward law,
/// with the cemetery contributing zero.
pub fn zeta_martingale(plan: &Plan, model: &SpectralModel, x: f64, n: usize, reps: u64) -> Result<EstimatorResult, McError> {
    check_root(model, x)?;
    let br = Branching::critical(model);
    let scale = (model.d as f64).powi(n as i32);
    let acc = plan.replicate(reps, MeanAccumulator::default, |acc, rng, _| {
        let mut v = x;
        for _ in 0..n {
            v = br.child(v, rng);
            if v < br.h {
                acc.push(0.0);
                return;
            }
        }
        acc.push(scale * model.chi_at(v));
    })?;
    Ok(EstimatorResult::from_accumulator(&acc, plan.master_seed))
}

/// Time averages `(1/n)Σ_{k=1}^n f(ξ_k)` over independent chains; the
/// target is `∫f dπ = ⟨χ, fχ⟩`.
pub fn ergodic_average(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    n: usize,
    f: &TestFunction,
    chains: u64,
) -> Result<EstimatorResult, McError> {
    check_root(model, x)?;
    if n == 0 {
        return Err(McError::InvalidArgument("chain length must be positive".into()));
    }
    let acc = plan.replicate(chains, MeanAccumulator::default, |acc, rng, _| {
        let mut xi = x;
        let mut s = 0.0;
        for _ in 0..n {
            xi = spine_step(model, rng, xi);
            s += f.eval(model, xi);
        }
        acc.push(s / n as f64);
    })?;
    let target = model.chi.inner(&f.on_grid(model).product(&model.chi));
    Ok(EstimatorResult::from_accumulator(&acc, plan.master_seed).with_meta("target", target))
}

/// `π([a, b)) = ∫_a^b χ² dν`, by composite Gauss–Legendre on the fine χ table.
pub fn pi_mass(model: &SpectralModel, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let var = sigma_nu2(model.d);
    let (xs, ws) = composite(a, b, 8, 16);
    xs.iter()
        .zip(&ws)
        .map(|(&y, &w)| w * model.chi_at(y).powi(2) * normal_pdf(y, var))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PiHistogram {
    /// Bin edges; the last bin extends to the grid truncation point.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub expected: Vec<f64>,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Equal-width bins on `[h*, h* + width]` plus one overflow bin.
pub fn pi_bin_edges(model: &SpectralModel, bins: usize, width: f64) -> Vec<f64> {
    (0..=bins).map(|i| model.h_star + width * i as f64 / bins as f64).collect()
}

/// Histogram of `ξ_n` over independent chains against `π`.
pub fn pi_histogram(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    n: usize,
    chains: u64,
    edges: &[f64],
) -> Result<PiHistogram, McError> {
    check_root(model, x)?;
    if edges.len() < 2 || edges[0] > model.h_star || !edges.windows(2).all(|w| w[0] < w[1]) {
        return Err(McError::InvalidArgument("edges must ascend from at most h*".into()));
    }
    let bins = edges.len();
    let counts = plan.replicate(
        chains,
        || vec![0u64; bins],
        |c, rng, _| {
            let mut xi = x;
            for _ in 0..n {
                xi = spine_step(model, rng, xi);
            }
            let j = edges.partition_point(|&e| e <= xi).saturating_sub(1);
            c[j.min(bins - 1)] += 1;
        },
    )?;
    let top = model.grid().x_max.max(*edges.last().unwrap());
    let expected: Vec<f64> = (0..bins)
        .map(|j| pi_mass(model, edges[j], if j + 1 < bins { edges[j + 1] } else { top }))
        .collect();
    let ChiSquareResult { statistic, dof, p_value } = chi_square_gof(&counts, &expected);
    Ok(PiHistogram {
        edges: edges.to_vec(),
        counts,
        expected,
        statistic,
        dof,
        p_value,
    })
}

/// Observable of generation `K`: `(|N_K|, bin of the largest value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub d: u32,
    pub generation: usize,
    /// Interior edges for the largest field value in generation `K`.
    pub value_edges: Vec<f64>,
}

impl Partition {
    pub fn new(model: &SpectralModel, generation: usize) -> Self {
        Partition {
            d: model.d,
            generation,
            value_edges: vec![model.h_star + 1.0, model.h_star + 2.5],
        }
    }

    pub fn cells(&self) -> usize {
        if self.generation == 0 {
            return 1;
        }
        (self.d as usize).pow(self.generation as u32) * (self.value_edges.len() + 1)
    }

    /// Cell of a non-empty generation; `None` after extinction.
    pub fn cell(&self, values: &[f64]) -> Option<usize> {
        if values.is_empty() {
            return None;
        }
        if self.generation == 0 {
            return Some(0);
        }
        let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bin = self.value_edges.partition_point(|&e| e <= top);
        Some((values.len() - 1) * (self.value_edges.len() + 1) + bin)
    }

    /// Generation size of a cell.
    pub fn count_of(&self, cell: usize) -> usize {
        if self.generation == 0 {
            return 1;
        }
        cell / (self.value_edges.len() + 1) + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LawReport {
    pub n: usize,
    /// Empirical `P_x[B | N_n ≠ ∅]` per cell.
    pub conditioned: Vec<f64>,
    /// Empirical `Q_x[B]` from direct spine sampling.
    pub q_direct: Vec<f64>,
    /// `E_x[1_B Σ_{N_K} χ / χ(x)]` per cell.
    pub q_weighted: Vec<EstimatorResult>,
    pub tv: f64,
    pub attempts: u64,
}

impl LawReport {
    /// Largest disagreement between the two `Q` estimates, in standard errors.
    pub fn max_weight_z(&self, reps: u64) -> f64 {
        self.q_direct
            .iter()
            .zip(&self.q_weighted)
            .map(|(&q, w)| {
                let se_direct = (q * (1.0 - q) / reps as f64).sqrt();
                let se = (se_direct.powi(2) + w.std_error.powi(2)).sqrt();
                if se == 0.0 {
                    if (q - w.mean).abs() < 1e-12 { 0.0 } else { f64::INFINITY }
                } else {
                    (q - w.mean).abs() / se
                }
            })
            .fold(0.0, f64::max)
    }
}

/// Total-variation distance between the conditioned law and `Q_x` on the
/// generation-`K` partition.
pub fn conditioned_law_vs_q(
    plan: &Plan,
    model: &SpectralModel,
    x: f64,
    k: usize,
    n: usize,
    reps: u64,
) -> Result<LawReport, McError> {
    check_root(model, x)?;
    if k > 3 || n < k {
        return Err(McError::InvalidArgument(format!("need K ≤ 3 and n ≥ K, got K = {k}, n = {n}")));
    }
    let part = Partition::new(model, k);
    let cells = part.cells();
    let br = Branching::critical(model);
    let r = reps as f64;

    let accepted = plan.derive("cond").accept(reps as usize, u64::MAX, |rng, _| {
        let (mut buf, mut next) = (Vec::new(), Vec::new());
        br.generation(rng, x, k, &mut buf, &mut next);
        let cell = part.cell(&buf)?;
        for _ in k..n {
            if buf.is_empty() {
                return None;
            }
            br.next_generation(rng, &buf, &mut next);
            std::mem::swap(&mut buf, &mut next);
        }
        (!buf.is_empty()).then_some(cell)
    })?;
    let mut hits = vec![0u64; cells];
    for &c in &accepted.values {
        hits[c] += 1;
    }
    let conditioned: Vec<f64> = hits.iter().map(|&c| c as f64 / r).collect();

    let direct = plan.derive("q").replicate(
        reps,
        || vec![0u64; cells],
        |counts, rng, _| {
            let q = sample_q_tree(model, rng, x, k, 1).expect("root checked");
            let values: Vec<f64> = q.cluster.generation(k).iter().map(|v| v.value).collect();
            counts[part.cell(&values).expect("spine never dies")] += 1;
        },
    )?;
    let q_direct: Vec<f64> = direct.iter().map(|&c| c as f64 / r).collect();

    let chi_x = model.chi_at(x);
    let (weighted, _) = plan.derive("w").replicate(
        reps,
        || (vec![MeanAccumulator::default(); cells], Scratch::default()),
        |(accs, Scratch { buf, next }), rng, _| {
            br.generation(rng, x, k, buf, next);
            let cell = part.cell(buf);
            let w: f64 = buf.iter().map(|&v| model.chi_at(v)).sum::<f64>() / chi_x;
            for (j, a) in accs.iter_mut().enumerate() {
                a.push(if Some(j) == cell { w } else { 0.0 });
            }
        },
    )?;
    let q_weighted: Vec<EstimatorResult> = weighted
        .iter()
        .map(|a| EstimatorResult::from_accumulator(a, plan.master_seed))
        .collect();

    let tv = 0.5 * conditioned.iter().zip(&q_direct).map(|(p, q)| (p - q).abs()).sum::<f64>();
    Ok(LawReport {
        n,
        conditioned,
        q_direct,
        q_weighted,
        tv,
        attempts: accepted.attempts,
    })
}
