mod common;

use common::model;
use gfftree::field::TestFunction;
use gfftree::mc::Plan;
use gfftree::stats::median;
use gfftree::traversal::*;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn trace_invariants() {
    let m = model(2);
    let x = m.h_star + 0.5;
    let mut rng = Plan::new(1, "trace", 1).rng(0);
    let t = run_traversal(m, &mut rng, x, 20_000).unwrap();
    assert_eq!(t.len(), 20_000);
    assert_eq!(t.s[0], 0.0);
    assert_eq!((t.h[0], t.lambda[0], t.phi[0]), (0, 1, x));
    for k in 1..t.len() {
        assert!(t.h[k] <= t.h[k - 1] + 1);
        let jump = t.lambda[k] - t.lambda[k - 1];
        assert!(jump <= 1);
        assert_eq!(jump == 1, t.h[k] == 0, "step {k}");
        assert!(t.phi[k] >= m.h_star);
    }
    assert!(traversal_lln(m, &t, &TestFunction::One) == 1.0);
    assert!(run_traversal(m, &mut rng, x, 0).is_err());
    assert!(run_traversal(m, &mut rng, m.h_star - 1.0, 5).is_err());
}

#[test]
fn increments_follow_the_children() {
    let m = model(2);
    let x = m.h_star + 1.0;
    let mut rng = Plan::new(2, "incr", 1).rng(0);
    let mut t = Traversal::new(m, x, 7).unwrap();
    let mut prev = t.advance(&mut rng).unwrap();
    for _ in 0..50_000 {
        let exact = t.pending_exact();
        let next = t.advance(&mut rng).unwrap();
        assert!((next.s - prev.s - prev.increment).abs() < 1e-9 * (1.0 + prev.s.abs()));
        assert!((next.pending - exact).abs() < 1e-9 * (1.0 + exact));
        prev = next;
    }
}

#[test]
fn martingale_structure() {
    let m = model(2);
    let x = m.h_star + 1.0;
    let s = martingale_suite(&Plan::new(3, "mart", 1), m, x, 2000, 500, 20).unwrap();
    assert_eq!(s.traces, 500);
    for (b, z) in s.increment_z().iter().enumerate() {
        assert!(z.abs() < 3.5, "bin {b}: z = {z}");
    }
    let slope = s.v_slope();
    assert!((slope - 1.0).abs() < 0.03, "slope {slope}");
    let mean_s = s.s_final.mean();
    assert!(mean_s.abs() < 3.5 * s.s_final.std_error());
    let rate = s.variance_rate();
    assert!((rate / m.sigma2 - 1.0).abs() < 0.15, "{rate} vs {}", m.sigma2);
    let (f0, f1) = (s.fourth[0].mean(), s.fourth[1].mean());
    assert!(f0.is_finite() && (f1 / f0 - 1.0).abs() < 0.25, "{f0} {f1}");
}

#[test]
fn visit_law_quadrature() {
    let m = model(2);
    let total = visit_mass(m, m.h_star, m.grid().x_max);
    assert!((total - 1.0).abs() < 1e-6);
    let edges = visit_quantile_edges(m, 20);
    assert_eq!(edges.len(), 20);
    for w in edges.windows(2) {
        assert!((visit_mass(m, w[0], w[1]) - 0.05).abs() < 1e-6);
    }
    let one = lln_limit(m, &TestFunction::One);
    assert!((one - 1.0).abs() < 1e-14);
}

#[test]
fn law_of_large_numbers() {
    let m = model(2);
    let x = m.h_star + 1.0;
    let (a, b) = (m.h_star + 0.5, m.h_star + 1.5);
    let fs = [TestFunction::ChiCapped(m.chi_at(x)), TestFunction::Indicator(a, b)];
    let accs = lln_average(&Plan::new(4, "lln", 1), m, x, 100_000, &fs, 16).unwrap();
    let cap = lln_limit(m, &fs[0]);
    assert!((accs[0].mean() / cap - 1.0).abs() < 0.02, "{} vs {cap}", accs[0].mean());
    let bin = visit_mass(m, a, b);
    // The grid rule integrates the jump of an indicator only to O(node spacing).
    assert!((lln_limit(m, &fs[1]) - bin).abs() < 1e-2);
    assert!((accs[1].mean() - bin).abs() < 3.0 * accs[1].std_error(), "{} vs {bin}", accs[1].mean());
}

#[test]
fn lambda_grows_like_sqrt_n() {
    let m = model(2);
    let ns = [1000, 10_000, 100_000];
    let accs = lambda_scaling(&Plan::new(5, "lambda", 1), m, m.h_star + 1.0, &ns, 40).unwrap();
    let means: Vec<f64> = accs.iter().map(|a| a.mean()).collect();
    let (lo, hi) = means.iter().fold((f64::MAX, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    assert!(hi / lo < 1.5, "{means:?}");
}

#[test]
fn forest_sup_statistic() {
    let m = model(2);
    let x = m.h_star + 1.0;
    let p = sup_statistic(&Plan::new(6, "sup", 1), m, x, 200, 1.0 / m.c1, 2000).unwrap();
    let limit = 1.0 - (-m.chi_at(x) * m.c1).exp();
    assert!((p.mean() - limit).abs() < 3.0 * p.std_error().max(1e-3), "{} vs {limit}", p.mean());
}

#[test]
fn tree_walk_against_forest_traversal() {
    let m = model(2);
    let x = m.h_star + 1.0;
    let plan = Plan::new(7, "walk", 1);
    for i in 0..50 {
        let c = sample_tree(m, &mut plan.rng(i), x, 100_000).unwrap();
        let w = TreeWalk::new(m, &c);
        assert_eq!(w.order.len(), c.size());
        assert_eq!(w.order[0], 0);
        assert_eq!(w.s_bar[0], 0.0);
        // S̄ along the depth-first order obeys the same increment rule as S.
        for k in 1..w.order.len() {
            let (u, v) = (w.order[k - 1] as usize, w.order[k] as usize);
            let kids: f64 = c.children(u).map(|j| m.chi_at(c.nodes[j].value)).sum();
            let lhs = (w.s_bar[v] + m.chi_at(c.nodes[v].value)) - (w.s_bar[u] + m.chi_at(c.nodes[u].value));
            assert!((lhs - (kids - m.chi_at(c.nodes[u].value))).abs() < 1e-9, "tree {i} step {k}");
        }
    }
}

#[test]
fn mrca_matches_brute_force() {
    let m = model(2);
    let plan = Plan::new(8, "mrca", 1);
    let c = (0..)
        .map(|i| sample_tree(m, &mut plan.rng(i), m.h_star + 2.0, 100_000).unwrap())
        .find(|c| c.size() > 200)
        .unwrap();
    let ancestors = |mut v: usize| {
        let mut a = vec![v];
        while c.nodes[v].parent != u32::MAX {
            v = c.nodes[v].parent as usize;
            a.push(v);
        }
        a
    };
    let mut rng = plan.derive("pairs").rng(0);
    for _ in 0..100 {
        let (a, b) = (rng.random_range(0..c.size()), rng.random_range(0..c.size()));
        let (la, lb) = (ancestors(a), ancestors(b));
        let brute = *la.iter().find(|v| lb.contains(v)).unwrap();
        assert_eq!(mrca(&c, a, b), brute);
    }
    let w = TreeWalk::new(m, &c);
    let dm = distance_matrices(&c, &w, &mut rng, 4, 10);
    for i in 0..4 {
        assert_eq!(dm.dh[i * 4 + i], 0.0);
        assert_eq!(dm.ds[i * 4 + i], 0.0);
        for j in 0..4 {
            assert_eq!(dm.dh[i * 4 + j], dm.dh[j * 4 + i]);
            assert_eq!(dm.ds[i * 4 + j], dm.ds[j * 4 + i]);
            assert!(dm.dh[i * 4 + j] >= 0.0 && dm.ds[i * 4 + j] >= -1e-12);
        }
    }
}

#[test]
fn conditioned_trees() {
    let m = model(2);
    let x = m.h_star + 1.0;
    let plan = Plan::new(9, "cond", 1);
    let (c, w, attempts) = conditioned_tree(&plan, m, x, 30, 2_000_000).unwrap();
    assert!(c.height().unwrap() >= 30);
    assert!(attempts >= 1);
    assert_eq!(bad_fraction(m, &c, &w, 0.5, 31, 30), 0.0);
    let hi = bad_fraction(m, &c, &w, 0.25, 5, 30);
    let lo = bad_fraction(m, &c, &w, 1.0, 5, 30);
    assert!(lo <= hi);

    let cfg = ConditionedConfig {
        bad: vec![(0.5, 10), (0.5, 20), (0.25, 10), (1.0, 10)],
        ..ConditionedConfig::default()
    };
    let mut medians = Vec::new();
    let mut sizes = Vec::new();
    for n in [20, 40, 80] {
        let run = conditioned_run(&plan.derive(&n.to_string()), m, x, n, 150, &cfg).unwrap();
        assert_eq!(run.samples.len(), 150);
        assert!(run.samples.iter().all(|s| s.height as usize >= n));
        let mut f: Vec<f64> = run.samples.iter().map(|s| s.frobenius).collect();
        medians.push(median(&mut f));
        let mut sz: Vec<f64> = run.samples.iter().map(|s| s.size as f64 / (n * n) as f64).collect();
        sizes.push(median(&mut sz));
        let mean_bad = |j: usize| run.samples.iter().map(|s| s.bad[j]).sum::<f64>() / 150.0;
        assert!(mean_bad(2) >= mean_bad(0) && mean_bad(0) >= mean_bad(3));
        if n == 80 {
            let hit = run.samples.iter().filter(|s| s.sup_s_bar >= n as f64 / m.c1).count() as f64 / 150.0;
            assert!(hit >= 0.85, "sup hit rate {hit}");
            assert!(mean_bad(1) < 0.2, "bad fraction {}", mean_bad(1));
        }
    }
    let (lo, hi) = sizes.iter().fold((f64::MAX, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
    assert!(hi / lo < 2.0, "size/n² medians {sizes:?}");
    assert!(medians[2] < medians[0], "{medians:?}");
}

#[test]
fn worker_independence() {
    let m = model(2);
    let run = |w| martingale_suite(&Plan::new(10, "w", w), m, 2.0, 300, 40, 5).unwrap();
    assert_eq!(run(1), run(3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn s_bar_is_nonnegative_and_rooted(seed in 0u64..10_000) {
        let m = model(2);
        let c = sample_tree(m, &mut Plan::new(seed, "prop", 1).rng(0), m.h_star + 1.0, 50_000).unwrap();
        let w = TreeWalk::new(m, &c);
        prop_assert!(w.s_bar.iter().all(|&s| s >= 0.0));
        for i in 1..c.size() {
            let p = c.nodes[i].parent as usize;
            prop_assert!(w.s_bar[i] >= w.s_bar[p] - 1e-12);
        }
    }
}
