mod common;

use common::model;
use gfftree::cluster::*;
use gfftree::field::TestFunction;
use gfftree::gaussian::{sigma_y2, upper_tail};
use gfftree::mc::{McError, Plan};
use gfftree::recursion::*;
use gfftree::stats::{chi_square_gof, median};
use proptest::prelude::*;

fn binomial(d: u32, p: f64) -> Vec<f64> {
    let mut probs = Vec::new();
    let mut c = 1.0;
    for k in 0..=d {
        probs.push(c * p.powi(k as i32) * (1.0 - p).powi((d - k) as i32));
        c = c * (d - k) as f64 / (k + 1) as f64;
    }
    probs
}

#[test]
fn first_generation_is_binomial() {
    for d in [2u32, 3] {
        let m = model(d);
        let x = m.h_star + 0.7;
        let p = upper_tail(m.h_star - x / d as f64, sigma_y2(d));
        let plan = Plan::new(11, "gen1", 1);
        let counts = plan
            .replicate(
                200_000,
                || vec![0u64; d as usize + 1],
                |c, rng, _| {
                    let cl = sample_cluster(rng, d, m.h_star, Root::Value(x), 1, 64).unwrap();
                    c[cl.generation(1).len()] += 1;
                },
            )
            .unwrap();
        let r = chi_square_gof(&counts, &binomial(d, p));
        assert!(r.p_value > 0.01, "d={d}: {r:?}");
    }
}

#[test]
fn arena_invariants() {
    let m = model(2);
    let plan = Plan::new(3, "arena", 1);
    for i in 0..200 {
        let c = sample_cluster(&mut plan.rng(i), 2, m.h_star, Root::Value(m.h_star + 2.0), 30, 5000).unwrap();
        let mut total = 0;
        for k in 0..c.depth() {
            total += c.generation(k).len();
            assert!(c.generation(k).iter().all(|n| n.generation as usize == k));
        }
        assert_eq!(total, c.size());
        for (i, n) in c.nodes.iter().enumerate() {
            assert!(n.value >= m.h_star);
            assert!(n.n_children <= 2);
            for j in c.children(i) {
                assert_eq!(c.nodes[j].parent as usize, i);
                assert_eq!(c.nodes[j].generation, n.generation + 1);
            }
            if i > 0 {
                assert!(n.parent != ROOT);
            }
        }
        if c.size() >= 5000 {
            assert!(c.truncated_at.is_some());
        }
    }
}

#[test]
fn caps_and_degenerate_levels() {
    let m = model(2);
    let mut rng = Plan::new(1, "caps", 1).rng(0);
    let c = sample_cluster(&mut rng, 2, 50.0, Root::Value(50.0), 10, 10).unwrap();
    assert_eq!(c.size(), 1);
    assert!(c.truncated_at.is_none());
    assert!(sample_cluster(&mut rng, 2, 1.0, Root::Value(0.5), 10, 10).is_err());
    assert!(sample_cluster(&mut rng, 2, 1.0, Root::Value(2.0), 0, 10).is_err());
    let c = sample_cluster(&mut rng, 2, -50.0, Root::Value(0.0), 5, 1_000_000).unwrap();
    assert_eq!(c.size(), 63);
    assert_eq!(c.truncated_at.map(|t| t.reason), Some(TruncationReason::GenerationCap));
    let c = sample_cluster(&mut rng, 2, -50.0, Root::Value(0.0), 50, 100).unwrap();
    assert_eq!(c.size(), 100);
    assert_eq!(c.truncated_at.map(|t| t.reason), Some(TruncationReason::NodeCap));
    let empty = (0..50)
        .filter(|&i| sample_cluster(&mut Plan::new(1, "nu", 1).rng(i), 2, m.h_star, Root::Nu, 5, 100).unwrap().is_empty())
        .count();
    assert!(empty > 20);
}

#[test]
fn generation_means_match_moment_recursion() {
    let m = model(2);
    let x = m.h_star + 1.0;
    let fs = [TestFunction::One, TestFunction::Chi, TestFunction::ChiSquared];
    let grid: Vec<_> = fs.iter().map(|f| f.on_grid(m)).collect();
    let plan = Plan::new(7, "means", 1);
    for n in [1, 2, 5, 10] {
        let est = generation_sums(&plan.derive(&n.to_string()), m, x, n, &fs, 100_000).unwrap();
        for ((f, g), e) in fs.iter().zip(&grid).zip(&est) {
            let truth = moment_first_at(m, g, n, x);
            let z = e.z_against(truth, 1e-9);
            assert!(z.abs() < 4.0, "n={n} f={f:?}: {} vs {truth} (z={z})", e.mean);
        }
    }
}

#[test]
fn generation_second_moments_match() {
    let m = model(2);
    let x = m.h_star + 1.0;
    let one = m.constant(1.0);
    let plan = Plan::new(8, "second", 1);
    for n in [1, 3, 6] {
        let est = generation_statistics(&plan.derive(&n.to_string()), m, x, n, 100_000, 2, |vals, out| {
            let s1 = vals.len() as f64;
            let sc: f64 = vals.iter().map(|&v| m.chi_at(v)).sum();
            out[0] = s1 * s1;
            out[1] = s1 * sc;
        })
        .unwrap();
        let t0 = moment_second_at(m, &one, &one, n, x);
        let t1 = moment_second_at(m, &one, &m.chi, n, x);
        assert!(est[0].z_against(t0, 1e-9).abs() < 4.0, "n={n}: {} vs {t0}", est[0].mean);
        assert!(est[1].z_against(t1, 1e-9).abs() < 4.0, "n={n}: {} vs {t1}", est[1].mean);
    }
}

#[test]
fn survival_matches_recursion() {
    let m = model(2);
    let x = m.h_star + 1.0;
    let n = 40;
    let s = iterate_u(m, &m.constant(0.0), n).unwrap();
    let truth = s.u_at(n, x);
    let plan = Plan::new(21, "survival", 1);
    let e = estimate_survival(&plan, m, x, n, 200_000).unwrap();
    assert!(e.z_against(truth, 0.0).abs() < 3.0, "{} vs {truth}", e.mean);
    let trend = e.meta["n_phat_over_c1chi"];
    assert!((trend - n as f64 * e.mean / (m.c1 * m.chi_at(x))).abs() < 1e-12);

    let full = estimate_survival_full_tree(&plan.derive("full"), m, x, n, 200_000).unwrap();
    let exact_full = 1.0 - (1.0 - truth).powf(3.0 / 2.0);
    assert!(full.z_against(exact_full, 0.0).abs() < 3.0, "{} vs {exact_full}", full.mean);
    let from_forward = 1.0 - (1.0 - e.mean).powf(3.0 / 2.0);
    let se = (full.std_error.powi(2) + (1.5 * e.std_error).powi(2)).sqrt();
    assert!((full.mean - from_forward).abs() < 3.0 * se);

    let zero = estimate_survival(&plan, m, x, 0, 10).unwrap();
    assert_eq!((zero.mean, zero.std_error), (1.0, 0.0));
    assert!(matches!(estimate_survival(&plan, m, m.h_star, 500, 5), Err(McError::Underpowered(_))));
    assert!(estimate_survival(&plan, m, m.h_star - 0.1, 5, 100).is_err());
}

#[test]
fn survival_is_monotone_in_root() {
    let m = model(2);
    let plan = Plan::new(4, "dom", 1);
    for n in [5, 20, 60] {
        let lo = estimate_survival(&plan.derive("lo"), m, m.h_star, n, 50_000).unwrap();
        let hi = estimate_survival(&plan.derive("hi"), m, 2.0, n, 50_000).unwrap();
        assert!(hi.z_between(&lo, 0.0) > -3.0, "n={n}: {} vs {}", hi.mean, lo.mean);
    }
}

#[test]
fn worker_count_does_not_change_results() {
    let m = model(2);
    let run = |w| estimate_survival(&Plan::new(5, "w", w), m, 2.0, 15, 5000).unwrap();
    assert_eq!(run(1), run(4));
    let cond = |w| conditional_generation_statistic(&Plan::new(5, "c", w), m, 2.0, 10, &TestFunction::One, 300).unwrap();
    assert_eq!(cond(1), cond(3));
}

#[test]
fn size_tail_table_shape() {
    let m = model(2);
    let plan = Plan::new(13, "tail", 1);
    let ms = log_thresholds(10, 1000);
    assert_eq!(ms.first(), Some(&10));
    assert_eq!(ms.last(), Some(&1000));
    let lo = size_tail_table(&plan, m, 2.0, 100_000, 100_000, &ms).unwrap();
    assert!(lo.p_hat.windows(2).all(|w| w[1] <= w[0]));
    assert!(lo.truncated_fraction < 0.01);
    let fit = fit_tail(lo.clone());
    assert!((fit.slope + 0.5).abs() < 0.1, "slope {}", fit.slope);
    // Doubling the root scales the tail by χ(4)/χ(2).
    let hi = size_tail_table(&plan.derive("x4"), m, 4.0, 100_000, 100_000, &ms).unwrap();
    let ratio = m.chi_at(4.0) / m.chi_at(2.0);
    for j in (0..ms.len()).step_by(5) {
        let r = hi.p_hat[j] / lo.p_hat[j];
        assert!((r / ratio - 1.0).abs() < 0.1, "m={}: {r} vs {ratio}", ms[j]);
    }
    assert!(size_tail_exponent(&plan, m, 2.0, 1000).is_err());
    assert!(size_tail_table(&plan, m, 2.0, 10, 100, &[10, 200]).is_err());
}

#[test]
fn conditioned_statistics_concentrate() {
    let m = model(2);
    let x = m.h_star + 1.0;
    let c = m.chi.integral();
    let chi_table = m.chi_table().clone();
    // ⟨χ, 1 − cχ⟩ = 0.
    let centered = TestFunction::custom("centered", move |v| 1.0 - c * chi_table.eval(v));
    assert!(m.chi.inner(&centered.on_grid(m)).abs() < 1e-7);
    let plan = Plan::new(17, "cond", 1);
    let s = conditional_generation_statistic(&plan, m, x, 60, &centered, 3000).unwrap();
    let big = s.z_f.iter().filter(|z| z.abs() > 0.1).count() as f64 / s.z_f.len() as f64;
    assert!(big < 0.05, "P(|Z| > 0.1) = {big}");
    let one = conditional_generation_statistic(&plan.derive("one"), m, x, 60, &TestFunction::One, 3000).unwrap();
    assert!(one.attempts >= 3000);
    let mut ratio = one.ratio.clone();
    let med = median(&mut ratio);
    assert!((med / c - 1.0).abs() < 0.03, "median ratio {med} vs {c}");
    let r = rescaled(m, &one, &TestFunction::One);
    let mean = r.0.iter().sum::<f64>() / r.0.len() as f64;
    assert!((mean - 1.0).abs() < 0.15, "rescaled mean {mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn clusters_respect_caps(seed in 0u64..1000, gen_cap in 1u32..20, node_cap in 1usize..400) {
        let m = model(2);
        let mut rng = Plan::new(seed, "prop", 1).rng(0);
        let c = sample_cluster(&mut rng, 2, m.h_star, Root::Value(m.h_star + 3.0), gen_cap, node_cap).unwrap();
        prop_assert!(c.size() <= node_cap);
        prop_assert!(c.height().unwrap() <= gen_cap);
        prop_assert!(c.nodes.iter().all(|n| n.value >= m.h_star));
    }
}
