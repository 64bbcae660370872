mod common;

use proptest::prelude::*;

use common::{grid_vectors, oracle_ratios, pinned_scenario, stage};
use edgeprune::controller::{bottleneck, solve_ratios, ControllerConfig, PruneDecision, DEFAULT_GRID};
use edgeprune::curvefit::{fit_latency, AccuracyModel, LatencyCurve};
use edgeprune::model::{
    apply_prune, cost_metrics, l1_channel_ranking, removed_channel_count, restore, surviving_channel_count,
    ModelGraph,
};
use edgeprune::partition::{brute_force_partition, partition, DeviceProfile};
use edgeprune::sim::{constant_arrivals, generate_poisson_arrivals, run};

fn chain() -> impl Strategy<Value = ModelGraph> {
    (prop::collection::vec(1usize..12, 2..6), 1usize..4, any::<u64>())
        .prop_map(|(widths, kp, seed)| ModelGraph::chain(&widths, kp, 1.0, seed).unwrap())
}

fn slice_of(len: usize) -> impl Strategy<Value = std::ops::Range<usize>> {
    (0..len).prop_flat_map(move |s| (Just(s), s + 1..=len)).prop_map(|(s, e)| s..e)
}

proptest! {
    #[test]
    fn surviving_channels_follow_floor_rule(c in 1usize..512, r in 0.0f64..=1.0) {
        let removed = removed_channel_count(c, r);
        prop_assert_eq!(removed, ((r * c as f64 + 1e-9).floor() as usize).min(c - 1));
        prop_assert_eq!(surviving_channel_count(c, r), c - removed);
        prop_assert!(surviving_channel_count(c, r) >= 1);
    }

    #[test]
    fn pruned_shapes_match_ratio((model, slice) in chain().prop_flat_map(|m| { let n = m.len(); (Just(m), slice_of(n)) }), r in 0.0f64..=1.0) {
        let (pruned, _) = apply_prune(&model, slice.clone(), r).unwrap();
        let last = model.len() - 1;
        for j in 0..model.len() {
            let want = if slice.contains(&j) && j != last {
                surviving_channel_count(model.layers[j].out_channels, r)
            } else {
                model.layers[j].out_channels
            };
            prop_assert_eq!(pruned.layers[j].out_channels, want);
            if j + 1 < model.len() {
                prop_assert_eq!(pruned.layers[j + 1].in_channels, pruned.layers[j].out_channels);
            }
        }
    }

    #[test]
    fn cost_never_rises_with_ratio(model in chain(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let n = model.len();
        let (p_lo, _) = apply_prune(&model, 0..n, lo).unwrap();
        let (p_hi, _) = apply_prune(&model, 0..n, hi).unwrap();
        let c_lo = cost_metrics(&p_lo, 0..n).unwrap();
        let c_hi = cost_metrics(&p_hi, 0..n).unwrap();
        prop_assert!(c_hi.params <= c_lo.params);
        prop_assert!(c_hi.work <= c_lo.work);
    }

    #[test]
    fn ranking_survives_row_permutation(norms in prop::collection::hash_set(1u32..10_000, 2..16), seed in any::<u64>()) {
        let norms: Vec<f64> = norms.into_iter().map(f64::from).collect();
        let c = norms.len();
        let mut model = ModelGraph::chain(&[1, c], 1, 1.0, 0).unwrap();
        model.layers[0].weights = norms.iter().map(|&v| vec![v]).collect();
        let base = l1_channel_ranking(&model.layers[0]);

        let mut perm: Vec<usize> = (0..c).collect();
        let mut s = seed;
        for i in (1..c).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut permuted = model.clone();
        permuted.layers[0].weights = perm.iter().map(|&k| model.layers[0].weights[k].clone()).collect();
        // map the permuted ranking back to original indices
        let back: Vec<usize> = l1_channel_ranking(&permuted.layers[0]).iter().map(|&k| perm[k]).collect();
        prop_assert_eq!(back, base);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn restore_undoes_prune((model, slice) in chain().prop_flat_map(|m| { let n = m.len(); (Just(m), slice_of(n)) }), r in 0.0f64..=1.0) {
        let (pruned, mask) = apply_prune(&model, slice, r).unwrap();
        let restored = restore(&pruned, &mask, &model).unwrap();
        prop_assert_eq!(restored, model);
    }
}

#[test]
fn ratio_is_not_parameter_fraction() {
    let model = ModelGraph::chain(&[4, 8, 8, 4], 1, 1.0, 3).unwrap();
    let n = model.len();
    let before = cost_metrics(&model, 0..n).unwrap().params as f64;
    let (pruned, _) = apply_prune(&model, 0..n, 0.5).unwrap();
    let after = cost_metrics(&pruned, 0..n).unwrap().params as f64;
    assert!((before - after) / before > 0.5);
}

fn placement() -> impl Strategy<Value = (Vec<f64>, Vec<(f64, Option<f64>)>)> {
    (
        prop::collection::vec(0.1f64..10.0, 1..=10),
        prop::collection::vec((0.5f64..4.0, prop::option::weighted(0.2, 1.0f64..6.0)), 1..=4),
    )
}

fn build(works: &[f64], devs: &[(f64, Option<f64>)]) -> (ModelGraph, Vec<DeviceProfile>) {
    let model = ModelGraph::from_layer_works(works).unwrap();
    let devices = devs
        .iter()
        .enumerate()
        .map(|(i, &(speed, mem))| {
            let mut d = DeviceProfile::new(format!("d{i}"), speed);
            if let Some(m) = mem {
                d.memory_capacity = m.floor();
            }
            d
        })
        .collect();
    (model, devices)
}

proptest! {
    #[test]
    fn dp_matches_brute_force((works, devs) in placement()) {
        let (model, devices) = build(&works, &devs);
        match (partition(&model, &devices), brute_force_partition(&model, &devices)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.makespan, b.makespan);
                prop_assert_eq!(a.boundaries(), b.boundaries());
            }
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "dp {:?} vs oracle {:?}", a, b),
        }
    }

    #[test]
    fn plans_are_contiguous_feasible_and_bounded((works, devs) in placement()) {
        let (model, devices) = build(&works, &devs);
        if let Ok(plan) = partition(&model, &devices) {
            prop_assert_eq!(plan.stages.len(), devices.len());
            let mut next = 0;
            for (stage, dev) in plan.stages.iter().zip(&devices) {
                prop_assert_eq!(stage.layers.start, next);
                prop_assert!(!stage.layers.is_empty());
                prop_assert!(stage.params as f64 <= dev.memory_capacity);
                next = stage.layers.end;
            }
            prop_assert_eq!(next, model.len());
            let fastest = devices.iter().map(|d| d.speed).fold(0.0, f64::max);
            let bound = works.iter().cloned().fold(0.0, f64::max) / fastest;
            prop_assert!(plan.makespan >= bound - 1e-12);
            prop_assert_eq!(partition(&model, &devices).unwrap(), plan);
        }
    }

    #[test]
    fn latency_fit_round_trips(beta in 0.01f64..10.0, frac in 0.0f64..0.99) {
        let alpha = -beta * frac;
        let pts: Vec<_> = [0.0, 0.25, 0.5, 0.75, 0.9].iter().map(|&p| (p, alpha * p + beta)).collect();
        let c = fit_latency(&pts).unwrap();
        prop_assert!((c.alpha - alpha).abs() <= 1e-9 * beta);
        prop_assert!((c.beta - beta).abs() <= 1e-9 * beta);
    }

    #[test]
    fn accuracy_falls_as_any_ratio_rises(
        gamma in prop::collection::vec(-5.0f64..-0.01, 1..=4),
        delta in -4.0f64..4.0,
        k in 0usize..4,
    ) {
        let m = AccuracyModel::new(gamma.clone(), delta);
        let i = k % gamma.len();
        for p in grid_vectors(gamma.len(), &[0.0, 0.25, 0.5, 0.75]) {
            let mut q = p.clone();
            q[i] += 0.25;
            prop_assert!(m.predict(&q).unwrap() <= m.predict(&p).unwrap());
        }
    }

    #[test]
    fn equal_weighted_sums_give_equal_accuracy(g in 0.1f64..3.0, delta in -3.0f64..3.0, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        // gamma = (-g, -2g): (a, b) and (a + 2b, 0) spend the same budget
        let m = AccuracyModel::new(vec![-g, -2.0 * g], delta);
        let uniform = m.predict(&[a + 2.0 * b, 0.0]).unwrap();
        let mixed = m.predict(&[a, b]).unwrap();
        prop_assert!((uniform - mixed).abs() < 1e-12);
    }
}

fn instance() -> impl Strategy<Value = (Vec<LatencyCurve>, AccuracyModel, f64)> {
    (1usize..=4)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((0.2f64..3.0, 0.1f64..0.9), n),
                prop::collection::vec(-3.0f64..-0.2, n),
                -4.0f64..-1.0,
                0.2f64..1.1,
            )
        })
        .prop_map(|(c, gamma, delta, t)| {
            let curves: Vec<_> = c.iter().map(|&(b, f)| LatencyCurve::new(-b * f, b)).collect();
            let worst = curves.iter().map(|c| c.beta).fold(0.0, f64::max);
            (curves, AccuracyModel::new(gamma, delta), worst * t)
        })
}

fn achieved(decision: &PruneDecision, start: &[f64], curves: &[LatencyCurve]) -> f64 {
    match decision {
        PruneDecision::Prune(p) | PruneDecision::Infeasible(Some(p)) => bottleneck(curves, p),
        _ => bottleneck(curves, start),
    }
}

proptest! {
    #[test]
    fn decisions_respect_accuracy_floor((curves, acc, target) in instance(), a_min in 0.5f64..0.95) {
        let config = ControllerConfig { a_min, ..ControllerConfig::default() };
        let start = vec![0.0; curves.len()];
        let d = solve_ratios(&curves, &acc, &config, target, &start).unwrap();
        if let PruneDecision::Prune(p) = &d {
            prop_assert!(acc.predict(p).unwrap() >= a_min - 1e-9);
            prop_assert!(bottleneck(&curves, p) <= target);
            prop_assert!(p.iter().all(|r| DEFAULT_GRID.contains(r)));
        }
        prop_assert_eq!(matches!(d, PruneDecision::Infeasible(_)), oracle_ratios(&curves, &acc, a_min, target).is_none());
    }

    #[test]
    fn relaxing_accuracy_floor_never_slows_pipeline((curves, acc, target) in instance(), a in 0.5f64..0.95, b in 0.5f64..0.95) {
        let (loose, strict) = if a <= b { (a, b) } else { (b, a) };
        let start = vec![0.0; curves.len()];
        let solve = |a_min| {
            let config = ControllerConfig { a_min, ..ControllerConfig::default() };
            solve_ratios(&curves, &acc, &config, target, &start).unwrap()
        };
        let d_strict = solve(strict);
        let d_loose = solve(loose);
        prop_assert!(achieved(&d_loose, &start, &curves) <= achieved(&d_strict, &start, &curves) + 1e-12);
    }

    #[test]
    fn never_prunes_below_start((curves, acc, target) in instance(), k in prop::collection::vec(0usize..6, 4)) {
        let config = ControllerConfig { a_min: 0.5, ..ControllerConfig::default() };
        let start: Vec<f64> = (0..curves.len()).map(|i| DEFAULT_GRID[k[i]]).collect();
        if let PruneDecision::Prune(p) | PruneDecision::Infeasible(Some(p)) = solve_ratios(&curves, &acc, &config, target, &start).unwrap() {
            prop_assert!(p.iter().zip(&start).all(|(a, b)| a >= b));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn poisson_arrivals_are_sorted_and_bounded(rate in 0.1f64..50.0, duration in 0.0f64..100.0, seed in any::<u64>()) {
        let a = generate_poisson_arrivals(rate, duration, seed);
        prop_assert!(a.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(a.iter().all(|&t| t >= 0.0 && t < duration));
        prop_assert_eq!(a, generate_poisson_arrivals(rate, duration, seed));
    }

    #[test]
    fn pipeline_conserves_requests_and_keeps_fifo(
        betas in prop::collection::vec(0.05f64..1.0, 1..=3),
        rate in 0.5f64..6.0,
        seed in any::<u64>(),
    ) {
        let stages: Vec<_> = betas.iter().enumerate().map(|(i, &b)| stage(i, -0.5 * b, b)).collect();
        let n = stages.len();
        let arrivals = generate_poisson_arrivals(rate, 60.0, seed);
        let scenario = pinned_scenario(stages, arrivals.clone(), vec![0.0; n]);
        if arrivals.is_empty() {
            prop_assert!(run(&scenario).is_err());
            return Ok(());
        }
        let out = run(&scenario).unwrap();
        prop_assert_eq!(out.records.len(), arrivals.len());
        for r in &out.records {
            prop_assert!(r.completion_s >= r.arrival_s);
            prop_assert_eq!(r.latency_s, r.completion_s - r.arrival_s);
        }
        for k in 0..n {
            let mut by_start: Vec<_> = out.records.iter().map(|r| (r.id, r.stage_start[k])).collect();
            by_start.sort_by_key(|x| x.0);
            prop_assert!(by_start.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }

    #[test]
    fn single_stage_speedup_follows_curve(beta in 0.05f64..5.0, frac in 0.0f64..0.9, k in 1usize..6) {
        let alpha = -beta * frac;
        let r = DEFAULT_GRID[k];
        let mean = |ratio: f64| {
            let scenario = pinned_scenario(vec![stage(0, alpha, beta)], constant_arrivals(0.0, 2.0 * beta, 20), vec![ratio]);
            run(&scenario).unwrap().metrics.mean_latency
        };
        let want = beta / (alpha * r + beta).max(f64::MIN_POSITIVE);
        let got = mean(0.0) / mean(r);
        prop_assert!((got - want).abs() <= 0.01 * want);
    }
}
