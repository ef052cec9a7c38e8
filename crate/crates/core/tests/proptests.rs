mod common;

use mdrl::dp_solvers::{self, UniversalPolicy, UniversalQ};
use mdrl::envs::{self, ChainParams};
use mdrl::harness;
use mdrl::osi::{self, EnsembleOSI, Posterior};
use mdrl::pmomdp::{self, validate_mdp, Preference, PreferenceGrid, ValueVector};
use mdrl::report::fmt_real;
use mdrl::rl_loop::{Critics, Item, ReplayBuffer};
use mdrl::unscented::{self, SigmaPointSet};
use mdrl::utility;
use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vv(values: &[Vec<f64>]) -> Vec<ValueVector> {
    values.iter().map(|v| ValueVector(v.clone())).collect()
}

fn value_sets(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec((0i32..12).prop_map(|k| k as f64 / 3.0), dim), 1..25)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exact_values_match_sweeps(seed in any::<u64>(), nd in 1usize..4, ns in 2usize..6, na in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = common::random_mdp(&mut rng, nd, ns, na, 0.8);
        prop_assert!(validate_mdp(&mdp).is_empty());
        let pi = Array2::from_shape_fn((ns, na), |_| rng.gen_range(0.05..1.0));
        let z = pi.sum_axis(ndarray::Axis(1));
        let pi = Array2::from_shape_fn((ns, na), |(s, a)| pi[[s, a]] / z[s]);
        let v = pmomdp::policy_value_exact(&mdp, pi.view(), 0.1).unwrap();
        let o = common::iterative_values(&mdp, &pi, 0.1);
        for (a, b) in v.iter().zip(o.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn reward_scaling_scales_values(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = common::random_mdp(&mut rng, 2, 4, 2, 0.9);
        let pi = pmomdp::uniform_policy(4, 2);
        let mut scaled = mdp.clone();
        scaled.domains[1].reward.mapv_inplace(|r| r * c);
        let v = pmomdp::policy_value_exact(&mdp, pi.view(), 0.0).unwrap();
        let w = pmomdp::policy_value_exact(&scaled, pi.view(), 0.0).unwrap();
        for s in 0..4 {
            prop_assert!((w[[1, s]] - c * v[[1, s]]).abs() < 1e-9 * (1.0 + c * v[[1, s]].abs()));
            prop_assert_eq!(w[[0, s]], v[[0, s]]);
        }
    }

    #[test]
    fn grid_holds_every_vertex_once(nd in 1usize..5, r in 1usize..7) {
        let grid = PreferenceGrid::simplex(nd, r).unwrap();
        for i in 0..nd {
            prop_assert!(grid.delta_index(i).is_some());
        }
        for (k, c) in grid.cells.iter().enumerate() {
            prop_assert!(Preference::discrete(c.clone()).is_ok());
            prop_assert!(!grid.cells[..k].contains(c));
        }
    }

    #[test]
    fn ccs_inside_pcs(values in value_sets(2)) {
        let grid = PreferenceGrid::simplex(2, 10).unwrap();
        let pcs = utility::compute_pcs(&vv(&values)).unwrap().ids();
        let ccs = utility::compute_ccs(&vv(&values), &grid).unwrap().ids();
        prop_assert!(ccs.iter().all(|i| pcs.contains(i)));
        prop_assert_eq!(pcs, common::pcs_oracle(&values));
    }

    #[test]
    fn ccs_ignores_duplicates(values in value_sets(3)) {
        let grid = PreferenceGrid::simplex(3, 4).unwrap();
        let points = |vals: &[Vec<f64>]| {
            let mut p: Vec<Vec<f64>> = utility::compute_ccs(&vv(vals), &grid)
                .unwrap()
                .entries
                .into_iter()
                .map(|e| e.values.0)
                .collect();
            p.sort_by(|a, b| a.partial_cmp(b).unwrap());
            p.dedup();
            p
        };
        let mut doubled = values.clone();
        doubled.extend(values.iter().rev().cloned());
        prop_assert_eq!(points(&values), points(&doubled));
    }

    #[test]
    fn winner_survives_rescaling(values in value_sets(3), w in prop::collection::vec(0.01f64..1.0, 3), c in 0.01f64..100.0) {
        let scaled: Vec<f64> = w.iter().map(|x| x * c).collect();
        let a = utility::optimal_scalarized_value(&vv(&values), &w).unwrap();
        let b = utility::optimal_scalarized_value(&vv(&values), &scaled).unwrap();
        let va = utility::linear_utility(&values[a.1], &w).unwrap();
        let vb = utility::linear_utility(&values[b.1], &w).unwrap();
        prop_assert!((va - vb).abs() < 1e-12);
    }

    #[test]
    fn mapped_mean_is_map_of_mean(
        pts in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 2), 5),
        mu in prop::collection::vec(0.3f64..0.7, 2),
        sigma in prop::collection::vec(0.0f64..0.05, 2),
    ) {
        let flat: Vec<f64> = pts.concat();
        let set = SigmaPointSet::from_points(Array2::from_shape_vec((5, 2), flat).unwrap(), 1);
        let pref = Preference::UniformBox { mu: mu.clone(), sigma: sigma.clone() };
        let mapped = unscented::map_sigma_points(&set, &pref).unwrap();
        let mean = set.points.mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0));
        let of_mean = unscented::map_sigma_points(&SigmaPointSet::from_points(mean, 1), &pref).unwrap();
        let mean_of = mapped.mean_axis(ndarray::Axis(0)).unwrap();
        for c in 0..2 {
            prop_assert!((mean_of[c] - of_mean[[0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant(q in prop::collection::vec(-5.0f64..5.0, 1..6), shift in -100.0f64..100.0, alpha in 0.01f64..2.0) {
        let p = dp_solvers::soft_policy(&q, alpha).unwrap();
        let shifted: Vec<f64> = q.iter().map(|x| x + shift).collect();
        let ps = dp_solvers::soft_policy(&shifted, alpha).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&ps) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let v = dp_solvers::soft_value(&q, alpha).unwrap();
        prop_assert!(v >= q.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 1e-12);
    }

    #[test]
    fn filter_never_worse_than_query(seed in any::<u64>(), nd in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PreferenceGrid::simplex(nd, 3).unwrap();
        let (nc, ns, na) = (grid.len(), 3, 3);
        let q = UniversalQ { table: Array4::from_shape_fn((nc, nd, ns, na), |_| rng.gen_range(-1.0..1.0)), alpha: 0.05 };
        let raw = Array3::from_shape_fn((nc, ns, na), |_| rng.gen_range(0.01..1.0));
        let mut table = raw.clone();
        for c in 0..nc {
            for s in 0..ns {
                let z: f64 = (0..na).map(|a| raw[[c, s, a]]).sum();
                for a in 0..na {
                    table[[c, s, a]] = raw[[c, s, a]] / z;
                }
            }
        }
        let policy = UniversalPolicy { table };
        for c in 0..nc {
            for s in 0..ns {
                let k = dp_solvers::envelope_filter(&q, &policy, &grid, s, c);
                let scores: Vec<f64> = (0..nc)
                    .map(|j| dp_solvers::filter_values(q.table.index_axis(ndarray::Axis(0), j), &grid.cells[c], &policy.table, s, 0.05)[j])
                    .collect();
                prop_assert!(scores[k] >= scores[c]);
            }
        }
    }

    #[test]
    fn replay_holds_only_recent_items(cap in 1usize..40, pushes in 0usize..120) {
        let mut buf = ReplayBuffer::new(cap);
        for k in 0..pushes {
            buf.push(Item { s: k, a: 0, r: 0.0, s_next: 0, domain: 0, cell: 0, next_cell: 0 });
        }
        prop_assert_eq!(buf.len(), pushes.min(cap));
        prop_assert!(buf.items().iter().all(|i| i.s + cap >= pushes));
        let mut rng = ChaCha8Rng::seed_from_u64(pushes as u64);
        let mut drawn: Vec<usize> = buf.sample(cap, &mut rng).iter().map(|i| i.s).collect();
        let n = drawn.len();
        drawn.sort();
        drawn.dedup();
        prop_assert_eq!(drawn.len(), n);
    }

    #[test]
    fn twin_minimum_below_both(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = Critics::zeros(2, 2, 3, 2);
        for j in 0..2 {
            c.online[j].mapv_inplace(|_| rng.gen_range(-1.0..1.0));
            c.target[j].mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        }
        for idx in ndarray::indices((2, 2, 3, 2)) {
            let i = [idx.0, idx.1, idx.2, idx.3];
            prop_assert!(c.min_online(i) <= c.online[0][i] && c.min_online(i) <= c.online[1][i]);
            prop_assert!(c.min_target(i) <= c.target[0][i] && c.min_target(i) <= c.target[1][i]);
        }
    }

    #[test]
    fn two_steps_compose(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = common::random_mdp(&mut rng, 3, 4, 2, 0.9);
        let d = rng.gen_range(0..3);
        let (s1, _) = pmomdp::sample_transition(&mdp, d, 0, 0, &mut rng).unwrap();
        let (s2, _) = pmomdp::sample_transition(&mdp, d, s1, 1, &mut rng).unwrap();
        let prior = Posterior::uniform(3);
        let mid = osi::bayes_filter_step(&prior, &mdp, 0, 0, s1).unwrap().posterior;
        let seq = osi::bayes_filter_step(&mid, &mdp, s1, 1, s2).unwrap().posterior;
        // joint likelihood in one step
        let joint: Vec<f64> = (0..3)
            .map(|i| mdp.domains[i].transition[[0, 0, s1]] * mdp.domains[i].transition[[s1, 1, s2]])
            .collect();
        let z: f64 = joint.iter().sum();
        let w = seq.weights().unwrap();
        prop_assert!(seq.validate().is_ok());
        for i in 0..3 {
            prop_assert!((w[i] - joint[i] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_ignores_member_order(seed in any::<u64>(), s in 0usize..5, a in 0usize..2, t in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = EnsembleOSI::new(5, 2, &[(0.1, 0.9)], 4, &mut rng).unwrap();
        let mut r = e.clone();
        r.members.rotate_left(1);
        let prior = Posterior::full_box(&[(0.1, 0.9)]);
        let (Posterior::MeanStd { mu: m1, sigma: s1 }, Posterior::MeanStd { mu: m2, sigma: s2 }) = (
            osi::ensemble_predict(&e, s, a, t, &prior).unwrap().posterior,
            osi::ensemble_predict(&r, s, a, t, &prior).unwrap().posterior,
        ) else { unreachable!() };
        prop_assert!((m1[0] - m2[0]).abs() < 1e-14 && (s1[0] - s2[0]).abs() < 1e-14);
        prop_assert!(m1[0].is_finite() && s1[0] >= 0.0);
    }

    #[test]
    fn built_chains_are_valid(a in 0.0f64..=1.0, b in 0.0f64..=1.0, len in 3usize..9, g in 0.05f64..0.99) {
        let p = ChainParams { length: len, gamma: g, ..Default::default() };
        let mdp = envs::build_two_domain_chain(&p, a, b).unwrap();
        prop_assert!(validate_mdp(&mdp).is_empty());
        prop_assert_eq!(mdp.to_toml(), envs::build_two_domain_chain(&p, a, b).unwrap().to_toml());
    }

    #[test]
    fn reals_print_fixed_point(x in -1e6f64..1e6) {
        let s = fmt_real(x);
        prop_assert!((s.parse::<f64>().unwrap() - x).abs() < 5.1e-9);
        prop_assert_eq!(s.split('.').nth(1).map(str::len), Some(8));
        prop_assert!(s != "-0.00000000");
    }

    #[test]
    fn iqm_within_sample_range(xs in prop::collection::vec(-100.0f64..100.0, 1..60)) {
        let (iqm, iqr) = harness::interquartile(&xs);
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(iqm >= lo - 1e-9 && iqm <= hi + 1e-9);
        prop_assert!(iqr >= 0.0 && iqr <= hi - lo + 1e-9);
    }
}
