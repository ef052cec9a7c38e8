mod common;

use mdrl::dp_solvers::{self, SolverOptions, UniversalPolicy, UniversalQ};
use mdrl::envs::two_domain_chain;
use mdrl::pmomdp::{self, PreferenceGrid};
use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn opts() -> SolverOptions {
    SolverOptions {
        tol: 1e-10,
        ..Default::default()
    }
}

fn max_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn single_domain_dr_matches_soft_value_iteration() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..10 {
        let mdp = common::random_mdp(&mut rng, 1, 5, 3, 0.9);
        let sol = dp_solvers::solve_dr(&mdp, &[1.0], &opts()).unwrap();
        assert!(sol.status.converged);
        let oracle = common::soft_value_iteration(&mdp, 0, 0.05);
        assert!(max_diff(sol.q.index_axis(Axis(0), 0).iter(), oracle.iter()) < 1e-7);
        for s in 0..5 {
            let pi = dp_solvers::soft_policy(&oracle.row(s).to_vec(), 0.05).unwrap();
            assert!(max_diff(sol.policy.row(s).iter(), pi.iter()) < 1e-6);
        }
    }
}

#[test]
fn dr_beats_each_delta_optimum_on_the_mixture() {
    let mdp = two_domain_chain();
    let o = opts();
    let w = [0.5, 0.5];
    let dr = dp_solvers::solve_dr(&mdp, &w, &o).unwrap();
    let mixed = pmomdp::scalarized_value(&mdp, dr.policy.view(), &w, o.alpha).unwrap();
    for i in 0..2 {
        let mut delta = [0.0; 2];
        delta[i] = 1.0;
        let di = dp_solvers::solve_dr(&mdp, &delta, &o).unwrap();
        let own = pmomdp::scalarized_value(&mdp, di.policy.view(), &delta, o.alpha).unwrap();
        let on_mix = pmomdp::scalarized_value(&mdp, di.policy.view(), &w, o.alpha).unwrap();
        assert!(mixed >= on_mix - 1e-6, "{mixed} < {on_mix}");
        let dr_i = pmomdp::scalarized_value(&mdp, dr.policy.view(), &delta, o.alpha).unwrap();
        assert!(dr_i <= own + 1e-6);
    }
}

#[test]
fn conditioned_single_cell_equals_dr() {
    let mdp = two_domain_chain();
    let o = opts();
    let grid = PreferenceGrid::from_cells(vec![vec![0.3, 0.7]]).unwrap();
    let cm = dp_solvers::solve_cmdrl(&mdp, &grid, &o).unwrap();
    let dr = dp_solvers::solve_dr(&mdp, &[0.3, 0.7], &o).unwrap();
    assert!(max_diff(cm.policy.cell(0).iter(), dr.policy.iter()) < 1e-12);
    assert!(max_diff(cm.q.table.index_axis(Axis(0), 0).iter(), dr.q.iter()) < 1e-12);

    let twin = PreferenceGrid::from_cells(vec![vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
    let cm2 = dp_solvers::solve_cmdrl(&mdp, &twin, &o).unwrap();
    assert_eq!(cm2.policy.cell(0), cm2.policy.cell(1));
}

#[test]
fn envelope_filter_hand_case() {
    // one state, two actions, two domains, two cells
    let mut q = Array4::zeros((2, 2, 1, 2));
    // cell 0 table: good in domain 0
    q[[0, 0, 0, 0]] = 1.0;
    q[[0, 1, 0, 0]] = 0.0;
    // cell 1 table: good in domain 1
    q[[1, 0, 0, 1]] = 0.2;
    q[[1, 1, 0, 1]] = 1.0;
    let q = UniversalQ { table: q, alpha: 1e-3 };
    let mut p = Array3::zeros((2, 1, 2));
    p[[0, 0, 0]] = 1.0;
    p[[1, 0, 1]] = 1.0;
    let policy = UniversalPolicy { table: p };
    let grid = PreferenceGrid::from_cells(vec![vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
    // query 0 scores 0.9 against 0.9*0.2 + 0.1 = 0.28
    assert_eq!(dp_solvers::envelope_filter(&q, &policy, &grid, 0, 0), 0);
    // query 1 scores 0.2 against 0.04 + 0.8 = 0.84
    assert_eq!(dp_solvers::envelope_filter(&q, &policy, &grid, 0, 1), 1);
    let skew = PreferenceGrid::from_cells(vec![vec![0.9, 0.1], vec![0.6, 0.4]]).unwrap();
    // 0.6 against 0.12 + 0.4 = 0.52
    assert_eq!(dp_solvers::envelope_filter(&q, &policy, &skew, 0, 1), 0);
    let vals = dp_solvers::filter_values(q.table.index_axis(Axis(0), 0), &[0.5, 0.5], &policy.table, 0, 1e-3);
    assert!((vals[0] - 0.5).abs() < 1e-12 && vals[1] == 0.0);
}

#[test]
fn envelope_single_cell_equals_dr_and_dominates_conditioned() {
    let mdp = two_domain_chain();
    let o = opts();
    let one = PreferenceGrid::from_cells(vec![vec![0.4, 0.6]]).unwrap();
    let em = dp_solvers::solve_emdrl(&mdp, &one, &o).unwrap();
    let dr = dp_solvers::solve_dr(&mdp, &[0.4, 0.6], &o).unwrap();
    assert!(max_diff(em.deployed.cell(0).iter(), dr.policy.iter()) < 1e-6);

    let grid = PreferenceGrid::simplex(2, 10).unwrap();
    let cm = dp_solvers::solve_cmdrl(&mdp, &grid, &o).unwrap();
    let em = dp_solvers::solve_emdrl(&mdp, &grid, &o).unwrap();
    assert!(cm.converged() && em.converged());
    let cv = dp_solvers::cell_values(&mdp, &grid, &cm.policy, o.alpha).unwrap();
    let ev = dp_solvers::cell_values(&mdp, &grid, &em.deployed, o.alpha).unwrap();
    for c in 0..grid.len() {
        assert!(ev[c] >= cv[c] - 1e-6, "cell {c}: {} < {}", ev[c], cv[c]);
    }
}

#[test]
fn utopia_delta_cells_match_per_domain_solves() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mdp = common::random_mdp(&mut rng, 2, 4, 3, 0.9);
    let grid = PreferenceGrid::simplex(2, 4).unwrap();
    let o = opts();
    let u1 = dp_solvers::solve_umdrl_v1(&mdp, &grid, &o).unwrap();
    let u2 = dp_solvers::solve_umdrl_v2(&mdp, &grid, &o).unwrap();
    for i in 0..2 {
        let oracle = common::soft_value_iteration(&mdp, i, o.alpha);
        assert!(max_diff(u1.q.index_axis(Axis(0), i).iter(), oracle.iter()) < 1e-7);
        let c = grid.delta_index(i).unwrap();
        for s in 0..4 {
            let pi = dp_solvers::soft_policy(&oracle.row(s).to_vec(), o.alpha).unwrap();
            assert!(max_diff(u1.policy.table.slice(ndarray::s![c, s, ..]).iter(), pi.iter()) < 1e-6);
        }
        // the utopian point bounds every other table
        for (a, b) in u2.q.index_axis(Axis(0), i).iter().zip(u2.utopia.z.index_axis(Axis(0), i).iter()) {
            assert!(*a <= b + 1e-7);
        }
    }
}

#[test]
fn hierarchy_collapses_for_one_domain() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mdp = common::random_mdp(&mut rng, 1, 5, 2, 0.9);
    let grid = PreferenceGrid::simplex(1, 1).unwrap();
    let rep = dp_solvers::hierarchy_report(&mdp, &grid, &opts()).unwrap();
    assert!(rep.violations.is_empty());
    for row in &rep.rows {
        for v in [row.cmdrl, row.emdrl, row.umdrl_v1, row.umdrl_v2] {
            assert!((v - row.dr_full).abs() < 1e-6, "{row:?}");
        }
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let mdp = two_domain_chain();
    let grid = PreferenceGrid::simplex(3, 2).unwrap();
    assert!(dp_solvers::solve_cmdrl(&mdp, &grid, &opts()).is_err());
    let no_delta = PreferenceGrid::from_cells(vec![vec![0.5, 0.5]]).unwrap();
    assert!(dp_solvers::solve_umdrl_v1(&mdp, &no_delta, &opts()).is_err());
    let bad = SolverOptions {
        alpha: 0.0,
        ..Default::default()
    };
    assert!(dp_solvers::solve_dr(&mdp, &[0.5, 0.5], &bad).is_err());
}
