use mdrl::envs::two_domain_chain;
use mdrl::pmomdp::{self, PreferenceGrid};
use mdrl::rl_loop::{self, Algo, Critics, Item, ReplayBuffer, ReplayPosterior, TargetContext, TrainConfig};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn item(s: usize, a: usize, r: f64, s_next: usize, domain: usize, cell: usize) -> Item {
    Item {
        s,
        a,
        r,
        s_next,
        domain,
        cell,
        next_cell: cell,
    }
}

fn random_critics(rng: &mut ChaCha8Rng, nc: usize, nd: usize, ns: usize, na: usize) -> Critics {
    let mut c = Critics::zeros(nc, nd, ns, na);
    for j in 0..2 {
        c.target[j].mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        c.online[j].mapv_inplace(|_| rng.gen_range(-1.0..1.0));
    }
    c
}

fn random_policy(rng: &mut ChaCha8Rng, nc: usize, ns: usize, na: usize) -> Array3<f64> {
    let mut p = Array3::from_shape_fn((nc, ns, na), |_| rng.gen_range(0.1..1.0));
    for c in 0..nc {
        for s in 0..ns {
            let z: f64 = (0..na).map(|a| p[[c, s, a]]).sum();
            for a in 0..na {
                p[[c, s, a]] /= z;
            }
        }
    }
    p
}

#[test]
fn zero_discount_target_is_reward() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let grid = PreferenceGrid::simplex(2, 4).unwrap();
    let critics = random_critics(&mut rng, grid.len(), 2, 3, 2);
    let policy = random_policy(&mut rng, grid.len(), 3, 2);
    let delta = [grid.delta_index(0).unwrap(), grid.delta_index(1).unwrap()];
    for algo in Algo::ALL {
        let ctx = TargetContext {
            algo,
            grid: &grid,
            delta_cells: &delta,
            alpha: 0.05,
            gamma: 0.0,
            entropy: true,
        };
        let it = item(0, 1, 0.37, 2, 1, 3);
        assert_eq!(rl_loop::td_target(&ctx, &it, &critics, &policy), 0.37);
    }
}

#[test]
fn conditioned_target_matches_hand_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let grid = PreferenceGrid::simplex(2, 2).unwrap();
    let critics = random_critics(&mut rng, grid.len(), 2, 3, 2);
    let policy = random_policy(&mut rng, grid.len(), 3, 2);
    let delta = [grid.delta_index(0).unwrap(), grid.delta_index(1).unwrap()];
    let (alpha, gamma) = (0.05, 0.9);
    let it = item(0, 1, -0.25, 2, 1, 1);
    let expected = it.r
        + gamma
            * (0..2)
                .map(|a| {
                    let p = policy[[1, 2, a]];
                    let q = critics.target[0][[1, 1, 2, a]].min(critics.target[1][[1, 1, 2, a]]);
                    p * (q - alpha * p.ln())
                })
                .sum::<f64>();
    let mut ctx = TargetContext {
        algo: Algo::Cmdsac,
        grid: &grid,
        delta_cells: &delta,
        alpha,
        gamma,
        entropy: true,
    };
    assert!((rl_loop::td_target(&ctx, &it, &critics, &policy) - expected).abs() < 1e-14);
    ctx.entropy = false;
    let plain = it.r
        + gamma
            * (0..2)
                .map(|a| policy[[1, 2, a]] * critics.min_target([1, 1, 2, a]))
                .sum::<f64>();
    assert!((rl_loop::td_target(&ctx, &it, &critics, &policy) - plain).abs() < 1e-14);
}

#[test]
fn critic_loss_decreases_on_fixed_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut critics = Critics::zeros(1, 2, 4, 2);
    let batch: Vec<Item> = (0..64)
        .map(|_| item(rng.gen_range(0..4), rng.gen_range(0..2), 0.0, 0, rng.gen_range(0..2), 0))
        .collect();
    let targets: Vec<f64> = batch.iter().map(|it| (it.s as f64) - 0.5 * it.a as f64 + it.domain as f64).collect();
    let first = rl_loop::critic_update(&mut critics, Algo::Drsac, &batch, &targets, 0.1, false).unwrap();
    let mut last = first;
    for _ in 0..99 {
        last = rl_loop::critic_update(&mut critics, Algo::Drsac, &batch, &targets, 0.1, false).unwrap();
    }
    assert!(last[0] < 1e-3 * first[0] && last[1] < 1e-3 * first[1]);
    assert!(rl_loop::critic_update(&mut critics, Algo::Drsac, &batch, &targets[1..], 0.1, false).is_err());
}

#[test]
fn uniform_critics_give_uniform_policy() {
    let grid = PreferenceGrid::simplex(2, 4).unwrap();
    let mut critics = Critics::zeros(grid.len(), 2, 3, 4);
    critics.online[0].fill(2.5);
    critics.online[1].fill(2.5);
    let mut policy = Array3::zeros((grid.len(), 3, 4));
    let pairs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..3).map(move |s| (c, s))).collect();
    let post = ReplayPosterior::new(grid.len(), 2, 3);
    let obj = rl_loop::actor_update(&mut policy, &critics, Algo::Cmdsac, &grid, &post, &pairs, 0.05).unwrap();
    assert!(policy.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    assert!((obj - (2.5 + 0.05 * 4f64.ln())).abs() < 1e-12);
}

#[test]
fn polyak_moves_a_fixed_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let c = random_critics(&mut rng, 2, 2, 2, 2);
    let mut t = c.target[0].clone();
    rl_loop::polyak_update(&mut t, &c.online[0], 0.005).unwrap();
    for ((new, old), on) in t.iter().zip(c.target[0].iter()).zip(c.online[0].iter()) {
        assert!((new - (0.005 * on + 0.995 * old)).abs() < 1e-15);
    }
    let mut same = c.online[0].clone();
    rl_loop::polyak_update(&mut same, &c.online[0], 1.0).unwrap();
    assert_eq!(same, c.online[0]);
}

fn small(algo: Algo, total: usize, warmup: usize) -> TrainConfig {
    TrainConfig {
        algo,
        total_steps: total,
        warmup,
        batch_size: 32,
        resolution: Some(4),
        sirsa_subsets: 8,
        ..Default::default()
    }
}

#[test]
fn warmup_only_run_makes_no_updates() {
    let mdp = two_domain_chain();
    let res = rl_loop::run_training(&mdp, &[(0.0, 1.0)], &small(Algo::Cmdsac, 500, 500)).unwrap();
    assert_eq!(res.updates, 0);
    assert!(res.critics.online[0].iter().all(|&q| q == 0.0));
    assert!(rl_loop::run_training(&mdp, &[(0.0, 1.0)], &small(Algo::Cmdsac, 100, 500)).is_err());
}

#[test]
fn training_is_reproducible_per_seed() {
    let mdp = two_domain_chain();
    for algo in Algo::ALL {
        let cfg = small(algo, 2000, 200);
        let a = rl_loop::run_training(&mdp, &[(0.0, 1.0)], &cfg).unwrap();
        let b = rl_loop::run_training(&mdp, &[(0.0, 1.0)], &cfg).unwrap();
        assert_eq!(a.metrics, b.metrics, "{algo}");
        assert_eq!(a.policy, b.policy, "{algo}");
        assert_eq!(a.updates, 1800, "{algo}");
        for c in 0..a.grid.len() {
            for s in 0..mdp.n_states {
                let z: f64 = a.policy.slice(ndarray::s![c, s, ..]).sum();
                assert!((z - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sirsa_boxes_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let range = [(0.1, 0.9), (2.0, 5.0)];
    let boxes = rl_loop::sirsa_sample_subsets(&range, 200, (0.25, 1.0), &mut rng).unwrap();
    for b in boxes {
        let pmomdp::Preference::UniformBox { mu, sigma } = b else {
            panic!("not a box")
        };
        for c in 0..2 {
            let half = 3f64.sqrt() * sigma[c];
            let (lo, hi) = range[c];
            assert!(mu[c] - half >= lo - 1e-12 && mu[c] + half <= hi + 1e-12);
            assert!(2.0 * half >= 0.25 * (hi - lo) - 1e-12);
        }
    }
    assert!(rl_loop::sirsa_sample_subsets(&range, 0, (0.25, 1.0), &mut rng).is_err());
}

#[test]
fn replay_keeps_newest_items_at_capacity() {
    let mut buf = ReplayBuffer::new(5);
    for k in 0..12 {
        buf.push(item(k, 0, k as f64, 0, 0, 0));
    }
    assert_eq!(buf.len(), 5);
    let mut kept: Vec<usize> = buf.items().iter().map(|i| i.s).collect();
    kept.sort();
    assert_eq!(kept, vec![7, 8, 9, 10, 11]);
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let draw = buf.sample(10, &mut rng);
    assert_eq!(draw.len(), 5);
}

#[test]
fn replay_posterior_falls_back_to_prior() {
    let mut post = ReplayPosterior::new(1, 2, 2);
    assert_eq!(post.weights(0, 0, &[0.3, 0.7]), vec![0.3, 0.7]);
    post.record(0, 0, 0, 1.0);
    post.record(0, 1, 0, 3.0);
    assert_eq!(post.weights(0, 0, &[0.3, 0.7]), vec![0.25, 0.75]);
    post.decay(0, 0.5);
    assert_eq!(post.counts[[0, 1, 0]], 1.5);
}
