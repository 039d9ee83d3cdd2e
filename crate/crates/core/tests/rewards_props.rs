use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvla_core::numerics::Tensor;
use rvla_core::rewards::{acc_seq, r_acc, r_steer, r_total, r_traj, RewardConfig};

fn traj(rows: &[[f64; 2]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

// Independent spreadsheet-style oracle: each column is built on its own.
struct Oracle<'a> {
    cfg: &'a RewardConfig,
}

impl Oracle<'_> {
    fn traj(&self, p: &[[f64; 2]], g: &[[f64; 2]]) -> f64 {
        let h = p.len();
        let weights: Vec<f64> = (1..=h).map(|i| self.cfg.gamma.powi(i as i32)).collect();
        let sq_x: Vec<f64> = p.iter().zip(g).map(|(a, b)| (a[0] - b[0]).powi(2)).collect();
        let sq_y: Vec<f64> = p.iter().zip(g).map(|(a, b)| (a[1] - b[1]).powi(2)).collect();
        let pen: f64 = (0..h)
            .map(|i| weights[i] * (self.cfg.alpha * sq_x[i] + self.cfg.beta * sq_y[i]))
            .sum::<f64>()
            / h as f64;
        let off = self.cfg.traj_reward_offset;
        if self.cfg.clip_traj {
            off - if pen > off { off } else { pen }
        } else {
            off - pen
        }
    }

    fn steer(&self, p: &[[f64; 2]]) -> f64 {
        let pairs: Vec<([f64; 2], [f64; 2])> = p.windows(2).map(|w| (w[0], w[1])).collect();
        let ok: Vec<bool> = pairs
            .iter()
            .map(|(a, b)| {
                let dx = b[0] - a[0];
                let dy = b[1] - a[1];
                if dx.abs() < 1e-9 {
                    dy.abs() < 1e-9
                } else {
                    dy.abs() / dx.abs() < self.cfg.steer_ratio_limit
                }
            })
            .collect();
        ok.iter().filter(|b| **b).count() as f64 / ok.len() as f64
    }

    fn acc(&self, p: &[[f64; 2]]) -> f64 {
        let seg: Vec<f64> = p
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .collect();
        let acc: Vec<f64> = seg.windows(2).map(|s| (s[1] - s[0]) / self.cfg.dt.powi(2)).collect();
        acc.iter().filter(|a| a.abs() < self.cfg.acc_limit).count() as f64 / acc.len() as f64
    }

    fn total(&self, p: &[[f64; 2]], g: &[[f64; 2]]) -> f64 {
        let t = self.cfg.theta;
        t[0] * self.traj(p, g) + t[1] * self.steer(p) + t[2] * self.acc(p)
    }
}

fn random_traj(rng: &mut ChaCha8Rng, h: usize) -> Vec<[f64; 2]> {
    let mut p = [0.0, 0.0];
    (0..h)
        .map(|_| {
            p = [p[0] + rng.random_range(-1.0..8.0), p[1] + rng.random_range(-3.0..3.0)];
            p
        })
        .collect()
}

#[test]
fn rewards_match_oracle_on_random_trajectories() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for n in 0..1000 {
        let cfg = RewardConfig {
            gamma: rng.random_range(0.5..1.0),
            alpha: rng.random_range(0.0..2.0),
            beta: rng.random_range(0.0..2.0),
            clip_traj: n % 2 == 0,
            ..Default::default()
        };
        let h = rng.random_range(3..12);
        let p = random_traj(&mut rng, h);
        let g = random_traj(&mut rng, h);
        let o = Oracle { cfg: &cfg };
        let (tp, tg) = (traj(&p), traj(&g));
        assert!((r_traj(&tp, &tg, &cfg).unwrap() - o.traj(&p, &g)).abs() <= 1e-12);
        assert!((r_steer(&tp, &cfg).unwrap() - o.steer(&p)).abs() <= 1e-12);
        assert!((r_acc(&tp, &cfg).unwrap() - o.acc(&p)).abs() <= 1e-12);
        assert!((r_total(&tp, &tg, &cfg).unwrap() - o.total(&p, &g)).abs() <= 1e-12);
    }
}

#[test]
fn thresholds_sit_on_the_failing_side() {
    let cfg = RewardConfig::default();
    // |Δy/Δx| = 0.84 exactly and a jump of exactly 6 m/s²
    assert_eq!(r_steer(&traj(&[[0.0, 0.0], [100.0, 84.0]]), &cfg).unwrap(), 0.0);
    assert_eq!(r_steer(&traj(&[[0.0, 0.0], [100.0, 83.999]]), &cfg).unwrap(), 1.0);
    let six = traj(&[[0.0, 0.0], [2.0, 0.0], [5.5, 0.0]]);
    assert_eq!(acc_seq(&six, &cfg).unwrap(), vec![6.0]);
    assert_eq!(r_acc(&six, &cfg).unwrap(), 0.0);
    let decel = traj(&[[0.0, 0.0], [3.5, 0.0], [5.5, 0.0]]);
    assert_eq!(acc_seq(&decel, &cfg).unwrap(), vec![-6.0]);
    assert_eq!(r_acc(&decel, &cfg).unwrap(), 0.0);
}

#[test]
fn worked_examples() {
    let flat = RewardConfig {
        gamma: 1.0,
        ..Default::default()
    };
    let gt = traj(&[[1.0, 0.0], [2.0, 0.0]]);
    let pred = traj(&[[1.1, 0.0], [2.0, 0.2]]);
    assert!((r_traj(&pred, &gt, &flat).unwrap() - 0.975).abs() < 1e-15);
    let bends = traj(&[[0.0, 0.0], [2.0, 1.0], [3.0, 2.0]]);
    assert_eq!(r_steer(&bends, &flat).unwrap(), 0.5);
    let jump = traj(&[[0.0, 0.0], [0.5, 0.0], [4.0, 0.0]]);
    assert_eq!(acc_seq(&jump, &flat).unwrap(), vec![12.0]);
}

fn arb_traj(h: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((-20.0f64..60.0, -20.0f64..20.0).prop_map(|(x, y)| [x, y]), h)
}

proptest! {
    #[test]
    fn identical_prediction_scores_full_traj_reward(g in arb_traj(6)) {
        let cfg = RewardConfig::default();
        let t = traj(&g);
        prop_assert_eq!(r_traj(&t, &t, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn fractions_stay_in_unit_interval(p in arb_traj(7)) {
        let cfg = RewardConfig::default();
        let t = traj(&p);
        let s = r_steer(&t, &cfg).unwrap();
        let a = r_acc(&t, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&a));
    }

    #[test]
    fn clipped_traj_reward_is_floored(p in arb_traj(5), g in arb_traj(5)) {
        let cfg = RewardConfig { clip_traj: true, ..Default::default() };
        let r = r_traj(&traj(&p), &traj(&g), &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn translation_leaves_shape_rewards_unchanged(p in arb_traj(6), dx in -50.0f64..50.0, dy in -50.0f64..50.0) {
        // integer-valued shifts keep segment differences exact
        let (dx, dy) = (dx.round(), dy.round());
        let p: Vec<[f64; 2]> = p.iter().map(|r| [r[0].round(), r[1].round()]).collect();
        let q: Vec<[f64; 2]> = p.iter().map(|r| [r[0] + dx, r[1] + dy]).collect();
        let cfg = RewardConfig::default();
        prop_assert_eq!(r_steer(&traj(&p), &cfg).unwrap(), r_steer(&traj(&q), &cfg).unwrap());
        prop_assert_eq!(r_acc(&traj(&p), &cfg).unwrap(), r_acc(&traj(&q), &cfg).unwrap());
    }

    #[test]
    fn larger_deviation_never_scores_higher(g in arb_traj(6), d in arb_traj(6), k in 1.0f64..4.0) {
        let cfg = RewardConfig::default();
        let near: Vec<[f64; 2]> = g.iter().zip(&d).map(|(a, e)| [a[0] + e[0], a[1] + e[1]]).collect();
        let far: Vec<[f64; 2]> = g.iter().zip(&d).map(|(a, e)| [a[0] + k * e[0], a[1] + k * e[1]]).collect();
        let gt = traj(&g);
        prop_assert!(r_traj(&traj(&far), &gt, &cfg).unwrap() <= r_traj(&traj(&near), &gt, &cfg).unwrap() + 1e-9);
    }
}
