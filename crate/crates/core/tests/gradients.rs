use pref_forge::gcpo::{build_paired_rollouts, gcpo_objective_at, gcpo_objective_grad, GcpoOptions, PairedRollouts};
use pref_forge::grpo::{grpo_advantages, grpo_objective_grad, grpo_objective_with, grpo_rollout, KlEstimator};
use pref_forge::seed;
use pref_forge::surrogate::near_clip_boundary;
use pref_forge::toy::{finite_difference_grad, SyntheticWorld, TargetTokenReward, ToyGenerator, ToyPolicy, WorldSpec};
use pref_forge::{OptimizerConfig, PolicyModel};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;

fn rel_err(a: &[f64], f: &[f64]) -> f64 {
    let diff = a.iter().zip(f).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(f).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn gaussian(n: usize, scale: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn near_boundary(policy: &ToyPolicy, params: &[f64], pr: &PairedRollouts, eps: f64) -> bool {
    [&pr.winner_group, &pr.loser_group].iter().any(|g| {
        g.traces.iter().any(|t| {
            let cur = policy.log_probs(params, &g.sample, &t.token_ids).unwrap();
            cur.iter()
                .zip(&t.token_logprobs_old)
                .any(|(c, o)| near_clip_boundary((c - o).exp(), eps, 1e-3))
        })
    })
}

#[test]
fn gcpo_gradient_matches_finite_differences() {
    let world = SyntheticWorld::generate(&WorldSpec {
        samples: 40,
        pairs: 40,
        contexts: 2,
        feature_dim: 3,
        seed: 5,
        ..WorldSpec::default()
    })
    .unwrap();
    let policy = ToyPolicy::new(Arc::new(world.feature_table()), 1.0);
    let cfg = OptimizerConfig::default();
    let labeled: Vec<_> = world.train.iter().filter(|p| !p.is_same()).collect();
    let mut rng = seed::rng(99);
    let mut checked = 0;
    for point in 0..400u64 {
        if checked >= 100 {
            break;
        }
        let old = gaussian(policy.num_params(), 0.5, &mut rng);
        let pair = labeled[point as usize % labeled.len()];
        let pr = build_paired_rollouts(&policy, &old, pair, 6, point, &GcpoOptions::default()).unwrap();
        if pr.winner_group.advantages.iter().chain(&pr.loser_group.advantages).all(|a| *a == 0.0) {
            continue;
        }
        let params: Vec<f64> = old.iter().zip(gaussian(old.len(), 0.1, &mut rng)).map(|(a, b)| a + b).collect();
        if near_boundary(&policy, &params, &pr, cfg.clip_epsilon) {
            continue;
        }
        let (_, analytic) = gcpo_objective_grad(&policy, &params, &pr, &cfg).unwrap();
        let numeric = finite_difference_grad(|p| gcpo_objective_at(&policy, p, &pr, &cfg).unwrap(), &params, 1e-6);
        let err = rel_err(&analytic, &numeric);
        assert!(err <= 1e-4, "point {point}: relative error {err}");
        checked += 1;
    }
    assert!(checked >= 100, "only {checked} usable points");
}

#[test]
fn grpo_gradient_matches_finite_differences() {
    let world = SyntheticWorld::generate(&WorldSpec {
        samples: 20,
        pairs: 10,
        contexts: 2,
        seed: 3,
        ..WorldSpec::default()
    })
    .unwrap();
    let tasks = world.grpo_tasks();
    let policy = ToyGenerator::new(4, 3, 1.0);
    let reward = TargetTokenReward { target: 1, scale: 10.0 };
    let cfg = OptimizerConfig::default();
    let mut rng = seed::rng(17);
    let mut checked = 0;
    for point in 0..400u64 {
        if checked >= 100 {
            break;
        }
        let old = gaussian(policy.num_params(), 0.5, &mut rng);
        let reference = gaussian(policy.num_params(), 0.5, &mut rng);
        let task = &tasks[point as usize % tasks.len()];
        let (rollout, scores, _) = grpo_rollout(&policy, &old, &reference, &reward, task, 8, point, 0.0).unwrap();
        let adv = grpo_advantages(&scores, cfg.std_epsilon).unwrap();
        let params: Vec<f64> = old.iter().zip(gaussian(old.len(), 0.1, &mut rng)).map(|(a, b)| a + b).collect();
        let near = rollout.trajectories.iter().any(|t| {
            let cur = policy.log_probs(&params, &rollout.context, &t.tokens).unwrap();
            cur.iter()
                .zip(&t.logprobs_old)
                .any(|(c, o)| near_clip_boundary((c - o).exp(), cfg.clip_epsilon, 1e-3))
        });
        if near {
            continue;
        }
        for estimator in [KlEstimator::K1, KlEstimator::K3] {
            let (_, analytic) = grpo_objective_grad(&policy, &params, &rollout, &adv, &cfg, estimator).unwrap();
            let numeric = finite_difference_grad(
                |p| {
                    let mut r = rollout.clone();
                    r.rescore(&policy, p).unwrap();
                    grpo_objective_with(&r, &adv, &cfg, estimator).unwrap()
                },
                &params,
                1e-6,
            );
            let err = rel_err(&analytic, &numeric);
            assert!(err <= 1e-4, "point {point} ({estimator:?}): relative error {err}");
        }
        checked += 1;
    }
    assert!(checked >= 100, "only {checked} usable points");
}
