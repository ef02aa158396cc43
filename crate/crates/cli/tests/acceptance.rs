//! Acceptance criteria 1-10. Each test prints one `PASS`/`FAIL` line straight
//! to stdout so the verdicts show up even when output capture is on.

use pref_forge::eval::{pairwise_accuracy, StepMetrics, TiePolicy};
use pref_forge::gcpo::{
    build_paired_rollouts, gcpo_objective_at, gcpo_objective_grad, gcpo_step, group_advantages, win_loss_ratios,
    GcpoOptions, PairedRollouts,
};
use pref_forge::grpo::{
    grpo_advantages, grpo_objective_grad, grpo_objective_with, grpo_rollout, grpo_step, GrpoOptions, KlEstimator,
};
use pref_forge::pipeline::{select_sft_record, Candidate, ClientError, JudgeClient};
use pref_forge::surrogate::near_clip_boundary;
use pref_forge::toy::{
    brute_force_ratios, finite_difference_grad, SyntheticWorld, TargetTokenReward, ToyGenerator, ToyPolicy, WorldSpec,
};
use pref_forge::trace::{parse_trace, RawTraceText};
use pref_forge::{
    seed, EditContext, Execution, OptimizerConfig, PolicyModel, Principle, PrincipleCategory, PrincipleSet,
    PrincipleVerdict, Quadruple, ReasoningTrace, SampleRef,
};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

fn report(id: u32, name: &str, outcome: &Result<String, String>) {
    let line = match outcome {
        Ok(detail) => format!("PASS criterion {id:>2} {name}: {detail}"),
        Err(detail) => format!("FAIL criterion {id:>2} {name}: {detail}"),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn check(id: u32, name: &str, body: impl FnOnce() -> Result<String, String>) {
    let outcome = body();
    report(id, name, &outcome);
    if let Err(e) = outcome {
        panic!("criterion {id} failed: {e}");
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.2?}, limit {limit:?}"))
    }
}

fn random_scores(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    if rng.random_bool(0.5) {
        (0..n).map(|_| f64::from(rng.random_range(0u8..=20)) / 2.0).collect()
    } else {
        (0..n).map(|_| rng.random_range(0.0..10.0)).collect()
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

#[test]
fn criterion_01_ratio_oracle_equivalence() {
    check(1, "ratio oracle equivalence", || {
        let start = Instant::now();
        let mut rng = seed::rng(1);
        let instances = 2000;
        for i in 0..instances {
            let n = rng.random_range(1..=64);
            let (w, l) = (random_scores(n, &mut rng), random_scores(n, &mut rng));
            let fast = win_loss_ratios(&w, &l).map_err(|e| e.to_string())?;
            let slow = brute_force_ratios(&w, &l).map_err(|e| e.to_string())?;
            if fast != slow {
                return Err(format!("instance {i} (N={n}) differs"));
            }
        }
        within(start.elapsed(), Duration::from_secs(5))?;
        Ok(format!("{instances} instances identical in {:.2?}", start.elapsed()))
    });
}

#[test]
fn criterion_02_mean_equality() {
    check(2, "mean equality of win and loss ratios", || {
        let mut rng = seed::rng(2);
        let mut worst: f64 = 0.0;
        for i in 0..2000 {
            let n = rng.random_range(1..=64);
            let (w, l) = (random_scores(n, &mut rng), random_scores(n, &mut rng));
            let (rw, rl) = win_loss_ratios(&w, &l).map_err(|e| e.to_string())?;
            let gap = (rw.iter().sum::<f64>() / n as f64 - rl.iter().sum::<f64>() / n as f64).abs();
            worst = worst.max(gap);
            if gap > 1e-12 {
                return Err(format!("instance {i}: |mean(rw) - mean(rl)| = {gap:e}"));
            }
        }
        Ok(format!("2000 instances, max gap {worst:e}"))
    });
}

#[test]
fn criterion_03_advantage_zero_sum() {
    check(3, "advantage zero-sum", || {
        let mut rng = seed::rng(3);
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            let n = rng.random_range(1..=64);
            let spread = 10f64.powi(rng.random_range(-3..=3));
            let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * spread).collect();
            for (kind, a) in [
                ("gcpo", group_advantages(&r).map_err(|e| e.to_string())?),
                ("grpo", grpo_advantages(&r, 1e-8).map_err(|e| e.to_string())?),
            ] {
                let scale = a.iter().map(|x| x.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
                let rel = a.iter().sum::<f64>().abs() / scale;
                worst = worst.max(rel);
                if rel > 1e-9 {
                    return Err(format!("group {i} ({kind}): relative sum {rel:e}"));
                }
            }
        }
        Ok(format!("1000 groups x 2 estimators, max relative sum {worst:e}"))
    });
}

fn rel_err(a: &[f64], f: &[f64]) -> f64 {
    let diff = a.iter().zip(f).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(f).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
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

fn gcpo_gradient_points(target: usize) -> Result<(usize, f64), String> {
    let world = SyntheticWorld::generate(&WorldSpec {
        samples: 40,
        pairs: 40,
        contexts: 2,
        feature_dim: 3,
        seed: 11,
        ..WorldSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let policy = ToyPolicy::new(Arc::new(world.feature_table()), 1.0);
    let cfg = OptimizerConfig::default();
    let labeled: Vec<_> = world.train.iter().filter(|p| !p.is_same()).collect();
    let mut rng = seed::rng(41);
    let (mut checked, mut worst) = (0, 0.0f64);
    for point in 0..(8 * target as u64) {
        if checked >= target {
            break;
        }
        let old = gaussian(policy.num_params(), 0.5, &mut rng);
        let pair = labeled[point as usize % labeled.len()];
        let pr = build_paired_rollouts(&policy, &old, pair, 6, point, &GcpoOptions::default()).map_err(|e| e.to_string())?;
        if pr.winner_group.advantages.iter().chain(&pr.loser_group.advantages).all(|a| *a == 0.0) {
            continue;
        }
        let params: Vec<f64> = old.iter().zip(gaussian(old.len(), 0.1, &mut rng)).map(|(a, b)| a + b).collect();
        if near_boundary(&policy, &params, &pr, cfg.clip_epsilon) {
            continue;
        }
        let (_, analytic) = gcpo_objective_grad(&policy, &params, &pr, &cfg).map_err(|e| e.to_string())?;
        let numeric = finite_difference_grad(|p| gcpo_objective_at(&policy, p, &pr, &cfg).unwrap(), &params, 1e-6);
        let err = rel_err(&analytic, &numeric);
        worst = worst.max(err);
        if err > 1e-4 {
            return Err(format!("gcpo point {point}: relative error {err:e}"));
        }
        checked += 1;
    }
    Ok((checked, worst))
}

fn grpo_gradient_points(target: usize) -> Result<(usize, f64), String> {
    let world = SyntheticWorld::generate(&WorldSpec {
        samples: 20,
        pairs: 10,
        contexts: 2,
        seed: 13,
        ..WorldSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let tasks = world.grpo_tasks();
    let policy = ToyGenerator::new(4, 3, 1.0);
    let reward = TargetTokenReward { target: 2, scale: 10.0 };
    let cfg = OptimizerConfig::default();
    let mut rng = seed::rng(43);
    let (mut checked, mut worst) = (0, 0.0f64);
    for point in 0..(8 * target as u64) {
        if checked >= target {
            break;
        }
        let old = gaussian(policy.num_params(), 0.5, &mut rng);
        let reference = gaussian(policy.num_params(), 0.5, &mut rng);
        let task = &tasks[point as usize % tasks.len()];
        let (rollout, scores, _) =
            grpo_rollout(&policy, &old, &reference, &reward, task, 8, point, 0.0).map_err(|e| e.to_string())?;
        let adv = grpo_advantages(&scores, cfg.std_epsilon).map_err(|e| e.to_string())?;
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
            let (_, analytic) =
                grpo_objective_grad(&policy, &params, &rollout, &adv, &cfg, estimator).map_err(|e| e.to_string())?;
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
            worst = worst.max(err);
            if err > 1e-4 {
                return Err(format!("grpo point {point} ({estimator:?}): relative error {err:e}"));
            }
        }
        checked += 1;
    }
    Ok((checked, worst))
}

#[test]
fn criterion_04_gradient_check() {
    check(4, "analytic vs finite-difference gradients", || {
        let start = Instant::now();
        let (gcpo_n, gcpo_err) = gcpo_gradient_points(100)?;
        let (grpo_n, grpo_err) = grpo_gradient_points(100)?;
        if gcpo_n < 100 || grpo_n < 100 {
            return Err(format!("too few usable points (gcpo {gcpo_n}, grpo {grpo_n})"));
        }
        within(start.elapsed(), Duration::from_secs(30))?;
        Ok(format!(
            "gcpo {gcpo_n} points max rel {gcpo_err:.1e}, grpo {grpo_n} points max rel {grpo_err:.1e}, {:.2?}",
            start.elapsed()
        ))
    });
}

fn train_gcpo(world: &SyntheticWorld, execution: Execution) -> Result<(ToyPolicy, f64), String> {
    let cfg = OptimizerConfig {
        seed: 7,
        ..OptimizerConfig::default()
    };
    let opts = GcpoOptions {
        execution,
        ..GcpoOptions::default()
    };
    let mut policy = ToyPolicy::with_random_init(Arc::new(world.feature_table()), 1.0, 0.01, 7);
    let labeled: Vec<_> = world.train.iter().filter(|p| !p.is_same()).cloned().collect();
    let batch = 32;
    for step in 0..200u64 {
        let start = (step as usize * batch) % labeled.len();
        let b: Vec<_> = labeled.iter().cycle().skip(start).take(batch).cloned().collect();
        gcpo_step(&mut policy, &b, &cfg, &opts, step).map_err(|e| e.to_string())?;
    }
    let acc = heldout_accuracy(&policy, world)?;
    Ok((policy, acc))
}

fn heldout_accuracy(policy: &ToyPolicy, world: &SyntheticWorld) -> Result<f64, String> {
    pairwise_accuracy(&world.heldout, |q| policy.expected_score(q).unwrap(), TiePolicy::Strict, Execution::Parallel)
        .map(|r| r.accuracy)
        .map_err(|e| e.to_string())
}

#[test]
fn criterion_05_gcpo_learning() {
    check(5, "GCPO learning on a noiseless world", || {
        let start = Instant::now();
        let world = SyntheticWorld::generate(&WorldSpec {
            samples: 400,
            pairs: 500,
            noise_sigma: 0.0,
            seed: 7,
            ..WorldSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let features = Arc::new(world.feature_table());
        let inits = 20;
        let mut untrained = 0.0;
        for s in 0..inits {
            untrained += heldout_accuracy(&ToyPolicy::with_random_init(features.clone(), 1.0, 0.01, 1000 + s), &world)?;
        }
        untrained /= inits as f64;
        if (untrained - 0.5).abs() > 0.15 {
            return Err(format!("untrained accuracy {untrained:.3} is not near 0.5"));
        }
        let (par, acc) = train_gcpo(&world, Execution::Parallel)?;
        let (seq, acc_seq) = train_gcpo(&world, Execution::Sequential)?;
        if par.params() != seq.params() || acc != acc_seq {
            return Err("parallel and sequential runs diverged".into());
        }
        if acc < 0.9 {
            return Err(format!("held-out accuracy {acc:.3} < 0.9 (untrained {untrained:.3})"));
        }
        within(start.elapsed(), Duration::from_secs(120))?;
        Ok(format!(
            "untrained {untrained:.3} (mean of {inits} inits) -> {acc:.3} after 200 steps, deterministic, {:.2?}",
            start.elapsed()
        ))
    });
}

#[test]
fn criterion_06_grpo_learning() {
    check(6, "GRPO bandit reaches the target token", || {
        let start = Instant::now();
        let world = SyntheticWorld::generate(&WorldSpec {
            samples: 40,
            pairs: 10,
            contexts: 1,
            seed: 1,
            ..WorldSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let tasks = world.grpo_tasks();
        let mut policy = ToyGenerator::new(6, 1, 1.0);
        let reference = policy.params.clone();
        let reward = TargetTokenReward { target: 0, scale: 1.0 };
        let cfg = OptimizerConfig {
            group_size: 24,
            kl_beta: 0.04,
            ..OptimizerConfig::default()
        };
        let initial = policy.target_frequency(policy.params(), 0);
        let mut reached = None;
        for step in 0..500u64 {
            grpo_step(&mut policy, &reference, &reward, &tasks, &cfg, &GrpoOptions::default(), step)
                .map_err(|e| e.to_string())?;
            if policy.target_frequency(policy.params(), 0) >= 0.9 {
                reached = Some(step + 1);
                break;
            }
        }
        within(start.elapsed(), Duration::from_secs(120))?;
        match reached {
            Some(step) => Ok(format!(
                "target probability {initial:.3} -> {:.3} at step {step}, {:.2?}",
                policy.target_frequency(policy.params(), 0),
                start.elapsed()
            )),
            None => Err(format!(
                "target probability {:.3} after 500 steps",
                policy.target_frequency(policy.params(), 0)
            )),
        }
    });
}

#[test]
fn criterion_07_parser_golden() {
    check(7, "Think+Score parser golden example", || {
        let ctx = EditContext::new(SampleRef::new("ref"), "restyle the room").map_err(|e| e.to_string())?;
        let principles: Vec<Principle> = (1..=10)
            .map(|i| Principle::new(format!("p{i}"), format!("Is check number {i} satisfied?"), PrincipleCategory::Follow))
            .collect();
        let set = PrincipleSet::new(ctx.id(), principles).map_err(|e| e.to_string())?;
        let marks = [1, 1, 1, 1, 1, 0, 0, 1, 1, 1];
        let entries: Vec<String> = marks
            .iter()
            .enumerate()
            .map(|(i, m)| format!("{{\"question\": \"Is check number {} satisfied?\", \"score\": {m}}}", i + 1))
            .collect();
        let text = format!(
            "Going through the checks one at a time.\n[{}], {{\"average_score\": 0.8}} <score>7</score>",
            entries.join(", ")
        );
        let parsed = parse_trace(&RawTraceText::new(text), &set).map_err(|e| e.to_string())?;
        let got: Vec<u8> = parsed.verdicts.iter().map(|v| u8::from(v.met)).collect();
        if got != marks {
            return Err(format!("verdicts {got:?}"));
        }
        if parsed.average_score != 0.8 || parsed.reported_average != Some(0.8) || parsed.final_score != 7.0 {
            return Err(format!(
                "average {} reported {:?} final {}",
                parsed.average_score, parsed.reported_average, parsed.final_score
            ));
        }
        Ok("verdicts [1,1,1,1,1,0,0,1,1,1], average 0.8, final 7".into())
    });
}

struct FixedJudge(Vec<PrincipleVerdict>);

impl JudgeClient for FixedJudge {
    fn name(&self) -> &str {
        "fixed"
    }

    fn decompose(&self, _ctx: &EditContext) -> Result<PrincipleSet, ClientError> {
        Err(ClientError::Unavailable("not used".into()))
    }

    fn verify(&self, _quad: &Quadruple, _candidates: &[ReasoningTrace]) -> Result<Vec<PrincipleVerdict>, ClientError> {
        Ok(self.0.clone())
    }
}

fn candidate(set: &PrincipleSet, met: &[bool], length: usize, idx: usize) -> Candidate {
    let verdicts: Vec<PrincipleVerdict> =
        set.iter().zip(met).map(|(p, &m)| PrincipleVerdict::new(p.id.clone(), m)).collect();
    Candidate {
        quad_key: "q".into(),
        scorer_id: format!("s{idx}"),
        variant: "v".into(),
        trace: ReasoningTrace {
            think_text: String::new(),
            average_score: met.iter().filter(|m| **m).count() as f64 / met.len() as f64,
            verdicts,
            final_score: 5.0,
            score_clamped: false,
            token_ids: vec![0; length],
            token_logprobs_current: Vec::new(),
            token_logprobs_old: Vec::new(),
            length,
        },
    }
}

#[test]
fn criterion_08_selection_correctness() {
    check(8, "SFT selection vs sort oracle", || {
        let mut rng = seed::rng(8);
        let ctx = EditContext::new(SampleRef::new("ref"), "brighten the sky").map_err(|e| e.to_string())?;
        let mut ties = 0;
        for round in 0..1000 {
            let k = rng.random_range(1..=10);
            let principles: Vec<Principle> = (0..k)
                .map(|i| Principle::new(format!("p{i}"), format!("question {i}"), PrincipleCategory::Keep))
                .collect();
            let set = PrincipleSet::new(ctx.id(), principles).map_err(|e| e.to_string())?;
            let quad = Quadruple::new(SampleRef::new("edit"), ctx.clone(), set.clone()).map_err(|e| e.to_string())?;
            let gold: Vec<bool> = (0..k).map(|_| rng.random_bool(0.5)).collect();
            let n = rng.random_range(1..=12);
            let cands: Vec<Candidate> = (0..n)
                .map(|i| {
                    let met: Vec<bool> = gold.iter().map(|&g| if rng.random_bool(0.3) { !g } else { g }).collect();
                    candidate(&set, &met, rng.random_range(1..=6), i)
                })
                .collect();
            let judge = FixedJudge(set.iter().zip(&gold).map(|(p, &g)| PrincipleVerdict::new(p.id.clone(), g)).collect());
            let chosen = select_sft_record(&cands, &quad, &judge).map_err(|e| e.to_string())?;

            let acc = |c: &Candidate| c.trace.verdicts.iter().zip(&gold).filter(|(v, g)| v.met == **g).count();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                acc(&cands[b])
                    .cmp(&acc(&cands[a]))
                    .then(cands[a].trace.length.cmp(&cands[b].trace.length))
                    .then(a.cmp(&b))
            });
            let best = order[0];
            if order.len() > 1 && acc(&cands[order[1]]) == acc(&cands[best]) {
                ties += 1;
            }
            if chosen.provenance.scorer_id != cands[best].scorer_id || chosen.trace != cands[best].trace {
                return Err(format!("round {round}: picked {}, oracle s{best}", chosen.provenance.scorer_id));
            }
        }
        Ok(format!("1000 candidate sets agree ({ties} with accuracy ties; tie-break shorter trace, then earlier)"))
    });
}

#[test]
fn criterion_09_accuracy_monotone_invariance() {
    check(9, "pairwise accuracy under monotone transforms", || {
        let world = SyntheticWorld::generate(&WorldSpec {
            samples: 200,
            pairs: 300,
            noise_sigma: 0.3,
            seed: 9,
            ..WorldSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let quality = world.quality_map();
        let base = |q: &Quadruple| {
            let id = &q.edited_sample.id;
            quality[id] + 3.0 * (seed::unit_hash(9, id) - 0.5)
        };
        let pairs: Vec<_> = world.train.iter().chain(&world.heldout).cloned().collect();
        let reference = pairwise_accuracy(&pairs, base, TiePolicy::Strict, Execution::Sequential).map_err(|e| e.to_string())?;
        let mut rng = seed::rng(99);
        for t in 0..20 {
            let (a, b, c) = (rng.random_range(0.1..10.0), rng.random_range(0.0..5.0), rng.random_range(-50.0..50.0));
            let f = |q: &Quadruple| {
                let x = base(q);
                a * x + b * x.atan() + c
            };
            let r = pairwise_accuracy(&pairs, f, TiePolicy::Strict, Execution::Parallel).map_err(|e| e.to_string())?;
            if r != reference {
                return Err(format!("transform {t}: accuracy {} vs {}", r.accuracy, reference.accuracy));
            }
        }
        Ok(format!(
            "accuracy {:.4} on {} labeled pairs ({} excluded) unchanged under 20 transforms",
            reference.accuracy, reference.evaluated, reference.excluded
        ))
    });
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<serde_json::Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pref-forge"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`{}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    serde_json::from_slice(&out.stdout).map_err(|e| format!("`{}` printed non-JSON: {e}", args.join(" ")))
}

fn metrics_schema_ok(path: &Path, steps: u64) -> Result<usize, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut seen = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        for key in ["step", "objective", "mean_win_ratio", "weighted_advantage", "eval_accuracy"] {
            if value.get(key).is_none() {
                return Err(format!("line {} lacks `{key}`", i + 1));
            }
        }
        let m: StepMetrics = serde_json::from_value(value).map_err(|e| format!("line {}: {e}", i + 1))?;
        if m.step > 0 && !m.objective.is_some_and(f64::is_finite) {
            return Err(format!("step {} has no finite objective", m.step));
        }
        if let Some(a) = m.eval_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(format!("step {} accuracy {a} out of range", m.step));
            }
        }
        seen.push(m.step);
    }
    if seen != (0..=steps).collect::<Vec<_>>() {
        return Err(format!("steps {:?}.. do not run 0..={steps}", &seen[..seen.len().min(5)]));
    }
    Ok(seen.len())
}

#[test]
fn criterion_10_end_to_end_smoke() {
    check(10, "end-to-end CLI chain", || {
        let start = Instant::now();
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir = tmp.path();
        let world = run_cli(dir, &["--seed", "3", "toy", "gen-world", "--out", "world/world.jsonl"])?;
        if world["train_pairs"].as_u64().unwrap_or(0) == 0 {
            return Err(format!("empty world: {world}"));
        }
        let pipe = run_cli(
            dir,
            &[
                "pipeline", "run", "--in", "world/world.inputs.jsonl", "--samples", "world/world.samples.jsonl", "--out",
                "store", "--judge", "stub", "--scorers", "stub:a,stub:b",
            ],
        )?;
        let sft = pipe["sft_records"].as_u64().unwrap_or(0);
        if sft == 0 {
            return Err(format!("pipeline produced no SFT records: {pipe}"));
        }
        let train = run_cli(
            dir,
            &[
                "--seed", "3", "gcpo", "train", "--pairs", "world/world.jsonl", "--samples", "world/world.samples.jsonl",
                "--heldout", "world/world.heldout.jsonl", "--init-sft", "store/sft.jsonl", "--out", "run",
            ],
        )?;
        let lines = metrics_schema_ok(&dir.join("run/metrics.jsonl"), train["steps"].as_u64().unwrap_or(0))?;
        for file in ["manifest.json", "config.toml", "params.json"] {
            if !dir.join("run").join(file).is_file() {
                return Err(format!("run/{file} missing"));
            }
        }
        let eval = run_cli(
            dir,
            &[
                "eval", "accuracy", "--pairs", "world/world.heldout.jsonl", "--scorer", "toy-rrm:run/params.json",
                "--samples", "world/world.samples.jsonl",
            ],
        )?;
        let acc = eval["accuracy"].as_f64().ok_or_else(|| format!("eval output lacks accuracy: {eval}"))?;
        if !(0.0..=1.0).contains(&acc) || eval["evaluated"].as_u64().unwrap_or(0) == 0 {
            return Err(format!("bad eval report: {eval}"));
        }
        within(start.elapsed(), Duration::from_secs(300))?;
        Ok(format!(
            "{sft} SFT records, {lines} metric lines, held-out accuracy {acc:.3}, {:.2?}",
            start.elapsed()
        ))
    });
}
