use super::*;
use crate::datagen::OptimalPolicy;
use crate::model::ModelConfig;
use proptest::prelude::*;

fn brute_force(trace: &[bool], w: usize) -> f64 {
    let mut best = 0.0f64;
    for start in 0..=trace.len() - w {
        let m = trace[start..start + w].iter().filter(|&&b| b).count() as f64 / w as f64;
        best = best.max(m);
    }
    best
}

fn tiny_model(env: &EnvConfig, memory: usize) -> Model {
    let cfg = ModelConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        ff_ratio: 2,
        segment: 16,
        memory,
        rel_buckets: 8,
        rel_max_distance: 64,
        codec: Codec::for_env(env),
        ..Default::default()
    };
    Model::new(cfg, 3).unwrap()
}

fn short_eval(episodes: usize, runs: usize) -> EvalConfig {
    EvalConfig {
        episodes,
        runs,
        test_difficulty: 5.0,
        ..Default::default()
    }
}

#[test]
fn fixed_schedule() {
    assert_eq!(sequencer_fixed(&[5.0, 7.0, 9.0], 2), vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    assert_eq!(sequencer_fixed(&[7.0], 3), vec![7.0; 3]);
    for n in 1..5 {
        assert_eq!(sequencer_fixed(&[1.0, 2.0, 3.0, 4.0], n).len(), 4 * n);
    }
}

#[test]
fn auto_promotes_after_three_successes() {
    let mut s = AutoSequencer::new(vec![5.0, 7.0, 9.0], 3).unwrap();
    for _ in 0..3 {
        assert_eq!(s.current(), 5.0);
        s.record(true);
    }
    assert_eq!(s.current(), 7.0, "episode 4 at the second rung");

    let mut s = AutoSequencer::new(vec![5.0, 7.0], 3).unwrap();
    let outcomes = [true, false, true, true, true];
    let mut at = Vec::new();
    for &o in &outcomes {
        at.push(s.current());
        s.record(o);
    }
    at.push(s.current());
    assert_eq!(at, vec![5.0, 5.0, 5.0, 5.0, 5.0, 7.0], "promotion takes effect at episode 6");

    let mut s = AutoSequencer::new(vec![5.0, 7.0], 3).unwrap();
    for _ in 0..50 {
        s.record(false);
    }
    assert_eq!(s.rung(), 0);
    assert!(AutoSequencer::new(vec![5.0], 0).is_err());
}

proptest! {
    #[test]
    fn auto_never_skips_or_demotes(outcomes in proptest::collection::vec(any::<bool>(), 0..200), k in 1usize..5) {
        let mut s = AutoSequencer::new(vec![1.0, 2.0, 3.0, 4.0], k).unwrap();
        let mut streak = 0;
        for o in outcomes {
            let before = s.rung();
            s.record(o);
            let after = s.rung();
            prop_assert!(after == before || after == before + 1);
            streak = if o { streak + 1 } else { 0 };
            if after == before + 1 {
                prop_assert_eq!(streak, k);
                streak = 0;
            } else if before < 3 {
                prop_assert!(streak < k);
            }
        }
    }

    #[test]
    fn window_max_matches_brute_force(trace in proptest::collection::vec(any::<bool>(), 1..=64)) {
        for w in 1..=trace.len() {
            let got = sliding_window_max(&trace, w).unwrap();
            prop_assert!((got - brute_force(&trace, w)).abs() < 1e-12);
        }
    }
}

#[test]
fn window_examples() {
    assert_eq!(sliding_window_max(&[true; 12], 3).unwrap(), 1.0);
    let t: Vec<bool> = [0, 1, 0, 1, 0, 0, 1, 0].iter().map(|&b| b == 1).collect();
    assert_eq!(sliding_window_max(&t, 2).unwrap(), 0.5);
    assert_eq!(sliding_window_max(&t, 8).unwrap(), 3.0 / 8.0);
    assert!(sliding_window_max(&t, 9).is_err());
    assert!(sliding_window_max(&t, 0).is_err());
    assert_eq!(quarter(100), 25);
    assert_eq!(quarter(7), 1);
}

#[test]
fn exhaustive_short_traces() {
    for n in 1..=12usize {
        for bits in 0u32..(1 << n) {
            let t: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
            let w = quarter(n);
            assert_eq!(sliding_window_max(&t, w).unwrap(), brute_force(&t, w));
        }
    }
}

#[test]
fn aggregate_statistics() {
    let s = aggregate(&[0.4; 5]).unwrap();
    assert_eq!((s.mean, s.std), (0.4, 0.0));
    let s = aggregate(&[0.0, 1.0]).unwrap();
    assert_eq!(s.mean, 0.5);
    assert!((s.std - 0.5f64.sqrt()).abs() < 1e-12);
    assert_eq!(aggregate(&[0.3]).unwrap().std, 0.0);
    assert!(aggregate(&[]).is_err());

    let xs: Vec<f64> = (0..20).map(|i| ((i * 37 % 11) as f64) / 10.0).collect();
    let mean = xs.iter().sum::<f64>() / 20.0;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 19.0;
    let s = aggregate(&xs).unwrap();
    assert!((s.mean - mean).abs() < 1e-12 && (s.std - var.sqrt()).abs() < 1e-12);
}

#[test]
fn oracle_policy_always_succeeds() {
    let env = EnvConfig::maze(7);
    let mut cfg = short_eval(12, 3);
    cfg.sequencer = SequencerKind::Auto;
    cfg.ladder = vec![5.0];
    cfg.test_difficulty = 9.0;
    let runs = run_eval_with(&|| Box::new(OptimalPolicy), &env, &cfg).unwrap();
    for r in &runs {
        assert!(r.trace.successes.iter().all(|&s| s));
        // Three successes per rung before moving on.
        assert_eq!(r.trace.difficulties[..4], [5.0, 5.0, 5.0, 9.0]);
        assert_eq!(r.score, 1.0);
    }
}

#[test]
fn evaluation_is_deterministic_and_read_only() {
    let env = EnvConfig::maze(5);
    let model = tiny_model(&env, 32);
    let before = model_hash(&model).unwrap();
    let cfg = short_eval(6, 2);
    let a = run_eval(&model, &env, &cfg).unwrap();
    let b = run_eval(&model, &env, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(model_hash(&model).unwrap(), before);
    let ra = EvalReport::new(&model, &env, &cfg, a).unwrap();
    let rb = EvalReport::new(&model, &env, &cfg, b).unwrap();
    assert_eq!(ra.to_jsonl().unwrap(), rb.to_jsonl().unwrap());
    assert_eq!(ra.header.checkpoint_hash, before);
}

#[test]
fn memoryless_runs_ignore_episode_order() {
    let env = EnvConfig::maze(5);
    let diffs = vec![5.0; 6];
    let seeds: Vec<u64> = (100..106).collect();
    let mut rev = seeds.clone();
    rev.reverse();
    let per_seed = |t: &SuccessTrace| {
        let mut v: Vec<(u64, bool, u32)> = (0..t.len()).map(|i| (t.seeds[i], t.successes[i], t.lengths[i])).collect();
        v.sort();
        v
    };

    let m0 = tiny_model(&env, 0);
    let fwd = play_episodes(&mut ModelAgent::new(&m0, ActMode::Sample), &env, &diffs, &seeds).unwrap();
    let bwd = play_episodes(&mut ModelAgent::new(&m0, ActMode::Sample), &env, &diffs, &rev).unwrap();
    assert_eq!(per_seed(&fwd), per_seed(&bwd));

    // Each episode alone gives the same outcome as inside the run.
    for i in 0..seeds.len() {
        let alone = play_episodes(&mut ModelAgent::new(&m0, ActMode::Sample), &env, &diffs[..1], &seeds[i..=i]).unwrap();
        assert_eq!((alone.successes[0], alone.lengths[0]), (fwd.successes[i], fwd.lengths[i]));
    }

    let m = tiny_model(&env, 64);
    let fwd = play_episodes(&mut ModelAgent::new(&m, ActMode::Sample), &env, &diffs, &seeds).unwrap();
    let bwd = play_episodes(&mut ModelAgent::new(&m, ActMode::Sample), &env, &diffs, &rev).unwrap();
    assert_ne!(per_seed(&fwd), per_seed(&bwd), "carried memory should make order matter");
}

#[test]
fn codec_mismatch_rejected() {
    let model = tiny_model(&EnvConfig::pointmass(1.0), 8);
    assert!(run_eval(&model, &EnvConfig::maze(5), &short_eval(4, 1)).is_err());
}

#[test]
fn config_validation() {
    assert!(short_eval(3, 1).validate().is_err());
    assert!(short_eval(4, 0).validate().is_err());
    let mut c = short_eval(8, 1);
    c.sequencer = SequencerKind::Fixed;
    c.ladder = vec![5.0];
    assert!(c.validate().is_err(), "ladder must not contain the test difficulty");
    c.ladder = vec![3.0];
    c.per_level = 0;
    assert!(c.validate().is_err());
}

#[test]
fn window_counts_test_difficulty_only() {
    let trace = SuccessTrace {
        successes: vec![true, true, false, false, true, false, false, false],
        difficulties: vec![5.0, 5.0, 11.0, 11.0, 11.0, 11.0, 11.0, 11.0],
        lengths: vec![1; 8],
        seeds: (0..8).collect(),
    };
    assert_eq!(score_trace(&trace, 11.0, Metric::SlidingWindowMax).unwrap(), 1.0);
    assert_eq!(score_trace(&trace, 11.0, Metric::Mean).unwrap(), 1.0 / 6.0);
    assert_eq!(score_trace(&trace, 13.0, Metric::Mean).unwrap(), 0.0);
}

#[test]
fn comparison_outputs() {
    let env = EnvConfig::maze(5);
    let model = tiny_model(&env, 16);
    let cfg = short_eval(8, 2);
    let report = EvalReport::new(&model, &env, &cfg, run_eval(&model, &env, &cfg).unwrap()).unwrap();
    let same = compare(&[("a".into(), report.clone()), ("b".into(), report.clone())]).unwrap();
    for r in &same.rows {
        assert_eq!(r.delta, 0.0);
    }
    assert_eq!(same.rows[0].first_quarter, same.rows[1].first_quarter);
    assert!(same.curves.iter().all(|(_, c)| c.len() == cfg.episodes));
    let t = same.table();
    for col in ["mean", "delta", "first_q", "last_q", "q_delta"] {
        assert!(t.contains(col));
    }
    assert!(compare(&[("a".into(), report.clone())]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let files = same.write(dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    let curve = std::fs::read_to_string(dir.path().join("curve-a.dat")).unwrap();
    assert_eq!(curve.lines().count(), cfg.episodes + 1);

    let p = dir.path().join("r.jsonl");
    report.write(&p).unwrap();
    assert_eq!(EvalReport::read(&p).unwrap(), report);
    std::fs::write(&p, "{}\n").unwrap();
    assert!(EvalReport::read(&p).is_err());
}
