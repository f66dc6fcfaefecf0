use dualoptim_core::harness::*;

fn cfg(overrides: &[String]) -> RunConfig {
    let ov: Vec<_> = overrides.iter().map(|s| parse_override(s).unwrap()).collect();
    RunConfig::from_toml("", &ov).unwrap()
}

fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// Seeds whose comparative claims are asserted.
const SHIPPED_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[test]
fn aligned_centres_every_method_stays_at_retain_minimizer() {
    for m in Method::ALL {
        // decoupled weight decay would pull theta towards the origin, and
        // joint's summed objective is identically zero here
        let c = cfg(&[
            format!("method.name={}", m.name()),
            "task.separation=0".into(),
            "optim.weight_decay=0".into(),
        ]);
        let task = ToyTask::new(&c.task, c.seed).unwrap();
        let r = run_on_task(&c, &task).unwrap();
        let a = task.quadratic_centres().unwrap().0;
        let d = dist(&r.final_params, a.data());
        assert!(!r.diverged && d < 1e-12, "{}: {d:e}", m.name());
    }
}

#[test]
fn zero_forget_weight_reaches_retain_minimizer() {
    let mut misses = Vec::new();
    for m in Method::ALL {
        let c = cfg(&[
            format!("method.name={}", m.name()),
            "method.forget_weight=0".into(),
            "schedule.total_steps=2000".into(),
        ]);
        let task = ToyTask::new(&c.task, c.seed).unwrap();
        let r = run_on_task(&c, &task).unwrap();
        let d = dist(&r.final_params, task.quadratic_centres().unwrap().0.data());
        println!("{:<15} |theta - a| = {d:.3e}", m.name());
        if !(d < 1e-4) {
            misses.push(format!("{}: {d:.3e}", m.name()));
        }
    }
    assert!(misses.is_empty(), "above 1e-4 after 2000 steps: {misses:?}");
}

/// Retain loss of `trace` linearly interpolated at the first crossing of
/// `forget_level`; `None` if the forget loss never gets that low.
fn retain_at_forget_level(rows: &[(f64, f64)], forget_level: f64) -> Option<f64> {
    let mut prev: Option<(f64, f64)> = None;
    for &(lf, lr) in rows {
        if lf <= forget_level {
            return Some(match prev {
                Some((pf, pr)) if pf != lf => pr + (lr - pr) * (forget_level - pf) / (lf - pf),
                _ => lr,
            });
        }
        prev = Some((lf, lr));
    }
    None
}

#[test]
fn dualoptim_plus_retains_better_than_joint_at_matched_forgetting() {
    for seed in SHIPPED_SEEDS {
        let run = |m: &str| run_experiment(&cfg(&[format!("seed={seed}"), format!("method.name={m}")])).unwrap();
        let (plus, joint, dual) = (run("dualoptim_plus"), run("joint"), run("dualoptim"));
        assert!(!plus.diverged && !dual.diverged && !joint.diverged);
        let last = plus.final_losses().unwrap();
        let joint_rows: Vec<(f64, f64)> = joint.rows.iter().map(|r| (r.losses[0], r.losses[1])).collect();
        let matched = retain_at_forget_level(&joint_rows, last[0]).expect("joint reaches the forget level");
        assert!(last[1] <= matched, "seed {seed}: {} > {matched}", last[1]);
    }
}

#[test]
fn echoed_config_regenerates_report() {
    let c = cfg(&["method.name=scaffold".into(), "diagnostics.enabled=true".into(), "seed=9".into()]);
    let r = run_experiment(&c).unwrap();
    let again = run_experiment(&RunConfig::from_toml(&r.config_echo, &[]).unwrap()).unwrap();
    assert_eq!(again.content_hash(), r.content_hash());
    assert_eq!(again.losses_csv(), r.losses_csv());
}

#[test]
fn retain_frequency_sweep_has_table_shape() {
    let results = run_sweep(&cfg(&["diagnostics.enabled=true".into()]), &[Axis::preset("retain_freq").unwrap()]).unwrap();
    let rows = summary_rows(&results);
    let fr: Vec<u64> = rows.iter().map(|r| r.retain_freq.unwrap()).collect();
    assert_eq!(fr, [1, 2, 4, 5, 9, 14]);
    for (row, res) in rows.iter().zip(&results) {
        let report = res.outcome.as_ref().unwrap();
        assert!(!row.diverged && row.error.is_empty());
        assert_eq!(row.forget_freq, Some(1));
        let expected_forget = (1..=300u64).filter(|t| (t - 1) % (1 + row.retain_freq.unwrap()) == 0).count() as u64;
        assert_eq!(report.objective_steps, vec![expected_forget, 300 - expected_forget]);
        assert!(row.mean_update_momentum.is_some() && row.mean_gradient_ema.is_some());
    }
}

#[test]
fn logistic_task_runs_every_method() {
    for m in Method::ALL {
        let r = run_experiment(&cfg(&[format!("method.name={}", m.name()), "task.kind=logistic_forget_retain".into()])).unwrap();
        assert!(!r.diverged, "{}", m.name());
        assert!(r.rows.iter().all(|row| row.losses.iter().all(|l| l.is_finite())));
    }
}

#[test]
fn quantized_runs_stay_finite_on_the_task_suite() {
    for kind in ["conflicting_quadratic", "logistic_forget_retain", "three_task"] {
        for m in Method::ALL {
            for subset in ["base", "delta", "both"] {
                let r = run_experiment(&cfg(&[
                    format!("task.kind={kind}"),
                    format!("method.name={}", m.name()),
                    format!("quant.subset={subset}"),
                ]))
                .unwrap();
                assert!(!r.diverged, "{kind} {} {subset}", m.name());
                assert!(r.final_params.iter().all(|v| v.is_finite()));
            }
        }
    }
}
