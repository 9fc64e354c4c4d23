//! End-to-end checks across modules and the command-line binary.

use std::path::Path;
use std::process::Command;

use klmpc::edmd::{Dataset, KoopmanModel};
use klmpc::harness::{
    self, ControllerKind, ExperimentConfig, ModelSet, ReferenceSpec, SortingSpec, TrackingReport,
};
use klmpc::plant::ArmParams;
use proptest::prelude::*;

/// Small but complete configuration: short campaign and short references.
fn quick() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.campaign.trials = 1;
    cfg.campaign.duration = 40.0;
    cfg.settle = 1.0;
    cfg.payloads = vec![0.025, 0.225];
    cfg.reference = ReferenceSpec::FigureEight {
        center: [0.15, -0.9],
        half_width: 0.1,
        half_height: 0.05,
        period: 20.0,
        duration: 4.0,
    };
    cfg.estimation.duration = 6.0;
    cfg.estimation.payloads = vec![0.125];
    cfg.unknown_load.payloads = vec![0.125];
    cfg.unknown_load.circle = ReferenceSpec::Circle {
        center: [0.15, -0.85],
        radius: 0.1,
        period: 10.0,
        duration: 6.0,
    };
    cfg.unknown_load.converged_after = 3.0;
    cfg.sorting.objects = 2;
    cfg.sorting.circle = ReferenceSpec::Circle {
        center: [0.15, -0.85],
        radius: 0.1,
        period: 10.0,
        duration: 3.0,
    };
    cfg.sorting.transfer = 1.0;
    cfg.sorting.dwell = 1.0;
    cfg
}

#[test]
fn dataset_and_models_round_trip_through_files() {
    let cfg = quick();
    let dir = tempfile::tempdir().unwrap();
    let data = harness::collect_campaign(&cfg).unwrap();
    assert_eq!(data.trajectories.len(), cfg.campaign.loads.len());
    let path = dir.path().join("data.csv");
    data.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), data);

    let models = harness::fit_models(&data, &cfg.basis).unwrap();
    models.save_dir(dir.path().join("m")).unwrap();
    let back = ModelSet::load_dir(dir.path().join("m")).unwrap();
    assert_eq!(back, models);
    assert_eq!(models.koopman_load.p, 1);
    assert_eq!(models.koopman.p, 0);
    assert_eq!(models.koopman_load.n_z, 2 * models.koopman.n_z);

    // Swapping the augmented file for an unaugmented one is caught.
    models
        .koopman
        .save(dir.path().join("m/koopman_load.json"))
        .unwrap();
    assert!(ModelSet::load_dir(dir.path().join("m")).is_err());
    assert!(KoopmanModel::load(dir.path().join("missing.json")).is_err());
}

#[test]
fn all_experiments_run_and_write_artifacts() {
    let cfg = quick();
    let models = harness::fit_on_demand(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();

    let e1 = harness::run_experiment1(&cfg, &models).unwrap();
    harness::write_experiment1(&e1, out).unwrap();
    let rows = e1.report.rows.len();
    assert_eq!(rows, 3);
    let csv = std::fs::read(out.join("exp1_rmse.csv")).unwrap();
    let back = TrackingReport::read_csv(&e1.report.title, &csv[..]).unwrap();
    assert_eq!(back.rows, e1.report.rows);
    assert_eq!(back.to_markdown(), e1.report.to_markdown());

    let e2 = harness::run_experiment2(&cfg, &models.koopman_load).unwrap();
    assert_eq!(e2[0].rows.len(), 121);
    // One window estimate every Ne steps, none before.
    let ne = cfg.estimator.ne;
    for r in &e2[0].rows {
        assert_eq!(
            r.w_instant.is_some(),
            (r.step + 1) % ne == 0,
            "step {}",
            r.step
        );
    }
    harness::write_experiment2(&e2, out).unwrap();

    let e3 = harness::run_experiment3(&cfg, &models).unwrap();
    harness::write_experiment3(&e3, out).unwrap();
    // Without a settle phase the first Ne - 1 steps run on the initial estimate.
    let direct = ExperimentConfig {
        settle: 0.0,
        ..cfg.clone()
    };
    let e3 = harness::run_experiment3(&direct, &models).unwrap();
    let mid = cfg.estimator.bounds.midpoint().0[0];
    let w_hat: Vec<f64> = e3.estimated[0]
        .rows
        .iter()
        .map(|r| r.w_hat.as_ref().unwrap()[0])
        .collect();
    assert!(w_hat[..ne - 1].iter().all(|&w| w == mid));
    assert_ne!(w_hat[ne - 1], mid);

    let e4 = harness::run_experiment4(&cfg, &models.koopman_load).unwrap();
    assert_eq!(e4.outcomes.len(), 2);
    for o in &e4.outcomes {
        assert_eq!(o.bin_chosen, cfg.sorting.bin_of(o.w_hat));
        assert_eq!(o.target, cfg.sorting.bin_targets[o.bin_chosen]);
    }
    harness::write_experiment4(&e4, out).unwrap();

    for name in [
        "exp1_report.md",
        "exp3_rmse.csv",
        "exp4_sorting.csv",
        "exp2_trace_w0.125.csv",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn frozen_estimate_ignores_later_measurements() {
    // Doubling the dwell only adds samples after the freeze.
    let cfg = quick();
    let models = harness::fit_on_demand(&cfg).unwrap();
    let a = harness::run_experiment4(&cfg, &models.koopman_load).unwrap();
    let mut longer = cfg.clone();
    longer.sorting.dwell *= 2.0;
    let b = harness::run_experiment4(&longer, &models.koopman_load).unwrap();
    for (x, y) in a.outcomes.iter().zip(&b.outcomes) {
        assert_eq!(x.w_hat, y.w_hat);
        assert_eq!(x.bin_chosen, y.bin_chosen);
    }
}

#[test]
fn controller_selection_and_missing_augmentation() {
    let mut cfg = quick();
    cfg.controllers = vec![ControllerKind::Koopman];
    let models = harness::fit_on_demand(&cfg).unwrap();
    let e1 = harness::run_experiment1(&cfg, &models).unwrap();
    assert_eq!(e1.report.rows.len(), 1);
    assert_eq!(e1.report.rows[0].controller, "K-MPC");
    assert!(harness::run_experiment2(&cfg, &models.koopman).is_err());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_klmpc"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn cli_fit_then_track_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    let mut cfg = quick();
    cfg.payloads = vec![0.125];
    cfg.save(&cfg_path).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(
            bin()
                .args(["--seed", "3", "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(out)
                .arg("collect"),
        );
        run_ok(
            bin()
                .args(["--seed", "3", "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(out)
                .arg("fit")
                .arg("--data")
                .arg(out.join("dataset.csv")),
        );
        let md = run_ok(
            bin()
                .args(["--seed", "3", "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(out)
                .arg("track"),
        );
        assert!(
            md.contains("| Controller | 125 g | Avg | Std Dev |"),
            "{md}"
        );
    }
    for name in [
        "dataset.csv",
        "exp1_rmse.csv",
        "exp1_koopman_load_w0.125.csv",
        "models/koopman_load.json",
    ] {
        assert_eq!(read(&a, name), read(&b, name), "{name}");
    }
    let report = run_ok(bin().arg("report").arg(a.join("exp1_rmse.csv")));
    assert!(report.contains("| KL-MPC |"));

    // A different seed changes the data.
    let c = dir.path().join("c");
    run_ok(
        bin()
            .args(["--seed", "4", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&c)
            .arg("collect"),
    );
    assert_ne!(read(&a, "dataset.csv"), read(&c, "dataset.csv"));
}

#[test]
fn cli_reports_errors_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let fails = |cmd: &mut Command| {
        let out = cmd.output().unwrap();
        assert!(!out.status.success());
        assert!(!out.stderr.is_empty());
    };
    fails(bin().arg("--bogus"));
    fails(bin().arg("report").arg(dir.path().join("nope.csv")));
    fails(bin().args(["track", "--models"]).arg(dir.path()));
    std::fs::write(dir.path().join("bad.json"), "{\"seed\": \"x\"}").unwrap();
    fails(
        bin()
            .arg("--config")
            .arg(dir.path().join("bad.json"))
            .arg("collect"),
    );
    std::fs::write(dir.path().join("bad.csv"), "controller,rmse\nK,1\n").unwrap();
    fails(bin().arg("report").arg(dir.path().join("bad.csv")));
    let unreachable =
        r#"{"reference": {"shape": "point", "target": [0.9, -0.9], "duration": 1.0}}"#;
    std::fs::write(dir.path().join("far.json"), unreachable).unwrap();
    fails(
        bin()
            .arg("--config")
            .arg(dir.path().join("far.json"))
            .arg("track"),
    );
}

#[test]
fn environment_seed_applies_when_flag_absent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    let mut cfg = quick();
    cfg.campaign.duration = 5.0;
    cfg.campaign.loads = vec![0.1];
    cfg.save(&cfg_path).unwrap();
    let collect = |out: &str, env: Option<&str>, flag: Option<&str>| {
        let mut cmd = bin();
        cmd.arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(dir.path().join(out));
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        cmd.env_remove(harness::SEED_ENV);
        if let Some(s) = env {
            cmd.env(harness::SEED_ENV, s);
        }
        run_ok(cmd.arg("collect"));
        read(&dir.path().join(out), "dataset.csv")
    };
    let by_env = collect("e", Some("8"), None);
    let by_flag = collect("f", None, Some("8"));
    let flag_wins = collect("g", Some("9"), Some("8"));
    let by_config = collect("h", None, None);
    assert_eq!(by_env, by_flag);
    assert_eq!(flag_wins, by_flag);
    assert_ne!(by_config, by_flag);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bins_are_monotone_and_left_closed(a in 0.0f64..0.3, b in 0.0f64..0.3) {
        let s = SortingSpec::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(s.bin_of(lo) <= s.bin_of(hi));
        let i = s.bin_of(lo);
        prop_assert!(i < s.bin_targets.len());
        // Every edge belongs to the bin it opens.
        let edge = (i as f64) * s.bin_width;
        prop_assert_eq!(s.bin_of(edge), i);
    }

    #[test]
    fn transfer_path_is_a_segment(
        fx in -0.2f64..0.4, fy in -0.95f64..-0.7, tx in -0.2f64..0.4, ty in -0.95f64..-0.7,
        transfer in 0.0f64..3.0, dwell in 0.0f64..2.0,
    ) {
        let ts = 0.05;
        let path = harness::transfer_path([fx, fy], [tx, ty], transfer, dwell, ts);
        let count = |d: f64| klmpc::plant::sample_count(d, ts);
        let moving = count(transfer);
        prop_assert_eq!(path.len(), moving + count(dwell) - 1);
        prop_assert_eq!(path[0], if moving == 1 { [tx, ty] } else { [fx, fy] });
        prop_assert_eq!(*path.last().unwrap(), [tx, ty]);
        let step = (tx - fx).hypot(ty - fy) / (moving.max(2) - 1) as f64;
        for w in path.windows(2) {
            prop_assert!((w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]) <= step + 1e-12);
        }
    }

    #[test]
    fn resolved_references_reproduce_the_end_effector(x in -0.3f64..0.5, y in -0.99f64..-0.6) {
        let p = ArmParams::default();
        if let Ok(r) = harness::resolve_reference(&[[x, y]], &p) {
            let r = &r[0];
            prop_assert!((r[0].hypot(r[1]) - p.l1).abs() < 1e-12);
            prop_assert!(((x - r[0]).hypot(y - r[1]) - p.l2).abs() < 1e-12);
        } else {
            // Rejections are either out of reach or over the torque limit.
            match klmpc::plant::inverse_kinematics([x, y], &p).first() {
                None => prop_assert!(x.hypot(y) > p.l1 + p.l2 - 1e-12),
                Some(theta) => {
                    let tau = klmpc::plant::holding_torque(*theta, 0.3, &p);
                    prop_assert!(tau[0].abs().max(tau[1].abs()) > p.tau_max);
                }
            }
        }
    }
}
