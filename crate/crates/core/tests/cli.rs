mod common;

use std::fs;
use std::path::Path;

use common::*;
use prof_core::cli::{main_with_args, EXIT_CONFIG, EXIT_DATA, EXIT_NO_VALID, EXIT_OK, EXIT_PROVIDER};
use prof_core::noise::{synthesize_noisy, NoiseConfig};
use prof_core::reward::{parse, Arity, ParseContext, RewardFunction, RewardSource};
use prof_core::trajectory::{load_dataset, select_expert, DataFormat, Dataset, SplitSpec};
use serde_json::Value;

fn prof(args: &[&str]) -> i32 {
    let mut v = vec!["prof".to_string()];
    v.extend(args.iter().map(|s| s.to_string()));
    main_with_args(v)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn returns(src: &str, ds: &Dataset) -> Vec<f64> {
    let ctx = ParseContext::new(ds.obs_dim(), ds.act_dim(), Arity::WithAction);
    let r = parse(&RewardSource::expression(src, Arity::WithAction), &ctx).unwrap();
    ds.trajectories().iter().map(|t| r.transition_rewards(t).unwrap().iter().sum()).collect()
}

#[test]
fn score_matches_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ds = point_mass_dataset(3);
    write_binary(&ds, &root.join("pm.bin"));
    fs::write(root.join("run.toml"), "dataset = \"pm.bin\"\nh_count = 300\nseed = 4\n").unwrap();
    let sources = ["-abs(next[0] - 1.0)", "-sq(next[0] - 1.0) - 0.1 * sq(act[0])", "next[0]"];
    let mut args = vec!["score".to_string(), "--config".into(), s(&root.join("run.toml")).into()];
    args.extend(["--out".into(), s(&root.join("out")).into()]);
    for (i, src) in sources.iter().enumerate() {
        let p = root.join(format!("r{i}.rw"));
        fs::write(&p, src).unwrap();
        args.extend(["--reward".into(), s(&p).into()]);
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_eq!(prof(&refs), EXIT_OK);

    let split = select_expert(&ds, &SplitSpec::default()).unwrap();
    let expert_min = &split.expert.trajectories()[split.min_return_position()];
    let noisy = synthesize_noisy(expert_min, &NoiseConfig { h_count: 300, seed: 4, ..NoiseConfig::default() })
        .unwrap()
        .to_dataset()
        .unwrap();
    assert_eq!(read_json(&root.join("out/noisy.json"))["h_count"], 300);
    for (i, src) in sources.iter().enumerate() {
        let want = oracle_score(&returns(src, &split.expert), &returns(src, &split.offline), &returns(src, &noisy), 0.01);
        let got = read_json(&root.join(format!("out/scores/{i}/score.json")));
        assert_eq!(got["id"], i as u64);
        assert_eq!(got["offline_hits"], want.offline_hits, "{src}");
        assert_eq!(got["noisy_hits"], want.noisy_hits, "{src}");
        assert!(close(got["score"].as_f64().unwrap(), want.score), "{src}: {} vs {}", got["score"], want.score);
        assert!(close(got["lambda"].as_f64().unwrap(), want.lambda), "{src}");
    }
}

#[test]
fn relabel_follows_preset() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ds = point_mass_dataset(4);
    write_binary(&ds, &root.join("pm.bin"));
    fs::write(root.join("r.rw"), "-abs(next[0] - 1.0)").unwrap();
    for (preset, lo, hi) in [("locomotion", 0.0, 2.0), ("goal-reaching", -2.0, 0.0), ("regularized", -1.0, 1.0)] {
        let out = root.join(preset);
        let code = prof(&[
            "relabel",
            "--dataset",
            s(&root.join("pm.bin")),
            "--reward",
            s(&root.join("r.rw")),
            "--preset",
            preset,
            "--out",
            s(&out),
        ]);
        assert_eq!(code, EXIT_OK);
        let labeled = load_dataset(&out.join("labeled.bin"), DataFormat::BinaryV1).unwrap();
        let all: Vec<f32> =
            labeled.trajectories().iter().flat_map(|t| t.rewards().unwrap().iter().copied()).collect();
        let (mn, mx) = all.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert_eq!((mn as f64, mx as f64), (lo, hi), "{preset}");
        let meta = read_json(&out.join("relabel.json"));
        assert_eq!(meta["preset"], preset);
        assert_eq!(meta["transitions"], ds.total_transitions() as u64);
    }
    // explicit bounds win over the preset
    let out = root.join("custom");
    let code = prof(&[
        "relabel", "--dataset", s(&root.join("pm.bin")), "--reward", s(&root.join("r.rw")), "--preset", "goal-reaching",
        "--rmin", "-5", "--rmax", "5", "--out", s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(read_json(&out.join("relabel.json"))["rmin"], -5.0);
}

fn script_run(root: &Path, responses: &[String]) -> i32 {
    write_binary(&point_mass_dataset(9), &root.join("pm.bin"));
    fs::write(root.join("script.json"), serde_json::to_string(responses).unwrap()).unwrap();
    fs::write(root.join("run.toml"), "dataset = \"pm.bin\"\nh_count = 50\nn = 2\nrounds = 0\nscript = \"script.json\"\n")
        .unwrap();
    prof(&["optimize", "--config", s(&root.join("run.toml")), "--provider", "script", "--out", s(&root.join("out"))])
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    fs::write(root.join("junk.bin"), b"not a dataset").unwrap();
    fs::write(root.join("r.rw"), "obs[0]").unwrap();
    let (junk, missing, o1) = (root.join("junk.bin"), root.join("missing.bin"), root.join("o1"));
    assert_eq!(prof(&["split", "--dataset", s(&junk), "--out", s(&o1)]), EXIT_DATA);
    assert_ne!(prof(&["split", "--dataset", s(&missing), "--out", s(&o1)]), EXIT_OK);
    assert_eq!(prof(&["split", "--no-such-flag"]), EXIT_CONFIG);

    let d = root.join("provider");
    fs::create_dir(&d).unwrap();
    assert_eq!(script_run(&d, &[]), EXIT_PROVIDER);

    let d = root.join("invalid");
    fs::create_dir(&d).unwrap();
    // two slots, three attempts each
    let bad: Vec<String> = (0..6).map(|i| if i % 2 == 0 { fence("act[7]") } else { "no code here".into() }).collect();
    assert_eq!(script_run(&d, &bad), EXIT_NO_VALID);

    let d = root.join("ok");
    fs::create_dir(&d).unwrap();
    assert_eq!(script_run(&d, &[fence("act[7]"), fence("-abs(next[0] - 1.0)"), fence("next[0]")]), EXIT_OK);
    let summary = read_json(&d.join("out/summary.json"));
    assert_eq!(summary["best_source"], "-abs(next[0] - 1.0)");
    assert_eq!(fs::read_to_string(d.join("out/best.rw")).unwrap().trim(), "-abs(next[0] - 1.0)");
}

#[test]
fn replay_pins_best() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_binary(&point_mass_dataset(6), &root.join("pm.bin"));
    let responses = vec![fence("next[0]"), fence("-abs(next[0] - 1.0)")];
    fs::write(root.join("script.json"), serde_json::to_string(&responses).unwrap()).unwrap();
    fs::write(
        root.join("run.toml"),
        "dataset = \"pm.bin\"\nh_count = 100\nn = 2\nrounds = 0\nscript = \"script.json\"\nrecord = \"t.jsonl\"\n",
    )
    .unwrap();
    let cfg = root.join("run.toml");
    assert_eq!(prof(&["optimize", "--config", s(&cfg), "--provider", "script", "--out", s(&root.join("a"))]), EXIT_OK);
    let recorded = read_json(&root.join("a/summary.json"));
    fs::write(root.join("replay.toml"), "dataset = \"pm.bin\"\nh_count = 100\nn = 2\nrounds = 0\ntranscript = \"t.jsonl\"\n")
        .unwrap();
    let cfg = root.join("replay.toml");
    assert_eq!(prof(&["optimize", "--config", s(&cfg), "--provider", "replay", "--out", s(&root.join("b"))]), EXIT_OK);
    let replayed = read_json(&root.join("b/summary.json"));
    assert_eq!(recorded["best_id"], replayed["best_id"]);
    assert_eq!(recorded["best_score"], replayed["best_score"]);
    assert_eq!(replayed["best_source"], "-abs(next[0] - 1.0)");
    assert_eq!(replayed["provider"], "replay");
}
