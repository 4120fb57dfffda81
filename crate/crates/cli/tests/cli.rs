use std::path::Path;
use std::process::{Command, Output};

use pedcast::config::RunConfig;
use pedcast::metrics::Detection;
use pedcast::pipeline::scene_ground_truth;
use pedcast::predictions::write_predictions;
use pedcast::simworld::read_dataset;

/// Overrides making every command finish in well under a second: a 16x16
/// grid over a 5 m world with two or three lone pedestrians.
fn tiny_pairs() -> Vec<String> {
    [
        "world_extent_m=5",
        "solo_min=2",
        "solo_max=3",
        "group_prob=0.0",
        "clutter_points=20",
        "t_prime=2",
        "t=2",
        "n_future=2",
        "range_m=16",
        "pillar_m=1.0",
        "pillar_channels=4",
        "backbone_c0=4",
        "backbone_c1=4",
        "backbone_c2=8",
        "temporal_channels=8",
        "pre_nms_top_k=32",
        "post_nms_top_k=8",
        "roi_s=2",
        "d_c=8",
        "d_path=4",
        "d_att=4",
        "d_g=4",
    ]
    .iter()
    .map(|kv| kv.to_string())
    .collect()
}

fn tiny_config() -> RunConfig {
    RunConfig::default().with_overrides(&tiny_pairs()).unwrap()
}

fn tiny_args(extra: &[&str]) -> Vec<String> {
    let mut args: Vec<String> =
        tiny_pairs().into_iter().flat_map(|kv| ["--set".to_string(), kv]).collect();
    args.extend(extra.iter().map(|a| a.to_string()));
    args
}

fn pedcast_raw(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pedcast"))
        .args(args)
        .env("RUST_BACKTRACE", "0")
        .output()
        .expect("spawn pedcast")
}

fn pedcast_ok(sub: &str, extra: &[&str]) -> String {
    let mut args = vec![sub.to_string()];
    args.extend(tiny_args(extra));
    let out = pedcast_raw(&args);
    assert!(
        out.status.success(),
        "pedcast {sub} {extra:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pedcast_err(sub: &str, extra: &[&str]) -> String {
    let mut args = vec![sub.to_string()];
    args.extend(tiny_args(extra));
    let out = pedcast_raw(&args);
    assert!(!out.status.success(), "pedcast {sub} {extra:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen_tiny_dataset(dir: &Path, scenes: u64, seed: u64) -> std::path::PathBuf {
    let data = dir.join("data.bin");
    pedcast_ok(
        "gen-data",
        &[
            "--scenes",
            &scenes.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
            data.to_str().unwrap(),
        ],
    );
    data
}

#[test]
fn gen_data_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    let c = dir.path().join("c.bin");
    pedcast_ok("gen-data", &["--scenes", "3", "--seed", "7", "--out", a.to_str().unwrap()]);
    pedcast_ok("gen-data", &["--scenes", "3", "--seed", "7", "--out", b.to_str().unwrap()]);
    pedcast_ok("gen-data", &["--scenes", "3", "--seed", "8", "--out", c.to_str().unwrap()]);
    let (a, b, c) =
        (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn empty_dataset_is_still_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(dir.path(), 0, 7);
    assert!(read_dataset(&data).unwrap().is_empty());
}

#[test]
fn train_writes_run_artifacts_and_repeats_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(dir.path(), 3, 7);
    let data = data.to_str().unwrap();
    let run1 = dir.path().join("run1");
    let run2 = dir.path().join("run2");
    for run in [&run1, &run2] {
        pedcast_ok(
            "train",
            &["--seed", "7", "--data", data, "--out", run.to_str().unwrap(), "--steps", "4"],
        );
    }

    let log = std::fs::read_to_string(run1.join("loss.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    for term in ["total", "t_cls", "t_cur", "t_past", "s_cls", "s_cur", "s_future", "proposals"] {
        assert!(log.lines().all(|l| l.contains(term)), "loss.log line missing {term}");
    }
    let effective = std::fs::read_to_string(run1.join("effective.toml")).unwrap();
    assert!(effective.contains("pillar_m = 1.0"));

    for file in ["checkpoint/params.ckpt", "checkpoint/optim.ckpt"] {
        let x = std::fs::read(run1.join(file)).unwrap();
        let y = std::fs::read(run2.join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between identical runs");
    }
    assert_eq!(log, std::fs::read_to_string(run2.join("loss.log")).unwrap());
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(dir.path(), 3, 7);
    let data = data.to_str().unwrap();
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    pedcast_ok(
        "train",
        &["--seed", "7", "--data", data, "--out", full.to_str().unwrap(), "--steps", "4"],
    );
    pedcast_ok(
        "train",
        &["--seed", "7", "--data", data, "--out", split.to_str().unwrap(), "--steps", "2"],
    );
    pedcast_ok(
        "train",
        &[
            "--seed",
            "7",
            "--data",
            data,
            "--out",
            split.to_str().unwrap(),
            "--steps",
            "2",
            "--resume",
        ],
    );
    for file in ["checkpoint/params.ckpt", "checkpoint/optim.ckpt"] {
        assert_eq!(
            std::fs::read(full.join(file)).unwrap(),
            std::fs::read(split.join(file)).unwrap(),
            "{file} differs after resume"
        );
    }
    let log = std::fs::read_to_string(split.join("loss.log")).unwrap();
    assert_eq!(log, std::fs::read_to_string(full.join("loss.log")).unwrap());
}

#[test]
fn eval_predict_and_rescore_close_the_loop() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(dir.path(), 3, 7);
    let data = data.to_str().unwrap();
    let run = dir.path().join("run");
    pedcast_ok(
        "train",
        &["--seed", "7", "--data", data, "--out", run.to_str().unwrap(), "--steps", "2"],
    );
    let ckpt = run.join("checkpoint");
    let report = pedcast_ok(
        "eval",
        &["--seed", "7", "--checkpoint", ckpt.to_str().unwrap(), "--data", data],
    );
    assert!(report.contains("bev_ap"), "report missing bev_ap:\n{report}");
    assert!(report.contains("ade_cm"), "report missing ade_cm:\n{report}");

    let preds = dir.path().join("preds.txt");
    pedcast_ok(
        "predict",
        &[
            "--seed",
            "7",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data,
            "--out",
            preds.to_str().unwrap(),
        ],
    );
    let text = std::fs::read_to_string(&preds).unwrap();
    assert!(text.starts_with("# pedcast predictions v1"));
    assert_eq!(text.lines().filter(|l| l.starts_with("scene ")).count(), 3);

    let rescored = pedcast_ok(
        "eval",
        &["--seed", "7", "--predictions", preds.to_str().unwrap(), "--data", data],
    );
    assert!(rescored.contains("bev_ap"));
}

#[test]
fn ground_truth_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(dir.path(), 3, 7);
    let cfg = tiny_config();
    let preds: Vec<Vec<Detection>> = read_dataset(&data)
        .unwrap()
        .iter()
        .map(|s| {
            scene_ground_truth(s, &cfg)
                .unwrap()
                .into_iter()
                .map(|gt| Detection { bev: gt.bev, score: 1.0, future: gt.future })
                .collect()
        })
        .collect();
    let pred_path = dir.path().join("gt_preds.txt");
    write_predictions(&pred_path, &preds).unwrap();

    let report = pedcast_ok(
        "eval",
        &[
            "--seed",
            "7",
            "--predictions",
            pred_path.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
        ],
    );
    assert!(report.contains("bev_ap 1.000000"), "oracle AP not 1:\n{report}");
    assert!(report.contains("ade_cm 0.000000"), "oracle ADE not 0:\n{report}");
    assert!(report.contains("hr@1s 1.000000"), "oracle hit rate not 1:\n{report}");
}

#[test]
fn render_draws_the_scene_and_rejects_bad_indices() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(dir.path(), 2, 7);
    let data = data.to_str().unwrap();
    let svg_path = dir.path().join("scene0.svg");
    pedcast_ok(
        "render",
        &["--data", data, "--scene", "0", "--out", svg_path.to_str().unwrap()],
    );
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(svg.contains("version=\"1.1\""));
    assert!(svg.contains("<polygon"), "ground truth boxes missing");

    let err = pedcast_err(
        "render",
        &["--data", data, "--scene", "9", "--out", svg_path.to_str().unwrap()],
    );
    assert!(err.contains("out of range"), "unexpected error text: {err}");

    let cfg = tiny_config();
    let scenes = read_dataset(Path::new(data)).unwrap();
    let gt_preds: Vec<Vec<Detection>> = scenes
        .iter()
        .map(|s| {
            scene_ground_truth(s, &cfg)
                .unwrap()
                .into_iter()
                .map(|gt| Detection { bev: gt.bev, score: 1.0, future: gt.future })
                .collect()
        })
        .collect();
    let pred_path = dir.path().join("p.txt");
    write_predictions(&pred_path, &gt_preds).unwrap();
    let overlay = dir.path().join("overlay.svg");
    pedcast_ok(
        "render",
        &[
            "--data",
            data,
            "--predictions",
            pred_path.to_str().unwrap(),
            "--scene",
            "0",
            "--out",
            overlay.to_str().unwrap(),
        ],
    );
    let svg = std::fs::read_to_string(&overlay).unwrap();
    assert!(svg.contains("yellow"), "detection overlay missing");
}

#[test]
fn benchmark_reports_every_stage() {
    let out = pedcast_ok("benchmark", &["--seed", "7", "--runs", "3", "--warmup", "1"]);
    for stage in ["voxelize", "backbone", "trpn", "sti", "nms"] {
        assert!(out.contains(stage), "missing stage {stage}:\n{out}");
    }
    assert!(out.contains("median"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.bin");
    let err = pedcast_err(
        "gen-data",
        &["--set", "nonsense=1", "--scenes", "1", "--out", out.to_str().unwrap()],
    );
    assert!(err.contains("nonsense"), "error does not name the bad key: {err}");
}

#[test]
fn diverging_training_aborts_with_the_step_index() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny_dataset(dir.path(), 3, 7);
    let run = dir.path().join("run");
    let err = pedcast_err(
        "train",
        &[
            "--seed",
            "7",
            "--set",
            "lr=1e200",
            "--data",
            data.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--steps",
            "10",
        ],
    );
    assert!(err.contains("non-finite"), "missing diagnosis: {err}");
    assert!(err.contains("step 1"), "missing step index: {err}");
}
