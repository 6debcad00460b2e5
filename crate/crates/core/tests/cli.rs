use std::path::Path;
use std::sync::atomic::AtomicBool;

use dataevolver::cli::{main_with, EXIT_ENGINE, EXIT_OK, EXIT_USAGE};
use dataevolver::config::DEMO_CONFIG;
use dataevolver::engine::{Workspace, CONFIG_FILE};

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn cli(ws: &Path, args: &[&str]) -> Run {
    let stop = AtomicBool::new(false);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut argv = vec!["dataevolver", "--workspace", ws.to_str().unwrap()];
    argv.extend_from_slice(args);
    let code = main_with(argv, &mut out, &mut err, &stop);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn small_config() -> String {
    DEMO_CONFIG
        .replace("objects = 50", "objects = 10")
        .replace("n_train_objects = 35", "n_train_objects = 6")
        .replace("n_val_objects = 7", "n_val_objects = 2")
        .replace("n_test_objects = 8", "n_test_objects = 2")
        .replace("expansion_budget = 80", "expansion_budget = 8")
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    assert_eq!(cli(ws, &["init"]).code, EXIT_OK);
    std::fs::write(ws.join(CONFIG_FILE), small_config()).unwrap();

    for round in 1..=2 {
        let r = cli(ws, &["run-round"]);
        assert_eq!(r.code, EXIT_OK, "{}", r.err);
        assert!(r.out.starts_with(&format!("round {round} ")), "{}", r.out);
        assert!(ws.join(format!("reports/round-{round:04}.json")).is_file());
    }
    // Round ids are never reused.
    let r = cli(ws, &["run-round", "--round", "1"]);
    assert_eq!(r.code, EXIT_ENGINE);

    let r = cli(ws, &["report", "--all"]);
    assert_eq!(r.code, EXIT_OK);
    assert_eq!(r.out.matches("verdict=").count(), 2);
    let r = cli(ws, &["report", "--round", "2"]);
    assert!(r.out.contains("(F,I,D)=(1,0,0)"), "{}", r.out);

    let report = Workspace::open(ws).unwrap().load_report(1).unwrap();
    let sample = report.sample_ids.first().expect("round 1 produced samples").clone();
    let r = cli(ws, &["inspect", "--sample", &sample]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    let v: serde_json::Value = serde_json::from_str(&r.out).unwrap();
    assert_eq!(v["sample_id"], sample.as_str());

    let r = cli(ws, &["replay", "--sample", &sample]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.starts_with("replay ok"));

    let r = cli(ws, &["export", "--mode", "image_pairs", "--round", "1", "--split", "val"]);
    assert_eq!(r.code, EXIT_OK, "{}", r.err);
    assert!(r.out.starts_with("val: "));
    for mode in ["multi_view", "geometry_package", "preference", "diagnostics", "trajectory", "video_sequence"] {
        let r = cli(ws, &["export", "--mode", mode]);
        assert_eq!(r.code, EXIT_OK, "{mode}: {}", r.err);
        assert!(ws.join(format!("exports/round-0002/{mode}.json")).is_file(), "{mode}");
    }

    let r = cli(ws, &["export", "--mode", "bogus"]);
    assert_eq!(r.code, EXIT_USAGE);
    let r = cli(ws, &["inspect", "--sample", "nope"]);
    assert_eq!(r.code, EXIT_ENGINE);
    assert!(r.err.starts_with("error: "));
}

#[test]
fn bad_config_is_an_engine_error() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    assert_eq!(cli(ws, &["init"]).code, EXIT_OK);
    std::fs::write(ws.join("broken.toml"), format!("mystery = true\n{DEMO_CONFIG}")).unwrap();
    let r = cli(ws, &["run-round", "--config", "broken.toml"]);
    assert_eq!(r.code, EXIT_ENGINE);
    assert!(r.err.contains("config"), "{}", r.err);
    assert!(Workspace::open(ws).unwrap().reports().unwrap().is_empty());
}
