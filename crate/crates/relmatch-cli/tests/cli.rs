//! Binary-level tests: flag handling, config errors, and the synthetic
//! train/eval pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn relmatch(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relmatch"))
        .args(args)
        .current_dir(dir)
        .env("RELMATCH_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawning relmatch")
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("desk.conf");
    std::fs::write(
        &path,
        "h = 32\nembed_dim = 32\nd_v = 16\nd_r = 16\nk = 4\nm = 3\n\
         epochs1 = 50\nepochs2 = 50\nbatch_size = 16\nseed = 1\nmax_len = 20\n\
         cap_hidden = 16\ncap_embed = 8\ncap_feat = 8\ncap_att = 8\n",
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = relmatch(&["--help"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "train-matcher",
        "eval-retrieval",
        "train-captioner",
        "caption",
        "scst-finetune",
        "build-vrr-split",
        "synth-data",
        "gradcheck",
        "sweep-temperature",
    ] {
        assert!(text.contains(sub), "help must list {sub}");
    }
}

#[test]
fn unknown_flags_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = relmatch(&["gradcheck", "--no-such-flag"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn config_type_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "margin = banana\n").unwrap();
    let out = relmatch(
        &["gradcheck", "--config", "bad.conf", "--out", "out"],
        dir.path(),
    );
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("margin") && text.contains("banana"), "{text}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "weird = 1\n").unwrap();
    let out = relmatch(
        &["gradcheck", "--config", "bad.conf", "--out", "out"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn missing_captions_file_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = relmatch(
        &[
            "build-vrr-split",
            "--captions",
            "nope.jsonl",
            "--out",
            "out",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
}

#[test]
fn synthetic_pipeline_reaches_perfect_recall() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());

    let out = relmatch(
        &[
            "synth-data",
            "--config",
            &config,
            "--pairs",
            "32",
            "--seed",
            "1",
            "--out",
            "data",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = relmatch(
        &[
            "train-matcher",
            "--config",
            &config,
            "--captions",
            "data/captions.jsonl",
            "--features-dir",
            "data/features",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = relmatch(
        &[
            "eval-retrieval",
            "--config",
            &config,
            "--captions",
            "data/captions.jsonl",
            "--features-dir",
            "data/features",
            "--checkpoint",
            "run/matcher.rsck",
            "--folds",
            "1",
            "--k",
            "1,5",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/retrieval.json")).unwrap())
            .unwrap();
    assert_eq!(report["data"]["mean_text_to_image"]["recall"]["1"], 1.0);
    assert_eq!(report["data"]["mean_image_to_text"]["recall"]["1"], 1.0);
    // artifacts embed version, seed, and the config echo
    assert_eq!(report["seed"], 1);
    assert!(report["config"].as_str().unwrap().contains("margin = 0.2"));
    assert!(report["version"].is_string());
}

#[test]
fn vrr_split_command_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("caps.jsonl"),
        r#"{"image_id": 1, "captions": ["a dog sitting on grass", "a brown dog"]}
{"image_id": 2, "captions": ["a red car"]}
"#,
    )
    .unwrap();
    let out = relmatch(
        &[
            "build-vrr-split",
            "--captions",
            "caps.jsonl",
            "--seed",
            "5",
            "--out",
            "vrr",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("vrr/vrr_summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["data"]["predicate_count"], 164);
    assert_eq!(summary["data"]["qualifying_images"], 1);
    assert_eq!(summary["data"]["corpus_images"], 2);
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = relmatch(&["gradcheck", "--seed", "7", "--out", "out"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS"), "{text}");
    assert!(text.contains("max relative error"));
}
