//! Acceptance: rerunning any command with identical config and seed yields
//! byte-identical artifacts (metric JSON, checkpoints, generated data).

use std::path::Path;
use std::process::Command;

fn relmatch(args: &[&str], dir: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_relmatch"))
        .args(args)
        .current_dir(dir)
        .env("RELMATCH_THREADS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawning relmatch");
    assert!(
        out.status.success(),
        "relmatch {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn assert_identical(dir: &Path, a: &str, b: &str) {
    let left = std::fs::read(dir.join(a)).unwrap_or_else(|_| panic!("missing {a}"));
    let right = std::fs::read(dir.join(b)).unwrap_or_else(|_| panic!("missing {b}"));
    assert!(left == right, "{a} and {b} differ");
}

#[test]
fn reruns_are_bit_identical() {
    let start = std::time::Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(
        root.join("desk.conf"),
        "h = 16\nembed_dim = 16\nd_v = 8\nd_r = 8\nk = 3\nm = 2\n\
         epochs1 = 5\nepochs2 = 5\nbatch_size = 8\nseed = 9\nmax_len = 16\n\
         cap_hidden = 8\ncap_embed = 6\ncap_feat = 6\ncap_att = 4\ncap_epochs = 3\n\
         scst_steps = 1\n",
    )
    .unwrap();

    // generated data
    for out in ["data_a", "data_b"] {
        relmatch(
            &[
                "synth-data", "--config", "desk.conf", "--pairs", "8", "--out", out,
            ],
            root,
        );
    }
    assert_identical(root, "data_a/captions.jsonl", "data_b/captions.jsonl");
    assert_identical(root, "data_a/synth_meta.json", "data_b/synth_meta.json");
    assert_identical(
        root,
        "data_a/features/1000.rsgf",
        "data_b/features/1000.rsgf",
    );

    // matcher training and its metric artifacts
    for out in ["run_a", "run_b"] {
        relmatch(
            &[
                "train-matcher",
                "--config",
                "desk.conf",
                "--captions",
                "data_a/captions.jsonl",
                "--features-dir",
                "data_a/features",
                "--out",
                out,
            ],
            root,
        );
    }
    assert_identical(root, "run_a/matcher.rsck", "run_b/matcher.rsck");
    assert_identical(
        root,
        "run_a/matcher_loss_curve.json",
        "run_b/matcher_loss_curve.json",
    );

    // retrieval evaluation
    for out in ["eval_a", "eval_b"] {
        relmatch(
            &[
                "eval-retrieval",
                "--config",
                "desk.conf",
                "--captions",
                "data_a/captions.jsonl",
                "--features-dir",
                "data_a/features",
                "--checkpoint",
                "run_a/matcher.rsck",
                "--folds",
                "2",
                "--k",
                "1,2",
                "--out",
                out,
            ],
            root,
        );
    }
    assert_identical(root, "eval_a/retrieval.json", "eval_b/retrieval.json");

    // captioner training and self-critical fine-tuning
    for out in ["cap_a", "cap_b"] {
        relmatch(
            &[
                "train-captioner",
                "--config",
                "desk.conf",
                "--captions",
                "data_a/captions.jsonl",
                "--features-dir",
                "data_a/features",
                "--out",
                out,
            ],
            root,
        );
    }
    assert_identical(root, "cap_a/captioner.rsck", "cap_b/captioner.rsck");
    assert_identical(
        root,
        "cap_a/captioner_loss_curve.json",
        "cap_b/captioner_loss_curve.json",
    );
    for out in ["scst_a", "scst_b"] {
        relmatch(
            &[
                "scst-finetune",
                "--config",
                "desk.conf",
                "--captions",
                "data_a/captions.jsonl",
                "--features-dir",
                "data_a/features",
                "--checkpoint",
                "cap_a/captioner.rsck",
                "--steps",
                "1",
                "--out",
                out,
            ],
            root,
        );
    }
    assert_identical(root, "scst_a/scst_stats.json", "scst_b/scst_stats.json");
    assert_identical(
        root,
        "scst_a/captioner_scst.rsck",
        "scst_b/captioner_scst.rsck",
    );

    // split building and gradient checking
    for out in ["vrr_a", "vrr_b"] {
        relmatch(
            &[
                "build-vrr-split",
                "--captions",
                "data_a/captions.jsonl",
                "--seed",
                "9",
                "--out",
                out,
            ],
            root,
        );
    }
    assert_identical(root, "vrr_a/vrr_split.jsonl", "vrr_b/vrr_split.jsonl");
    assert_identical(root, "vrr_a/vrr_summary.json", "vrr_b/vrr_summary.json");
    for out in ["grad_a", "grad_b"] {
        relmatch(
            &["gradcheck", "--config", "desk.conf", "--out", out],
            root,
        );
    }
    assert_identical(root, "grad_a/gradcheck.json", "grad_b/gradcheck.json");

    println!(
        "acceptance: reproducibility (bit-identical reruns): PASS ({:.2?})",
        start.elapsed()
    );
}
