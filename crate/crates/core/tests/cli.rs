mod common;

use common::{cmkt, fixture, output_files, run_pipeline};
use sha2::{Digest, Sha256};

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_method_exits_2_listing_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmkt(
        &["--out", dir.path().to_str().unwrap(), "pretrain", "--method", "SIMCLR", "--vocab", "v.txt"],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for name in ["MLM", "TCL+PSA+ANS", "VOKEN+MLM", "CMCL+PSA+ANS", "CMKD"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn missing_lexicon_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmkt(
        &[
            "--out",
            dir.path().to_str().unwrap(),
            "perturb",
            "--pairs",
            fixture("pairs.tsv").to_str().unwrap(),
            "--lexicon",
            "/nonexistent/lexicon.tsv",
            "--pos",
            fixture("pos.tsv").to_str().unwrap(),
            "--oracle",
            fixture("mock_oracle.tsv").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/lexicon.tsv"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_2_and_help_exits_0() {
    assert_eq!(cmkt(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(cmkt(&["eval", "--checkpoint"], None).status.code(), Some(2));
    assert_eq!(cmkt(&["--help"], None).status.code(), Some(0));
}

#[test]
fn perturb_two_captions_is_bounded_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("two.tsv");
    let text = std::fs::read_to_string(fixture("pairs.tsv")).unwrap();
    std::fs::write(&pairs, text.lines().take(2).map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    let run = |out: &str| {
        let o = dir.path().join(out);
        let res = cmkt(
            &[
                "--seed",
                "5",
                "--out",
                o.to_str().unwrap(),
                "perturb",
                "--pairs",
                pairs.to_str().unwrap(),
                "--lexicon",
                fixture("mini_lexicon.tsv").to_str().unwrap(),
                "--pos",
                fixture("pos.tsv").to_str().unwrap(),
                "--oracle",
                &format!("table:{}", fixture("mock_oracle.tsv").display()),
            ],
            None,
        );
        assert!(res.status.success(), "{}", stderr(&res));
        std::fs::read(o.join("perturbations.tsv")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    let lines = String::from_utf8(a).unwrap().lines().count();
    assert!(lines > 0 && lines <= 2 * 3 * 5, "{lines}");

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "perturb");
    assert_eq!(manifest["seed"], 5);
    let digest = hex::encode(Sha256::digest(std::fs::read(&pairs).unwrap()));
    assert_eq!(manifest["inputs"][pairs.display().to_string()], digest);
    assert!(manifest["outputs"].as_array().unwrap().iter().any(|o| o.as_str().unwrap().ends_with("perturbations.tsv")));
    assert!(manifest["timestamp"].is_string());
}

#[test]
fn data_dir_resolves_relative_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let res = cmkt(
        &[
            "--out",
            out.to_str().unwrap(),
            "perturb",
            "--pairs",
            "pairs.tsv",
            "--lexicon",
            "mini_lexicon.tsv",
            "--pos",
            "pos.tsv",
            "--oracle",
            "mock_oracle.tsv",
        ],
        Some(&fixture("")),
    );
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(out.join("perturbations.tsv").exists());
}

#[test]
fn report_command_renders_the_fixture_cell() {
    let dir = tempfile::tempdir().unwrap();
    let res = cmkt(
        &[
            "--out",
            dir.path().to_str().unwrap(),
            "report",
            "--svg",
            fixture("report_bert_base_piqa64.csv").to_str().unwrap(),
        ],
        None,
    );
    assert!(res.status.success(), "{}", stderr(&res));
    assert!(String::from_utf8_lossy(&res.stdout).contains("52.6±0.9"));
    for f in ["report.txt", "report.csv", "plot.csv", "plot.svg", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn eval_without_test_split_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let w = d.join("w");
    let synth = cmkt(&["--out", w.to_str().unwrap(), "synth", "--pairs", "40", "--mcqa-test", "0", "--mcqa-train", "80"], None);
    assert!(synth.status.success(), "{}", stderr(&synth));
    let pre = cmkt(
        &[
            "--out",
            d.join("p").to_str().unwrap(),
            "pretrain",
            "--method",
            "MLM",
            "--vocab",
            w.join("vocab.txt").to_str().unwrap(),
            "--captions",
            w.join("captions.txt").to_str().unwrap(),
            "--epochs",
            "1",
        ],
        None,
    );
    assert!(pre.status.success(), "{}", stderr(&pre));
    let eval = cmkt(
        &[
            "--out",
            d.join("e").to_str().unwrap(),
            "eval",
            "--checkpoint",
            d.join("p/final.ckpt.json").to_str().unwrap(),
            "--vocab",
            w.join("vocab.txt").to_str().unwrap(),
            "--dataset",
            w.join("mcqa.jsonl").to_str().unwrap(),
            "--protocol",
            "low64",
        ],
        None,
    );
    assert_eq!(eval.status.code(), Some(2), "{}", stderr(&eval));
    assert!(stderr(&eval).contains("test split"));
}

#[test]
fn pipeline_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&dir.path().join("a"), "3");
    run_pipeline(&dir.path().join("b"), "3");
    let a = output_files(&dir.path().join("a"));
    let b = output_files(&dir.path().join("b"));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (name, bytes) in &a {
        assert!(bytes == &b[name], "{name} differs");
    }
    assert!(a.contains_key("pretrain/loss_log.csv"));
    assert!(a.contains_key("report/plot.svg"));
}
