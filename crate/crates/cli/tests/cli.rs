#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::Path;
use std::process::{Command, Output};

use crosstill_cli::{command, override_paths, SEED_ENV};

fn crosstill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crosstill"))
        .args(args)
        .env_remove(SEED_ENV)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes the tiny pipeline config and returns its path.
fn tiny_config_file(root: &Path) -> String {
    let mut cfg = common::tiny_config(root);
    cfg.eval.every_epoch = false;
    let path = root.join("tiny.json");
    std::fs::write(&path, cfg.to_json_pretty()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn help_lists_every_flag_of_every_subcommand() {
    for sub in command().get_subcommands() {
        let out = crosstill(&[sub.get_name(), "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let text = stdout(&out);
        for arg in sub.get_arguments() {
            if let Some(long) = arg.get_long() {
                assert!(text.contains(&format!("--{long}")), "{} --help misses --{long}", sub.get_name());
                assert!(arg.get_help().is_some(), "--{long} of {} is undocumented", sub.get_name());
            }
        }
    }
}

#[test]
fn override_flags_cover_the_config() {
    let paths: Vec<String> = override_paths().into_iter().map(|(p, _)| p).collect();
    for expected in ["student.bottleneck_size", "stage4.epochs", "corpus.n_pairs", "eval.block_size"] {
        assert!(paths.iter().any(|p| p == expected), "missing --{expected}");
    }
    let train = command().find_subcommand("train").unwrap().clone();
    let longs: Vec<String> = train.get_arguments().filter_map(|a| a.get_long().map(str::to_string)).collect();
    for p in &paths {
        assert!(longs.contains(p), "train lacks --{p}");
    }
}

#[test]
fn count_params_prints_table_rows() {
    let out = crosstill(&["count-params", "--preset", "xlmr-b128-ru3", "--preset", "minilm-full-ru12"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "preset\tembedding\tencoder\tembedding_M\tencoder_M");
    assert_eq!(lines[1], "xlmr-b128-ru3\t32494080\t21263616\t32.49M\t21.26M");
    assert!(lines[2].ends_with("96.20M\t21.29M"));
    let listed = crosstill(&["count-params", "--list"]);
    assert_eq!(stdout(&listed).lines().count(), 18);
}

#[test]
fn usage_and_configuration_errors_exit_with_one() {
    for args in [
        &["count-params", "--preset", "gpt-full-ru12"][..],
        &["count-params"],
        &["train", "--no-such-flag"],
        &["grad-check", "--loss", "unknown"],
        &["train", "--student.heads", "many"],
        &["sweep-depth", "--depths", "1,x"],
        &["frobnicate"],
    ] {
        let out = crosstill(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
        assert!(!stderr(&out).is_empty());
        assert!(stdout(&out).is_empty(), "{args:?} wrote to stdout");
    }
    assert_eq!(crosstill(&["--help"]).status.code(), Some(0));
    assert_eq!(crosstill(&["--version"]).status.code(), Some(0));
}

#[test]
fn io_and_format_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad_json = dir.path().join("bad.json");
    std::fs::write(&bad_json, "{ not json").unwrap();
    let garbage = dir.path().join("garbage.xdst");
    std::fs::write(&garbage, b"XDST1\x07\x00\x00\x00").unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["train".into(), "--config".into(), bad_json.display().to_string()],
        vec!["train".into(), "--config".into(), dir.path().join("absent.json").display().to_string()],
        vec!["count-params".into(), "--checkpoint".into(), garbage.display().to_string()],
        vec!["count-params".into(), "--checkpoint".into(), dir.path().join("absent.xdst").display().to_string()],
    ];
    for args in cases {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = crosstill(&refs);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).starts_with("error:"));
    }
}

#[test]
fn grad_check_passes_at_64_bit_and_fails_with_a_coarse_step() {
    let out = crosstill(&["grad-check", "--loss", "mcl", "--width", "64bit"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("max\t") && last.ends_with("PASS"), "{last}");
    assert!(text.lines().any(|l| l.starts_with("mcl\t")));

    let coarse = crosstill(&["grad-check", "--loss", "ce", "--step", "0.3", "--instances", "1"]);
    assert_eq!(coarse.status.code(), Some(1));
    assert!(stdout(&coarse).lines().last().unwrap().ends_with("FAIL"));
}

#[test]
fn corpus_training_and_evaluation_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config_file(dir.path());
    let data = dir.path().join("data");

    let out = crosstill(&["gen-corpus", "--config", &config]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["train"].as_u64().unwrap() + summary["dev"].as_u64().unwrap() + summary["test"].as_u64().unwrap(), 360);
    for f in ["train.tsv", "dev.tsv", "test.tsv", "vocab.json", "sts.tsv"] {
        assert!(data.join(f).is_file(), "{f}");
    }

    let out = crosstill(&["gen-corpus", "--config", &config, "--out", &dir.path().join("small").display().to_string(), "--corpus.n_pairs", "50"]);
    let summary: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(summary["train"].as_u64().unwrap() + summary["dev"].as_u64().unwrap() + summary["test"].as_u64().unwrap(), 50);

    let out = crosstill(&["train", "--config", &config, "--stage", "all", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let line = stdout(&out);
    let (digest, path) = line.trim().split_once('\t').unwrap();
    assert_eq!(digest.len(), 64);
    assert!(path.ends_with("stage4.xdst"));

    let report = dir.path().join("report.json");
    let out = crosstill(&["eval", "--config", &config, "--checkpoint", path, "--report", &report.display().to_string()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("task=sts") && text.contains("task=retrieval"));
    let reports: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);

    let out = crosstill(&["count-params", "--checkpoint", path]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    // the environment seed matches the flag; a flag beats the environment
    let other = dir.path().join("env-run").display().to_string();
    let via_env = Command::new(env!("CARGO_BIN_EXE_crosstill"))
        .args(["train", "--config", &config, "--output_dir", &other])
        .env(SEED_ENV, "3")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(stdout(&via_env).split('\t').next().unwrap(), digest);
    let third = dir.path().join("flag-run").display().to_string();
    let flag_wins = Command::new(env!("CARGO_BIN_EXE_crosstill"))
        .args(["train", "--config", &config, "--output_dir", &third, "--seed", "4"])
        .env(SEED_ENV, "3")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_ne!(stdout(&flag_wins).split('\t').next().unwrap(), digest);
}

#[test]
fn single_stage_and_sweep_commands_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config_file(dir.path());
    assert_eq!(crosstill(&["gen-corpus", "--config", &config]).status.code(), Some(0));
    let out = crosstill(&["train", "--config", &config, "--stage", "random-init"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).trim().ends_with("random_init.xdst"));

    let missing = crosstill(&["train", "--config", &config, "--stage", "3", "--output_dir", &dir.path().join("empty").display().to_string()]);
    assert_eq!(missing.status.code(), Some(1));

    let report = dir.path().join("sweep.json");
    let out = crosstill(&["sweep-depth", "--config", &config, "--depths", "1,2", "--report", &report.display().to_string(), "--single_stage.random_init.epochs", "1"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("depth\tsts_rho_x100\tretrieval_acc"));
    let points: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(points.as_array().unwrap().len(), 2);
}
