mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::{write_tiny_config, write_trials};

fn vqanon(args: &[&str], run_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vqanon"))
        .args(args)
        .env("VQANON_RUN_DIR", run_root)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&vqanon(&[], dir.path())), 1);
    assert_eq!(code(&vqanon(&["frobnicate"], dir.path())), 1);
    let o = vqanon(
        &[
            "anonymize",
            "--features",
            "f",
            "--xvectors",
            "x",
            "--pool",
            "p",
            "--checkpoint",
            "c",
            "--system",
            "4",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
    assert_eq!(code(&vqanon(&["--help"], dir.path())), 0);
}

#[test]
fn bad_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{ "training": { "epochz": 3 } }"#).unwrap();
    let o = vqanon(
        &["--config", p(&cfg), "features", "--input", p(dir.path())],
        dir.path(),
    );
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    fs::write(&cfg, r#"{ "schema_version": 7 }"#).unwrap();
    let o = vqanon(
        &["--config", p(&cfg), "features", "--input", p(dir.path())],
        dir.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn empty_input_reports_no_input_audio() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = vqanon(&["features", "--input", p(&empty)], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no input audio"), "{}", stderr(&o));
}

#[test]
fn malformed_wav_is_skipped_with_data_exit() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert_eq!(
        code(&vqanon(
            &["make-corpus", "--out", p(&corpus), "--per-speaker", "1"],
            dir.path()
        )),
        0
    );
    let wav = corpus.join("wav");
    fs::write(wav.join("spk_a/broken.wav"), b"RIFF not really").unwrap();
    let out = dir.path().join("feat");
    let o = vqanon(
        &["features", "--input", p(&wav), "--out", p(&out)],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("1 of 3 files skipped"),
        "{}",
        stderr(&o)
    );
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 3, "{manifest}");
    assert!(out.join("a_00.feat").exists() && out.join("b_00.feat").exists());
    assert!(out.join("config.json").exists());
}

#[test]
fn default_outputs_land_under_run_dir_env() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    vqanon(
        &["make-corpus", "--out", p(&corpus), "--per-speaker", "1"],
        dir.path(),
    );
    let root = dir.path().join("runs");
    let o = vqanon(&["features", "--input", p(&corpus.join("wav"))], &root);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(root.join("features/manifest.csv").exists());
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_tiny_config(d, 2, 4);
    let corpus = d.join("corpus");
    let feat = d.join("feat");
    let run = d.join("run");
    let anon = d.join("anon");
    for args in [
        vec!["make-corpus", "--out", p(&corpus), "--per-speaker", "2"],
        vec![
            "--config",
            p(&cfg),
            "features",
            "--input",
            p(&corpus.join("wav")),
            "--out",
            p(&feat),
        ],
        vec![
            "--config",
            p(&cfg),
            "train",
            "--features",
            p(&feat),
            "--xvectors",
            p(&corpus.join("xvectors")),
            "--out",
            p(&run),
        ],
        vec![
            "--config",
            p(&cfg),
            "anonymize",
            "--features",
            p(&feat),
            "--xvectors",
            p(&corpus.join("xvectors")),
            "--pool",
            p(&corpus.join("pool.bin")),
            "--checkpoint",
            p(&run),
            "--system",
            "2",
            "--out",
            p(&anon),
        ],
    ] {
        let o = vqanon(&args, d);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 4);
    assert_eq!(echoed["training"]["seed"], 4);
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(anon.join("a_01.json")).unwrap()).unwrap();
    assert_eq!(side["system"], 2);
    let alpha = side["alpha"].as_f64().unwrap();
    assert!((0.8..=1.2).contains(&alpha));
    assert_eq!(side["selected_speaker_ids"].as_array().unwrap().len(), 100);
    assert_eq!(
        side["samples"].as_u64().unwrap(),
        160 * side["frames"].as_u64().unwrap()
    );
    let wav = hound::WavReader::open(anon.join("a_01.wav")).unwrap();
    assert_eq!(wav.spec().sample_rate, 16000);
    assert_eq!(wav.duration() as u64, side["samples"].as_u64().unwrap());
}

#[test]
fn anonymize_skips_utterances_without_xvectors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_tiny_config(d, 1, 0);
    let corpus = d.join("corpus");
    let feat = d.join("feat");
    let run = d.join("run");
    vqanon(
        &["make-corpus", "--out", p(&corpus), "--per-speaker", "1"],
        d,
    );
    vqanon(
        &[
            "--config",
            p(&cfg),
            "features",
            "--input",
            p(&corpus.join("wav")),
            "--out",
            p(&feat),
        ],
        d,
    );
    vqanon(
        &[
            "--config",
            p(&cfg),
            "train",
            "--features",
            p(&feat),
            "--out",
            p(&run),
        ],
        d,
    );
    fs::remove_file(corpus.join("xvectors/b_00.xvec")).unwrap();
    let anon = d.join("anon");
    let o = vqanon(
        &[
            "--config",
            p(&cfg),
            "anonymize",
            "--features",
            p(&feat),
            "--xvectors",
            p(&corpus.join("xvectors")),
            "--pool",
            p(&corpus.join("pool.bin")),
            "--checkpoint",
            p(&run.join("checkpoints")),
            "--system",
            "1",
            "--out",
            p(&anon),
        ],
        d,
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(
        stderr(&o).contains("1 of 2 utterances skipped"),
        "{}",
        stderr(&o)
    );
    assert!(anon.join("a_00.wav").exists());
    assert!(!anon.join("b_00.wav").exists());
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = vqanon(
        &[
            "anonymize",
            "--features",
            p(d),
            "--xvectors",
            p(d),
            "--pool",
            p(&d.join("pool.bin")),
            "--checkpoint",
            p(&d.join("nothing")),
            "--system",
            "3",
        ],
        d,
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn evaluate_three_systems_with_gender_tags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["evaluate".to_string()];
    for (name, shift) in [("sys1", 0.3), ("sys2", 0.1), ("sys3", 0.6)] {
        let path = d.join(format!("{name}.trials"));
        let mut rows = Vec::new();
        for (i, g) in ["f", "m"].iter().enumerate() {
            for k in 0..6 {
                let x = k as f64 / 6.0 + 0.05 * i as f64;
                rows.push((format!("t{i}{k}"), x + shift, "target", *g));
                rows.push((format!("n{i}{k}"), x, "nontarget", *g));
            }
        }
        let refs: Vec<_> = rows
            .iter()
            .map(|(a, b, c, g)| (a.as_str(), *b, *c, Some(*g)))
            .collect();
        write_trials(&path, &refs);
        args.push("--trials".into());
        args.push(format!("{name}={}", path.display()));
    }
    let emo = d.join("sys2.emo");
    fs::write(&emo, "u1 ang ang\nu2 hap ang\nu3 hap hap\nu4 hap hap\n").unwrap();
    args.push("--emotion".into());
    args.push(format!("sys2={}", emo.display()));
    args.push("--out".into());
    args.push(d.join("eval").display().to_string());
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = vqanon(&argv, d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = stdout(&o);
    for col in ["EER-f", "EER-m", "EER-avg", "UAR"] {
        assert!(table.contains(col), "{table}");
    }
    for sys in ["sys1", "sys2", "sys3"] {
        assert_eq!(
            table.lines().filter(|l| l.contains(sys)).count(),
            1,
            "{table}"
        );
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("eval/metrics.json")).unwrap()).unwrap();
    let systems = metrics["systems"].as_array().unwrap();
    assert_eq!(systems.len(), 3);
    // The weakest separation leaves the verifier most confused.
    let eer: Vec<f64> = systems
        .iter()
        .map(|s| s["eer_average"].as_f64().unwrap())
        .collect();
    assert!(eer[1] > eer[0] && eer[0] > eer[2], "{eer:?}");
    assert!((systems[1]["uar"].as_f64().unwrap() - 75.0).abs() < 1e-12);
    assert!(systems[0]["uar"].is_null());
    let csv = fs::read_to_string(d.join("eval/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "{csv}");
}

#[test]
fn evaluate_untagged_without_emotion() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let path = d.join("plain.trials");
    write_trials(
        &path,
        &[
            ("a", 0.9, "target", None),
            ("b", 0.2, "target", None),
            ("c", 0.4, "nontarget", None),
            ("d", 0.1, "nontarget", None),
        ],
    );
    let o = vqanon(&["evaluate", "--trials", p(&path)], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("EER") && !out.contains("EER-avg"), "{out}");
    assert!(out.contains("UAR: absent"), "{out}");
}

#[test]
fn evaluate_parse_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.trials");
    fs::write(&path, "a 0.5 target\nb notanumber nontarget\n").unwrap();
    let o = vqanon(&["evaluate", "--trials", p(&path)], dir.path());
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains(":2") || stderr(&o).contains("line 2"),
        "{}",
        stderr(&o)
    );
}
