mod common;

use std::fs;
use std::path::Path;

use common::tiny_config;
use vqanon::corpus::make_corpus;
use vqanon::pipeline::{
    cmd_anonymize, cmd_build_pool, cmd_features, cmd_train, AnonymizationRecord,
};
use vqanon::training::read_loss_log;

fn features(root: &Path) -> (vqanon::corpus::CorpusLayout, std::path::PathBuf) {
    let layout = make_corpus(&root.join("corpus"), 2, 1).unwrap();
    let feat = root.join("feat");
    cmd_features(&layout.wav_dir, &feat, &tiny_config(1, 0)).unwrap();
    (layout, feat)
}

#[test]
fn seed_changes_the_first_step() {
    let dir = tempfile::tempdir().unwrap();
    let (layout, feat) = features(dir.path());
    let first = |seed: u64, name: &str| {
        let s = cmd_train(
            &feat,
            Some(&layout.xvector_dir),
            &dir.path().join(name),
            &tiny_config(1, seed),
            |_| {},
        )
        .unwrap();
        s.reports[0].clone()
    };
    let a = first(1, "a");
    let again = first(1, "again");
    let b = first(2, "b");
    assert_eq!(a.mel_l1, again.mel_l1);
    assert_eq!(a.total_gen, again.total_gen);
    assert_ne!(a.total_gen, b.total_gen);
}

#[test]
fn resume_continues_the_lr_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let (layout, feat) = features(dir.path());
    let run = dir.path().join("run");
    let short = cmd_train(
        &feat,
        Some(&layout.xvector_dir),
        &run,
        &tiny_config(2, 3),
        |_| {},
    )
    .unwrap();
    let spe = short.reports.len() as u64 / 2;
    let long = cmd_train(
        &feat,
        Some(&layout.xvector_dir),
        &run,
        &tiny_config(4, 3),
        |_| {},
    )
    .unwrap();
    assert_eq!(long.reports.len(), short.reports.len());
    assert_eq!(long.reports[0].step, 2 * spe);
    let log = read_loss_log(&run.join("losses.csv")).unwrap();
    assert_eq!(log.len() as u64, 4 * spe);
    for (i, r) in log.iter().enumerate() {
        assert_eq!(r.step, i as u64);
        let expect = 2e-4 * 0.999f64.powi(r.epoch as i32);
        assert!(
            (r.lr - expect).abs() <= 1e-12 * expect,
            "epoch {} lr {}",
            r.epoch,
            r.lr
        );
    }
    assert_eq!(log.last().unwrap().epoch, 3);
}

#[test]
fn pool_built_from_xvectors_and_features() {
    let dir = tempfile::tempdir().unwrap();
    let (layout, feat) = features(dir.path());
    let pool = cmd_build_pool(
        &layout.xvector_dir,
        Some(&feat),
        &dir.path().join("pool.bin"),
    )
    .unwrap();
    assert_eq!(pool.len(), 2);
    let a = pool
        .entries
        .iter()
        .find(|e| e.speaker_id == "spk_a")
        .unwrap();
    let b = pool
        .entries
        .iter()
        .find(|e| e.speaker_id == "spk_b")
        .unwrap();
    assert!(a.mean_log_f0.unwrap() < b.mean_log_f0.unwrap());
}

#[test]
fn systems_dispatch_and_rerun_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (layout, feat) = features(dir.path());
    let cfg = tiny_config(1, 5);
    let run = dir.path().join("run");
    let ckpt = cmd_train(&feat, Some(&layout.xvector_dir), &run, &cfg, |_| {})
        .unwrap()
        .final_checkpoint;
    let mut by_system = Vec::new();
    for system in 1..=3u8 {
        let out = dir.path().join(format!("anon{system}"));
        let s = cmd_anonymize(
            &feat,
            &layout.xvector_dir,
            &layout.pool_file,
            &ckpt,
            system,
            &out,
            &cfg,
        )
        .unwrap();
        assert_eq!(s.records.len(), 4);
        assert!(s.skipped.is_empty());
        let side: AnonymizationRecord =
            serde_json::from_str(&fs::read_to_string(out.join("b_01.json")).unwrap()).unwrap();
        assert_eq!(side.system, system);
        let first = fs::read(out.join("b_01.wav")).unwrap();
        cmd_anonymize(
            &feat,
            &layout.xvector_dir,
            &layout.pool_file,
            &ckpt,
            system,
            &out,
            &cfg,
        )
        .unwrap();
        assert_eq!(fs::read(out.join("b_01.wav")).unwrap(), first);
        by_system.push(side);
    }
    assert!(by_system[0].alpha.is_none() && by_system[0].target_log_f0.is_none());
    assert!(by_system[1].alpha.is_some());
    assert!(by_system[2].target_log_f0.is_some());
    // Same seed, same utterance: the pseudo-speaker does not depend on the F0 strategy.
    assert_eq!(
        by_system[0].pseudo_xvector_sha256,
        by_system[2].pseudo_xvector_sha256
    );
}

#[test]
fn speaker_mean_reference_uses_the_speaker_average() {
    use vqanon::anonymizer::DistanceReference;
    use vqanon::artifacts::{read_xvector, write_xvector, xvector_path};

    let dir = tempfile::tempdir().unwrap();
    let (layout, feat) = features(dir.path());
    let path = xvector_path(&layout.xvector_dir, "a_00");
    let mut xv = read_xvector(&path).unwrap();
    xv.values.iter_mut().step_by(2).for_each(|v| *v = -*v);
    write_xvector(&path, &xv).unwrap();

    let mut cfg = tiny_config(1, 5);
    let ckpt = cmd_train(
        &feat,
        Some(&layout.xvector_dir),
        &dir.path().join("run"),
        &cfg,
        |_| {},
    )
    .unwrap()
    .final_checkpoint;
    let mut far = Vec::new();
    for (name, reference) in [
        ("utt", DistanceReference::Utterance),
        ("spk", DistanceReference::SpeakerMean),
    ] {
        cfg.anonymizer.distance_reference = reference;
        let out = dir.path().join(name);
        let s = cmd_anonymize(
            &feat,
            &layout.xvector_dir,
            &layout.pool_file,
            &ckpt,
            1,
            &out,
            &cfg,
        )
        .unwrap();
        let pick = |u: &str| {
            s.records
                .iter()
                .find(|r| r.utterance_id == u)
                .unwrap()
                .pseudo_xvector_sha256
                .clone()
        };
        far.push((pick("a_00"), pick("a_01")));
    }
    // The speaker mean differs from either utterance vector, so both selections move.
    assert_ne!(far[0].0, far[1].0);
    assert_ne!(far[0].1, far[1].1);
}
