//! End-to-end commands: feature extraction, pool building, training,
//! anonymized resynthesis and evaluation. Each writes its effective config
//! next to its outputs and is byte-deterministic for unchanged inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anonymizer::{
    build_speaker_pool, f0_model_input, select_pseudo_xvector, speaker_log_f0_means, stub_xvector,
    DistanceReference, F0Strategy, SpeakerPool, XVector,
};
use crate::artifacts::{
    discover_wavs, load_feature_dir, load_xvector_dir, read_manifest, read_pool, write_manifest,
    write_pool, FeatureCache, ManifestRow, FEATURE_EXT,
};
use crate::audio::{write_pcm16, AudioClip};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    compute_uar, eer_report, load_emotion, load_trials, render_results_table, EerReport,
    MetricColumn, SystemResult,
};
use crate::features::{extract_all, normalize_energy_mean, MelAnalyzer};
use crate::training::{latest_checkpoint, load_model, LossReport, Trainer, TrainingItem};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub item: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturesSummary {
    pub rows: Vec<ManifestRow>,
    pub skipped: Vec<Skipped>,
}

/// One feature cache per readable WAV under `input_dir`, plus the manifest.
/// Unreadable files are logged and listed in the summary.
pub fn cmd_features(
    input_dir: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<FeaturesSummary> {
    let wavs = discover_wavs(input_dir)?;
    if wavs.is_empty() {
        return Err(Error::NoInputAudio(input_dir.to_path_buf()));
    }
    create_dir(out_dir)?;
    let analyzer = MelAnalyzer::new(&cfg.features);
    let results: Vec<_> = wavs
        .par_iter()
        .map(|(utt, spk, path)| {
            let file = format!("{utt}.{FEATURE_EXT}");
            let out = AudioClip::read_wav(path, utt.as_str(), spk.as_str()).and_then(|clip| {
                let features = extract_all(&analyzer, &clip)?;
                let cache = FeatureCache {
                    features,
                    samples: clip.samples,
                };
                cache.write(&out_dir.join(&file))?;
                Ok(ManifestRow {
                    utterance_id: utt.clone(),
                    speaker_id: spk.clone(),
                    frames: cache.features.n_frames(),
                    file,
                })
            });
            (path, out)
        })
        .collect();
    let mut summary = FeaturesSummary {
        rows: Vec::new(),
        skipped: Vec::new(),
    };
    for (path, r) in results {
        match r {
            Ok(row) => summary.rows.push(row),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                summary.skipped.push(Skipped {
                    item: path.display().to_string(),
                    reason: e.to_string(),
                });
            }
        }
    }
    write_manifest(out_dir, &summary.rows)?;
    cfg.echo(out_dir)?;
    Ok(summary)
}

/// Speaker pool from a directory of x-vectors; mean log-F0 per speaker comes
/// from `feature_dir` when given.
pub fn cmd_build_pool(
    xvector_dir: &Path,
    feature_dir: Option<&Path>,
    out_file: &Path,
) -> Result<SpeakerPool> {
    let xvs: Vec<XVector> = load_xvector_dir(xvector_dir)?.into_values().collect();
    let f0_means = match feature_dir {
        Some(dir) => {
            let caches = load_feature_dir(dir)?;
            speaker_log_f0_means(
                caches
                    .iter()
                    .map(|c| (c.features.speaker_id.as_str(), &c.features.prosody)),
            )
        }
        None => BTreeMap::new(),
    };
    let pool = build_speaker_pool(&xvs, &f0_means)?;
    if let Some(parent) = out_file.parent() {
        create_dir(parent)?;
    }
    write_pool(out_file, &pool)?;
    Ok(pool)
}

/// Up to `limit` rows taken round-robin across speakers (speakers in id
/// order, each speaker's rows in manifest order).
pub fn round_robin_subset(rows: &[ManifestRow], limit: Option<usize>) -> Vec<ManifestRow> {
    let Some(limit) = limit else {
        return rows.to_vec();
    };
    let mut by_speaker: BTreeMap<&str, Vec<&ManifestRow>> = BTreeMap::new();
    for r in rows {
        by_speaker.entry(&r.speaker_id).or_default().push(r);
    }
    let mut out = Vec::new();
    let deepest = by_speaker.values().map(Vec::len).max().unwrap_or(0);
    'outer: for i in 0..deepest {
        for list in by_speaker.values() {
            if out.len() == limit {
                break 'outer;
            }
            if let Some(r) = list.get(i) {
                out.push((*r).clone());
            }
        }
    }
    out
}

/// Training items for the configured subset of `feature_dir`. Utterances
/// without an x-vector in `xvector_dir` (or all of them, when it is absent)
/// are conditioned on a stub speaker embedding.
pub fn training_items(
    feature_dir: &Path,
    xvector_dir: Option<&Path>,
    cfg: &PipelineConfig,
) -> Result<Vec<TrainingItem>> {
    let rows = round_robin_subset(&read_manifest(feature_dir)?, cfg.paths.max_train_utterances);
    if rows.is_empty() {
        return Err(Error::Invalid(format!(
            "no features listed in {}",
            feature_dir.display()
        )));
    }
    let xvs = match xvector_dir {
        Some(d) => load_xvector_dir(d)?,
        None => BTreeMap::new(),
    };
    rows.iter()
        .map(|row| {
            let cache = FeatureCache::read(&feature_dir.join(&row.file))?;
            let xv = match xvs.get(&row.utterance_id) {
                Some(xv) => xv.values.clone(),
                None => {
                    log::warn!("{}: no x-vector, using a stub", row.utterance_id);
                    stub_xvector(
                        &row.speaker_id,
                        &row.utterance_id,
                        cfg.generator.global_cond_dim,
                    )
                    .values
                }
            };
            TrainingItem::new(&cache.clip()?, &cache.features, xv)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub reports: Vec<LossReport>,
    pub utterances: Vec<String>,
    pub final_checkpoint: PathBuf,
}

/// Trains (or resumes) into `run_dir`.
pub fn cmd_train(
    feature_dir: &Path,
    xvector_dir: Option<&Path>,
    run_dir: &Path,
    cfg: &PipelineConfig,
    on_report: impl FnMut(&LossReport),
) -> Result<TrainSummary> {
    let items = training_items(feature_dir, xvector_dir, cfg)?;
    let utterances = items.iter().map(|i| i.utterance_id.clone()).collect();
    cfg.echo(run_dir)?;
    let mut trainer = Trainer::new(&cfg.model(), &cfg.training, &cfg.features, items)?;
    let reports = trainer.run(run_dir, on_report)?;
    let final_checkpoint = latest_checkpoint(&run_dir.join("checkpoints"))?
        .ok_or_else(|| Error::Invalid("training wrote no checkpoint".into()))?;
    Ok(TrainSummary {
        run_dir: run_dir.to_path_buf(),
        reports,
        utterances,
        final_checkpoint,
    })
}

/// Per-utterance record written next to each anonymized WAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnonymizationRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub system: u8,
    pub f0_strategy: F0Strategy,
    pub alpha: Option<f64>,
    pub target_log_f0: Option<f64>,
    pub selected_speaker_ids: Vec<String>,
    pub pseudo_xvector_sha256: String,
    pub frames: usize,
    pub samples: usize,
}

/// SHA-256 of the little-endian bytes of `v`.
pub fn vector_hash(v: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in v {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct AnonymizeSummary {
    pub records: Vec<AnonymizationRecord>,
    pub skipped: Vec<Skipped>,
}

/// A checkpoint file, or the newest checkpoint of a run directory.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.is_dir() {
        for dir in [path.join("checkpoints"), path.to_path_buf()] {
            if let Some(p) = latest_checkpoint(&dir)? {
                return Ok(p);
            }
        }
        return Err(Error::Invalid(format!(
            "no checkpoint under {}",
            path.display()
        )));
    }
    Ok(path.to_path_buf())
}

/// Resynthesizes every utterance of `feature_dir` with a pseudo-speaker and
/// the F0 treatment of `system`.
pub fn cmd_anonymize(
    feature_dir: &Path,
    xvector_dir: &Path,
    pool_file: &Path,
    checkpoint: &Path,
    system: u8,
    out_dir: &Path,
    cfg: &PipelineConfig,
) -> Result<AnonymizeSummary> {
    let strategy = F0Strategy::from_system(system)
        .ok_or_else(|| Error::Config(format!("system must be 1, 2 or 3, got {system}")))?;
    let mut acfg = cfg.anonymizer.clone();
    acfg.f0_strategy = strategy;
    acfg.validate()?;
    let rows = read_manifest(feature_dir)?;
    let xvs = load_xvector_dir(xvector_dir)?;
    let pool = read_pool(pool_file)?;
    let model = load_model(&resolve_checkpoint(checkpoint)?)?;
    if model.cfg.generator.global_cond_dim != pool.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.cfg.generator.global_cond_dim,
            got: pool.dim(),
        });
    }
    let speaker_means = match acfg.distance_reference {
        DistanceReference::SpeakerMean if !xvs.is_empty() => Some(build_speaker_pool(
            &xvs.values().cloned().collect::<Vec<_>>(),
            &BTreeMap::new(),
        )?),
        _ => None,
    };
    create_dir(out_dir)?;
    let results: Vec<_> = rows
        .par_iter()
        .map(|row| -> Result<Option<AnonymizationRecord>> {
            let Some(xv) = xvs.get(&row.utterance_id) else {
                return Ok(None);
            };
            let cache = FeatureCache::read(&feature_dir.join(&row.file))?;
            let f = &cache.features;
            let source = match &speaker_means {
                Some(means) => {
                    &means
                        .get(&xv.speaker_id)
                        .expect("every x-vector speaker has a mean")
                        .mean_xvector
                }
                None => &xv.values,
            };
            let sel = select_pseudo_xvector(source, &f.utterance_id, &pool, &acfg)?;
            let f0 = f0_model_input(
                &f.prosody,
                strategy,
                &acfg,
                &f.utterance_id,
                &sel.selected_speaker_ids,
                &pool,
            )?;
            let energy = normalize_energy_mean(&f.prosody.energy)?;
            let wave = model.infer(
                &f.mel.frames,
                f.n_frames(),
                &f0.values,
                &energy,
                &sel.pseudo,
            )?;
            if let Some(i) = wave.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: 0,
                    detail: format!("{}: non-finite output sample {i}", f.utterance_id),
                });
            }
            write_pcm16(&out_dir.join(format!("{}.wav", f.utterance_id)), &wave)?;
            let record = AnonymizationRecord {
                utterance_id: f.utterance_id.clone(),
                speaker_id: f.speaker_id.clone(),
                system,
                f0_strategy: strategy,
                alpha: f0.alpha,
                target_log_f0: f0.target_log_f0,
                selected_speaker_ids: sel.selected_speaker_ids,
                pseudo_xvector_sha256: vector_hash(&sel.pseudo),
                frames: f.n_frames(),
                samples: wave.len(),
            };
            let path = out_dir.join(format!("{}.json", f.utterance_id));
            let mut text = serde_json::to_string_pretty(&record)?;
            text.push('\n');
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            Ok(Some(record))
        })
        .collect();
    let mut summary = AnonymizeSummary {
        records: Vec::new(),
        skipped: Vec::new(),
    };
    for (row, r) in rows.iter().zip(results) {
        match r? {
            Some(rec) => summary.records.push(rec),
            None => {
                log::warn!("skipping {}: no x-vector", row.utterance_id);
                summary.skipped.push(Skipped {
                    item: row.utterance_id.clone(),
                    reason: "no x-vector".into(),
                });
            }
        }
    }
    cfg.echo(out_dir)?;
    Ok(summary)
}

/// Score files for one anonymization system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemInputs {
    pub name: String,
    pub trials: PathBuf,
    pub emotion: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SystemMetrics {
    pub system: String,
    pub eer: EerReport,
    /// Gender-averaged EER when trials carry gender tags, else the pooled EER.
    pub eer_average: f64,
    pub uar: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub systems: Vec<SystemMetrics>,
    pub table: String,
    #[serde(skip)]
    pub csv: String,
}

/// EER (per gender and averaged) and UAR for each system, plus a ranked table.
/// Higher EER ranks first: it means the verifier is fooled more often.
pub fn cmd_evaluate(inputs: &[SystemInputs], out_dir: Option<&Path>) -> Result<EvaluationReport> {
    if inputs.is_empty() {
        return Err(Error::Invalid("no trial files given".into()));
    }
    let mut systems = Vec::new();
    for inp in inputs {
        let eer = eer_report(&load_trials(&inp.trials)?)?;
        let uar = match &inp.emotion {
            Some(p) => Some(compute_uar(&load_emotion(p)?)?),
            None => None,
        };
        systems.push(SystemMetrics {
            system: inp.name.clone(),
            eer_average: eer.gender_average.unwrap_or(eer.overall.eer_percent),
            eer,
            uar,
        });
    }
    let genders: BTreeSet<String> = systems
        .iter()
        .flat_map(|s| s.eer.per_gender.keys().cloned())
        .collect();
    let mut columns: Vec<MetricColumn> = genders
        .iter()
        .map(|g| MetricColumn::new(&format!("EER-{g}"), true))
        .collect();
    columns.push(MetricColumn::new(
        if genders.is_empty() { "EER" } else { "EER-avg" },
        true,
    ));
    columns.push(MetricColumn::new("UAR", true));
    let results: Vec<SystemResult> = systems
        .iter()
        .map(|s| {
            let mut values: BTreeMap<String, Option<f64>> = genders
                .iter()
                .map(|g| {
                    (
                        format!("EER-{g}"),
                        s.eer.per_gender.get(g).map(|r| r.eer_percent),
                    )
                })
                .collect();
            values.insert(columns[columns.len() - 2].name.clone(), Some(s.eer_average));
            values.insert("UAR".into(), s.uar);
            SystemResult {
                system: s.system.clone(),
                values,
            }
        })
        .collect();
    let rendered = render_results_table(&results, &columns)?;
    let report = EvaluationReport {
        systems,
        table: rendered.text,
        csv: rendered.csv,
    };
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        let write = |name: &str, text: &str| -> Result<()> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(
            "metrics.json",
            &(serde_json::to_string_pretty(&report)? + "\n"),
        )?;
        write("results.txt", &report.table)?;
        write("results.csv", &report.csv)?;
    }
    Ok(report)
}
