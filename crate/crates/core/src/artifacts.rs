//! On-disk pipeline artifacts: per-utterance feature caches and their
//! manifest, x-vector files and the speaker pool. All binary files use the
//! [`Archive`](crate::io::Archive) container and are byte-deterministic.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::anonymizer::{PoolEntry, SpeakerPool, XVector, XVectorSource};
use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::features::{MelSpectrogram, ProsodyTrack, UtteranceFeatures};
use crate::io::{meta_str, meta_u64, Archive, ArrayData};

pub const FEATURE_EXT: &str = "feat";
pub const XVECTOR_EXT: &str = "xvec";
pub const MANIFEST: &str = "manifest.csv";

/// Features plus the trimmed waveform they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub features: UtteranceFeatures,
    pub samples: Vec<f32>,
}

impl FeatureCache {
    pub fn clip(&self) -> Result<AudioClip> {
        AudioClip::new(
            self.samples.clone(),
            &self.features.utterance_id,
            &self.features.speaker_id,
        )
    }

    pub fn to_archive(&self) -> Archive {
        let f = &self.features;
        let t = f.n_frames();
        let mut a = Archive::new(
            "features",
            json!({
                "utterance_id": f.utterance_id,
                "speaker_id": f.speaker_id,
                "frames": t,
                "n_mels": f.mel.n_mels,
                "sample_rate": SAMPLE_RATE,
            }),
        );
        a.push(
            "mel",
            &[t, f.mel.n_mels],
            ArrayData::F64(f.mel.frames.clone()),
        );
        a.push("f0_hz", &[t], ArrayData::F64(f.prosody.f0_hz.clone()));
        a.push(
            "voiced",
            &[t],
            ArrayData::U8(f.prosody.voiced.iter().map(|&v| v as u8).collect()),
        );
        a.push("energy", &[t], ArrayData::F64(f.prosody.energy.clone()));
        a.push(
            "samples",
            &[self.samples.len()],
            ArrayData::F32(self.samples.clone()),
        );
        a
    }

    pub fn from_archive(a: &Archive, origin: &str) -> Result<Self> {
        a.expect_kind("features", origin)?;
        let frames = meta_u64(&a.meta, "frames", origin)? as usize;
        let n_mels = meta_u64(&a.meta, "n_mels", origin)? as usize;
        let mel = MelSpectrogram::new(a.f64s("mel", origin)?.1.to_vec(), frames, n_mels)?;
        let f0_hz = a.f64s("f0_hz", origin)?.1.to_vec();
        let voiced: Vec<bool> = a.u8s("voiced", origin)?.iter().map(|&v| v != 0).collect();
        let energy = a.f64s("energy", origin)?.1.to_vec();
        if f0_hz.len() != frames || voiced.len() != frames || energy.len() != frames {
            return Err(Error::format(
                origin,
                "prosody arrays do not match the frame count",
            ));
        }
        Ok(Self {
            features: UtteranceFeatures {
                utterance_id: meta_str(&a.meta, "utterance_id", origin)?,
                speaker_id: meta_str(&a.meta, "speaker_id", origin)?,
                mel,
                prosody: ProsodyTrack {
                    f0_hz,
                    voiced,
                    energy,
                },
            },
            samples: a.f32s("samples", origin)?.1.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, &path.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub utterance_id: String,
    pub speaker_id: String,
    pub frames: usize,
    pub file: String,
}

pub fn write_manifest(dir: &Path, rows: &[ManifestRow]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "no feature manifest at {}",
            path.display()
        )));
    }
    let mut r = csv::Reader::from_path(&path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Every cache listed in the manifest of `dir`, in manifest order.
pub fn load_feature_dir(dir: &Path) -> Result<Vec<FeatureCache>> {
    read_manifest(dir)?
        .iter()
        .map(|row| FeatureCache::read(&dir.join(&row.file)))
        .collect()
}

pub fn xvector_to_archive(xv: &XVector) -> Archive {
    let mut a = Archive::new(
        "xvector",
        json!({
            "utterance_id": xv.utterance_id,
            "speaker_id": xv.speaker_id,
            "source": xv.source,
        }),
    );
    a.push(
        "values",
        &[xv.values.len()],
        ArrayData::F64(xv.values.clone()),
    );
    a
}

pub fn write_xvector(path: &Path, xv: &XVector) -> Result<()> {
    xvector_to_archive(xv).write(path)
}

pub fn read_xvector(path: &Path) -> Result<XVector> {
    let origin = path.display().to_string();
    let a = Archive::read(path)?;
    a.expect_kind("xvector", &origin)?;
    let source: XVectorSource = serde_json::from_value(a.meta["source"].clone())
        .map_err(|e| Error::format(&origin, format!("source: {e}")))?;
    let xv = XVector {
        values: a.f64s("values", &origin)?.1.to_vec(),
        speaker_id: meta_str(&a.meta, "speaker_id", &origin)?,
        utterance_id: meta_str(&a.meta, "utterance_id", &origin)?,
        source,
    };
    xv.validate()?;
    Ok(xv)
}

pub fn xvector_path(dir: &Path, utterance_id: &str) -> PathBuf {
    dir.join(format!("{utterance_id}.{XVECTOR_EXT}"))
}

/// All `*.xvec` files in `dir`, keyed by utterance id.
pub fn load_xvector_dir(dir: &Path) -> Result<BTreeMap<String, XVector>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(XVECTOR_EXT) {
            let xv = read_xvector(&path)?;
            out.insert(xv.utterance_id.clone(), xv);
        }
    }
    Ok(out)
}

pub fn write_pool(path: &Path, pool: &SpeakerPool) -> Result<()> {
    let dim = pool.dim();
    let ids: Vec<&str> = pool.entries.iter().map(|e| e.speaker_id.as_str()).collect();
    let mut a = Archive::new("speaker-pool", json!({ "speakers": ids, "dim": dim }));
    let flat: Vec<f64> = pool
        .entries
        .iter()
        .flat_map(|e| e.mean_xvector.iter().copied())
        .collect();
    a.push("mean_xvectors", &[pool.len(), dim], ArrayData::F64(flat));
    a.push(
        "mean_log_f0",
        &[pool.len()],
        ArrayData::F64(
            pool.entries
                .iter()
                .map(|e| e.mean_log_f0.unwrap_or(0.0))
                .collect(),
        ),
    );
    a.push(
        "has_log_f0",
        &[pool.len()],
        ArrayData::U8(
            pool.entries
                .iter()
                .map(|e| e.mean_log_f0.is_some() as u8)
                .collect(),
        ),
    );
    a.write(path)
}

pub fn read_pool(path: &Path) -> Result<SpeakerPool> {
    let origin = path.display().to_string();
    let a = Archive::read(path)?;
    a.expect_kind("speaker-pool", &origin)?;
    let ids: Vec<String> = serde_json::from_value(a.meta["speakers"].clone())
        .map_err(|e| Error::format(&origin, format!("speakers: {e}")))?;
    let (shape, flat) = a.f64s("mean_xvectors", &origin)?;
    let f0 = a.f64s("mean_log_f0", &origin)?.1;
    let has = a.u8s("has_log_f0", &origin)?;
    if shape.len() != 2 || shape[0] != ids.len() || f0.len() != ids.len() || has.len() != ids.len()
    {
        return Err(Error::format(
            &origin,
            "pool arrays disagree on the speaker count",
        ));
    }
    let dim = shape[1];
    let entries = ids
        .into_iter()
        .enumerate()
        .map(|(i, speaker_id)| PoolEntry {
            speaker_id,
            mean_xvector: flat[i * dim..(i + 1) * dim].to_vec(),
            mean_log_f0: (has[i] != 0).then_some(f0[i]),
        })
        .collect::<Vec<_>>();
    if entries
        .windows(2)
        .any(|w| w[0].speaker_id >= w[1].speaker_id)
    {
        return Err(Error::format(
            &origin,
            "pool speakers must be sorted and unique",
        ));
    }
    Ok(SpeakerPool { entries })
}

/// WAV files under `dir` as `(utterance_id, speaker_id, path)`, sorted. Files
/// in a sub-directory take its name as speaker id; top-level files use
/// `unknown`.
pub fn discover_wavs(dir: &Path) -> Result<Vec<(String, String, PathBuf)>> {
    fn walk(
        dir: &Path,
        speaker: Option<&str>,
        out: &mut Vec<(String, String, PathBuf)>,
    ) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for path in entries {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default()
                .to_string();
            if path.is_dir() {
                if speaker.is_none() {
                    walk(&path, Some(&name), out)?;
                }
            } else if path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
            {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                out.push((stem, speaker.unwrap_or("unknown").to_string(), path));
            }
        }
        Ok(())
    }
    if !dir.is_dir() {
        return Err(Error::NoInputAudio(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    walk(dir, None, &mut out)?;
    out.sort();
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Invalid(format!("duplicate utterance id {}", w[0].0)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anonymizer::stub_xvector;
    use crate::features::{extract_all, FeatureConfig, MelAnalyzer};

    fn cache() -> FeatureCache {
        let samples: Vec<f32> = (0..1600).map(|i| 0.3 * (i as f32 * 0.06).sin()).collect();
        let clip = AudioClip::new(samples.clone(), "u1", "s1").unwrap();
        let features = extract_all(&MelAnalyzer::new(&FeatureConfig::default()), &clip).unwrap();
        FeatureCache { features, samples }
    }

    #[test]
    fn feature_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u1.feat");
        let c = cache();
        c.write(&p).unwrap();
        assert_eq!(FeatureCache::read(&p).unwrap(), c);
        let first = std::fs::read(&p).unwrap();
        c.write(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ManifestRow {
            utterance_id: "u1".into(),
            speaker_id: "s1".into(),
            frames: 10,
            file: "u1.feat".into(),
        }];
        write_manifest(dir.path(), &rows).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), rows);
    }

    #[test]
    fn xvector_and_pool_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let xv = stub_xvector("spk", "utt", 192);
        write_xvector(&xvector_path(dir.path(), "utt"), &xv).unwrap();
        let all = load_xvector_dir(dir.path()).unwrap();
        assert_eq!(all["utt"], xv);

        let pool = SpeakerPool {
            entries: vec![
                PoolEntry {
                    speaker_id: "a".into(),
                    mean_xvector: vec![0.5, -1.0],
                    mean_log_f0: Some(4.8),
                },
                PoolEntry {
                    speaker_id: "b".into(),
                    mean_xvector: vec![1e-300, 2.0],
                    mean_log_f0: None,
                },
            ],
        };
        let p = dir.path().join("pool.bin");
        write_pool(&p, &pool).unwrap();
        assert_eq!(read_pool(&p).unwrap(), pool);
    }

    #[test]
    fn discovery_uses_directories_as_speakers() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("spkA")).unwrap();
        for p in ["spkA/x.wav", "top.WAV", "notes.txt"] {
            std::fs::write(dir.path().join(p), b"").unwrap();
        }
        let found = discover_wavs(dir.path()).unwrap();
        let ids: Vec<(&str, &str)> = found
            .iter()
            .map(|(u, s, _)| (u.as_str(), s.as_str()))
            .collect();
        assert_eq!(ids, vec![("top", "unknown"), ("x", "spkA")]);
        assert!(matches!(
            discover_wavs(&dir.path().join("missing")),
            Err(Error::NoInputAudio(_))
        ));
    }
}
