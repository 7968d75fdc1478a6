//! Pseudo-speaker selection from a pool of distant speakers, and the three
//! F0 treatments applied before resynthesis.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{normalize_f0_log, LogF0Stats, ProsodyTrack};
use crate::rng::derive_rng;

pub const XVECTOR_DIM: usize = 192;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XVectorSource {
    Extracted,
    Stub,
    Ingested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XVector {
    pub values: Vec<f64>,
    pub speaker_id: String,
    pub utterance_id: String,
    pub source: XVectorSource,
}

impl XVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "x-vector for {} is empty or non-finite",
                self.utterance_id
            )));
        }
        Ok(())
    }
}

/// Deterministic unit-norm stand-in for a speaker embedding extractor.
pub fn stub_xvector(speaker_id: &str, utterance_id: &str, dim: usize) -> XVector {
    let seed: [u8; 32] = Sha256::digest(format!("stub-xvector:{speaker_id}")).into();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    XVector {
        values: raw.iter().map(|v| v / norm).collect(),
        speaker_id: speaker_id.to_string(),
        utterance_id: utterance_id.to_string(),
        source: XVectorSource::Stub,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub speaker_id: String,
    pub mean_xvector: Vec<f64>,
    pub mean_log_f0: Option<f64>,
}

/// Per-speaker mean embeddings, sorted by speaker id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerPool {
    pub entries: Vec<PoolEntry>,
}

impl SpeakerPool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.mean_xvector.len())
    }

    pub fn get(&self, speaker_id: &str) -> Option<&PoolEntry> {
        self.entries
            .binary_search_by(|e| e.speaker_id.as_str().cmp(speaker_id))
            .ok()
            .map(|i| &self.entries[i])
    }
}

pub fn build_speaker_pool(
    xvectors: &[XVector],
    f0_means: &BTreeMap<String, f64>,
) -> Result<SpeakerPool> {
    let first = xvectors
        .first()
        .ok_or_else(|| Error::Invalid("no x-vectors to build a pool from".into()))?;
    let dim = first.dim();
    let mut sums: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for xv in xvectors {
        xv.validate()?;
        if xv.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: xv.dim(),
            });
        }
        let (acc, n) = sums
            .entry(xv.speaker_id.as_str())
            .or_insert_with(|| (vec![0.0; dim], 0));
        for (a, v) in acc.iter_mut().zip(&xv.values) {
            *a += v;
        }
        *n += 1;
    }
    let entries = sums
        .into_iter()
        .map(|(spk, (acc, n))| PoolEntry {
            speaker_id: spk.to_string(),
            mean_xvector: acc.iter().map(|v| v / n as f64).collect(),
            mean_log_f0: f0_means.get(spk).copied(),
        })
        .collect();
    Ok(SpeakerPool { entries })
}

/// Mean log-F0 over the voiced frames of all of each speaker's tracks.
pub fn speaker_log_f0_means<'a>(
    tracks: impl IntoIterator<Item = (&'a str, &'a ProsodyTrack)>,
) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (spk, track) in tracks {
        let e = acc.entry(spk.to_string()).or_default();
        for (&f, &v) in track.f0_hz.iter().zip(&track.voiced) {
            if v {
                e.0 += f.ln();
                e.1 += 1;
            }
        }
    }
    acc.into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F0Strategy {
    LogNorm,
    RandomScale,
    DistantMean,
}

impl F0Strategy {
    pub fn from_system(system: u8) -> Option<Self> {
        match system {
            1 => Some(Self::LogNorm),
            2 => Some(Self::RandomScale),
            3 => Some(Self::DistantMean),
            _ => None,
        }
    }

    pub fn system(self) -> u8 {
        match self {
            Self::LogNorm => 1,
            Self::RandomScale => 2,
            Self::DistantMean => 3,
        }
    }
}

/// Which embedding distances to pool speakers are measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceReference {
    Utterance,
    SpeakerMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnonymizationConfig {
    pub n_far: usize,
    pub n_select: usize,
    pub f0_strategy: F0Strategy,
    pub scale_low: f64,
    pub scale_high: f64,
    pub rng_seed: u64,
    pub distance_reference: DistanceReference,
}

impl Default for AnonymizationConfig {
    fn default() -> Self {
        Self {
            n_far: 200,
            n_select: 100,
            f0_strategy: F0Strategy::LogNorm,
            scale_low: 0.8,
            scale_high: 1.2,
            rng_seed: 0,
            distance_reference: DistanceReference::Utterance,
        }
    }
}

impl AnonymizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_select == 0 || self.n_select > self.n_far {
            return Err(Error::Config("need 0 < n_select <= n_far".into()));
        }
        if !(self.scale_low > 0.0 && self.scale_low <= self.scale_high) {
            return Err(Error::Config("need 0 < scale_low <= scale_high".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSelection {
    pub pseudo: Vec<f64>,
    /// The `n_far` most distant speakers, farthest first.
    pub far_speaker_ids: Vec<String>,
    /// The drawn subset, in pool order.
    pub selected_speaker_ids: Vec<String>,
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Average of `n_select` speakers drawn from the `n_far` farthest pool entries.
pub fn select_pseudo_xvector(
    source: &[f64],
    utterance_id: &str,
    pool: &SpeakerPool,
    cfg: &AnonymizationConfig,
) -> Result<PseudoSelection> {
    cfg.validate()?;
    if pool.len() < cfg.n_far {
        return Err(Error::PoolExhausted {
            need: cfg.n_far,
            have: pool.len(),
        });
    }
    if source.len() != pool.dim() {
        return Err(Error::DimensionMismatch {
            expected: pool.dim(),
            got: source.len(),
        });
    }
    let dists: Vec<f64> = pool
        .entries
        .iter()
        .map(|e| euclidean(source, &e.mean_xvector))
        .collect();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    // Entries are id-sorted, so a stable sort keeps the smaller id first on ties.
    order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]));
    order.truncate(cfg.n_far);

    let mut rng = derive_rng(cfg.rng_seed, "pseudo-select", utterance_id);
    let mut picked: Vec<usize> = index::sample(&mut rng, cfg.n_far, cfg.n_select)
        .into_iter()
        .map(|i| order[i])
        .collect();
    picked.sort_unstable();

    let dim = pool.dim();
    let mut pseudo = vec![0.0; dim];
    for &i in &picked {
        for (p, v) in pseudo.iter_mut().zip(&pool.entries[i].mean_xvector) {
            *p += v;
        }
    }
    pseudo.iter_mut().for_each(|p| *p /= picked.len() as f64);
    Ok(PseudoSelection {
        pseudo,
        far_speaker_ids: order
            .iter()
            .map(|&i| pool.entries[i].speaker_id.clone())
            .collect(),
        selected_speaker_ids: picked
            .iter()
            .map(|&i| pool.entries[i].speaker_id.clone())
            .collect(),
    })
}

/// System 1: plain per-utterance log-F0 standardisation.
pub fn anonymize_f0_log_norm(track: &ProsodyTrack) -> Result<Vec<f64>> {
    normalize_f0_log(track)
}

/// The per-utterance scale factor of System 2, uniform on `[scale_low, scale_high]`.
pub fn draw_scale(cfg: &AnonymizationConfig, utterance_id: &str) -> f64 {
    let mut rng = derive_rng(cfg.rng_seed, "f0-scale", utterance_id);
    let u: f64 = rng.gen();
    cfg.scale_low + (cfg.scale_high - cfg.scale_low) * u
}

pub fn scale_track(track: &ProsodyTrack, alpha: f64) -> ProsodyTrack {
    ProsodyTrack {
        f0_hz: track
            .f0_hz
            .iter()
            .zip(&track.voiced)
            .map(|(&f, &v)| if v { f * alpha } else { 0.0 })
            .collect(),
        voiced: track.voiced.clone(),
        energy: track.energy.clone(),
    }
}

/// System 2: scale every voiced F0 value by one random factor per utterance.
pub fn anonymize_f0_random_scale(
    track: &ProsodyTrack,
    cfg: &AnonymizationConfig,
    utterance_id: &str,
) -> (ProsodyTrack, f64) {
    let alpha = draw_scale(cfg, utterance_id);
    (scale_track(track, alpha), alpha)
}

/// Mean pool log-F0 of the selected speakers.
pub fn distant_mean_log_f0(selected: &[String], pool: &SpeakerPool) -> Result<f64> {
    if selected.is_empty() {
        return Err(Error::Invalid("no selected speakers".into()));
    }
    let mut sum = 0.0;
    for spk in selected {
        let m = pool
            .get(spk)
            .and_then(|e| e.mean_log_f0)
            .ok_or_else(|| Error::PoolStatsIncomplete(spk.clone()))?;
        sum += m;
    }
    Ok(sum / selected.len() as f64)
}

/// `ln f0 - mu + target` on voiced frames, 0 elsewhere.
pub fn shift_log_f0(track: &ProsodyTrack, stats: &LogF0Stats, target: f64) -> Vec<f64> {
    track
        .f0_hz
        .iter()
        .zip(&track.voiced)
        .map(|(&f, &v)| if v { f.ln() - stats.mean + target } else { 0.0 })
        .collect()
}

/// System 3: move the utterance's log-F0 level to the selected speakers' mean
/// level, keeping its contour, then scale by the utterance statistics.
pub fn anonymize_f0_distant_mean(
    track: &ProsodyTrack,
    selected: &[String],
    pool: &SpeakerPool,
) -> Result<Vec<f64>> {
    let target = distant_mean_log_f0(selected, pool)?;
    let stats = LogF0Stats::of(track)?;
    Ok(shift_log_f0(track, &stats, target)
        .into_iter()
        .zip(&track.voiced)
        .map(|(s, &v)| if v { (s - stats.mean) / stats.std } else { 0.0 })
        .collect())
}

/// Normalised F0 fed to the prosody encoder under `strategy`. Systems 2 and 3
/// reuse the source utterance's statistics so the modification survives
/// normalisation. All-unvoiced tracks give zeros.
pub fn f0_model_input(
    track: &ProsodyTrack,
    strategy: F0Strategy,
    cfg: &AnonymizationConfig,
    utterance_id: &str,
    selected: &[String],
    pool: &SpeakerPool,
) -> Result<F0Treatment> {
    let stats = match LogF0Stats::of(track) {
        Ok(s) => s,
        Err(Error::InsufficientVoicing { .. }) => {
            return Ok(F0Treatment {
                values: vec![0.0; track.len()],
                alpha: None,
                target_log_f0: None,
            })
        }
        Err(e) => return Err(e),
    };
    Ok(match strategy {
        F0Strategy::LogNorm => F0Treatment {
            values: stats.apply(track),
            alpha: None,
            target_log_f0: None,
        },
        F0Strategy::RandomScale => {
            let (scaled, alpha) = anonymize_f0_random_scale(track, cfg, utterance_id);
            F0Treatment {
                values: stats.apply(&scaled),
                alpha: Some(alpha),
                target_log_f0: None,
            }
        }
        F0Strategy::DistantMean => F0Treatment {
            values: anonymize_f0_distant_mean(track, selected, pool)?,
            alpha: None,
            target_log_f0: Some(distant_mean_log_f0(selected, pool)?),
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct F0Treatment {
    pub values: Vec<f64>,
    pub alpha: Option<f64>,
    pub target_log_f0: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_pool(n: usize, dim: usize, seed: u64) -> SpeakerPool {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xvs: Vec<XVector> = (0..n)
            .map(|i| XVector {
                values: (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
                speaker_id: format!("spk{i:04}"),
                utterance_id: format!("u{i}"),
                source: XVectorSource::Ingested,
            })
            .collect();
        let f0: BTreeMap<String, f64> = (0..n)
            .map(|i| (format!("spk{i:04}"), 4.5 + i as f64 * 1e-3))
            .collect();
        build_speaker_pool(&xvs, &f0).unwrap()
    }

    fn xv(spk: &str, values: Vec<f64>) -> XVector {
        XVector {
            values,
            speaker_id: spk.into(),
            utterance_id: "u".into(),
            source: XVectorSource::Ingested,
        }
    }

    #[test]
    fn pool_mean_of_two_points() {
        let pool = build_speaker_pool(
            &[xv("a", vec![1.0, 0.0]), xv("a", vec![0.0, 1.0])],
            &BTreeMap::new(),
        )
        .unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.entries[0].mean_xvector, vec![0.5, 0.5]);
        assert_eq!(pool.entries[0].mean_log_f0, None);
    }

    #[test]
    fn pool_rejects_bad_input() {
        assert!(build_speaker_pool(&[], &BTreeMap::new()).is_err());
        let r = build_speaker_pool(
            &[xv("a", vec![1.0]), xv("b", vec![1.0, 2.0])],
            &BTreeMap::new(),
        );
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn pool_matches_per_speaker_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut xvs = Vec::new();
        for s in 0..50 {
            for _ in 0..3 {
                xvs.push(xv(
                    &format!("s{s}"),
                    (0..8).map(|_| StandardNormal.sample(&mut rng)).collect(),
                ));
            }
        }
        let pool = build_speaker_pool(&xvs, &BTreeMap::new()).unwrap();
        assert_eq!(pool.len(), 50);
        for e in &pool.entries {
            let mine: Vec<&XVector> = xvs
                .iter()
                .filter(|x| x.speaker_id == e.speaker_id)
                .collect();
            for j in 0..8 {
                let m = mine.iter().map(|x| x.values[j]).sum::<f64>() / mine.len() as f64;
                assert!((m - e.mean_xvector[j]).abs() < 1e-12);
            }
        }
        assert!(pool
            .entries
            .windows(2)
            .all(|w| w[0].speaker_id < w[1].speaker_id));
    }

    #[test]
    fn identical_pool_gives_that_vector() {
        let v = vec![0.3, -0.2, 0.9];
        let xvs: Vec<XVector> = (0..10).map(|i| xv(&format!("s{i}"), v.clone())).collect();
        let pool = build_speaker_pool(&xvs, &BTreeMap::new()).unwrap();
        let cfg = AnonymizationConfig {
            n_far: 8,
            n_select: 5,
            ..Default::default()
        };
        let sel = select_pseudo_xvector(&[1.0, 1.0, 1.0], "u1", &pool, &cfg).unwrap();
        for (a, b) in sel.pseudo.iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn whole_pool_selection_is_pool_mean() {
        let pool = random_pool(30, 6, 4);
        let cfg = AnonymizationConfig {
            n_far: 30,
            n_select: 30,
            ..Default::default()
        };
        let sel = select_pseudo_xvector(&[0.0; 6], "u", &pool, &cfg).unwrap();
        for j in 0..6 {
            let m = pool.entries.iter().map(|e| e.mean_xvector[j]).sum::<f64>() / 30.0;
            assert!((m - sel.pseudo[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_errors() {
        let pool = random_pool(10, 4, 5);
        let cfg = AnonymizationConfig::default();
        assert!(matches!(
            select_pseudo_xvector(&[0.0; 4], "u", &pool, &cfg),
            Err(Error::PoolExhausted {
                need: 200,
                have: 10
            })
        ));
        let cfg = AnonymizationConfig {
            n_far: 5,
            n_select: 2,
            ..Default::default()
        };
        assert!(matches!(
            select_pseudo_xvector(&[0.0; 3], "u", &pool, &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn distance_ties_keep_smaller_id() {
        let xvs: Vec<XVector> = ["d", "c", "b", "a"]
            .iter()
            .map(|s| xv(s, vec![1.0]))
            .collect();
        let pool = build_speaker_pool(&xvs, &BTreeMap::new()).unwrap();
        let cfg = AnonymizationConfig {
            n_far: 2,
            n_select: 2,
            ..Default::default()
        };
        let sel = select_pseudo_xvector(&[0.0], "u", &pool, &cfg).unwrap();
        assert_eq!(sel.far_speaker_ids, vec!["a", "b"]);
    }

    #[test]
    fn stub_is_unit_norm_and_speaker_keyed() {
        let a = stub_xvector("spk1", "u1", XVECTOR_DIM);
        let b = stub_xvector("spk1", "u2", XVECTOR_DIM);
        let c = stub_xvector("spk2", "u1", XVECTOR_DIM);
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        let norm: f64 = a.values.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn system3_examples() {
        let track = ProsodyTrack::from_f0(vec![100.0, 0.0, 200.0]);
        let stats = LogF0Stats::of(&track).unwrap();
        let shifted = shift_log_f0(&track, &stats, 150f64.ln());
        assert!(((shifted[0] + shifted[2]) / 2.0 - 150f64.ln()).abs() < 1e-12);
        assert_eq!(shifted[1], 0.0);

        let mu = stats.mean;
        let pool = SpeakerPool {
            entries: vec![
                PoolEntry {
                    speaker_id: "a".into(),
                    mean_xvector: vec![0.0],
                    mean_log_f0: Some(mu),
                },
                PoolEntry {
                    speaker_id: "b".into(),
                    mean_xvector: vec![0.0],
                    mean_log_f0: Some(mu),
                },
                PoolEntry {
                    speaker_id: "c".into(),
                    mean_xvector: vec![0.0],
                    mean_log_f0: None,
                },
            ],
        };
        let sel = vec!["a".to_string(), "b".to_string()];
        let s3 = anonymize_f0_distant_mean(&track, &sel, &pool).unwrap();
        let s1 = anonymize_f0_log_norm(&track).unwrap();
        for (a, b) in s3.iter().zip(&s1) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = vec!["a".to_string(), "c".to_string()];
        assert!(matches!(
            anonymize_f0_distant_mean(&track, &bad, &pool),
            Err(Error::PoolStatsIncomplete(s)) if s == "c"
        ));
    }

    #[test]
    fn system2_identity_and_constant_ratio() {
        let track = ProsodyTrack::from_f0(vec![120.0, 0.0, 180.0, 95.5]);
        let unit = AnonymizationConfig {
            scale_low: 1.0,
            scale_high: 1.0,
            ..Default::default()
        };
        let (same, alpha) = anonymize_f0_random_scale(&track, &unit, "u");
        assert_eq!(alpha, 1.0);
        assert_eq!(same.f0_hz, track.f0_hz);
        let (scaled, alpha) =
            anonymize_f0_random_scale(&track, &AnonymizationConfig::default(), "u7");
        assert!((0.8..=1.2).contains(&alpha));
        for (a, b) in scaled.f0_hz.iter().zip(&track.f0_hz) {
            if *b > 0.0 {
                assert!((a / b - alpha).abs() < 1e-12);
            }
        }
        assert_eq!(scaled.voiced, track.voiced);
    }

    #[test]
    fn unvoiced_utterance_feeds_zeros() {
        let track = ProsodyTrack::from_f0(vec![0.0; 5]);
        let pool = random_pool(3, 2, 1);
        let cfg = AnonymizationConfig::default();
        for s in [
            F0Strategy::LogNorm,
            F0Strategy::RandomScale,
            F0Strategy::DistantMean,
        ] {
            let out = f0_model_input(&track, s, &cfg, "u", &[], &pool).unwrap();
            assert_eq!(out.values, vec![0.0; 5]);
        }
    }

    #[test]
    fn system2_changes_model_input() {
        let track = ProsodyTrack::from_f0(vec![120.0, 0.0, 180.0, 95.5]);
        let pool = random_pool(3, 2, 1);
        let cfg = AnonymizationConfig::default();
        let s1 = f0_model_input(&track, F0Strategy::LogNorm, &cfg, "u", &[], &pool).unwrap();
        let s2 = f0_model_input(&track, F0Strategy::RandomScale, &cfg, "u", &[], &pool).unwrap();
        let alpha = s2.alpha.unwrap();
        let std = LogF0Stats::of(&track).unwrap().std;
        for t in [0, 2, 3] {
            assert!((s2.values[t] - s1.values[t] - alpha.ln() / std).abs() < 1e-12);
        }
        assert_eq!(s2.values[1], 0.0);
    }
}
