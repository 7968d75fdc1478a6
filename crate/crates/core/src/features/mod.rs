//! Aligned input streams: 80-bin log-mel spectrogram, F0 track and spectral
//! energy at a 100 Hz frame rate, plus their per-utterance normalisations.

pub mod mel;
pub mod pitch;

use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

pub use mel::MelAnalyzer;
pub use pitch::PitchTracker;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub n_mels: usize,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    pub voicing_threshold: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 1024,
            n_mels: 80,
            f0_min_hz: 50.0,
            f0_max_hz: 550.0,
            voicing_threshold: 0.3,
            log_floor: 1e-5,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Config(format!(
                "sample_rate must be {SAMPLE_RATE}, got {}",
                self.sample_rate
            )));
        }
        if self.window_ms <= self.hop_ms {
            return Err(Error::Config("window_ms must exceed hop_ms".into()));
        }
        if self.fft_size < self.window_samples() {
            return Err(Error::Config(format!(
                "fft_size {} shorter than the {}-sample window",
                self.fft_size,
                self.window_samples()
            )));
        }
        if !(self.f0_min_hz > 0.0 && self.f0_min_hz < self.f0_max_hz) {
            return Err(Error::Config("need 0 < f0_min_hz < f0_max_hz".into()));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Log-amplitude mel frames, row-major `[frames, n_mels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<f64>,
    pub n_frames: usize,
    pub n_mels: usize,
}

impl MelSpectrogram {
    pub fn new(frames: Vec<f64>, n_frames: usize, n_mels: usize) -> Result<Self> {
        if frames.len() != n_frames * n_mels {
            return Err(Error::LengthMismatch(format!(
                "{} values for {n_frames} x {n_mels} mel frames",
                frames.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite mel value".into()));
        }
        Ok(Self {
            frames,
            n_frames,
            n_mels,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.frames[t * self.n_mels + m]
    }
}

/// Per-frame F0 (0 when unvoiced), voicing flags and spectral energy.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyTrack {
    pub f0_hz: Vec<f64>,
    pub voiced: Vec<bool>,
    pub energy: Vec<f64>,
}

impl ProsodyTrack {
    /// Builds a track from F0 values; voicing is derived from `f0 > 0`.
    pub fn from_f0(f0_hz: Vec<f64>) -> Self {
        let voiced = f0_hz.iter().map(|&f| f > 0.0).collect();
        Self {
            f0_hz,
            voiced,
            energy: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }

    pub fn validate(&self, cfg: &FeatureConfig) -> Result<()> {
        if self.voiced.len() != self.f0_hz.len() {
            return Err(Error::LengthMismatch("voicing flags vs F0 values".into()));
        }
        if !self.energy.is_empty() && self.energy.len() != self.f0_hz.len() {
            return Err(Error::LengthMismatch("energy vs F0 values".into()));
        }
        for (t, (&f, &v)) in self.f0_hz.iter().zip(&self.voiced).enumerate() {
            if v != (f != 0.0) {
                return Err(Error::Invalid(format!(
                    "frame {t}: voicing flag {v} inconsistent with f0 {f}"
                )));
            }
            if v && !(cfg.f0_min_hz..=cfg.f0_max_hz).contains(&f) {
                return Err(Error::Invalid(format!(
                    "frame {t}: voiced f0 {f} Hz outside [{}, {}]",
                    cfg.f0_min_hz, cfg.f0_max_hz
                )));
            }
        }
        if self.energy.iter().any(|&e| !(e >= 0.0)) {
            return Err(Error::Invalid("negative or non-finite energy".into()));
        }
        Ok(())
    }
}

fn check_clip(clip: &AudioClip, cfg: &FeatureConfig) -> Result<()> {
    let min = cfg.window_samples();
    if clip.samples.len() < min {
        return Err(Error::ClipTooShort {
            samples: clip.samples.len(),
            min,
        });
    }
    clip.validate()
}

pub fn compute_mel(clip: &AudioClip, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    compute_mel_with(&MelAnalyzer::new(cfg), clip)
}

/// [`compute_mel`] reusing a prepared analyser.
pub fn compute_mel_with(analyzer: &MelAnalyzer, clip: &AudioClip) -> Result<MelSpectrogram> {
    let cfg = &analyzer.cfg;
    check_clip(clip, cfg)?;
    let frames = clip.samples.len() / cfg.hop_samples();
    let data = analyzer.log_mel(&clip.samples, frames);
    MelSpectrogram::new(data, frames, cfg.n_mels)
}

/// F0 and voicing on the mel frame grid; `energy` is left empty.
pub fn extract_f0(clip: &AudioClip, cfg: &FeatureConfig) -> Result<ProsodyTrack> {
    check_clip(clip, cfg)?;
    let frames = clip.samples.len() / cfg.hop_samples();
    let (f0_hz, voiced) = PitchTracker::new(cfg).track(&clip.samples, frames);
    Ok(ProsodyTrack {
        f0_hz,
        voiced,
        energy: Vec::new(),
    })
}

/// Per-frame sum of linear mel magnitudes.
pub fn compute_energy(mel: &MelSpectrogram) -> Vec<f64> {
    (0..mel.n_frames)
        .map(|t| mel.frame(t).iter().map(|v| v.exp()).sum())
        .collect()
}

/// Mean and population standard deviation of log-F0 over voiced frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogF0Stats {
    pub mean: f64,
    pub std: f64,
    pub voiced: usize,
}

/// Standard deviations below this are treated as a flat pitch contour.
pub const FLAT_PITCH_STD: f64 = 1e-6;

impl LogF0Stats {
    pub fn of(track: &ProsodyTrack) -> Result<Self> {
        let logs: Vec<f64> = track
            .f0_hz
            .iter()
            .zip(&track.voiced)
            .filter(|(_, &v)| v)
            .map(|(f, _)| f.ln())
            .collect();
        if logs.len() < 2 {
            return Err(Error::InsufficientVoicing { voiced: logs.len() });
        }
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        Ok(Self {
            mean,
            std: if std < FLAT_PITCH_STD { 1.0 } else { std },
            voiced: logs.len(),
        })
    }

    /// `(ln f0 - mean) / std` on voiced frames, 0 elsewhere.
    pub fn apply(&self, track: &ProsodyTrack) -> Vec<f64> {
        track
            .f0_hz
            .iter()
            .zip(&track.voiced)
            .map(|(&f, &v)| {
                if v {
                    (f.ln() - self.mean) / self.std
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Per-utterance log-F0 standardisation over voiced frames.
pub fn normalize_f0_log(track: &ProsodyTrack) -> Result<Vec<f64>> {
    Ok(LogF0Stats::of(track)?.apply(track))
}

/// `energy / mean(energy)`.
pub fn normalize_energy_mean(energy: &[f64]) -> Result<Vec<f64>> {
    if energy.is_empty() {
        return Err(Error::Invalid("empty energy track".into()));
    }
    if let Some(e) = energy.iter().find(|&&e| !(e > 0.0) || !e.is_finite()) {
        return Err(Error::Invalid(format!("energy must be positive, got {e}")));
    }
    let mean = energy.iter().sum::<f64>() / energy.len() as f64;
    Ok(energy.iter().map(|e| e / mean).collect())
}

/// Everything the model consumes for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFeatures {
    pub utterance_id: String,
    pub speaker_id: String,
    pub mel: MelSpectrogram,
    pub prosody: ProsodyTrack,
}

impl UtteranceFeatures {
    pub fn n_frames(&self) -> usize {
        self.mel.n_frames
    }
}

/// Mel, F0 and energy for one clip on a shared frame grid.
pub fn extract_all(analyzer: &MelAnalyzer, clip: &AudioClip) -> Result<UtteranceFeatures> {
    let mel = compute_mel_with(analyzer, clip)?;
    let mut prosody = extract_f0(clip, &analyzer.cfg)?;
    prosody.energy = compute_energy(&mel);
    Ok(UtteranceFeatures {
        utterance_id: clip.utterance_id.clone(),
        speaker_id: clip.speaker_id.clone(),
        mel,
        prosody,
    })
}

#[cfg(test)]
mod tests;
