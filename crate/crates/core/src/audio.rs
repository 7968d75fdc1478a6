//! Mono 16 kHz waveforms and 16-bit PCM WAV I/O.

use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const HOP_LENGTH: usize = 160;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub utterance_id: String,
    pub speaker_id: String,
}

impl AudioClip {
    /// Builds a clip, trimming the tail to a whole number of hops.
    pub fn new(
        samples: Vec<f32>,
        utterance_id: impl Into<String>,
        speaker_id: impl Into<String>,
    ) -> Result<Self> {
        let mut clip = Self {
            samples,
            sample_rate: SAMPLE_RATE,
            utterance_id: utterance_id.into(),
            speaker_id: speaker_id.into(),
        };
        clip.trim_to_hop();
        clip.validate()?;
        Ok(clip)
    }

    pub fn trim_to_hop(&mut self) {
        let n = self.samples.len() / HOP_LENGTH * HOP_LENGTH;
        self.samples.truncate(n);
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Invalid(format!(
                "sample rate {} Hz, expected {SAMPLE_RATE}",
                self.sample_rate
            )));
        }
        if self.samples.is_empty() {
            return Err(Error::ClipTooShort {
                samples: 0,
                min: HOP_LENGTH,
            });
        }
        if self.samples.len() % HOP_LENGTH != 0 {
            return Err(Error::Invalid(format!(
                "{} samples is not a multiple of the hop length",
                self.samples.len()
            )));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSample(i));
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.samples.len() / HOP_LENGTH
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono 16 kHz WAV (16-bit PCM or 32-bit float).
    pub fn read_wav(
        path: &Path,
        utterance_id: impl Into<String>,
        speaker_id: impl Into<String>,
    ) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::format(
                path,
                format!("{} channels, expected mono", spec.channels),
            ));
        }
        if spec.sample_rate != SAMPLE_RATE {
            return Err(Error::format(
                path,
                format!("{} Hz, expected {SAMPLE_RATE}", spec.sample_rate),
            ));
        }
        let samples: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = 1.0 / (1u32 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 * scale))
                    .collect::<std::result::Result<_, _>>()?
            }
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .collect::<std::result::Result<_, _>>()?,
        };
        Self::new(samples, utterance_id, speaker_id)
    }

    /// Writes 16-bit PCM; samples are clamped to [-1, 1].
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        write_pcm16(path, &self.samples)
    }
}

pub fn write_pcm16(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v)?;
    }
    w.finalize()?;
    Ok(())
}
