//! A tiny deterministic corpus of synthetic vowel-like utterances for smoke
//! runs: two pseudo-speakers with distinct pitch and formant scaling, stub
//! x-vectors for every clip and a stub pool of distant speakers.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::anonymizer::{stub_xvector, PoolEntry, SpeakerPool, XVECTOR_DIM};
use crate::artifacts::{write_pool, write_xvector, xvector_path};
use crate::audio::{write_pcm16, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::rng::derive_rng;

pub const CLIP_SAMPLES: usize = SAMPLE_RATE as usize;
pub const POOL_SPEAKERS: usize = 300;

/// Voice parameters of one synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub speaker_id: &'static str,
    pub f0_hz: f64,
    pub formant_scale: f64,
}

pub const VOICES: [Voice; 2] = [
    Voice {
        speaker_id: "spk_a",
        f0_hz: 115.0,
        formant_scale: 1.0,
    },
    Voice {
        speaker_id: "spk_b",
        f0_hz: 215.0,
        formant_scale: 1.17,
    },
];

/// First three formants (Hz) of a handful of vowels.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
];

#[derive(Debug, Clone, Copy, PartialEq)]
enum Segment {
    Silence,
    Vowel(usize),
    Noise,
}

fn spectral_envelope(freq: f64, formants: &[f64; 3], scale: f64) -> f64 {
    formants
        .iter()
        .enumerate()
        .map(|(j, &f)| {
            let centre = f * scale;
            let bw = 60.0 + 40.0 * j as f64;
            let z = (freq - centre) / bw;
            (-0.5 * z * z).exp() / (1.0 + j as f64)
        })
        .sum::<f64>()
        + 0.02
}

/// One second of speech-like audio for `voice`, fully determined by the rng.
pub fn synth_utterance(voice: &Voice, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let mut plan: Vec<(Segment, usize)> = vec![(Segment::Silence, rng.gen_range(800..1600))];
    let mut used = plan[0].1;
    let tail = rng.gen_range(800..1400);
    let noise_at = rng.gen_range(1..3);
    let mut k = 0;
    while used + tail < CLIP_SAMPLES {
        let seg = if k == noise_at {
            Segment::Noise
        } else {
            Segment::Vowel(rng.gen_range(0..VOWELS.len()))
        };
        let len = match seg {
            Segment::Noise => rng.gen_range(700..1200),
            _ => rng.gen_range(2400..4000),
        }
        .min(CLIP_SAMPLES - tail - used);
        plan.push((seg, len));
        used += len;
        k += 1;
    }
    plan.push((Segment::Silence, CLIP_SAMPLES - used));

    let vibrato_rate = rng.gen_range(3.0..5.0);
    let vibrato_phase = rng.gen_range(0.0..TAU);
    let glide = rng.gen_range(-0.12..0.08);
    let mut out = Vec::with_capacity(CLIP_SAMPLES);
    let mut phase = 0.0f64;
    let ramp = 160.0;
    for (seg, len) in plan {
        let harmonics: Vec<f64> = match seg {
            Segment::Vowel(v) => {
                let n = (7000.0 / (voice.f0_hz * 0.8)) as usize;
                (1..=n)
                    .map(|h| {
                        spectral_envelope(h as f64 * voice.f0_hz, &VOWELS[v], voice.formant_scale)
                    })
                    .collect()
            }
            _ => Vec::new(),
        };
        for i in 0..len {
            let t = out.len() as f64 / sr;
            let edge = ((i as f64 + 1.0) / ramp)
                .min((len - i) as f64 / ramp)
                .min(1.0);
            let gain = 0.5 - 0.5 * (std::f64::consts::PI * edge).cos();
            let f0 = voice.f0_hz
                * (1.0 + glide * t + 0.04 * (TAU * vibrato_rate * t + vibrato_phase).sin());
            phase = (phase + TAU * f0 / sr) % TAU;
            let s = match seg {
                Segment::Silence => 0.0,
                Segment::Noise => 0.08 * rng.gen_range(-1.0..1.0),
                Segment::Vowel(_) => {
                    let mut acc = 0.0;
                    for (h, a) in harmonics.iter().enumerate() {
                        let hf = (h + 1) as f64;
                        if hf * f0 < 7600.0 {
                            acc += a * (hf * phase).sin() / hf.sqrt();
                        }
                    }
                    0.18 * acc
                }
            };
            out.push(gain * s + 1e-4 * rng.gen_range(-1.0..1.0));
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    out.iter().map(|v| (0.6 * v / peak) as f32).collect()
}

/// Pool of `n` stub speakers with unit-norm embeddings and plausible mean log-F0.
pub fn stub_pool(n: usize, seed: u64) -> SpeakerPool {
    let mut rng = derive_rng(seed, "stub-pool", "");
    let entries = (0..n)
        .map(|i| {
            let id = format!("pool_{i:04}");
            let f0: f64 = rng.gen_range(90.0..260.0);
            PoolEntry {
                mean_xvector: stub_xvector(&id, "", XVECTOR_DIM).values,
                speaker_id: id,
                mean_log_f0: Some(f0.ln()),
            }
        })
        .collect();
    SpeakerPool { entries }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusLayout {
    pub wav_dir: PathBuf,
    pub xvector_dir: PathBuf,
    pub pool_file: PathBuf,
    pub utterances: Vec<(String, String)>,
}

impl CorpusLayout {
    pub fn at(root: &Path) -> Self {
        Self {
            wav_dir: root.join("wav"),
            xvector_dir: root.join("xvectors"),
            pool_file: root.join("pool.bin"),
            utterances: Vec::new(),
        }
    }
}

/// Writes `per_speaker` clips for each voice under `root/wav/{speaker}/`,
/// their stub x-vectors under `root/xvectors/` and a stub pool.
pub fn make_corpus(root: &Path, per_speaker: usize, seed: u64) -> Result<CorpusLayout> {
    let mut layout = CorpusLayout::at(root);
    fs::create_dir_all(&layout.xvector_dir).map_err(|e| Error::io(&layout.xvector_dir, e))?;
    for voice in &VOICES {
        let dir = layout.wav_dir.join(voice.speaker_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_speaker {
            let utt = format!("{}_{i:02}", voice.speaker_id.trim_start_matches("spk_"));
            let mut rng = derive_rng(seed, "corpus", &utt);
            write_pcm16(
                &dir.join(format!("{utt}.wav")),
                &synth_utterance(voice, &mut rng),
            )?;
            let xv = stub_xvector(voice.speaker_id, &utt, XVECTOR_DIM);
            write_xvector(&xvector_path(&layout.xvector_dir, &utt), &xv)?;
            layout.utterances.push((utt, voice.speaker_id.to_string()));
        }
    }
    write_pool(&layout.pool_file, &stub_pool(POOL_SPEAKERS, seed))?;
    Ok(layout)
}
