use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn clip(samples: Vec<f32>) -> AudioClip {
    AudioClip::new(samples, "utt", "spk").unwrap()
}

fn sine(freq: f64, amp: f64, n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (amp * (2.0 * PI * freq * i as f64 / 16000.0).sin()) as f32)
        .collect()
}

fn sawtooth(freq: f64, amp: f64, n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| {
            let ph = (freq * i as f64 / 16000.0).fract();
            (amp * (2.0 * ph - 1.0)) as f32
        })
        .collect()
}

#[test]
fn silence_mel_is_log_floor() {
    let cfg = FeatureConfig::default();
    let mel = compute_mel(&clip(vec![0.0; 16000]), &cfg).unwrap();
    assert_eq!((mel.n_frames, mel.n_mels), (100, 80));
    let floor = 1e-5f64.ln();
    assert!(mel.frames.iter().all(|&v| v == floor));
}

/// Naive O(N^2) DFT of one windowed frame followed by the filterbank.
fn oracle_frame_mel(x: &[f32], frame: usize, cfg: &FeatureConfig) -> Vec<f64> {
    let win = cfg.window_samples();
    let hop = cfg.hop_samples();
    let start = (frame * hop) as isize + hop as isize / 2 - win as isize / 2;
    let w = mel::hann(win);
    let n_bins = cfg.fft_size / 2 + 1;
    let mag: Vec<f64> = (0..n_bins)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..win {
                let p = start + n as isize;
                let s = if p >= 0 && (p as usize) < x.len() {
                    x[p as usize] as f64
                } else {
                    0.0
                };
                let ang = -2.0 * PI * (k * n) as f64 / cfg.fft_size as f64;
                re += s * w[n] * ang.cos();
                im += s * w[n] * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect();
    let fb = mel::mel_filterbank(16000.0, cfg.fft_size, cfg.n_mels, 0.0, 8000.0);
    (0..cfg.n_mels)
        .map(|m| {
            let e: f64 = (0..n_bins).map(|k| fb[m * n_bins + k] * mag[k]).sum();
            e.max(cfg.log_floor).ln()
        })
        .collect()
}

#[test]
fn sine_peaks_in_nearest_band() {
    let cfg = FeatureConfig::default();
    let x = sine(440.0, 0.5, 16000);
    let mel = compute_mel(&clip(x.clone()), &cfg).unwrap();
    let centers = mel::mel_centers_hz(80, 0.0, 8000.0);
    let nearest = centers
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
        .unwrap()
        .0;
    for t in [5, 37, 50, 94] {
        let oracle = oracle_frame_mel(&x, t, &cfg);
        for (a, b) in mel.frame(t).iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9, "frame {t}: fft {a} vs dft {b}");
        }
    }
    for t in 2..98 {
        let row = mel.frame(t);
        let arg = (0..80).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, nearest, "frame {t}");
    }
}

#[test]
fn frame_count_is_samples_over_hop() {
    let cfg = FeatureConfig::default();
    for n in [480usize, 559, 1600, 16000, 23456] {
        let c = clip(sine(200.0, 0.3, n));
        let mel = compute_mel(&c, &cfg).unwrap();
        let f0 = extract_f0(&c, &cfg).unwrap();
        assert_eq!(mel.n_frames, n / 160);
        assert_eq!(f0.len(), n / 160);
        assert_eq!(compute_energy(&mel).len(), n / 160);
    }
}

#[test]
fn rejects_short_and_non_finite() {
    let cfg = FeatureConfig::default();
    let short = clip(vec![0.1; 320]);
    assert!(matches!(
        compute_mel(&short, &cfg),
        Err(Error::ClipTooShort { .. })
    ));
    assert!(matches!(
        extract_f0(&short, &cfg),
        Err(Error::ClipTooShort { .. })
    ));
    let mut bad = clip(vec![0.1; 800]);
    bad.samples[3] = f32::INFINITY;
    assert!(matches!(
        compute_mel(&bad, &cfg),
        Err(Error::NonFiniteSample(3))
    ));
}

#[test]
fn silence_is_unvoiced() {
    let track = extract_f0(&clip(vec![0.0; 16000]), &FeatureConfig::default()).unwrap();
    assert!(track.voiced.iter().all(|v| !v));
    assert!(track.f0_hz.iter().all(|&f| f == 0.0));
}

/// Lag of the largest biased autocorrelation of an isolated segment.
fn oracle_acf_f0(x: &[f32], start: usize, len: usize) -> f64 {
    let seg: Vec<f64> = x[start..start + len].iter().map(|&v| v as f64).collect();
    let mean = seg.iter().sum::<f64>() / len as f64;
    let seg: Vec<f64> = seg.iter().map(|v| v - mean).collect();
    let best = (29..=320)
        .max_by(|&a, &b| {
            let ra: f64 = (0..len - a).map(|n| seg[n] * seg[n + a]).sum::<f64>() / len as f64;
            let rb: f64 = (0..len - b).map(|n| seg[n] * seg[n + b]).sum::<f64>() / len as f64;
            ra.total_cmp(&rb)
        })
        .unwrap();
    16000.0 / best as f64
}

#[test]
fn sawtooth_pitch_within_5hz() {
    let cfg = FeatureConfig::default();
    let x = sawtooth(200.0, 0.5, 16000);
    let track = extract_f0(&clip(x.clone()), &cfg).unwrap();
    let oracle = oracle_acf_f0(&x, 4000, 1200);
    assert!((oracle - 200.0).abs() <= 5.0, "oracle {oracle}");
    for t in 3..97 {
        assert!(track.voiced[t], "frame {t} unvoiced");
        assert!(
            (track.f0_hz[t] - 200.0).abs() <= 5.0,
            "frame {t}: {}",
            track.f0_hz[t]
        );
        assert!((track.f0_hz[t] - oracle).abs() <= 5.0);
    }
    track.validate(&cfg).unwrap();
}

#[test]
fn tracks_several_pitches() {
    let cfg = FeatureConfig::default();
    for f in [80.0, 120.0, 310.0, 450.0] {
        let track = extract_f0(&clip(sawtooth(f, 0.4, 8000)), &cfg).unwrap();
        for t in 4..46 {
            assert!(
                track.voiced[t] && (track.f0_hz[t] - f).abs() <= f * 0.025,
                "{f} Hz frame {t}: {}",
                track.f0_hz[t]
            );
        }
    }
}

#[test]
fn silence_energy_is_constant() {
    let mel = compute_mel(&clip(vec![0.0; 1600]), &FeatureConfig::default()).unwrap();
    for e in compute_energy(&mel) {
        assert!((e - 80.0 * 1e-5).abs() < 1e-15);
    }
}

#[test]
fn energy_is_linear_in_mel_magnitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let frames: Vec<f64> = (0..40 * 80).map(|_| rng.gen_range(-8.0..2.0)).collect();
    let mel = MelSpectrogram::new(frames.clone(), 40, 80).unwrap();
    let doubled =
        MelSpectrogram::new(frames.iter().map(|v| v + 2f64.ln()).collect(), 40, 80).unwrap();
    let e1 = compute_energy(&mel);
    let e2 = compute_energy(&doubled);
    for t in 0..40 {
        let brute: f64 = (0..80).map(|m| frames[t * 80 + m].exp()).sum();
        assert!((e1[t] - brute).abs() <= 1e-9 * brute);
        assert!((e2[t] - 2.0 * e1[t]).abs() <= 1e-12 * e2[t]);
    }
}

#[test]
fn log_f0_examples() {
    let flat = ProsodyTrack::from_f0(vec![200.0; 10]);
    assert!(normalize_f0_log(&flat)
        .unwrap()
        .iter()
        .all(|v| v.abs() < 1e-12));
    let stats = LogF0Stats::of(&flat).unwrap();
    assert!((stats.mean - 200f64.ln()).abs() < 1e-12);

    let two = ProsodyTrack::from_f0(vec![100.0, 0.0, 200.0, 0.0]);
    let out = normalize_f0_log(&two).unwrap();
    assert!((out[0] + 1.0).abs() < 1e-12 && (out[2] - 1.0).abs() < 1e-12);
    assert_eq!((out[1], out[3]), (0.0, 0.0));

    let one = ProsodyTrack::from_f0(vec![0.0, 150.0, 0.0]);
    assert!(matches!(
        normalize_f0_log(&one),
        Err(Error::InsufficientVoicing { voiced: 1 })
    ));
}

#[test]
fn energy_normalisation_examples() {
    assert_eq!(
        normalize_energy_mean(&[3.0, 3.0, 3.0]).unwrap(),
        vec![1.0, 1.0, 1.0]
    );
    assert_eq!(normalize_energy_mean(&[1.0, 3.0]).unwrap(), vec![0.5, 1.5]);
    assert!(normalize_energy_mean(&[1.0, 0.0]).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let e: Vec<f64> = (0..500).map(|_| rng.gen_range(1e-4..10.0)).collect();
    let n = normalize_energy_mean(&e).unwrap();
    let mean = n.iter().sum::<f64>() / n.len() as f64;
    assert!((mean - 1.0).abs() < 1e-12);
}

#[test]
fn features_are_deterministic() {
    let cfg = FeatureConfig::default();
    let an = MelAnalyzer::new(&cfg);
    let c = clip(sawtooth(170.0, 0.3, 4800));
    let a = extract_all(&an, &c).unwrap();
    let b = extract_all(&an, &c).unwrap();
    assert_eq!(a, b);
}

fn track_strategy() -> impl Strategy<Value = ProsodyTrack> {
    prop::collection::vec(prop_oneof![Just(0.0), 60.0f64..500.0], 2..200)
        .prop_map(ProsodyTrack::from_f0)
}

proptest! {
    #[test]
    fn log_norm_standardises_voiced_frames(track in track_strategy()) {
        prop_assume!(track.voiced_count() >= 2);
        let stats = LogF0Stats::of(&track).unwrap();
        let out = stats.apply(&track);
        for (o, &v) in out.iter().zip(&track.voiced) {
            if !v { prop_assert_eq!(*o, 0.0); }
        }
        if stats.std != 1.0 || stats.voiced > 1 {
            let voiced: Vec<f64> = out.iter().zip(&track.voiced).filter(|(_, &v)| v).map(|(o, _)| *o).collect();
            let n = voiced.len() as f64;
            let mean = voiced.iter().sum::<f64>() / n;
            let var = voiced.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-6);
            let raw_std = {
                let logs: Vec<f64> = track.f0_hz.iter().filter(|&&f| f > 0.0).map(|f| f.ln()).collect();
                let m = logs.iter().sum::<f64>() / n;
                (logs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
            };
            if raw_std >= FLAT_PITCH_STD {
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frame_alignment_for_random_lengths(n in 480usize..6000, f in 60.0f64..400.0) {
        let cfg = FeatureConfig::default();
        let c = clip(sawtooth(f, 0.3, n));
        let feats = extract_all(&MelAnalyzer::new(&cfg), &c).unwrap();
        prop_assert_eq!(feats.mel.n_frames, c.samples.len() / 160);
        prop_assert_eq!(feats.prosody.len(), feats.mel.n_frames);
        prop_assert_eq!(feats.prosody.energy.len(), feats.mel.n_frames);
        prop_assert!(feats.prosody.validate(&cfg).is_ok());
    }
}
