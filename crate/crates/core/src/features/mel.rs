//! Slaney-style triangular mel filterbank and the STFT framing shared by
//! feature extraction and the differentiable training-time mel loss.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::FeatureConfig;

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * ((mel - MIN_LOG_MEL) * log_step()).exp()
    }
}

/// Filter edge/centre frequencies: `n_mels + 2` points evenly spaced in mel.
pub fn mel_points_hz(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Centre frequency of each mel band.
pub fn mel_centers_hz(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    mel_points_hz(n_mels, fmin, fmax)[1..=n_mels].to_vec()
}

/// `[n_mels, n_fft/2 + 1]` weights, area-normalised per band.
pub fn mel_filterbank(
    sample_rate: f64,
    n_fft: usize,
    n_mels: usize,
    fmin: f64,
    fmax: f64,
) -> Vec<f64> {
    let n_bins = n_fft / 2 + 1;
    let pts = mel_points_hz(n_mels, fmin, fmax);
    let mut w = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (f0, f1, f2) = (pts[m], pts[m + 1], pts[m + 2]);
        let enorm = 2.0 / (f2 - f0);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate / n_fft as f64;
            let lower = (f - f0) / (f1 - f0);
            let upper = (f2 - f) / (f2 - f1);
            w[m * n_bins + k] = lower.min(upper).max(0.0) * enorm;
        }
    }
    w
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Frame geometry: frame `t` covers `[t * hop + offset, t * hop + offset + win)`
/// with zeros outside the clip, centring each window on its hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Framing {
    pub win: usize,
    pub hop: usize,
    pub offset: isize,
}

impl Framing {
    pub fn from_config(cfg: &FeatureConfig) -> Self {
        let win = cfg.window_samples();
        let hop = cfg.hop_samples();
        Self {
            win,
            hop,
            offset: hop as isize / 2 - win as isize / 2,
        }
    }

    pub fn start(&self, frame: usize) -> isize {
        (frame * self.hop) as isize + self.offset
    }
}

/// Precomputed transforms for one [`FeatureConfig`].
pub struct MelAnalyzer {
    pub cfg: FeatureConfig,
    pub framing: Framing,
    pub window: Vec<f64>,
    /// `[n_mels, n_bins]`
    pub filterbank: Vec<f64>,
    pub n_bins: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl MelAnalyzer {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let framing = Framing::from_config(cfg);
        let n_bins = cfg.fft_size / 2 + 1;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Self {
            cfg: cfg.clone(),
            framing,
            window: hann(framing.win),
            filterbank: mel_filterbank(
                cfg.sample_rate as f64,
                cfg.fft_size,
                cfg.n_mels,
                0.0,
                cfg.sample_rate as f64 / 2.0,
            ),
            n_bins,
            fft,
        }
    }

    /// Magnitude spectrum of one frame.
    pub fn magnitude(&self, samples: &[f32], frame: usize, out: &mut [f64]) {
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let start = self.framing.start(frame);
        for (n, w) in self.window.iter().enumerate() {
            let p = start + n as isize;
            if p >= 0 && (p as usize) < samples.len() {
                buf[n].re = samples[p as usize] as f64 * w;
            }
        }
        self.fft.process(&mut buf);
        for (o, c) in out.iter_mut().zip(&buf[..self.n_bins]) {
            *o = c.norm();
        }
    }

    /// Log-mel frames `[frames, n_mels]`.
    pub fn log_mel(&self, samples: &[f32], frames: usize) -> Vec<f64> {
        let n_mels = self.cfg.n_mels;
        let floor = self.cfg.log_floor;
        let mut mag = vec![0.0; self.n_bins];
        let mut out = Vec::with_capacity(frames * n_mels);
        for t in 0..frames {
            self.magnitude(samples, t, &mut mag);
            for m in 0..n_mels {
                let row = &self.filterbank[m * self.n_bins..(m + 1) * self.n_bins];
                let e: f64 = row.iter().zip(&mag).map(|(a, b)| a * b).sum();
                out.push(e.max(floor).ln());
            }
        }
        out
    }

    /// Real and imaginary DFT matrices `[win, n_bins]` with the window folded in.
    pub fn windowed_dft(&self) -> (Vec<f64>, Vec<f64>) {
        let (win, nb, n) = (self.framing.win, self.n_bins, self.cfg.fft_size as f64);
        let mut re = vec![0.0; win * nb];
        let mut im = vec![0.0; win * nb];
        for t in 0..win {
            for k in 0..nb {
                // exact reduction of k*t mod n keeps the phase accurate
                let ph = 2.0 * PI * ((k * t) % self.cfg.fft_size) as f64 / n;
                re[t * nb + k] = self.window[t] * ph.cos();
                im[t * nb + k] = -self.window[t] * ph.sin();
            }
        }
        (re, im)
    }
}
