//! Frame-wise normalised cross-correlation (NCCF) pitch tracker.
//!
//! For each frame the NCCF is evaluated over every lag corresponding to
//! `[f0_min, f0_max]`. The shortest-lag local maximum within 90 % of the
//! global maximum is taken as the period (suppresses octave-down errors) and
//! refined by parabolic interpolation. A frame is voiced when that peak reaches
//! the voicing threshold. Voicing decisions and F0 values are then smoothed by
//! width-3 median filters.

use super::mel::Framing;
use super::FeatureConfig;

/// Frames quieter than this mean power are unvoiced outright.
const SILENCE_POWER: f64 = 1e-10;
const PEAK_RATIO: f64 = 0.9;

#[derive(Debug, Clone, Copy)]
pub struct PitchEstimate {
    pub f0_hz: f64,
    pub voiced: bool,
    pub nccf: f64,
}

pub struct PitchTracker {
    framing: Framing,
    sample_rate: f64,
    min_lag: usize,
    max_lag: usize,
    f0_min: f64,
    f0_max: f64,
    threshold: f64,
}

impl PitchTracker {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let sr = cfg.sample_rate as f64;
        Self {
            framing: Framing::from_config(cfg),
            sample_rate: sr,
            min_lag: (sr / cfg.f0_max_hz).floor().max(2.0) as usize,
            max_lag: (sr / cfg.f0_min_hz).ceil() as usize,
            f0_min: cfg.f0_min_hz,
            f0_max: cfg.f0_max_hz,
            threshold: cfg.voicing_threshold,
        }
    }

    fn sample(x: &[f32], p: isize) -> f64 {
        if p >= 0 && (p as usize) < x.len() {
            x[p as usize] as f64
        } else {
            0.0
        }
    }

    /// NCCF over lags `0..=max_lag` for one frame (lags below `min_lag` are 0).
    pub fn nccf(&self, x: &[f32], frame: usize) -> Vec<f64> {
        let win = self.framing.win;
        let start = self.framing.start(frame);
        let seg: Vec<f64> = (0..win + self.max_lag)
            .map(|n| Self::sample(x, start + n as isize))
            .collect();
        let e0: f64 = seg[..win].iter().map(|v| v * v).sum();
        let mut out = vec![0.0; self.max_lag + 1];
        if e0 / (win as f64) < SILENCE_POWER {
            return out;
        }
        // running energy of the lagged window
        let mut el: f64 = seg[self.min_lag..self.min_lag + win]
            .iter()
            .map(|v| v * v)
            .sum();
        for lag in self.min_lag..=self.max_lag {
            if lag > self.min_lag {
                let drop = seg[lag - 1];
                let add = seg[lag + win - 1];
                el = (el - drop * drop + add * add).max(0.0);
            }
            let cross: f64 = seg[..win]
                .iter()
                .zip(&seg[lag..lag + win])
                .map(|(a, b)| a * b)
                .sum();
            let denom = (e0 * el).sqrt();
            out[lag] = if denom > 0.0 { cross / denom } else { 0.0 };
        }
        out
    }

    pub fn estimate_frame(&self, x: &[f32], frame: usize) -> PitchEstimate {
        let r = self.nccf(x, frame);
        let unvoiced = PitchEstimate {
            f0_hz: 0.0,
            voiced: false,
            nccf: 0.0,
        };
        let (lo, hi) = (self.min_lag, self.max_lag);
        let global = r[lo..=hi].iter().copied().fold(f64::MIN, f64::max);
        if global < self.threshold {
            return PitchEstimate {
                nccf: global.max(0.0),
                ..unvoiced
            };
        }
        let is_peak = |l: usize| {
            let left = if l > lo { r[l - 1] } else { f64::MIN };
            let right = if l < hi { r[l + 1] } else { f64::MIN };
            r[l] >= left && r[l] >= right
        };
        let Some(best) = (lo..=hi).find(|&l| is_peak(l) && r[l] >= PEAK_RATIO * global) else {
            return unvoiced;
        };
        let mut lag = best as f64;
        if best > lo && best < hi {
            let (a, b, c) = (r[best - 1], r[best], r[best + 1]);
            let curv = a - 2.0 * b + c;
            if curv < 0.0 {
                lag += (0.5 * (a - c) / curv).clamp(-0.5, 0.5);
            }
        }
        let f0 = self.sample_rate / lag;
        if !(self.f0_min..=self.f0_max).contains(&f0) {
            return unvoiced;
        }
        PitchEstimate {
            f0_hz: f0,
            voiced: true,
            nccf: r[best],
        }
    }

    /// Per-frame `(f0_hz, voiced)` after median smoothing.
    pub fn track(&self, x: &[f32], frames: usize) -> (Vec<f64>, Vec<bool>) {
        let raw: Vec<PitchEstimate> = (0..frames).map(|t| self.estimate_frame(x, t)).collect();
        let voiced: Vec<bool> = (0..frames)
            .map(|t| {
                if t == 0 || t + 1 == frames {
                    return raw[t].voiced;
                }
                let n = [raw[t - 1].voiced, raw[t].voiced, raw[t + 1].voiced]
                    .iter()
                    .filter(|&&v| v)
                    .count();
                n >= 2
            })
            .collect();
        let f0: Vec<f64> = (0..frames)
            .map(|t| {
                if !voiced[t] {
                    return 0.0;
                }
                let own = raw[t].voiced.then_some(raw[t].f0_hz);
                let mut nb: Vec<f64> = [t.wrapping_sub(1), t, t + 1]
                    .iter()
                    .filter(|&&i| i < frames && raw[i].voiced)
                    .map(|&i| raw[i].f0_hz)
                    .collect();
                nb.sort_by(|a, b| a.total_cmp(b));
                match nb.len() {
                    3 => nb[1],
                    _ => own.unwrap_or_else(|| nb.iter().sum::<f64>() / nb.len() as f64),
                }
            })
            .collect();
        (f0, voiced)
    }
}
