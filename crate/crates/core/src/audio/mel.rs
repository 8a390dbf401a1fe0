use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{FrontendConfig, FrontendError, Result, Spectrogram, Waveform, SAMPLE_RATE};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub(crate) fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable log-mel analyser: window, FFT plan and filterbank are built once.
pub struct LogMel {
    cfg: FrontendConfig,
    win: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    /// `n_mels` rows of `(first_bin, weights)`; zero weights are trimmed.
    filters: Vec<(usize, Vec<f64>)>,
}

impl LogMel {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let win = cfg.win_samples();
        let n_fft = cfg.fft_size();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            win,
            hop: cfg.hop_samples(),
            window: hann(win),
            fft,
            filters: filterbank(cfg.n_mels, n_fft, SAMPLE_RATE as f64),
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Center frequency of mel filter `j`.
    pub fn center_hz(&self, j: usize) -> f64 {
        mel_points(self.cfg.n_mels, SAMPLE_RATE as f64)[j + 1]
    }

    /// Dense `n_mels x (fft_size/2 + 1)` filterbank matrix.
    pub fn filter_matrix(&self) -> Vec<Vec<f64>> {
        let n_bins = self.cfg.fft_size() / 2 + 1;
        self.filters
            .iter()
            .map(|(start, w)| {
                let mut row = vec![0.0; n_bins];
                row[*start..start + w.len()].copy_from_slice(w);
                row
            })
            .collect()
    }

    /// Power spectrum `|STFT|^2` of every frame, `fft_size/2 + 1` bins each.
    pub fn power_frames(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let frames = self.cfg.frames_for(x.len());
        let n_fft = self.cfg.fft_size();
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        (0..frames)
            .map(|t| {
                let seg = &x[t * self.hop..t * self.hop + self.win];
                for (i, c) in buf.iter_mut().enumerate() {
                    *c = if i < self.win {
                        Complex::new(seg[i] * self.window[i], 0.0)
                    } else {
                        Complex::new(0.0, 0.0)
                    };
                }
                self.fft.process_with_scratch(&mut buf, &mut scratch);
                buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
            })
            .collect()
    }

    pub fn compute(&self, wave: &Waveform) -> Result<Spectrogram> {
        if wave.sample_rate() != SAMPLE_RATE {
            return Err(FrontendError::RateMismatch(wave.sample_rate(), SAMPLE_RATE));
        }
        if wave.len() < self.win {
            return Err(FrontendError::TooShort {
                len: wave.len(),
                need: self.win,
            });
        }
        let power = self.power_frames(wave.samples());
        let n_mels = self.cfg.n_mels;
        let mut values = Vec::with_capacity(power.len() * n_mels);
        for p in &power {
            for (start, w) in &self.filters {
                let e: f64 = w.iter().zip(&p[*start..]).map(|(a, b)| a * b).sum();
                values.push((e + self.cfg.eps).ln());
            }
        }
        Spectrogram::new(power.len(), n_mels, values)
    }
}

/// `n_mels + 2` equally spaced mel points from 0 Hz to Nyquist, in Hz.
fn mel_points(n_mels: usize, sr: f64) -> Vec<f64> {
    let top = hz_to_mel(sr / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

fn filterbank(n_mels: usize, n_fft: usize, sr: f64) -> Vec<(usize, Vec<f64>)> {
    let pts = mel_points(n_mels, sr);
    let n_bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|j| {
            let (lo, c, hi) = (pts[j], pts[j + 1], pts[j + 2]);
            let w: Vec<f64> = (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sr / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= c {
                        (f - lo) / (c - lo)
                    } else {
                        (hi - f) / (hi - c)
                    }
                })
                .collect();
            let first = w.iter().position(|&v| v > 0.0).unwrap_or(0);
            let last = w.iter().rposition(|&v| v > 0.0).map_or(first, |i| i + 1);
            (first, w[first..last].to_vec())
        })
        .collect()
}

/// `X(t,f) = ln(sum_k M_fk |STFT(x)_k|^2 + eps)`.
pub fn log_mel(wave: &Waveform, cfg: &FrontendConfig) -> Result<Spectrogram> {
    LogMel::new(cfg)?.compute(wave)
}
