use super::mel::hann;
use super::{FrontendConfig, Segment, Waveform};

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Flux-triggered, energy-gated cry detector.
///
/// A run opens on a frame whose relative positive spectral flux exceeds
/// `flux_threshold` while its RMS clears the energy floor, and stays open
/// while RMS remains at or above the floor. The floor sits
/// `energy_floor_db` below the loudest frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentDetector {
    pub frame: FrontendConfig,
    pub flux_threshold: f64,
    pub min_len_ms: f64,
    pub energy_floor_db: f64,
}

impl Default for SegmentDetector {
    fn default() -> Self {
        Self {
            frame: FrontendConfig::default(),
            flux_threshold: 0.3,
            min_len_ms: 100.0,
            energy_floor_db: -30.0,
        }
    }
}

impl SegmentDetector {
    /// Per-frame `(relative flux, rms)`. The frame before the first is silent.
    pub fn frame_features(&self, x: &[f64]) -> Vec<(f64, f64)> {
        let win = self.frame.win_samples();
        let hop = self.frame.hop_samples();
        let n_fft = self.frame.fft_size();
        let frames = self.frame.frames_for(x.len());
        let window = hann(win);
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut prev = vec![0.0; n_fft / 2 + 1];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let seg = &x[t * hop..t * hop + win];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, c) in buf.iter_mut().take(win).enumerate() {
                c.re = seg[i] * window[i];
            }
            fft.process(&mut buf);
            let mag: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm()).collect();
            let total: f64 = mag.iter().sum();
            let rise: f64 = mag.iter().zip(&prev).map(|(m, p)| (m - p).max(0.0)).sum();
            let flux = if total > 0.0 { rise / total } else { 0.0 };
            let rms = (seg.iter().map(|v| v * v).sum::<f64>() / win as f64).sqrt();
            out.push((flux, rms));
            prev = mag;
        }
        out
    }

    pub fn detect(&self, wave: &Waveform) -> Vec<Segment> {
        let feats = self.frame_features(wave.samples());
        let peak = feats.iter().map(|f| f.1).fold(0.0, f64::max);
        if peak == 0.0 {
            return Vec::new();
        }
        let floor = peak * 10f64.powf(self.energy_floor_db / 20.0);
        let hop = self.frame.hop_samples();
        let win = self.frame.win_samples();
        let min_len = (self.min_len_ms * wave.sample_rate() as f64 / 1000.0).round() as usize;
        let mut segs: Vec<Segment> = Vec::new();
        let mut t = 0;
        while t < feats.len() {
            let (flux, rms) = feats[t];
            if flux > self.flux_threshold && rms >= floor {
                let a = t;
                while t < feats.len() && feats[t].1 >= floor {
                    t += 1;
                }
                let seg = Segment {
                    start_sample: a * hop,
                    end_sample: (t - 1) * hop + win,
                };
                // Frames overlap, so a run reopening right after a short dip
                // can reach back into the previous one.
                match segs.last_mut() {
                    Some(last) if last.end_sample > seg.start_sample => {
                        last.end_sample = seg.end_sample;
                    }
                    _ => segs.push(seg),
                }
            } else {
                t += 1;
            }
        }
        segs.retain(|s| s.len() >= min_len);
        segs
    }
}

/// Detector with the default frame geometry and a -30 dB energy floor.
pub fn detect_segments(wave: &Waveform, flux_threshold: f64, min_len_ms: f64) -> Vec<Segment> {
    detect_segments_with(
        wave,
        &SegmentDetector {
            flux_threshold,
            min_len_ms,
            ..SegmentDetector::default()
        },
    )
}

pub fn detect_segments_with(wave: &Waveform, det: &SegmentDetector) -> Vec<Segment> {
    det.detect(wave)
}
