//! Audio front end: waveform ingestion, synthetic sources, SNR mixing,
//! segment detection, log-mel features and training-time corruptions.
//!
//! Every function here is pure given its inputs and the caller's RNG.

mod augment;
mod mel;
mod segment;
mod synth;
mod wav;

pub use augment::{corrupt, spec_augment, MaskPolicy, SpecAugment};
pub use mel::{hz_to_mel, log_mel, mel_to_hz, LogMel};
pub use segment::{detect_segments, detect_segments_with, SegmentDetector};
pub use synth::{synth_cry, synth_noise, synth_ood, NoiseProfile, NUM_CRY_CLASSES};
pub use wav::{load_wav, resample_linear, write_wav};

use std::io::{Read, Write};

/// Sample rate every waveform is brought to on ingestion.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, thiserror::Error)]
pub enum FrontendError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("{0} contains no audio samples")]
    Empty(String),
    #[error("{path}: unsupported encoding ({detail})")]
    UnsupportedEncoding { path: String, detail: String },
    #[error("invalid frontend config: {0}")]
    Config(String),
    #[error("waveform too short: {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("{0} has zero power")]
    Silent(&'static str),
    #[error("invalid class id {0}")]
    InvalidClass(usize),
    #[error("duration {0} s below the 0.5 s minimum")]
    DurationTooShort(f64),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FrontendError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(FrontendError::NonFinite(i));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        mean_power(&self.samples)
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    /// Samples `[start, end)`, clamped to the waveform.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let end = end.min(self.samples.len());
        let start = start.min(end);
        Self {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}

pub(crate) fn mean_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Log-mel analysis settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub eps: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            win_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 64,
            eps: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(64..=128).contains(&self.n_mels) {
            return Err(FrontendError::Config(format!(
                "n_mels must lie in 64..=128, got {}",
                self.n_mels
            )));
        }
        if !(self.eps > 0.0) {
            return Err(FrontendError::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        if !(self.hop_ms > 0.0 && self.hop_ms <= self.win_ms) {
            return Err(FrontendError::Config(format!(
                "need 0 < hop_ms <= win_ms, got hop {} win {}",
                self.hop_ms, self.win_ms
            )));
        }
        Ok(())
    }

    pub fn win_samples(&self) -> usize {
        (self.win_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    /// Next power of two at or above the window length.
    pub fn fft_size(&self) -> usize {
        self.win_samples().next_power_of_two()
    }

    pub fn log_floor(&self) -> f64 {
        self.eps.ln()
    }

    /// Frames produced for `n` samples (0 when shorter than one window).
    pub fn frames_for(&self, n: usize) -> usize {
        let win = self.win_samples();
        if n < win {
            0
        } else {
            (n - win) / self.hop_samples() + 1
        }
    }

    /// Samples spanned by `frames` consecutive frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop_samples() + self.win_samples()
        }
    }
}

/// `frames x bins` grid of log-mel energies, row-major by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    bins: usize,
    values: Vec<f64>,
}

impl Spectrogram {
    pub fn new(frames: usize, bins: usize, values: Vec<f64>) -> Result<Self> {
        if frames * bins != values.len() || frames == 0 || bins == 0 {
            return Err(FrontendError::Config(format!(
                "spectrogram {frames}x{bins} with {} values",
                values.len()
            )));
        }
        Ok(Self {
            frames,
            bins,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.bins + f]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Frames `[start, start + len)`.
    pub fn crop_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames || len == 0 {
            return Err(FrontendError::TooShort {
                len: self.frames,
                need: start + len,
            });
        }
        Self::new(
            len,
            self.bins,
            self.values[start * self.bins..(start + len) * self.bins].to_vec(),
        )
    }

    /// Debug dump: little-endian `u32 T`, `u32 F`, then `T*F` `f64` row-major.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.frames as u32).to_le_bytes())?;
        w.write_all(&(self.bins as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut u = [0u8; 4];
        r.read_exact(&mut u)?;
        let frames = u32::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let bins = u32::from_le_bytes(u) as usize;
        let mut values = Vec::with_capacity(frames * bins);
        let mut b = [0u8; 8];
        for _ in 0..frames * bins {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        Self::new(frames, bins, values)
    }
}

/// Sample range `[start_sample, end_sample)` of a detected cry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct Segment {
    pub start_sample: usize,
    pub end_sample: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end_sample - self.start_sample
    }

    pub fn is_empty(&self) -> bool {
        self.end_sample == self.start_sample
    }
}

/// Returns `signal + alpha * noise` with `alpha` chosen so the two
/// components sit exactly `snr_db` apart. Noise is tiled when shorter than
/// the signal and cropped otherwise. `snr_db = +inf` returns the signal.
pub fn mix_at_snr(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if signal.sample_rate != noise.sample_rate {
        return Err(FrontendError::RateMismatch(
            signal.sample_rate,
            noise.sample_rate,
        ));
    }
    if noise.is_empty() {
        return Err(FrontendError::Silent("noise"));
    }
    let aligned: Vec<f64> = noise
        .samples
        .iter()
        .copied()
        .cycle()
        .take(signal.len())
        .collect();
    let p_s = signal.power();
    let p_n = mean_power(&aligned);
    if p_s == 0.0 {
        return Err(FrontendError::Silent("signal"));
    }
    if p_n == 0.0 {
        return Err(FrontendError::Silent("noise"));
    }
    let alpha = snr_alpha(p_s, p_n, snr_db);
    let samples = signal
        .samples
        .iter()
        .zip(&aligned)
        .map(|(s, n)| s + alpha * n)
        .collect();
    Waveform::new(samples, signal.sample_rate)
}

/// Noise gain that puts `p_n` exactly `snr_db` below `p_s`.
pub fn snr_alpha(p_s: f64, p_n: f64, snr_db: f64) -> f64 {
    (p_s / (p_n * 10f64.powf(snr_db / 10.0))).sqrt()
}
