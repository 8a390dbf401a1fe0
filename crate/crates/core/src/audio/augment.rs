use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Spectrogram;

/// SpecAugment settings. Mask widths are exact; positions are random.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SpecAugment {
    pub time_masks: usize,
    pub freq_masks: usize,
    pub time_width: usize,
    pub freq_width: usize,
    /// Circular shift along time, in frames.
    pub shift_frames: usize,
}

impl Default for SpecAugment {
    fn default() -> Self {
        Self {
            time_masks: 1,
            freq_masks: 1,
            time_width: 4,
            freq_width: 8,
            shift_frames: 0,
        }
    }
}

/// Rectangular time-frequency masks filled with `fill` (normally `ln eps`).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MaskPolicy {
    pub count: usize,
    pub time_width: usize,
    pub freq_width: usize,
    pub fill: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            count: 2,
            time_width: 4,
            freq_width: 4,
            fill: 1e-10f64.ln(),
        }
    }
}

impl MaskPolicy {
    pub fn none() -> Self {
        Self {
            count: 0,
            ..Self::default()
        }
    }
}

fn fill_rect(spec: &mut Spectrogram, t0: usize, tw: usize, f0: usize, fw: usize, v: f64) {
    let bins = spec.bins();
    let vals = spec.values_mut();
    for t in t0..t0 + tw {
        vals[t * bins + f0..t * bins + f0 + fw].fill(v);
    }
}

/// Circular time shift, then time and frequency masks at the input mean.
pub fn spec_augment<R: Rng + ?Sized>(
    spec: &Spectrogram,
    cfg: &SpecAugment,
    rng: &mut R,
) -> Spectrogram {
    let (frames, bins) = (spec.frames(), spec.bins());
    let fill = spec.mean();
    let shift = cfg.shift_frames % frames;
    let mut out = spec.clone();
    if shift != 0 {
        let src = spec.values();
        let dst = out.values_mut();
        for t in 0..frames {
            let s = (t + frames - shift) % frames;
            dst[t * bins..(t + 1) * bins].copy_from_slice(&src[s * bins..(s + 1) * bins]);
        }
    }
    let tw = cfg.time_width.min(frames);
    let fw = cfg.freq_width.min(bins);
    for _ in 0..cfg.time_masks {
        let t0 = rng.gen_range(0..=frames - tw);
        fill_rect(&mut out, t0, tw, 0, bins, fill);
    }
    for _ in 0..cfg.freq_masks {
        let f0 = rng.gen_range(0..=bins - fw);
        fill_rect(&mut out, 0, frames, f0, fw, fill);
    }
    out
}

/// i.i.d. Gaussian perturbation followed by rectangular masks.
pub fn corrupt<R: Rng + ?Sized>(
    spec: &Spectrogram,
    noise_std: f64,
    policy: &MaskPolicy,
    rng: &mut R,
) -> Spectrogram {
    let mut out = spec.clone();
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("finite positive std");
        out.values_mut()
            .iter_mut()
            .for_each(|v| *v += normal.sample(rng));
    }
    let tw = policy.time_width.min(spec.frames());
    let fw = policy.freq_width.min(spec.bins());
    for _ in 0..policy.count {
        let t0 = rng.gen_range(0..=spec.frames() - tw);
        let f0 = rng.gen_range(0..=spec.bins() - fw);
        fill_rect(&mut out, t0, tw, f0, fw, policy.fill);
    }
    out
}
