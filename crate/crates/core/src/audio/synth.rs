//! Synthetic stand-ins for cry recordings, site noise and out-of-distribution
//! sounds.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{FrontendError, Result, Waveform, SAMPLE_RATE};

pub const NUM_CRY_CLASSES: usize = 5;

const HARMONICS: usize = 10;
const RAMP_S: f64 = 0.04;

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        x.iter_mut().for_each(|v| *v *= peak / m);
    }
}

fn ramp_envelope(n: usize, sr: f64) -> impl Fn(usize) -> f64 {
    let ramp = ((RAMP_S * sr) as usize).clamp(1, n / 2 + 1);
    move |i: usize| {
        let up = (i as f64 / ramp as f64).min(1.0);
        let down = ((n - 1 - i) as f64 / ramp as f64).min(1.0);
        up.min(down)
    }
}

/// Harmonic stack for cry class `class_id`.
///
/// Class `k` gets fundamental `350 + 60k` Hz (with about 2% per-clip
/// jitter), AM rate `3 + 2k` Hz, a spectral tilt that steepens with `k`,
/// slow vibrato and a -30 dB broadband noise bed.
pub fn synth_cry<R: Rng + ?Sized>(
    class_id: usize,
    duration_s: f64,
    rng: &mut R,
) -> Result<Waveform> {
    if class_id >= NUM_CRY_CLASSES {
        return Err(FrontendError::InvalidClass(class_id));
    }
    if !(duration_s >= 0.5) {
        return Err(FrontendError::DurationTooShort(duration_s));
    }
    let sr = SAMPLE_RATE as f64;
    let n = (duration_s * sr).round() as usize;
    let k = class_id as f64;
    let f0 = (350.0 + 60.0 * k) * (1.0 + rng.gen_range(-0.02..0.02));
    let am_rate = (3.0 + 2.0 * k) * (1.0 + rng.gen_range(-0.05..0.05));
    let am_depth = rng.gen_range(0.35..0.5);
    let tilt = 0.8 + 0.25 * k;
    let vib_rate = rng.gen_range(4.0..7.0);
    let vib_depth = rng.gen_range(0.005..0.015);
    let phases: Vec<f64> = (0..HARMONICS)
        .map(|_| rng.gen_range(0.0..2.0 * PI))
        .collect();
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let env = ramp_envelope(n, sr);

    let mut x = vec![0.0; n];
    let mut theta = 0.0;
    for (i, out) in x.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
        theta += 2.0 * PI * f / sr;
        let mut s = 0.0;
        for (h, ph) in phases.iter().enumerate() {
            let m = (h + 1) as f64;
            if m * f >= sr / 2.0 {
                break;
            }
            s += (m * theta + ph).sin() / m.powf(tilt);
        }
        let am = 1.0 - am_depth * 0.5 * (1.0 + (2.0 * PI * am_rate * t + am_phase).cos());
        *out = s * am * env(i);
    }
    normalize_peak(&mut x, 0.5);
    let bed = 0.5 * 10f64.powf(-30.0 / 20.0);
    for v in x.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v += bed * z / 3.0;
    }
    Waveform::new(x, SAMPLE_RATE)
}

/// Acoustic environment of a site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseProfile {
    /// Mains hum and harmonics over low-passed ventilator hiss.
    Nicu,
    /// Several low-pitched talkers with syllabic gating.
    Home,
    /// Broadband bursts over a faint wind floor.
    Outdoor,
}

impl NoiseProfile {
    pub const ALL: [NoiseProfile; 3] = [
        NoiseProfile::Nicu,
        NoiseProfile::Home,
        NoiseProfile::Outdoor,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            NoiseProfile::Nicu => "nicu",
            NoiseProfile::Home => "home",
            NoiseProfile::Outdoor => "outdoor",
        }
    }
}

fn one_pole_lowpass(x: &mut [f64], cutoff_hz: f64, sr: f64) {
    let a = (-2.0 * PI * cutoff_hz / sr).exp();
    let mut y = 0.0;
    for v in x.iter_mut() {
        y = (1.0 - a) * *v + a * y;
        *v = y;
    }
}

fn white<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `n` samples of noise for the given site profile, peak 0.5.
pub fn synth_noise<R: Rng + ?Sized>(profile: NoiseProfile, n: usize, rng: &mut R) -> Waveform {
    let sr = SAMPLE_RATE as f64;
    let mut x = match profile {
        NoiseProfile::Nicu => {
            let mains = if rng.gen_bool(0.5) { 50.0 } else { 60.0 };
            let ph: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let mut hiss = white(n, rng);
            one_pole_lowpass(&mut hiss, 400.0, sr);
            let hiss_gain = 1.0 / hiss.iter().map(|v| v.abs()).fold(1e-12, f64::max);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    let hum: f64 = ph
                        .iter()
                        .enumerate()
                        .map(|(h, p)| {
                            (2.0 * PI * mains * (h + 1) as f64 * t + p).sin() / (h + 1) as f64
                        })
                        .sum();
                    0.6 * hum + 0.8 * hiss_gain * hiss[i]
                })
                .collect()
        }
        NoiseProfile::Home => {
            let mut acc = vec![0.0; n];
            for _ in 0..4 {
                let f0 = rng.gen_range(90.0..200.0);
                let syl = rng.gen_range(3.0..5.0);
                let sp = rng.gen_range(0.0..2.0 * PI);
                let ph: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
                let formant = rng.gen_range(500.0..1200.0);
                for (i, out) in acc.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    let gate = (0.5 + 0.5 * (2.0 * PI * syl * t + sp).sin()).powi(2);
                    let mut s = 0.0;
                    for (h, p) in ph.iter().enumerate() {
                        let f = f0 * (h + 1) as f64;
                        if f > 3500.0 {
                            break;
                        }
                        let w = (-((f - formant) / 600.0).powi(2)).exp() + 0.1;
                        s += w * (2.0 * PI * f * t + p).sin();
                    }
                    *out += gate * s;
                }
            }
            acc
        }
        NoiseProfile::Outdoor => {
            let mut floor = white(n, rng);
            one_pole_lowpass(&mut floor, 200.0, sr);
            let fg = 0.3 / floor.iter().map(|v| v.abs()).fold(1e-12, f64::max);
            let mut gate = vec![0.0; n];
            let mut i = 0;
            while i < n {
                i += rng.gen_range((0.03 * sr) as usize..(0.25 * sr) as usize);
                let len = rng.gen_range((0.05 * sr) as usize..(0.2 * sr) as usize);
                for g in gate.iter_mut().skip(i).take(len) {
                    *g = 1.0;
                }
                i += len;
            }
            let burst = white(n, rng);
            (0..n)
                .map(|i| fg * floor[i] + 0.35 * gate[i] * burst[i])
                .collect()
        }
    };
    normalize_peak(&mut x, 0.5);
    Waveform::new(x, SAMPLE_RATE).expect("synthesised noise is finite")
}

/// Non-cry sound: a linear chirp or band-limited white noise, peak 0.5.
pub fn synth_ood<R: Rng + ?Sized>(duration_s: f64, rng: &mut R) -> Result<Waveform> {
    if !(duration_s >= 0.5) {
        return Err(FrontendError::DurationTooShort(duration_s));
    }
    let sr = SAMPLE_RATE as f64;
    let n = (duration_s * sr).round() as usize;
    let env = ramp_envelope(n, sr);
    let mut x: Vec<f64> = if rng.gen_bool(0.5) {
        let f_a = rng.gen_range(200.0..1000.0);
        let f_b = rng.gen_range(2000.0..6000.0);
        let (f_a, f_b) = if rng.gen_bool(0.5) {
            (f_a, f_b)
        } else {
            (f_b, f_a)
        };
        let rate = (f_b - f_a) / duration_s;
        (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                (2.0 * PI * (f_a * t + 0.5 * rate * t * t)).sin() * env(i)
            })
            .collect()
    } else {
        let mut w = white(n, rng);
        one_pole_lowpass(&mut w, rng.gen_range(1500.0..6000.0), sr);
        w.iter_mut().enumerate().for_each(|(i, v)| *v *= env(i));
        w
    };
    normalize_peak(&mut x, 0.5);
    Waveform::new(x, SAMPLE_RATE)
}
