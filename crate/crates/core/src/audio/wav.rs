use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{FrontendError, Result, Waveform};

/// Reads a PCM or float WAV, averages channels to mono, scales integer
/// codes to `[-1, 1]` and resamples to `target_rate`.
pub fn load_wav(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let unreadable = |source| FrontendError::Unreadable {
        path: name.clone(),
        source,
    };
    let mut reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::Unsupported | hound::Error::InvalidSampleFormat => {
            FrontendError::UnsupportedEncoding {
                path: name.clone(),
                detail: e.to_string(),
            }
        }
        e => unreadable(e),
    })?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.sample_rate == 0 {
        return Err(FrontendError::UnsupportedEncoding {
            path: name,
            detail: format!("{} channels at {} Hz", spec.channels, spec.sample_rate),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ 1..=32) => {
            let full = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f64 / full).clamp(-1.0, 1.0)))
                .collect::<std::result::Result<_, _>>()
                .map_err(unreadable)?
        }
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(unreadable)?,
        (fmt, bits) => {
            return Err(FrontendError::UnsupportedEncoding {
                path: name,
                detail: format!("{fmt:?} with {bits} bits per sample"),
            })
        }
    };
    let ch = spec.channels as usize;
    if interleaved.len() < ch {
        return Err(FrontendError::Empty(name));
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(ch)
        .map(|frame| frame.iter().sum::<f64>() / ch as f64)
        .collect();
    let wave = Waveform::new(mono, spec.sample_rate)?;
    Ok(resample_linear(&wave, target_rate))
}

/// Linear-interpolation resampler. Output length is `round(n * to / from)`.
pub fn resample_linear(wave: &Waveform, target_rate: u32) -> Waveform {
    let from = wave.sample_rate();
    if from == target_rate || wave.is_empty() {
        return Waveform {
            samples: wave.samples().to_vec(),
            sample_rate: target_rate,
        };
    }
    let x = wave.samples();
    let n_out = (x.len() as f64 * target_rate as f64 / from as f64).round() as usize;
    let step = from as f64 / target_rate as f64;
    let last = x.len() - 1;
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = pos - i0 as f64;
            x[i0] + (x[i1] - x[i0]) * frac.min(1.0)
        })
        .collect();
    Waveform {
        samples,
        sample_rate: target_rate,
    }
}

/// Writes a mono 16-bit PCM file.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let wrap = |source| FrontendError::Unreadable {
        path: path.display().to_string(),
        source,
    };
    let mut w = WavWriter::create(path, spec).map_err(wrap)?;
    for &s in wave.samples() {
        let code = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        w.write_sample(code).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}
