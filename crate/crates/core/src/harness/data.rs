use std::path::{Path, PathBuf};

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use rayon::prelude::*;

use super::config::{ExperimentConfig, OodSource};
use crate::audio::{
    detect_segments, load_wav, log_mel, mix_at_snr, synth_cry, synth_noise, synth_ood,
    FrontendConfig, NoiseProfile, Spectrogram, Waveform, SAMPLE_RATE,
};
use crate::error::{Error, Result};

/// One labelled model input.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub spec: Spectrogram,
    pub label: usize,
    pub site: usize,
    pub snr_db: f64,
    /// Noise-free crop aligned with `spec`, when a noise overlay was applied.
    pub clean: Option<Spectrogram>,
    /// One copy per `eval_snr_levels` entry, for held-out stress tests.
    pub stress: Vec<Spectrogram>,
}

#[derive(Debug, Clone)]
pub struct SiteDatasets {
    pub clips: Vec<Clip>,
    /// Clip indices per site; disjoint and covering.
    pub sites: Vec<Vec<usize>>,
    /// Non-cry environmental clips, without overlays.
    pub ood: Vec<Spectrogram>,
}

impl SiteDatasets {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Derives an independent stream seed from a base seed and two tags.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const STREAM_CRY: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_OOD: u64 = 3;
const STREAM_PARTITION: u64 = 4;
const STREAM_STRESS: u64 = 5;

fn dirichlet_sample<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let d = Dirichlet::new_with_size(alpha, n).expect("alpha checked positive");
    loop {
        let p: Vec<f64> = d.sample(rng);
        if p.iter().all(|v| v.is_finite()) && p.iter().sum::<f64>() > 0.0 {
            return p;
        }
    }
}

const MAX_PARTITION_TRIES: usize = 10_000;

/// Splits clip indices across `n_sites` with per-class Dirichlet(`alpha`)
/// proportions, resampling until every site gets a clip (and, with
/// `every_class`, at least one clip of every class present).
pub fn partition_non_iid<R: Rng + ?Sized>(
    labels: &[usize],
    n_sites: usize,
    alpha: f64,
    every_class: bool,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if labels.len() < n_sites || n_sites == 0 {
        return Err(Error::Config(format!(
            "{} clips cannot fill {n_sites} sites",
            labels.len()
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!(
            "dirichlet alpha must be positive, got {alpha}"
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let by_class: Vec<Vec<usize>> = (0..classes)
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    if every_class && by_class.iter().any(|v| !v.is_empty() && v.len() < n_sites) {
        return Err(Error::Config(
            "some class has fewer clips than sites".into(),
        ));
    }
    for _ in 0..MAX_PARTITION_TRIES {
        let mut sites = vec![Vec::new(); n_sites];
        let mut ok = true;
        for members in by_class.iter().filter(|m| !m.is_empty()) {
            let mut idx = members.clone();
            idx.shuffle(rng);
            let p = dirichlet_sample(n_sites, alpha, rng);
            let mut cum = 0.0;
            let mut start = 0;
            for (s, ps) in p.iter().enumerate() {
                cum += ps;
                let end = if s + 1 == n_sites {
                    idx.len()
                } else {
                    ((cum * idx.len() as f64).round() as usize).clamp(start, idx.len())
                };
                if every_class && end == start {
                    ok = false;
                }
                sites[s].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        if ok && sites.iter().all(|s| !s.is_empty()) {
            for s in sites.iter_mut() {
                s.sort_unstable();
            }
            return Ok(sites);
        }
    }
    Err(Error::Config(format!(
        "no valid partition of {} clips into {n_sites} sites after {MAX_PARTITION_TRIES} draws",
        labels.len()
    )))
}

/// Log-mel of `wave` cropped to `frames`, starting at the first detected
/// onset when it leaves room for the window, else centred.
pub fn features(wave: &Waveform, fe: &FrontendConfig, frames: usize) -> Result<Spectrogram> {
    let spec = log_mel(wave, fe)?;
    let start = crop_start(wave, spec.frames(), fe, frames)?;
    Ok(spec.crop_frames(start, frames)?)
}

fn crop_start(wave: &Waveform, total: usize, fe: &FrontendConfig, frames: usize) -> Result<usize> {
    if total < frames {
        return Err(Error::Frontend(crate::audio::FrontendError::TooShort {
            len: wave.len(),
            need: fe.samples_for(frames),
        }));
    }
    let slack = total - frames;
    Ok(detect_segments(wave, 0.3, 100.0)
        .first()
        .map(|s| s.start_sample / fe.hop_samples())
        .filter(|&f| f <= slack)
        .unwrap_or(slack / 2))
}

/// Features of `noisy` plus the matching crop of `clean`; the window is
/// placed from the noisy signal, as it would be at inference.
fn paired_features(
    noisy: &Waveform,
    clean: &Waveform,
    fe: &FrontendConfig,
    frames: usize,
) -> Result<(Spectrogram, Spectrogram)> {
    let spec = log_mel(noisy, fe)?;
    let start = crop_start(noisy, spec.frames(), fe, frames)?;
    let clean = log_mel(clean, fe)?;
    Ok((
        spec.crop_frames(start, frames)?,
        clean.crop_frames(start, frames)?,
    ))
}

fn site_profile(site: usize) -> NoiseProfile {
    NoiseProfile::ALL[site % NoiseProfile::ALL.len()]
}

fn overlay(clean: &Waveform, site: usize, snr_db: f64, rng: &mut ChaCha8Rng) -> Result<Waveform> {
    if snr_db == f64::INFINITY {
        return Ok(clean.clone());
    }
    let noise = synth_noise(site_profile(site), clean.len(), rng);
    Ok(mix_at_snr(clean, &noise, snr_db)?)
}

struct Source {
    wave: Waveform,
    label: usize,
    site: Option<usize>,
}

fn manifest_sources(path: &Path) -> Result<Vec<Source>> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let field = |k: usize| row.get(k).map(str::trim).filter(|s| !s.is_empty());
        let bad = |what: &str| Error::Config(format!("{}: row {}: {what}", path.display(), i + 2));
        let file = field(0).ok_or_else(|| bad("missing path"))?;
        let label = field(1)
            .ok_or_else(|| bad("missing label"))?
            .parse()
            .map_err(|_| bad("bad label"))?;
        let site = field(2)
            .map(|s| s.parse().map_err(|_| bad("bad site")))
            .transpose()?;
        let p = PathBuf::from(file);
        let p = if p.is_absolute() { p } else { base.join(p) };
        out.push(Source {
            wave: load_wav(&p, SAMPLE_RATE)?,
            label,
            site,
        });
    }
    if out.is_empty() {
        return Err(Error::Config(format!("{} lists no clips", path.display())));
    }
    Ok(out)
}

fn ood_sources(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Waveform>> {
    match &cfg.ood_source {
        OodSource::Synthetic => (0..cfg.ood_clips)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_OOD, i as u64));
                Ok(synth_ood(cfg.clip_seconds, &mut rng)?)
            })
            .collect(),
        OodSource::WavDir(dir) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Config(format!("no .wav files in {}", dir.display())));
            }
            files
                .iter()
                .map(|p| Ok(load_wav(p, SAMPLE_RATE)?))
                .collect()
        }
    }
}

/// Cries (synthetic or from the manifest) partitioned across sites, each
/// overlaid with its site's noise at an SNR drawn from the grid, plus the
/// OOD pool.
pub fn build_site_datasets(cfg: &ExperimentConfig, seed: u64) -> Result<SiteDatasets> {
    cfg.validate()?;
    let mut sources = match &cfg.manifest {
        Some(m) => manifest_sources(m)?,
        None => {
            let k = crate::audio::NUM_CRY_CLASSES;
            let n = k * cfg.clips_per_class * cfg.sites;
            (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_CRY, i as u64));
                    Ok(Source {
                        wave: synth_cry(i % k, cfg.clip_seconds, &mut rng)?,
                        label: i % k,
                        site: None,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    if let Some(s) = sources.iter().find(|s| s.label >= cfg.model.n_classes) {
        return Err(Error::Config(format!(
            "label {} exceeds n_classes {}",
            s.label, cfg.model.n_classes
        )));
    }
    let mut site_of = vec![0usize; sources.len()];
    if sources.iter().all(|s| s.site.is_some()) {
        for (i, s) in sources.iter().enumerate() {
            let site = s.site.expect("checked");
            if site >= cfg.sites {
                return Err(Error::Config(format!(
                    "manifest site {site} outside 0..{}",
                    cfg.sites
                )));
            }
            site_of[i] = site;
        }
    } else {
        let labels: Vec<usize> = sources.iter().map(|s| s.label).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_PARTITION, 0));
        let parts = partition_non_iid(&labels, cfg.sites, cfg.dirichlet_alpha, true, &mut rng)?;
        for (s, idx) in parts.iter().enumerate() {
            for &i in idx {
                site_of[i] = s;
            }
        }
    }
    let waves: Vec<(Waveform, usize, usize)> = sources
        .drain(..)
        .zip(&site_of)
        .map(|(s, &site)| (s.wave, s.label, site))
        .collect();
    let clips = waves
        .into_par_iter()
        .enumerate()
        .map(|(i, (wave, label, site))| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_NOISE, i as u64));
            let snr_db = cfg.snr_levels[rng.gen_range(0..cfg.snr_levels.len())];
            let (spec, clean) = if snr_db == f64::INFINITY {
                (features(&wave, &cfg.frontend, cfg.frames)?, None)
            } else {
                let mixed = overlay(&wave, site, snr_db, &mut rng)?;
                let (s, c) = paired_features(&mixed, &wave, &cfg.frontend, cfg.frames)?;
                (s, Some(c))
            };
            let stress = cfg
                .eval_snr_levels
                .iter()
                .enumerate()
                .map(|(j, &db)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                        seed,
                        STREAM_STRESS,
                        (i * 64 + j) as u64,
                    ));
                    features(
                        &overlay(&wave, site, db, &mut rng)?,
                        &cfg.frontend,
                        cfg.frames,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Clip {
                spec,
                label,
                site,
                snr_db,
                clean,
                stress,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ood = ood_sources(cfg, seed)?
        .par_iter()
        .map(|wave| features(wave, &cfg.frontend, cfg.frames))
        .collect::<Result<Vec<_>>>()?;
    let mut sites = vec![Vec::new(); cfg.sites];
    for (i, c) in clips.iter().enumerate() {
        sites[c.site].push(i);
    }
    Ok(SiteDatasets { clips, sites, ood })
}
