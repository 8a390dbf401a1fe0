//! Fixtures shared by the benchmarks.

use fedcry_core::audio::{log_mel, synth_cry, FrontendConfig, Spectrogram, NUM_CRY_CLASSES};
use fedcry_core::fed::Named;
use fedcry_core::harness::desk_model;
use fedcry_core::model::{init_params, ModelConfig, ParamSet};
use fedcry_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FRAMES: usize = 48;

pub struct Batch {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub specs: Vec<Spectrogram>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn refs(&self) -> Vec<&Spectrogram> {
        self.specs.iter().collect()
    }
}

/// `n` synthetic cries cropped to the desk model's input length.
pub fn desk_batch(n: usize, seed: u64) -> Batch {
    let cfg = desk_model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(&cfg, &mut rng).expect("desk model initializes");
    let fe = FrontendConfig::default();
    let labels: Vec<usize> = (0..n).map(|i| i % NUM_CRY_CLASSES).collect();
    let specs = labels
        .iter()
        .map(|&c| {
            let w = synth_cry(c, 0.8, &mut rng).expect("valid class");
            log_mel(&w, &fe)
                .and_then(|s| s.crop_frames(0, FRAMES))
                .expect("long enough")
        })
        .collect();
    Batch {
        cfg,
        params,
        specs,
        labels,
    }
}

/// Uniform noise shaped like the uploaded subset of `params`.
pub fn random_delta(params: &ParamSet, seed: u64) -> Named {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params
        .adapted_subset()
        .into_iter()
        .map(|(n, t)| {
            let data = (0..t.numel()).map(|_| rng.gen_range(-0.01..0.01)).collect();
            (
                n.to_string(),
                Tensor::new(t.shape().to_vec(), data).expect("shape"),
            )
        })
        .collect()
}
