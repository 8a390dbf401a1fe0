use super::*;
use crate::audio::{
    self, log_mel, mix_at_snr, synth_cry, synth_noise, FrontendConfig, NoiseProfile,
};
use crate::gradcheck;
use crate::model::{init_params, ParamSet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let v = f(&mut tape).unwrap();
    tape.value(v).item()
}

fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
}

#[test]
fn dae_loss_examples() {
    let w0 = DaeLossWeights {
        beta_t: 0.0,
        beta_f: 0.0,
    };
    let l = eval(|t| {
        let a = t.constant(t2(2, 2, &[1.0; 4]));
        let b = t.constant(t2(2, 2, &[0.0; 4]));
        dae_loss(t, a, b, &w0)
    });
    assert_eq!(l, 1.0);
    let l = eval(|t| {
        let a = t.constant(t2(1, 2, &[0.0, 2.0]));
        let b = t.constant(t2(1, 2, &[0.0, 0.0]));
        dae_loss(
            t,
            a,
            b,
            &DaeLossWeights {
                beta_t: 0.0,
                beta_f: 1.0,
            },
        )
    });
    assert_eq!(l, 4.0);
    // Along time with a 3x1 grid: diffs of (1, 4, 9) - 0 are 3 and 5.
    let l = eval(|t| {
        let a = t.constant(t2(3, 1, &[1.0, 4.0, 9.0]));
        let b = t.constant(t2(3, 1, &[0.0; 3]));
        dae_loss(
            t,
            a,
            b,
            &DaeLossWeights {
                beta_t: 2.0,
                beta_f: 5.0,
            },
        )
    });
    assert!((l - ((1.0 + 16.0 + 81.0) / 3.0 + 2.0 * 4.0)).abs() < 1e-12);
}

#[test]
fn dae_loss_rejects_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(
        dae_loss(&mut tape, a, b, &DaeLossWeights::default()),
        Err(ObjectiveError::Shape { .. })
    ));
}

proptest! {
    #[test]
    fn dae_loss_of_identity_is_zero(t in 1usize..6, f in 1usize..6, seed in 0u64..1000) {
        let x = Tensor::randn(&[2, 1, t, f], 3.0, &mut rng(seed));
        let l = eval(|tp| {
            let a = tp.constant(x.clone());
            let b = tp.constant(x.clone());
            dae_loss(tp, a, b, &DaeLossWeights { beta_t: 0.7, beta_f: 1.3 })
        });
        prop_assert_eq!(l, 0.0);
    }
}

#[test]
fn cross_entropy_examples() {
    let l = eval(|t| {
        let z = t.constant(Tensor::zeros(&[1, 5]));
        cross_entropy(t, z, &[3])
    });
    assert!((l - 5f64.ln()).abs() < 1e-15);
    let l = eval(|t| {
        let z = t.constant(t2(1, 5, &[0.0, 0.0, 1e6, 0.0, 0.0]));
        cross_entropy(t, z, &[2])
    });
    assert!(l.abs() < 1e-12);
    let l = eval(|t| {
        let z = t.constant(Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0]));
        cross_entropy(t, z, &[0])
    });
    let e = std::f64::consts::E;
    assert!((l + (e / (e + 4.0)).ln()).abs() < 1e-12);
    assert!((l - 0.9048).abs() < 1e-4);
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[1, 5]));
    assert!(matches!(
        cross_entropy(&mut tape, z, &[5]),
        Err(ObjectiveError::Label {
            label: 5,
            classes: 5
        })
    ));
}

#[test]
fn consistency_examples() {
    let l = eval(|t| {
        let a = t.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let b = t.constant(Tensor::from_vec(vec![0.0, 1.0]));
        consistency_loss(t, a, b)
    });
    assert_eq!(l, 2.0);
    let l = eval(|t| {
        let a = t.constant(Tensor::from_vec(vec![0.3, -2.0]));
        consistency_loss(t, a, a)
    });
    assert_eq!(l, 0.0);
}

#[test]
fn consistency_gradient() {
    let f = Tensor::randn(&[6], 1.0, &mut rng(1));
    let fp = Tensor::randn(&[6], 1.0, &mut rng(2));
    let mut tape = Tape::new();
    let a = tape.param(f.clone());
    let b = tape.constant(fp.clone());
    let l = consistency_loss(&mut tape, a, b).unwrap();
    let g = tape.backward(l).unwrap().get(a);
    for i in 0..6 {
        assert!((g.data()[i] - 2.0 * (f.data()[i] - fp.data()[i])).abs() < 1e-12);
    }
    let r = gradcheck::check(&[f, fp], 1e-5, |t, v| {
        Ok(consistency_loss(t, v[0], v[1]).unwrap())
    })
    .unwrap();
    assert!(r.max_rel_error() < 1e-4);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let w = DaeLossWeights {
        beta_t: 0.4,
        beta_f: 0.9,
    };
    let xh = Tensor::randn(&[2, 1, 4, 5], 1.0, &mut rng(3));
    let x = Tensor::randn(&[2, 1, 4, 5], 1.0, &mut rng(4));
    let r = gradcheck::check(&[xh, x], 1e-6, |t, v| {
        Ok(dae_loss(t, v[0], v[1], &w).unwrap())
    })
    .unwrap();
    assert!(r.max_rel_error() < 1e-4, "{:?}", r.rel_errors);
    let z = Tensor::randn(&[3, 5], 2.0, &mut rng(5));
    let r = gradcheck::check(&[z], 1e-5, |t, v| {
        Ok(cross_entropy(t, v[0], &[4, 0, 2]).unwrap())
    })
    .unwrap();
    assert!(r.max_rel_error() < 1e-4);
}

fn tiny() -> ModelConfig {
    ModelConfig {
        token_dim: 8,
        layers: 1,
        heads: 2,
        mlp_dim: 16,
        dae_channels: [4, 6],
        adapter_rank: 2,
        adapter_alpha: 2.0,
        ..ModelConfig::default()
    }
}

fn specs(n: usize, seed: u64) -> Vec<Spectrogram> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let v = (0..12 * 16).map(|_| r.gen_range(-20.0..2.0)).collect();
            Spectrogram::new(12, 16, v).unwrap()
        })
        .collect()
}

fn run_total(
    p: &ParamSet,
    cfg: &ModelConfig,
    s: &[Spectrogram],
    labels: &[usize],
    w: LossWeights,
    aug: &Augmentation,
    seed: u64,
) -> (f64, LossBreakdown, Tensor) {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, p, |_| true);
    let refs: Vec<&Spectrogram> = s.iter().collect();
    let (g, parts) = total_loss(
        &mut tape,
        &b,
        cfg,
        &refs,
        labels,
        &w,
        &DaeLossWeights::default(),
        aug,
        &mut rng(seed),
    )
    .unwrap();
    (
        tape.value(g.total).item(),
        parts,
        tape.value(g.logits).clone(),
    )
}

#[test]
fn total_loss_degenerate_weights() {
    let cfg = tiny();
    let p = init_params(&cfg, &mut rng(1)).unwrap();
    let s = specs(3, 2);
    let labels = [0, 3, 1];
    let w = LossWeights {
        lambda_ce: 1.7,
        lambda_dae: 0.0,
        lambda_con: 0.0,
    };
    let (total, parts, logits) = run_total(&p, &cfg, &s, &labels, w, &Augmentation::default(), 5);
    let k = cfg.n_classes;
    let mut ce = 0.0;
    for (b, &l) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        ce += lse - row[l];
    }
    ce /= 3.0;
    assert!((total - 1.7 * ce).abs() < 1e-12);
    assert_eq!((parts.dae, parts.con), (0.0, 0.0));
}

#[test]
fn disabled_view_gives_zero_consistency() {
    let cfg = tiny();
    let p = init_params(&cfg, &mut rng(1)).unwrap();
    let s = specs(3, 2);
    let aug = Augmentation {
        view: None,
        ..Augmentation::default()
    };
    let (_, parts, _) = run_total(&p, &cfg, &s, &[0, 1, 2], LossWeights::default(), &aug, 5);
    assert_eq!(parts.con, 0.0);
    let (_, parts, _) = run_total(
        &p,
        &cfg,
        &s,
        &[0, 1, 2],
        LossWeights::default(),
        &Augmentation::default(),
        5,
    );
    assert!(parts.con > 0.0);
}

#[test]
fn breakdown_sums_and_is_monotone_in_dae_weight() {
    let cfg = tiny();
    let p = init_params(&cfg, &mut rng(1)).unwrap();
    let s = specs(4, 3);
    let labels = [4, 1, 1, 0];
    let mut prev = 0.0;
    for lam in [0.0, 0.1, 0.3, 1.0, 3.0] {
        let w = LossWeights {
            lambda_dae: lam,
            ..LossWeights::default()
        };
        let (total, parts, _) = run_total(&p, &cfg, &s, &labels, w, &Augmentation::default(), 9);
        assert!((parts.ce + parts.dae + parts.con - total).abs() < 1e-12);
        assert_eq!(parts.total, total);
        assert!(total >= 0.0);
        assert!(total >= prev);
        prev = total;
    }
}

#[test]
fn total_loss_rejects_bad_weights() {
    let cfg = tiny();
    let p = init_params(&cfg, &mut rng(1)).unwrap();
    let s = specs(1, 3);
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, &p, |_| true);
    let w = LossWeights {
        lambda_ce: 0.0,
        ..LossWeights::default()
    };
    let r = total_loss(
        &mut tape,
        &b,
        &cfg,
        &[&s[0]],
        &[0],
        &w,
        &DaeLossWeights::default(),
        &Augmentation::default(),
        &mut rng(0),
    );
    assert!(matches!(r, Err(ObjectiveError::Weights(_))));
}

/// Trains only the DAE on (0 dB mixture, clean) pairs and compares
/// held-out reconstruction error with leaving the noisy input untouched.
#[test]
fn dae_training_beats_identity() {
    let cfg = ModelConfig::default();
    let fe = FrontendConfig::default();
    let mut r = rng(21);
    let frames = 24;
    let clip = fe.samples_for(frames);
    let mut pairs = Vec::new();
    for i in 0..12 {
        let cry = synth_cry(i % 5, 0.5, &mut r).unwrap().slice(0, clip);
        let noise = synth_noise(NoiseProfile::ALL[i % 3], clip, &mut r);
        let noisy = mix_at_snr(&cry, &noise, 0.0).unwrap();
        let x = log_mel(&cry, &fe).unwrap();
        let y = log_mel(&noisy, &fe).unwrap();
        pairs.push((y, x));
    }
    let stack = |idx: std::ops::Range<usize>, noisy: bool| {
        let refs: Vec<&audio::Spectrogram> = idx
            .map(|i| if noisy { &pairs[i].0 } else { &pairs[i].1 })
            .collect();
        cfg.batch_tensor(&refs).unwrap()
    };
    let (train_x, train_y) = (stack(0..8, true), stack(0..8, false));
    let (test_x, test_y) = (stack(8..12, true), stack(8..12, false));
    let mut p = init_params(&cfg, &mut rng(3)).unwrap();
    let mse_only = DaeLossWeights {
        beta_t: 0.0,
        beta_f: 0.0,
    };
    let held_out = |p: &ParamSet| {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, p, |_| false);
        let v = dae_pretrain_loss(
            &mut tape,
            &b,
            &cfg,
            test_x.clone(),
            test_y.clone(),
            &mse_only,
        )
        .unwrap();
        tape.value(v).item()
    };
    let identity = {
        let d: f64 = test_x
            .data()
            .iter()
            .zip(test_y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        d / test_x.numel() as f64
    };
    assert_eq!(held_out(&p), identity);
    let lr = 0.05;
    for _ in 0..200 {
        let mut tape = Tape::new();
        let b = Bound::new(&mut tape, &p, |n| {
            n.starts_with("dae.") || n.starts_with("adapters.dae.")
        });
        let l = dae_pretrain_loss(
            &mut tape,
            &b,
            &cfg,
            train_x.clone(),
            train_y.clone(),
            &DaeLossWeights::default(),
        )
        .unwrap();
        let g = b.grads(&tape.backward(l).unwrap());
        drop(b);
        for (n, gt) in g {
            p.get_mut(&n).unwrap().axpy(-lr, &gt).unwrap();
        }
    }
    let trained = held_out(&p);
    assert!(
        trained < identity,
        "trained {trained} vs identity {identity}"
    );
}
