use std::collections::BTreeSet;
use std::time::Instant;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fed::account_payload;
use crate::model::ParamGroup;
use crate::reliability::{ood_metrics, CalibrationResult, OodMetrics};

fn labels(per_class: usize, k: usize) -> Vec<usize> {
    (0..per_class * k).map(|i| i % k).collect()
}

fn class_shares(site: &[usize], labels: &[usize], k: usize) -> Vec<f64> {
    let mut n = vec![0.0; k];
    for &i in site {
        n[labels[i]] += 1.0;
    }
    n.iter().map(|c| c / site.len() as f64).collect()
}

#[test]
fn huge_alpha_gives_near_uniform_class_mix() {
    let y = labels(120, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sites = partition_non_iid(&y, 3, 1e6, true, &mut rng).unwrap();
    for s in &sites {
        for p in class_shares(s, &y, 5) {
            assert!((p - 0.2).abs() <= 0.02, "share {p}");
        }
    }
}

#[test]
fn small_alpha_makes_a_dominant_class() {
    let y = labels(120, 5);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites = partition_non_iid(&y, 3, 0.1, false, &mut rng).unwrap();
        let top = sites
            .iter()
            .flat_map(|s| class_shares(s, &y, 5))
            .fold(0.0, f64::max);
        assert!(top > 0.6, "seed {seed}: largest class share {top}");
    }
}

#[test]
fn partition_rejects_bad_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(partition_non_iid(&[0, 1], 3, 0.5, false, &mut rng).is_err());
    assert!(partition_non_iid(&labels(4, 2), 2, 0.0, false, &mut rng).is_err());
    assert!(partition_non_iid(&[0, 0, 1], 3, 0.5, true, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn partition_is_exact(n in 6usize..200, k in 1usize..6, sites in 1usize..5, alpha in 0.05f64..10.0, seed: u64, cover: bool) {
        let y: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cover = cover && n / k >= sites;
        let parts = partition_non_iid(&y, sites, alpha, cover, &mut rng).unwrap();
        let mut seen = BTreeSet::new();
        for p in &parts {
            prop_assert!(!p.is_empty());
            for &i in p {
                prop_assert!(seen.insert(i), "index {} in two sites", i);
            }
            if cover {
                let classes: BTreeSet<usize> = p.iter().map(|&i| y[i]).collect();
                prop_assert_eq!(classes.len(), k);
            }
        }
        prop_assert_eq!(seen.len(), n);
    }
}

fn small_cfg() -> ExperimentConfig {
    ExperimentConfig {
        clips_per_class: 4,
        ood_clips: 30,
        ..ExperimentConfig::default()
    }
}

#[test]
fn default_pool_has_600_tagged_clips() {
    let cfg = ExperimentConfig::default();
    let data = build_site_datasets(&cfg, 1).unwrap();
    assert_eq!(data.len(), 600);
    let mut per_class = [0usize; 5];
    for (s, idx) in data.sites.iter().enumerate() {
        for &i in idx {
            assert_eq!(data.clips[i].site, s);
        }
        let classes: BTreeSet<usize> = idx.iter().map(|&i| data.clips[i].label).collect();
        assert_eq!(classes.len(), 5, "site {s} misses a class");
    }
    for c in &data.clips {
        per_class[c.label] += 1;
        assert_eq!(
            (c.spec.frames(), c.spec.bins()),
            (cfg.frames, cfg.frontend.n_mels)
        );
        assert!(cfg.snr_levels.contains(&c.snr_db));
    }
    assert_eq!(per_class, [120; 5]);
    assert_eq!(data.sites.iter().map(Vec::len).sum::<usize>(), 600);
    assert_eq!(data.ood.len(), 100);
}

#[test]
fn datasets_are_deterministic_per_seed() {
    let cfg = small_cfg();
    let a = build_site_datasets(&cfg, 9).unwrap();
    let b = build_site_datasets(&cfg, 9).unwrap();
    assert_eq!(a.clips, b.clips);
    assert_eq!(a.sites, b.sites);
    assert_eq!(a.ood, b.ood);
    let c = build_site_datasets(&cfg, 10).unwrap();
    assert_ne!(a.clips, c.clips);
}

fn mean_floor(data: &SiteDatasets) -> f64 {
    let floors: Vec<f64> = data
        .clips
        .iter()
        .map(|c| {
            let mut v = c.spec.values().to_vec();
            v.sort_by(f64::total_cmp);
            v[v.len() / 10]
        })
        .collect();
    floors.iter().sum::<f64>() / floors.len() as f64
}

#[test]
fn noisy_set_has_higher_spectral_floor() {
    let clean = ExperimentConfig {
        snr_levels: vec![f64::INFINITY],
        ..small_cfg()
    };
    let noisy = ExperimentConfig {
        snr_levels: vec![0.0],
        ..small_cfg()
    };
    let c = mean_floor(&build_site_datasets(&clean, 4).unwrap());
    let n = mean_floor(&build_site_datasets(&noisy, 4).unwrap());
    assert!(n > c + 1.0, "0 dB floor {n} vs clean {c}");
}

#[test]
fn stress_copies_follow_the_eval_levels() {
    let cfg = small_cfg();
    let data = build_site_datasets(&cfg, 2).unwrap();
    let mut clean_seen = 0;
    for c in &data.clips {
        assert_eq!(c.stress.len(), cfg.eval_snr_levels.len());
        if c.snr_db == f64::INFINITY {
            assert_eq!(c.stress[0], c.spec);
            assert!(c.clean.is_none());
            clean_seen += 1;
        } else {
            assert!(c.clean.is_some());
        }
    }
    assert!(clean_seen > 0);
    let floor = |j: usize| {
        data.clips
            .iter()
            .map(|c| {
                let mut v = c.stress[j].values().to_vec();
                v.sort_by(f64::total_cmp);
                v[v.len() / 10]
            })
            .sum::<f64>()
    };
    assert!(floor(3) > floor(0));
}

#[test]
fn macro_f1_examples() {
    let y = [0, 1, 2, 3, 4, 0, 1];
    assert_eq!(macro_f1(&y, &y, 5).unwrap(), 1.0);
    // all predicted positive, half correct: F1 {0, 2/3}
    let f = macro_f1(&[1, 1, 1, 1], &[0, 1, 0, 1], 2).unwrap();
    assert!((f - 1.0 / 3.0).abs() < 1e-15);
    // absent class counts as zero
    assert!((macro_f1(&[0, 1], &[0, 1], 4).unwrap() - 0.5).abs() < 1e-15);
    assert!(macro_f1(&[0], &[0, 1], 2).is_err());
    assert!(macro_f1(&[2], &[0], 2).is_err());
}

#[test]
fn auc_examples() {
    let probs: Vec<Vec<f64>> = (0..5)
        .map(|c| (0..5).map(|j| if j == c { 0.9 } else { 0.025 }).collect())
        .collect();
    let y = [0, 1, 2, 3, 4];
    assert_eq!(ovr_auc(&probs, &y, 5).unwrap(), 1.0);
    assert!(ovr_auc(&probs, &[2; 5], 5).is_err());
}

proptest! {
    #[test]
    fn binary_auc_matches_ood_auroc(p in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 4..80)) {
        prop_assume!(p.iter().any(|x| x.1) && p.iter().any(|x| !x.1));
        let probs: Vec<Vec<f64>> = p.iter().map(|&(s, _)| vec![1.0 - s, s]).collect();
        let y: Vec<usize> = p.iter().map(|&(_, l)| l as usize).collect();
        let pos: Vec<f64> = p.iter().filter(|x| x.1).map(|x| x.0).collect();
        let neg: Vec<f64> = p.iter().filter(|x| !x.1).map(|x| x.0).collect();
        let want = ood_metrics(&neg, &pos).unwrap().auroc;
        prop_assert!((ovr_auc(&probs, &y, 2).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn roc_curve_runs_from_origin_to_one() {
    let probs = vec![
        vec![0.8, 0.2],
        vec![0.4, 0.6],
        vec![0.6, 0.4],
        vec![0.3, 0.7],
    ];
    let c = roc_curve(&probs, &[0, 1, 0, 0], 1);
    assert_eq!((c[0].fpr, c[0].tpr), (0.0, 0.0));
    let last = c.last().unwrap();
    assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
    assert!(c
        .windows(2)
        .all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
    // highest class-1 score is a negative
    assert_eq!((c[1].fpr, c[1].tpr), (1.0 / 3.0, 0.0));
}

fn fake_fold(seed: u64, fold: usize, rounds: usize) -> FoldResult {
    let payload = account_payload(
        &[(ParamGroup::Head, 1000), (ParamGroup::DaeAdapters, 500)],
        40,
    );
    let m = FinalMetrics {
        accuracy: 0.5,
        macro_f1: 0.4,
        auc: 0.7,
        ece: 0.1,
    };
    FoldResult {
        seed,
        fold,
        held_out_site: fold,
        train_clips: 10,
        test_clips: 5,
        rounds: (0..rounds)
            .map(|r| RoundRow {
                round: r,
                seed,
                fold,
                held_out_site: fold,
                loss: 1.0 / (r + 1) as f64,
                ce: 0.5,
                dae: 0.25,
                con: 0.25,
                accuracy: m.accuracy,
                macro_f1: m.macro_f1,
                auc: m.auc,
                ece: m.ece,
                payload_mb: payload.total_mb,
            })
            .collect(),
        final_metrics: m.clone(),
        snr_metrics: vec![SnrMetrics {
            snr_db: None,
            metrics: m,
        }],
        calibration: Some(CalibrationResult {
            temperature: 1.5,
            nll_pre: 1.0,
            nll_post: 0.9,
            ece_pre: 0.2,
            ece_post: 0.1,
        }),
        ood: OodMetrics {
            auroc: 0.9,
            aupr_out: 0.8,
            fpr_at_95tpr: 0.3,
        },
        abstention: None,
        roc: vec![RocPoint {
            class: 0,
            threshold: 0.5,
            fpr: 0.1,
            tpr: 0.9,
        }],
        payload,
    }
}

#[test]
fn reports_have_one_row_per_round_per_run() {
    let runs = (0..2u64)
        .flat_map(|s| (0..3).map(move |f| fake_fold(s, f, 5)))
        .collect();
    let report = ExperimentReport { runs };
    let dir = tempfile::tempdir().unwrap();
    emit_reports(&report, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,seed,fold,held_out_site,loss,ce,dae,con,accuracy,macro_f1,auc,ece,payload_mb"
    );
    assert_eq!(lines.count(), 30);

    let comms: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("comms.json")).unwrap())
            .unwrap();
    assert_eq!(comms["total_bytes"], 1540);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 6);
    assert_eq!(summary["mean"]["macro_f1"], 0.4);
    let roc = std::fs::read_to_string(dir.path().join("roc_points.csv")).unwrap();
    assert_eq!(roc.lines().count(), 7);
}

fn smoke_cfg(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seeds: vec![5],
        clips_per_class: 4,
        ood_clips: 20,
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.fed.rounds = 2;
    cfg
}

#[test]
fn smoke_run_writes_outputs_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let report = run_experiment(&smoke_cfg(a.path())).unwrap();
    assert!(
        start.elapsed().as_secs_f64() < 60.0,
        "{:?}",
        start.elapsed()
    );
    run_experiment(&smoke_cfg(b.path())).unwrap();
    for f in ["rounds.csv", "summary.json", "comms.json", "roc_points.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    let run = &report.runs[0];
    assert_eq!(run.rounds.len(), 2);
    assert!(run.train_clips + run.test_clips <= 60);
    assert!(run
        .rounds
        .iter()
        .all(|r| r.payload_mb == run.payload.total_mb));
    // too few clips to fit a temperature or an abstention threshold
    assert!(run.calibration.is_none() && run.abstention.is_none());
}

#[test]
fn held_out_site_rotates() {
    let cfg = ExperimentConfig::default();
    let sites: Vec<usize> = (0..3).map(|s| held_out_site(&cfg, s, 0)).collect();
    assert_eq!(sites, [0, 1, 2]);
    assert_eq!(held_out_site(&cfg, 1, 2), 0);
}

#[test]
fn config_round_trips_and_validates() {
    let cfg = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(ExperimentConfig::from_toml("sites = 0")
        .unwrap_err()
        .is_config());
    assert!(ExperimentConfig::from_toml("unknown_key = 1")
        .unwrap_err()
        .is_config());
    let parsed = ExperimentConfig::from_toml("seeds = [7]\n[fed]\nrounds = 4\n").unwrap();
    assert_eq!((parsed.seeds.clone(), parsed.fed.rounds), (vec![7], 4));
    assert_eq!(parse_seeds("1, 2 3").unwrap(), vec![1, 2, 3]);
    assert!(parse_seeds("x").is_err());
}
