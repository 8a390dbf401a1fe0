use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::data::{build_site_datasets, mix_seed, Clip, SiteDatasets};
use super::metrics::{accuracy, macro_f1, ovr_auc, predictions, roc_curve, RocPoint};
use super::train::{predict, CryObjective, TrainSpec};
use crate::audio::Spectrogram;
use crate::error::{Error, Result};
use crate::fed::{run_round, ClientState, GlobalState, PayloadReport};
use crate::model::{init_params, ParamSet};
use crate::reliability::{
    ece, energy_score, fit_temperature, ood_metrics, ood_report, select_threshold, softmax,
    CalibrationResult, OodMetrics, ECE_BINS,
};

const STREAM_SPLIT: u64 = 10;
const STREAM_INIT: u64 = 11;
const STREAM_FED: u64 = 12;
const STREAM_COHORT: u64 = 13;

const MIN_CALIBRATION: usize = 50;
const MIN_THRESHOLD: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRow {
    pub round: usize,
    pub seed: u64,
    pub fold: usize,
    pub held_out_site: usize,
    pub loss: f64,
    pub ce: f64,
    pub dae: f64,
    pub con: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub auc: f64,
    pub ece: f64,
    pub payload_mb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub auc: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldResult {
    pub seed: u64,
    pub fold: usize,
    pub held_out_site: usize,
    pub train_clips: usize,
    pub test_clips: usize,
    pub rounds: Vec<RoundRow>,
    /// Held-out-site metrics with calibrated probabilities.
    pub final_metrics: FinalMetrics,
    /// Calibrated held-out metrics for each `eval_snr_levels` entry.
    pub snr_metrics: Vec<SnrMetrics>,
    /// `None` when the calibration split is below the fitting minimum.
    pub calibration: Option<CalibrationResult>,
    pub ood: OodMetrics,
    /// `None` when the threshold split is below the selection minimum.
    pub abstention: Option<Abstention>,
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
    #[serde(skip)]
    pub payload: PayloadReport,
}

/// Held-out metrics under one stress condition; `snr_db` is `None` for
/// clean audio.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnrMetrics {
    pub snr_db: Option<f64>,
    #[serde(flatten)]
    pub metrics: FinalMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Abstention {
    pub threshold: f64,
    pub abstain_rate_id: f64,
    pub abstain_rate_ood: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub runs: Vec<FoldResult>,
}

/// Per-site train / calibration / threshold splits for one fold.
struct Splits<'a> {
    train: Vec<Vec<&'a Clip>>,
    train_sites: Vec<usize>,
    calibration: Vec<&'a Clip>,
    threshold: Vec<&'a Clip>,
    test: Vec<&'a Clip>,
}

fn split_fold<'a>(
    cfg: &ExperimentConfig,
    data: &'a SiteDatasets,
    held: usize,
    seed: u64,
) -> Result<Splits<'a>> {
    let mut s = Splits {
        train: Vec::new(),
        train_sites: Vec::new(),
        calibration: Vec::new(),
        threshold: Vec::new(),
        test: data.sites[held].iter().map(|&i| &data.clips[i]).collect(),
    };
    let (mut train_idx, mut held_idx) = (BTreeSet::new(), BTreeSet::new());
    let pool: usize = (0..data.sites.len())
        .filter(|&s| s != held)
        .map(|s| data.sites[s].len())
        .sum();
    let floors = pool >= 2 * (MIN_CALIBRATION + MIN_THRESHOLD);
    let quota = |frac: f64, floor: usize, n: usize| {
        let by_frac = (frac * n as f64).round() as usize;
        if floors {
            by_frac.max((floor * n).div_ceil(pool))
        } else {
            by_frac
        }
    };
    for (site, idx) in data.sites.iter().enumerate() {
        if site == held {
            continue;
        }
        let mut idx = idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_SPLIT, site as u64));
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_cal = quota(cfg.calibration_fraction, MIN_CALIBRATION, n);
        let n_thr = quota(cfg.threshold_fraction, MIN_THRESHOLD, n);
        if n_cal + n_thr >= n {
            return Err(Error::Config(format!(
                "site {site} has too few clips ({n}) to split"
            )));
        }
        s.calibration
            .extend(idx[..n_cal].iter().map(|&i| &data.clips[i]));
        s.threshold
            .extend(idx[n_cal..n_cal + n_thr].iter().map(|&i| &data.clips[i]));
        held_idx.extend(idx[..n_cal + n_thr].iter().copied());
        train_idx.extend(idx[n_cal + n_thr..].iter().copied());
        s.train.push(
            idx[n_cal + n_thr..]
                .iter()
                .map(|&i| &data.clips[i])
                .collect(),
        );
        s.train_sites.push(site);
    }
    let test_idx: BTreeSet<usize> = data.sites[held].iter().copied().collect();
    if !train_idx.is_disjoint(&test_idx)
        || !held_idx.is_disjoint(&test_idx)
        || !train_idx.is_disjoint(&held_idx)
    {
        return Err(Error::Invariant(format!(
            "fold splits overlap for held-out site {held}"
        )));
    }
    Ok(s)
}

fn probs_at(logits: &[Vec<f64>], t: f64) -> Vec<Vec<f64>> {
    logits.iter().map(|z| softmax(z, t)).collect()
}

fn specs<'a>(clips: &[&'a Clip]) -> Vec<&'a Spectrogram> {
    clips.iter().map(|c| &c.spec).collect()
}

fn evaluate(cfg: &ExperimentConfig, probs: &[Vec<f64>], labels: &[usize]) -> Result<FinalMetrics> {
    let preds = predictions(probs);
    Ok(FinalMetrics {
        accuracy: accuracy(&preds, labels),
        macro_f1: macro_f1(&preds, labels, cfg.model.n_classes)?,
        auc: ovr_auc(probs, labels, cfg.model.n_classes)?,
        ece: ece(probs, labels, ECE_BINS)?,
    })
}

/// Trains one site-held-out fold and evaluates it.
pub fn run_fold(
    cfg: &ExperimentConfig,
    data: &SiteDatasets,
    seed: u64,
    fold: usize,
    held: usize,
) -> Result<FoldResult> {
    let splits = split_fold(cfg, data, held, seed)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_INIT, 0));
    let theta: ParamSet = init_params(&cfg.model, &mut init_rng)?;
    let spec = TrainSpec {
        model: cfg.model.clone(),
        weights: cfg.losses,
        dae: cfg.dae_loss,
        augment: cfg.augment.clone(),
        clean_targets: cfg.dae_clean_targets,
    };
    let mut clients = splits
        .train
        .iter()
        .zip(&splits.train_sites)
        .map(|(clips, &site)| {
            ClientState::new(site as u32, CryObjective::new(clips, spec.clone()), &theta)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let total: usize = splits.train.iter().map(Vec::len).sum();
    let mut state = GlobalState::new(theta, total as u64)?;
    let hp = crate::fed::HyperParams {
        seed: mix_seed(seed, STREAM_FED, fold as u64),
        ..cfg.fed.clone()
    };
    let test_specs = specs(&splits.test);
    let test_labels: Vec<usize> = splits.test.iter().map(|c| c.label).collect();
    let mut cohort_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, STREAM_COHORT, fold as u64));
    let mut rows = Vec::with_capacity(hp.rounds);
    let mut payload: Option<PayloadReport> = None;
    for r in 0..hp.rounds {
        let k = hp.clients_per_round.min(clients.len());
        if k < clients.len() {
            let mut ids: Vec<u32> = clients.iter().map(|c| c.id).collect();
            ids.shuffle(&mut cohort_rng);
            let chosen: BTreeSet<u32> = ids[..k].iter().copied().collect();
            clients.sort_by_key(|c| (!chosen.contains(&c.id), c.id));
        }
        let report = run_round(&mut state, &mut clients[..k], &hp, cfg.secure)?;
        clients.sort_by_key(|c| c.id);
        let mut terms = [0.0; 4];
        for c in clients
            .iter_mut()
            .filter(|c| c.last_participation == Some(r as u32))
        {
            let b = c.data.take_breakdown();
            for (t, v) in terms.iter_mut().zip([b.total, b.ce, b.dae, b.con]) {
                *t += v / k as f64;
            }
        }
        match &payload {
            Some(p) if p.total_bytes != report.payload.total_bytes => {
                return Err(Error::Invariant(format!(
                    "payload changed from {} to {} bytes in round {r}",
                    p.total_bytes, report.payload.total_bytes
                )));
            }
            _ => payload = Some(report.payload.clone()),
        }
        let logits = predict(&state.theta, &cfg.model, &test_specs, cfg.eval_batch)?;
        let m = evaluate(cfg, &probs_at(&logits, 1.0), &test_labels)?;
        log::info!(
            "seed {seed} fold {fold} round {r}: loss {:.4} macro-F1 {:.3} acc {:.3}",
            terms[0],
            m.macro_f1,
            m.accuracy
        );
        rows.push(RoundRow {
            round: r,
            seed,
            fold,
            held_out_site: held,
            loss: terms[0],
            ce: terms[1],
            dae: terms[2],
            con: terms[3],
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            auc: m.auc,
            ece: m.ece,
            payload_mb: report.payload.total_mb,
        });
    }

    let test_logits = predict(&state.theta, &cfg.model, &test_specs, cfg.eval_batch)?;
    let calibration = if splits.calibration.len() >= MIN_CALIBRATION {
        let cal_logits = predict(
            &state.theta,
            &cfg.model,
            &specs(&splits.calibration),
            cfg.eval_batch,
        )?;
        let cal_labels: Vec<usize> = splits.calibration.iter().map(|c| c.label).collect();
        Some(fit_temperature(&cal_logits, &cal_labels)?)
    } else {
        log::warn!(
            "calibration split has {} clips; keeping T = 1",
            splits.calibration.len()
        );
        None
    };
    let t = calibration.as_ref().map_or(1.0, |c| c.temperature);
    let test_probs = probs_at(&test_logits, t);
    let final_metrics = evaluate(cfg, &test_probs, &test_labels)?;
    let calibration = match calibration {
        Some(fit) => Some(CalibrationResult {
            ece_pre: ece(&probs_at(&test_logits, 1.0), &test_labels, ECE_BINS)?,
            ece_post: final_metrics.ece,
            ..fit
        }),
        None => None,
    };

    let snr_metrics = cfg
        .eval_snr_levels
        .iter()
        .enumerate()
        .map(|(j, &db)| {
            let stressed: Vec<&Spectrogram> = splits.test.iter().map(|c| &c.stress[j]).collect();
            let logits = predict(&state.theta, &cfg.model, &stressed, cfg.eval_batch)?;
            Ok(SnrMetrics {
                snr_db: db.is_finite().then_some(db),
                metrics: evaluate(cfg, &probs_at(&logits, t), &test_labels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let te = cfg.energy_temperature;
    let energies = |logits: &[Vec<f64>]| {
        logits
            .iter()
            .map(|z| energy_score(z, te))
            .collect::<Vec<_>>()
    };
    let ood_refs: Vec<&Spectrogram> = data.ood.iter().collect();
    let id_scores = energies(&test_logits);
    let ood_scores = energies(&predict(
        &state.theta,
        &cfg.model,
        &ood_refs,
        cfg.eval_batch,
    )?);
    let ood = ood_metrics(&id_scores, &ood_scores)?;
    let abstention = if splits.threshold.len() >= MIN_THRESHOLD {
        let thr_logits = predict(
            &state.theta,
            &cfg.model,
            &specs(&splits.threshold),
            cfg.eval_batch,
        )?;
        let tau = select_threshold(&energies(&thr_logits), cfg.target_tpr)?;
        let r = ood_report(&id_scores, &ood_scores, tau)?;
        Some(Abstention {
            threshold: tau,
            abstain_rate_id: r.abstain_rate_id,
            abstain_rate_ood: r.abstain_rate_ood,
        })
    } else {
        log::warn!(
            "threshold split has {} clips; no abstention threshold",
            splits.threshold.len()
        );
        None
    };
    let roc = (0..cfg.model.n_classes)
        .flat_map(|c| roc_curve(&test_probs, &test_labels, c))
        .collect();
    Ok(FoldResult {
        seed,
        fold,
        held_out_site: held,
        train_clips: total,
        test_clips: splits.test.len(),
        rounds: rows,
        final_metrics,
        snr_metrics,
        calibration,
        ood,
        abstention,
        roc,
        payload: payload.expect("at least one round"),
    })
}

/// Held-out site of fold `f` for the seed at position `seed_index`.
pub fn held_out_site(cfg: &ExperimentConfig, seed_index: usize, fold: usize) -> usize {
    (seed_index + fold) % cfg.sites
}

/// Every seed and fold; partial results are written before an error is
/// returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    if cfg.fed.rounds == 0 {
        return Err(Error::Config("fed.rounds must be at least 1".into()));
    }
    let mut report = ExperimentReport { runs: Vec::new() };
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let outcome = build_site_datasets(cfg, seed).and_then(|data| {
            for fold in 0..cfg.folds_per_seed {
                let held = held_out_site(cfg, si, fold);
                report.runs.push(run_fold(cfg, &data, seed, fold, held)?);
            }
            Ok(())
        });
        if let Err(e) = outcome {
            if !report.runs.is_empty() {
                if let Err(w) = emit_reports(&report, &cfg.output_dir) {
                    log::error!("could not flush partial results: {w}");
                }
            }
            return Err(e);
        }
    }
    emit_reports(&report, &cfg.output_dir)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
struct Summary<'a> {
    runs: Vec<SummaryRow<'a>>,
    mean: FinalMetrics,
    mean_ood: OodMean,
}

#[derive(Debug, Clone, Serialize)]
struct SummaryRow<'a> {
    seed: u64,
    fold: usize,
    held_out_site: usize,
    train_clips: usize,
    test_clips: usize,
    #[serde(rename = "final")]
    final_metrics: &'a FinalMetrics,
    snr_metrics: &'a [SnrMetrics],
    calibration: &'a Option<CalibrationResult>,
    ood: &'a OodMetrics,
    abstention: &'a Option<Abstention>,
}

#[derive(Debug, Clone, Serialize)]
struct OodMean {
    auroc: f64,
    aupr_out: f64,
    fpr_at_95tpr: f64,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `rounds.csv`, `summary.json`, `comms.json` and `roc_points.csv`.
pub fn emit_reports(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for run in &report.runs {
        for row in &run.rounds {
            w.serialize(row)?;
        }
    }
    if report.runs.iter().all(|r| r.rounds.is_empty()) {
        w.write_record([
            "round",
            "seed",
            "fold",
            "held_out_site",
            "loss",
            "ce",
            "dae",
            "con",
            "accuracy",
            "macro_f1",
            "auc",
            "ece",
            "payload_mb",
        ])?;
    }
    write(
        &dir.join("rounds.csv"),
        &w.into_inner()
            .map_err(|e| Error::Invariant(e.to_string()))?,
    )?;

    let n = report.runs.len().max(1) as f64;
    let mean = |f: &dyn Fn(&FoldResult) -> f64| report.runs.iter().map(f).sum::<f64>() / n;
    let summary = Summary {
        runs: report
            .runs
            .iter()
            .map(|r| SummaryRow {
                seed: r.seed,
                fold: r.fold,
                held_out_site: r.held_out_site,
                train_clips: r.train_clips,
                test_clips: r.test_clips,
                final_metrics: &r.final_metrics,
                snr_metrics: &r.snr_metrics,
                calibration: &r.calibration,
                ood: &r.ood,
                abstention: &r.abstention,
            })
            .collect(),
        mean: FinalMetrics {
            accuracy: mean(&|r| r.final_metrics.accuracy),
            macro_f1: mean(&|r| r.final_metrics.macro_f1),
            auc: mean(&|r| r.final_metrics.auc),
            ece: mean(&|r| r.final_metrics.ece),
        },
        mean_ood: OodMean {
            auroc: mean(&|r| r.ood.auroc),
            aupr_out: mean(&|r| r.ood.aupr_out),
            fpr_at_95tpr: mean(&|r| r.ood.fpr_at_95tpr),
        },
    };
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    write(&dir.join("summary.json"), json.as_bytes())?;

    if let Some(first) = report.runs.first() {
        let mut json = first.payload.to_json();
        json.push('\n');
        write(&dir.join("comms.json"), json.as_bytes())?;
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["seed", "fold", "class", "threshold", "fpr", "tpr"])?;
    for run in &report.runs {
        for p in &run.roc {
            w.write_record([
                run.seed.to_string(),
                run.fold.to_string(),
                p.class.to_string(),
                p.threshold.to_string(),
                p.fpr.to_string(),
                p.tpr.to_string(),
            ])?;
        }
    }
    write(
        &dir.join("roc_points.csv"),
        &w.into_inner()
            .map_err(|e| Error::Invariant(e.to_string()))?,
    )?;
    Ok(())
}
