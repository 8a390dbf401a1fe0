use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedcry_core::audio::{load_wav, log_mel, FrontendConfig, SAMPLE_RATE};
use fedcry_core::fed::expected_payload;
use fedcry_core::harness::{run_experiment, ExperimentConfig};
use fedcry_core::model::init_params;
use fedcry_core::reliability::{
    argmax, ece, energy_score, fit_temperature, ood_metrics, ood_report, select_threshold, softmax,
    ECE_BINS,
};
use fedcry_core::{Error, Result};
use rand::SeedableRng;

#[derive(Parser)]
#[command(
    name = "fedcry",
    version,
    about = "Federated noise-robust cry classification simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full site-held-out federated experiment.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Dump the log-mel spectrogram of a WAV file as CSV (one row per frame).
    Frontend {
        #[arg(long)]
        wav: PathBuf,
        /// Experiment config whose `[frontend]` section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-client upload size per round for a config, as JSON.
    CommsReport {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit a temperature to `label,z0,z1,...` rows.
    Calibrate {
        #[arg(long)]
        logits: PathBuf,
    },
    /// OOD metrics from logit (or single-column energy) CSVs.
    OodEval {
        #[arg(long)]
        id: PathBuf,
        #[arg(long)]
        ood: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Also pick an abstention threshold on the ID scores at this TPR.
        #[arg(long)]
        target_tpr: Option<f64>,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("{} has no rows", path.display())));
    }
    Ok(rows)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn simulate(config: &Path, output_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    let report = run_experiment(&cfg)?;
    for r in &report.runs {
        println!(
            "seed {} fold {} held-out site {}: macro-F1 {:.4} AUC {:.4} ECE {:.4} OOD AUROC {:.4}",
            r.seed,
            r.fold,
            r.held_out_site,
            r.final_metrics.macro_f1,
            r.final_metrics.auc,
            r.final_metrics.ece,
            r.ood.auroc
        );
    }
    println!("reports written to {}", cfg.output_dir.display());
    Ok(())
}

fn frontend(wav: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let fe = match config {
        Some(p) => ExperimentConfig::load(p)?.frontend,
        None => FrontendConfig::default(),
    };
    let spec = log_mel(&load_wav(wav, SAMPLE_RATE)?, &fe)?;
    let mut w: Box<dyn Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut cw = csv::Writer::from_writer(&mut w);
    for t in 0..spec.frames() {
        cw.write_record((0..spec.bins()).map(|f| spec.get(t, f).to_string()))?;
    }
    cw.flush()
        .map_err(|e| Error::io(out.unwrap_or(Path::new("-")), e))?;
    Ok(())
}

fn comms_report(config: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let theta = init_params(&cfg.model, &mut rng)?;
    let report = expected_payload(&theta, &cfg.fed, cfg.secure)?;
    println!("{}", report.to_json());
    Ok(())
}

fn calibrate(path: &Path) -> Result<()> {
    let rows = read_rows(path)?;
    let mut labels = Vec::with_capacity(rows.len());
    let mut logits = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let label = r[0];
        if r.len() < 3 || label < 0.0 || label.fract() != 0.0 {
            return Err(Error::Config(format!(
                "row {}: expected label,z0,z1,...",
                i + 1
            )));
        }
        labels.push(label as usize);
        logits.push(r[1..].to_vec());
    }
    let fit = fit_temperature(&logits, &labels)?;
    let probs = |t: f64| logits.iter().map(|z| softmax(z, t)).collect::<Vec<_>>();
    let acc = |t: f64| {
        let p = probs(t);
        p.iter()
            .zip(&labels)
            .filter(|(p, &l)| argmax(p) == l)
            .count() as f64
            / labels.len() as f64
    };
    print_json(&serde_json::json!({
        "temperature": fit.temperature,
        "nll_pre": fit.nll_pre,
        "nll_post": fit.nll_post,
        "ece_pre": ece(&probs(1.0), &labels, ECE_BINS)?,
        "ece_post": ece(&probs(fit.temperature), &labels, ECE_BINS)?,
        "accuracy": acc(fit.temperature),
    }));
    Ok(())
}

fn scores(path: &Path, t: f64) -> Result<Vec<f64>> {
    Ok(read_rows(path)?
        .iter()
        .map(|r| {
            if r.len() == 1 {
                r[0]
            } else {
                energy_score(r, t)
            }
        })
        .collect())
}

fn ood_eval(id: &Path, ood: &Path, t: f64, target_tpr: Option<f64>) -> Result<()> {
    if t.is_nan() || t <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {t}"
        )));
    }
    let (sid, sood) = (scores(id, t)?, scores(ood, t)?);
    let v = match target_tpr {
        Some(p) => serde_json::to_value(ood_report(&sid, &sood, select_threshold(&sid, p)?)?)?,
        None => serde_json::to_value(ood_metrics(&sid, &sood)?)?,
    };
    print_json(&v);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let out = match cli.cmd {
        Cmd::Simulate { config, output_dir } => simulate(&config, output_dir),
        Cmd::Frontend { wav, config, out } => frontend(&wav, config.as_deref(), out.as_deref()),
        Cmd::CommsReport { config } => comms_report(&config),
        Cmd::Calibrate { logits } => calibrate(&logits),
        Cmd::OodEval {
            id,
            ood,
            temperature,
            target_tpr,
        } => ood_eval(&id, &ood, temperature, target_tpr),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
