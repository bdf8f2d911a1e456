use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;
use totokit::backbone::{attention_flops, AttentionMode, IdMask, ModelConfig};
use totokit::data::{generate_synthetic, load_dataset, save_dataset, LoadOptions, MultivariateSeries, SynthConfig};
use totokit::engine::{
    forecast as sample_paths, gradient_check, load_checkpoint, quantiles as sample_quantiles, save_checkpoint,
    train_with_callback,
};
use totokit::obsbench::{evaluate as run_evaluation, write_report, ForecastTable, Forecaster, ModelForecaster, SeasonalNaive};

use crate::config::RunConfig;
use crate::Ablation;

/// Largest relative gradient error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl From<totokit::Error> for Failure {
    fn from(e: totokit::Error) -> Self {
        use totokit::Error as E;
        match e {
            E::Tensor(_) | E::NonFinite(_) | E::LowVariability => Failure::Numeric(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn setup(config: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    cfg.resolve_seed(seed)?;
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn dataset(path: &Path) -> Result<Vec<MultivariateSeries>> {
    Ok(load_dataset(path, LoadOptions::default())?)
}

pub fn generate_data(config: Option<&Path>, seed: Option<u64>, out: &Path, sine_trend: bool) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if sine_trend {
        cfg.synth = SynthConfig {
            seed: cfg.synth.seed,
            ..SynthConfig::sine_trend()
        };
    }
    cfg.resolve_seed(seed)?;
    cfg.validate()?;
    let series = generate_synthetic(&cfg.synth)?;
    out_dir(out)?;
    save_dataset(&series, &out.join("dataset.jsonl"))?;
    cfg.echo(out)?;
    println!("wrote {} series to {}", series.len(), out.join("dataset.jsonl").display());
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    seed: Option<u64>,
    data: &Path,
    out: &Path,
    ablation: Ablation,
    steps: Option<usize>,
) -> Result<()> {
    let mut cfg = setup(config, seed)?;
    if let Some(s) = steps {
        if s == 0 {
            return Err(Failure::Usage("--steps must be >= 1".into()));
        }
        cfg.train = cfg.train.clone().with_total_steps(s);
    }
    let ab = &mut cfg.train.ablations;
    match ablation {
        Ablation::None => {}
        Ablation::NoVariateAttention => ab.disable_variate_attention = true,
        Ablation::NoRobustLoss => ab.disable_robust_loss = true,
        Ablation::NoSmm => ab.single_student_t = true,
        Ablation::NoCausalScaling => ab.global_scaling = true,
    }
    cfg.validate()?;
    let series = dataset(data)?;
    out_dir(out)?;
    cfg.echo(out)?;
    let ckpt_path = out.join("checkpoint");
    let outcome = train_with_callback(&cfg.model, &series, &cfg.train, |c| save_checkpoint(c, &ckpt_path))?;
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    let mut log = csv::Writer::from_path(out.join("losses.csv"))?;
    for rec in &outcome.losses {
        log.serialize(rec)?;
    }
    log.flush()?;
    let manifest = ckpt_path.with_extension("manifest");
    if let Some(step) = outcome.diverged {
        return Err(Failure::Numeric(format!(
            "training diverged at step {step}; last good checkpoint at {}",
            manifest.display()
        )));
    }
    let last = outcome.losses.last().map_or(f64::NAN, |r| r.loss);
    println!("trained {} steps, final loss {last:.6}, checkpoint {}", outcome.losses.len(), manifest.display());
    Ok(())
}

pub struct ForecastRequest<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub horizon: usize,
    pub samples: Option<usize>,
    pub quantiles: Option<Vec<f64>>,
    pub out: &'a Path,
}

pub fn forecast(config: Option<&Path>, seed: Option<u64>, req: ForecastRequest<'_>) -> Result<()> {
    let mut cfg = setup(config, seed)?;
    if req.horizon == 0 {
        return Err(Failure::Usage("--horizon must be >= 1".into()));
    }
    if let Some(n) = req.samples {
        if n == 0 {
            return Err(Failure::Usage("--samples must be >= 1".into()));
        }
        cfg.forecast.num_samples = n;
    }
    if let Some(q) = req.quantiles {
        cfg.eval.levels = q;
    }
    let levels = cfg.eval.levels.clone();
    if levels.is_empty() || levels.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(Failure::Usage("--quantiles must lie in (0, 1)".into()));
    }
    let model = load_checkpoint(req.checkpoint)?.to_model();
    let series = dataset(req.data)?;
    out_dir(req.out)?;
    cfg.echo(req.out)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(req.out.join("forecasts.csv"))?));
    let mut header = vec!["series".to_string(), "variate".into(), "step".into()];
    header.extend(levels.iter().map(|q| format!("q{q}")));
    w.write_record(&header)?;
    for s in &series {
        let mask = IdMask::single_group(s.num_variates());
        let paths = sample_paths(&model, &s.values, &s.weights, &mask, req.horizon, &cfg.forecast)?;
        let qs = sample_quantiles(&paths, &levels)?;
        for v in 0..s.num_variates() {
            for h in 0..req.horizon {
                let mut row = vec![s.id.clone(), v.to_string(), (s.len() + h).to_string()];
                row.extend(qs.iter().map(|level| level[v][h].to_string()));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    println!("wrote forecasts for {} series to {}", series.len(), req.out.join("forecasts.csv").display());
    Ok(())
}

pub fn evaluate(
    config: Option<&Path>,
    seed: Option<u64>,
    data: &Path,
    checkpoint: Option<&Path>,
    forecasts: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = setup(config, seed)?;
    let series = dataset(data)?;
    let mut naive = SeasonalNaive { season: cfg.eval.season };
    let mut candidate: Option<Box<dyn Forecaster>> = match (checkpoint, forecasts) {
        (Some(c), _) => Some(Box::new(ModelForecaster {
            name: "model".into(),
            model: load_checkpoint(c)?.to_model(),
            config: cfg.forecast.clone(),
        })),
        (None, Some(f)) => Some(Box::new(ForecastTable::load(&table_name(f), f)?)),
        (None, None) => None,
    };
    let mut forecasters: Vec<&mut dyn Forecaster> = Vec::new();
    if let Some(c) = candidate.as_mut() {
        forecasters.push(c.as_mut());
    }
    forecasters.push(&mut naive);
    let report = run_evaluation(&series, &mut forecasters, &cfg.eval)?;
    out_dir(out)?;
    cfg.echo(out)?;
    write_report(&report, out)?;
    let s = &report.summary;
    println!("{} main tasks, {} flat tasks", s.main_tasks, s.flat_tasks);
    for m in &s.models {
        println!(
            "{}: mase {} crps {} rank {}",
            m.name,
            fmt_opt(m.mase),
            fmt_opt(m.crps),
            fmt_opt(m.rank)
        );
    }
    Ok(())
}

fn table_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    match stem.as_deref() {
        Some("seasonal_naive") | None => "forecasts".into(),
        Some(s) => s.into(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.6}"))
}

pub fn gradcheck(config: Option<&Path>, seed: Option<u64>, probes: Option<usize>) -> Result<()> {
    let cfg = setup(config, seed)?;
    let report = gradient_check(&cfg.model, cfg.train.seed, probes)?;
    let mut stdout = std::io::stdout().lock();
    for (name, err) in &report.parameters {
        writeln!(stdout, "{name:<28} {err:.3e}")?;
    }
    writeln!(stdout, "max relative error: {:.3e}", report.max_error)?;
    if report.max_error <= GRADCHECK_TOLERANCE {
        writeln!(stdout, "PASS")?;
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_error
        )))
    }
}

pub fn flops(m: usize, t: usize, d: usize, n: usize) -> Result<()> {
    if m == 0 || t == 0 || d == 0 || n == 0 {
        return Err(Failure::Usage("--m, --t, --d and --n must all be >= 1".into()));
    }
    let (factorized, full) = flop_counts(m, t, d, n);
    println!("factorized {factorized}");
    println!("full {full}");
    Ok(())
}

/// `(factorized, full)` attention MACs for `n` time-wise blocks plus one variate-wise block.
pub fn flop_counts(m: usize, t: usize, d: usize, n: usize) -> (u64, u64) {
    let cfg = ModelConfig {
        embed_dim: d,
        num_heads: 1,
        num_layers: n + 1,
        time_per_variate: n,
        ..Default::default()
    };
    (
        attention_flops(&cfg, m, t, AttentionMode::Factorized),
        attention_flops(&cfg, m, t, AttentionMode::Full),
    )
}
