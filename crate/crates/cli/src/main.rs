//! `noisylab`: generate synthetic data, normalize images, train and evaluate
//! models, and run full experiments.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use noisylab_core::experiment::{
    build_report, image_features, run_configuration, run_experiment, write_predictions, Components, ExperimentSpec,
    PreparedData, SplitSizes,
};
use noisylab_core::labels::{compute_correlation, measure_noise_profile, LabelMatrix};
use noisylab_core::metrics::{auc, bootstrap_ci};
use noisylab_core::normalization::{apply_window, build_histogram, detect_bounds, read_pgm, write_normalized_pgm, GrayImage, WindowConfig};
use noisylab_core::synth::{generate, GeneratorConfig, IntensityShift, SyntheticDataset};
use noisylab_core::trainer::{Heads, ModelState};
use noisylab_core::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "noisylab", version, about = "Noisy-label multi-label experiments on synthetic chest images")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,

    /// Overrides the seed of whatever the subcommand randomizes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset directory.
    Generate {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        /// TOML generator settings; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_samples: Option<usize>,
        /// Apply a random per-image affine intensity change.
        #[arg(long)]
        shift: bool,
    },
    /// Window one PGM image and write it as 16-bit PGM.
    Normalize {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        median_width: Option<usize>,
        #[arg(long)]
        gauss_sigma: Option<f64>,
    },
    /// Train one configuration on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// baseline, +norm, +seg, +loc, +noise, +corr, all-noise, all-corr, all.
        #[arg(long, default_value = "baseline")]
        configuration: String,
        /// Experiment spec supplying training, loss and window settings.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Trailing fraction of samples held out for validation.
        #[arg(long, default_value_t = 0.1)]
        validation_fraction: f64,
    },
    /// Predict a dataset with a trained run and score it.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "predictions.csv")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = LabelSet::True)]
        labels: LabelSet,
        #[arg(long, default_value_t = 1000)]
        bootstrap: usize,
    },
    /// Sensitivity and specificity of one label file against a reference.
    MeasureNoise {
        #[arg(long)]
        noisy: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Also save the profile as a key/matrix text file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Class-by-class label correlation matrix as CSV.
    Correlate {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value_t = MatrixKind::Pearson)]
        kind: MatrixKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rebuild report.csv and report.txt from a results directory.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
    /// Run a full experiment from a TOML spec.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the spec's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LabelSet {
    True,
    Noisy,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MatrixKind {
    Pearson,
    Covariance,
}

struct Ctx {
    workdir: PathBuf,
    seed: Option<u64>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn cmd_generate(ctx: &Ctx, out: &Path, config: Option<&Path>, n_samples: Option<usize>, shift: bool) -> Result<String, Error> {
    let mut cfg: GeneratorConfig = match config {
        Some(p) => read_toml(&ctx.path(p))?,
        None => GeneratorConfig::default(),
    };
    if let Some(n) = n_samples {
        cfg.n_samples = n;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if shift && cfg.intensity_shift.is_none() {
        cfg.intensity_shift = Some(IntensityShift {
            gain_min: 0.5,
            gain_max: 2.0,
            offset_max: 0.5,
        });
    }
    let ds = generate(&cfg)?;
    let dir = ctx.path(out);
    ds.write_to(&dir)?;
    Ok(format!("wrote {} samples to {}\n", cfg.n_samples, dir.display()))
}

fn cmd_normalize(
    ctx: &Ctx,
    input: &Path,
    output: &Path,
    tau: Option<f64>,
    median_width: Option<usize>,
    gauss_sigma: Option<f64>,
) -> Result<String, Error> {
    let mut cfg = WindowConfig::default();
    if let Some(t) = tau {
        cfg.tau = t;
    }
    if let Some(w) = median_width {
        cfg.median_width = w;
    }
    if let Some(s) = gauss_sigma {
        cfg.gauss_sigma = s;
    }
    let image = read_pgm(&ctx.path(input))?;
    let bounds = detect_bounds(&build_histogram(&image), &cfg)?;
    let out = apply_window(&image, &bounds)?;
    write_normalized_pgm(&ctx.path(output), &out)?;
    Ok(format!("b_low = {}\nb_high = {}\n", bounds.b_low, bounds.b_high))
}

/// Settings saved next to a trained checkpoint so `evaluate` can rebuild
/// the same features.
#[derive(Serialize, Deserialize)]
struct RunInfo {
    configuration: String,
    normalize: bool,
    raw_scale: f64,
    window: WindowConfig,
    class_names: Vec<String>,
}

fn load_spec_or_default(ctx: &Ctx, spec: Option<&Path>) -> Result<ExperimentSpec, Error> {
    match spec {
        Some(p) => ExperimentSpec::load(&ctx.path(p)),
        None => ExperimentSpec::parse("output_dir = \".\"\nconfigurations = [\"baseline\"]\n", Path::new("<default>")),
    }
}

fn cmd_train(
    ctx: &Ctx,
    data: &Path,
    out: &Path,
    configuration: &str,
    spec: Option<&Path>,
    validation_fraction: f64,
) -> Result<String, Error> {
    let components = Components::from_name(configuration)?;
    let spec = load_spec_or_default(ctx, spec)?;
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Invalid(format!("validation fraction {validation_fraction} outside (0, 1)")));
    }
    let ds = SyntheticDataset::read_from(&ctx.path(data))?;
    let n = ds.true_labels.n_samples();
    let validation = ((n as f64 * validation_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let split = SplitSizes {
        train: n - validation,
        validation,
        test: 0,
    };
    let class_names = ds.true_labels.class_names().to_vec();
    let mut prepared = PreparedData::new(ds, &split)?;
    let seed = ctx.seed.unwrap_or(spec.training.seed);
    let (log, result) = run_configuration(&mut prepared, &components, &spec, seed);
    let dir = ctx.path(out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    log.save(&dir.join("log.csv"))?;
    let run = result?;
    run.model.save(&dir.join("checkpoint.bin"))?;
    let info = RunInfo {
        configuration: configuration.to_string(),
        normalize: components.normalize,
        raw_scale: prepared.raw_scale(),
        window: spec.window,
        class_names,
    };
    let text = toml::to_string(&info).map_err(|e| Error::Invalid(e.to_string()))?;
    write_file(&dir.join("run.toml"), &text)?;
    let best = log.best_epoch.map_or("none".to_string(), |e| e.to_string());
    Ok(format!(
        "trained {configuration} for {} epochs (best {best}, {}); wrote {}\n",
        log.epochs.len(),
        log.stop_reason,
        dir.display()
    ))
}

fn cmd_evaluate(ctx: &Ctx, run: &Path, data: &Path, out: &Path, labels: LabelSet, bootstrap: usize) -> Result<String, Error> {
    let run_dir = ctx.path(run);
    let info: RunInfo = read_toml(&run_dir.join("run.toml"))?;
    let model = ModelState::load(&run_dir.join("checkpoint.bin"))?;
    let ds = SyntheticDataset::read_from(&ctx.path(data))?;
    if ds.true_labels.class_names() != info.class_names.as_slice() {
        return Err(Error::Invalid("dataset classes differ from the trained model's".into()));
    }
    let images: Vec<&GrayImage> = ds.samples.iter().map(|s| &s.image).collect();
    let features = image_features(&images, info.normalize.then_some(&info.window), info.raw_scale)?;
    let preds = model.predict(features.view(), Heads::default())?.abnormality;
    write_predictions(&ctx.path(out), ds.true_labels.sample_ids(), &info.class_names, &preds)?;
    let truth = match labels {
        LabelSet::True => &ds.true_labels,
        LabelSet::Noisy => &ds.noisy_labels,
    };
    let seed = ctx.seed.unwrap_or(0);
    let mut s = String::from("class,auc,ci_low,ci_high\n");
    for (n, name) in info.class_names.iter().enumerate() {
        let scores = preds.column(n).to_vec();
        let y = truth.column(n);
        let a = auc(&scores, &y)?.auc;
        let (lo, hi) = bootstrap_ci(&scores, &y, bootstrap, seed, 0.95)?;
        let _ = writeln!(s, "{name},{a},{lo},{hi}");
    }
    Ok(s)
}

fn cmd_measure_noise(ctx: &Ctx, noisy: &Path, reference: &Path, out: Option<&Path>) -> Result<String, Error> {
    let noisy = LabelMatrix::load_csv(&ctx.path(noisy))?;
    let reference = LabelMatrix::load_csv(&ctx.path(reference))?;
    let profile = measure_noise_profile(&noisy, &reference)?;
    if let Some(p) = out {
        profile.to_document().write_to(&ctx.path(p))?;
    }
    let width = profile.class_names.iter().map(|c| c.len()).max().unwrap_or(0).max("Abnormality".len());
    let mut s = format!("{:<width$}  {:>6}  {:>6}\n", "Abnormality", "s_sens", "s_spec");
    let mut sums = (0.0, 0.0, 0usize);
    for (n, name) in profile.class_names.iter().enumerate() {
        let flag = if profile.active[n] { "" } else { "  (inactive)" };
        let _ = writeln!(
            s,
            "{name:<width$}  {:>6.3}  {:>6.3}{flag}",
            profile.sensitivity[n], profile.specificity[n]
        );
        if profile.active[n] {
            sums.0 += profile.sensitivity[n];
            sums.1 += profile.specificity[n];
            sums.2 += 1;
        }
    }
    if sums.2 > 0 {
        let k = sums.2 as f64;
        let _ = writeln!(s, "{:<width$}  {:>6.3}  {:>6.3}", "Average", sums.0 / k, sums.1 / k);
    }
    Ok(s)
}

fn cmd_correlate(ctx: &Ctx, labels: &Path, kind: MatrixKind, out: Option<&Path>) -> Result<String, Error> {
    let labels = LabelMatrix::load_csv(&ctx.path(labels))?;
    let stats = compute_correlation(&labels)?;
    let m = match kind {
        MatrixKind::Pearson => &stats.pearson,
        MatrixKind::Covariance => &stats.covariance,
    };
    let mut s = String::from("class");
    for c in &stats.class_names {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for (r, c) in stats.class_names.iter().enumerate() {
        s.push_str(c);
        for v in m.row(r) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    match out {
        Some(p) => {
            write_file(&ctx.path(p), &s)?;
            let flagged: Vec<&str> = stats
                .class_names
                .iter()
                .zip(&stats.degenerate)
                .filter(|(_, d)| **d)
                .map(|(c, _)| c.as_str())
                .collect();
            Ok(if flagged.is_empty() {
                String::new()
            } else {
                format!("zero-variance classes: {}\n", flagged.join(", "))
            })
        }
        None => Ok(s),
    }
}

fn cmd_report(ctx: &Ctx, results: &Path) -> Result<String, Error> {
    let root = ctx.path(results);
    let report = build_report(&root)?;
    report.save(&root)?;
    Ok(report.to_table())
}

fn cmd_run(ctx: &Ctx, spec_path: &Path, out: Option<&Path>) -> Result<String, Error> {
    let mut spec = ExperimentSpec::load(&ctx.path(spec_path))?;
    if let Some(s) = ctx.seed {
        spec.base_seed = s;
    }
    if let Some(o) = out {
        spec.output_dir = o.to_path_buf();
    }
    let root = ctx.path(&spec.output_dir);
    let report = run_experiment(&spec, &root)?;
    Ok(report.to_table())
}

fn dispatch(cli: Cli) -> Result<String, Error> {
    let ctx = Ctx {
        workdir: cli.workdir,
        seed: cli.seed,
    };
    match &cli.command {
        Command::Generate {
            out,
            config,
            n_samples,
            shift,
        } => cmd_generate(&ctx, out, config.as_deref(), *n_samples, *shift),
        Command::Normalize {
            input,
            output,
            tau,
            median_width,
            gauss_sigma,
        } => cmd_normalize(&ctx, input, output, *tau, *median_width, *gauss_sigma),
        Command::Train {
            data,
            out,
            configuration,
            spec,
            validation_fraction,
        } => cmd_train(&ctx, data, out, configuration, spec.as_deref(), *validation_fraction),
        Command::Evaluate {
            run,
            data,
            out,
            labels,
            bootstrap,
        } => cmd_evaluate(&ctx, run, data, out, *labels, *bootstrap),
        Command::MeasureNoise { noisy, reference, out } => cmd_measure_noise(&ctx, noisy, reference, out.as_deref()),
        Command::Correlate { labels, kind, out } => cmd_correlate(&ctx, labels, *kind, out.as_deref()),
        Command::Report { results } => cmd_report(&ctx, results),
        Command::Run { spec, out } => cmd_run(&ctx, spec, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            })
        }
    }
}
