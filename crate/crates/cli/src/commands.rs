use std::path::{Path, PathBuf};

use gamem::design::ModelDesign;
use gamem::em::{em_fit, EmSettings, FitResult, TermStatus};
use gamem::error::FitError;
use gamem::families::Family;
use gamem::inference::{gev_quantile, predict_parameters, quantile_curves, simulate_from_fit};
use gamem::simulate::{run_study, StudyConfig, StudyReport};

use crate::archive::FitArchive;
use crate::config::{fingerprint, ModelConfig};
use crate::error::{input, CliError, Result};
use crate::io::{self, number, read_table};

/// Outer-iteration overrides shared by `fit` and `simulate`.
#[derive(Debug, Clone, Default)]
pub struct EmOverrides {
    pub tol: Option<f64>,
    pub max_outer: Option<usize>,
}

impl EmOverrides {
    fn apply(&self, mut s: EmSettings) -> Result<EmSettings> {
        if let Some(t) = self.tol {
            if !(t > 0.0) {
                return Err(input(format!("--tol must be positive, got {t}")));
            }
            s.tol = t;
        }
        if let Some(m) = self.max_outer {
            if m == 0 {
                return Err(input("--max-outer must be at least 1"));
            }
            s.max_outer = m;
        }
        Ok(s)
    }
}

/// Builds the global worker pool once; later calls are no-ops.
pub fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(input("--threads must be at least 1"));
        }
        // an already built pool (tests calling twice) keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// The explicit seed, or a fresh one that is reported so the run can be repeated.
pub fn resolve_seed(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        eprintln!("seed = {s} (pass --seed {s} to repeat this run)");
        s
    })
}

pub struct FitArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub em: EmOverrides,
    pub threads: Option<usize>,
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let config = ModelConfig::load(&args.config)?;
    init_threads(args.threads.or(config.threads))?;
    let table = read_table(&args.data, &config.columns())?;
    let design = ModelDesign::assemble(&config.model_spec(), &table)?;
    let settings = args.em.apply(config.fit.settings())?;
    let n = table.nrows();
    match em_fit(&design, &settings) {
        Ok(result) => {
            FitArchive::new(config, n, result.clone()).save(&args.out)?;
            print!("{}", summary(&result, n, &args.out));
            Ok(())
        }
        Err(FitError::NonConvergence { iterations, best }) => {
            FitArchive::new(config, n, (*best).clone()).save(&args.out)?;
            print!("{}", summary(&best, n, &args.out));
            Err(CliError::Numerical(format!(
                "smoothing parameters did not converge within {iterations} outer iterations; \
                 the archive holds the last iterate"
            )))
        }
        Err(e @ FitError::Design(_)) => Err(e.into()),
        Err(e) => Err(CliError::Numerical(format!("fit failed: {e}"))),
    }
}

fn status_name(s: TermStatus) -> &'static str {
    match s {
        TermStatus::Active => "active",
        TermStatus::Converged => "converged",
        TermStatus::Stagnant => "stagnant",
        TermStatus::Bound => "at bound",
        TermStatus::Empty => "empty",
    }
}

/// Human-readable account of a fit.
pub fn summary(r: &FitResult, n: usize, archive: &Path) -> String {
    let mut s = String::new();
    s.push_str(&format!("family     {}\n", r.family));
    s.push_str(&format!("rows       {n}\n"));
    s.push_str(&format!(
        "converged  {} ({} outer iterations, {} Newton steps)\n",
        if r.converged { "yes" } else { "no" },
        r.outer_iterations,
        r.newton_iterations
    ));
    s.push_str(&format!("loglik     {:.6}\n", r.loglik));
    s.push_str(&format!("penalized  {:.6}\n", r.loglik_pen));
    if r.dropped.is_empty() {
        s.push_str("dropped    none\n");
    } else {
        let names: Vec<&str> = r.dropped.iter().map(|&k| r.coef_names[k].as_str()).collect();
        s.push_str(&format!("dropped    {}\n", names.join(", ")));
    }
    if !r.terms.is_empty() {
        let width = r.terms.iter().map(|t| t.label.len()).max().unwrap_or(0).max(4);
        s.push_str(&format!("{:width$}  {:>12}  {:>7}  status\n", "term", "lambda", "edf"));
        for t in &r.terms {
            s.push_str(&format!(
                "{:width$}  {:>12.5e}  {:>7.3}  {}\n",
                t.label,
                t.lambda,
                t.edf,
                status_name(t.status)
            ));
        }
    }
    s.push_str(&format!("archive    {}\n", archive.display()));
    s
}

/// Columns that prediction reads from new data.
fn layout_columns(fit: &FitResult) -> Result<Vec<String>> {
    let layout = fit
        .layout
        .as_ref()
        .ok_or_else(|| input("archive has no basis layout to predict from"))?;
    let mut cols: Vec<String> = Vec::new();
    for b in &layout.blocks {
        for c in b.columns() {
            if !cols.iter().any(|x| x == c) {
                cols.push(c.to_string());
            }
        }
    }
    Ok(cols)
}

pub struct PredictArgs {
    pub archive: PathBuf,
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub level: f64,
    pub quantiles: Vec<f64>,
    pub quantile_bands: bool,
    pub draws: usize,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub threads: Option<usize>,
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    init_threads(args.threads)?;
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(input(format!("--level must lie in (0, 1), got {}", args.level)));
    }
    if let Some(p) = args.quantiles.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(input(format!("quantile probabilities must lie in (0, 1), got {p}")));
    }
    let archive = FitArchive::load(&args.archive)?;
    if let Some(path) = &args.config {
        let config = ModelConfig::load(path)?;
        if fingerprint(&config.model_spec()) != archive.fingerprint {
            return Err(input(format!(
                "{} describes a different model than {}",
                path.display(),
                args.archive.display()
            )));
        }
    }
    let fit = &archive.fit;
    if !args.quantiles.is_empty() && fit.family != Family::Gev {
        return Err(input(format!(
            "--quantiles needs a gev fit, archive holds {}",
            fit.family
        )));
    }
    let table = read_table(&args.data, &layout_columns(fit)?)?;
    let pred = predict_parameters(fit, &table, args.level)?;
    let curves = if args.quantiles.is_empty() || !args.quantile_bands {
        None
    } else {
        let seed = resolve_seed(args.seed.or(archive.config.seed));
        Some(quantile_curves(
            fit,
            &table,
            &args.quantiles,
            args.level,
            args.draws,
            seed,
        )?)
    };

    let mut header = vec!["row".to_string()];
    for p in &pred.parameters {
        let (e, r) = (&p.name, &p.response_name);
        header.extend([
            format!("eta_{e}"),
            format!("se_{e}"),
            format!("eta_{e}_lower"),
            format!("eta_{e}_upper"),
            r.clone(),
            format!("{r}_lower"),
            format!("{r}_upper"),
        ]);
    }
    for q in &args.quantiles {
        header.push(format!("q{q}"));
        if curves.is_some() {
            header.extend([format!("q{q}_lower"), format!("q{q}_upper")]);
        }
    }
    header.push("extrapolated".into());

    let mut w = io::writer(args.out.as_deref())?;
    io::write_row(&mut w, &header)?;
    for i in 0..table.nrows() {
        let mut row = vec![i.to_string()];
        for p in &pred.parameters {
            for v in [
                p.eta[i],
                p.se[i],
                p.lower[i],
                p.upper[i],
                p.response[i],
                p.response_lower[i],
                p.response_upper[i],
            ] {
                row.push(number(v));
            }
        }
        for (k, &q) in args.quantiles.iter().enumerate() {
            match &curves {
                Some(c) => {
                    row.push(number(c[k].estimate[i]));
                    row.push(number(c[k].lower[i]));
                    row.push(number(c[k].upper[i]));
                }
                None => {
                    let theta: Vec<f64> = pred.parameters.iter().map(|p| p.eta[i]).collect();
                    row.push(number(gev_quantile(&theta, q)));
                }
            }
        }
        row.push(pred.extrapolated[i].to_string());
        io::write_row(&mut w, &row)?;
    }
    io::finish(w)
}

pub struct SampleArgs {
    pub archive: PathBuf,
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub replicates: usize,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

/// Responses drawn from a fitted model at every row of new data.
pub fn sample(args: &SampleArgs) -> Result<()> {
    init_threads(args.threads)?;
    if args.replicates == 0 {
        return Err(input("--replicates must be at least 1"));
    }
    let archive = FitArchive::load(&args.archive)?;
    let fit = &archive.fit;
    let table = read_table(&args.data, &layout_columns(fit)?)?;
    let seed = resolve_seed(args.seed.or(archive.config.seed));
    let sims = simulate_from_fit(fit, &table, args.replicates, seed)?;
    let mut w = io::writer(args.out.as_deref())?;
    let mut header = vec!["row".to_string()];
    header.extend((1..=args.replicates).map(|r| format!("sim_{r}")));
    io::write_row(&mut w, &header)?;
    for i in 0..table.nrows() {
        let mut row = vec![i.to_string()];
        row.extend(sims.iter().map(|s| number(s[i])));
        io::write_row(&mut w, &row)?;
    }
    io::finish(w)
}

pub struct SimulateArgs {
    pub model: Family,
    pub n: usize,
    pub replicates: usize,
    pub seed: Option<u64>,
    pub k: usize,
    pub timing: bool,
    pub out: Option<PathBuf>,
    pub em: EmOverrides,
    pub threads: Option<usize>,
}

/// Runs a simulation study and writes one CSV row per replicate and parameter.
///
/// `mse` is on the distribution-parameter scale and `mse_functional` on the
/// scale of the additive functionals.
///
/// The `seconds` column is left empty unless timing is requested, so that
/// reports from identical invocations are byte-identical.
pub fn simulate(args: &SimulateArgs) -> Result<()> {
    init_threads(args.threads)?;
    let config = StudyConfig {
        k: args.k,
        em: args.em.apply(EmSettings::default())?,
        parallel: args.threads != Some(1),
        ..StudyConfig::new(args.model, args.n, args.replicates, resolve_seed(args.seed))
    };
    config.validate().map_err(CliError::Input)?;
    let report = run_study(&config);
    write_report(&report, args.timing, args.out.as_deref())?;
    for s in &report.summaries {
        eprintln!(
            "{} {}: {} converged, {} failed, mean MSE {:.4e} (variance {:.4e}, functional scale {:.4e}){}",
            config.family,
            s.parameter,
            s.converged,
            s.failed,
            s.mean_mse,
            s.var_mse,
            s.mean_mse_functional,
            if args.timing {
                format!(", mean {:.2} s per fit", s.mean_seconds)
            } else {
                String::new()
            }
        );
    }
    Ok(())
}

fn write_report(report: &StudyReport, timing: bool, out: Option<&Path>) -> Result<()> {
    let mut w = io::writer(out)?;
    let header = [
        "model",
        "replicate",
        "parameter",
        "mse",
        "mse_functional",
        "seconds",
        "converged",
    ];
    io::write_row(&mut w, &header.map(String::from))?;
    for r in &report.rows {
        io::write_row(
            &mut w,
            &[
                r.model.clone(),
                r.replicate.to_string(),
                r.parameter.clone(),
                r.mse.map(number).unwrap_or_default(),
                r.mse_functional.map(number).unwrap_or_default(),
                if timing { number(r.seconds) } else { String::new() },
                r.converged.to_string(),
            ],
        )?;
    }
    io::finish(w)
}
