//! `uslv <subcommand> --config <path> [--out <dir>] [--oracle] [--tol <x>]`
//!
//! Exit status: 0 on success, 2 for input and configuration errors, 3 for
//! numerical failures. The category is also printed on stderr as
//! `category = input|numerical`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use uslv_core::config::{EngineConfig, Flavor};
use uslv_core::lgp_curve::calibrate_curve;
use uslv_core::markov_generator::{split_generator, validate_generator};
use uslv_core::pricing::{backward_induction_price, PricingModel, PricingOptions};
use uslv_core::{Category, Error};

#[derive(Parser)]
#[command(name = "uslv", version, about = "Markov-chain curve, volatility and pricing engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Engine configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for reports; created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Dense matrix exponentials instead of uniformization (chains of at most 400 states).
    #[arg(long, global = true)]
    oracle: bool,
    /// Overrides the calibration residual tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Fit the rate-curve parameters to zero-yield quotes.
    CalibrateCurve,
    /// Build and check the first-interval generator.
    BuildGenerator,
    /// Calibrate the speed-factor term structure to vanilla quotes.
    CalibrateLv,
    /// Forward-induction calibration of the activity-rate model.
    CalibrateAr,
    /// Calibrate the implied dilaton process to node quotes.
    CalibrateItc,
    /// Price the configured payoff schedule by backward induction.
    Price,
    /// Check the configuration and every interval generator.
    Validate,
}

/// Failure carrying its exit category.
struct Failure {
    category: Category,
    error: anyhow::Error,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { category: e.category(), error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let category = error.downcast_ref::<Error>().map_or(Category::Input, Error::category);
        Self { category, error }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (label, code) = match f.category {
                Category::Input => ("input", 2),
                Category::Numerical => ("numerical", 3),
            };
            eprintln!("error: {:#}", f.error);
            eprintln!("category = {label}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = EngineConfig::load(path)?;
    if let Some(tol) = cli.tol {
        if !(tol > 0.0) {
            return Err(Error::Config(format!("--tol must be positive, got {tol}")).into());
        }
        cfg.solver.tol = tol;
    }
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match cli.command {
        Command::CalibrateCurve => calibrate_curve_cmd(&cfg, &cli.out),
        Command::BuildGenerator => build_generator(&cfg, &cli.out),
        Command::CalibrateLv => calibrate_lv(&cfg, &cli.out),
        Command::CalibrateAr => calibrate_ar(&cfg, &cli.out),
        Command::CalibrateItc => calibrate_itc(&cfg, &cli.out),
        Command::Price => price(&cfg, &cli.out, cli.oracle),
        Command::Validate => validate(&cfg, &cli.out),
    }
}

fn write(out: &Path, name: &str, text: &str) -> Outcome {
    let p = out.join(name);
    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn to_toml<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    toml::to_string(v).map_err(|e| Failure { category: Category::Input, error: e.into() })
}

fn row(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.14e}")).collect::<Vec<_>>().join(",")
}

fn calibrate_curve_cmd(cfg: &EngineConfig, out: &Path) -> Outcome {
    let quotes = cfg.curve_quotes()?;
    let section = cfg.curve.as_ref().expect("quotes imply a curve section");
    let x0 = section.x_guess.clone().unwrap_or_else(|| vec![0.0; section.params.n_factors()]);
    let fit = calibrate_curve(&quotes, &section.params, &x0)?;
    let mut s = String::new();
    let max = fit.residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    writeln!(s, "max_residual = {max:.14e}\niterations = {}\nx = [{}]", fit.iterations, row(&fit.x)).ok();
    writeln!(s, "\n[residuals]\nmaturity_years,residual").ok();
    for (q, r) in quotes.iter().zip(&fit.residuals) {
        writeln!(s, "{:.14e},{r:.14e}", q.maturity).ok();
    }
    write(out, "curve_fit.txt", &s)?;
    write(out, "curve_params.toml", &to_toml(&fit.params)?)
}

fn build_generator(cfg: &EngineConfig, out: &Path) -> Outcome {
    let (lv, _) = cfg.lv_model()?;
    let (_, adj) = cfg.space()?;
    let g = lv.interval_generator(0)?;
    let report = validate_generator(&g);
    let mut s = String::new();
    writeln!(s, "states = {}\nnonzeros = {}\nviolations = {}", g.dim(), g.nnz(), report.violations.len()).ok();
    if let Some(a) = adj {
        writeln!(s, "adjusted_step = {a:?}").ok();
    }
    for v in &report.violations {
        writeln!(s, "{v}").ok();
    }
    let mut coo = Vec::new();
    g.write_coo(&mut coo).context("serialising generator")?;
    write(out, "generator.coo", &String::from_utf8_lossy(&coo))?;
    write(out, "generator_report.txt", &s)?;
    if !report.is_valid() {
        return Err(Error::InvalidGenerator(report).into());
    }
    Ok(())
}

fn calibrate_lv(cfg: &EngineConfig, out: &Path) -> Outcome {
    let (lv, report) = cfg.lv_model()?;
    match report {
        Some(r) => {
            println!("max_residual = {:.14e}", r.max_residual());
            write(out, "lv_fit.txt", &r.to_text())?;
        }
        None => println!("speed factors taken from the configuration; nothing fitted"),
    }
    write(out, "speed_factors.toml", &to_toml(&lv.sf)?)
}

fn calibrate_ar(cfg: &EngineConfig, out: &Path) -> Outcome {
    let (lv, _) = cfg.lv_model()?;
    let cal = cfg.ar_calibration(&lv)?;
    let mut s = String::from("time,marginal_gap,q_min,q_max,mass_defect\n");
    for t in &cal.trace {
        writeln!(s, "{:.14e},{:.14e},{:.14e},{:.14e},{:.14e}", t.time, t.marginal_gap, t.q_min, t.q_max, t.mass_defect)
            .ok();
    }
    let gap = cal.marginal(&cal.final_joint).iter().zip(&cal.reference).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("horizon marginal gap = {gap:.14e}");
    write(out, "ar_trace.csv", &s)
}

fn calibrate_itc(cfg: &EngineConfig, out: &Path) -> Outcome {
    let (lv, _) = cfg.lv_model()?;
    let (panel, cal) = cfg.itc_calibration(&lv)?;
    write(out, "dilaton.txt", &cal.law.to_text())?;
    if let Some((k, e)) = cal.failure {
        return Err(Failure {
            category: e.category(),
            error: anyhow::Error::from(e)
                .context(format!("dilaton calibration stopped at node {k}; earlier nodes written")),
        });
    }
    let model = uslv_core::itc_uslv::reprice(&panel, &cal.law);
    let mut s = String::from("node_time,row,target,model\n");
    let mut worst = 0.0f64;
    for (node, m) in panel.nodes.iter().zip(&model) {
        for (j, (c, v)) in node.targets.iter().zip(m).enumerate() {
            worst = worst.max((c - v).abs());
            writeln!(s, "{:.14e},{j},{c:.14e},{v:.14e}", node.time).ok();
        }
    }
    println!("max reprice error = {worst:.14e}");
    write(out, "itc_reprice.csv", &s)
}

fn price(cfg: &EngineConfig, out: &Path, oracle: bool) -> Outcome {
    let (lv, _) = cfg.lv_model()?;
    let schedule = cfg.schedule(&lv)?;
    let opts = PricingOptions { eps: PricingOptions::default().eps.min(cfg.solver.eps), oracle };
    let result = match cfg.flavor {
        Flavor::Uslv10 | Flavor::Uslv20 => backward_induction_price(&PricingModel::Lv(&lv), &schedule, &opts)?,
        Flavor::Ar22 => {
            let cal = cfg.ar_calibration(&lv)?;
            backward_induction_price(&PricingModel::Ar(&cal), &schedule, &opts)?
        }
        Flavor::Itc22 => {
            let (_, cal) = cfg.itc_calibration(&lv)?;
            if let Some((_, e)) = cal.failure {
                return Err(e.into());
            }
            let split = split_generator(&lv.interval_generator(0)?)?;
            let p0 = lv.initial_distribution()?;
            let law = cfg.itc.as_ref().expect("checked on load").law;
            let model = PricingModel::Itc { split: &split, p0: &p0, law, dilaton: &cal.law };
            backward_induction_price(&model, &schedule, &opts)?
        }
    };
    println!("value = {:.14e}", result.value);
    let mut s = format!("value = {:.14e}\n\n[surface]\nstate,value\n", result.value);
    for (k, v) in result.surface.iter().enumerate() {
        writeln!(s, "{k},{v:.14e}").ok();
    }
    write(out, "price.txt", &s)
}

fn validate(cfg: &EngineConfig, out: &Path) -> Outcome {
    let (lv, _) = cfg.lv_model()?;
    let mut s = String::new();
    let mut bad = None;
    for k in 0..lv.sf.maturities.len() {
        let report = validate_generator(&lv.interval_generator(k)?);
        for v in &report.violations {
            writeln!(s, "interval {k}: {v}").ok();
        }
        if bad.is_none() && !report.is_valid() {
            bad = Some(report);
        }
    }
    if let Some(p) = &cfg.price {
        if let Some(e) = p.events.iter().find(|e| e.time > lv.sf.horizon()) {
            writeln!(s, "event at t = {} lies beyond the horizon {}", e.time, lv.sf.horizon()).ok();
        }
    }
    write(out, "violations.txt", &s)?;
    match bad {
        Some(r) => Err(Error::InvalidGenerator(r).into()),
        None if !s.is_empty() => Err(Error::InvalidInput(s.trim_end().to_string()).into()),
        None => Ok(()),
    }
}
