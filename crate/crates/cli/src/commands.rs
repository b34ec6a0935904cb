use std::path::{Path, PathBuf};
use std::time::Instant;

use bpme::conditioned::{self, HarmonicTable, SurvivalConstant};
use bpme::identities;
use bpme::rng::{PathRng, StreamModule};
use bpme::simulate::simulate;
use bpme::spectral::{self, SpectralReport};
use bpme::theorems::{self, Check, ExperimentReport, TheoremId};
use serde::Serialize;

use crate::config::{calibrated, parse_config, Experiment, StateRef};
use crate::output::{write_csv, write_json, ErrorRecord};
use crate::Command;

/// Stdout is informational; a closed pipe is not an error.
fn print_out(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

pub enum Outcome {
    Passed,
    Failed,
}

struct Context {
    exp: Experiment,
    hash: String,
    dir: PathBuf,
}

impl Context {
    fn path(&self, stem: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{stem}-{}.{ext}", self.hash))
    }
}

pub fn run(command: &Command, config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Outcome, ErrorRecord> {
    let text = std::fs::read_to_string(config).map_err(|e| ErrorRecord::io(config, e))?;
    let mut exp = parse_config(&text)?;
    if let Some(seed) = seed {
        exp.config.seed = seed;
    }
    let dir =
        out.map(Path::to_path_buf).or_else(|| exp.config.output_dir.as_ref().map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| ErrorRecord::io(&dir, e))?;
    let ctx = Context { hash: exp.hash(), exp, dir };
    let started = Instant::now();
    let outcome = match command {
        Command::Analyze => analyze(&ctx),
        Command::Simulate => simulate_paths(&ctx),
        Command::Harmonic => harmonic(&ctx).map(|_| Outcome::Passed),
        Command::Survival => survival(&ctx).map(|_| Outcome::Passed),
        Command::Theorem { id } => theorem(&ctx, id),
        Command::VerifyIdentities => verify(&ctx),
        Command::Calibrate { state } => calibrate(&ctx, state),
    };
    log::info!("{command:?} finished in {:.2?}", started.elapsed());
    outcome
}

#[derive(Serialize)]
struct AnalyzeSummary<'a> {
    config_hash: &'a str,
    labels: &'a [String],
    drift: f64,
    sigma: f64,
    report: SpectralReport,
}

fn analyze(ctx: &Context) -> Result<Outcome, ErrorRecord> {
    let model = &ctx.exp.model;
    let report = spectral::analyze(model).map_err(ErrorRecord::computation)?;
    let summary =
        AnalyzeSummary { config_hash: &ctx.hash, labels: model.labels(), drift: model.drift(), sigma: report.sigma2.sqrt(), report };
    write_json(&ctx.path("analyze", "json"), &summary)?;
    print_out(&serde_json::to_string_pretty(&summary).expect("summary serialises"));
    Ok(Outcome::Passed)
}

#[derive(Serialize)]
struct TrajectoryRow<'a> {
    config_hash: &'a str,
    step: usize,
    x: &'a str,
    z: u64,
    s: f64,
}

fn simulate_paths(ctx: &Context) -> Result<Outcome, ErrorRecord> {
    let c = &ctx.exp.config;
    let n = *c.horizons.last().unwrap();
    for r in 0..c.replicates.simulate {
        let mut rng = PathRng::new(c.seed, StreamModule::Simulate, r);
        let t = simulate(&ctx.exp.model, ctx.exp.i, c.initial_population, n, &mut rng).map_err(ErrorRecord::computation)?;
        if let Some(step) = t.censored_at {
            log::warn!("replicate {r} overflowed at step {step}; trajectory truncated");
        }
        let rows =
            (0..t.x.len()).map(|k| TrajectoryRow { config_hash: &ctx.hash, step: k, x: ctx.exp.label(t.x[k]), z: t.z[k], s: t.s[k] });
        write_csv(&ctx.dir.join(format!("trajectory-{}-{r:05}.csv", ctx.hash)), rows)?;
    }
    Ok(Outcome::Passed)
}

#[derive(Serialize)]
struct HarmonicRow<'a> {
    config_hash: &'a str,
    state: &'a str,
    y: f64,
    #[serde(rename = "V")]
    v: f64,
    stderr: f64,
}

#[derive(Serialize)]
struct HarmonicSummary<'a> {
    config_hash: &'a str,
    horizon: usize,
    replicates: u64,
    residuals: Vec<conditioned::Residual>,
    residuals_within_3se: usize,
    cross_check: Vec<conditioned::CrossCheckPoint>,
    worst_drift: Option<(usize, f64, f64, f64)>,
}

fn harmonic_table(ctx: &Context) -> Result<HarmonicTable, ErrorRecord> {
    let c = &ctx.exp.config;
    conditioned::estimate_v(&ctx.exp.model, &c.y_grid, c.harmonic_horizon, c.replicates.harmonic, c.seed).map_err(ErrorRecord::computation)
}

fn harmonic(ctx: &Context) -> Result<HarmonicTable, ErrorRecord> {
    let model = &ctx.exp.model;
    let table = harmonic_table(ctx)?;
    let rows = table.rows();
    write_csv(
        &ctx.path("harmonic", "csv"),
        rows.iter().map(|&(i, y, v, stderr)| HarmonicRow { config_hash: &ctx.hash, state: ctx.exp.label(i), y, v, stderr }),
    )?;
    let sigma = spectral::sigma2(model, spectral::SIGMA2_TAIL_TOL).sqrt();
    let top = table.requested.last().copied().unwrap_or(0.0);
    let fixed = conditioned::fixed_point_v(model, top + 6.0 * sigma * (table.horizon as f64).sqrt() + 1.0, 0.01, table.horizon);
    let residuals = table.residuals(model);
    let summary = HarmonicSummary {
        config_hash: &ctx.hash,
        horizon: table.horizon,
        replicates: table.replicates,
        residuals_within_3se: residuals.iter().filter(|r| r.residual.abs() <= 3.0 * r.se).count(),
        residuals,
        cross_check: conditioned::cross_check(&table, &fixed),
        worst_drift: table.worst_drift(),
    };
    write_json(&ctx.path("harmonic", "json"), &summary)?;
    Ok(table)
}

#[derive(Serialize)]
struct ProductRow<'a> {
    config_hash: &'a str,
    y: f64,
    product: f64,
    se: f64,
}

#[derive(Serialize)]
struct SurvivalSummary<'a> {
    config_hash: &'a str,
    initial_state: &'a str,
    initial_population: u64,
    constant: &'a SurvivalConstant,
}

fn survival(ctx: &Context) -> Result<SurvivalConstant, ErrorRecord> {
    let c = &ctx.exp.config;
    let table = harmonic_table(ctx)?;
    let constant = conditioned::estimate_survival_constant(
        &ctx.exp.model,
        &table,
        ctx.exp.i,
        c.initial_population,
        &c.u_levels,
        &ctx.exp.plus_config(),
        c.replicates.plus,
        c.seed,
    )
    .map_err(ErrorRecord::computation)?;
    write_csv(
        &ctx.path("survival", "csv"),
        constant.products.iter().map(|p| ProductRow { config_hash: &ctx.hash, y: p.y, product: p.product, se: p.se }),
    )?;
    write_json(
        &ctx.path("survival", "json"),
        &SurvivalSummary {
            config_hash: &ctx.hash,
            initial_state: ctx.exp.label(ctx.exp.i),
            initial_population: c.initial_population,
            constant: &constant,
        },
    )?;
    Ok(constant)
}

#[derive(Serialize)]
struct ReportRowCsv<'a> {
    config_hash: &'a str,
    theorem: &'a str,
    n: usize,
    state: Option<&'a str>,
    t: Option<f64>,
    quantity: &'a str,
    estimate: f64,
    se: f64,
    reference: Option<f64>,
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    config_hash: &'a str,
    theorem: TheoremId,
    n_list: &'a [usize],
    replicates: u64,
    samples: &'a [usize],
    seed: u64,
    u_hat: Option<(f64, f64)>,
    checks: &'a [Check],
    passed: bool,
}

fn theorem(ctx: &Context, id: &str) -> Result<Outcome, ErrorRecord> {
    let id: TheoremId = id.parse().map_err(|e: theorems::TheoremError| ErrorRecord::usage(e))?;
    let u_hat = if id == TheoremId::Survival {
        let u = survival(ctx)?;
        Some((u.u, u.se))
    } else {
        None
    };
    let report: ExperimentReport =
        theorems::run_theorem(&ctx.exp.model, id, &ctx.exp.theorem_config(), u_hat).map_err(ErrorRecord::computation)?;
    let stem = format!("theorem-{id}");
    write_csv(
        &ctx.path(&stem, "csv"),
        report.rows.iter().map(|r| ReportRowCsv {
            config_hash: &ctx.hash,
            theorem: id.as_str(),
            n: r.n,
            state: r.j.map(|j| ctx.exp.label(j)),
            t: r.t,
            quantity: r.quantity,
            estimate: r.estimate,
            se: r.se,
            reference: r.reference,
        }),
    )?;
    let summary = ReportSummary {
        config_hash: &ctx.hash,
        theorem: id,
        n_list: &report.n_list,
        replicates: report.replicates,
        samples: &report.samples,
        seed: report.seed,
        u_hat,
        checks: &report.checks,
        passed: report.passed(),
    };
    write_json(&ctx.path(&stem, "json"), &summary)?;
    log::info!("theorem {id}: {} replicates in {:.2?}", report.replicates, report.runtime);
    for c in report.checks.iter().filter(|c| !c.passed) {
        log::warn!("check failed: {} ({} > {})", c.name, c.statistic, c.bound);
    }
    Ok(if report.passed() { Outcome::Passed } else { Outcome::Failed })
}

#[derive(Serialize)]
struct IdentitySummary<'a> {
    config_hash: &'a str,
    passed: bool,
    checks: &'a [identities::IdentityCheck],
}

fn verify(ctx: &Context) -> Result<Outcome, ErrorRecord> {
    let report = identities::verify_model(&ctx.exp.model, ctx.exp.config.seed);
    let summary = IdentitySummary { config_hash: &ctx.hash, passed: report.passed(), checks: &report.checks };
    write_json(&ctx.path("identities", "json"), &summary)?;
    for c in &report.checks {
        print_out(&format!(
            "{:<12} {:<22} cases {:>5}  max error {:.3e}  tol {:.0e}  {}",
            c.suite,
            c.name,
            c.cases,
            c.max_error,
            c.tolerance,
            if c.passed { "ok" } else { "FAIL" }
        ));
    }
    Ok(if report.passed() { Outcome::Passed } else { Outcome::Failed })
}

fn calibrate(ctx: &Context, state: &str) -> Result<Outcome, ErrorRecord> {
    let model = &ctx.exp.model;
    let reference = match state.parse::<usize>() {
        Ok(k) => StateRef::Index(k),
        Err(_) => StateRef::Label(state.to_string()),
    };
    let k = match &reference {
        StateRef::Index(k) if *k < model.dim() => *k,
        StateRef::Label(l) if model.state_index(l).is_some() => model.state_index(l).unwrap(),
        _ => return Err(ErrorRecord { field: Some("--state".into()), ..ErrorRecord::usage(format!("unknown state {state:?}")) }),
    };
    let config = calibrated(&ctx.exp, k)?;
    write_json(&ctx.path("calibrated", "json"), &config)?;
    print_out(&serde_json::to_string_pretty(&config).expect("config serialises"));
    Ok(Outcome::Passed)
}
