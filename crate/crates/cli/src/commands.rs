use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{info, warn};
use regmvst::bootstrap::{bootstrap_ci, BootstrapConfig};
use regmvst::engine::{fit, fit_with_restarts, EngineKind, FitConfig, FitFlags, FitResult, StepTimings};
use regmvst::info::{complete_info, drop_coordinates, observed_info_mc, rate_matrices, VecSkewTParams};
use regmvst::io::{read_dataset, save_dataset, write_theta};
use regmvst::model::{observed_loglik, residual_table, standardized_residuals, Dataset, Theta};
use regmvst::simgen::{simulate, SchemeConfig};
use regmvst::Error;
use serde::{Deserialize, Serialize};

use crate::manifest::ManifestBuilder;

/// Invalid command-line input detected after parsing; exits with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load(path: &Path) -> Result<Dataset> {
    let data = read_dataset(path).with_context(|| format!("reading {}", path.display()))?;
    info!("loaded {} subjects ({} rows, p={}, q={}) from {}", data.len(), data.total_rows(), data.p, data.q, path.display());
    Ok(data)
}

pub fn simulate_cmd(cfg: &SchemeConfig, out: &Path, truth_out: Option<&Path>) -> Result<()> {
    let (data, truth) = simulate(cfg)?;
    save_dataset(&data, out)?;
    let mut manifest = ManifestBuilder::new(
        "simulate",
        serde_json::json!({ "scheme": format!("{:?}", cfg.scheme), "n_subjects": cfg.n_subjects, "seed": cfg.seed }),
        cfg.seed,
    );
    manifest.output(out);
    if let Some(path) = truth_out {
        write_theta(&truth, path)?;
        manifest.output(path);
    }
    manifest.finish(out)?;
    info!("wrote {} subjects ({} rows) to {}", data.len(), data.total_rows(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct RestartSummary<'a> {
    runs: usize,
    chosen: usize,
    final_logliks: &'a [f64],
}

#[derive(Serialize)]
struct FitReport<'a> {
    engine: EngineKind,
    converged: bool,
    iterations: u64,
    comm_rounds: u64,
    final_loglik: f64,
    theta_hat: &'a Theta,
    theta_init: &'a Theta,
    loglik_initial: Option<f64>,
    #[serde(skip_serializing_if = "<[f64]>::is_empty")]
    loglik_trace: &'a [f64],
    step_timings: &'a StepTimings,
    flags: &'a FitFlags,
    #[serde(skip_serializing_if = "Option::is_none")]
    restarts: Option<RestartSummary<'a>>,
    n_subjects: usize,
    total_rows: usize,
    config: &'a FitConfig,
}

pub struct FitOutputs<'a> {
    pub out: &'a Path,
    pub timings: Option<&'a Path>,
    pub residuals: Option<&'a Path>,
}

pub fn fit_cmd(data_path: &Path, cfg: &FitConfig, restarts: usize, outputs: &FitOutputs) -> Result<()> {
    if restarts == 0 {
        return Err(UsageError("--restarts must be at least 1".into()).into());
    }
    let data = load(data_path)?;
    let (res, summary) = if restarts > 1 {
        let outcome = fit_with_restarts(&data, cfg, restarts)?;
        (outcome.best, Some((outcome.chosen, outcome.final_logliks)))
    } else {
        (fit(&data, cfg)?, None)
    };
    if !res.converged {
        warn!("{} stopped at the iteration cap ({}) without meeting epsilon = {}", res.engine, res.iterations, cfg.epsilon);
    }
    let final_loglik = observed_loglik(&data, &res.theta_hat)?;
    info!("{}: {} iterations, loglik {final_loglik:.6}", res.engine, res.iterations);
    let report = FitReport {
        engine: res.engine,
        converged: res.converged,
        iterations: res.iterations,
        comm_rounds: res.comm_rounds,
        final_loglik,
        theta_hat: &res.theta_hat,
        theta_init: &res.theta_init,
        loglik_initial: res.loglik_initial,
        loglik_trace: &res.loglik_trace,
        step_timings: &res.step_timings,
        flags: &res.flags,
        restarts: summary
            .as_ref()
            .map(|(chosen, lls)| RestartSummary { runs: restarts, chosen: *chosen, final_logliks: lls }),
        n_subjects: data.len(),
        total_rows: data.total_rows(),
        config: cfg,
    };
    write_json(&report, outputs.out)?;

    let mut manifest = ManifestBuilder::new(
        "fit",
        serde_json::json!({ "data": data_path.display().to_string(), "restarts": restarts, "fit": cfg }),
        cfg.seed,
    );
    manifest.output(outputs.out);
    if let Some(path) = outputs.timings {
        write_timings(&res, path)?;
        manifest.output(path);
    }
    if let Some(path) = outputs.residuals {
        write_residuals(&data, &res.theta_hat, path)?;
        manifest.output(path);
    }
    manifest.finish(outputs.out)?;
    Ok(())
}

const TIMING_COLUMNS: [&str; 8] = ["TT", "E-step", "DEC", "Psi", "A", "beta", "nu", "TNI"];

fn timing_values(t: &StepTimings) -> [f64; 7] {
    [t.total, t.e_step, t.dec, t.psi, t.a, t.beta, t.nu]
}

/// One row per iteration plus a `total` row; times in seconds, TNI counts iterations.
fn write_timings(res: &FitResult, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "iteration,{}", TIMING_COLUMNS.join(","))?;
    for (i, t) in res.iteration_timings.iter().enumerate() {
        let cells: Vec<String> = timing_values(t).iter().map(f64::to_string).collect();
        writeln!(w, "{},{},{}", i + 1, cells.join(","), i + 1)?;
    }
    let cells: Vec<String> = timing_values(&res.step_timings).iter().map(f64::to_string).collect();
    writeln!(w, "total,{},{}", cells.join(","), res.iterations)?;
    w.flush()?;
    Ok(())
}

fn write_residuals(data: &Dataset, theta: &Theta, path: &Path) -> Result<()> {
    let table = residual_table(data, &standardized_residuals(data, theta)?);
    let mut w = create(path)?;
    let names: Vec<String> = (1..=data.p).map(|j| format!("r_{j}")).collect();
    writeln!(w, "subject_id,time,{}", names.join(","))?;
    for row in table {
        let cells: Vec<String> = row.residuals.iter().map(f64::to_string).collect();
        writeln!(w, "{},{},{}", row.subject_id, row.time, cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BootstrapSummary<'a> {
    level: f64,
    requested: usize,
    used: usize,
    dropped: usize,
    intervals: &'a [regmvst::bootstrap::Interval],
    theta_hat: &'a Theta,
    config: &'a BootstrapConfig,
}

pub fn bootstrap_cmd(data_path: &Path, cfg: &BootstrapConfig, out: &Path, summary: Option<&Path>) -> Result<()> {
    cfg.validate()?;
    let data = load(data_path)?;
    let res = bootstrap_ci(&data, cfg)?;
    if res.dropped > 0 {
        warn!("{} of {} replicate fits failed and were dropped", res.dropped, res.requested);
    }
    let mut w = create(out)?;
    writeln!(w, "param,point,lo,hi")?;
    for iv in &res.intervals {
        writeln!(w, "{},{},{},{}", iv.param, iv.point, iv.lo, iv.hi)?;
    }
    w.flush()?;
    drop(w);

    let mut manifest = ManifestBuilder::new(
        "bootstrap",
        serde_json::json!({ "data": data_path.display().to_string(), "bootstrap": cfg }),
        cfg.seed,
    );
    manifest.output(out);
    if let Some(path) = summary {
        let s = BootstrapSummary {
            level: res.level,
            requested: res.requested,
            used: res.used,
            dropped: res.dropped,
            intervals: &res.intervals,
            theta_hat: &res.full_fit.theta_hat,
            config: cfg,
        };
        write_json(&s, path)?;
        manifest.output(path);
    }
    manifest.finish(out)?;
    Ok(())
}

/// One column of the benchmark grid: an engine and, for the asynchronous engine, its γ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridEntry {
    pub engine: EngineKind,
    pub gamma: Option<f64>,
}

impl GridEntry {
    pub fn label(&self) -> String {
        match self.gamma {
            Some(g) => format!("{}:{g}", self.engine),
            None => self.engine.to_string(),
        }
    }
}

pub fn parse_grid(spec: &str) -> Result<Vec<GridEntry>, UsageError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (name, gamma) = match item.split_once(':') {
                Some((n, g)) => {
                    let g: f64 = g.parse().map_err(|_| UsageError(format!("invalid gamma in grid entry '{item}'")))?;
                    (n, Some(g))
                }
                None => (item, None),
            };
            let engine = match name {
                "ecme" => EngineKind::Ecme,
                "pecme" => EngineKind::Pecme,
                "adecme" => EngineKind::Adecme,
                _ => return Err(UsageError(format!("unknown engine '{name}' in grid"))),
            };
            if gamma.is_some() && engine != EngineKind::Adecme {
                return Err(UsageError(format!("gamma only applies to adecme, got '{item}'")));
            }
            Ok(GridEntry { engine, gamma })
        })
        .collect::<Result<Vec<_>, _>>()
        .and_then(|v| if v.is_empty() { Err(UsageError("empty engine grid".into())) } else { Ok(v) })
}

#[derive(Serialize)]
struct BenchRun {
    entry: String,
    rep: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_loglik: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    timings: Option<StepTimings>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

pub fn bench_cmd(data_path: &Path, base: &FitConfig, grid: &[GridEntry], reps: usize, out: &Path) -> Result<()> {
    if reps == 0 {
        return Err(UsageError("--reps must be at least 1".into()).into());
    }
    let mut probe = base.clone();
    for entry in grid {
        probe.engine = entry.engine;
        probe.gamma = entry.gamma.unwrap_or(base.gamma);
        probe.validate()?;
    }
    let data = load(data_path)?;
    let mut runs = Vec::new();
    // rows: metric, columns: grid entries
    let mut samples: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); grid.len()]; TIMING_COLUMNS.len()];
    let mut failed = vec![0usize; grid.len()];
    for (col, entry) in grid.iter().enumerate() {
        for rep in 0..reps {
            let cfg = FitConfig {
                engine: entry.engine,
                gamma: entry.gamma.unwrap_or(base.gamma),
                seed: base.seed + rep as u64,
                ..base.clone()
            };
            let mut run = BenchRun {
                entry: entry.label(),
                rep,
                seed: cfg.seed,
                error: None,
                iterations: None,
                converged: None,
                final_loglik: None,
                timings: None,
            };
            match fit(&data, &cfg).and_then(|r| Ok((observed_loglik(&data, &r.theta_hat)?, r))) {
                Ok((ll, res)) => {
                    info!("{} rep {rep}: {} iterations, {:.3} s", entry.label(), res.iterations, res.step_timings.total);
                    for (m, v) in timing_values(&res.step_timings).iter().enumerate() {
                        samples[m][col].push(*v);
                    }
                    samples[7][col].push(res.iterations as f64);
                    run.iterations = Some(res.iterations);
                    run.converged = Some(res.converged);
                    run.final_loglik = Some(ll);
                    run.timings = Some(res.step_timings);
                }
                Err(e) => {
                    warn!("{} rep {rep} failed: {e}", entry.label());
                    failed[col] += 1;
                    run.error = Some(e.to_string());
                }
            }
            runs.push(run);
        }
    }

    let mut w = create(out)?;
    let labels: Vec<String> = grid.iter().map(GridEntry::label).collect();
    writeln!(w, "metric,stat,{}", labels.join(","))?;
    for (m, name) in TIMING_COLUMNS.iter().enumerate() {
        let stats: Vec<(f64, f64)> = samples[m].iter().map(|s| mean_sd(s)).collect();
        let means: Vec<String> = stats.iter().map(|s| s.0.to_string()).collect();
        let sds: Vec<String> = stats.iter().map(|s| s.1.to_string()).collect();
        writeln!(w, "{name},mean,{}", means.join(","))?;
        writeln!(w, "{name},sd,{}", sds.join(","))?;
    }
    let failed: Vec<String> = failed.iter().map(usize::to_string).collect();
    writeln!(w, "failed,count,{}", failed.join(","))?;
    w.flush()?;
    drop(w);

    let runs_path = sibling(out, ".runs.json");
    write_json(&runs, &runs_path)?;
    let mut manifest = ManifestBuilder::new(
        "bench",
        serde_json::json!({ "data": data_path.display().to_string(), "grid": grid, "reps": reps, "fit": base }),
        base.seed,
    );
    manifest.output(out);
    manifest.output(&runs_path);
    manifest.finish(out)?;
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Parameter file for the information command; matrices are lists of rows.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InfoParamsFile {
    beta: Vec<Vec<f64>>,
    a: Vec<f64>,
    sigma: Vec<Vec<f64>>,
    psi: Vec<Vec<f64>>,
    nu: f64,
    x: Vec<Vec<f64>>,
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<nalgebra::DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Data(format!("'{name}' must be a non-empty list of equal-length rows")).into());
    }
    Ok(nalgebra::DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn read_info_params(path: &Path) -> Result<VecSkewTParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let f: InfoParamsFile = serde_json::from_str(&text).map_err(Error::from)?;
    let beta = matrix(&f.beta, "beta")?;
    let b_vec = nalgebra::DVector::from_column_slice(beta.as_slice());
    Ok(VecSkewTParams::new(
        b_vec,
        nalgebra::DVector::from_vec(f.a),
        matrix(&f.sigma, "sigma")?,
        matrix(&f.psi, "psi")?,
        f.nu,
        matrix(&f.x, "x")?,
    )?)
}

#[derive(Serialize)]
struct InfoReport {
    params: Vec<String>,
    pinned: Vec<String>,
    i_complete: Vec<Vec<f64>>,
    i_observed: Vec<Vec<f64>>,
    rate: Vec<Vec<f64>>,
    r_max: f64,
    s_min: f64,
    observed_se_max: f64,
    draws: usize,
    seed: u64,
}

pub fn info_cmd(params_path: &Path, draws: usize, seed: u64, out: &Path) -> Result<()> {
    if draws < 1000 {
        return Err(UsageError(format!("--draws must be at least 1000, got {draws}")).into());
    }
    let p = read_info_params(params_path)?;
    let i_c = complete_info(&p)?;
    let observed = observed_info_mc(&p, draws, seed)?;
    let pin = p.sigma11_index();
    let names = p.param_names();
    let rates = rate_matrices(&drop_coordinates(&i_c, &[pin]), &drop_coordinates(&observed.matrix, &[pin]))?;
    info!("r_max = {:.6}, s_min = {:.6}", rates.r_max, rates.s_min);
    let report = InfoReport {
        params: names.iter().enumerate().filter(|(i, _)| *i != pin).map(|(_, n)| n.clone()).collect(),
        pinned: vec![names[pin].clone()],
        i_complete: rows(&rates.i_complete),
        i_observed: rows(&rates.i_observed),
        rate: rows(&rates.rate),
        r_max: rates.r_max,
        s_min: rates.s_min,
        observed_se_max: observed.se_max,
        draws,
        seed,
    };
    write_json(&report, out)?;
    let mut manifest = ManifestBuilder::new(
        "info",
        serde_json::json!({ "params": params_path.display().to_string(), "draws": draws }),
        seed,
    );
    manifest.output(out);
    manifest.finish(out)?;
    Ok(())
}
