use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use selfcon::analysis::{
    contraction_matrix, convergence_to_equilibrium, critical_delta, fit_coupling_sensitivity, fit_ly_coefficients,
    self_consistent_decay, ContractionParams,
};
use selfcon::densities::{cell_left, fmt_float, l1_distance, ulam_project, GridDensity, SignedGridFunction};
use selfcon::maps::Wave;
use selfcon::optimal_coupling::{certify, optimize_convex, response_gradient, AscentOptions, PerturbationBasis};
use selfcon::particle_sim::{simulate, time_averaged_density, write_trajectory_csv, ParticleDynamics, ParticleEnsemble};
use selfcon::response::{finite_difference_response, linear_response};
use selfcon::self_consistent::{picard_fixed_point, thm_existence_iteration, SelfConsistentModel, Solution, SystemClass};
use selfcon::{Error, Result};

use crate::config::{Command, ExperimentConfig, SolverMethod};
use crate::svg::{Plot, Series};

/// Fitted constants, flags and files produced by one command.
#[derive(Debug, Default)]
pub struct Report {
    pub constants: BTreeMap<String, Value>,
    pub flags: BTreeMap<String, bool>,
    pub files: Vec<String>,
}

impl Report {
    fn constant(&mut self, key: &str, v: impl Into<Value>) {
        self.constants.insert(key.to_string(), v.into());
    }

    fn flag(&mut self, key: &str, v: bool) {
        self.flags.insert(key.to_string(), v);
    }
}

pub struct Context<'a> {
    pub config: &'a ExperimentConfig,
    pub out: PathBuf,
    pub seed: u64,
    report: Report,
}

impl<'a> Context<'a> {
    pub fn new(config: &'a ExperimentConfig, out: &Path, seed: u64) -> Self {
        Context { config, out: out.to_path_buf(), seed, report: Report::default() }
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.report.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn table(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(self.create(name)?);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn plot(&mut self, name: &str, plot: Plot) -> Result<()> {
        if self.config.output.plots {
            self.report.files.push(name.to_string());
            std::fs::write(self.out.join(name), plot.render())?;
        }
        Ok(())
    }
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn f(x: f64) -> String {
    fmt_float(x)
}

/// Runs the configured command, writing artifacts under `ctx.out`.
pub fn execute(ctx: &mut Context<'_>) -> Result<Report> {
    log::info!("running {} into {}", ctx.config.command.name(), ctx.out.display());
    match ctx.config.command {
        Command::FixedPoint => fixed_point(ctx)?,
        Command::SweepDelta => sweep_delta(ctx)?,
        Command::ConvergeRate => converge_rate(ctx)?,
        Command::Response => response(ctx)?,
        Command::FdResponse => fd_response(ctx)?,
        Command::OptimalCoupling => optimal_coupling(ctx)?,
        Command::Simulate => particles(ctx)?,
        Command::ContractionReport => contraction_report(ctx)?,
    }
    Ok(std::mem::take(&mut ctx.report))
}

fn solve(ctx: &Context<'_>, model: &SelfConsistentModel<f64>, start: Option<Vec<GridDensity<f64>>>) -> Result<Solution<f64>> {
    let start = start.unwrap_or_else(|| vec![GridDensity::uniform(model.n()); model.populations()]);
    let opts = ctx.config.solver.options();
    match ctx.config.solver.method {
        SolverMethod::Picard => picard_fixed_point(model, start, &opts),
        SolverMethod::Outer => thm_existence_iteration(model, start, &opts),
    }
}

fn record_trace(ctx: &mut Context<'_>, sol: &Solution<f64>) {
    let t = &sol.trace;
    ctx.report.constant("iterations", t.iterations());
    ctx.report.constant("final_residual", t.final_residual);
    if let Some(r) = t.max_ratio() {
        ctx.report.constant("max_step_ratio", r);
    }
    if let Some(r) = t.outer_ratio {
        ctx.report.constant("outer_ratio", r);
    }
    ctx.report.flag("converged", t.converged);
    ctx.report.flag("damped", t.damped);
    ctx.report.flag("inner_unique", t.inner_unique);
}

fn density_rows(columns: &[&[f64]]) -> Vec<Vec<String>> {
    let n = columns[0].len();
    (0..n)
        .map(|i| {
            let mut row = vec![i.to_string(), f(cell_left::<f64>(i, n))];
            row.extend(columns.iter().map(|c| f(c[i])));
            row
        })
        .collect()
}

fn fixed_point(ctx: &mut Context<'_>) -> Result<()> {
    let model = ctx.config.model.build()?;
    let sol = solve(ctx, &model, None)?;
    record_trace(ctx, &sol);
    let mut plot = Plot::new("invariant density", "x", "density");
    for (k, d) in sol.state.iter().enumerate() {
        let name = if sol.state.len() == 1 { "density.csv".to_string() } else { format!("density_{}.csv", k + 1) };
        d.write_csv(ctx.create(&name)?)?;
        ctx.report.constant(&format!("sup_density_{}", k + 1), d.sup());
        plot = plot.with(Series::cells(format!("population {}", k + 1), d.values()));
    }
    sol.trace.write_csv(ctx.create("trace.csv")?)?;
    ctx.plot("density.svg", plot)?;
    let steps: Vec<(f64, f64)> = sol.trace.entries.iter().map(|e| (e.iteration as f64, e.step)).collect();
    ctx.plot("trace.svg", Plot::new("solver steps", "iteration", "L1 step").log_y().with(Series::line("step", steps)))
}

fn state_distance(a: &[GridDensity<f64>], b: &[GridDensity<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| l1_distance(x.values(), y.values())).sum()
}

fn log_log_slope(pts: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = pts.iter().filter(|p| p.0 > 0.0 && p.1 > 0.0).map(|p| (p.0.ln(), p.1.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

fn sweep_delta(ctx: &mut Context<'_>) -> Result<()> {
    let spec = &ctx.config.model;
    let base = solve(ctx, &spec.build_at(0.0)?, None)?.state;
    let mut rows = Vec::new();
    let mut pts = Vec::new();
    let mut columns: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut failures = 0usize;
    for &d in &spec.deltas {
        let outcome = spec.build_at(d).and_then(|m| solve(ctx, &m, Some(base.clone())));
        match outcome {
            Ok(sol) => {
                let dist = state_distance(&sol.state, &base);
                pts.push((d, dist));
                rows.push(vec![
                    f(d),
                    f(dist),
                    sol.trace.iterations().to_string(),
                    f(sol.trace.final_residual),
                    sol.trace.outer_ratio.map(f).unwrap_or_default(),
                    "ok".into(),
                ]);
                columns.push((d, sol.state[0].values().to_vec()));
            }
            Err(e) => {
                log::warn!("sweep point delta = {d} failed: {e}");
                failures += 1;
                rows.push(vec![f(d), String::new(), String::new(), String::new(), String::new(), e.to_string()]);
            }
        }
    }
    if failures == spec.deltas.len() {
        return Err(Error::NonContraction { steps: 0, ratio: f64::NAN });
    }
    let header = strs(&["delta", "l1_distance_to_uncoupled", "iterations", "final_residual", "outer_ratio", "status"]);
    ctx.table("sweep.csv", &header, &rows)?;
    let mut header = strs(&["cell_index", "x_left", "delta_0"]);
    header.extend(columns.iter().map(|(d, _)| format!("delta_{d}")));
    let mut cols: Vec<&[f64]> = vec![base[0].values()];
    cols.extend(columns.iter().map(|(_, c)| c.as_slice()));
    ctx.table("densities.csv", &header, &density_rows(&cols))?;
    ctx.report.constant("failed_points", failures);
    if let Some(s) = log_log_slope(&pts) {
        ctx.report.constant("stability_slope", s);
    }
    let mut plot = Plot::new("invariant densities", "x", "density").with(Series::cells("delta 0", base[0].values()));
    for (d, c) in &columns {
        plot = plot.with(Series::cells(format!("delta {d}"), c));
    }
    ctx.plot("densities.svg", plot)?;
    ctx.plot("sweep.svg", Plot::new("distance to uncoupled density", "delta", "L1").with(Series::line("L1", pts)))
}

fn single_population(model: &SelfConsistentModel<f64>, what: &str) -> Result<()> {
    if model.populations() != 1 {
        return Err(Error::Config(format!("{what} supports single-population models")));
    }
    Ok(())
}

fn wave_samples(w: Wave, n: usize) -> Vec<f64> {
    ulam_project(|x: f64| w.eval(x), n, 16)
}

fn converge_rate(ctx: &mut Context<'_>) -> Result<()> {
    let model = ctx.config.model.build()?;
    single_population(&model, "converge-rate")?;
    let params = &ctx.config.params;
    let (steps, strong, weak) = (params.steps.unwrap_or(30), params.strong(), params.weak());
    let n = model.n();
    let wave = params.observable();
    if wave == Wave::One {
        return Err(Error::Config("the decay test function must not be constant".into()));
    }
    let l0 = model.uncoupled_operators()?.remove(0);
    let g = SignedGridFunction::project_zero_mean(wave_samples(wave, n));
    let uncoupled = convergence_to_equilibrium(|v: &[f64]| l0.apply(v), &g, steps, strong, weak)?;
    let fixed = solve(ctx, &model, None)?.state.remove(0);
    let nu = GridDensity::from_fn(n, |x: f64| 1.0 + 0.5 * wave.eval(x), 16)?;
    let coupled = self_consistent_decay(&model, &nu, &fixed, steps, weak)?;
    let rows: Vec<Vec<String>> = (0..steps)
        .map(|k| vec![(k + 1).to_string(), f(uncoupled.coefficients[k]), f(coupled.coefficients[k])])
        .collect();
    ctx.table("decay.csv", &strs(&["step", "uncoupled", "coupled"]), &rows)?;
    for (key, r) in [("uncoupled", &uncoupled), ("coupled", &coupled)] {
        if let Some(g) = r.rate {
            ctx.report.constant(&format!("{key}_rate"), g);
        }
        if let Some(c) = r.prefactor {
            ctx.report.constant(&format!("{key}_prefactor"), c);
        }
        ctx.report.flag(&format!("{key}_decaying"), r.decaying);
    }
    ctx.report.constant("strong_norm", strong.label());
    ctx.report.constant("weak_norm", weak.label());
    let pts = |c: &[f64]| c.iter().enumerate().map(|(k, &a)| ((k + 1) as f64, a)).collect::<Vec<_>>();
    ctx.plot(
        "decay.svg",
        Plot::new("convergence to equilibrium", "step", "normalized distance")
            .log_y()
            .with(Series::line("uncoupled", pts(&uncoupled.coefficients)))
            .with(Series::line("coupled", pts(&coupled.coefficients))),
    )
}

fn response(ctx: &mut Context<'_>) -> Result<()> {
    let model = ctx.config.model.build_at(0.0)?;
    let c = wave_samples(ctx.config.params.observable(), model.n());
    let r = linear_response(&model, Some(&c))?;
    let s = r.summary()?;
    ctx.report.constant("derivative_term_l1", s.derivative_term_l1);
    ctx.report.constant("response_l1", s.response_l1);
    ctx.report.constant("resolvent_residual", s.resolvent_residual);
    ctx.report.constant("class_residual", r.class_residual);
    ctx.report.constant("class_norm", r.class_norm.label());
    ctx.report.constant("condition_estimate", s.condition_estimate);
    ctx.report.constant("second_eigenvalue", s.second_eigenvalue);
    if let Some(v) = s.observable_response {
        ctx.report.constant("observable_response", v);
    }
    let header = strs(&["cell_index", "x_left", "base_density", "derivative_term", "response"]);
    let rows = density_rows(&[r.base_density.values(), r.derivative_term.values(), r.response.values()]);
    ctx.table("response.csv", &header, &rows)?;
    ctx.plot(
        "response.svg",
        Plot::new("linear response", "x", "value")
            .with(Series::cells("response", r.response.values()))
            .with(Series::cells("derivative term", r.derivative_term.values())),
    )
}

fn fd_response(ctx: &mut Context<'_>) -> Result<()> {
    let model = ctx.config.model.build_at(0.0)?;
    let r = linear_response(&model, None)?;
    let study = finite_difference_response(&model, &ctx.config.model.deltas, &ctx.config.solver.options())?;
    if study.quotients.is_empty() {
        let why = study.failures.first().map(|(_, m)| m.clone()).unwrap_or_default();
        return Err(Error::Numerical { message: format!("no coupling strength converged: {why}"), residual: f64::NAN });
    }
    study.write_csv(ctx.create("fd.csv")?, Some(&r.response))?;
    let gaps = study.gaps(&r.response);
    ctx.report.constant("response_l1", r.summary()?.response_l1);
    ctx.report.constant("l1_gaps", gaps.clone());
    ctx.report.constant("halving_factors", gaps.windows(2).map(|w| w[0] / w[1]).collect::<Vec<_>>());
    if let Some(g) = study.richardson_gap(&r.response) {
        ctx.report.constant("richardson_gap", g);
    }
    ctx.report.constant("failed_deltas", study.failures.iter().map(|(d, m)| json!({"delta": d, "error": m})).collect::<Vec<_>>());
    let mut header = strs(&["cell_index", "x_left", "response"]);
    header.extend(study.deltas.iter().map(|d| format!("quotient_{d}")));
    let mut cols: Vec<&[f64]> = vec![r.response.values()];
    cols.extend(study.quotients.iter().map(|q| q.values()));
    if let Some(rich) = &study.richardson {
        header.push("richardson".into());
        cols.push(rich.values());
    }
    ctx.table("quotients.csv", &header, &density_rows(&cols))?;
    let mut plot = Plot::new("response and difference quotients", "x", "value").with(Series::cells("response", r.response.values()));
    for (d, q) in study.deltas.iter().zip(&study.quotients) {
        plot = plot.with(Series::cells(format!("quotient {d}"), q.values()));
    }
    ctx.plot("fd.svg", plot)
}

fn optimal_coupling(ctx: &mut Context<'_>) -> Result<()> {
    let spec = ctx.config.params.optimization.clone().expect("validated");
    let model = ctx.config.model.build_at(0.0)?;
    let exponent = spec.exponent.unwrap_or(match model.class() {
        SystemClass::Expanding => 7.0,
        _ => 1.0,
    });
    let basis = PerturbationBasis::trigonometric(spec.degree, exponent)?;
    let c = wave_samples(ctx.config.params.observable(), model.n());
    let grad = response_gradient(&model, &c, &basis, spec.gradient_path)?;
    spec.constraint.validate(basis.len())?;
    let opt = optimize_convex(&grad.g, &grad.weights, &spec.constraint, &AscentOptions::default())?;
    let cert = certify(&grad.g, &grad.weights, &spec.constraint, &opt, spec.certificate_samples, ctx.seed)?;
    basis.write_coefficients_csv(&opt.coefficients, ctx.create("coefficients.csv")?)?;
    let surface_n = model.n().min(64);
    basis.write_surface_csv(&opt.coefficients, surface_n, ctx.create("surface.csv")?)?;
    let record = json!({
        "samples": cert.samples,
        "seed": ctx.seed,
        "objective": opt.objective,
        "best_sample": if cert.samples > 0 { json!(cert.best_sample) } else { Value::Null },
        "margin": if cert.samples > 0 { json!(cert.margin) } else { Value::Null },
        "dominates": cert.margin >= 0.0,
    });
    serde_json::to_writer_pretty(ctx.create("certificate.json")?, &record).map_err(|e| Error::Parse(e.to_string()))?;
    ctx.report.constant("objective", opt.objective);
    ctx.report.constant("metric", grad.metric.clone());
    ctx.report.constant("basis_size", basis.len());
    ctx.report.constant("ascent_iterations", opt.iterations);
    ctx.report.constant("certificate", record);
    ctx.report.flag("all_feasible_optimal", opt.all_feasible_optimal);
    ctx.report.flag("certificate_dominates", cert.margin >= 0.0);
    let h = basis.coupling(&opt.coefficients)?;
    let mut plot = Plot::new("optimal coupling slices h(x, y)", "x", "h");
    for y in [0.0, 0.25, 0.5, 0.75] {
        let pts = (0..=200).map(|i| (i as f64 / 200.0, h.eval(i as f64 / 200.0, y))).collect();
        plot = plot.with(Series::line(format!("y = {y}"), pts));
    }
    ctx.plot("coupling.svg", plot)
}

fn particles(ctx: &mut Context<'_>) -> Result<()> {
    let spec = ctx.config.params.particles.clone().expect("validated");
    let model = ctx.config.model.build()?;
    let dynamics = ParticleDynamics::from_model(&model)?;
    let fixed = solve(ctx, &model, None)?.state.remove(0);
    let reference = fixed.coarsen(spec.bins).map_err(|_| {
        Error::Config(format!("model.n = {} must be a multiple of params.particles.bins = {}", model.n(), spec.bins))
    })?;
    let mut ensemble = ParticleEnsemble::uniform(spec.agents, ctx.seed)?;
    let rows = simulate(&mut ensemble, &dynamics, spec.burn_in, Some(&reference))?;
    write_trajectory_csv(&rows, ctx.create("trajectory.csv")?)?;
    let avg = time_averaged_density(&mut ensemble, &dynamics, 0, spec.samples, spec.bins)?;
    let gap = l1_distance(avg.values(), reference.values());
    let header = strs(&["cell_index", "x_left", "particles", "operator"]);
    ctx.table("histogram.csv", &header, &density_rows(&[avg.values(), reference.values()]))?;
    ctx.report.constant("agents", spec.agents);
    ctx.report.constant("time_average_l1_to_operator", gap);
    ctx.report.constant("sampling_scale", (spec.bins as f64 / spec.agents as f64).sqrt());
    ctx.report.constant("final_mean", ensemble.mean());
    ctx.plot(
        "histogram.svg",
        Plot::new("particles vs operator fixed point", "x", "density")
            .with(Series::cells("particles", avg.values()))
            .with(Series::cells("operator", reference.values())),
    )?;
    let pts = rows.iter().filter_map(|r| r.l1_to_reference.map(|v| (r.step as f64, v))).collect();
    ctx.plot("trajectory.svg", Plot::new("histogram distance during burn-in", "step", "L1").with(Series::line("L1", pts)))
}

fn contraction_report(ctx: &mut Context<'_>) -> Result<()> {
    let spec = ctx.config.params.contraction.clone().unwrap_or_default();
    let cfg = &ctx.config.model;
    let mut deltas = cfg.deltas.clone();
    if deltas.is_empty() {
        deltas.push(cfg.delta);
    }
    // the sensitivity is normalized by delta, so the weakest coupling keeps the map a diffeomorphism
    let fit_delta = deltas.iter().chain([&cfg.delta]).copied().filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
    if !fit_delta.is_finite() {
        return Err(Error::Config("contraction-report needs a positive coupling strength to fit the sensitivity".into()));
    }
    let model = cfg.build_at(fit_delta)?;
    single_population(&model, "contraction-report")?;
    let (strong, weak) = (ctx.config.params.strong(), ctx.config.params.weak());
    let n = model.n();
    let l0 = model.uncoupled_operators()?.remove(0);
    let ly = fit_ly_coefficients(|v: &[f64]| l0.apply(v), n, strong, weak, spec.ly_samples, ctx.seed)?;
    let k = fit_coupling_sensitivity(&model, strong, weak, 16, ctx.seed)?;
    let g = SignedGridFunction::project_zero_mean(wave_samples(Wave::Sin(1), n));
    let decay = convergence_to_equilibrium(|v: &[f64]| l0.apply(v), &g, spec.n1_max as usize, strong, weak)?;
    ctx.report.constant("lambda1", ly.lambda1);
    ctx.report.constant("b", ly.b);
    ctx.report.constant("k", k);
    ctx.report.constant("q", spec.q);
    ctx.report.constant("c", spec.c);
    ctx.report.constant("ly_violations", ly.violations);
    ctx.report.constant("strong_norm", strong.label());
    ctx.report.constant("weak_norm", weak.label());
    ctx.report.flag("ly_regime_ok", ly.regime_ok);
    let mut rows = Vec::new();
    let mut critical = Vec::new();
    let mut plot = Plot::new("contraction rate", "delta", "rho");
    for n1 in 1..=spec.n1_max {
        let p = ContractionParams::from_ly(&ly, k, spec.q, spec.c, decay.coefficients[(n1 - 1) as usize], n1);
        let mut pts = Vec::new();
        for &d in &deltas {
            let r = contraction_matrix(&p, d)?;
            let m = r.matrix_m;
            rows.push(vec![
                n1.to_string(),
                f(d),
                f(m[0][0]),
                f(m[0][1]),
                f(m[1][0]),
                f(m[1][1]),
                f(r.rho),
                f(r.eigvec_ab.0),
                f(r.eigvec_ab.1),
                r.regime_ok.to_string(),
            ]);
            pts.push((d, r.rho));
        }
        let star = critical_delta(&p, spec.delta_max, 1000)?;
        critical.push(vec![n1.to_string(), f(p.a_n1), star.map(f).unwrap_or_default()]);
        if deltas.len() > 1 {
            plot = plot.with(Series::line(format!("n1 = {n1}"), pts));
        }
    }
    let header = strs(&["n1", "delta", "m00", "m01", "m10", "m11", "rho", "a", "b", "regime_ok"]);
    ctx.table("contraction.csv", &header, &rows)?;
    ctx.table("critical.csv", &strs(&["n1", "a_n1", "critical_delta"]), &critical)?;
    if deltas.len() > 1 {
        ctx.plot("contraction.svg", plot)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_a_power_law() {
        let pts: Vec<(f64, f64)> = [0.01, 0.02, 0.04].iter().map(|&d| (d, 3.0 * d * d)).collect();
        assert!((log_log_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(log_log_slope(&[(0.1, 1.0)]), None);
    }

    #[test]
    fn midpoints_and_edges_line_up() {
        let rows = density_rows(&[&[1.0, 2.0]]);
        assert_eq!(rows[1][0], "1");
        assert_eq!(rows[1][1], f(0.5));
        assert_eq!(rows[1][2], f(2.0));
    }
}
