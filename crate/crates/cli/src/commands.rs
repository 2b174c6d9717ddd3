//! One function per subcommand. Each writes its CSV files into the output
//! directory and returns the scalars and warnings for summary.json.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use kerr_dpt::critical::{auto_cutoff, cutoff_error, critical_region, CriticalRegion, ScanOptions, Threshold};
use kerr_dpt::dynamics::{self, Engine, ProtocolKind, SweepOptions, SweepProtocol};
use kerr_dpt::extraction::{
    comparison_report, extract, max_relative_errors, synthesize_measurements, ExtractOptions, MeasuredBranchSet,
};
use kerr_dpt::geometry::{
    chi_solve, connections, loglog_slope, quasiadiabatic, sweep_velocity, ChiOptions, ConnectionOptions, ConnectionTable,
};
use kerr_dpt::io::{ReadTable, Table};
use kerr_dpt::meanfield;
use kerr_dpt::spectral::{self, FrequencyWindow, ShiftInvert, SoftOptions};
use kerr_dpt::{AffineLiouvillian, Branch, ModelParams, SweepParameter};

use crate::config::{config_error, CutoffPolicy, RunConfig};
use crate::Command;

/// Points of the scan used for the cutoff convergence check.
const CHECK_POINTS: usize = 9;

pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
}

#[derive(Default, Serialize)]
pub struct Summary {
    cutoff: usize,
    scalars: BTreeMap<String, Value>,
    warnings: Vec<String>,
    outputs: Vec<String>,
}

impl Summary {
    fn scalar(&mut self, key: &str, value: impl Into<Value>) {
        self.scalars.insert(key.to_owned(), value.into());
    }

    fn emit(&mut self, run: &Run, name: &str, table: &Table) -> Result<()> {
        let path = run.out.join(name);
        table.write_path(&path).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        self.outputs.push(name.to_owned());
        Ok(())
    }

    pub fn write(self, run: &Run, command: Command) -> Result<()> {
        let doc = json!({
            "command": command.name(),
            "config": run.cfg,
            "seed": run.seed,
            "git": git_hash(),
            "cutoff": self.cutoff,
            "scalars": self.scalars,
            "warnings": self.warnings,
            "outputs": self.outputs,
        });
        let path = run.out.join("summary.json");
        std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        for w in &self.warnings {
            log::warn!("{w}");
        }
        Ok(())
    }
}

fn git_hash() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_owned())
        .unwrap_or_else(|| "unknown".into())
}

pub fn dispatch(command: Command, run: &Run) -> Result<Summary> {
    let cfg = &run.cfg;
    let parameter = cfg.scan.parameter()?;
    let values = cfg.scan.values()?;
    let mut s = Summary::default();
    s.cutoff = match (command, cfg.cutoff.policy()?) {
        // The semiclassical branches do not depend on d.
        (Command::Meanfield, CutoffPolicy::Fixed(d)) => d,
        (Command::Meanfield, CutoffPolicy::Auto) => cfg.cutoff.start,
        _ => resolve_cutoff(cfg, parameter, &values, &mut s)?,
    };
    log::info!("{}: cutoff d = {}", command.name(), s.cutoff);
    let params = cfg.params(s.cutoff).validate()?;
    match command {
        Command::Spectrum => spectrum(run, &params, parameter, &values, &mut s)?,
        Command::Steady => steady(run, &params, parameter, &values, &mut s)?,
        Command::Meanfield => meanfield_scan(run, &params, parameter, &values, &mut s)?,
        Command::Sweep => sweep(run, &params, parameter, &mut s)?,
        Command::Geometry => {
            let table = geometry(run, &params, parameter, &mut s)?;
            s.emit(run, "connections.csv", &table.to_table())?;
        }
        Command::Hysteresis => hysteresis(run, &params, parameter, &mut s)?,
        Command::Extract => extraction(run, &params, parameter, &mut s)?,
        Command::Fsweep => fsweep(run, &params, &mut s)?,
    }
    Ok(s)
}

/// Fixed cutoffs are checked against d + step and warn; "auto" raises d
/// until the check passes.
fn resolve_cutoff(cfg: &RunConfig, parameter: SweepParameter, values: &[f64], s: &mut Summary) -> Result<usize> {
    let stride = values.len().div_ceil(CHECK_POINTS).max(1);
    let probe: Vec<f64> = values.iter().step_by(stride).copied().collect();
    let c = &cfg.cutoff;
    match c.policy()? {
        CutoffPolicy::Auto => {
            let start = cfg.params(c.start).validate()?;
            Ok(auto_cutoff(&start, parameter, &probe, c.step, c.max, c.tol)?)
        }
        CutoffPolicy::Fixed(d) => {
            let p = cfg.params(d).validate()?;
            let errs = cutoff_error(&p, parameter, &probe, c.step)?;
            let (i, worst) = errs
                .iter()
                .copied()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap_or((0, 0.0));
            s.scalar("cutoff_delta_n", worst);
            if worst > c.tol {
                s.warnings.push(format!(
                    "cutoff d = {d} not converged: |dn_st| = {worst:.3e} against d = {} at {} = {}",
                    d + c.step,
                    parameter.name(),
                    probe[i]
                ));
            }
            Ok(d)
        }
    }
}

fn scan_options(run: &Run) -> ScanOptions {
    let sc = &run.cfg.scan;
    ScanOptions {
        tol: sc.tol,
        ..ScanOptions::new(sc.lo, sc.hi, sc.step)
    }
}

fn region(run: &Run, params: &ModelParams, parameter: SweepParameter, s: &mut Summary) -> Result<CriticalRegion> {
    let r = critical_region(params, parameter, run.cfg.scan.threshold()?, &scan_options(run))?;
    log::info!("critical region [{:.4}, {:.4}]", r.lower, r.upper);
    s.scalar("region_lower", r.lower);
    s.scalar("region_upper", r.upper);
    s.scalar("region_width", r.width());
    s.scalar("region_threshold", r.threshold);
    Ok(r)
}

/// Width of the run of points with rate below `g` around the slowest point,
/// with edges interpolated linearly in ln γ; None if the run touches the scan
/// boundary or no point is below `g`.
fn width_below(scan: &[(f64, f64)], g: f64) -> Option<f64> {
    let imin = (0..scan.len()).min_by(|&a, &b| scan[a].1.total_cmp(&scan[b].1))?;
    if !(scan[imin].1 < g) {
        return None;
    }
    let (mut a, mut b) = (imin, imin);
    while a > 0 && scan[a - 1].1 < g {
        a -= 1;
    }
    while b + 1 < scan.len() && scan[b + 1].1 < g {
        b += 1;
    }
    if a == 0 || b + 1 == scan.len() {
        return None;
    }
    let edge = |inside: (f64, f64), outside: (f64, f64)| {
        let t = (g.ln() - inside.1.ln()) / (outside.1.ln() - inside.1.ln());
        inside.0 + t * (outside.0 - inside.0)
    };
    Some(edge(scan[b], scan[b + 1]) - edge(scan[a], scan[a - 1]))
}

fn spectrum(run: &Run, params: &ModelParams, parameter: SweepParameter, values: &[f64], s: &mut Summary) -> Result<()> {
    let sp = &run.cfg.spectrum;
    let window = match sp.window.as_str() {
        "axis" => FrequencyWindow::Axis,
        "auto" => FrequencyWindow::Auto,
        other => match other.parse::<f64>() {
            Ok(w) if w > 0.0 => FrequencyWindow::Fixed(w),
            _ => return Err(config_error(format!("spectrum.window: expected axis, auto or a bound, got '{other}'"))),
        },
    };
    if sp.modes < 2 {
        return Err(config_error("spectrum.modes must be at least 2"));
    }
    let soft = SoftOptions {
        window,
        ..SoftOptions::default()
    };
    let family = AffineLiouvillian::new(params, parameter)?;
    let spectra = values
        .par_iter()
        .map_init(ShiftInvert::new, |cache, &r| spectral::eig_soft_with(&family.at(r), sp.modes, &soft, cache))
        .collect::<kerr_dpt::Result<Vec<_>>>()?;
    let mut t = Table::new(&[parameter.name(), "q", "omega", "gamma"]);
    for (&r, spec) in values.iter().zip(&spectra) {
        for (q, m) in spec.modes().iter().enumerate() {
            t.push(vec![r.into(), q.into(), m.frequency().into(), m.rate().into()]);
        }
    }
    s.emit(run, "spectrum.csv", &t)?;

    let scan: Vec<(f64, f64)> = values.iter().copied().zip(spectra.iter().map(|x| x.rate(1))).collect();
    let (imin, gmin) = scan.iter().copied().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap_or((f64::NAN, f64::NAN));
    s.scalar("gamma1_min", gmin);
    s.scalar("gamma1_min_at", imin);
    s.scalar("gamma2_min", spectra.iter().map(|x| x.rate(2)).fold(f64::INFINITY, f64::min));
    let configured = run.cfg.scan.threshold()?;
    let dwell = Threshold::InverseDwell(run.cfg.sweep.dwell);
    for (key, th) in [("width_threshold", configured), ("width_inverse_dwell", dwell)] {
        match width_below(&scan, th.rate(params.kappa)) {
            Some(w) => s.scalar(key, w),
            None => s.warnings.push(format!("{key}: no interior region below {:.4e}", th.rate(params.kappa))),
        }
    }
    Ok(())
}

fn steady(run: &Run, params: &ModelParams, parameter: SweepParameter, values: &[f64], s: &mut Summary) -> Result<()> {
    let family = AffineLiouvillian::new(params, parameter)?;
    let n = values
        .par_iter()
        .map_init(ShiftInvert::new, |cache, &r| Ok(spectral::steady_state_with(&family.at(r), cache)?.occupation()))
        .collect::<kerr_dpt::Result<Vec<f64>>>()?;
    let mut t = Table::new(&[parameter.name(), "n_st"]);
    for (&r, &x) in values.iter().zip(&n) {
        t.push(vec![r.into(), x.into()]);
    }
    s.emit(run, "steady.csv", &t)?;
    s.scalar("n_st_max", n.iter().copied().fold(0.0, f64::max));
    Ok(())
}

fn meanfield_scan(run: &Run, params: &ModelParams, parameter: SweepParameter, values: &[f64], s: &mut Summary) -> Result<()> {
    let rows = meanfield::scan(params, parameter, values)?;
    s.emit(run, "meanfield.csv", &meanfield::branches_table(parameter, &rows))?;
    let sc = &run.cfg.scan;
    match meanfield::bistable_window(params, parameter, sc.lo, sc.hi, sc.step)? {
        Some((a, b)) => {
            s.scalar("bistable_lower", a);
            s.scalar("bistable_upper", b);
        }
        None => s.warnings.push("no bistable window on the scan".into()),
    }
    Ok(())
}

fn sweep(run: &Run, params: &ModelParams, parameter: SweepParameter, s: &mut Summary) -> Result<()> {
    let sc = &run.cfg.sweep;
    let mut engine = sc.engine()?;
    let mut kind = sc.kind()?;
    if engine == Engine::LinearRamp {
        kind = ProtocolKind::Linear;
    } else if kind == ProtocolKind::Linear {
        engine = Engine::LinearRamp;
    }
    let (start, end) = match (sc.start, sc.end) {
        (Some(a), Some(b)) => (a, b),
        (a, b) => {
            let r = region(run, params, parameter, s)?;
            (a.unwrap_or(r.lower), b.unwrap_or(r.upper))
        }
    };
    let protocol = SweepProtocol::new(parameter, start, end, sc.steps, sc.dwell)?
        .with_kind(kind)
        .with_direction(sc.direction()?)
        .with_lead_in(sc.lead_in);
    let opts = SweepOptions {
        dt: sc.dt,
        ..SweepOptions::default()
    };
    let result = dynamics::run(params, &protocol, engine, &opts)?;
    s.emit(run, "sweep.csv", &result.to_table())?;
    s.scalar("engine", engine.label());
    s.scalar("velocity", protocol.velocity());
    if let Some(area) = loop_area(&result) {
        s.scalar("loop_area", area);
    }
    s.warnings.extend(result.warnings.iter().cloned());
    Ok(())
}

/// ∫ (n_backward − n_forward) dr by the trapezoid rule, when both branches
/// visit the same points.
fn loop_area(result: &dynamics::SweepResult) -> Option<f64> {
    let sorted = |b: Branch| {
        let mut p: Vec<(f64, f64)> = result.branch_points(b).iter().map(|p| (p.value, p.occupation)).collect();
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
        p
    };
    let (f, b) = (sorted(Branch::Forward), sorted(Branch::Backward));
    if f.len() < 2 || f.len() != b.len() || f.iter().zip(&b).any(|(x, y)| (x.0 - y.0).abs() > 1e-9 * x.0.abs().max(1.0)) {
        return None;
    }
    let d: Vec<f64> = f.iter().zip(&b).map(|(x, y)| y.1 - x.1).collect();
    Some(f.windows(2).zip(d.windows(2)).map(|(x, y)| 0.5 * (x[1].0 - x[0].0) * (y[0] + y[1])).sum())
}

fn geometry(run: &Run, params: &ModelParams, parameter: SweepParameter, s: &mut Summary) -> Result<ConnectionTable> {
    let g = &run.cfg.geometry;
    if g.points < 3 {
        return Err(config_error("geometry.points must be at least 3"));
    }
    let r = region(run, params, parameter, s)?;
    let opts = ConnectionOptions {
        margin: g.margin,
        ..ConnectionOptions::default()
    };
    let table = connections(params, parameter, &r.grid(g.points), &opts)?;
    s.scalar("chi_form", format!("{:?}", table.form).to_lowercase());
    s.scalar("imag_residual", table.imag_residual);
    Ok(table)
}

/// The configured table file, or a fresh connection table.
fn load_or_build(run: &Run, params: &ModelParams, parameter: SweepParameter, s: &mut Summary) -> Result<ConnectionTable> {
    match &run.cfg.hysteresis.table {
        Some(path) => {
            let t = ReadTable::from_path(Path::new(path)).with_context(|| format!("reading {path}"))?;
            Ok(ConnectionTable::from_read_table(parameter, &t)?)
        }
        None => {
            let table = geometry(run, params, parameter, s)?;
            s.emit(run, "connections.csv", &table.to_table())?;
            Ok(table)
        }
    }
}

fn width_of(table: &ConnectionTable) -> f64 {
    let (lo, hi) = table.bounds();
    hi - lo
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(a, b)| 0.5 * (a[1] - a[0]) * (b[0] + b[1])).sum()
}

fn step_label(n: f64) -> String {
    format!("{n}").replace('.', "p")
}

fn hysteresis(run: &Run, params: &ModelParams, parameter: SweepParameter, s: &mut Summary) -> Result<()> {
    let h = &run.cfg.hysteresis;
    if h.steps.is_empty() || h.steps.iter().any(|&n| !(n > 0.0)) {
        return Err(config_error("hysteresis.steps must be a nonempty list of positive step counts"));
    }
    let table = load_or_build(run, params, parameter, s)?;
    let opts = ChiOptions {
        method: h.method()?,
        panels: h.panels,
        ..ChiOptions::default()
    };
    let width = width_of(&table);
    let mut areas = Table::new(&["steps", "velocity", "area", "area_quasiadiabatic"]);
    let mut series = Vec::new();
    for &n in &h.steps {
        let v = sweep_velocity(width, n, h.dwell);
        let sol = chi_solve(&table, v, &opts)?;
        log::info!("N = {n}: v = {v:.4e}, area {:.6e}", sol.area);
        s.emit(run, &format!("chi_N{}.csv", step_label(n)), &sol.to_table(parameter))?;
        let qa = quasiadiabatic(&table, v);
        let gap: Vec<f64> = qa.n_minus.iter().zip(&qa.n_plus).map(|(a, b)| a - b).collect();
        let area_qa = trapezoid(&qa.grid, &gap);
        areas.push(vec![n.into(), v.into(), sol.area.into(), area_qa.into()]);
        series.push((v, sol.area));
        s.warnings.extend(sol.warnings.iter().map(|w| format!("N = {n}: {w}")));
    }
    s.emit(run, "area.csv", &areas)?;
    if series.len() >= 2 {
        s.scalar("area_slope", loglog_slope(&series)?);
    }
    s.scalar("areas", series.iter().map(|p| p.1).collect::<Vec<f64>>());
    Ok(())
}

fn extraction(run: &Run, params: &ModelParams, parameter: SweepParameter, s: &mut Summary) -> Result<()> {
    let e = &run.cfg.extract;
    if e.steps.len() != 3 {
        return Err(config_error(format!("extract.steps needs exactly three entries, got {}", e.steps.len())));
    }
    if e.points < 5 {
        return Err(config_error("extract.points must be at least 5"));
    }
    let table = load_or_build(run, params, parameter, s)?;
    let (lo, hi) = table.bounds();
    let velocities: Vec<f64> = e.steps.iter().map(|&n| sweep_velocity(hi - lo, n, e.dwell)).collect();
    let grid: Vec<f64> = (0..e.points).map(|i| lo + (hi - lo) * i as f64 / (e.points - 1) as f64).collect();
    let meas = if e.inputs.is_empty() {
        synthesize_measurements(&table, &velocities, &grid, e.noise, run.seed, &ChiOptions::default())?
    } else {
        if e.inputs.len() != 3 {
            return Err(config_error(format!("extract.inputs needs three files, got {}", e.inputs.len())));
        }
        let runs = e
            .inputs
            .iter()
            .zip(&velocities)
            .map(|(path, &v)| Ok((v, ReadTable::from_path(Path::new(path)).with_context(|| format!("reading {path}"))?)))
            .collect::<Result<Vec<_>>>()?;
        MeasuredBranchSet::from_sweep_tables(parameter, &runs, grid)?
    };
    s.emit(run, "measured.csv", &meas.to_table())?;
    let opts = ExtractOptions {
        smoothing: (e.smoothing_half > 0).then_some((e.smoothing_half, e.smoothing_order)),
        ..ExtractOptions::default()
    };
    let extracted = extract(&meas, &opts)?;
    s.emit(run, "extracted.csv", &extracted.to_table())?;
    s.emit(run, "comparison.csv", &comparison_report(&extracted, &table))?;
    let errs = max_relative_errors(&extracted, &table, lo, hi, e.interior);
    for (key, err) in ["gamma1", "a11", "n_st", "a10"].iter().zip(errs) {
        s.scalar(&format!("max_rel_error_{key}"), err);
    }
    s.scalar("skipped_points", extracted.skipped.len());
    if !extracted.skipped.is_empty() {
        s.warnings.push(format!("{} ill-conditioned points skipped", extracted.skipped.len()));
    }
    Ok(())
}

fn fsweep(run: &Run, params: &ModelParams, s: &mut Summary) -> Result<()> {
    let fc = &run.cfg.fsweep;
    let p = ModelParams {
        detuning: fc.detuning,
        ..*params
    };
    let scan = ScanOptions {
        tol: run.cfg.scan.tol,
        ..ScanOptions::new(fc.lo, fc.hi, fc.step)
    };
    let r = critical_region(&p, SweepParameter::Drive, fc.threshold()?, &scan)?;
    s.scalar("drive_region_lower", r.lower);
    s.scalar("drive_region_upper", r.upper);
    s.scalar("drive_region_width", r.width());
    let table = connections(&p, SweepParameter::Drive, &r.grid(fc.points.max(3)), &ConnectionOptions::default())?;
    s.emit(run, "fsweep_connections.csv", &table.to_table())?;
    let drive = chi_solve(&table, sweep_velocity(r.width(), fc.steps, fc.dwell), &ChiOptions::default())?;
    s.emit(run, "fsweep_chi.csv", &drive.to_table(SweepParameter::Drive))?;

    let detuning_table = geometry(run, params, SweepParameter::Detuning, s)?;
    let v = sweep_velocity(width_of(&detuning_table), fc.steps, fc.dwell);
    let detuning = chi_solve(&detuning_table, v, &ChiOptions::default())?;
    s.emit(run, "detuning_chi.csv", &detuning.to_table(SweepParameter::Detuning))?;
    s.scalar("area_drive", drive.area);
    s.scalar("area_detuning", detuning.area);
    s.scalar("area_ratio", detuning.area / drive.area);
    s.warnings.extend(drive.warnings.iter().chain(&detuning.warnings).cloned());
    Ok(())
}
