use std::path::{Path, PathBuf};

use fracflock::agents::Snapshot;
use fracflock::bayesopt::BoConfig;
use fracflock::gpr::GpModel;
use fracflock::io::{self, FieldManifest, MANIFEST};
use fracflock::pipeline::{self, Preset, Reference, ScenarioConfig};
use serde_json::{Map, Value};

use crate::manifest::RunManifest;
use crate::ScenarioArgs;

/// Drift above this relative level fails `solve-euler`.
pub const CONSERVATION_LIMIT: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("conservation drift {drift:e} exceeds {limit:e}")]
    Conservation { drift: f64, limit: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Conservation { .. } => 4,
        }
    }
}

impl From<fracflock::Error> for CliError {
    fn from(e: fracflock::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn config_value(args: &ScenarioArgs) -> CliResult<Map<String, Value>> {
    let mut map = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(m)) => m,
                Ok(_) => return Err(CliError::Config("config must be a JSON object".into())),
                Err(e) => return Err(CliError::Config(format!("{}: {e}", path.display()))),
            }
        }
        (None, Some(_)) => Map::new(),
        (None, None) => return Err(CliError::Config("give --config or --preset".into())),
    };
    if let Some(p) = &args.preset {
        let preset: Preset = p.parse()?;
        map.insert("preset".into(), Value::from(preset.name()));
    }
    if let Some(a) = args.alpha {
        map.insert("alpha".into(), Value::from(a));
    }
    if let Some(s) = args.seed {
        map.insert("seed".into(), Value::from(s));
    }
    Ok(map)
}

fn scenario_from(map: Map<String, Value>) -> CliResult<ScenarioConfig<f64>> {
    serde_json::from_value(Value::Object(map)).map_err(|e| CliError::Config(e.to_string()))
}

fn load_scenario(args: &ScenarioArgs) -> CliResult<ScenarioConfig<f64>> {
    let mut map = config_value(args)?;
    map.remove("bo");
    scenario_from(map)
}

fn to_value<S: serde::Serialize>(s: &S) -> Value {
    serde_json::to_value(s).unwrap_or(Value::Null)
}

fn finish(manifest: RunManifest, out: &Path, res: &CliResult) -> CliResult {
    let status = match res {
        Ok(()) => "ok".to_owned(),
        Err(e) => format!("failed (exit {}): {e}", e.exit_code()),
    };
    manifest.finish(&status, out)?;
    Ok(())
}

fn mean<const D: usize>(v: &[[f64; D]]) -> [f64; D] {
    let mut m = [0.0; D];
    for x in v {
        for d in 0..D {
            m[d] += x[d];
        }
    }
    m.map(|s| s / v.len().max(1) as f64)
}

fn report_drift<const D: usize>(v0: &[[f64; D]], log: &fracflock::agents::TrajectoryLog<f64, D>) {
    let m0 = mean(v0);
    let drift = log
        .snapshots
        .iter()
        .map(|s| {
            let m = mean(&s.velocities);
            (0..D).map(|d| (m[d] - m0[d]).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    println!("mean velocity: initial {m0:?}, max drift {drift:e}");
    println!("max substeps per step: {}", log.max_substeps);
}

fn progress<const D: usize>(s: &Snapshot<f64, D>, substeps: usize) {
    eprintln!("t = {}: max sub-steps so far {substeps}", s.time);
}

pub fn simulate_agents(args: &ScenarioArgs) -> CliResult {
    let cfg = load_scenario(args)?;
    let mut manifest = RunManifest::start("simulate-agents", to_value(&cfg), Some(cfg.seed));
    let res = (|| -> CliResult {
        let files = match cfg.dim() {
            1 => {
                let v0 = cfg.initial_ensemble_1d()?.velocities().to_vec();
                let log = pipeline::generate_reference_1d_observed(&cfg, progress)?;
                report_drift(&v0, &log);
                io::write_trajectory(&log, &args.out)?
            }
            _ => {
                let v0 = cfg.initial_ensemble_2d()?.velocities().to_vec();
                let log = pipeline::generate_reference_2d_observed(&cfg, progress)?;
                report_drift(&v0, &log);
                io::write_trajectory(&log, &args.out)?
            }
        };
        println!("wrote {} files to {}", files.len(), args.out.display());
        manifest.outputs = files;
        Ok(())
    })();
    finish(manifest, &args.out, &res)?;
    res
}

fn euler_times(cfg: &ScenarioConfig<f64>) -> Vec<f64> {
    let mut t = cfg.sample_times.clone();
    if t.first() != Some(&0.0) {
        t.insert(0, 0.0);
    }
    t
}

fn report_fields(m: &FieldManifest<f64>) -> CliResult {
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "steps {}  dt in [{:e}, {:e}]  max Courant {:.4} (limit {})",
        m.steps, m.dt_min, m.dt_max, m.max_cfl, m.cfl
    );
    let Some(c) = &m.conservation else {
        return Ok(());
    };
    println!("{:<12} {:>24} {:>24} {:>12}", "quantity", "initial", "final", "drift");
    println!("{:<12} {:>24e} {:>24e} {:>12.3e}", "mass", c.mass_initial, c.mass_final, c.mass_drift);
    for (d, name) in ["momentum_x", "momentum_y"].iter().enumerate().take(c.momentum_drift.len()) {
        println!(
            "{:<12} {:>24e} {:>24e} {:>12.3e}",
            name, c.momentum_initial[d], c.momentum_final[d], c.momentum_drift[d]
        );
    }
    let drift = c.max_drift();
    if drift > CONSERVATION_LIMIT {
        return Err(CliError::Conservation {
            drift,
            limit: CONSERVATION_LIMIT,
        });
    }
    Ok(())
}

pub fn solve_euler(args: &ScenarioArgs) -> CliResult {
    let cfg = load_scenario(args)?;
    let mut manifest = RunManifest::start("solve-euler", to_value(&cfg), Some(cfg.seed));
    let res = (|| -> CliResult {
        let times = euler_times(&cfg);
        let fm = match cfg.dim() {
            1 => {
                let sol = pipeline::solve_scenario_1d(&cfg, cfg.alpha, &times)?;
                io::write_solution_1d(&sol, cfg.euler.cfl, &args.out)?
            }
            _ => {
                let sol = pipeline::solve_scenario_2d(&cfg, cfg.alpha, &times)?;
                io::write_solution_2d(&sol, cfg.euler.cfl, &args.out)?
            }
        };
        manifest.outputs = std::iter::once(PathBuf::from(MANIFEST))
            .chain(fm.files.iter().map(PathBuf::from))
            .map(|f| args.out.join(f))
            .collect();
        report_fields(&fm)
    })();
    finish(manifest, &args.out, &res)?;
    res
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RunKind {
    Agents(usize),
    Fields(usize),
}

fn run_kind(dir: &Path) -> CliResult<RunKind> {
    let v: Value = io::read_json(dir.join(MANIFEST))
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let dim = v
        .get("dimension")
        .and_then(Value::as_u64)
        .ok_or_else(|| CliError::Config(format!("{}: manifest lacks a dimension", dir.display())))?
        as usize;
    if v.get("N").is_some() {
        Ok(RunKind::Agents(dim))
    } else if v.get("K").is_some() {
        Ok(RunKind::Fields(dim))
    } else {
        Err(CliError::Config(format!("{}: not a trajectory or field directory", dir.display())))
    }
}

fn write_differences(rows: &[pipeline::FieldDifference<f64>], out: &Path) -> CliResult {
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("summary.csv")).map_err(fracflock::Error::from)?;
    for r in rows {
        w.serialize(r).map_err(fracflock::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn compare(agent_dir: &Path, euler_dir: &Path, out: &Path, coarsening: Option<usize>) -> CliResult {
    let config = serde_json::json!({
        "agent_dir": agent_dir,
        "euler_dir": euler_dir,
        "coarsening": coarsening,
    });
    let mut manifest = RunManifest::start("compare", config, None);
    let res = (|| -> CliResult {
        let ek = run_kind(euler_dir)?;
        let RunKind::Fields(dim) = ek else {
            return Err(CliError::Config(format!("{} is not an Euler run", euler_dir.display())));
        };
        println!("{:>8} {:>14} {:>14}", "time", "density_err", "velocity_err");
        match run_kind(agent_dir)? {
            RunKind::Agents(d) if d == dim => {
                let c = coarsening.unwrap_or(if dim == 1 { 8 } else { 4 });
                let rows = if dim == 1 {
                    let log = io::read_trajectory::<f64, 1>(agent_dir)?;
                    pipeline::compare_1d(&log, &io::read_solution_1d(euler_dir)?, c)?
                } else {
                    let log = io::read_trajectory::<f64, 2>(agent_dir)?;
                    pipeline::compare_2d(&log, &io::read_solution_2d(euler_dir)?, c)?
                };
                for r in &rows {
                    println!(
                        "{:>8.3} {:>14.6e} {:>14.6e}  spread {:?}",
                        r.time, r.density_error, r.velocity_error, r.spread
                    );
                }
                pipeline::write_comparison(&rows, out)?;
            }
            RunKind::Fields(d) if d == dim => {
                let rows = if dim == 1 {
                    pipeline::compare_solutions_1d(&io::read_solution_1d(agent_dir)?, &io::read_solution_1d(euler_dir)?)?
                } else {
                    pipeline::compare_solutions_2d(&io::read_solution_2d(agent_dir)?, &io::read_solution_2d(euler_dir)?)?
                };
                for r in &rows {
                    println!("{:>8.3} {:>14.6e} {:>14.6e}", r.time, r.density_error, r.velocity_error);
                }
                write_differences(&rows, out)?;
            }
            _ => return Err(CliError::Config("runs have different dimensions".into())),
        }
        manifest.outputs = vec![out.join("summary.csv")];
        Ok(())
    })();
    finish(manifest, out, &res)?;
    res
}

fn bo_config(bo: Option<Value>, seed: Option<u64>) -> CliResult<BoConfig<f64>> {
    let mut base = to_value(&BoConfig::<f64>::default());
    if let (Some(Value::Object(over)), Value::Object(b)) = (bo.clone(), &mut base) {
        b.extend(over);
    } else if bo.as_ref().is_some_and(|v| !v.is_null()) {
        return Err(CliError::Config("`bo` must be a JSON object".into()));
    }
    let mut cfg: BoConfig<f64> = serde_json::from_value(base).map_err(|e| CliError::Config(format!("bo: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Where `learn` takes its reference trajectories from.
#[derive(Debug, Clone)]
pub enum ReferenceSource {
    Agents,
    Euler,
    Dir(PathBuf),
}

fn load_reference(dir: &Path, cfg: &mut ScenarioConfig<f64>) -> CliResult<Reference<f64>> {
    let reference = match cfg.dim() {
        1 => Reference::OneD(io::read_trajectory(dir)?),
        _ => Reference::TwoD(io::read_trajectory(dir)?),
    };
    let times = reference.sample_times();
    let same = times.len() == cfg.sample_times.len()
        && times.iter().zip(&cfg.sample_times).all(|(a, b): (&f64, &f64)| (a - b).abs() <= 1e-9 * b.abs().max(1.0));
    if !same {
        return Err(CliError::Config(format!(
            "sample time mismatch: {} holds {times:?}, the scenario asks for {:?}",
            dir.display(),
            cfg.sample_times
        )));
    }
    let alpha = match &reference {
        Reference::OneD(l) => l.alpha_used,
        Reference::TwoD(l) => l.alpha_used,
    };
    if alpha != cfg.alpha {
        eprintln!("note: reference was generated with alpha = {alpha}; reporting it as the given order");
        cfg.alpha = alpha;
    }
    Ok(reference)
}

pub fn learn(args: &ScenarioArgs, dry_run: bool, resume: Option<&Path>, source: &ReferenceSource) -> CliResult {
    let mut map = config_value(args)?;
    let bo = bo_config(map.remove("bo"), args.seed)?;
    let mut cfg = scenario_from(map)?;
    let loaded = match source {
        ReferenceSource::Dir(dir) => Some(load_reference(dir, &mut cfg)?),
        _ => None,
    };
    let prior: Option<GpModel<f64>> = resume
        .map(|p| io::read_json(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))))
        .transpose()?;
    let resolved = serde_json::json!({ "scenario": to_value(&cfg), "bo": to_value(&bo) });
    if dry_run {
        println!("{}", serde_json::to_string_pretty(&resolved).unwrap_or_default());
        println!("configuration is valid");
        return Ok(());
    }
    let mut manifest = RunManifest::start("learn", resolved, Some(cfg.seed));
    let out = &args.out;
    let res = (|| -> CliResult {
        std::fs::create_dir_all(out)?;
        let reference = match (source, loaded) {
            (_, Some(r)) => r,
            (ReferenceSource::Euler, None) => pipeline::euler_reference(&cfg, cfg.alpha)?,
            _ => pipeline::generate_reference(&cfg)?,
        };
        reference.write(out.join("reference"))?;
        manifest.outputs.push(out.join("reference"));
        match pipeline::learn_alpha_with(&reference, &cfg, &bo, prior.as_ref()) {
            Ok((report, model)) => {
                report.write(out)?;
                for f in ["report.json", "history.csv", "loss_log.csv"] {
                    manifest.outputs.push(out.join(f));
                }
                if let Some(m) = model {
                    io::write_json(out.join("model.json"), &m)?;
                    manifest.outputs.push(out.join("model.json"));
                }
                print_report(&reference, &report);
                Ok(())
            }
            Err(abort) => {
                abort.history.write_csv(out.join("history.csv"))?;
                pipeline::write_loss_log(&abort.evaluations_log, out.join("loss_log.csv"))?;
                manifest.outputs.push(out.join("history.csv"));
                manifest.outputs.push(out.join("loss_log.csv"));
                Err(abort.error.into())
            }
        }
    })();
    finish(manifest, out, &res)?;
    res
}

fn print_report(reference: &Reference<f64>, r: &pipeline::LearnReport<f64>) {
    println!("reference: {} sample times", reference.sample_times().len());
    println!("{:>12} {:>14} {:>14}", "given_alpha", "learned_alpha", "output_F");
    println!("{:>12.4} {:>14.4} {:>14.4e}", r.given_alpha, r.learned_alpha, r.output_f);
    println!(
        "{} evaluations, {} iterations, {}",
        r.evaluations,
        r.iterations,
        if r.converged { "converged" } else { "iteration budget reached" }
    );
}
