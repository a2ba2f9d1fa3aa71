//! Command implementations and file emission.
//!
//! Every command writes UTF-8 artifacts under the output directory: CSV
//! with a header row, JSON pretty-printed with stable key order, plus a
//! `manifest.json` listing the run inputs and every artifact written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use floodscen::distributions::{
    fit_quantile_table, gumbel_estimate, FitFamily, LambdaGrid, QuantileTable, SampleState,
};
use floodscen::dp::{backward_solve, sample_trajectories, PolicySolution, TrajectorySet};
use floodscen::flood::{
    build_model, capital_distribution, load_sweep, FloodModel, FloodModelConfig,
    flood_fit_spec,
};
use floodscen::quantize::{lloyd_w1, LloydConfig};
use floodscen::robust::{robust_backward_solve, theta_sweep};
use floodscen::tree::{build_tree, BuildSpec, GroupTag, ScenarioTree};

use crate::config::RunSettings;
use crate::CliError;

pub struct Emitted {
    pub artifacts: Vec<PathBuf>,
}

fn ensure_out(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Input(format!("cannot create output dir {}: {e}", out.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Input(format!("serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

// ---- fit ----

#[derive(Serialize)]
struct FitReportRow {
    probability: f64,
    loss: f64,
    fitted: f64,
    rel_err: f64,
}

#[derive(Serialize)]
struct FitReport {
    family: String,
    params: floodscen::distributions::FittedParams,
    residual_norm: f64,
    pnl: f64,
    rows: Vec<FitReportRow>,
}

pub fn cmd_fit(
    table_path: &Path,
    family: FitFamily,
    pnl: f64,
    out: &Path,
) -> Result<Emitted, CliError> {
    ensure_out(out)?;
    let file = std::fs::File::open(table_path)
        .map_err(|e| CliError::Input(format!("cannot open {}: {e}", table_path.display())))?;
    let table = QuantileTable::from_csv_reader(file, pnl)
        .map_err(|e| CliError::Input(format!("{}: {e}", table_path.display())))?;
    let fit = fit_quantile_table(&table, family).map_err(|e| CliError::Solver(e.to_string()))?;
    let family_name = format!("{family:?}").to_lowercase();
    let rows = fit
        .rows
        .iter()
        .map(|r| FitReportRow {
            probability: r.probability,
            loss: r.loss,
            fitted: r.fitted,
            rel_err: (r.fitted - r.loss).abs() / r.loss.abs().max(1e-300),
        })
        .collect();
    let report = FitReport {
        family: family_name.clone(),
        params: fit.params.clone(),
        residual_norm: fit.residual_norm,
        pnl,
        rows,
    };
    let path = out.join(format!("fit_{family_name}.json"));
    write_json(&path, &report)?;
    println!(
        "fit[{family_name}] residual_norm={:.6e} -> {}",
        fit.residual_norm,
        path.display()
    );
    Ok(Emitted {
        artifacts: vec![path],
    })
}

// ---- estimate ----

fn read_sample_csv(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    match lines.next() {
        Some(h) if h.trim() == "value" => {}
        other => {
            return Err(CliError::Input(format!(
                "sample file {}: expected header `value`, got {:?}",
                path.display(),
                other.unwrap_or("")
            )))
        }
    }
    lines
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Input(format!("sample file {}: bad value `{l}`", path.display())))
        })
        .collect()
}

pub fn base_sample(settings: &RunSettings) -> Result<SampleState, CliError> {
    let values = match &settings.sample_csv {
        Some(path) => read_sample_csv(path)?,
        None => {
            let d = settings.base_params()?;
            let n = settings.sample_size;
            (0..n)
                .map(|i| d.quantile((i as f64 + 0.5) / n as f64).expect("interior probability"))
                .collect()
        }
    };
    SampleState::new(values).map_err(|e| CliError::Input(e.to_string()))
}

pub fn cmd_estimate(settings: &RunSettings, sample: Option<&Path>, out: &Path) -> Result<Emitted, CliError> {
    ensure_out(out)?;
    let state = match sample {
        Some(p) => SampleState::new(read_sample_csv(p)?).map_err(|e| CliError::Input(e.to_string()))?,
        None => base_sample(settings)?,
    };
    let params = gumbel_estimate(&state.summary(), &LambdaGrid::default())
        .map_err(|e| CliError::Solver(e.to_string()))?;
    let path = out.join("params.json");
    write_json(&path, &params)?;
    println!(
        "estimate: lambda={:.6} u={:.6} epsilon={:.6} (n={}) -> {}",
        params.lambda,
        params.u,
        params.epsilon,
        state.len(),
        path.display()
    );
    Ok(Emitted {
        artifacts: vec![path],
    })
}

// ---- quantize ----

pub fn cmd_quantize(settings: &RunSettings, n: usize, out: &Path) -> Result<Emitted, CliError> {
    ensure_out(out)?;
    let d = settings.base_params()?;
    let run = lloyd_w1(&d, n, &LloydConfig::default()).map_err(|e| CliError::Solver(e.to_string()))?;
    let path = out.join("quantization.json");
    write_json(&path, &run.quantization)?;
    println!(
        "quantize: n={} distortion={:.8} converged={} -> {}",
        n,
        run.quantization.distortion,
        run.converged,
        path.display()
    );
    Ok(Emitted {
        artifacts: vec![path],
    })
}

// ---- tree ----

pub fn build_from_settings(settings: &RunSettings) -> Result<ScenarioTree, CliError> {
    let spec = BuildSpec {
        base_params: settings.base_params()?,
        base_sample: base_sample(settings)?,
        branchiness: settings.flood.branchiness.clone(),
        threshold: settings.flood.pnl,
        exposure: settings.resolved_exposure()?,
    };
    build_tree(&spec, &LloydConfig::default()).map_err(|e| CliError::Solver(e.to_string()))
}

pub fn cmd_tree(settings: &RunSettings, out: &Path) -> Result<Emitted, CliError> {
    ensure_out(out)?;
    let tree = build_from_settings(settings)?;
    let report = tree.validate();
    if !report.is_clean() {
        return Err(CliError::Validation(format!(
            "tree validation found {} violation(s); first: {}",
            report.violations.len(),
            report.violations[0].what
        )));
    }
    let g1 = tree.nodes.iter().filter(|n| n.group == GroupTag::G1).count();
    let g1_mass: f64 = tree
        .stage_nodes(1)
        .iter()
        .filter(|&&r| tree.nodes[r].group == GroupTag::G1)
        .map(|&r| tree.nodes[r].prob)
        .sum();
    let path = out.join("tree.json");
    write_json(&path, &tree)?;
    println!(
        "tree: {} nodes over {} stages; Group-1 fraction {:.4} (stage-1 mass {:.4}) -> {}",
        tree.nodes.len(),
        tree.stages,
        g1 as f64 / tree.nodes.len() as f64,
        g1_mass,
        path.display()
    );
    Ok(Emitted {
        artifacts: vec![path],
    })
}

// ---- distance ----

#[derive(Serialize)]
struct DistanceReport {
    nested: f64,
    stagewise_bound: f64,
    #[serde(rename = "per_stage_dKA")]
    per_stage_dka: Vec<f64>,
}

pub fn load_tree(path: &Path) -> Result<ScenarioTree, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn cmd_distance(tree_a: &Path, tree_b: &Path, out: &Path) -> Result<Emitted, CliError> {
    ensure_out(out)?;
    let a = load_tree(tree_a)?;
    let b = load_tree(tree_b)?;
    if a.stages != b.stages {
        return Err(CliError::Input(format!(
            "stage counts differ: {} vs {}",
            a.stages, b.stages
        )));
    }
    let nested = floodscen::distance::nested_distance(&a, &b)
        .map_err(|e| CliError::Solver(e.to_string()))?;
    let (dka, lip) = floodscen::distance::empirical_stage_bounds(&a, &b)
        .map_err(|e| CliError::Solver(e.to_string()))?;
    let bound = floodscen::distance::stagewise_upper_bound(&dka, &lip);
    let report = DistanceReport {
        nested,
        stagewise_bound: bound,
        per_stage_dka: dka,
    };
    let path = out.join("distance.json");
    write_json(&path, &report)?;
    println!(
        "distance: nested={:.8} stagewise_bound={:.8} -> {}",
        nested,
        bound,
        path.display()
    );
    Ok(Emitted {
        artifacts: vec![path],
    })
}

// ---- solve / sweep ----

#[derive(Serialize)]
struct ValueReport {
    value: f64,
    investment: f64,
    consumption: f64,
    insurance: f64,
    theta: Option<f64>,
    subproblems: usize,
    clamped_losses: usize,
    total_nodes: usize,
}

fn policy_csv(policy: &PolicySolution) -> String {
    let mut text = String::from("stage,node,k,x,c,z,value\n");
    let _ = writeln!(
        text,
        "0,root,0,{},{},{},{}",
        policy.root_decisions[0], policy.root_decisions[1], policy.root_decisions[2], policy.root_value
    );
    for point in &policy.table {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            point.stage,
            point.node,
            point.trajectory,
            point.decisions[0],
            point.decisions[1],
            point.decisions[2],
            point.value
        );
    }
    text
}

fn capital_csv(model: &FloodModel, tree: &ScenarioTree, policy: &PolicySolution) -> Result<String, CliError> {
    let dist = capital_distribution(model, tree, policy).map_err(|e| CliError::Solver(e.to_string()))?;
    let mut text = String::from("capital,probability,cumulative\n");
    for r in &dist.rows {
        let _ = writeln!(text, "{},{},{}", r.capital, r.probability, r.cumulative);
    }
    Ok(text)
}

pub struct SolveArgs<'a> {
    pub settings: &'a RunSettings,
    pub tree_path: Option<&'a Path>,
    pub robust_theta: Option<f64>,
    pub sweep: Option<(SweepKind, Vec<f64>)>,
    pub out: &'a Path,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Load,
    Theta,
}

fn prepare(
    settings: &RunSettings,
    tree_path: Option<&Path>,
) -> Result<(FloodModelConfig, ScenarioTree, TrajectorySet), CliError> {
    let tree = match tree_path {
        Some(p) => load_tree(p)?,
        None => build_from_settings(settings)?,
    };
    let mut cfg = settings.flood.clone();
    cfg.exposure = settings.resolved_exposure()?;
    cfg.stages = tree.stages;
    let traj = sample_trajectories(
        cfg.s0,
        cfg.alpha,
        cfg.delta,
        tree.stages,
        cfg.trajectories,
        cfg.seed,
    );
    Ok((cfg, tree, traj))
}

pub fn cmd_solve(args: SolveArgs<'_>) -> Result<Emitted, CliError> {
    ensure_out(args.out)?;
    let (cfg, tree, traj) = prepare(args.settings, args.tree_path)?;
    let model = build_model(&cfg, &tree).map_err(|e| CliError::Solver(e.to_string()))?;
    let policy = match args.robust_theta {
        Some(theta) => robust_backward_solve(&model, &tree, &traj, &flood_fit_spec(), theta)
            .map_err(|e| CliError::Solver(e.to_string()))?,
        None => backward_solve(&model, &tree, &traj, &flood_fit_spec())
            .map_err(|e| CliError::Solver(e.to_string()))?,
    };
    let mut artifacts = Vec::new();

    let policy_path = args.out.join("policy.csv");
    write_text(&policy_path, &policy_csv(&policy))?;
    artifacts.push(policy_path);

    let value_path = args.out.join("value.json");
    write_json(
        &value_path,
        &ValueReport {
            value: policy.root_value,
            investment: policy.root_decisions[0],
            consumption: policy.root_decisions[1],
            insurance: policy.root_decisions[2],
            theta: args.robust_theta,
            subproblems: policy.subproblem_count,
            clamped_losses: model.clamped,
            total_nodes: model.total_nodes,
        },
    )?;
    artifacts.push(value_path);

    let capital_path = args.out.join("capital.csv");
    write_text(&capital_path, &capital_csv(&model, &tree, &policy)?)?;
    artifacts.push(capital_path);

    if let Some((kind, values)) = &args.sweep {
        let sweep_path = args.out.join("sweep.csv");
        write_text(&sweep_path, &sweep_csv(&cfg, &tree, &traj, *kind, values)?)?;
        artifacts.push(sweep_path);
    }

    println!(
        "solve: value={:.8} x0={:.6} c0={:.6} z0={:.6} ({} subproblems)",
        policy.root_value,
        policy.root_decisions[0],
        policy.root_decisions[1],
        policy.root_decisions[2],
        policy.subproblem_count
    );
    Ok(Emitted { artifacts })
}

fn sweep_csv(
    cfg: &FloodModelConfig,
    tree: &ScenarioTree,
    traj: &TrajectorySet,
    kind: SweepKind,
    values: &[f64],
) -> Result<String, CliError> {
    if values.is_empty() {
        return Err(CliError::Input("sweep needs a nonempty value list".into()));
    }
    match kind {
        SweepKind::Theta => {
            let model = build_model(cfg, tree).map_err(|e| CliError::Solver(e.to_string()))?;
            let rows = theta_sweep(&model, tree, traj, &flood_fit_spec(), values)
                .map_err(|e| CliError::Solver(e.to_string()))?;
            let mut text = String::from("theta,value,x0,c0,z0\n");
            for r in &rows {
                let _ = writeln!(
                    text,
                    "{},{},{},{},{}",
                    r.theta, r.value, r.decisions[0], r.decisions[1], r.decisions[2]
                );
            }
            Ok(text)
        }
        SweepKind::Load => {
            let rows = load_sweep(cfg, tree, traj, values).map_err(|e| CliError::Solver(e.to_string()))?;
            let epochs = tree.stages;
            let mut header = String::from("load,value");
            for t in 0..epochs {
                let _ = write!(header, ",mean_x{t}");
            }
            for t in 0..epochs {
                let _ = write!(header, ",mean_z{t}");
            }
            header.push('\n');
            let mut text = header;
            for r in &rows {
                let _ = write!(text, "{},{}", r.load, r.value);
                for v in &r.mean_investment {
                    let _ = write!(text, ",{v}");
                }
                for v in &r.mean_insurance {
                    let _ = write!(text, ",{v}");
                }
                text.push('\n');
            }
            Ok(text)
        }
    }
}

pub fn cmd_sweep(
    settings: &RunSettings,
    tree_path: Option<&Path>,
    kind: SweepKind,
    values: &[f64],
    out: &Path,
) -> Result<Emitted, CliError> {
    ensure_out(out)?;
    let (cfg, tree, traj) = prepare(settings, tree_path)?;
    let sweep_path = out.join("sweep.csv");
    write_text(&sweep_path, &sweep_csv(&cfg, &tree, &traj, kind, values)?)?;
    println!("sweep: {} rows -> {}", values.len(), sweep_path.display());
    Ok(Emitted {
        artifacts: vec![sweep_path],
    })
}
