//! Subcommand implementations. Each returns the text it wants on stdout;
//! files go only under the configured output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use drcc::ac_model::{fixed_point_solve, trace_csv, AcError};
use drcc::ambiguity::{k_for, optimal_epsilon, min_k_for_target, AmbiguityParams, EnforcedCount};
use drcc::case_io::{load_case, to_network, NetworkCase, NetworkOptions};
use drcc::dc_model::DcError;
use drcc::evaluation::{ro_baseline, sweep_k, sweep_svg, Dispatch, EvalError, EvalReport, Solved, Study};
use drcc::scenario_mip::{SelectionError, SelectionStatus};
use drcc::scenarios::{fmt_f64, load_csv, stats, to_csv_string, ScenarioError, ScenarioSet};
use log::{info, warn};
use thiserror::Error;

use crate::config::{AmbiguityInput, ConfigError, LoadedConfig, ModelKind};

/// Failure classes with fixed exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Configuration, input or I/O problem.
    #[error("{0:#}")]
    Usage(anyhow::Error),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn classify_selection(e: &SelectionError) -> Option<bool> {
    match e {
        SelectionError::Qp(_) | SelectionError::NoIncumbent => Some(false),
        SelectionError::Invalid(_) => None,
    }
}

fn classify_ac(e: &AcError) -> Option<bool> {
    match e {
        AcError::Infeasible(_) => Some(true),
        AcError::NoConvergence { .. }
        | AcError::Singular
        | AcError::Slp(_)
        | AcError::FixedPoint(_)
        | AcError::Dimension(_) => Some(false),
        AcError::Selection(s) => classify_selection(s),
        AcError::Disconnected(_) | AcError::NoSlackGenerator => None,
    }
}

fn classify_dc(e: &DcError) -> Option<bool> {
    match e {
        DcError::Infeasible(_) => Some(true),
        DcError::Singular | DcError::Qp(_) => Some(false),
        DcError::Disconnected(_) => None,
    }
}

impl From<anyhow::Error> for CliError {
    /// `Some(true)` is infeasible, `Some(false)` numerical, `None` usage.
    fn from(e: anyhow::Error) -> Self {
        let class = if let Some(ev) = e.downcast_ref::<EvalError>() {
            match ev {
                EvalError::RoInfeasible { .. } => Some(true),
                EvalError::Dc(d) => classify_dc(d),
                EvalError::Ac(a) => classify_ac(a),
                EvalError::Selection(s) => classify_selection(s),
                EvalError::Ambiguity(_) | EvalError::Invalid(_) => None,
            }
        } else if let Some(a) = e.downcast_ref::<AcError>() {
            classify_ac(a)
        } else if let Some(d) = e.downcast_ref::<DcError>() {
            classify_dc(d)
        } else if let Some(s) = e.downcast_ref::<SelectionError>() {
            classify_selection(s)
        } else {
            None
        };
        match class {
            Some(true) => CliError::Infeasible(format!("{e:#}")),
            Some(false) => CliError::Numerical(format!("{e:#}")),
            None => CliError::Usage(e),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Log lines kept for the run's log file as well as the console.
#[derive(Debug, Default)]
pub struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    pub fn info(&mut self, line: String) {
        info!("{line}");
        self.lines.push(line);
    }

    pub fn warn(&mut self, line: String) {
        warn!("{line}");
        self.lines.push(format!("WARNING {line}"));
    }

    pub fn render(&self, digest_line: &str) -> String {
        let mut out = format!("{digest_line}\n");
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }
}

fn write_output(dir: &Path, name: &str, contents: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(anyhow::anyhow!("cannot create output directory {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| CliError::Usage(anyhow::anyhow!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

/// `key,value` description of a network.
pub fn case_info(case: &NetworkCase) -> String {
    let mut out = String::from("key,value\n");
    let load: f64 = case.buses.iter().map(|b| b.pd).sum::<f64>() * case.base_mva;
    let cap: f64 = case.gens.iter().map(|g| g.p_max).sum::<f64>() * case.base_mva;
    let unlimited = case.branches.iter().filter(|b| !b.limit.is_finite()).count();
    let _ = writeln!(out, "base_mva,{}", case.base_mva);
    let _ = writeln!(out, "buses,{}", case.n_bus());
    let _ = writeln!(out, "generators,{}", case.n_gen());
    let _ = writeln!(out, "branches,{}", case.n_branch());
    let _ = writeln!(out, "unlimited_branches,{unlimited}");
    let _ = writeln!(out, "slack_bus,{}", case.buses[case.slack].id);
    let _ = writeln!(out, "total_load_mw,{load}");
    let _ = writeln!(out, "total_capacity_mw,{cap}");
    out
}

pub fn cmd_case_info_config(cfg: &LoadedConfig) -> CliResult<String> {
    Ok(case_info(&cfg.load_network()?))
}

/// Case info straight from a source string, with default options.
pub fn cmd_case_info_source(source: &str, allow_negative_reactance: bool) -> CliResult<String> {
    if !source.starts_with("bundled:") && !Path::new(source).exists() {
        return Err(CliError::Usage(anyhow::anyhow!("case file {source} does not exist")));
    }
    let raw = load_case(source).map_err(anyhow::Error::from)?;
    let opts = NetworkOptions { allow_negative_reactance, ..NetworkOptions::default() };
    Ok(case_info(&to_network(&raw, &opts).map_err(anyhow::Error::from)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetKind {
    Train,
    Test,
}

impl SetKind {
    fn name(self) -> &'static str {
        match self {
            SetKind::Train => "train",
            SetKind::Test => "test",
        }
    }
}

/// Sample a scenario set into `scenarios_<set>.csv`.
pub fn cmd_scenario_gen(cfg: &LoadedConfig, set: SetKind) -> CliResult<String> {
    let inputs = cfg.inputs()?;
    let scen = match set {
        SetKind::Train => cfg.training_set(&inputs.spec)?,
        SetKind::Test => cfg.test_set(&inputs.spec)?,
    };
    let text = format!(
        "{}\n{}",
        cfg.config.digest_line(),
        to_csv_string(&scen).map_err(anyhow::Error::from)?
    );
    let path = write_output(&cfg.output_dir(), &format!("scenarios_{}.csv", set.name()), &text)?;
    Ok(format!("{}\n", path.display()))
}

pub fn scenario_stats_text(set: &ScenarioSet) -> String {
    let st = stats(set);
    let mut out = String::from("label,count,mean,std_dev,min,max\n");
    for (i, label) in set.labels.iter().enumerate() {
        let _ = writeln!(
            out,
            "{label},{},{},{},{},{}",
            st.count,
            fmt_f64(st.mean[i]),
            fmt_f64(st.std_dev[i]),
            fmt_f64(st.min[i]),
            fmt_f64(st.max[i])
        );
    }
    out.push_str("\ncorrelation\n");
    for r in 0..st.correlation.nrows() {
        let row: Vec<String> = st.correlation.row(r).iter().map(|&v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn cmd_scenario_stats_config(cfg: &LoadedConfig, set: SetKind) -> CliResult<String> {
    let inputs = cfg.inputs()?;
    let scen = match set {
        SetKind::Train => cfg.training_set(&inputs.spec)?,
        SetKind::Test => cfg.test_set(&inputs.spec)?,
    };
    Ok(scenario_stats_text(&scen))
}

pub fn cmd_scenario_stats_csv(path: &Path) -> CliResult<String> {
    let set = load_csv(path, None).map_err(|e: ScenarioError| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(scenario_stats_text(&set))
}

pub fn cmd_ambiguity_eps(k: usize, s: usize, digits: usize) -> CliResult<String> {
    let opt = optimal_epsilon(k, s).map_err(anyhow::Error::from)?;
    Ok(format!("{:.*}\n", digits, opt.epsilon))
}

pub fn cmd_ambiguity_k(epsilon: f64, radius: f64, s: usize) -> CliResult<String> {
    Ok(match k_for(epsilon, radius, s).map_err(anyhow::Error::from)? {
        EnforcedCount::Scenarios(k) => format!("{k}\n"),
        EnforcedCount::WorstCaseRequired => "worst-case\n".into(),
    })
}

pub fn cmd_ambiguity_mink(target: f64, s: usize) -> CliResult<String> {
    Ok(format!("{}\n", min_k_for_target(target, s).map_err(anyhow::Error::from)?))
}

fn resolve_k(cfg: &LoadedConfig, s: usize, log: &mut RunLog) -> CliResult<AmbiguityParams> {
    let params = match cfg.config.ambiguity_input()? {
        AmbiguityInput::K(k) => AmbiguityParams::from_k(k, s),
        AmbiguityInput::Target(t) => AmbiguityParams::from_target(t, s),
    }
    .map_err(|e| CliError::Usage(anyhow::anyhow!("config key `ambiguity`: {e}")))?;
    log.info(format!(
        "S = {s}: k = {} chosen (epsilon* = {:.4}, radius = {:.6})",
        params.k, params.epsilon, params.radius
    ));
    Ok(params)
}

/// Generator table `gen,bus,p_mw` for either model.
fn dispatch_csv(case: &NetworkCase, dispatch: &Dispatch, digest_line: &str) -> String {
    let p_gen = match dispatch {
        Dispatch::Dc(x) => x.clone(),
        Dispatch::Ac(state) => state.p_gen.clone(),
    };
    let mut out = format!("{digest_line}\ngen,bus,p_mw\n");
    for (g, gen) in case.gens.iter().enumerate() {
        let _ = writeln!(out, "{g},{},{}", case.buses[gen.bus].id, fmt_f64(p_gen[g] * case.base_mva));
    }
    out
}

/// Solve at the configured `k`, evaluate on the test set, write artifacts.
pub fn cmd_solve(cfg: &LoadedConfig, model: ModelKind) -> CliResult<String> {
    let mut cfg = cfg.clone();
    cfg.config.model.kind = model;
    let digest = cfg.config.digest_line();
    let dir = cfg.output_dir();
    let mut log = RunLog::default();
    let inputs = cfg.inputs()?;
    let study = cfg.study(&inputs)?;
    let train = cfg.training_set(&inputs.spec)?;
    let test = cfg.test_set(&inputs.spec)?;
    let params = resolve_k(&cfg, train.len(), &mut log)?;

    let solved = match &study {
        Study::Ac(ac) => {
            let started = Instant::now();
            let fp = fixed_point_solve(&ac.net, &ac.fleet, &train, &params, &ac.start, &ac.options)
                .map_err(anyhow::Error::from)?;
            write_output(&dir, "trace.csv", &trace_csv(&fp.trace, &digest))?;
            log.info(format!("fixed point converged after {} outer iterations", fp.iterations));
            Solved {
                cost: fp.selection.objective,
                dispatch: Dispatch::Ac(Box::new(fp.state)),
                selection: Some(fp.selection),
                wall_time: started.elapsed(),
                outer_iterations: Some(fp.iterations),
            }
        }
        Study::Dc(_) => study.solve(&train, params.k).map_err(anyhow::Error::from)?,
    };
    let status = solved.status();
    log.info(format!("status {}", status.as_str()));
    if status == SelectionStatus::Infeasible {
        write_output(&dir, "solve.log", &log.render(&digest))?;
        return Err(CliError::Infeasible(format!("no dispatch enforces {} of {} scenarios", params.k, train.len())));
    }
    if status == SelectionStatus::GapLimit {
        log.warn("search stopped at a node or time limit; the dispatch may be suboptimal".into());
    }
    if let Some(sel) = &solved.selection {
        let relaxed = sel.relaxed();
        log.info(format!("relaxed scenarios {relaxed:?}"));
        for j in relaxed {
            log.info(format!("scenario {j}: total error {:.6} p.u.", train.xi.row(j).sum()));
        }
    }
    log.info(format!("cost {:.6}", solved.cost));
    if cfg.config.output.timing {
        log.info(format!("solve time {:.3} s", solved.wall_time.as_secs_f64()));
    }
    let counts = study.violation_frequency(&solved.dispatch, &test).map_err(anyhow::Error::from)?;
    log.info(format!("joint violation {:.4} on {} test samples", counts.joint_rate(), counts.samples));
    let report = EvalReport::new(&study, &solved, &counts, Some(params.k), None);

    write_output(&dir, "solution.csv", &dispatch_csv(&inputs.case, &solved.dispatch, &digest))?;
    if let (Dispatch::Ac(state), Study::Ac(ac)) = (&solved.dispatch, &study) {
        write_output(&dir, "buses.csv", &state.bus_csv(&ac.net, &digest))?;
        write_output(&dir, "branches.csv", &state.branch_csv(&ac.net, &digest))?;
    }
    write_output(&dir, "report.csv", &report.to_csv(&digest))?;
    write_output(&dir, "solve.log", &log.render(&digest))?;
    Ok(format!(
        "status {}\nk {}\ncost {}\njoint_violation {}\n",
        status.as_str(),
        params.k,
        fmt_f64(solved.cost),
        fmt_f64(counts.joint_rate())
    ))
}

/// Sweep `k`, writing `sweep.csv` and `sweep.svg`.
pub fn cmd_sweep(cfg: &LoadedConfig) -> CliResult<String> {
    let digest = cfg.config.digest_line();
    let dir = cfg.output_dir();
    let k_values = cfg.config.sweep_values()?;
    let mut log = RunLog::default();
    let inputs = cfg.inputs()?;
    let study = cfg.study(&inputs)?;
    let train = cfg.training_set(&inputs.spec)?;
    let test = cfg.test_set(&inputs.spec)?;
    if let Some(&k) = k_values.iter().find(|&&k| k == 0 || k > train.len()) {
        return Err(CliError::Usage(anyhow::anyhow!(
            "config key `sweep`: k = {k} outside 1..={}",
            train.len()
        )));
    }
    let ro_set = cfg.ro_set(&inputs.spec, &train)?;
    log.info(format!("robust baseline over {} scenarios", ro_set.len()));
    let ro = ro_baseline(&study, &ro_set).map_err(anyhow::Error::from)?;
    log.info(format!("robust cost {:.6}", ro.cost));
    let det = study.deterministic().map_err(anyhow::Error::from)?;
    log.info(format!("deterministic cost {:.6}", det.cost));
    let table = sweep_k(&study, &train, &test, &k_values, &ro, det.cost).map_err(anyhow::Error::from)?;
    for r in &table.rows {
        log.info(format!(
            "k = {}: epsilon* {:.4}, cost {:.6}, violation {:.4}, status {}",
            r.k, r.epsilon_star, r.cost, r.joint_violation, r.status
        ));
    }
    let timing = cfg.config.output.timing;
    let csv = table.to_csv(&digest, timing);
    write_output(&dir, "sweep.csv", &csv)?;
    write_output(&dir, "sweep.svg", &sweep_svg(&table, &digest, timing))?;
    write_output(&dir, "sweep.log", &log.render(&digest))?;
    Ok(csv)
}

/// Deterministic, chance-constrained and robust dispatches on one test set.
pub fn cmd_eval(cfg: &LoadedConfig) -> CliResult<String> {
    let digest = cfg.config.digest_line();
    let dir = cfg.output_dir();
    let mut log = RunLog::default();
    let inputs = cfg.inputs()?;
    let study = cfg.study(&inputs)?;
    let train = cfg.training_set(&inputs.spec)?;
    let test = cfg.test_set(&inputs.spec)?;
    let params = resolve_k(cfg, train.len(), &mut log)?;
    let ro_set = cfg.ro_set(&inputs.spec, &train)?;

    // Without a robust baseline the comparison still runs; costs are left
    // unnormalized.
    let ro = match ro_baseline(&study, &ro_set) {
        Ok(solved) => Some(solved),
        Err(e @ EvalError::RoInfeasible { .. }) => {
            log.warn(format!("robust: {e}"));
            None
        }
        Err(e) => return Err(anyhow::Error::from(e).into()),
    };
    let ro_cost = ro.as_ref().map(|s| s.cost);
    let runs = [
        ("deterministic", None, Some(study.deterministic().map_err(anyhow::Error::from)?)),
        ("kl", Some(params.k), Some(study.solve(&train, params.k).map_err(anyhow::Error::from)?)),
        ("robust", Some(ro_set.len()), ro),
    ];
    let mut out = format!("{digest}\nmethod,k,cost,cost_vs_ro,joint_violation,newton_failures,status\n");
    for (name, k, solved) in &runs {
        let k_cell = k.map_or_else(String::new, |k| k.to_string());
        let Some(solved) = solved.as_ref().filter(|s| s.status() != SelectionStatus::Infeasible) else {
            if solved.is_some() {
                log.warn(format!("{name}: infeasible"));
            }
            let _ = writeln!(out, "{name},{k_cell},,,,,{}", SelectionStatus::Infeasible.as_str());
            continue;
        };
        let counts = study.violation_frequency(&solved.dispatch, &test).map_err(anyhow::Error::from)?;
        log.info(format!("{name}: cost {:.6}, joint violation {:.4}", solved.cost, counts.joint_rate()));
        let _ = writeln!(
            out,
            "{name},{k_cell},{},{},{},{},{}",
            fmt_f64(solved.cost),
            ro_cost.map_or_else(String::new, |c| fmt_f64(solved.cost / c)),
            fmt_f64(counts.joint_rate()),
            counts.failures,
            solved.status().as_str()
        );
        let report = EvalReport::new(&study, solved, &counts, *k, ro_cost);
        write_output(&dir, &format!("report_{name}.csv"), &report.to_csv(&digest))?;
    }
    write_output(&dir, "eval.csv", &out)?;
    write_output(&dir, "eval.log", &log.render(&digest))?;
    Ok(out)
}
