//! MATPOWER case files and the per-unit network model built from them.
//!
//! Only the assignment subset of the MATPOWER v2 format is understood:
//! `mpc.baseMVA = <number>;` and `mpc.<name> = [ rows ];`. Rows are separated
//! by `;` or newlines and `%` starts a comment. Anything else under `mpc.` is
//! skipped with a warning.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use log::warn;
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CaseError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing mandatory matrix `{0}`")]
    MissingMatrix(&'static str),
    #[error("matrix `{name}` row {row} has {got} columns, expected {expected}")]
    Ragged { name: String, row: usize, got: usize, expected: usize },
    #[error("matrix `{name}` has {got} columns, at least {min} required")]
    TooFewColumns { name: &'static str, got: usize, min: usize },
    #[error("{table} row {row} references unknown bus {bus}")]
    UnknownBus { table: &'static str, row: usize, bus: i64 },
    #[error("duplicate bus id {0}")]
    DuplicateBus(i64),
    #[error("expected exactly one slack bus, found {0}")]
    SlackCount(usize),
    #[error("branch {from}-{to} has nonpositive reactance {x}")]
    NonpositiveReactance { from: i64, to: i64, x: f64 },
    #[error("generator {0} has negative quadratic cost coefficient")]
    NonconvexCost(usize),
    #[error("gencost row {0}: {1}")]
    UnsupportedCost(usize, String),
    #[error("generator {0} has inconsistent limits")]
    InconsistentLimits(usize),
    #[error("invalid fleet: {0}")]
    Fleet(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: String, msg: String },
}

/// MATPOWER matrices as written in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCase {
    pub base_mva: f64,
    pub bus: Vec<Vec<f64>>,
    pub gen: Vec<Vec<f64>>,
    pub branch: Vec<Vec<f64>>,
    pub gencost: Option<Vec<Vec<f64>>>,
}

const BUS_MIN_COLS: usize = 13;
const GEN_MIN_COLS: usize = 21;
const BRANCH_MIN_COLS: usize = 13;

fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '\'' | '"' => in_quote = !in_quote,
            '%' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

struct MatrixBuilder {
    name: String,
    rows: Vec<Vec<f64>>,
    current: Vec<f64>,
    start_line: usize,
}

impl MatrixBuilder {
    fn end_row(&mut self) {
        if !self.current.is_empty() {
            self.rows.push(std::mem::take(&mut self.current));
        }
    }

    /// Feed matrix body text; returns true once `]` is seen.
    fn feed(&mut self, text: &str, line: usize) -> Result<bool, CaseError> {
        let mut token = String::new();
        let name = self.name.clone();
        let flush = |token: &mut String, current: &mut Vec<f64>| -> Result<(), CaseError> {
            if !token.is_empty() {
                let v = parse_number(token).ok_or_else(|| CaseError::Syntax {
                    line,
                    msg: format!("invalid number `{token}` in matrix `{name}`"),
                })?;
                current.push(v);
                token.clear();
            }
            Ok(())
        };
        for c in text.chars() {
            match c {
                ' ' | '\t' | ',' | '\r' => flush(&mut token, &mut self.current)?,
                ';' => {
                    flush(&mut token, &mut self.current)?;
                    self.end_row();
                }
                ']' => {
                    flush(&mut token, &mut self.current)?;
                    self.end_row();
                    return Ok(true);
                }
                '.' | '+' | '-' | 'e' | 'E' | 'I' | 'n' | 'f' | 'N' | 'a' => token.push(c),
                c if c.is_ascii_digit() => token.push(c),
                other => {
                    return Err(CaseError::Syntax {
                        line,
                        msg: format!("unexpected character `{other}` in matrix `{}`", self.name),
                    })
                }
            }
        }
        flush(&mut token, &mut self.current)?;
        self.end_row();
        Ok(false)
    }
}

fn parse_number(s: &str) -> Option<f64> {
    match s {
        "Inf" | "+Inf" | "inf" => Some(f64::INFINITY),
        "-Inf" | "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

/// Parse MATPOWER case text.
pub fn parse_matpower(text: &str) -> Result<RawCase, CaseError> {
    let mut scalars: HashMap<String, f64> = HashMap::new();
    let mut matrices: BTreeMap<String, (usize, Vec<Vec<f64>>)> = BTreeMap::new();
    let mut open: Option<MatrixBuilder> = None;
    let mut skipping_cell = false;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw_line);
        if skipping_cell {
            if line.contains('}') {
                skipping_cell = false;
            }
            continue;
        }
        if let Some(m) = open.as_mut() {
            if m.feed(line, line_no)? {
                let m = open.take().expect("open matrix");
                matrices.insert(m.name, (m.start_line, m.rows));
            }
            continue;
        }
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let first = trimmed.split_whitespace().next().unwrap_or("");
        if matches!(first, "function" | "end" | "return" | "return;" | "end;") {
            continue;
        }
        let Some((lhs, rhs)) = trimmed.split_once('=') else {
            return Err(CaseError::Syntax { line: line_no, msg: format!("expected assignment, found `{trimmed}`") });
        };
        let lhs = lhs.trim();
        let name = lhs.strip_prefix("mpc.").unwrap_or(lhs).to_string();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(CaseError::Syntax { line: line_no, msg: format!("invalid assignment target `{lhs}`") });
        }
        let rhs = rhs.trim();
        if let Some(body) = rhs.strip_prefix('[') {
            let mut m = MatrixBuilder { name: name.clone(), rows: Vec::new(), current: Vec::new(), start_line: line_no };
            if m.feed(body, line_no)? {
                matrices.insert(name, (line_no, m.rows));
            } else {
                open = Some(m);
            }
        } else if rhs.starts_with('{') {
            warn!("ignoring cell array `{name}`");
            skipping_cell = !rhs.contains('}');
        } else if rhs.starts_with('\'') || rhs.starts_with('"') {
            if name != "version" {
                warn!("ignoring string field `{name}`");
            }
        } else {
            let value = rhs.trim_end_matches(';').trim();
            let v = parse_number(value).ok_or_else(|| CaseError::Syntax {
                line: line_no,
                msg: format!("cannot parse `{value}` as a number"),
            })?;
            scalars.insert(name, v);
        }
    }
    if let Some(m) = open {
        return Err(CaseError::Syntax { line: m.start_line, msg: format!("matrix `{}` is never closed", m.name) });
    }

    let base_mva = *scalars.get("baseMVA").ok_or(CaseError::MissingMatrix("baseMVA"))?;
    let mut take = |name: &'static str, min: usize, required: bool| -> Result<Option<Vec<Vec<f64>>>, CaseError> {
        let Some((_, rows)) = matrices.remove(name) else {
            return if required { Err(CaseError::MissingMatrix(name)) } else { Ok(None) };
        };
        let width = rows.first().map_or(0, Vec::len);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(CaseError::Ragged { name: name.to_string(), row: i, got: r.len(), expected: width });
            }
        }
        if !rows.is_empty() && width < min {
            return Err(CaseError::TooFewColumns { name, got: width, min });
        }
        Ok(Some(rows))
    };
    let bus = take("bus", BUS_MIN_COLS, true)?.expect("required");
    let gen = take("gen", GEN_MIN_COLS, true)?.expect("required");
    let branch = take("branch", BRANCH_MIN_COLS, true)?.expect("required");
    let gencost = take("gencost", 4, false)?;
    for name in matrices.keys() {
        warn!("ignoring matrix `{name}`");
    }
    if let Some(gc) = &gencost {
        for (i, r) in gc.iter().enumerate() {
            let n = r[3].max(0.0) as usize;
            if r[0] == 2.0 && r.len() < 4 + n {
                return Err(CaseError::UnsupportedCost(i, format!("{n} coefficients declared, row too short")));
            }
        }
    }

    let ids: std::collections::HashSet<i64> = bus.iter().map(|r| r[0] as i64).collect();
    for (row, r) in gen.iter().enumerate() {
        if !ids.contains(&(r[0] as i64)) {
            return Err(CaseError::UnknownBus { table: "gen", row, bus: r[0] as i64 });
        }
    }
    for (row, r) in branch.iter().enumerate() {
        for &b in &r[..2] {
            if !ids.contains(&(b as i64)) {
                return Err(CaseError::UnknownBus { table: "branch", row, bus: b as i64 });
            }
        }
    }
    Ok(RawCase { base_mva, bus, gen, branch, gencost })
}

/// Case files shipped with the crate, by name.
pub fn bundled_case(name: &str) -> Option<&'static str> {
    match name {
        "case14" => Some(include_str!("../data/case14.m")),
        "case300" => Some(include_str!("../data/case300.m")),
        _ => None,
    }
}

/// Parse a case from a path, or from a bundled case when `spec` is
/// `bundled:<name>`.
pub fn load_case(spec: &str) -> Result<RawCase, CaseError> {
    if let Some(name) = spec.strip_prefix("bundled:") {
        let text = bundled_case(name).ok_or_else(|| CaseError::Io { path: spec.into(), msg: "no such bundled case".into() })?;
        return parse_matpower(text);
    }
    let text = std::fs::read_to_string(spec).map_err(|e| CaseError::Io { path: spec.into(), msg: e.to_string() })?;
    parse_matpower(&text)
}

/// Render a [`RawCase`] in MATPOWER v2 syntax. `parse_matpower` inverts it exactly.
pub fn to_matpower(raw: &RawCase, name: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "function mpc = {name}");
    let _ = writeln!(out, "mpc.version = '2';");
    let _ = writeln!(out, "mpc.baseMVA = {:?};", raw.base_mva);
    let mut matrix = |label: &str, rows: &[Vec<f64>]| {
        let _ = writeln!(out, "mpc.{label} = [");
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| format_number(*v)).collect();
            let _ = writeln!(out, "\t{};", cells.join("\t"));
        }
        let _ = writeln!(out, "];");
    };
    matrix("bus", &raw.bus);
    matrix("gen", &raw.gen);
    matrix("branch", &raw.branch);
    if let Some(gc) = &raw.gencost {
        matrix("gencost", gc);
    }
    out
}

fn format_number(v: f64) -> String {
    if v == f64::INFINITY {
        "Inf".into()
    } else if v == f64::NEG_INFINITY {
        "-Inf".into()
    } else {
        format!("{v:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BusKind {
    Pq,
    Pv,
    Slack,
}

/// Per-unit bus data. Voltage bounds are on the squared magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: i64,
    pub kind: BusKind,
    pub pd: f64,
    pub qd: f64,
    /// Shunt conductance and susceptance at 1 p.u. voltage.
    pub gs: f64,
    pub bs: f64,
    pub v_min: f64,
    pub v_max: f64,
}

/// Per-unit generator. Cost is `c2·P² + c1·P + c0` with `P` in p.u.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// Voltage-magnitude setpoint (not squared).
    pub v_set: f64,
    /// Dispatch stored in the case file.
    pub p0: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Per-unit branch with MATPOWER's tap model (tap on the from side).
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    /// Total line-charging susceptance.
    pub b: f64,
    /// Active-flow limit; `+∞` when unlimited.
    pub limit: f64,
    pub tap: f64,
    /// Phase shift in radians.
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub gens: Vec<Generator>,
    pub branches: Vec<Branch>,
    pub slack: usize,
    /// MATPOWER bus id to internal index.
    pub index_of: HashMap<i64, usize>,
}

/// Preprocessing knobs for [`to_network`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOptions {
    /// Limit in p.u. for branches whose rating is zero or missing.
    pub default_line_limit: f64,
    /// Accept branches with negative reactance (series-compensated lines).
    pub allow_negative_reactance: bool,
    /// Rate unrated branches by the current their admittance carries at a
    /// 60° angle difference with both ends at `v_max`. Takes precedence over
    /// `default_line_limit`.
    pub derive_missing_limits: bool,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        Self { default_line_limit: f64::INFINITY, allow_negative_reactance: false, derive_missing_limits: false }
    }
}

// MATPOWER column indices.
const BUS_I: usize = 0;
const BUS_TYPE: usize = 1;
const PD: usize = 2;
const QD: usize = 3;
const GS: usize = 4;
const BS: usize = 5;
const VMAX: usize = 11;
const VMIN: usize = 12;
const GEN_BUS: usize = 0;
const PG: usize = 1;
const QMAX: usize = 3;
const QMIN: usize = 4;
const VG: usize = 5;
const GEN_STATUS: usize = 7;
const PMAX: usize = 8;
const PMIN: usize = 9;
const F_BUS: usize = 0;
const T_BUS: usize = 1;
const BR_R: usize = 2;
const BR_X: usize = 3;
const BR_B: usize = 4;
const RATE_A: usize = 5;
const TAP: usize = 8;
const SHIFT: usize = 9;
const BR_STATUS: usize = 10;

/// Convert to a validated per-unit model with contiguous bus indices.
///
/// Out-of-service generators and branches are dropped; isolated buses
/// (type 4) are dropped together with everything attached to them.
pub fn to_network(raw: &RawCase, opts: &NetworkOptions) -> Result<NetworkCase, CaseError> {
    let base = raw.base_mva;
    let mut index_of = HashMap::new();
    let mut buses = Vec::new();
    for r in &raw.bus {
        let id = r[BUS_I] as i64;
        let kind = match r[BUS_TYPE] as i64 {
            1 => BusKind::Pq,
            2 => BusKind::Pv,
            3 => BusKind::Slack,
            4 => continue,
            t => {
                return Err(CaseError::Syntax { line: 0, msg: format!("bus {id} has unknown type {t}") });
            }
        };
        if index_of.insert(id, buses.len()).is_some() {
            return Err(CaseError::DuplicateBus(id));
        }
        buses.push(Bus {
            id,
            kind,
            pd: r[PD] / base,
            qd: r[QD] / base,
            gs: r[GS] / base,
            bs: r[BS] / base,
            v_min: r[VMIN] * r[VMIN],
            v_max: r[VMAX] * r[VMAX],
        });
    }
    let slacks: Vec<usize> = (0..buses.len()).filter(|&i| buses[i].kind == BusKind::Slack).collect();
    if slacks.len() != 1 {
        return Err(CaseError::SlackCount(slacks.len()));
    }

    let costs = raw.gencost.as_deref().unwrap_or(&[]);
    if !costs.is_empty() && costs.len() < raw.gen.len() {
        return Err(CaseError::UnsupportedCost(costs.len(), "fewer gencost rows than generators".into()));
    }
    if costs.len() > raw.gen.len() {
        warn!("ignoring {} reactive gencost rows", costs.len() - raw.gen.len());
    }
    let mut gens = Vec::new();
    for (g, r) in raw.gen.iter().enumerate() {
        if r[GEN_STATUS] <= 0.0 {
            continue;
        }
        let Some(&bus) = index_of.get(&(r[GEN_BUS] as i64)) else { continue };
        let (c0, c1, c2) = match costs.get(g) {
            None => (0.0, 0.0, 0.0),
            Some(c) => polynomial_cost(g, c)?,
        };
        if c2 < 0.0 {
            return Err(CaseError::NonconvexCost(g));
        }
        let gen = Generator {
            bus,
            p_min: r[PMIN] / base,
            p_max: r[PMAX] / base,
            q_min: r[QMIN] / base,
            q_max: r[QMAX] / base,
            v_set: r[VG],
            p0: r[PG] / base,
            c0,
            c1: c1 * base,
            c2: c2 * base * base,
        };
        if gen.p_min > gen.p_max || gen.q_min > gen.q_max {
            return Err(CaseError::InconsistentLimits(g));
        }
        gens.push(gen);
    }

    let mut branches = Vec::new();
    for r in &raw.branch {
        if r[BR_STATUS] <= 0.0 {
            continue;
        }
        let (Some(&from), Some(&to)) = (index_of.get(&(r[F_BUS] as i64)), index_of.get(&(r[T_BUS] as i64))) else {
            continue;
        };
        let x = r[BR_X];
        if x == 0.0 || (x < 0.0 && !opts.allow_negative_reactance) {
            return Err(CaseError::NonpositiveReactance { from: r[F_BUS] as i64, to: r[T_BUS] as i64, x });
        }
        let limit = if r[RATE_A] > 0.0 {
            r[RATE_A] / base
        } else if opts.derive_missing_limits {
            let (vf, vt) = (buses[from].v_max.sqrt(), buses[to].v_max.sqrt());
            let drop = (vf * vf + vt * vt - 2.0 * vf * vt * std::f64::consts::FRAC_PI_3.cos()).sqrt();
            vf.max(vt) * drop / r[BR_R].hypot(x)
        } else {
            opts.default_line_limit
        };
        branches.push(Branch {
            from,
            to,
            r: r[BR_R],
            x,
            b: r[BR_B],
            limit,
            tap: if r[TAP] == 0.0 { 1.0 } else { r[TAP] },
            shift: r[SHIFT].to_radians(),
        });
    }

    Ok(NetworkCase { base_mva: base, buses, gens, branches, slack: slacks[0], index_of })
}

/// `(c0, c1, c2)` in $/MW units from a polynomial gencost row.
fn polynomial_cost(g: usize, row: &[f64]) -> Result<(f64, f64, f64), CaseError> {
    if row[0] != 2.0 {
        return Err(CaseError::UnsupportedCost(g, "only polynomial (model 2) costs are supported".into()));
    }
    let n = row[3] as usize;
    if n > 3 {
        return Err(CaseError::UnsupportedCost(g, format!("polynomial of degree {} exceeds 2", n - 1)));
    }
    let coef = &row[4..4 + n];
    // Highest degree first.
    let get = |deg: usize| if deg < n { coef[n - 1 - deg] } else { 0.0 };
    Ok((get(0), get(1), get(2)))
}

impl NetworkCase {
    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn n_gen(&self) -> usize {
        self.gens.len()
    }

    pub fn n_branch(&self) -> usize {
        self.branches.len()
    }

    pub fn pd(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_bus(), self.buses.iter().map(|b| b.pd))
    }

    pub fn qd(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_bus(), self.buses.iter().map(|b| b.qd))
    }

    /// Generators attached to each bus.
    pub fn gens_at(&self) -> Vec<Vec<usize>> {
        let mut at = vec![Vec::new(); self.n_bus()];
        for (g, gen) in self.gens.iter().enumerate() {
            at[gen.bus].push(g);
        }
        at
    }

    /// Generators at the slack bus.
    pub fn slack_gens(&self) -> Vec<usize> {
        (0..self.n_gen()).filter(|&g| self.gens[g].bus == self.slack).collect()
    }

    /// Bus index for a MATPOWER bus id.
    pub fn bus_index(&self, id: i64) -> Option<usize> {
        self.index_of.get(&id).copied()
    }

    /// Human-readable bus label used in CSV headers.
    pub fn bus_label(&self, i: usize) -> String {
        format!("bus{}", self.buses[i].id)
    }

    /// Replace the limit of every branch that has none.
    pub fn set_default_line_limit(&mut self, limit: f64) {
        for br in &mut self.branches {
            if br.limit.is_infinite() {
                br.limit = limit;
            }
        }
    }
}

/// VRE units and the AGC participation that compensates their errors.
#[derive(Debug, Clone, PartialEq)]
pub struct VreFleet {
    pub buses: Vec<usize>,
    /// Forecast output in p.u.
    pub forecasts: DVector<f64>,
    /// Reactive-to-active error ratio.
    pub gamma: f64,
    /// Per-bus participation Ω; sums to one.
    pub omega: DVector<f64>,
    /// Per-generator share of the bus participation.
    pub alpha: DVector<f64>,
}

impl VreFleet {
    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }

    /// `n_bus × n_vre` incidence of VRE units.
    pub fn incidence(&self, n_bus: usize) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(n_bus, self.len());
        for (v, &b) in self.buses.iter().enumerate() {
            m[(b, v)] += 1.0;
        }
        m
    }

    /// Forecast injection per bus.
    pub fn injection(&self, n_bus: usize) -> DVector<f64> {
        self.incidence(n_bus) * &self.forecasts
    }
}

/// Participation proportional to generator capacity `P̄`.
pub fn build_fleet(
    case: &NetworkCase,
    vre_buses: &[usize],
    forecasts: &[f64],
    gamma: f64,
) -> Result<VreFleet, CaseError> {
    if vre_buses.len() != forecasts.len() {
        return Err(CaseError::Fleet(format!(
            "{} VRE buses but {} forecasts",
            vre_buses.len(),
            forecasts.len()
        )));
    }
    if let Some(&b) = vre_buses.iter().find(|&&b| b >= case.n_bus()) {
        return Err(CaseError::Fleet(format!("VRE bus index {b} out of range")));
    }
    if forecasts.iter().any(|&p| p.is_nan() || p <= 0.0) {
        return Err(CaseError::Fleet("forecasts must be positive".into()));
    }
    let total: f64 = case.gens.iter().map(|g| g.p_max.max(0.0)).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(CaseError::Fleet("no conventional generator with positive capacity".into()));
    }
    let alpha = DVector::from_iterator(case.n_gen(), case.gens.iter().map(|g| g.p_max.max(0.0) / total));
    let mut omega = DVector::zeros(case.n_bus());
    for (g, gen) in case.gens.iter().enumerate() {
        omega[gen.bus] += alpha[g];
    }
    Ok(VreFleet {
        buses: vre_buses.to_vec(),
        forecasts: DVector::from_row_slice(forecasts),
        gamma,
        omega,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TWO_BUS: &str = "\
function mpc = twobus
mpc.version = '2';
mpc.baseMVA = 100;
% a comment line
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;
\t2\t1\t50\t10\t0\t0\t1\t1\t0\t230\t1\t1.1\t0.9;   % load bus
];
mpc.gen = [
\t1\t0\t0\t100\t-100\t1\t100\t1\t200\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;
];
mpc.branch = [
\t1\t2\t0.01\t0.1\t0\t150\t0\t0\t0\t0\t1\t-360\t360;
];
mpc.gencost = [
\t2\t0\t0\t3\t0.01\t20\t5;
];
";

    #[test]
    fn parses_fixture() {
        let raw = parse_matpower(TWO_BUS).unwrap();
        assert_eq!(raw.bus.len(), 2);
        assert_eq!(raw.gen.len(), 1);
        assert_eq!(raw.branch[0][5], 150.0);
        assert_eq!(raw.gencost.as_ref().unwrap()[0][4..], [0.01, 20.0, 5.0]);
    }

    #[test]
    fn round_trip() {
        let raw = parse_matpower(TWO_BUS).unwrap();
        let text = to_matpower(&raw, "twobus");
        assert_eq!(parse_matpower(&text).unwrap(), raw);
    }

    #[test]
    fn missing_bus_matrix() {
        let text = TWO_BUS.replace("mpc.bus = [", "mpc.notbus = [");
        assert_eq!(parse_matpower(&text), Err(CaseError::MissingMatrix("bus")));
        assert!(CaseError::MissingMatrix("bus").to_string().contains("missing mandatory matrix"));
    }

    #[test]
    fn ragged_rows() {
        let text = TWO_BUS.replace("\t2\t1\t50\t10\t0", "\t2\t1\t50\t10");
        assert!(matches!(parse_matpower(&text), Err(CaseError::Ragged { .. })));
    }

    #[test]
    fn syntax_error_has_line() {
        let text = TWO_BUS.replace("\t2\t1\t50", "\t2\t1\tfifty");
        match parse_matpower(&text) {
            Err(CaseError::Syntax { line, .. }) => assert_eq!(line, 7),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn scientific_notation_and_commas() {
        let text = TWO_BUS.replace("\t2\t1\t50\t10", "\t2,\t1,\t5e1,\t1.0E+1");
        let raw = parse_matpower(&text).unwrap();
        assert_eq!(raw.bus[1][2], 50.0);
        assert_eq!(raw.bus[1][3], 10.0);
    }

    #[test]
    fn per_unit_conversion() {
        let net = to_network(&parse_matpower(TWO_BUS).unwrap(), &NetworkOptions::default()).unwrap();
        assert_eq!(net.buses[1].pd, 0.5);
        assert_eq!(net.gens[0].p_max, 2.0);
        assert_eq!(net.branches[0].limit, 1.5);
        assert!((net.buses[0].v_max - 1.21).abs() < 1e-15);
        assert!((net.gens[0].c2 - 100.0).abs() < 1e-12);
        assert!((net.gens[0].c1 - 2000.0).abs() < 1e-12);
        assert_eq!(net.gens[0].c0, 5.0);
    }

    #[test]
    fn two_slacks_rejected() {
        let mut raw = parse_matpower(TWO_BUS).unwrap();
        raw.bus[1][1] = 3.0;
        assert_eq!(to_network(&raw, &NetworkOptions::default()), Err(CaseError::SlackCount(2)));
    }

    #[test]
    fn negative_reactance_needs_opt_in() {
        let mut raw = parse_matpower(TWO_BUS).unwrap();
        raw.branch[0][3] = -0.1;
        assert!(to_network(&raw, &NetworkOptions::default()).is_err());
        let opts = NetworkOptions { allow_negative_reactance: true, ..Default::default() };
        assert!(to_network(&raw, &opts).is_ok());
    }

    #[test]
    fn negative_quadratic_cost_rejected() {
        let mut raw = parse_matpower(TWO_BUS).unwrap();
        raw.gencost.as_mut().unwrap()[0][4] = -0.01;
        assert_eq!(to_network(&raw, &NetworkOptions::default()), Err(CaseError::NonconvexCost(0)));
    }

    #[test]
    fn missing_rating_uses_default() {
        let mut raw = parse_matpower(TWO_BUS).unwrap();
        raw.branch[0][5] = 0.0;
        assert!(to_network(&raw, &NetworkOptions::default()).unwrap().branches[0].limit.is_infinite());
        let opts = NetworkOptions { default_line_limit: 0.7, ..Default::default() };
        assert_eq!(to_network(&raw, &opts).unwrap().branches[0].limit, 0.7);
    }

    #[test]
    fn out_of_service_dropped() {
        let mut raw = parse_matpower(TWO_BUS).unwrap();
        raw.branch[0][10] = 0.0;
        assert_eq!(to_network(&raw, &NetworkOptions::default()).unwrap().n_branch(), 0);
    }

    #[test]
    fn fleet_shares() {
        let mut raw = parse_matpower(TWO_BUS).unwrap();
        let mut second = raw.gen[0].clone();
        second[0] = 2.0;
        raw.gen[0][8] = 300.0;
        second[8] = 100.0;
        raw.gen.push(second);
        raw.gencost = None;
        let net = to_network(&raw, &NetworkOptions::default()).unwrap();
        let fleet = build_fleet(&net, &[1], &[0.2], 0.1).unwrap();
        assert_eq!(fleet.omega.as_slice(), &[0.75, 0.25]);
        assert!(build_fleet(&net, &[1], &[-0.2], 0.1).is_err());
        assert!(build_fleet(&net, &[5], &[0.2], 0.1).is_err());
    }

    #[test]
    fn single_generator_takes_everything() {
        let net = to_network(&parse_matpower(TWO_BUS).unwrap(), &NetworkOptions::default()).unwrap();
        let fleet = build_fleet(&net, &[1], &[0.2], 0.1).unwrap();
        assert_eq!(fleet.omega.as_slice(), &[1.0, 0.0]);
    }
}
