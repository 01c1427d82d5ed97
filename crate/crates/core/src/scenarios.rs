//! Forecast-error scenarios: correlated Gaussian draws with optional
//! per-component clipping, plus a CSV format that records where a set came
//! from.
//!
//! Row `r` of a set generated with seed `s` is a pure function of
//! `(spec, s, r)`: each row reads its own ChaCha20 stream, so generation can
//! be sharded across threads without changing a single bit.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Identifies the sampling algorithm in file provenance. Bump on any change
/// that alters generated values.
pub const ALGORITHM_ID: &str = "chacha20-row-stream/inverse-normal-cdf/cholesky/v1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario spec: {0}")]
    InvalidSpec(String),
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("no scenarios")]
    Empty,
    #[error("row {row}, column {col}: cannot parse {value:?} as a number")]
    Parse { row: usize, col: usize, value: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("row {row}, column {col}: value {value} outside clip bounds [{lo}, {hi}]")]
    OutOfBounds { row: usize, col: usize, value: f64, lo: f64, hi: f64 },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Zero-mean Gaussian forecast errors with `Σᵢᵢ = ζ pᵢ` and a common
/// correlation `ρ`, clipped to `[−pᵢ, 2pᵢ]` when `clip` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    /// Column labels, one per VRE unit.
    pub labels: Vec<String>,
    pub forecasts: Vec<f64>,
    pub zeta: f64,
    pub rho: f64,
    pub clip: bool,
}

impl GaussianSpec {
    pub fn new(
        labels: Vec<String>,
        forecasts: Vec<f64>,
        zeta: f64,
        rho: f64,
        clip: bool,
    ) -> Result<Self, ScenarioError> {
        let spec = Self { labels, forecasts, zeta, rho, clip };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        if self.forecasts.is_empty() {
            return Err(ScenarioError::InvalidSpec("no VRE units".into()));
        }
        if self.labels.len() != self.forecasts.len() {
            return Err(ScenarioError::InvalidSpec(format!(
                "{} labels for {} forecasts",
                self.labels.len(),
                self.forecasts.len()
            )));
        }
        if self.forecasts.iter().any(|&p| !p.is_finite() || p <= 0.0) {
            return Err(ScenarioError::InvalidSpec("forecasts must be positive".into()));
        }
        if !self.zeta.is_finite() || self.zeta <= 0.0 {
            return Err(ScenarioError::InvalidSpec(format!("zeta = {} must be positive", self.zeta)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(ScenarioError::InvalidSpec(format!("rho = {} must lie in [0, 1)", self.rho)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.forecasts.len()
    }

    /// Clip interval of component `i` (infinite when clipping is off).
    pub fn bounds(&self, i: usize) -> (f64, f64) {
        if self.clip {
            (-self.forecasts[i], 2.0 * self.forecasts[i])
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        }
    }

    /// Hex SHA-256 over a canonical rendering of the spec.
    pub fn digest(&self) -> String {
        let mut text = String::new();
        let _ = write!(text, "labels={:?};forecasts=", self.labels);
        for p in &self.forecasts {
            let _ = write!(text, "{:e},", p);
        }
        let _ = write!(text, ";zeta={:e};rho={:e};clip={}", self.zeta, self.rho, self.clip);
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// `Σᵢᵢ = ζ pᵢ`, `Σᵢⱼ = ρ √Σᵢᵢ √Σⱼⱼ`.
pub fn build_covariance(spec: &GaussianSpec) -> Result<DMatrix<f64>, ScenarioError> {
    spec.validate()?;
    let n = spec.dim();
    let sd: Vec<f64> = spec.forecasts.iter().map(|p| (spec.zeta * p).sqrt()).collect();
    let sigma = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            spec.zeta * spec.forecasts[i]
        } else {
            spec.rho * sd[i] * sd[j]
        }
    });
    if Cholesky::new(sigma.clone()).is_none() {
        return Err(ScenarioError::NotPositiveDefinite);
    }
    Ok(sigma)
}

/// Where a scenario set came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub algorithm: Option<String>,
    pub spec_digest: Option<String>,
}

/// `S × n_vre` forecast errors in p.u., one scenario per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub labels: Vec<String>,
    pub xi: DMatrix<f64>,
    pub provenance: Provenance,
}

impl ScenarioSet {
    pub fn new(labels: Vec<String>, xi: DMatrix<f64>) -> Result<Self, ScenarioError> {
        if xi.nrows() == 0 {
            return Err(ScenarioError::Empty);
        }
        if labels.len() != xi.ncols() {
            return Err(ScenarioError::Dimension(format!(
                "{} labels for {} columns",
                labels.len(),
                xi.ncols()
            )));
        }
        Ok(Self { labels, xi, provenance: Provenance::default() })
    }

    pub fn len(&self) -> usize {
        self.xi.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.xi.ncols()
    }

    pub fn scenario(&self, j: usize) -> DVector<f64> {
        self.xi.row(j).transpose()
    }

    /// Total error `Σᵢ ξᵢ` of each scenario.
    pub fn totals(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.xi.row(j).sum()).collect()
    }

    /// Scenario set with every error set to zero (same shape and labels).
    pub fn zeros_like(&self) -> Self {
        Self {
            labels: self.labels.clone(),
            xi: DMatrix::zeros(self.len(), self.dim()),
            provenance: Provenance::default(),
        }
    }

    /// Check every entry against the spec's clip bounds.
    pub fn check_bounds(&self, spec: &GaussianSpec) -> Result<(), ScenarioError> {
        if spec.dim() != self.dim() {
            return Err(ScenarioError::Dimension(format!(
                "spec has {} components, scenarios have {}",
                spec.dim(),
                self.dim()
            )));
        }
        for col in 0..self.dim() {
            let (lo, hi) = spec.bounds(col);
            for row in 0..self.len() {
                let value = self.xi[(row, col)];
                if value < lo || value > hi {
                    return Err(ScenarioError::OutOfBounds { row, col, value, lo, hi });
                }
            }
        }
        Ok(())
    }
}

/// Uniform on the open interval (0, 1) from the top 53 bits.
fn open_unit(rng: &mut ChaCha20Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn row_rng(seed: u64, row: usize) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(row as u64);
    rng
}

/// Draw `s` scenarios. Output depends only on `(spec, s, seed)`.
pub fn sample(spec: &GaussianSpec, s: usize, seed: u64) -> Result<ScenarioSet, ScenarioError> {
    if s == 0 {
        return Err(ScenarioError::Empty);
    }
    let sigma = build_covariance(spec)?;
    let l = Cholesky::new(sigma).ok_or(ScenarioError::NotPositiveDefinite)?.unpack();
    let n = spec.dim();
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let bounds: Vec<(f64, f64)> = (0..n).map(|i| spec.bounds(i)).collect();
    let rows: Vec<Vec<f64>> = (0..s)
        .into_par_iter()
        .map(|r| {
            let mut rng = row_rng(seed, r);
            let z = DVector::from_fn(n, |_, _| std_normal.inverse_cdf(open_unit(&mut rng)));
            let x = &l * z;
            x.iter().zip(&bounds).map(|(&v, &(lo, hi))| v.clamp(lo, hi)).collect()
        })
        .collect();
    let xi = DMatrix::from_fn(s, n, |r, c| rows[r][c]);
    Ok(ScenarioSet {
        labels: spec.labels.clone(),
        xi,
        provenance: Provenance {
            seed: Some(seed),
            algorithm: Some(ALGORITHM_ID.to_string()),
            spec_digest: Some(spec.digest()),
        },
    })
}

/// 17 significant digits: enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn provenance_line(p: &Provenance) -> String {
    let mut parts = vec!["drcc-scenarios".to_string()];
    if let Some(seed) = p.seed {
        parts.push(format!("seed={seed}"));
    }
    if let Some(a) = &p.algorithm {
        parts.push(format!("algorithm={a}"));
    }
    if let Some(d) = &p.spec_digest {
        parts.push(format!("spec_sha256={d}"));
    }
    format!("# {}\n", parts.join(" "))
}

fn parse_provenance(line: &str) -> Provenance {
    let mut p = Provenance::default();
    for token in line.trim_start_matches('#').split_whitespace() {
        if let Some((key, value)) = token.split_once('=') {
            match key {
                "seed" => p.seed = value.parse().ok(),
                "algorithm" => p.algorithm = Some(value.to_string()),
                "spec_sha256" => p.spec_digest = Some(value.to_string()),
                _ => {}
            }
        }
    }
    p
}

/// Render a scenario set as CSV text, provenance comment first.
pub fn to_csv_string(set: &ScenarioSet) -> Result<String, ScenarioError> {
    let mut out = provenance_line(&set.provenance);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&set.labels)?;
    for r in 0..set.len() {
        w.write_record(set.xi.row(r).iter().map(|&v| fmt_f64(v)))?;
    }
    let bytes = w.into_inner().map_err(|e| ScenarioError::Io(e.into_error()))?;
    out.push_str(std::str::from_utf8(&bytes).expect("csv writer emits utf-8"));
    Ok(out)
}

pub fn save_csv(set: &ScenarioSet, path: &Path) -> Result<(), ScenarioError> {
    fs::write(path, to_csv_string(set)?)?;
    Ok(())
}

/// Parse scenario CSV text. Clip bounds are checked only when a spec is given.
pub fn from_csv_str(text: &str, spec: Option<&GaussianSpec>) -> Result<ScenarioSet, ScenarioError> {
    let mut provenance = Provenance::default();
    for line in BufReader::new(text.as_bytes()).lines() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if t.starts_with('#') && t.contains("drcc-scenarios") {
            provenance = parse_provenance(t);
        }
        if !t.starts_with('#') {
            break;
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let labels: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if labels.is_empty() || labels.iter().all(String::is_empty) {
        return Err(ScenarioError::Empty);
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != labels.len() {
            return Err(ScenarioError::Dimension(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                labels.len()
            )));
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| ScenarioError::Parse {
                row,
                col,
                value: cell.to_string(),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(ScenarioError::Empty);
    }
    let xi = DMatrix::from_row_slice(rows, labels.len(), &values);
    let set = ScenarioSet { labels, xi, provenance };
    if let Some(spec) = spec {
        set.check_bounds(spec)?;
    }
    Ok(set)
}

pub fn load_csv(path: &Path, spec: Option<&GaussianSpec>) -> Result<ScenarioSet, ScenarioError> {
    from_csv_str(&fs::read_to_string(path)?, spec)
}

/// Per-component sample moments and pairwise correlations.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioStats {
    pub count: usize,
    pub mean: Vec<f64>,
    pub std_dev: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub correlation: DMatrix<f64>,
}

pub fn stats(set: &ScenarioSet) -> ScenarioStats {
    let (s, n) = set.xi.shape();
    let mean: Vec<f64> = (0..n).map(|c| set.xi.column(c).mean()).collect();
    let centered = DMatrix::from_fn(s, n, |r, c| set.xi[(r, c)] - mean[c]);
    let denom = (s.max(2) - 1) as f64;
    let cov = centered.tr_mul(&centered) / denom;
    let std_dev: Vec<f64> = (0..n).map(|c| cov[(c, c)].sqrt()).collect();
    let correlation = DMatrix::from_fn(n, n, |i, j| {
        let d = std_dev[i] * std_dev[j];
        if d > 0.0 {
            cov[(i, j)] / d
        } else if i == j {
            1.0
        } else {
            0.0
        }
    });
    ScenarioStats {
        count: s,
        mean,
        std_dev,
        min: (0..n).map(|c| set.xi.column(c).min()).collect(),
        max: (0..n).map(|c| set.xi.column(c).max()).collect(),
        correlation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tutorial_spec() -> GaussianSpec {
        GaussianSpec::new(vec!["bus2".into(), "bus3".into()], vec![0.2, 0.2], 0.05, 0.2, true).unwrap()
    }

    #[test]
    fn covariance_entries() {
        let sigma = build_covariance(&tutorial_spec()).unwrap();
        assert!((sigma[(0, 0)] - 0.01).abs() < 1e-15);
        assert!((sigma[(0, 1)] - 0.002).abs() < 1e-15);
        assert_eq!(sigma[(0, 1)], sigma[(1, 0)]);
    }

    #[test]
    fn uncorrelated_covariance_is_diagonal() {
        let spec = GaussianSpec::new(vec!["a".into(), "b".into()], vec![0.1, 0.3], 0.2, 0.0, false).unwrap();
        let sigma = build_covariance(&spec).unwrap();
        assert_eq!(sigma[(0, 1)], 0.0);
        assert!((sigma[(1, 1)] - 0.06).abs() < 1e-15);
    }

    #[test]
    fn equicorrelation_min_eigenvalue() {
        let n = 4;
        let spec = GaussianSpec::new((0..n).map(|i| format!("v{i}")).collect(), vec![0.5; n], 0.1, 0.2, false).unwrap();
        let eig = build_covariance(&spec).unwrap().symmetric_eigenvalues();
        assert!((eig.min() - 0.05 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(GaussianSpec::new(vec!["a".into()], vec![0.1], 0.0, 0.2, true).is_err());
        assert!(GaussianSpec::new(vec!["a".into()], vec![0.1], 0.1, 1.0, true).is_err());
        assert!(GaussianSpec::new(vec!["a".into()], vec![-0.1], 0.1, 0.2, true).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = tutorial_spec();
        let a = sample(&spec, 50, 7).unwrap();
        let b = sample(&spec, 50, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.xi, sample(&spec, 50, 8).unwrap().xi);
    }

    #[test]
    fn rows_do_not_depend_on_count() {
        let spec = tutorial_spec();
        let short = sample(&spec, 10, 3).unwrap();
        let long = sample(&spec, 100, 3).unwrap();
        assert_eq!(short.xi, long.xi.rows(0, 10).into_owned());
    }

    #[test]
    fn clipping_holds() {
        let spec = GaussianSpec::new(vec!["a".into(), "b".into()], vec![0.01, 0.02], 0.5, 0.2, true).unwrap();
        let set = sample(&spec, 2000, 1).unwrap();
        set.check_bounds(&spec).unwrap();
        let lo = set.xi.column(0).min();
        assert_eq!(lo, -0.01, "heavy clipping should hit the lower bound exactly");
    }

    #[test]
    fn vanishing_variance() {
        let spec = GaussianSpec::new(vec!["a".into()], vec![0.2], 1e-12, 0.0, true).unwrap();
        assert!(sample(&spec, 1000, 9).unwrap().xi.amax() <= 1e-5);
    }

    #[test]
    fn csv_round_trip() {
        let set = sample(&tutorial_spec(), 20, 11).unwrap();
        let text = to_csv_string(&set).unwrap();
        assert!(text.starts_with("# drcc-scenarios seed=11"));
        let back = from_csv_str(&text, Some(&tutorial_spec())).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn csv_errors() {
        match from_csv_str("a,b\n1,x\n", None) {
            Err(ScenarioError::Parse { row: 0, col: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(from_csv_str("", None), Err(ScenarioError::Empty)));
        assert!(matches!(from_csv_str("a,b\n", None), Err(ScenarioError::Empty)));
        assert!(from_csv_str("a,b\n1,2,3\n", None).is_err());
    }
}
