//! Monte Carlo comparison of 2SLS and the ridge path estimator over a grid of
//! instrument strengths, sample sizes and priors, with CSV and JSON output.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{ridge_path_point, tsls, RegularizationClass, RidgeConfig};
use crate::linalg::smallest_singular_value;
use crate::model::{generate_dataset, Dataset, ModelSpec};
use crate::rng::combine;

/// A cell fails when more than this fraction of its replications error.
pub const MAX_ERROR_RATE: f64 = 0.001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MCSpec {
    pub deltas: Vec<f64>,
    pub ns: Vec<usize>,
    /// Sample sizes run with `large_n_reps` replications.
    pub large_ns: Vec<usize>,
    pub priors: Vec<Vec<f64>>,
    pub reps: usize,
    pub large_n_reps: usize,
    /// Extra sample sizes for the singular value table only.
    pub singular_ns: Vec<usize>,
    pub tau: f64,
    pub base_seed: u64,
}

impl Default for MCSpec {
    /// The 48-cell design with 10,000 replications per cell.
    fn default() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            deltas: vec![0.1, 0.25, 0.5, 1.0],
            ns: vec![25, 50, 250, 500],
            large_ns: Vec::new(),
            priors: vec![vec![s, s], vec![2.0 * s, 2.0 * s], vec![3.0 * s, 3.0 * s]],
            reps: 10_000,
            large_n_reps: 1_000,
            singular_ns: Vec::new(),
            tau: 0.7,
            base_seed: 20_190_301,
        }
    }
}

impl MCSpec {
    /// The default design plus the `n = 10,000` cells and the additional
    /// sample sizes of the singular value table.
    pub fn full() -> Self {
        Self {
            large_ns: vec![10_000],
            singular_ns: vec![2_500, 5_000],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 || (!self.large_ns.is_empty() && self.large_n_reps == 0) {
            return Err(Error::InvalidConfig("reps must be at least 1".into()));
        }
        if self.deltas.is_empty() || self.priors.is_empty() || (self.ns.is_empty() && self.large_ns.is_empty()) {
            return Err(Error::InvalidConfig("design grid is empty".into()));
        }
        if self.priors.iter().any(|p| p.len() != 2) {
            return Err(Error::InvalidConfig("priors must have two coordinates".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau = {} must lie in (0, 1)", self.tau)));
        }
        Ok(())
    }

    /// Cells ordered by delta, then sample size, then prior.
    pub fn cells(&self) -> Vec<Cell> {
        let mut sizes: Vec<(usize, usize)> = self.ns.iter().map(|&n| (n, self.reps)).collect();
        sizes.extend(self.large_ns.iter().map(|&n| (n, self.large_n_reps)));
        let mut cells = Vec::new();
        for &delta in &self.deltas {
            for &(n, reps) in &sizes {
                for (j, prior) in self.priors.iter().enumerate() {
                    cells.push(Cell { delta, n, prior_index: j + 1, prior: prior.clone(), reps });
                }
            }
        }
        cells
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// One `(delta, n, prior)` combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub delta: f64,
    pub n: usize,
    /// One-based position of the prior in [`MCSpec::priors`].
    pub prior_index: usize,
    pub prior: Vec<f64>,
    pub reps: usize,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("d{:.2}_n{}_p{}", self.delta, self.n, self.prior_index)
    }

    pub fn model_spec(&self, tau: f64) -> Result<ModelSpec> {
        let prior: [f64; 2] = self
            .prior
            .as_slice()
            .try_into()
            .map_err(|_| Error::InvalidConfig("priors must have two coordinates".into()))?;
        ModelSpec::simulation_design(self.delta, self.n, prior, tau)
    }

    /// Seed of replication `rep`.
    pub fn rep_seed(&self, base_seed: u64, rep: usize) -> u64 {
        combine(&[base_seed, self.delta.to_bits(), self.n as u64, self.prior_index as u64, rep as u64])
    }
}

/// Outcome of one replication. Estimates are absent when the replication
/// hit a singular design.
#[derive(Clone, Debug, PartialEq)]
pub struct RepRecord {
    pub rep: usize,
    pub seed: u64,
    pub beta_2sls: Option<Vec<f64>>,
    pub beta_ridge: Option<Vec<f64>>,
    pub alpha_hat: Option<f64>,
    pub class: Option<RegularizationClass>,
    pub q_min: Option<f64>,
    /// Smallest singular value of `X'Z/n`.
    pub min_singular_value: f64,
    pub error: Option<String>,
}

impl RepRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

fn min_singular_value(data: &Dataset) -> f64 {
    smallest_singular_value(&(data.x().tr_mul(data.z()) / data.n() as f64))
}

fn replicate(spec: &ModelSpec, config: &RidgeConfig, rep: usize, seed: u64) -> Result<RepRecord> {
    let data = generate_dataset(spec, seed)?;
    let sv = min_singular_value(&data);
    let fits = tsls(&data.full()).and_then(|iv| Ok((iv, ridge_path_point(&data, config)?)));
    Ok(match fits {
        Ok((iv, rp)) => RepRecord {
            rep,
            seed,
            beta_2sls: Some(iv.beta),
            beta_ridge: Some(rp.beta_hat.iter().cloned().collect()),
            alpha_hat: Some(rp.alpha_hat),
            class: Some(RegularizationClass::classify(rp.alpha_hat, config.alpha_infinity)),
            q_min: Some(rp.q_min),
            min_singular_value: sv,
            error: None,
        },
        Err(e @ Error::SingularDesign { .. }) => RepRecord {
            rep,
            seed,
            beta_2sls: None,
            beta_ridge: None,
            alpha_hat: None,
            class: None,
            q_min: None,
            min_singular_value: sv,
            error: Some(e.to_string()),
        },
        Err(e) => return Err(e),
    })
}

/// Runs `reps` replications of `spec`, replication `r` using `seed_of(r)`.
/// Results are in replication order whatever the thread count.
pub fn run_design(spec: &ModelSpec, reps: usize, seed_of: impl Fn(usize) -> u64 + Sync) -> Result<Vec<RepRecord>> {
    let config = RidgeConfig::new(spec.tau, spec.prior.iter().cloned().collect());
    (0..reps)
        .into_par_iter()
        .map(|r| replicate(spec, &config, r, seed_of(r)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub bias: Vec<f64>,
    /// Standard deviation with divisor equal to the number of replications.
    pub sd: Vec<f64>,
    pub mse: Vec<f64>,
    /// Sum of the coordinate MSEs.
    pub combined_mse: f64,
}

impl EstimatorSummary {
    pub fn from_draws(draws: &[&[f64]], truth: &[f64]) -> Self {
        let n = draws.len() as f64;
        let k = truth.len();
        let mut bias = vec![0.0; k];
        let mut sd = vec![0.0; k];
        let mut mse = vec![0.0; k];
        for j in 0..k {
            let mean = draws.iter().map(|d| d[j]).sum::<f64>() / n;
            bias[j] = mean - truth[j];
            sd[j] = (draws.iter().map(|d| (d[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
            mse[j] = draws.iter().map(|d| (d[j] - truth[j]).powi(2)).sum::<f64>() / n;
        }
        let combined_mse = mse.iter().sum();
        Self { bias, sd, mse, combined_mse }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaDistribution {
    pub zero: usize,
    pub interior: usize,
    pub infinite: usize,
    pub p_zero: f64,
    pub p_interior: f64,
    pub p_infinite: f64,
}

impl AlphaDistribution {
    pub fn from_classes(classes: impl Iterator<Item = RegularizationClass>) -> Self {
        let (mut zero, mut interior, mut infinite) = (0, 0, 0);
        for c in classes {
            match c {
                RegularizationClass::None => zero += 1,
                RegularizationClass::Some => interior += 1,
                RegularizationClass::Infinite => infinite += 1,
            }
        }
        let total = (zero + interior + infinite).max(1) as f64;
        Self {
            zero,
            interior,
            infinite,
            p_zero: zero as f64 / total,
            p_interior: interior as f64 / total,
            p_infinite: infinite as f64 / total,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    /// Divisor equal to the number of values.
    pub sd: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl SummaryStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Self {
            mean,
            sd,
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub id: String,
    pub cell: Cell,
    pub errors: usize,
    pub failed: bool,
    pub tsls: EstimatorSummary,
    pub ridge: EstimatorSummary,
    pub alpha: AlphaDistribution,
    pub singular_value: SummaryStats,
}

pub fn summarize(cell: &Cell, truth: &[f64], records: &[RepRecord]) -> CellSummary {
    let ok: Vec<&RepRecord> = records.iter().filter(|r| r.is_ok()).collect();
    let errors = records.len() - ok.len();
    let iv: Vec<&[f64]> = ok.iter().filter_map(|r| r.beta_2sls.as_deref()).collect();
    let ridge: Vec<&[f64]> = ok.iter().filter_map(|r| r.beta_ridge.as_deref()).collect();
    let sv: Vec<f64> = records.iter().map(|r| r.min_singular_value).collect();
    CellSummary {
        id: cell.id(),
        cell: cell.clone(),
        errors,
        failed: errors as f64 > MAX_ERROR_RATE * records.len() as f64,
        tsls: EstimatorSummary::from_draws(&iv, truth),
        ridge: EstimatorSummary::from_draws(&ridge, truth),
        alpha: AlphaDistribution::from_classes(ok.iter().filter_map(|r| r.class)),
        singular_value: SummaryStats::from_values(&sv),
    }
}

#[derive(Clone, Debug)]
pub struct CellRun {
    pub summary: CellSummary,
    pub records: Vec<RepRecord>,
}

pub fn run_cell(cell: &Cell, tau: f64, base_seed: u64) -> Result<CellRun> {
    let spec = cell.model_spec(tau)?;
    let records = run_design(&spec, cell.reps, |r| cell.rep_seed(base_seed, r))?;
    let truth: Vec<f64> = spec.beta0.iter().cloned().collect();
    Ok(CellRun { summary: summarize(cell, &truth, &records), records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularRow {
    pub delta: f64,
    pub n: usize,
    pub reps: usize,
    pub stats: SummaryStats,
}

/// Distribution of the smallest singular value of `X'Z/n` (equivalently of
/// `-X'Z/n`) without running the estimators.
pub fn singular_value_summary(delta: f64, n: usize, tau: f64, reps: usize, base_seed: u64) -> Result<SingularRow> {
    let spec = ModelSpec::simulation_design(delta, n, [0.0, 0.0], tau)?;
    let values: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let seed = combine(&[base_seed, delta.to_bits(), n as u64, 0, r as u64]);
            generate_dataset(&spec, seed).map(|d| min_singular_value(&d))
        })
        .collect::<Result<_>>()?;
    Ok(SingularRow { delta, n, reps, stats: SummaryStats::from_values(&values) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MCSummary {
    pub spec: MCSpec,
    pub cells: Vec<CellSummary>,
    /// Singular value rows for `singular_ns`.
    pub singular: Vec<SingularRow>,
}

impl MCSummary {
    pub fn failed_cells(&self) -> Vec<&CellSummary> {
        self.cells.iter().filter(|c| c.failed).collect()
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(dir.as_ref().join(SUMMARY_FILE))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const REPS_DIR: &str = "reps";

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn class_name(c: RegularizationClass) -> &'static str {
    match c {
        RegularizationClass::None => "none",
        RegularizationClass::Some => "some",
        RegularizationClass::Infinite => "infinite",
    }
}

const REP_HEADER: [&str; 10] = [
    "rep", "seed", "beta_2sls_1", "beta_2sls_2", "beta_ridge_1", "beta_ridge_2", "alpha_hat", "class", "q_min",
    "min_singular_value",
];

pub fn write_records<W: Write>(records: &[RepRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = REP_HEADER.to_vec();
    header.push("error");
    w.write_record(&header)?;
    for r in records {
        let coord = |b: &Option<Vec<f64>>, j: usize| b.as_ref().map(|v| fmt(v[j])).unwrap_or_default();
        w.write_record([
            r.rep.to_string(),
            r.seed.to_string(),
            coord(&r.beta_2sls, 0),
            coord(&r.beta_2sls, 1),
            coord(&r.beta_ridge, 0),
            coord(&r.beta_ridge, 1),
            opt(r.alpha_hat.map(fmt)),
            opt(r.class.map(class_name)),
            opt(r.q_min.map(fmt)),
            fmt(r.min_singular_value),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<RepRecord>> {
    let mut rd = csv::Reader::from_path(path)?;
    let parse = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            return Ok(None);
        }
        s.parse().map(Some).map_err(|_| Error::Parse(format!("not a number: {s}")))
    };
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row?;
        let f = |i: usize| row.get(i).unwrap_or("");
        let pair = |i: usize| -> Result<Option<Vec<f64>>> {
            Ok(match (parse(f(i))?, parse(f(i + 1))?) {
                (Some(a), Some(b)) => Some(vec![a, b]),
                _ => None,
            })
        };
        let class = match f(7) {
            "none" => Some(RegularizationClass::None),
            "some" => Some(RegularizationClass::Some),
            "infinite" => Some(RegularizationClass::Infinite),
            "" => None,
            other => return Err(Error::Parse(format!("unknown class {other}"))),
        };
        out.push(RepRecord {
            rep: f(0).parse().map_err(|_| Error::Parse("bad rep index".into()))?,
            seed: f(1).parse().map_err(|_| Error::Parse("bad seed".into()))?,
            beta_2sls: pair(2)?,
            beta_ridge: pair(4)?,
            alpha_hat: parse(f(6))?,
            class,
            q_min: parse(f(8))?,
            min_singular_value: parse(f(9))?.ok_or_else(|| Error::Parse("missing singular value".into()))?,
            error: Some(f(10).to_string()).filter(|s| !s.is_empty()),
        });
    }
    Ok(out)
}

/// Runs every cell whose id contains one of `filters` (all cells when empty),
/// writing `summary.json` and `reps/<cell>.csv` under `out_dir`.
pub fn simulate(
    spec: &MCSpec,
    out_dir: impl AsRef<Path>,
    filters: &[String],
    mut progress: impl FnMut(&CellSummary, usize, usize),
) -> Result<MCSummary> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir.join(REPS_DIR))?;
    let selected: Vec<Cell> = spec
        .cells()
        .into_iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| c.id().contains(f.as_str())))
        .collect();
    let mut cells = Vec::with_capacity(selected.len());
    for (i, cell) in selected.iter().enumerate() {
        let run = run_cell(cell, spec.tau, spec.base_seed)?;
        let file = File::create(out_dir.join(REPS_DIR).join(format!("{}.csv", cell.id())))?;
        write_records(&run.records, BufWriter::new(file))?;
        progress(&run.summary, i + 1, selected.len());
        cells.push(run.summary);
    }
    let mut singular = Vec::new();
    if filters.is_empty() {
        for &delta in &spec.deltas {
            for &n in &spec.singular_ns {
                singular.push(singular_value_summary(delta, n, spec.tau, spec.large_n_reps, spec.base_seed)?);
            }
        }
    }
    let summary = MCSummary { spec: spec.clone(), cells, singular };
    let file = File::create(out_dir.join(SUMMARY_FILE))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &summary)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(summary)
}

fn sorted_cells(summary: &MCSummary) -> Vec<&CellSummary> {
    let mut cells: Vec<&CellSummary> = summary.cells.iter().collect();
    cells.sort_by(|a, b| {
        a.cell
            .delta
            .total_cmp(&b.cell.delta)
            .then(a.cell.n.cmp(&b.cell.n))
            .then(a.cell.prior_index.cmp(&b.cell.prior_index))
    });
    cells
}

/// Writes the bias/SD/MSE table for each prior, the distribution of the
/// selected alpha and the singular value table.
pub fn emit_tables(summary: &MCSummary, out_dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let cells = sorted_cells(summary);
    let mut written = Vec::new();

    let priors: Vec<usize> = {
        let mut p: Vec<usize> = cells.iter().map(|c| c.cell.prior_index).collect();
        p.sort_unstable();
        p.dedup();
        p
    };
    for &j in &priors {
        let name = format!("table_beta_prior{j}.csv");
        let mut w = csv::Writer::from_path(out_dir.join(&name))?;
        w.write_record([
            "delta", "n", "estimator", "bias_1", "sd_1", "mse_1", "bias_2", "sd_2", "mse_2", "mse_combined",
        ])?;
        for c in cells.iter().filter(|c| c.cell.prior_index == j) {
            for (label, s) in [("2sls", &c.tsls), ("ridge", &c.ridge)] {
                let mut row = vec![fmt(c.cell.delta), c.cell.n.to_string(), label.to_string()];
                for k in 0..2 {
                    row.extend([fmt(s.bias[k]), fmt(s.sd[k]), fmt(s.mse[k])]);
                }
                row.push(fmt(s.combined_mse));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        written.push(name);
    }

    let name = "table_alpha.csv".to_string();
    let mut w = csv::Writer::from_path(out_dir.join(&name))?;
    let mut header = vec!["delta".to_string(), "n".to_string()];
    for &j in &priors {
        header.extend([format!("p{j}_zero"), format!("p{j}_interior"), format!("p{j}_infinite")]);
    }
    w.write_record(&header)?;
    let mut by_design: BTreeMap<(u64, usize), BTreeMap<usize, &AlphaDistribution>> = BTreeMap::new();
    for c in &cells {
        by_design
            .entry((c.cell.delta.to_bits(), c.cell.n))
            .or_default()
            .insert(c.cell.prior_index, &c.alpha);
    }
    let mut keys: Vec<(u64, usize)> = by_design.keys().cloned().collect();
    keys.sort_by(|a, b| f64::from_bits(a.0).total_cmp(&f64::from_bits(b.0)).then(a.1.cmp(&b.1)));
    for key in &keys {
        let mut row = vec![fmt(f64::from_bits(key.0)), key.1.to_string()];
        for j in &priors {
            match by_design[key].get(j) {
                Some(a) => row.extend([fmt(a.p_zero), fmt(a.p_interior), fmt(a.p_infinite)]),
                None => row.extend([String::new(), String::new(), String::new()]),
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    written.push(name);

    let name = "table_singular.csv".to_string();
    let mut rows: Vec<SingularRow> = cells
        .iter()
        .filter(|c| Some(&c.cell.prior_index) == priors.first())
        .map(|c| SingularRow { delta: c.cell.delta, n: c.cell.n, reps: c.cell.reps, stats: c.singular_value.clone() })
        .collect();
    rows.extend(summary.singular.iter().cloned());
    rows.sort_by(|a, b| a.delta.total_cmp(&b.delta).then(a.n.cmp(&b.n)));
    let mut w = csv::Writer::from_path(out_dir.join(&name))?;
    w.write_record(["delta", "n", "reps", "mean", "sd", "q1", "median", "q3"])?;
    for r in &rows {
        let s = &r.stats;
        w.write_record([
            fmt(r.delta),
            r.n.to_string(),
            r.reps.to_string(),
            fmt(s.mean),
            fmt(s.sd),
            fmt(s.q1),
            fmt(s.median),
            fmt(s.q3),
        ])?;
    }
    w.flush()?;
    written.push(name);
    Ok(written)
}

/// Scatter of both estimators' replications, with the prior on every row.
pub fn emit_scatter(cell: &Cell, records: &[RepRecord], out_dir: impl AsRef<Path>) -> Result<String> {
    let name = format!("scatter_{}.csv", cell.id());
    let mut w = csv::Writer::from_path(out_dir.as_ref().join(&name))?;
    w.write_record(["estimator", "beta_1", "beta_2", "prior_1", "prior_2"])?;
    let (p1, p2) = (fmt(cell.prior[0]), fmt(cell.prior[1]));
    for (label, pick) in [("2sls", 0), ("ridge", 1)] {
        for r in records.iter().filter(|r| r.is_ok()) {
            let b = if pick == 0 { &r.beta_2sls } else { &r.beta_ridge };
            if let Some(b) = b {
                w.write_record([label.to_string(), fmt(b[0]), fmt(b[1]), p1.clone(), p2.clone()])?;
            }
        }
    }
    w.flush()?;
    Ok(name)
}

/// Selected alpha of every successful replication.
pub fn emit_histogram(cell: &Cell, records: &[RepRecord], out_dir: impl AsRef<Path>) -> Result<String> {
    let name = format!("histogram_{}.csv", cell.id());
    let mut w = csv::Writer::from_path(out_dir.as_ref().join(&name))?;
    w.write_record(["alpha_hat"])?;
    for a in records.iter().filter_map(|r| r.alpha_hat) {
        w.write_record([fmt(a)])?;
    }
    w.flush()?;
    Ok(name)
}

/// Builds every table, scatter and (for the large sample cells) histogram
/// file from the output of [`simulate`].
pub fn tables(in_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let in_dir = in_dir.as_ref();
    let out_dir = out_dir.as_ref();
    let summary = MCSummary::read(in_dir)?;
    let mut written = emit_tables(&summary, out_dir)?;
    for c in sorted_cells(&summary) {
        let records = read_records(in_dir.join(REPS_DIR).join(format!("{}.csv", c.id)))?;
        written.push(emit_scatter(&c.cell, &records, out_dir)?);
        if summary.spec.large_ns.contains(&c.cell.n) {
            written.push(emit_histogram(&c.cell, &records, out_dir)?);
        }
    }
    Ok(written)
}
