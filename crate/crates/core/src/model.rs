//! The linear IV data generating process, datasets and the train/test split.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, covariance_factor};
use crate::rng::StreamRng;

/// Correlation between the structural error and each first-stage error in
/// the simulation design.
pub const DESIGN_ENDOGENEITY: f64 = 0.7;

/// Population objects of the linear IV model
/// `y = x'beta0 + eps`, `x = gamma0' z + u`, `z ~ N(0, rz)`,
/// `(eps, u')' ~ N(0, err_cov)`, plus the sample size, prior and split fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecFile", into = "ModelSpecFile")]
pub struct ModelSpec {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub beta0: DVector<f64>,
    /// `m x k` first-stage coefficients.
    pub gamma0: DMatrix<f64>,
    pub prior: DVector<f64>,
    pub tau: f64,
    /// `(1 + k) x (1 + k)` covariance of `(eps, u')`.
    pub err_cov: DMatrix<f64>,
    /// `m x m` second moment of the instruments.
    pub rz: DMatrix<f64>,
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        beta0: DVector<f64>,
        gamma0: DMatrix<f64>,
        prior: DVector<f64>,
        tau: f64,
        err_cov: DMatrix<f64>,
        rz: DMatrix<f64>,
    ) -> Result<Self> {
        let spec = Self {
            n,
            k: gamma0.ncols(),
            m: gamma0.nrows(),
            beta0,
            gamma0,
            prior,
            tau,
            err_cov,
            rz,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The simulation design: `k = 2`, `m = 3`, `beta0 = 0`, identity
    /// instrument covariance, unit error variances with endogeneity 0.7 and
    /// `gamma0 = [[1, 0], [0, delta], [1, 0]]`.
    pub fn simulation_design(delta: f64, n: usize, prior: [f64; 2], tau: f64) -> Result<Self> {
        let gamma0 = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, delta, 1.0, 0.0]);
        let r = DESIGN_ENDOGENEITY;
        let err_cov = DMatrix::from_row_slice(3, 3, &[1.0, r, r, r, 1.0, 0.0, r, 0.0, 1.0]);
        Self::new(
            n,
            DVector::zeros(2),
            gamma0,
            DVector::from_column_slice(&prior),
            tau,
            err_cov,
            DMatrix::identity(3, 3),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (k, m) = (self.k, self.m);
        if self.n < 4 {
            return Err(Error::InvalidSpec(format!("n = {} must be at least 4", self.n)));
        }
        if k == 0 || m < k {
            return Err(Error::InvalidSpec(format!("need 1 <= k <= m, got k = {k}, m = {m}")));
        }
        if self.gamma0.shape() != (m, k) {
            return Err(Error::Shape(format!("gamma0 is {:?}, expected ({m}, {k})", self.gamma0.shape())));
        }
        if self.beta0.len() != k || self.prior.len() != k {
            return Err(Error::Shape(format!(
                "beta0 and prior must have length {k}, got {} and {}",
                self.beta0.len(),
                self.prior.len()
            )));
        }
        if self.err_cov.shape() != (k + 1, k + 1) {
            return Err(Error::Shape(format!("err_cov must be {0}x{0}", k + 1)));
        }
        if self.rz.shape() != (m, m) {
            return Err(Error::Shape(format!("rz must be {m}x{m}")));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidSpec(format!("tau = {} must lie in (0, 1)", self.tau)));
        }
        let split = split_point(self.n, self.tau);
        if split < 1 || split >= self.n {
            return Err(Error::InvalidSpec(format!(
                "split point {split} leaves an empty subsample for n = {}",
                self.n
            )));
        }
        if !linalg::is_symmetric(&self.rz, 1e-12) || linalg::condition_number(&self.rz) > linalg::CONDITION_LIMIT {
            return Err(Error::NotPositiveDefinite("rz".into()));
        }
        // Noise-free designs (zero error covariance) are allowed; indefinite ones are not.
        if !linalg::is_symmetric(&self.err_cov, 1e-12) || covariance_factor(&self.err_cov).is_err() {
            return Err(Error::NotPositiveDefinite("err_cov".into()));
        }
        let sv = self.gamma0.singular_values();
        let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        if !(lo > 1e-12 * hi.max(1.0)) {
            return Err(Error::InvalidSpec("gamma0 must have full column rank".into()));
        }
        Ok(())
    }

    pub fn split_at(&self) -> usize {
        split_point(self.n, self.tau)
    }

    /// True when both subsamples have more rows than instruments.
    pub fn supports_split(&self) -> bool {
        let s = self.split_at();
        s > self.m && self.n - s > self.m
    }

    /// `S0 = rz * gamma0`, the population value of `E[z x']`.
    pub fn s0(&self) -> DMatrix<f64> {
        &self.rz * &self.gamma0
    }

    pub fn with_n(&self, n: usize) -> Result<Self> {
        let mut s = self.clone();
        s.n = n;
        s.validate()?;
        Ok(s)
    }

    pub fn with_prior(&self, prior: DVector<f64>) -> Result<Self> {
        let mut s = self.clone();
        s.prior = prior;
        s.validate()?;
        Ok(s)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `[tau * n]`, the number of training observations.
pub fn split_point(n: usize, tau: f64) -> usize {
    // The small offset keeps products such as 0.7 * 10 from flooring to 6.
    (tau * n as f64 + 1e-9).floor() as usize
}

/// Flat, human editable form of [`ModelSpec`]; matrices are lists of rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelSpecFile {
    n: usize,
    beta0: Vec<f64>,
    gamma0: Vec<Vec<f64>>,
    prior: Vec<f64>,
    tau: f64,
    err_cov: Vec<Vec<f64>>,
    rz: Vec<Vec<f64>>,
}

fn rows_to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if nrows == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Shape(format!("{name} must be a non-empty rectangular list of rows")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

impl TryFrom<ModelSpecFile> for ModelSpec {
    type Error = Error;

    fn try_from(f: ModelSpecFile) -> Result<Self> {
        ModelSpec::new(
            f.n,
            DVector::from_vec(f.beta0),
            rows_to_matrix("gamma0", &f.gamma0)?,
            DVector::from_vec(f.prior),
            f.tau,
            rows_to_matrix("err_cov", &f.err_cov)?,
            rows_to_matrix("rz", &f.rz)?,
        )
    }
}

impl From<ModelSpec> for ModelSpecFile {
    fn from(s: ModelSpec) -> Self {
        Self {
            n: s.n,
            beta0: s.beta0.iter().cloned().collect(),
            gamma0: matrix_to_rows(&s.gamma0),
            prior: s.prior.iter().cloned().collect(),
            tau: s.tau,
            err_cov: matrix_to_rows(&s.err_cov),
            rz: matrix_to_rows(&s.rz),
        }
    }
}

/// One draw of the primitive random variables and the implied observables.
#[derive(Clone, Debug)]
pub struct Observation {
    pub z: DVector<f64>,
    pub eps: f64,
    pub u: DVector<f64>,
    pub x: DVector<f64>,
    pub y: f64,
}

/// Draws observations from a [`ModelSpec`] using precomputed covariance factors.
#[derive(Clone, Debug)]
pub struct ObservationSampler {
    rz_factor: DMatrix<f64>,
    err_factor: DMatrix<f64>,
    gamma0_t: DMatrix<f64>,
    beta0: DVector<f64>,
    k: usize,
    m: usize,
}

impl ObservationSampler {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            rz_factor: covariance_factor(&spec.rz)?,
            err_factor: covariance_factor(&spec.err_cov)?,
            gamma0_t: spec.gamma0.transpose(),
            beta0: spec.beta0.clone(),
            k: spec.k,
            m: spec.m,
        })
    }

    pub fn empty_observation(&self) -> Observation {
        Observation {
            z: DVector::zeros(self.m),
            eps: 0.0,
            u: DVector::zeros(self.k),
            x: DVector::zeros(self.k),
            y: 0.0,
        }
    }

    pub fn fill<R: Rng>(&self, rng: &mut R, obs: &mut Observation) {
        let sz = DVector::<f64>::from_fn(self.m, |_, _| rng.sample(StandardNormal));
        let se = DVector::<f64>::from_fn(self.k + 1, |_, _| rng.sample(StandardNormal));
        obs.z.gemv(1.0, &self.rz_factor, &sz, 0.0);
        let e = &self.err_factor * se;
        obs.eps = e[0];
        obs.u.copy_from(&e.rows(1, self.k));
        obs.x.copy_from(&obs.u);
        obs.x.gemv(1.0, &self.gamma0_t, &obs.z, 1.0);
        obs.y = obs.x.dot(&self.beta0) + obs.eps;
    }
}

/// One realized sample. Rows `0..split_at` form the training sample and rows
/// `split_at..n` the test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    split_at: usize,
}

impl Dataset {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>, split_at: usize) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || z.nrows() != n {
            return Err(Error::Shape(format!(
                "y has {n} rows but x has {} and z has {}",
                x.nrows(),
                z.nrows()
            )));
        }
        if x.ncols() == 0 || z.ncols() < x.ncols() {
            return Err(Error::Shape(format!("need 1 <= k <= m, got k = {}, m = {}", x.ncols(), z.ncols())));
        }
        if split_at > n {
            return Err(Error::Shape(format!("split point {split_at} beyond {n} rows")));
        }
        Ok(Self { y, x, z, split_at })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.z.ncols()
    }

    pub fn split_at(&self) -> usize {
        self.split_at
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    /// Same observations with the split recomputed as `[tau * n]`.
    pub fn with_tau(mut self, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau = {tau} must lie in (0, 1)")));
        }
        self.split_at = split_point(self.n(), tau);
        Ok(self)
    }

    pub fn full(&self) -> DatasetView<'_> {
        self.rows(0, self.n())
    }

    pub fn rows(&self, start: usize, end: usize) -> DatasetView<'_> {
        assert!(start <= end && end <= self.n(), "row range {start}..{end} out of bounds");
        DatasetView { data: self, start, end }
    }

    /// Training rows `0..split_at` and test rows `split_at..n`.
    pub fn split(&self) -> (DatasetView<'_>, DatasetView<'_>) {
        (self.rows(0, self.split_at), self.rows(self.split_at, self.n()))
    }

    /// Writes the `y,x1..xk,z1..zm` CSV format.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.k()).map(|j| format!("x{j}")));
        header.extend((1..=self.m()).map(|j| format!("z{j}")));
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            record.clear();
            record.push(self.y[i].to_string());
            record.extend(self.x.row(i).iter().map(|v| v.to_string()));
            record.extend(self.z.row(i).iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV format written by [`Dataset::write_csv`]; the split is
    /// `[tau * n]`.
    pub fn read_csv<R: Read>(reader: R, tau: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        if names.first() != Some(&"y") {
            return Err(Error::Parse("first column must be y".into()));
        }
        let k = names.iter().filter(|c| c.starts_with('x')).count();
        let m = names.iter().filter(|c| c.starts_with('z')).count();
        let expected: Vec<String> = std::iter::once("y".to_string())
            .chain((1..=k).map(|j| format!("x{j}")))
            .chain((1..=m).map(|j| format!("z{j}")))
            .collect();
        if names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Parse(format!("unexpected header {names:?}, expected {expected:?}")));
        }
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut z = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != 1 + k + m {
                return Err(Error::Parse(format!("row {} has {} fields", line + 1, rec.len())));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", line + 1)))
            };
            y.push(parse(&rec[0])?);
            for j in 0..k {
                x.push(parse(&rec[1 + j])?);
            }
            for j in 0..m {
                z.push(parse(&rec[1 + k + j])?);
            }
        }
        let n = y.len();
        let data = Dataset::new(
            DVector::from_vec(y),
            DMatrix::from_row_slice(n, k, &x),
            DMatrix::from_row_slice(n, m, &z),
            0,
        )?;
        data.with_tau(tau)
    }
}

/// A contiguous block of rows of a [`Dataset`].
#[derive(Clone, Copy, Debug)]
pub struct DatasetView<'a> {
    data: &'a Dataset,
    start: usize,
    end: usize,
}

impl<'a> DatasetView<'a> {
    pub fn n_obs(&self) -> usize {
        self.end - self.start
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn k(&self) -> usize {
        self.data.k()
    }

    pub fn m(&self) -> usize {
        self.data.m()
    }

    pub fn y(&self) -> DVectorView<'a, f64> {
        self.data.y.rows(self.start, self.n_obs())
    }

    pub fn x(&self) -> DMatrixView<'a, f64> {
        self.data.x.rows(self.start, self.n_obs())
    }

    pub fn z(&self) -> DMatrixView<'a, f64> {
        self.data.z.rows(self.start, self.n_obs())
    }
}

/// Simulates `spec.n` observations. Observation `i` is drawn from the
/// stream `(seed, i)`, so the result is a pure function of `(spec, seed)`.
pub fn generate_dataset(spec: &ModelSpec, seed: u64) -> Result<Dataset> {
    let sampler = ObservationSampler::new(spec)?;
    let streams = StreamRng::new(seed);
    let (n, k, m) = (spec.n, spec.k, spec.m);
    let mut y = DVector::zeros(n);
    let mut x = DMatrix::zeros(n, k);
    let mut z = DMatrix::zeros(n, m);
    let mut obs = sampler.empty_observation();
    for i in 0..n {
        let mut rng = streams.stream(i as u64);
        sampler.fill(&mut rng, &mut obs);
        y[i] = obs.y;
        x.row_mut(i).copy_from(&obs.x.transpose());
        z.row_mut(i).copy_from(&obs.z.transpose());
    }
    Dataset::new(y, x, z, spec.split_at())
}
