//! Two-stage least squares, the ridge regularization path and the empirical
//! selection of the regularization parameter on a held-out test sample.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spd_cholesky, spd_inverse, spd_solve, CONDITION_LIMIT};
use crate::model::{split_point, Dataset, DatasetView};

/// Relative tolerance under which two objective values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Instrument-projected cross products of one subsample.
///
/// With `Z'Z = L L'`, stores `L^{-1} Z'X` and `L^{-1} Z'Y`, so that
/// `X'P_Z X = F'F`, `X'P_Z Y = F'f` and `(Y - Xb)'P_Z(Y - Xb) = |f - F b|^2`.
#[derive(Clone, Debug)]
pub struct ProjectedMoments {
    pub n_obs: usize,
    pub fx: DMatrix<f64>,
    pub fy: DVector<f64>,
}

impl ProjectedMoments {
    pub fn from_view(view: &DatasetView<'_>, what: &str) -> Result<Self> {
        let z = view.z();
        let zz = z.tr_mul(&z);
        let zx = z.tr_mul(&view.x());
        let zy = z.tr_mul(&view.y());
        let chol = spd_cholesky(&zz, &format!("{what} instrument Gram matrix Z'Z"))?;
        let l = chol.l();
        let fx = l
            .solve_lower_triangular(&zx)
            .ok_or_else(|| Error::singular(what, f64::INFINITY))?;
        let fy = l
            .solve_lower_triangular(&zy)
            .ok_or_else(|| Error::singular(what, f64::INFINITY))?;
        Ok(Self { n_obs: view.n_obs(), fx, fy })
    }

    /// `X'P_Z X / n_obs`.
    pub fn xpx(&self) -> DMatrix<f64> {
        self.fx.tr_mul(&self.fx) / self.n_obs as f64
    }

    /// `X'P_Z Y / n_obs`.
    pub fn xpy(&self) -> DVector<f64> {
        self.fx.tr_mul(&self.fy) / self.n_obs as f64
    }

    /// `(Y - X b)'P_Z(Y - X b)`.
    pub fn projected_ssr(&self, beta: &DVector<f64>) -> f64 {
        (&self.fy - &self.fx * beta).norm_squared()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TslsFit {
    pub beta: Vec<f64>,
    /// `(e'e / n) (X'P_Z X / n)^{-1}`.
    pub cov: Vec<Vec<f64>>,
    pub sigma2: f64,
}

/// Two-stage least squares on the rows of `view`.
pub fn tsls(view: &DatasetView<'_>) -> Result<TslsFit> {
    let pm = ProjectedMoments::from_view(view, "2SLS")?;
    let xpx = pm.xpx();
    let beta = spd_solve(&xpx, &pm.xpy(), "2SLS X'P_Z X")?;
    let resid = view.y() - view.x() * &beta;
    let n = view.n_obs() as f64;
    let sigma2 = resid.norm_squared() / n;
    let cov = spd_inverse(&xpx, "2SLS X'P_Z X")? * sigma2;
    Ok(TslsFit {
        beta: beta.iter().cloned().collect(),
        cov: cov.row_iter().map(|r| r.iter().cloned().collect()).collect(),
        sigma2,
    })
}

fn check_prior(prior: &DVector<f64>, k: usize) -> Result<()> {
    if prior.len() != k {
        return Err(Error::Shape(format!("prior has length {}, expected {k}", prior.len())));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!("alpha = {alpha} must be finite and nonnegative")));
    }
    Ok(())
}

fn ridge_beta_from(pm: &ProjectedMoments, alpha: f64, prior: &DVector<f64>) -> Result<DVector<f64>> {
    check_alpha(alpha)?;
    check_prior(prior, pm.fx.ncols())?;
    let k = prior.len();
    let lhs = pm.xpx() + DMatrix::identity(k, k) * alpha;
    let rhs = pm.xpy() + prior * alpha;
    spd_solve(&lhs, &rhs, "ridge X'P_Z X / [tau n] + alpha I")
}

/// `(X'P_Z X/[tau n] + alpha I)^{-1} (X'P_Z Y/[tau n] + alpha prior)` on the
/// training rows.
pub fn ridge_beta(train: &DatasetView<'_>, alpha: f64, prior: &DVector<f64>) -> Result<DVector<f64>> {
    let pm = ProjectedMoments::from_view(train, "training")?;
    ridge_beta_from(&pm, alpha, prior)
}

/// Gradient of the training ridge objective,
/// `-X'P_Z(Y - X beta)/[tau n] + alpha (beta - prior)`.
pub fn beta_foc_residual(
    train: &DatasetView<'_>,
    beta: &DVector<f64>,
    alpha: f64,
    prior: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_alpha(alpha)?;
    let pm = ProjectedMoments::from_view(train, "training")?;
    check_prior(prior, pm.fx.ncols())?;
    check_prior(beta, pm.fx.ncols())?;
    Ok(pm.xpx() * beta - pm.xpy() + (beta - prior) * alpha)
}

/// Test-sample IV objective `(Y - X beta)'P_Z(Y - X beta) / (2 n_test)`.
pub fn test_objective(test: &DatasetView<'_>, beta: &DVector<f64>) -> Result<f64> {
    let pm = ProjectedMoments::from_view(test, "test")?;
    check_prior(beta, pm.fx.ncols())?;
    Ok(pm.projected_ssr(beta) / (2.0 * pm.n_obs as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QDerivatives {
    pub d1: f64,
    pub d2: f64,
}

/// First and second derivatives of the test objective along the ridge path,
/// `alpha -> test_objective(test, ridge_beta(train, alpha, prior))`.
pub fn q_derivatives(
    train: &DatasetView<'_>,
    test: &DatasetView<'_>,
    alpha: f64,
    prior: &DVector<f64>,
) -> Result<QDerivatives> {
    let tr = ProjectedMoments::from_view(train, "training")?;
    let te = ProjectedMoments::from_view(test, "test")?;
    let beta = ridge_beta_from(&tr, alpha, prior)?;
    let k = prior.len();
    let h = tr.xpx() + DMatrix::identity(k, k) * alpha;
    let chol = spd_cholesky(&h, "ridge X'P_Z X / [tau n] + alpha I")?;
    // d beta / d alpha = H^{-1}(prior - beta); d2 beta / d alpha2 = -2 H^{-2}(prior - beta).
    let db = chol.solve(&(prior - &beta));
    let d2b = chol.solve(&db) * -2.0;
    let n_te = te.n_obs as f64;
    let resid = &te.fy - &te.fx * &beta;
    let fdb = &te.fx * &db;
    let d1 = -resid.dot(&fdb) / n_te;
    let d2 = (-resid.dot(&(&te.fx * d2b)) + fdb.norm_squared()) / n_te;
    Ok(QDerivatives { d1, d2 })
}

/// Settings of the two-stage search for the regularization parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    pub tau: f64,
    pub prior: Vec<f64>,
    pub log_grid_lo: f64,
    pub log_grid_hi: f64,
    pub log_grid_points: usize,
    pub linear_grid_points: usize,
    /// Stands in for an infinite penalty; the path is at the prior there.
    pub alpha_infinity: f64,
}

impl RidgeConfig {
    /// Log grid `10^-5 ..= 10^6` with four points per decade, a 10,000 point
    /// linear refinement and `10^7` as the infinite-regularization sentinel.
    pub fn new(tau: f64, prior: Vec<f64>) -> Self {
        Self {
            tau,
            prior,
            log_grid_lo: -5.0,
            log_grid_hi: 6.0,
            log_grid_points: 45,
            linear_grid_points: 10_000,
            alpha_infinity: 1e7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau = {} must lie in (0, 1)", self.tau)));
        }
        if !(self.log_grid_lo < self.log_grid_hi) {
            return Err(Error::InvalidConfig("log_grid_lo must be below log_grid_hi".into()));
        }
        if self.log_grid_points < 2 || self.linear_grid_points < 2 {
            return Err(Error::InvalidConfig("grids need at least two points".into()));
        }
        if !(self.alpha_infinity > 10f64.powf(self.log_grid_hi)) {
            return Err(Error::InvalidConfig("alpha_infinity must exceed the top of the log grid".into()));
        }
        if self.prior.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("prior must be finite".into()));
        }
        Ok(())
    }

    pub fn prior_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.prior)
    }

    /// `{0} ∪ log grid ∪ {alpha_infinity}`, increasing.
    pub fn stage_one_grid(&self) -> Vec<f64> {
        let p = self.log_grid_points;
        let step = (self.log_grid_hi - self.log_grid_lo) / (p - 1) as f64;
        let mut grid = Vec::with_capacity(p + 2);
        grid.push(0.0);
        grid.extend((0..p).map(|i| 10f64.powf(self.log_grid_lo + step * i as f64)));
        grid.push(self.alpha_infinity);
        grid
    }
}

/// `points` evenly spaced values with both endpoints exact.
pub fn linear_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let last = points - 1;
    (0..points)
        .map(|i| match i {
            0 => lo,
            i if i == last => hi,
            i => lo + (hi - lo) * (i as f64 / last as f64),
        })
        .collect()
}

/// The test objective along the ridge path, evaluated in `O(mk)` per alpha
/// from one spectral decomposition of the training matrix `X'P_Z X / [tau n]`.
#[derive(Clone, Debug)]
pub struct PathObjective {
    eigenvalues: DVector<f64>,
    /// Training `X'P_Z Y/[tau n]` in eigen coordinates.
    target: DVector<f64>,
    /// Prior in eigen coordinates.
    prior: DVector<f64>,
    /// Test `L^{-1} Z'X` rotated into eigen coordinates.
    test_fx: DMatrix<f64>,
    test_fy: DVector<f64>,
    scale: f64,
}

impl PathObjective {
    pub fn new(train: &DatasetView<'_>, test: &DatasetView<'_>, prior: &DVector<f64>) -> Result<Self> {
        let tr = ProjectedMoments::from_view(train, "training")?;
        let te = ProjectedMoments::from_view(test, "test")?;
        Self::from_moments(&tr, &te, prior)
    }

    pub fn from_moments(tr: &ProjectedMoments, te: &ProjectedMoments, prior: &DVector<f64>) -> Result<Self> {
        check_prior(prior, tr.fx.ncols())?;
        let eig = SymmetricEigen::new(tr.xpx());
        let lo = eig.eigenvalues.min();
        let hi = eig.eigenvalues.max();
        let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        // alpha = 0 is always on the search grid, so the unpenalized path end must exist.
        if !(cond <= CONDITION_LIMIT) {
            return Err(Error::singular("training X'P_Z X / [tau n]", cond));
        }
        let c = &eig.eigenvectors;
        Ok(Self {
            target: c.tr_mul(&tr.xpy()),
            prior: c.tr_mul(prior),
            test_fx: &te.fx * c,
            test_fy: te.fy.clone(),
            scale: 0.5 / te.n_obs as f64,
            eigenvalues: eig.eigenvalues,
        })
    }

    pub fn q(&self, alpha: f64) -> f64 {
        let mut r = self.test_fy.clone();
        for j in 0..self.eigenvalues.len() {
            let w = (self.target[j] + alpha * self.prior[j]) / (self.eigenvalues[j] + alpha);
            r.axpy(-w, &self.test_fx.column(j), 1.0);
        }
        self.scale * r.norm_squared()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub alpha: f64,
    pub q: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSelection {
    pub alpha_hat: f64,
    pub q_min: f64,
    /// Every evaluation in search order: stage one, then stage two.
    pub trace: Vec<TracePoint>,
}

/// Smallest alpha whose objective is within the tie tolerance of the minimum.
fn argmin_smallest(points: &[TracePoint]) -> TracePoint {
    let q_min = points.iter().map(|p| p.q).fold(f64::INFINITY, f64::min);
    let cutoff = q_min + TIE_TOLERANCE * q_min.abs();
    points
        .iter()
        .filter(|p| p.q <= cutoff)
        .min_by(|a, b| a.alpha.total_cmp(&b.alpha))
        .copied()
        .expect("search grid is never empty")
}

/// Two-stage grid search over alpha using a prepared path objective.
pub fn search_alpha(objective: &PathObjective, config: &RidgeConfig) -> AlphaSelection {
    let stage_one = config.stage_one_grid();
    let mut trace: Vec<TracePoint> = stage_one
        .iter()
        .map(|&alpha| TracePoint { alpha, q: objective.q(alpha) })
        .collect();
    let winner = argmin_smallest(&trace);
    let idx = stage_one
        .iter()
        .position(|&a| a == winner.alpha)
        .expect("winner comes from the stage one grid");
    let lo = stage_one[idx.saturating_sub(1)];
    let hi = stage_one[(idx + 1).min(stage_one.len() - 1)];
    trace.extend(
        linear_grid(lo, hi, config.linear_grid_points)
            .into_iter()
            .map(|alpha| TracePoint { alpha, q: objective.q(alpha) }),
    );
    let best = argmin_smallest(&trace);
    AlphaSelection {
        alpha_hat: best.alpha,
        q_min: best.q,
        trace,
    }
}

/// Chooses alpha by minimizing the test objective along the training ridge path.
pub fn select_alpha(
    train: &DatasetView<'_>,
    test: &DatasetView<'_>,
    config: &RidgeConfig,
) -> Result<AlphaSelection> {
    config.validate()?;
    let objective = PathObjective::new(train, test, &config.prior_vector())?;
    Ok(search_alpha(&objective, config))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizationClass {
    /// `alpha_hat = 0`: the 2SLS end of the path.
    None,
    /// `0 < alpha_hat < alpha_infinity`.
    Some,
    /// `alpha_hat = alpha_infinity`: the prior.
    Infinite,
}

impl RegularizationClass {
    pub fn classify(alpha_hat: f64, alpha_infinity: f64) -> Self {
        if alpha_hat == 0.0 {
            RegularizationClass::None
        } else if alpha_hat >= alpha_infinity {
            RegularizationClass::Infinite
        } else {
            RegularizationClass::Some
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeFit {
    pub beta_hat: Vec<f64>,
    pub alpha_hat: f64,
    pub q_min: f64,
    pub regularization_class: RegularizationClass,
    /// 2SLS on the full sample, for comparison.
    pub beta_2sls_full: Vec<f64>,
    pub cov_2sls: Vec<Vec<f64>>,
    pub sigma2_2sls: f64,
    pub split_at: usize,
    pub search_trace: Vec<TracePoint>,
}

/// Ridge path point estimate without the search trace or the full-sample
/// comparison; used inside the Monte Carlo loop.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgePoint {
    pub beta_hat: DVector<f64>,
    pub alpha_hat: f64,
    pub q_min: f64,
}

pub fn ridge_path_point(data: &Dataset, config: &RidgeConfig) -> Result<RidgePoint> {
    config.validate()?;
    let split = split_point(data.n(), config.tau);
    let (train, test) = (data.rows(0, split), data.rows(split, data.n()));
    let tr = ProjectedMoments::from_view(&train, "training")?;
    let te = ProjectedMoments::from_view(&test, "test")?;
    let prior = config.prior_vector();
    let objective = PathObjective::from_moments(&tr, &te, &prior)?;
    let sel = search_alpha(&objective, config);
    let beta_hat = ridge_beta_from(&tr, sel.alpha_hat, &prior)?;
    Ok(RidgePoint {
        beta_hat,
        alpha_hat: sel.alpha_hat,
        q_min: sel.q_min,
    })
}

/// Full pipeline: split by `config.tau`, select alpha, evaluate the ridge
/// path at the selected alpha and attach full-sample 2SLS.
pub fn ridge_path_estimate(data: &Dataset, config: &RidgeConfig) -> Result<RidgeFit> {
    config.validate()?;
    let split = split_point(data.n(), config.tau);
    let (train, test) = (data.rows(0, split), data.rows(split, data.n()));
    let sel = select_alpha(&train, &test, config)?;
    let beta_hat = ridge_beta(&train, sel.alpha_hat, &config.prior_vector())?;
    let full = tsls(&data.full())?;
    Ok(RidgeFit {
        beta_hat: beta_hat.iter().cloned().collect(),
        alpha_hat: sel.alpha_hat,
        q_min: sel.q_min,
        regularization_class: RegularizationClass::classify(sel.alpha_hat, config.alpha_infinity),
        beta_2sls_full: full.beta,
        cov_2sls: full.cov,
        sigma2_2sls: full.sigma2,
        split_at: split,
        search_trace: sel.trace,
    })
}
