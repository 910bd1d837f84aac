//! Limit law of the joint estimator `(R, S, beta, alpha)`.
//!
//! With `M0 = E[dh_i/dtheta']` and `V` the covariance of `sqrt(n) H_n(theta_0)`,
//! the Gaussian limit is `Z = (-M0)^{-1} G`, `G ~ N(0, V)`, and the estimator
//! converges to the projection of `Z` onto the cone `{lambda : lambda_alpha >= 0}`
//! in the metric `M0'M0`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::{pack_theta, MomentFunction, ThetaLayout, ThetaParts};
use crate::linalg::{psd_sqrt, spd_cholesky, spd_inverse};
use crate::model::{ModelSpec, ObservationSampler};
use crate::rng::StreamRng;

/// Observations used for the simulated covariance by default.
pub const DEFAULT_V_OBSERVATIONS: usize = 10_000_000;

/// Below this `delta_tilde` the prior is treated as equal to the truth.
pub const DEGENERATE_PRIOR: f64 = 1e-8;

/// Eigenvalues of `V` down to `-PSD_CLIP` are treated as zero when sampling.
pub const PSD_CLIP: f64 = 1e-10;

const CHUNK: usize = 1 << 16;

/// How the covariance `V` of the moment conditions is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VMode {
    /// Exact fourth moments of Gaussian quadratic forms.
    AnalyticGaussian,
    /// Average of `h_i h_i'` over simulated observations.
    MonteCarlo { observations: usize, seed: u64 },
}

impl Default for VMode {
    fn default() -> Self {
        VMode::MonteCarlo { observations: DEFAULT_V_OBSERVATIONS, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct AsymptoticLaw {
    pub layout: ThetaLayout,
    pub tau: f64,
    pub m0: DMatrix<f64>,
    pub v: DMatrix<f64>,
    /// `R_z Gamma_0`.
    pub s0: DMatrix<f64>,
    /// `S0' R_z^{-1} S0`.
    pub b: DMatrix<f64>,
    /// `beta_0 - beta_p`.
    pub d: DVector<f64>,
    /// `d' b^{-1} d`.
    pub delta_tilde: f64,
    /// The prior equals the truth, so `M0` is singular.
    pub degenerate_prior: bool,
}

/// The `(beta, alpha)` block of `M0` before the sample-share scaling:
/// `[[b, d], [d', 0]]`.
pub fn ridge_block(b: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let k = d.len();
    let mut out = DMatrix::zeros(k + 1, k + 1);
    out.view_mut((0, 0), (k, k)).copy_from(b);
    out.view_mut((0, k), (k, 1)).copy_from(d);
    out.view_mut((k, 0), (1, k)).copy_from(&d.transpose());
    out
}

/// Closed-form inverse of [`ridge_block`],
/// `(1/dt) [[dt b^{-1} - b^{-1} d d' b^{-1}, b^{-1} d], [d' b^{-1}, -1]]`
/// with `dt = d' b^{-1} d`. `None` when `dt` is at most [`DEGENERATE_PRIOR`].
pub fn ridge_block_inverse(b: &DMatrix<f64>, d: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
    let k = d.len();
    let b_inv = spd_inverse(b, "S0' R_z^{-1} S0")?;
    let bd = &b_inv * d;
    let dt = d.dot(&bd);
    if dt <= DEGENERATE_PRIOR {
        return Ok(None);
    }
    let mut out = DMatrix::zeros(k + 1, k + 1);
    out.view_mut((0, 0), (k, k)).copy_from(&((b_inv * dt - &bd * bd.transpose()) / dt));
    out.view_mut((0, k), (k, 1)).copy_from(&(&bd / dt));
    out.view_mut((k, 0), (1, k)).copy_from(&(bd.transpose() / dt));
    out[(k, k)] = -1.0 / dt;
    Ok(Some(out))
}

/// Linear forms `w -> a'w` on `w = (z, eps, u)` for the primitive variables.
struct Primitives {
    m: usize,
    k: usize,
    gamma0: DMatrix<f64>,
    omega: DMatrix<f64>,
}

impl Primitives {
    fn new(spec: &ModelSpec) -> Self {
        let (m, k) = (spec.m, spec.k);
        let mut omega = DMatrix::zeros(m + 1 + k, m + 1 + k);
        omega.view_mut((0, 0), (m, m)).copy_from(&spec.rz);
        omega.view_mut((m, m), (k + 1, k + 1)).copy_from(&spec.err_cov);
        Self { m, k, gamma0: spec.gamma0.clone(), omega }
    }

    fn dim(&self) -> usize {
        self.m + 1 + self.k
    }

    fn z(&self, i: usize) -> DVector<f64> {
        let mut a = DVector::zeros(self.dim());
        a[i] = 1.0;
        a
    }

    fn z_combination(&self, c: &[f64]) -> DVector<f64> {
        let mut a = DVector::zeros(self.dim());
        a.rows_mut(0, self.m).copy_from_slice(c);
        a
    }

    fn eps(&self) -> DVector<f64> {
        let mut a = DVector::zeros(self.dim());
        a[self.m] = 1.0;
        a
    }

    fn x(&self, j: usize) -> DVector<f64> {
        let mut a = self.z_combination(self.gamma0.column(j).as_slice());
        a[self.m + 1 + j] = 1.0;
        a
    }
}

type Bilinear = Vec<(DVector<f64>, DVector<f64>)>;

/// Each moment coordinate at the truth as a centred product `(a'w)(b'w)`.
fn bilinear_moments(spec: &ModelSpec, f: &MomentFunction) -> (Bilinear, Bilinear) {
    let p = Primitives::new(spec);
    let (m, k) = (p.m, p.k);
    let second = |out: &mut Bilinear| {
        for j in 0..m {
            for i in j..m {
                out.push((-p.z(i), p.z(j)));
            }
        }
        for j in 0..k {
            for i in 0..m {
                out.push((-p.z(i), p.x(j)));
            }
        }
    };
    let mut train = Vec::new();
    second(&mut train);
    for j in 0..k {
        let w = f.train_weight().column(j).clone_owned();
        train.push((-p.z_combination(w.as_slice()), p.eps()));
    }
    let mut test = vec![(p.eps(), p.z_combination(f.test_weight().as_slice()))];
    second(&mut test);
    (train, test)
}

fn isserlis(forms: &[(DVector<f64>, DVector<f64>)], omega: &DMatrix<f64>) -> DMatrix<f64> {
    let n = forms.len();
    DMatrix::from_fn(n, n, |r, s| {
        let (a, b) = &forms[r];
        let (c, d) = &forms[s];
        let cov = |u: &DVector<f64>, v: &DVector<f64>| (u.transpose() * omega * v)[(0, 0)];
        cov(a, c) * cov(b, d) + cov(a, d) * cov(b, c)
    })
}

/// `E[h h']` for the training and test forms of `h_i(theta_0)` from simulated
/// observations, summed chunk by chunk in a fixed order.
fn simulated_second_moments(
    spec: &ModelSpec,
    f: &MomentFunction,
    observations: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let sampler = ObservationSampler::new(spec)?;
    let layout = f.layout();
    let (nt, ne) = (layout.alpha_index(), layout.len() - layout.alpha_index());
    let streams = StreamRng::new(seed);
    let chunks = observations.div_ceil(CHUNK);
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = streams.stream(c as u64);
            let mut obs = sampler.empty_observation();
            let (mut ht, mut he) = (vec![0.0; nt], vec![0.0; ne]);
            let (mut st, mut se) = (vec![0.0; nt * nt], vec![0.0; ne * ne]);
            let count = CHUNK.min(observations - c * CHUNK);
            for _ in 0..count {
                sampler.fill(&mut rng, &mut obs);
                f.train_block(obs.z.as_slice(), obs.x.as_slice(), obs.y, &mut ht);
                f.test_block(obs.z.as_slice(), obs.x.as_slice(), obs.y, &mut he);
                accumulate_upper(&mut st, &ht);
                accumulate_upper(&mut se, &he);
            }
            (st, se)
        })
        .collect();
    let mut st = DMatrix::zeros(nt, nt);
    let mut se = DMatrix::zeros(ne, ne);
    for (t, e) in &partial {
        st += DMatrix::from_column_slice(nt, nt, t);
        se += DMatrix::from_column_slice(ne, ne, e);
    }
    let n = observations as f64;
    Ok((symmetrize_upper(st) / n, symmetrize_upper(se) / n))
}

fn accumulate_upper(acc: &mut [f64], h: &[f64]) {
    let n = h.len();
    for j in 0..n {
        let hj = h[j];
        for i in 0..=j {
            acc[j * n + i] += h[i] * hj;
        }
    }
}

fn symmetrize_upper(mut a: DMatrix<f64>) -> DMatrix<f64> {
    a.fill_lower_triangle_with_upper_triangle();
    a
}

/// Assembles `M0` and `V` at the population parameter of `spec`.
pub fn build_law(spec: &ModelSpec, mode: VMode) -> Result<AsymptoticLaw> {
    spec.validate()?;
    let (m, k, tau) = (spec.m, spec.k, spec.tau);
    let layout = ThetaLayout::new(m, k);
    let s0 = spec.s0();
    let b = s0.tr_mul(&spd_inverse(&spec.rz, "R_z")?) * &s0;
    let d = &spec.beta0 - &spec.prior;
    let delta_tilde = d.dot(&(spd_inverse(&b, "S0' R_z^{-1} S0")? * &d));

    let len = layout.len();
    let ai = layout.alpha_index();
    let mut m0 = DMatrix::identity(len, len);
    m0.view_mut((layout.beta().start, layout.beta().start), (k + 1, k + 1))
        .copy_from(&ridge_block(&b, &d));
    for r in 0..len {
        let share = if r < ai { tau } else { 1.0 - tau };
        m0.row_mut(r).scale_mut(share);
    }

    let theta0 = pack_theta(&ThetaParts::population(spec), layout)?;
    let f = MomentFunction::new(&theta0, &spec.prior)?;
    let (train, test) = match mode {
        VMode::AnalyticGaussian => {
            let (tr, te) = bilinear_moments(spec, &f);
            let omega = Primitives::new(spec).omega;
            (isserlis(&tr, &omega), isserlis(&te, &omega))
        }
        VMode::MonteCarlo { observations, seed } => {
            if observations == 0 {
                return Err(Error::InvalidConfig("covariance needs at least one observation".into()));
            }
            simulated_second_moments(spec, &f, observations, seed)?
        }
    };
    let mut v = DMatrix::zeros(len, len);
    v.view_mut((0, 0), (ai, ai)).copy_from(&(train * tau));
    v.view_mut((ai, ai), (len - ai, len - ai)).copy_from(&(test * (1.0 - tau)));

    Ok(AsymptoticLaw {
        layout,
        tau,
        m0,
        v,
        s0,
        b,
        d,
        delta_tilde,
        degenerate_prior: delta_tilde <= DEGENERATE_PRIOR,
    })
}

impl AsymptoticLaw {
    pub fn d_matrix(&self) -> DMatrix<f64> {
        ridge_block(&self.b, &self.d)
    }

    pub fn d_inverse(&self) -> Result<Option<DMatrix<f64>>> {
        ridge_block_inverse(&self.b, &self.d)
    }

    /// Covariance of the training first order condition, `E[S'R^{-1} z e^2 z' R^{-1} S]`.
    pub fn xi(&self) -> DMatrix<f64> {
        let r = self.layout.beta();
        self.v.view((r.start, r.start), (r.len(), r.len())) / self.tau
    }

    /// Variance of the test first order condition.
    pub fn upsilon(&self) -> f64 {
        let a = self.layout.alpha_index();
        self.v[(a, a)] / (1.0 - self.tau)
    }

    /// `(-M0)^{-1}`.
    pub fn neg_m0_inverse(&self) -> Result<DMatrix<f64>> {
        (-&self.m0)
            .try_inverse()
            .ok_or_else(|| Error::singular("expected Jacobian M0 (prior equals the truth)", f64::INFINITY))
    }

    /// Covariance of the unconstrained limit `Z`, `M0^{-1} V M0^{-1}'`.
    pub fn limit_covariance(&self) -> Result<DMatrix<f64>> {
        let inv = self.neg_m0_inverse()?;
        Ok(&inv * &self.v * inv.transpose())
    }

    /// Metric of the cone projection, `M0'M0`.
    pub fn cone_metric(&self) -> DMatrix<f64> {
        self.m0.tr_mul(&self.m0)
    }
}

/// Minimizer of `(z - l)'A(z - l)` over `l_alpha >= 0`, with the partitioned
/// solve for the boundary case prepared once.
#[derive(Clone, Debug)]
pub struct ConeProjector {
    alpha_index: usize,
    /// `A_{--}^{-1} A_{-alpha}`, indexed over the coordinates other than alpha.
    shift: DVector<f64>,
}

impl ConeProjector {
    pub fn new(a: &DMatrix<f64>, alpha_index: usize) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || alpha_index >= n {
            return Err(Error::Shape(format!(
                "cone metric is {}x{} with alpha index {alpha_index}",
                a.nrows(),
                a.ncols()
            )));
        }
        spd_cholesky(a, "cone metric")?;
        let rest: Vec<usize> = (0..n).filter(|&i| i != alpha_index).collect();
        let a_rr = a.select_rows(&rest).select_columns(&rest);
        let a_ra = DVector::from_iterator(rest.len(), rest.iter().map(|&i| a[(i, alpha_index)]));
        let shift = spd_cholesky(&a_rr, "cone metric without alpha")?.solve(&a_ra);
        Ok(Self { alpha_index, shift })
    }

    pub fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        let za = z[self.alpha_index];
        if za >= 0.0 {
            return z.clone();
        }
        let mut out = z.clone();
        out[self.alpha_index] = 0.0;
        for (r, i) in (0..z.len()).filter(|&i| i != self.alpha_index).enumerate() {
            out[i] += self.shift[r] * za;
        }
        out
    }
}

pub fn project_onto_cone(z: &DVector<f64>, a: &DMatrix<f64>, alpha_index: usize) -> Result<DVector<f64>> {
    if z.len() != a.nrows() {
        return Err(Error::Shape(format!("z has length {}, metric is {}x{}", z.len(), a.nrows(), a.ncols())));
    }
    Ok(ConeProjector::new(a, alpha_index)?.project(z))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConeSample {
    pub z: DVector<f64>,
    pub lambda_hat: DVector<f64>,
    pub at_boundary: bool,
}

#[derive(Clone, Debug)]
pub struct Theorem1Draws {
    pub samples: Vec<ConeSample>,
    pub mass_at_zero: f64,
}

/// Draws from the limit law. Draw `i` uses stream `(seed, i)`.
pub fn simulate_theorem1(law: &AsymptoticLaw, draws: usize, seed: u64) -> Result<Theorem1Draws> {
    if draws == 0 {
        return Err(Error::InvalidConfig("draws must be positive".into()));
    }
    let transform = law.neg_m0_inverse()? * psd_sqrt(&law.v, PSD_CLIP)?;
    let projector = ConeProjector::new(&law.cone_metric(), law.layout.alpha_index())?;
    let ai = law.layout.alpha_index();
    let len = law.layout.len();
    let streams = StreamRng::new(seed);
    let samples: Vec<ConeSample> = (0..draws)
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.stream(i as u64);
            let xi = DVector::from_fn(len, |_, _| StandardNormal.sample(&mut rng));
            let z = &transform * xi;
            let lambda_hat = projector.project(&z);
            let at_boundary = lambda_hat[ai] == 0.0;
            ConeSample { z, lambda_hat, at_boundary }
        })
        .collect();
    let boundary = samples.iter().filter(|s| s.at_boundary).count();
    Ok(Theorem1Draws { mass_at_zero: boundary as f64 / draws as f64, samples })
}
