//! The just-identified moment system whose solution contains the ridge path
//! estimate and the selected regularization parameter.
//!
//! The extended parameter stacks, in order,
//! `vech(R_tr), vec(S_tr), beta, alpha, vech(R_te), vec(S_te)`, where `R` is
//! the instrument second moment `E[z z']` and `S = E[z x']` on the training
//! (`tr`) and test (`te`) subsamples. `vech` takes the lower triangle column
//! by column and `vec` stacks columns.
//!
//! The six blocks of `h_i(theta)` are
//!
//! ```text
//! 1{train} vech(R_tr - z z')
//! 1{train} vec(S_tr - z x')
//! 1{train} (-S_tr' R_tr^{-1} z (y - x'beta) + alpha (beta - beta_p))
//! 1{test}  (y - x'beta) z' R_te^{-1} S_te (S_tr' R_tr^{-1} S_tr + alpha I)^{-1} (beta_p - beta)
//! 1{test}  vech(R_te - z z')
//! 1{test}  vec(S_te - z x')
//! ```
//!
//! and `H_n(theta)` is their average over all `n` observations. The third
//! block is the gradient of the penalized training criterion and the fourth
//! is `-(n_te/n)` times the derivative of the test objective in alpha.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, unvec, unvech, vec, vech};
use crate::model::{Dataset, DatasetView, ModelSpec};

/// Positions of the parameter blocks inside the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ThetaLayout {
    pub m: usize,
    pub k: usize,
}

impl ThetaLayout {
    pub fn new(m: usize, k: usize) -> Self {
        Self { m, k }
    }

    fn r_len(&self) -> usize {
        self.m * (self.m + 1) / 2
    }

    fn s_len(&self) -> usize {
        self.m * self.k
    }

    pub fn len(&self) -> usize {
        self.m * (self.m + 1) + 2 * self.k * self.m + self.k + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn r_train(&self) -> Range<usize> {
        0..self.r_len()
    }

    pub fn s_train(&self) -> Range<usize> {
        let a = self.r_len();
        a..a + self.s_len()
    }

    pub fn beta(&self) -> Range<usize> {
        let a = self.r_len() + self.s_len();
        a..a + self.k
    }

    /// Zero-based position of alpha.
    pub fn alpha_index(&self) -> usize {
        self.r_len() + self.s_len() + self.k
    }

    pub fn r_test(&self) -> Range<usize> {
        let a = self.alpha_index() + 1;
        a..a + self.r_len()
    }

    pub fn s_test(&self) -> Range<usize> {
        let a = self.r_test().end;
        a..a + self.s_len()
    }

    /// Coordinates moved by training observations (blocks one to three).
    pub fn train_rows(&self) -> Range<usize> {
        0..self.alpha_index()
    }

    /// Coordinates moved by test observations (blocks four to six).
    pub fn test_rows(&self) -> Range<usize> {
        self.alpha_index()..self.len()
    }
}

/// The unpacked parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaParts {
    pub r_train: DMatrix<f64>,
    pub s_train: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub alpha: f64,
    pub r_test: DMatrix<f64>,
    pub s_test: DMatrix<f64>,
}

impl ThetaParts {
    /// Population value: both subsamples at `(R_z, R_z Gamma_0)`, the true
    /// coefficients and no regularization.
    pub fn population(spec: &ModelSpec) -> Self {
        let s0 = spec.s0();
        Self {
            r_train: spec.rz.clone(),
            s_train: s0.clone(),
            beta: spec.beta0.clone(),
            alpha: 0.0,
            r_test: spec.rz.clone(),
            s_test: s0,
        }
    }

    /// Subsample averages of `z z'` and `z x'` with the given `(beta, alpha)`.
    pub fn sample(data: &Dataset, beta: DVector<f64>, alpha: f64) -> Self {
        let (train, test) = data.split();
        let second = |v: &DatasetView<'_>| {
            let z = v.z();
            let n = v.n_obs() as f64;
            (z.tr_mul(&z) / n, z.tr_mul(&v.x()) / n)
        };
        let (r_train, s_train) = second(&train);
        let (r_test, s_test) = second(&test);
        Self { r_train, s_train, beta, alpha, r_test, s_test }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaVector {
    pub layout: ThetaLayout,
    pub values: DVector<f64>,
}

impl ThetaVector {
    pub fn from_values(layout: ThetaLayout, values: DVector<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "theta has length {}, layout needs {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn alpha(&self) -> f64 {
        self.values[self.layout.alpha_index()]
    }
}

fn check_shape(what: &str, a: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if a.shape() != (rows, cols) {
        return Err(Error::Shape(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

pub fn pack_theta(parts: &ThetaParts, layout: ThetaLayout) -> Result<ThetaVector> {
    let (m, k) = (layout.m, layout.k);
    check_shape("R_train", &parts.r_train, m, m)?;
    check_shape("S_train", &parts.s_train, m, k)?;
    check_shape("R_test", &parts.r_test, m, m)?;
    check_shape("S_test", &parts.s_test, m, k)?;
    if parts.beta.len() != k {
        return Err(Error::Shape(format!("beta has length {}, expected {k}", parts.beta.len())));
    }
    let mut values = Vec::with_capacity(layout.len());
    values.extend(vech(&parts.r_train));
    values.extend(vec(&parts.s_train));
    values.extend(parts.beta.iter());
    values.push(parts.alpha);
    values.extend(vech(&parts.r_test));
    values.extend(vec(&parts.s_test));
    Ok(ThetaVector { layout, values: DVector::from_vec(values) })
}

pub fn unpack_theta(theta: &ThetaVector) -> ThetaParts {
    let l = theta.layout;
    let v = theta.values.as_slice();
    ThetaParts {
        r_train: unvech(&v[l.r_train()], l.m),
        s_train: unvec(&v[l.s_train()], l.m, l.k),
        beta: DVector::from_column_slice(&v[l.beta()]),
        alpha: v[l.alpha_index()],
        r_test: unvech(&v[l.r_test()], l.m),
        s_test: unvec(&v[l.s_test()], l.m, l.k),
    }
}

/// `h_i(theta)` with the matrix inverses prepared once, so single
/// observations can be evaluated cheaply.
#[derive(Clone, Debug)]
pub struct MomentFunction {
    layout: ThetaLayout,
    parts: ThetaParts,
    prior: DVector<f64>,
    /// `R_tr^{-1} S_tr`.
    train_weight: DMatrix<f64>,
    /// `R_te^{-1} S_te (S_tr' R_tr^{-1} S_tr + alpha I)^{-1} (beta_p - beta)`.
    test_weight: DVector<f64>,
}

impl MomentFunction {
    pub fn new(theta: &ThetaVector, prior: &DVector<f64>) -> Result<Self> {
        let layout = theta.layout;
        if prior.len() != layout.k {
            return Err(Error::Shape(format!("prior has length {}, expected {}", prior.len(), layout.k)));
        }
        let parts = unpack_theta(theta);
        let train_weight = spd_inverse(&parts.r_train, "training instrument moment R_tr")? * &parts.s_train;
        let inner = parts.s_train.tr_mul(&train_weight) + DMatrix::identity(layout.k, layout.k) * parts.alpha;
        let inner_inv = spd_inverse(&inner, "penalized training matrix S_tr'R_tr^{-1}S_tr + alpha I")?;
        let r_test_inv = spd_inverse(&parts.r_test, "test instrument moment R_te")?;
        let test_weight = r_test_inv * &parts.s_test * inner_inv * (prior - &parts.beta);
        Ok(Self { layout, parts, prior: prior.clone(), train_weight, test_weight })
    }

    pub fn layout(&self) -> ThetaLayout {
        self.layout
    }

    pub fn train_weight(&self) -> &DMatrix<f64> {
        &self.train_weight
    }

    pub fn test_weight(&self) -> &DVector<f64> {
        &self.test_weight
    }

    /// Blocks one to three for a training observation, written into
    /// `out[..alpha_index]`.
    pub fn train_block(&self, z: &[f64], x: &[f64], y: f64, out: &mut [f64]) {
        let (m, k) = (self.layout.m, self.layout.k);
        let p = &self.parts;
        let pos = second_moments(&p.r_train, &p.s_train, z, x, out);
        let e = y - dot(x, p.beta.as_slice());
        for (j, slot) in out[pos..pos + k].iter_mut().enumerate() {
            let w: f64 = (0..m).map(|i| self.train_weight[(i, j)] * z[i]).sum();
            *slot = -w * e + p.alpha * (p.beta[j] - self.prior[j]);
        }
    }

    /// Blocks four to six for a test observation, written into
    /// `out[..len - alpha_index]`.
    pub fn test_block(&self, z: &[f64], x: &[f64], y: f64, out: &mut [f64]) {
        let p = &self.parts;
        let e = y - dot(x, p.beta.as_slice());
        out[0] = e * dot(z, self.test_weight.as_slice());
        second_moments(&p.r_test, &p.s_test, z, x, &mut out[1..]);
    }

    /// `h_i(theta)` for a training observation; the test blocks are zero.
    pub fn train_observation(&self, z: &[f64], x: &[f64], y: f64) -> DVector<f64> {
        let mut h = DVector::zeros(self.layout.len());
        self.train_block(z, x, y, &mut h.as_mut_slice()[..self.layout.alpha_index()]);
        h
    }

    /// `h_i(theta)` for a test observation; the training blocks are zero.
    pub fn test_observation(&self, z: &[f64], x: &[f64], y: f64) -> DVector<f64> {
        let mut h = DVector::zeros(self.layout.len());
        self.test_block(z, x, y, &mut h.as_mut_slice()[self.layout.alpha_index()..]);
        h
    }

    /// `H_n(theta)` from subsample sums of `z z'`, `z x'` and `z y`.
    pub fn average(&self, data: &Dataset) -> Result<DVector<f64>> {
        let l = self.layout;
        if data.m() != l.m || data.k() != l.k {
            return Err(Error::Shape(format!(
                "data has m = {}, k = {}; layout has m = {}, k = {}",
                data.m(),
                data.k(),
                l.m,
                l.k
            )));
        }
        let p = &self.parts;
        let n = data.n() as f64;
        let (train, test) = data.split();
        let mut h = DVector::zeros(l.len());

        let sums = |v: &DatasetView<'_>| {
            let z = v.z();
            (z.tr_mul(&z), z.tr_mul(&v.x()), z.tr_mul(&v.y()))
        };
        let (zz, zx, zy) = sums(&train);
        let nt = train.n_obs() as f64;
        write(&mut h, l.r_train(), &vech(&(&p.r_train * nt - zz)));
        write(&mut h, l.s_train(), &vec(&(&p.s_train * nt - &zx)));
        let ze = zy - zx * &p.beta;
        let foc = -self.train_weight.tr_mul(&ze) + (&p.beta - &self.prior) * (p.alpha * nt);
        write(&mut h, l.beta(), foc.as_slice());

        let (zz, zx, zy) = sums(&test);
        let ne = test.n_obs() as f64;
        let ze = zy - &zx * &p.beta;
        h[l.alpha_index()] = ze.dot(&self.test_weight);
        write(&mut h, l.r_test(), &vech(&(&p.r_test * ne - zz)));
        write(&mut h, l.s_test(), &vec(&(&p.s_test * ne - zx)));
        Ok(h / n)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

/// Writes `vech(r - z z')` then `vec(s - z x')` and returns the next free slot.
fn second_moments(r: &DMatrix<f64>, s: &DMatrix<f64>, z: &[f64], x: &[f64], out: &mut [f64]) -> usize {
    let m = z.len();
    let mut pos = 0;
    for j in 0..m {
        for i in j..m {
            out[pos] = r[(i, j)] - z[i] * z[j];
            pos += 1;
        }
    }
    for (j, xj) in x.iter().enumerate() {
        for i in 0..m {
            out[pos] = s[(i, j)] - z[i] * xj;
            pos += 1;
        }
    }
    pos
}

fn write(h: &mut DVector<f64>, range: Range<usize>, values: &[f64]) {
    h.rows_mut(range.start, range.len()).copy_from_slice(values);
}

/// `H_n(theta)`: the average of `h_i(theta)` over the sample, rows before the
/// split counting as training observations.
pub fn moment_conditions(data: &Dataset, theta: &ThetaVector, prior: &DVector<f64>) -> Result<DVector<f64>> {
    MomentFunction::new(theta, prior)?.average(data)
}

/// Central-difference Jacobian of [`moment_conditions`] in theta.
pub fn numerical_jacobian(
    data: &Dataset,
    theta: &ThetaVector,
    prior: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    let len = theta.layout.len();
    let mut jac = DMatrix::zeros(len, len);
    for j in 0..len {
        let mut up = theta.clone();
        up.values[j] += step;
        let mut down = theta.clone();
        down.values[j] -= step;
        let col = (moment_conditions(data, &up, prior)? - moment_conditions(data, &down, prior)?) / (2.0 * step);
        jac.set_column(j, &col);
    }
    Ok(jac)
}
