//! Independent oracles shared by the integration tests. Nothing here calls
//! into the estimator internals; matrices are formed explicitly.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use ridgepath::estimators::q_derivatives;
use ridgepath::model::{generate_dataset, Dataset, DatasetView, ModelSpec};

pub const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub fn design(delta: f64, n: usize, prior: [f64; 2]) -> ModelSpec {
    ModelSpec::simulation_design(delta, n, prior, 0.7).unwrap()
}

/// A varied sample: cycles through the precision levels and sample sizes of
/// the simulation design and through three priors.
pub fn random_instance(i: u64, n_choices: &[usize]) -> (Dataset, DVector<f64>) {
    let delta = [0.1, 0.25, 0.5, 1.0][(i % 4) as usize];
    let n = n_choices[((i / 4) as usize) % n_choices.len()];
    let p = [0.5, 1.0, 2.0][(i % 3) as usize];
    let prior = [p * INV_SQRT2, -p * INV_SQRT2 + 0.3 * (i % 5) as f64];
    let spec = design(delta, n, prior);
    (generate_dataset(&spec, 7_000 + i).unwrap(), DVector::from_column_slice(&prior))
}

pub fn owned(view: &DatasetView<'_>) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    (view.y().into_owned(), view.x().into_owned(), view.z().into_owned())
}

/// `Z (Z'Z)^{-1} Z'` built with a general LU inverse.
pub fn projection(z: &DMatrix<f64>) -> DMatrix<f64> {
    let zz = z.transpose() * z;
    let inv = zz.lu().try_inverse().expect("invertible Z'Z");
    z * inv * z.transpose()
}

/// Least squares through the SVD pseudo-inverse.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().svd(true, true).solve(b, 1e-14).expect("svd solve")
}

/// 2SLS as two explicit regressions.
pub fn two_stage_oracle(y: &DVector<f64>, x: &DMatrix<f64>, z: &DMatrix<f64>) -> DVector<f64> {
    let coef = lstsq(z, x);
    let xhat = z * coef;
    let b = lstsq(&xhat, &DMatrix::from_column_slice(y.len(), 1, y.as_slice()));
    b.column(0).into_owned()
}

/// Ridge objective on the rows given, written out with an explicit projection.
pub fn ridge_objective(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    pz: &DMatrix<f64>,
    beta: &DVector<f64>,
    alpha: f64,
    prior: &DVector<f64>,
) -> f64 {
    let r = y - x * beta;
    let n = y.len() as f64;
    (r.transpose() * pz * &r)[(0, 0)] / (2.0 * n) + 0.5 * alpha * (beta - prior).norm_squared()
}

/// Test objective with an explicit projection.
pub fn test_objective_oracle(view: &DatasetView<'_>, beta: &DVector<f64>) -> f64 {
    let (y, x, z) = owned(view);
    let pz = projection(&z);
    let r = y - x * beta;
    (r.transpose() * pz * &r)[(0, 0)] / (2.0 * view.n_obs() as f64)
}

/// Nelder–Mead simplex minimizer.
pub fn nelder_mead<F: Fn(&DVector<f64>) -> f64>(f: F, start: &DVector<f64>, scale: f64, iters: usize) -> DVector<f64> {
    let k = start.len();
    let mut simplex: Vec<DVector<f64>> = vec![start.clone()];
    for j in 0..k {
        let mut v = start.clone();
        v[j] += scale;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(&f).collect();
    for _ in 0..iters {
        let mut order: Vec<usize> = (0..=k).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        let centroid = simplex[..k].iter().fold(DVector::zeros(k), |acc, v| acc + v) / k as f64;
        let worst = simplex[k].clone();
        let reflect = &centroid + (&centroid - &worst);
        let fr = f(&reflect);
        if fr < values[0] {
            let expand = &centroid + (&reflect - &centroid) * 2.0;
            let fe = f(&expand);
            if fe < fr {
                simplex[k] = expand;
                values[k] = fe;
            } else {
                simplex[k] = reflect;
                values[k] = fr;
            }
        } else if fr < values[k - 1] {
            simplex[k] = reflect;
            values[k] = fr;
        } else {
            let contract = &centroid + (&worst - &centroid) * 0.5;
            let fc = f(&contract);
            if fc < values[k] {
                simplex[k] = contract;
                values[k] = fc;
            } else {
                let best = simplex[0].clone();
                for i in 1..=k {
                    simplex[i] = &best + (&simplex[i] - &best) * 0.5;
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let best = (0..=k).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap();
    simplex[best].clone()
}

/// Test objective along the ridge path from explicitly projected cross
/// products, solving the penalized normal equations by LU at every alpha.
pub struct PathOracle {
    a: DMatrix<f64>,
    b: DVector<f64>,
    prior: DVector<f64>,
    xpx: DMatrix<f64>,
    xpy: DVector<f64>,
    ypy: f64,
    n_te: f64,
}

impl PathOracle {
    pub fn new(train: &DatasetView<'_>, test: &DatasetView<'_>, prior: &DVector<f64>) -> Self {
        let (y, x, z) = owned(train);
        let p = projection(&z);
        let nt = y.len() as f64;
        let a = x.transpose() * &p * &x / nt;
        let b = x.transpose() * &p * &y / nt;
        let (y, x, z) = owned(test);
        let p = projection(&z);
        Self {
            a,
            b,
            prior: prior.clone(),
            xpx: x.transpose() * &p * &x,
            xpy: x.transpose() * &p * &y,
            ypy: (y.transpose() * &p * &y)[(0, 0)],
            n_te: y.len() as f64,
        }
    }

    pub fn beta(&self, alpha: f64) -> DVector<f64> {
        let k = self.prior.len();
        let lhs = &self.a + DMatrix::identity(k, k) * alpha;
        lhs.lu().solve(&(&self.b + &self.prior * alpha)).unwrap()
    }

    pub fn q(&self, alpha: f64) -> f64 {
        let beta = self.beta(alpha);
        let quad = self.ypy - 2.0 * beta.dot(&self.xpy) + (beta.transpose() * &self.xpx * &beta)[(0, 0)];
        quad / (2.0 * self.n_te)
    }

    /// `Q(b1) - Q(b0)` in difference form, free of the cancellation that
    /// swamps second differences of `Q` itself.
    pub fn q_difference(&self, b1: &DVector<f64>, b0: &DVector<f64>) -> f64 {
        let d = b1 - b0;
        let s = b1 + b0;
        (-2.0 * d.dot(&self.xpy) + (d.transpose() * &self.xpx * &s)[(0, 0)]) / (2.0 * self.n_te)
    }

    /// `q` for two regressors with the 2x2 solve written out by Cramer's rule.
    fn q2(&self, alpha: f64) -> f64 {
        let (a, p) = (&self.a, &self.prior);
        let (a11, a12, a21, a22) = (a[(0, 0)] + alpha, a[(0, 1)], a[(1, 0)], a[(1, 1)] + alpha);
        let (r1, r2) = (self.b[0] + alpha * p[0], self.b[1] + alpha * p[1]);
        let det = a11 * a22 - a12 * a21;
        let (b1, b2) = ((r1 * a22 - a12 * r2) / det, (a11 * r2 - a21 * r1) / det);
        let m = &self.xpx;
        let quad = m[(0, 0)] * b1 * b1 + (m[(0, 1)] + m[(1, 0)]) * b1 * b2 + m[(1, 1)] * b2 * b2;
        (self.ypy - 2.0 * (b1 * self.xpy[0] + b2 * self.xpy[1]) + quad) / (2.0 * self.n_te)
    }

    /// Minimum over `{0}` and `points` log-spaced values in `[1e-9, 1e7]`.
    pub fn dense_argmin(&self, points: usize) -> (f64, f64) {
        let eval = |alpha: f64| if self.prior.len() == 2 { self.q2(alpha) } else { self.q(alpha) };
        let mut best = (0.0, eval(0.0));
        for i in 0..points {
            let alpha = 10f64.powf(-9.0 + 16.0 * i as f64 / (points - 1) as f64);
            let q = eval(alpha);
            if q < best.1 {
                best = (alpha, q);
            }
        }
        best
    }
}

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.2
}

pub fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let gamma0 = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.5..1.5));
    let beta0 = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
    let prior = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
    let rz = random_spd(rng, 3);
    let err_cov = random_spd(rng, 3);
    ModelSpec::new(1000, beta0, gamma0, prior, 0.7, err_cov, rz).unwrap()
}

/// Active-set solution of `min (z - l)'A(z - l)` subject to `l_i >= 0` via
/// the bordered KKT system.
pub fn kkt_oracle(z: &DVector<f64>, a: &DMatrix<f64>, i: usize) -> DVector<f64> {
    if z[i] >= 0.0 {
        return z.clone();
    }
    let n = z.len();
    let mut kkt = DMatrix::zeros(n + 1, n + 1);
    kkt.view_mut((0, 0), (n, n)).copy_from(&(a * 2.0));
    kkt[(i, n)] = -1.0;
    kkt[(n, i)] = 1.0;
    let mut rhs = DVector::zeros(n + 1);
    rhs.rows_mut(0, n).copy_from(&(a * z * 2.0));
    let sol = kkt.lu().solve(&rhs).unwrap();
    assert!(sol[n] >= -1e-12, "multiplier must be nonnegative");
    sol.rows(0, n).clone_owned()
}

/// Newton iterations on dQ/dalpha from the grid estimate, so the test first
/// order condition holds to rounding.
pub fn polish_alpha(train: &DatasetView<'_>, test: &DatasetView<'_>, alpha: f64, prior: &DVector<f64>) -> f64 {
    let mut a = alpha;
    for _ in 0..50 {
        let qd = q_derivatives(train, test, a, prior).unwrap();
        let next = a - qd.d1 / qd.d2;
        if (next - a).abs() <= 1e-15 * a.max(1e-300) {
            break;
        }
        a = next;
    }
    a
}
