//! Random-variate generation for the sampler: Chinese Restaurant Table,
//! gamma, Polya-Gamma, precision-parameterized multivariate normal, and
//! negative binomial draws.
//!
//! All samplers are pure functions of their parameters and the generator
//! state passed in, so callers get reproducibility by handing each work item
//! its own [`crate::rng::RngStream`].

use crate::error::{Error, Result};
use crate::scalar::Real;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson};

const TWO_PI_SQ: f64 = 2.0 * std::f64::consts::PI * std::f64::consts::PI;
const PI_SQ: f64 = std::f64::consts::PI * std::f64::consts::PI;

/// Chinese Restaurant Table draw: the number of tables after seating `n`
/// customers with concentration `r`.
///
/// ell = sum_{t=1..n} Bernoulli(r / (r + t - 1)); the first seat is taken
/// with probability one, so ell >= 1 whenever n >= 1.
pub fn sample_crt<T: Real, R: Rng + ?Sized>(n: u32, r: T, rng: &mut R) -> Result<u32> {
    if !(r > T::zero()) || !r.is_finite() {
        return Err(Error::domain(format!("CRT concentration must be positive, got {r}")));
    }
    if n == 0 {
        return Ok(0);
    }
    let mut tables = 1u32;
    for t in 1..n {
        let p = r / (r + T::of(t as f64));
        if T::open01(rng) < p {
            tables += 1;
        }
    }
    Ok(tables)
}

/// Analytic CRT mean: sum_{t=1..n} r / (r + t - 1).
pub fn crt_mean(n: u32, r: f64) -> f64 {
    (0..n).map(|t| r / (r + t as f64)).sum()
}

/// Gamma draw in the shape-scale convention (mean = shape * scale).
///
/// Marsaglia-Tsang squeeze for shape >= 1; shapes below one use the boost
/// Gamma(a) = Gamma(a + 1) * U^(1/a). Tiny-shape draws can underflow to
/// zero; those are clamped to the smallest positive normal so downstream
/// positivity invariants hold.
pub fn sample_gamma<T: Real, R: Rng + ?Sized>(shape: T, scale: T, rng: &mut R) -> Result<T> {
    if !(shape > T::zero()) || !shape.is_finite() {
        return Err(Error::domain(format!("gamma shape must be positive, got {shape}")));
    }
    if !(scale > T::zero()) || !scale.is_finite() {
        return Err(Error::domain(format!("gamma scale must be positive, got {scale}")));
    }
    let draw = sample_gamma_std(shape, rng) * scale;
    Ok(draw.max(T::tiny()))
}

/// Standard gamma (scale 1). `shape` must be positive.
fn sample_gamma_std<T: Real, R: Rng + ?Sized>(shape: T, rng: &mut R) -> T {
    if shape < T::one() {
        let boost = T::open01(rng).powf(T::one() / shape);
        return sample_gamma_std(shape + T::one(), rng) * boost;
    }
    let d = shape - T::of(1.0 / 3.0);
    let c = T::one() / (T::of(9.0) * d).sqrt();
    loop {
        let x = T::std_normal(rng);
        let t = T::one() + c * x;
        if t <= T::zero() {
            continue;
        }
        let v = t * t * t;
        let u = T::open01(rng);
        let x2 = x * x;
        if u < T::one() - T::of(0.0331) * x2 * x2 {
            return d * v;
        }
        if u.ln() < T::of(0.5) * x2 + d * (T::one() - v + v.ln()) {
            return d * v;
        }
    }
}

/// Polya-Gamma sampler based on the weighted infinite sum of gammas
///
///   omega = (1 / 2 pi^2) * sum_{k>=1} g_k / ((k - 1/2)^2 + c^2 / (4 pi^2)),
///   g_k ~ Gamma(b, 1),
///
/// truncated after `trunc` terms, with the dropped tail replaced by one
/// gamma draw matching the tail's exact mean and variance. The shape `b`
/// may be any positive real.
#[derive(Debug, Clone)]
pub struct PgSampler {
    trunc: usize,
    /// (k - 1/2)^2 for k = 1..=trunc.
    half_shift_sq: Vec<f64>,
}

impl PgSampler {
    pub fn new(trunc: usize) -> Self {
        assert!(trunc >= 1, "PG truncation level must be >= 1");
        PgSampler {
            trunc,
            half_shift_sq: (1..=trunc).map(|k| (k as f64 - 0.5).powi(2)).collect(),
        }
    }

    pub fn trunc(&self) -> usize {
        self.trunc
    }

    /// One draw from PG(b, c). Strictly positive.
    pub fn draw<T: Real, R: Rng + ?Sized>(&self, b: T, c: T, rng: &mut R) -> Result<T> {
        if !(b > T::zero()) || !b.is_finite() {
            return Err(Error::domain(format!("PG shape must be positive, got {b}")));
        }
        if !c.is_finite() {
            return Err(Error::NonFinite {
                context: "PG tilt parameter".to_string(),
            });
        }
        let cf = c.to_f64().unwrap_or(0.0);
        let a2 = cf * cf / (4.0 * PI_SQ);

        let mut sum = T::zero();
        let mut s1_part = 0.0f64;
        let mut s2_part = 0.0f64;
        for &hk in &self.half_shift_sq {
            let dk = hk + a2;
            let g = sample_gamma_std(b, rng);
            sum += g * T::of(1.0 / dk);
            s1_part += 1.0 / dk;
            s2_part += 1.0 / (dk * dk);
        }
        let mut omega = sum * T::of(1.0 / TWO_PI_SQ);

        // Moment-matched tail: remainder mean b*s1/(2 pi^2), variance
        // b*s2/(4 pi^4), with s1, s2 the tail sums of 1/d_k and 1/d_k^2.
        let (s1_inf, s2_inf) = pg_series_sums(cf);
        let s1_rem = (s1_inf - s1_part).max(0.0);
        let s2_rem = (s2_inf - s2_part).max(0.0);
        let bf = b.to_f64().unwrap_or(1.0);
        let mean_rem = bf * s1_rem / TWO_PI_SQ;
        let var_rem = bf * s2_rem / (4.0 * PI_SQ * PI_SQ);
        if mean_rem > 0.0 && var_rem > 0.0 {
            let shape = T::of(mean_rem * mean_rem / var_rem);
            let scale = T::of(var_rem / mean_rem);
            omega += sample_gamma_std(shape, rng) * scale;
        }
        Ok(omega.max(T::tiny()))
    }
}

/// Infinite sums sum_k 1/d_k and sum_k 1/d_k^2 over
/// d_k = (k - 1/2)^2 + c^2/(4 pi^2), in closed form.
fn pg_series_sums(c: f64) -> (f64, f64) {
    let c = c.abs();
    if c < 1e-4 {
        let c2 = c * c;
        // tanh(c/2)/c = 1/2 - c^2/24 + c^4/240
        // (sinh c - c) sech^2(c/2) / c^3 = 1/6 - c^2/30 + O(c^4)
        (
            PI_SQ * (0.5 - c2 / 24.0 + c2 * c2 / 240.0),
            PI_SQ * PI_SQ * (1.0 / 6.0 - c2 / 30.0),
        )
    } else {
        let th = (0.5 * c).tanh();
        let sech = 1.0 / (0.5 * c).cosh();
        let s1 = PI_SQ * th / c;
        let s2 = PI_SQ * PI_SQ * (2.0 * th - c * sech * sech) / (c * c * c);
        (s1, s2)
    }
}

/// Analytic PG(b, c) mean: (b / 2c) tanh(c / 2), with limit b/4 at c = 0.
pub fn pg_mean(b: f64, c: f64) -> f64 {
    let (s1, _) = pg_series_sums(c);
    b * s1 / TWO_PI_SQ
}

/// Analytic PG(b, c) variance: b (sinh c - c) sech^2(c/2) / (4 c^3), with
/// limit b/24 at c = 0.
pub fn pg_variance(b: f64, c: f64) -> f64 {
    let (_, s2) = pg_series_sums(c);
    b * s2 / (4.0 * PI_SQ * PI_SQ)
}

/// Laplace transform E[exp(-omega t)] of PG(b, c):
/// cosh^b(c/2) / cosh^b(sqrt((c^2/2 + t)/2)).
pub fn pg_laplace(b: f64, c: f64, t: f64) -> f64 {
    let arg = ((c * c / 2.0 + t) / 2.0).sqrt();
    // Work in logs to keep large b stable.
    (b * ((0.5 * c).cosh().ln() - arg.cosh().ln())).exp()
}

/// A multivariate-normal full conditional in precision form:
/// precision A, linear term b, distribution N(A^{-1} b, A^{-1}).
#[derive(Debug, Clone)]
pub struct GaussianConditional<T: Real> {
    pub precision: DMatrix<T>,
    pub linear: DVector<T>,
}

impl<T: Real> GaussianConditional<T> {
    /// Assemble from a diagonal prior precision and the accumulated
    /// weighted outer products of the data.
    pub fn assemble(
        prior_diag: &DVector<T>,
        mut data_precision: DMatrix<T>,
        linear: DVector<T>,
    ) -> Self {
        for i in 0..prior_diag.len() {
            data_precision[(i, i)] += prior_diag[i];
        }
        GaussianConditional {
            precision: data_precision,
            linear,
        }
    }

    fn factor(&self) -> Result<Cholesky<T, nalgebra::Dyn>> {
        Cholesky::new(self.precision.clone()).ok_or_else(|| Error::NotSpd {
            context: format!("{}x{} precision", self.precision.nrows(), self.precision.ncols()),
        })
    }

    /// Posterior mean and covariance via the Cholesky factor (no explicit
    /// inverse on the sampling path; the covariance here is for inspection
    /// and tests).
    pub fn mean_cov(&self) -> Result<(DVector<T>, DMatrix<T>)> {
        let chol = self.factor()?;
        let mean = chol.solve(&self.linear);
        let cov = chol.inverse();
        Ok((mean, cov))
    }

    /// Draw x = A^{-1} b + L^{-T} z with z standard normal and A = L L^T.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<T>> {
        let chol = self.factor()?;
        let mean = chol.solve(&self.linear);
        let z = DVector::from_fn(self.linear.len(), |_, _| T::std_normal(rng));
        let fluct = chol
            .l()
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has positive diagonal");
        Ok(mean + fluct)
    }
}

/// Draw from N(A^{-1} linear, A^{-1}) where
/// A = diag(prior_diag) + data_precision, solving through the Cholesky
/// factor of A.
pub fn sample_mvn_cholesky<T: Real, R: Rng + ?Sized>(
    linear: &DVector<T>,
    prior_diag: &DVector<T>,
    data_precision: &DMatrix<T>,
    rng: &mut R,
) -> Result<DVector<T>> {
    GaussianConditional::assemble(prior_diag, data_precision.clone(), linear.clone())
        .sample(rng)
}

/// Negative binomial draw via the gamma-Poisson mixture:
/// n ~ Poisson(lambda), lambda ~ Gamma(r, p/(1-p)).
pub fn sample_negative_binomial<T: Real, R: Rng + ?Sized>(
    r: T,
    p: T,
    rng: &mut R,
) -> Result<u64> {
    if !(r > T::zero()) || !r.is_finite() {
        return Err(Error::domain(format!("NB dispersion must be positive, got {r}")));
    }
    if !(p > T::zero() && p < T::one()) {
        return Err(Error::domain(format!("NB probability must lie in (0,1), got {p}")));
    }
    let odds = p / (T::one() - p);
    let lambda = sample_gamma(r, odds, rng)?.to_f64().unwrap_or(0.0);
    if lambda <= 0.0 {
        return Ok(0);
    }
    let pois = Poisson::new(lambda)
        .map_err(|_| Error::domain(format!("Poisson rate out of range: {lambda}")))?;
    Ok(pois.sample(rng) as u64)
}

/// Categorical draw over unnormalized non-negative weights.
pub fn sample_categorical<T: Real, R: Rng + ?Sized>(weights: &[T], rng: &mut R) -> Result<usize> {
    if weights.is_empty() {
        return Err(Error::domain("categorical weights are empty"));
    }
    let total: T = weights.iter().copied().sum();
    if !(total > T::zero()) || !total.is_finite() {
        return Err(Error::domain("categorical weights must sum to a positive value"));
    }
    let u = T::open01(rng) * total;
    let mut acc = T::zero();
    for (i, &w) in weights.iter().enumerate() {
        if w < T::zero() {
            return Err(Error::domain("categorical weights must be non-negative"));
        }
        acc += w;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(weights.len() - 1)
}
