//! Random draws from the distributions used by the sampler.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, ChiSquared, Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, symmetrize};

pub fn std_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Gamma with shape/rate parameterization.
pub fn gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma shape and rate must be positive")
        .sample(rng)
}

/// Inverse-gamma with density proportional to `x^{-shape-1} exp(-rate / x)`.
pub fn inverse_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    1.0 / gamma(rng, shape, rate)
}

pub fn beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    Beta::new(a, b)
        .expect("beta parameters must be positive")
        .sample(rng)
}

/// Gaussian given in canonical form: precision `p` and linear term `b`.
/// Returns the mean `p^{-1} b` and one draw.
pub fn mvn_canonical<R: Rng + ?Sized>(
    rng: &mut R,
    p: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let chol = cholesky(p, "conditional precision")?;
    let mean = chol.solve(b);
    let z = std_normal_vec(rng, b.len());
    // L' x = z gives x with covariance (L L')^{-1}
    let lt = chol.l().transpose();
    let x = lt
        .solve_upper_triangular(&z)
        .ok_or(Error::SingularPrecision("conditional precision"))?;
    Ok((mean.clone(), mean + x))
}

/// Gaussian draw from mean and covariance.
pub fn mvn<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let chol = cholesky(cov, "covariance")?;
    Ok(mean + chol.l() * std_normal_vec(rng, mean.len()))
}

/// Inverse-Wishart with `df` degrees of freedom and scale matrix `scale`,
/// so the mean is `scale / (df - p - 1)`. Drawn by inverting a Bartlett
/// Wishart draw with scale `scale^{-1}`.
pub fn inverse_wishart<R: Rng + ?Sized>(
    rng: &mut R,
    df: f64,
    scale: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let p = scale.nrows();
    if df <= p as f64 - 1.0 {
        return Err(Error::InvalidConfig(format!(
            "inverse-Wishart needs df > {}, got {df}",
            p - 1
        )));
    }
    let mut s = scale.clone();
    symmetrize(&mut s);
    let chol = nalgebra::Cholesky::new(s).ok_or(Error::NonPdScale)?;
    let scale_inv = chol.inverse();
    let l = nalgebra::Cholesky::new(scale_inv)
        .ok_or(Error::NonPdScale)?
        .l();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).expect("positive chi-square df");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let la = l * a;
    let wishart = &la * la.transpose();
    let mut out = nalgebra::Cholesky::new(wishart)
        .ok_or(Error::NonPdScale)?
        .inverse();
    symmetrize(&mut out);
    Ok(out)
}

/// Correlation matrix from the LKJ distribution with shape `eta`, density
/// proportional to `det(R)^(eta - 1)`, using the C-vine construction.
pub fn lkj_correlation<R: Rng + ?Sized>(rng: &mut R, dim: usize, eta: f64) -> DMatrix<f64> {
    let mut partial = DMatrix::zeros(dim, dim);
    let mut out = DMatrix::identity(dim, dim);
    let mut b = eta + (dim as f64 - 1.0) / 2.0;
    for k in 0..dim.saturating_sub(1) {
        b -= 0.5;
        for i in (k + 1)..dim {
            partial[(k, i)] = 2.0 * beta(rng, b, b) - 1.0;
            let mut p = partial[(k, i)];
            for l in (0..k).rev() {
                p = p * ((1.0 - partial[(l, i)].powi(2)) * (1.0 - partial[(l, k)].powi(2))).sqrt()
                    + partial[(l, i)] * partial[(l, k)];
            }
            out[(k, i)] = p;
            out[(i, k)] = p;
        }
    }
    out
}
