//! Inverse-Wishart draws by the Bartlett decomposition.

use nalgebra::Matrix2;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Draw `Σ ~ IW(df, scale)` (mean `scale / (df − 3)` for 2×2), i.e.
/// `Σ⁻¹ ~ Wishart(df, scale⁻¹)`.
pub fn inverse_wishart(df: f64, scale: &Matrix2<f64>, rng: &mut Rng, iteration: usize) -> Result<Matrix2<f64>> {
    let not_pd = |context: &str| Error::NotPositiveDefinite {
        context: context.to_string(),
        iteration: Some(iteration),
    };
    if !(df > 1.0) {
        return Err(Error::InvalidArgument(format!("inverse-Wishart df must exceed 1, got {df}")));
    }
    let inv = scale.try_inverse().ok_or_else(|| not_pd("inverse-Wishart scale"))?;
    let l = inv
        .cholesky()
        .ok_or_else(|| not_pd("inverse-Wishart scale"))?
        .l();
    let c1: f64 = ChiSquared::new(df).expect("df > 1").sample(rng);
    let c2: f64 = ChiSquared::new(df - 1.0).expect("df > 1").sample(rng);
    let z: f64 = StandardNormal.sample(rng);
    let a = Matrix2::new(c1.sqrt(), 0.0, z, c2.sqrt());
    let la = l * a;
    let w = la * la.transpose();
    let sigma = w.try_inverse().ok_or_else(|| not_pd("inverse-Wishart draw"))?;
    let sigma = (sigma + sigma.transpose()) * 0.5;
    if sigma.cholesky().is_none() {
        return Err(not_pd("inverse-Wishart draw"));
    }
    Ok(sigma)
}
