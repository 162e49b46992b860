//! Zero-inflated negative binomial likelihood and the Gaussian KL used for the
//! library-size channel.
//!
//! NB is parameterized by mean `μ` and dispersion `α` (variance `μ + αμ²`).
//! The zero-inflation weight `π` is only ever handled through its logit `l`.
//! On the tape, means and inverse dispersions are carried in log space:
//! `log(1 + αμ)` then becomes `softplus(log μ − log θ)` with `θ = 1/α`.

use crate::ndgrad::{DiffArray, GradError, Matrix};
use crate::special::ln_gamma;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CountError {
    #[error("mean must be positive, got {0}")]
    NonPositiveMean(f64),
    #[error("dispersion must be positive, got {0}")]
    NonPositiveDispersion(f64),
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("counts must be non-negative integers, got {0}")]
    InvalidCount(f64),
    #[error("zinb parameter shapes disagree: {0}")]
    Shape(String),
    #[error(transparent)]
    Grad(#[from] GradError),
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log f_NB(x; μ, α)`.
pub fn nb_log_pmf(x: u64, mu: f64, alpha: f64) -> Result<f64, CountError> {
    if mu <= 0.0 || mu.is_nan() {
        return Err(CountError::NonPositiveMean(mu));
    }
    if alpha <= 0.0 || alpha.is_nan() {
        return Err(CountError::NonPositiveDispersion(alpha));
    }
    let theta = 1.0 / alpha;
    let am = alpha * mu;
    let log1p_am = am.ln_1p();
    let xf = x as f64;
    let mut out = ln_gamma(xf + theta) - ln_gamma(theta) - ln_gamma(xf + 1.0) - theta * log1p_am;
    if x > 0 {
        out += xf * (am.ln() - log1p_am);
    }
    Ok(out)
}

/// `log f_ZINB(x; μ, α, π = sigmoid(l))`, via the softplus form.
pub fn zinb_log_pmf(x: u64, mu: f64, alpha: f64, logit: f64) -> Result<f64, CountError> {
    if x == 0 {
        if mu <= 0.0 || mu.is_nan() {
            return Err(CountError::NonPositiveMean(mu));
        }
        if alpha <= 0.0 || alpha.is_nan() {
            return Err(CountError::NonPositiveDispersion(alpha));
        }
        let log_p0 = -(alpha * mu).ln_1p() / alpha;
        Ok(-softplus(-logit) + softplus(-logit + log_p0))
    } else {
        Ok(-softplus(-logit) - logit + nb_log_pmf(x, mu, alpha)?)
    }
}

/// Decoder output distribution over a `cells × genes` count matrix.
#[derive(Clone, Debug)]
pub struct ZinbParams {
    log_mu: DiffArray,
    /// `log θ = log(1/α)` per gene, `1 × genes`.
    log_theta: DiffArray,
    logit: DiffArray,
}

impl ZinbParams {
    /// From log-means, per-gene log inverse dispersions and dropout logits.
    pub fn from_log_parts(log_mu: DiffArray, log_theta: DiffArray, logit: DiffArray) -> Result<Self, CountError> {
        let [r, c] = log_mu.shape();
        if logit.shape() != [r, c] || log_theta.shape() != [1, c] {
            return Err(CountError::Shape(format!(
                "log_mu {:?}, logit {:?}, log_theta {:?}",
                log_mu.shape(),
                logit.shape(),
                log_theta.shape()
            )));
        }
        Ok(Self {
            log_mu,
            log_theta,
            logit,
        })
    }

    /// From means `μ` (`cells × genes`), dispersions `α` (`1 × genes`) and
    /// logits. Both `μ` and `α` must be strictly positive.
    pub fn new(mu: &DiffArray, alpha: &DiffArray, logit: &DiffArray) -> Result<Self, CountError> {
        if let Some(&bad) = mu.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(CountError::NonPositiveMean(bad));
        }
        if let Some(&bad) = alpha.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(CountError::NonPositiveDispersion(bad));
        }
        Self::from_log_parts(mu.log()?, alpha.log()?.neg()?, logit.clone())
    }

    pub fn log_mu(&self) -> &DiffArray {
        &self.log_mu
    }

    pub fn log_theta(&self) -> &DiffArray {
        &self.log_theta
    }

    pub fn logit(&self) -> &DiffArray {
        &self.logit
    }

    pub fn mu(&self) -> Matrix {
        self.log_mu.value().map(f64::exp)
    }

    /// Per-gene dispersion `α = exp(−log θ)`.
    pub fn alpha(&self) -> Matrix {
        self.log_theta.value().map(|v| (-v).exp())
    }

    pub fn shape(&self) -> [usize; 2] {
        self.log_mu.shape()
    }
}

/// Checks that `x` holds non-negative integers.
pub fn validate_counts(x: &Matrix) -> Result<(), CountError> {
    match x.data().iter().find(|&&v| !(v >= 0.0 && v.fract() == 0.0 && v.is_finite())) {
        Some(&bad) => Err(CountError::InvalidCount(bad)),
        None => Ok(()),
    }
}

/// Per-cell ZINB log-likelihood, summed over genes (`cells × 1`).
pub fn zinb_log_likelihood_rows(x: &Matrix, params: &ZinbParams) -> Result<DiffArray, CountError> {
    if x.shape() != params.shape() {
        return Err(CountError::Shape(format!(
            "counts {:?} vs params {:?}",
            x.shape(),
            params.shape()
        )));
    }
    validate_counts(x)?;
    let shape = x.shape();
    let counts = DiffArray::constant(x.clone());
    let zero_mask = DiffArray::constant(x.map(|v| if v == 0.0 { 1.0 } else { 0.0 }));
    let nonzero_mask = DiffArray::constant(x.map(|v| if v == 0.0 { 0.0 } else { 1.0 }));
    let lgamma_x1 = DiffArray::constant(x.map(|v| ln_gamma(v + 1.0)));

    let (log_mu, log_theta, logit) = (&params.log_mu, &params.log_theta, &params.logit);
    let theta = log_theta.exp()?;
    let theta_full = theta.broadcast_to(shape)?;
    // log(1 + αμ)
    let log1p_am = log_mu.sub(log_theta)?.softplus()?;
    let theta_log1p = theta_full.mul(&log1p_am)?;
    let log_pi = logit.neg()?.softplus()?.neg()?;

    let zero_case = log_pi.add(&logit.neg()?.sub(&theta_log1p)?.softplus()?)?;

    let nb = counts
        .add(&theta_full)?
        .lgamma()?
        .sub(&theta.lgamma()?)?
        .sub(&lgamma_x1)?
        .sub(&theta_log1p)?
        .add(&counts.mul(&log_mu.sub(log_theta)?.sub(&log1p_am)?)?)?;
    let positive_case = log_pi.sub(logit)?.add(&nb)?;

    let ll = zero_mask.mul(&zero_case)?.add(&nonzero_mask.mul(&positive_case)?)?;
    Ok(ll.sum_cols()?)
}

/// Total ZINB log-likelihood over all entries.
pub fn zinb_log_likelihood(x: &Matrix, params: &ZinbParams) -> Result<DiffArray, CountError> {
    Ok(zinb_log_likelihood_rows(x, params)?.sum()?)
}

/// `N(μ_s, σ_s)` per cell against the dataset-level `N(μ_G, σ_G)`.
#[derive(Clone, Debug)]
pub struct GaussPair {
    /// `cells × 1`
    pub mu_s: DiffArray,
    /// `cells × 1`, `σ_s = exp(log_sigma_s)`
    pub log_sigma_s: DiffArray,
    pub mu_g: f64,
    pub sigma_g: f64,
}

impl GaussPair {
    pub fn new(mu_s: DiffArray, log_sigma_s: DiffArray, mu_g: f64, sigma_g: f64) -> Result<Self, CountError> {
        if sigma_g <= 0.0 || sigma_g.is_nan() {
            return Err(CountError::NonPositiveSigma(sigma_g));
        }
        if mu_s.shape() != log_sigma_s.shape() {
            return Err(CountError::Shape(format!(
                "mu_s {:?} vs log_sigma_s {:?}",
                mu_s.shape(),
                log_sigma_s.shape()
            )));
        }
        Ok(Self {
            mu_s,
            log_sigma_s,
            mu_g,
            sigma_g,
        })
    }

    /// From a positive `σ_s` rather than its log.
    pub fn with_sigma(mu_s: DiffArray, sigma_s: &DiffArray, mu_g: f64, sigma_g: f64) -> Result<Self, CountError> {
        if let Some(&bad) = sigma_s.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(CountError::NonPositiveSigma(bad));
        }
        Self::new(mu_s, sigma_s.log()?, mu_g, sigma_g)
    }
}

/// Closed-form `KL(N(μ_s, σ_s²) ‖ N(μ_G, σ_G²))` for each cell.
pub fn gaussian_kl_rows(pair: &GaussPair) -> Result<DiffArray, CountError> {
    let var_g = pair.sigma_g * pair.sigma_g;
    let spread = pair.log_sigma_s.mul_scalar(2.0)?.exp()?;
    let offset = pair.mu_s.add_scalar(-pair.mu_g)?.square()?;
    Ok(spread
        .add(&offset)?
        .mul_scalar(0.5 / var_g)?
        .sub(&pair.log_sigma_s)?
        .add_scalar(pair.sigma_g.ln() - 0.5)?)
}

/// Summed over cells.
pub fn gaussian_kl(pair: &GaussPair) -> Result<DiffArray, CountError> {
    Ok(gaussian_kl_rows(pair)?.sum()?)
}

/// Scalar form of [`gaussian_kl`].
pub fn gaussian_kl_scalar(mu_s: f64, sigma_s: f64, mu_g: f64, sigma_g: f64) -> Result<f64, CountError> {
    for s in [sigma_s, sigma_g] {
        if s <= 0.0 || s.is_nan() {
            return Err(CountError::NonPositiveSigma(s));
        }
    }
    Ok((sigma_g / sigma_s).ln() + (sigma_s * sigma_s + (mu_s - mu_g).powi(2)) / (2.0 * sigma_g * sigma_g) - 0.5)
}
