//! EDM preconditioning coefficients and the matching loss weight.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct EdmParams {
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for EdmParams {
    fn default() -> Self {
        EdmParams {
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

impl EdmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_data > 0.0) {
            return Err(Error::invalid("sigma_data must be positive"));
        }
        if !(self.p_std > 0.0) {
            return Err(Error::invalid("p_std must be positive"));
        }
        Ok(())
    }
}

/// (c_skip, c_out, c_in, c_noise) so that
/// D(x; sigma) = c_skip * x + c_out * F(c_in * x; c_noise, cond).
pub fn precondition_coeffs(sigma: f64, p: &EdmParams) -> Result<(f64, f64, f64, f64)> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let sd2 = p.sigma_data * p.sigma_data;
    let s2 = sigma * sigma;
    let c_skip = sd2 / (s2 + sd2);
    let c_out = sigma * p.sigma_data / (s2 + sd2).sqrt();
    let c_in = 1.0 / (s2 + sd2).sqrt();
    let c_noise = sigma.ln() / 4.0;
    Ok((c_skip, c_out, c_in, c_noise))
}

/// lambda(sigma) = (sigma^2 + sigma_d^2) / (sigma * sigma_d)^2; satisfies
/// lambda(sigma) * c_out(sigma)^2 = 1 exactly.
pub fn loss_weight(sigma: f64, p: &EdmParams) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("sigma must be positive"));
    }
    let sd2 = p.sigma_data * p.sigma_data;
    let s2 = sigma * sigma;
    Ok((s2 + sd2) / (s2 * sd2))
}
