//! Log-normal mixture survival functions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::graph::normal_cdf;

/// Mixture parameters for one patient and one endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    /// Component weights; sum to one.
    pub weights: Vec<f64>,
    /// Location of ln T (log-months).
    pub mu: Vec<f64>,
    /// Scale of ln T; strictly positive.
    pub sigma: Vec<f64>,
}

/// Months 0..=60, the grid used for served curves.
pub fn serving_grid() -> Vec<f64> {
    (0..=60).map(|m| m as f64).collect()
}

impl MixtureParams {
    pub fn single(mu: f64, sigma: f64) -> Self {
        MixtureParams {
            weights: vec![1.0],
            mu: vec![mu],
            sigma: vec![sigma],
        }
    }

    /// S(t) = Σ π_k (1 − Φ((ln t − μ_k) / σ_k)) for t > 0.
    pub fn survival(&self, t: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!(
                "survival time must be positive, got {t}"
            )));
        }
        Ok(self.survival_unchecked(t))
    }

    fn survival_unchecked(&self, t: f64) -> f64 {
        let lt = t.ln();
        let s: f64 = self
            .weights
            .iter()
            .zip(&self.mu)
            .zip(&self.sigma)
            .map(|((w, m), s)| w * (1.0 - normal_cdf((lt - m) / s)))
            .sum();
        s.clamp(0.0, 1.0)
    }

    /// Survival on a strictly increasing grid of positive times.
    pub fn curve(&self, grid: &[f64]) -> Result<Vec<f64>> {
        if let Some(w) = grid.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(Error::Domain(format!(
                "time grid must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        grid.iter().map(|&t| self.survival(t)).collect()
    }

    /// Curve on a grid that may start at 0, where S(0) = 1.
    pub fn curve_from_zero(&self, grid: &[f64]) -> Result<Vec<f64>> {
        match grid.first() {
            Some(&t0) if t0 == 0.0 => {
                let mut out = vec![1.0];
                out.extend(self.curve(&grid[1..])?);
                Ok(out)
            }
            _ => self.curve(grid),
        }
    }

    /// Time t with S(t) = 0.5, by bisection on ln t.
    pub fn median(&self) -> f64 {
        let (mut lo, mut hi) = (-20.0_f64, 20.0_f64);
        for (m, s) in self.mu.iter().zip(&self.sigma) {
            lo = lo.min(m - 10.0 * s);
            hi = hi.max(m + 10.0 * s);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.survival_unchecked(mid.exp()) > 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi)).exp()
    }

    /// Log-likelihood of one observation: log f(t) for events, log S(t) if censored.
    pub fn log_likelihood(&self, t: f64, event: bool) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("time must be positive, got {t}")));
        }
        let lt = t.ln();
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.mu)
            .zip(&self.sigma)
            .map(|((w, m), s)| {
                let z = (lt - m) / s;
                let comp = if event {
                    crate::tensor::graph::normal_log_pdf(z) - s.ln() - lt
                } else {
                    crate::tensor::graph::normal_log_sf(z)
                };
                w.ln() + comp
            })
            .collect();
        Ok(crate::tensor::graph::logsumexp(&terms))
    }
}
