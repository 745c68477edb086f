use rand::Rng;
use rand_distr::StandardNormal;

use super::require;
use crate::error::Result;
use crate::rng::SimRng;

/// Ornstein-Uhlenbeck wind `dZ = θ(α − Z) dt + ϑ dW`, discretised by
/// Euler-Maruyama with step `tau`; `Z_0 ~ U[z0_low, z0_high]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuSpec {
    pub theta: f64,
    pub alpha: f64,
    pub vartheta: f64,
    pub tau: f64,
    pub z0_low: f64,
    pub z0_high: f64,
}

impl Default for OuSpec {
    fn default() -> Self {
        Self {
            theta: 1.0,
            alpha: 0.0,
            vartheta: 1.0,
            tau: 0.04,
            z0_low: -0.5,
            z0_high: 0.5,
        }
    }
}

impl OuSpec {
    pub fn validate(&self) -> Result<()> {
        require("theta", self.theta >= 0.0, "must be non-negative")?;
        require("vartheta", self.vartheta >= 0.0, "must be non-negative")?;
        require("tau", self.tau > 0.0, "must be positive")?;
        require("z0_low", self.z0_low <= self.z0_high, "must not exceed z0_high")?;
        require(
            "alpha",
            self.alpha.is_finite() && self.z0_low.is_finite() && self.z0_high.is_finite(),
            "must be finite",
        )
    }

    /// One Euler-Maruyama step driven by the standard normal draw `eps`.
    #[inline]
    pub fn step(&self, z: f64, eps: f64) -> f64 {
        z + self.theta * (self.alpha - z) * self.tau + self.vartheta * self.tau.sqrt() * eps
    }

    pub fn sample_initial(&self, rng: &mut SimRng) -> f64 {
        if self.z0_low == self.z0_high {
            self.z0_low
        } else {
            rng.random_range(self.z0_low..self.z0_high)
        }
    }

    /// `Z_0` followed by `steps` further values.
    pub fn sample(&self, steps: usize, rng: &mut SimRng) -> (f64, Vec<f64>) {
        let z0 = self.sample_initial(rng);
        let mut z = z0;
        let values = (0..steps)
            .map(|_| {
                let eps: f64 = rng.sample(StandardNormal);
                z = self.step(z, eps);
                z
            })
            .collect();
        (z0, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn euler_step_arithmetic() {
        let ou = OuSpec {
            theta: 1.0,
            alpha: 0.0,
            vartheta: 1.0,
            tau: 0.04,
            ..Default::default()
        };
        assert!((ou.step(1.0, 0.0) - 0.96).abs() < 1e-15);
    }

    #[test]
    fn degenerate_process_is_zero() {
        let ou = OuSpec {
            vartheta: 0.0,
            alpha: 0.0,
            z0_low: 0.0,
            z0_high: 0.0,
            ..Default::default()
        };
        let (z0, values) = ou.sample(50, &mut rng::stream(3, &[]));
        assert_eq!(z0, 0.0);
        assert!(values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            OuSpec { theta: -1.0, ..Default::default() },
            OuSpec { vartheta: -0.1, ..Default::default() },
            OuSpec { tau: 0.0, ..Default::default() },
            OuSpec { z0_low: 1.0, z0_high: 0.0, ..Default::default() },
        ];
        for spec in bad {
            assert!(spec.validate().is_err(), "{spec:?}");
        }
    }

    // Long-run variance of the discretised recursion: ϑ²τ / (1 − (1 − θτ)²).
    #[test]
    fn stationary_variance_matches_recursion() {
        let ou = OuSpec::default();
        let mut rng = rng::stream(9, &[]);
        let (_, values) = ou.sample(200_000, &mut rng);
        let tail = &values[1000..];
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tail.len() as f64;
        let rho: f64 = 1.0 - ou.theta * ou.tau;
        let expected = ou.vartheta.powi(2) * ou.tau / (1.0 - rho * rho);
        assert!((var - expected).abs() / expected < 0.05, "{var} vs {expected}");
    }
}
