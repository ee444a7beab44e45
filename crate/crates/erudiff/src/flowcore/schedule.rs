use crate::error::{Error, Result};

/// Inference timestep grid. `taus` runs from 1.0 (pure noise) down to 0.0
/// (clean) with `t_inference + 1` entries, strictly decreasing. The clamp
/// fractions bound the matching-time draw within each interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub taus: Vec<f64>,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

impl Schedule {
    /// Uniform grid with the default 0.02 / 0.98 clamps.
    pub fn uniform(t_inference: usize) -> Result<Self> {
        if t_inference == 0 {
            return Err(Error::invalid("t_inference must be >= 1"));
        }
        let taus = (0..=t_inference)
            .map(|i| 1.0 - i as f64 / t_inference as f64)
            .collect();
        let s = Schedule {
            taus,
            clamp_lo: 0.02,
            clamp_hi: 0.98,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn t_inference(&self) -> usize {
        self.taus.len() - 1
    }

    /// Noise level reached after `n_steps` denoising steps from t = 1.
    pub fn tau_after(&self, n_steps: usize) -> f64 {
        self.taus[n_steps]
    }

    pub fn validate(&self) -> Result<()> {
        if self.taus.len() < 2 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if self.taus[0] != 1.0 || *self.taus.last().unwrap() != 0.0 {
            return Err(Error::invalid("taus must run from 1.0 to 0.0"));
        }
        if self.taus.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("taus must be strictly decreasing"));
        }
        if !(0.0 < self.clamp_lo && self.clamp_lo < self.clamp_hi && self.clamp_hi < 1.0) {
            return Err(Error::invalid("need 0 < clamp_lo < clamp_hi < 1"));
        }
        Ok(())
    }
}
