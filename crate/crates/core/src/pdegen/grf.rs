use std::f64::consts::PI;

use nopt_diff::fft::{half_width, irfft2};
use nopt_diff::Complex;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signed wavenumber of FFT index `i` on an axis of length `n`. The Nyquist
/// index maps to `+n/2`.
pub fn wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Spectral Gaussian random field with amplitude
/// `σ₀·(4π²|k|² + τ²)^(−α/2)` on every mode except the zero and Nyquist modes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrfSpec {
    pub alpha: f64,
    pub tau: f64,
    /// Fixed amplitude scale; `None` picks the one giving unit point variance.
    pub sigma: Option<f64>,
}

impl Default for GrfSpec {
    fn default() -> Self {
        Self {
            alpha: 2.5,
            tau: 7.0,
            sigma: None,
        }
    }
}

/// Modes that carry energy: not the zero mode, not on a Nyquist row/column.
fn carries(ky: usize, kx: usize, h: usize, w: usize) -> bool {
    !(ky == 0 && kx == 0) && ky != h / 2 && kx != w / 2
}

impl GrfSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) || !(self.tau > 0.0) || self.sigma.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Param(format!("GRF needs alpha > 1, tau > 0: {self:?}")));
        }
        Ok(())
    }

    fn amplitude(&self, ky: usize, kx: usize, h: usize, w: usize) -> f64 {
        let (a, b) = (wavenumber(ky, h), wavenumber(kx, w));
        (4.0 * PI * PI * (a * a + b * b) + self.tau * self.tau).powf(-self.alpha / 2.0)
    }

    /// `Σ a(k)²` over the full spectrum of energy-carrying modes.
    fn spectral_sum(&self, h: usize, w: usize) -> f64 {
        let mut s = 0.0;
        for ky in 0..h {
            for kx in 0..w {
                if carries(ky, kx, h, w) {
                    s += self.amplitude(ky, kx, h, w).powi(2);
                }
            }
        }
        s
    }

    pub fn sigma0(&self, h: usize, w: usize) -> f64 {
        self.sigma.unwrap_or_else(|| 1.0 / self.spectral_sum(h, w).sqrt())
    }

    /// Expected point variance `σ₀² Σ a(k)²`.
    pub fn variance(&self, h: usize, w: usize) -> f64 {
        self.sigma0(h, w).powi(2) * self.spectral_sum(h, w)
    }

    /// One zero-mean real field of `h·w` values (row-major).
    pub fn sample<R: Rng>(&self, h: usize, w: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.validate()?;
        let wh = half_width(w);
        let scale = self.sigma0(h, w) * (h * w) as f64 / 2f64.sqrt();
        let mut spec = vec![Complex::new(0.0, 0.0); h * wh];
        for ky in 0..h {
            for kx in 0..wh {
                if !carries(ky, kx, h, w) {
                    continue;
                }
                // In the kx = 0 column only the upper half is free; the lower
                // half is its conjugate mirror.
                if kx == 0 && ky > h / 2 {
                    continue;
                }
                let g1: f64 = rng.sample(StandardNormal);
                let g2: f64 = rng.sample(StandardNormal);
                let a = scale * self.amplitude(ky, kx, h, w);
                spec[ky * wh + kx] = Complex::new(a * g1, a * g2);
            }
        }
        for ky in 1..h / 2 {
            spec[(h - ky) * wh] = spec[ky * wh].conj();
        }
        Ok(irfft2(&spec, h, w)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_seed_same_field() {
        let g = GrfSpec::default();
        let a = g.sample(32, 32, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = g.sample(32, 32, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spatial_mean_is_zero() {
        let g = GrfSpec::default();
        let f = g.sample(64, 64, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        assert!(mean.abs() < 1e-12, "{mean}");
    }

    #[test]
    fn rejects_bad_spectrum() {
        let g = GrfSpec {
            alpha: 0.5,
            ..GrfSpec::default()
        };
        assert!(g.sample(8, 8, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn default_scale_gives_unit_variance() {
        assert!((GrfSpec::default().variance(64, 64) - 1.0).abs() < 1e-12);
    }
}
