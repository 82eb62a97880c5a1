//! Spectral solvers for the periodic anisotropic Poisson and screened
//! Helmholtz problems on the unit square.

use std::f64::consts::PI;

use nopt_diff::fft::{half_width, irfft2, rfft2};
use serde::{Deserialize, Serialize};

use super::grf::wavenumber;
use crate::error::{Error, Result};

/// Constant symmetric diffusion tensor `K = R·diag(λ₁, λ₂)·Rᵀ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonParams {
    pub k11: f64,
    pub k22: f64,
    pub k12: f64,
    pub eigen: [i64; 2],
    pub theta: f64,
}

impl PoissonParams {
    pub fn from_eigen(l1: i64, l2: i64, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let (a, b) = (l1 as f64, l2 as f64);
        Self {
            k11: a * c * c + b * s * s,
            k22: a * s * s + b * c * c,
            k12: (a - b) * c * s,
            eigen: [l1, l2],
            theta,
        }
    }

    pub fn identity() -> Self {
        Self::from_eigen(1, 1, 0.0)
    }

    pub fn is_spd(&self) -> bool {
        self.k11 > 0.0 && self.k11 * self.k22 - self.k12 * self.k12 > 0.0
    }

    fn symbol(&self, ky: f64, kx: f64) -> f64 {
        4.0 * PI * PI * (self.k11 * kx * kx + 2.0 * self.k12 * kx * ky + self.k22 * ky * ky)
    }
}

/// Multiplies the half spectrum of `x` by `m(ky, kx)` and transforms back.
fn apply_symbol(x: &[f64], h: usize, w: usize, m: impl Fn(usize, usize) -> f64) -> Result<Vec<f64>> {
    let wh = half_width(w);
    let mut spec = rfft2(x, h, w)?;
    for ky in 0..h {
        for kx in 0..wh {
            spec[ky * wh + kx] *= m(ky, kx);
        }
    }
    Ok(irfft2(&spec, h, w)?)
}

/// The cross term `2K₁₂kₓk_y` is odd in each wavenumber, so Nyquist rows and
/// columns have no consistent real symbol; both the solver and the operator
/// drop them.
fn nyquist(ky: usize, kx: usize, h: usize, w: usize) -> bool {
    ky == h / 2 || kx == w / 2
}

/// Solves `−div K∇u = f` with periodic boundaries and a zero-mean solution.
pub fn solve_poisson(p: &PoissonParams, f: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if !p.is_spd() {
        return Err(Error::Param(format!("K is not positive definite: {p:?}")));
    }
    apply_symbol(f, h, w, |ky, kx| {
        if (ky == 0 && kx == 0) || nyquist(ky, kx, h, w) {
            0.0
        } else {
            1.0 / p.symbol(wavenumber(ky, h), wavenumber(kx, w))
        }
    })
}

/// Applies `−div K∇` spectrally, on the same modes the solver keeps.
pub fn poisson_operator(p: &PoissonParams, u: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    apply_symbol(u, h, w, |ky, kx| {
        if nyquist(ky, kx, h, w) {
            0.0
        } else {
            p.symbol(wavenumber(ky, h), wavenumber(kx, w))
        }
    })
}

fn helmholtz_symbol(omega: f64, ky: f64, kx: f64) -> f64 {
    4.0 * PI * PI * (kx * kx + ky * ky) + omega
}

/// Solves `−Δu + ωu = f` with periodic boundaries, zero mode included.
pub fn solve_helmholtz(omega: f64, f: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if !(omega > 0.0) {
        return Err(Error::Param(format!("Helmholtz needs omega > 0, got {omega}")));
    }
    apply_symbol(f, h, w, |ky, kx| {
        1.0 / helmholtz_symbol(omega, wavenumber(ky, h), wavenumber(kx, w))
    })
}

pub fn helmholtz_operator(omega: f64, u: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    apply_symbol(u, h, w, |ky, kx| helmholtz_symbol(omega, wavenumber(ky, h), wavenumber(kx, w)))
}

/// `‖a − b‖₂ / ‖b‖₂`.
pub fn relative_residual(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}
