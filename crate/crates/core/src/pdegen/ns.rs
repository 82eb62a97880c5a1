//! Pseudo-spectral vorticity solver for 2D incompressible flow on the unit
//! torus. Viscosity is Crank–Nicolson; advection and forcing use Heun's
//! two-stage method. Advection is evaluated in flux form, `∇·(v w)`, on
//! 2/3-truncated fields, so the mean vorticity only moves with the forcing.

use std::f64::consts::PI;

use nopt_diff::fft::{half_width, irfft2, rfft2};
use nopt_diff::Complex;
use serde::{Deserialize, Serialize};

use super::grf::wavenumber;
use super::SimTrajectory;
use crate::error::{Error, Result};

type C64 = Complex<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsParams {
    pub re: f64,
    pub nu: f64,
    /// Scale of the vorticity forcing `sin(2π(x+y)) + cos(2π(x+y))`.
    pub forcing: f64,
    pub cfl_safety: f64,
    pub dt_max: f64,
    /// A CFL step below this aborts the run.
    pub dt_min: f64,
    /// Apply the 2/3 rule to the nonlinear product.
    pub dealias: bool,
}

impl NsParams {
    pub fn from_re(re: f64) -> Self {
        Self {
            re,
            nu: 1.0 / re,
            forcing: 0.1,
            cfl_safety: 0.5,
            dt_max: 1e-2,
            dt_min: 1e-7,
            dealias: true,
        }
    }

    pub fn unforced(mut self) -> Self {
        self.forcing = 0.0;
        self
    }
}

struct Spectral {
    h: usize,
    w: usize,
    kx: Vec<f64>,
    ky: Vec<f64>,
    /// `4π²|k|²` per half-spectrum entry.
    lap: Vec<f64>,
    keep: Vec<bool>,
}

impl Spectral {
    fn new(h: usize, w: usize, dealias: bool) -> Self {
        let wh = half_width(w);
        let mut kx = Vec::with_capacity(h * wh);
        let mut ky = Vec::with_capacity(h * wh);
        let mut lap = Vec::with_capacity(h * wh);
        let mut keep = Vec::with_capacity(h * wh);
        let (cy, cx) = (h as f64 / 3.0, w as f64 / 3.0);
        for j in 0..h {
            for i in 0..wh {
                let (a, b) = (wavenumber(j, h), wavenumber(i, w));
                ky.push(a);
                kx.push(b);
                lap.push(4.0 * PI * PI * (a * a + b * b));
                let inside = a.abs() < cy && b.abs() < cx;
                keep.push(!dealias || inside);
            }
        }
        Self {
            h,
            w,
            kx,
            ky,
            lap,
            keep,
        }
    }

    fn ik(k: f64) -> C64 {
        C64::new(0.0, 2.0 * PI * k)
    }

    /// Velocity `(∂yψ, −∂xψ)` from the vorticity spectrum.
    fn velocity(&self, what: &[C64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = what.len();
        let mut uh = vec![C64::new(0.0, 0.0); n];
        let mut vh = vec![C64::new(0.0, 0.0); n];
        for i in 0..n {
            if self.lap[i] == 0.0 || !self.keep[i] {
                continue;
            }
            let psi = what[i] / self.lap[i];
            uh[i] = Self::ik(self.ky[i]) * psi;
            vh[i] = -Self::ik(self.kx[i]) * psi;
        }
        Ok((irfft2(&uh, self.h, self.w)?, irfft2(&vh, self.h, self.w)?))
    }

    /// Spectrum of `−∇·(v w) + f`.
    fn tendency(&self, what: &[C64], forcing: &[C64]) -> Result<Vec<C64>> {
        let (u, v) = self.velocity(what)?;
        let wt: Vec<C64> = what
            .iter()
            .zip(&self.keep)
            .map(|(&z, &k)| if k { z } else { C64::new(0.0, 0.0) })
            .collect();
        let wp = irfft2(&wt, self.h, self.w)?;
        let uw: Vec<f64> = u.iter().zip(&wp).map(|(a, b)| a * b).collect();
        let vw: Vec<f64> = v.iter().zip(&wp).map(|(a, b)| a * b).collect();
        let uwh = rfft2(&uw, self.h, self.w)?;
        let vwh = rfft2(&vw, self.h, self.w)?;
        Ok((0..what.len())
            .map(|i| {
                let adv = if self.keep[i] {
                    Self::ik(self.kx[i]) * uwh[i] + Self::ik(self.ky[i]) * vwh[i]
                } else {
                    C64::new(0.0, 0.0)
                };
                forcing[i] - adv
            })
            .collect())
    }

    /// Largest CFL-stable step for the current velocity.
    fn cfl_rate(&self, what: &[C64]) -> Result<f64> {
        let (u, v) = self.velocity(what)?;
        let (dx, dy) = (1.0 / self.w as f64, 1.0 / self.h as f64);
        Ok(u.iter()
            .zip(&v)
            .map(|(a, b)| a.abs() / dx + b.abs() / dy)
            .fold(0.0, f64::max))
    }
}

/// `sin(2π(x+y)) + cos(2π(x+y))` scaled by `amplitude`.
pub fn forcing_field(h: usize, w: usize, amplitude: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for j in 0..h {
        for i in 0..w {
            let th = 2.0 * PI * (i as f64 / w as f64 + j as f64 / h as f64);
            out.push(amplitude * (th.sin() + th.cos()));
        }
    }
    out
}

/// Kinetic energy `½⟨w ψ⟩` (grid mean) of a vorticity field.
pub fn energy(w0: &[f64], h: usize, w: usize) -> Result<f64> {
    let sp = Spectral::new(h, w, false);
    let mut psi = rfft2(w0, h, w)?;
    for (z, &l) in psi.iter_mut().zip(&sp.lap) {
        *z = if l == 0.0 { C64::new(0.0, 0.0) } else { *z / l };
    }
    let psi = irfft2(&psi, h, w)?;
    Ok(0.5 * w0.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>() / (h * w) as f64)
}

/// Evolves `w0` to `t_final`, recording every `record_dt`.
pub fn simulate_ns(
    w0: &[f64],
    h: usize,
    w: usize,
    p: &NsParams,
    t_final: f64,
    record_dt: f64,
) -> Result<SimTrajectory> {
    if !(p.nu > 0.0) || p.re < 1.0 {
        return Err(Error::Param(format!("Navier-Stokes needs nu > 0 and Re >= 1: {p:?}")));
    }
    if w0.len() != h * w {
        return Err(Error::Param(format!("initial vorticity must have {} values", h * w)));
    }
    let sp = Spectral::new(h, w, p.dealias);
    let forcing = rfft2(&forcing_field(h, w, p.forcing), h, w)?;
    let mut what = rfft2(w0, h, w)?;
    let records = (t_final / record_dt).round() as usize;
    let mut frames = Vec::with_capacity(records + 1);
    frames.push(w0.to_vec());
    for _ in 0..records {
        let rate = sp.cfl_rate(&what)?;
        let dt_cfl = if rate > 0.0 { p.cfl_safety / rate } else { f64::INFINITY };
        let dt_target = dt_cfl.min(p.dt_max);
        if dt_target < p.dt_min {
            return Err(Error::Cfl {
                dt: dt_target,
                floor: p.dt_min,
            });
        }
        let steps = (record_dt / dt_target).ceil().max(1.0) as usize;
        let dt = record_dt / steps as f64;
        for _ in 0..steps {
            let n0 = sp.tendency(&what, &forcing)?;
            let mut star = vec![C64::new(0.0, 0.0); what.len()];
            for i in 0..what.len() {
                let a = 0.5 * dt * p.nu * sp.lap[i];
                star[i] = ((1.0 - a) * what[i] + dt * n0[i]) / (1.0 + a);
            }
            let n1 = sp.tendency(&star, &forcing)?;
            for i in 0..what.len() {
                let a = 0.5 * dt * p.nu * sp.lap[i];
                what[i] = ((1.0 - a) * what[i] + 0.5 * dt * (n0[i] + n1[i])) / (1.0 + a);
            }
        }
        let frame = irfft2(&what, h, w)?;
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("vorticity"));
        }
        frames.push(frame);
    }
    Ok(SimTrajectory {
        channels: 1,
        h,
        w,
        dt: record_dt,
        frames,
    })
}
