//! FitzHugh–Nagumo reaction–diffusion on `[−1, 1]²` with zero-flux walls:
//! cell-centred five-point Laplacian, classic RK4 in time.

use serde::{Deserialize, Serialize};

use super::SimTrajectory;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdParams {
    pub du: f64,
    pub dv: f64,
    pub k: f64,
    /// Integration step.
    pub dt: f64,
    /// Steps between recorded snapshots.
    pub stride: usize,
}

impl RdParams {
    /// Default coefficients with the largest step that divides `record_dt`
    /// and respects the stability bound on spacing `h`.
    pub fn for_record(du: f64, dv: f64, k: f64, record_dt: f64, h: f64) -> Self {
        let bound = stability_bound(du, dv, h);
        let stride = if bound.is_finite() {
            (record_dt / bound).ceil().max(1.0) as usize
        } else {
            1
        };
        Self {
            du,
            dv,
            k,
            dt: record_dt / stride as f64,
            stride,
        }
    }

    pub fn record_dt(&self) -> f64 {
        self.dt * self.stride as f64
    }
}

/// Largest stable explicit step: `0.5 · h² / (4 · max(Du, Dv))`.
pub fn stability_bound(du: f64, dv: f64, h: f64) -> f64 {
    let d = du.max(dv);
    if d > 0.0 {
        0.5 * h * h / (4.0 * d)
    } else {
        f64::INFINITY
    }
}

struct Stepper {
    n: usize,
    inv_h2: f64,
    p: RdParams,
}

impl Stepper {
    fn laplacian(&self, u: &[f64], y: usize, x: usize) -> f64 {
        let n = self.n;
        // Mirrored ghost cells give zero flux through the wall.
        let at = |yy: usize, xx: usize| u[yy * n + xx];
        let c = at(y, x);
        let e = at(y, (x + 1).min(n - 1));
        let wv = at(y, x.saturating_sub(1));
        let s = at((y + 1).min(n - 1), x);
        let nn = at(y.saturating_sub(1), x);
        (e + wv + s + nn - 4.0 * c) * self.inv_h2
    }

    fn rhs(&self, u: &[f64], v: &[f64], du: &mut [f64], dv: &mut [f64]) {
        let n = self.n;
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                let (a, b) = (u[i], v[i]);
                let ru = a - a * a * a - self.p.k - b;
                let rv = a - b;
                du[i] = self.p.du * self.laplacian(u, y, x) + ru;
                dv[i] = self.p.dv * self.laplacian(v, y, x) + rv;
            }
        }
    }

    fn step(&self, u: &mut [f64], v: &mut [f64], s: &mut [Vec<f64>; 10]) {
        let dt = self.p.dt;
        let [k1u, k1v, k2u, k2v, k3u, k3v, k4u, k4v, tu, tv] = s;
        self.rhs(u, v, k1u, k1v);
        for i in 0..u.len() {
            tu[i] = u[i] + 0.5 * dt * k1u[i];
            tv[i] = v[i] + 0.5 * dt * k1v[i];
        }
        self.rhs(tu, tv, k2u, k2v);
        for i in 0..u.len() {
            tu[i] = u[i] + 0.5 * dt * k2u[i];
            tv[i] = v[i] + 0.5 * dt * k2v[i];
        }
        self.rhs(tu, tv, k3u, k3v);
        for i in 0..u.len() {
            tu[i] = u[i] + dt * k3u[i];
            tv[i] = v[i] + dt * k3v[i];
        }
        self.rhs(tu, tv, k4u, k4v);
        for i in 0..u.len() {
            u[i] += dt / 6.0 * (k1u[i] + 2.0 * k2u[i] + 2.0 * k3u[i] + k4u[i]);
            v[i] += dt / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
        }
    }
}

/// Integrates from `(u0, v0)` on an `n×n` grid over `[−1, 1]²` until
/// `t_final`, recording the initial state and every `stride`-th step.
pub fn simulate_rd(u0: &[f64], v0: &[f64], n: usize, p: &RdParams, t_final: f64) -> Result<SimTrajectory> {
    if u0.len() != n * n || v0.len() != n * n {
        return Err(Error::Param(format!("initial state must have {} values", n * n)));
    }
    if p.du < 0.0 || p.dv < 0.0 || !(p.dt > 0.0) || p.stride == 0 {
        return Err(Error::Param(format!("invalid reaction-diffusion settings {p:?}")));
    }
    let h = 2.0 / n as f64;
    let bound = stability_bound(p.du, p.dv, h);
    if p.dt > bound {
        return Err(Error::Stability { dt: p.dt, bound });
    }
    let records = (t_final / p.record_dt()).round() as usize;
    let stepper = Stepper {
        n,
        inv_h2: 1.0 / (h * h),
        p: *p,
    };
    let (mut u, mut v) = (u0.to_vec(), v0.to_vec());
    let mut scratch: [Vec<f64>; 10] = std::array::from_fn(|_| vec![0.0; n * n]);
    let mut frames = Vec::with_capacity(records + 1);
    let snap = |u: &[f64], v: &[f64]| [u, v].concat();
    frames.push(snap(&u, &v));
    for _ in 0..records {
        for _ in 0..p.stride {
            stepper.step(&mut u, &mut v, &mut scratch);
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("reaction-diffusion state"));
        }
        frames.push(snap(&u, &v));
    }
    Ok(SimTrajectory {
        channels: 2,
        h: n,
        w: n,
        dt: p.record_dt(),
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_choice_respects_bound() {
        let p = RdParams::for_record(1e-3, 5e-3, 5e-3, 0.05, 2.0 / 64.0);
        assert!(p.dt <= stability_bound(1e-3, 5e-3, 2.0 / 64.0));
        assert!((p.record_dt() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn unstable_step_is_rejected() {
        let p = RdParams {
            du: 1.0,
            dv: 1.0,
            k: 0.0,
            dt: 1.0,
            stride: 1,
        };
        let z = vec![0.0; 64];
        assert!(matches!(simulate_rd(&z, &z, 8, &p, 1.0), Err(Error::Stability { .. })));
    }

    #[test]
    fn records_every_stride() {
        let p = RdParams::for_record(1e-3, 5e-3, 5e-3, 0.05, 2.0 / 16.0);
        let z = vec![0.1; 256];
        let tr = simulate_rd(&z, &z, 16, &p, 0.5).unwrap();
        assert_eq!(tr.frames.len(), 11);
    }
}
