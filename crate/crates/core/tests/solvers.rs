use std::f64::consts::PI;

use nopt_core::datamodel::FieldData;
use nopt_core::pdegen::{
    draft, energy, generate, simulate_ns, simulate_rd, solve_helmholtz, solve_poisson, GenConfig, GrfSpec, NsParams, Pde,
    PdeParams, PoissonParams, RdParams, RdSettings, Stage,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type C = (f64, f64);

/// Separable O(n³) DFT of a real `h×w` field; `inverse` also divides by `hw`.
fn dft2(re: &[f64], im: &[f64], h: usize, w: usize, inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let sign = if inverse { 1.0 } else { -1.0 };
    let line = |src: &[C], n: usize| -> Vec<C> {
        (0..n)
            .map(|k| {
                src.iter().enumerate().fold((0.0, 0.0), |(a, b), (j, &(x, y))| {
                    let th = sign * 2.0 * PI * ((k * j) % n) as f64 / n as f64;
                    (a + x * th.cos() - y * th.sin(), b + x * th.sin() + y * th.cos())
                })
            })
            .collect()
    };
    let mut z: Vec<C> = re.iter().zip(im).map(|(&a, &b)| (a, b)).collect();
    for r in 0..h {
        let out = line(&z[r * w..(r + 1) * w], w);
        z[r * w..(r + 1) * w].copy_from_slice(&out);
    }
    for c in 0..w {
        let col: Vec<C> = (0..h).map(|r| z[r * w + c]).collect();
        for (r, v) in line(&col, h).into_iter().enumerate() {
            z[r * w + c] = v;
        }
    }
    let s = if inverse { 1.0 / (h * w) as f64 } else { 1.0 };
    (z.iter().map(|p| p.0 * s).collect(), z.iter().map(|p| p.1 * s).collect())
}

fn freq(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Multiplies every Fourier mode by `symbol(ky, kx)` and returns the real part.
fn apply(u: &[f64], h: usize, w: usize, symbol: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (mut re, mut im) = dft2(u, &vec![0.0; u.len()], h, w, false);
    for r in 0..h {
        for c in 0..w {
            let s = symbol(freq(r, h), freq(c, w));
            re[r * w + c] *= s;
            im[r * w + c] *= s;
        }
    }
    dft2(&re, &im, h, w, true).0
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (num / b.iter().map(|y| y * y).sum::<f64>()).sqrt()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn plane(n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    (0..n * n).map(|i| f((i % n) as f64 / n as f64, (i / n) as f64 / n as f64)).collect()
}

#[test]
fn elliptic_eigenfunctions() {
    let n = 64;
    let f = plane(n, |x, _| (2.0 * PI * x).sin());
    let u = solve_poisson(&PoissonParams::identity(), &f, n, n).unwrap();
    let want: Vec<f64> = f.iter().map(|v| v / (4.0 * PI * PI)).collect();
    assert!(max_abs(&u, &want) < 1e-10);

    let f = plane(n, |_, y| (2.0 * PI * y).cos());
    let u = solve_helmholtz(5.0, &f, n, n).unwrap();
    let want: Vec<f64> = f.iter().map(|v| v / (4.0 * PI * PI + 5.0)).collect();
    assert!(max_abs(&u, &want) < 1e-10);

    let u = solve_helmholtz(7.0, &vec![2.0; n * n], n, n).unwrap();
    assert!(max_abs(&u, &vec![2.0 / 7.0; n * n]) < 1e-14);
}

#[test]
fn generated_elliptic_samples_satisfy_their_equations() {
    let n = 64;
    for pde in [Pde::Poisson, Pde::Helmholtz] {
        let cfg = GenConfig::new(pde, 100, n, Stage::Pretrain, true, 21);
        let (ds, _) = generate(&GenConfig { n: 3, ..cfg.clone() }).unwrap();
        for i in 0..100 {
            let d = draft(&cfg, i).unwrap();
            let f = &d.fields[0];
            let (u, residual) = match d.params {
                PdeParams::Poisson(k) => {
                    let u = solve_poisson(&k, f, n, n).unwrap();
                    let lu = apply(&u, n, n, |ky, kx| {
                        4.0 * PI * PI * (k.k11 * kx * kx + 2.0 * k.k12 * kx * ky + k.k22 * ky * ky)
                    });
                    let r = rel(&lu, f);
                    (u, r)
                }
                PdeParams::Helmholtz { omega } => {
                    let u = solve_helmholtz(omega as f64, f, n, n).unwrap();
                    let lu = apply(&u, n, n, |ky, kx| 4.0 * PI * PI * (kx * kx + ky * ky) + omega as f64);
                    let r = rel(&lu, f);
                    (u, r)
                }
                _ => unreachable!(),
            };
            assert!(residual < 1e-8, "{pde:?} sample {i}: {residual}");
            if i < 3 {
                let Some(FieldData::Field(stored)) = &ds.samples[i].solution else {
                    panic!("missing solution")
                };
                let cast: Vec<f32> = u.iter().map(|&v| v as f32).collect();
                assert_eq!(stored.data(), &cast[..]);
            }
        }
    }
}

#[test]
fn grf_variance_matches_the_spectral_sum() {
    let (n, draws) = (32usize, 500);
    let spec = GrfSpec {
        alpha: 2.0,
        tau: 3.0,
        sigma: Some(3.0),
    };
    let mut sum = 0.0;
    for ky in 0..n {
        for kx in 0..n {
            let zero = ky == 0 && kx == 0;
            if zero || ky == n / 2 || kx == n / 2 {
                continue;
            }
            let k2 = freq(ky, n).powi(2) + freq(kx, n).powi(2);
            sum += (4.0 * PI * PI * k2 + 9.0).powf(-2.0);
        }
    }
    let analytic = 9.0 * sum;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut acc = 0.0;
    for _ in 0..draws {
        let f = spec.sample(n, n, &mut rng).unwrap();
        assert!(f.iter().sum::<f64>().abs() / ((n * n) as f64) < 1e-12);
        acc += f.iter().map(|v| v * v).sum::<f64>();
    }
    let empirical = acc / (draws * n * n) as f64;
    assert!((empirical / analytic - 1.0).abs() < 0.1, "{empirical} vs {analytic}");
}

#[test]
fn single_mode_vorticity_decays_viscously() {
    let n = 64;
    let w0 = plane(n, |x, y| (2.0 * PI * (x + y)).sin());
    let mut p = NsParams::from_re(100.0).unforced();
    p.nu = 1e-2;
    let tr = simulate_ns(&w0, n, n, &p, 0.5, 0.25).unwrap();
    let decay = (-p.nu * 8.0 * PI * PI * 0.5).exp();
    let want: Vec<f64> = w0.iter().map(|v| v * decay).collect();
    let err = rel(tr.frames.last().unwrap(), &want);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn vorticity_mean_and_energy() {
    let n = 64;
    let spec = GrfSpec::default();
    for run in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + run);
        let w0 = spec.sample(n, n, &mut rng).unwrap();
        let re = [100.0, 300.0, 500.0, 800.0, 1000.0][run as usize % 5];
        let forced = simulate_ns(&w0, n, n, &NsParams::from_re(re), 2.0, 0.25).unwrap();
        let m0 = w0.iter().sum::<f64>() / (n * n) as f64;
        for f in &forced.frames {
            let m = f.iter().sum::<f64>() / (n * n) as f64;
            assert!((m - m0).abs() < 1e-12, "run {run}: drift {}", m - m0);
        }
        let free = simulate_ns(&w0, n, n, &NsParams::from_re(re).unforced(), 2.0, 0.1).unwrap();
        let energies: Vec<f64> = free.frames.iter().map(|f| energy(f, n, n).unwrap()).collect();
        for pair in energies.windows(2) {
            assert!(pair[1] <= pair[0], "run {run}: {energies:?}");
        }
    }
}

fn cell_plane(n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let h = 2.0 / n as f64;
    (0..n * n)
        .map(|i| f(-1.0 + ((i % n) as f64 + 0.5) * h, -1.0 + ((i / n) as f64 + 0.5) * h))
        .collect()
}

#[test]
fn reaction_diffusion_fixed_point() {
    let n = 64;
    let s = RdSettings::default();
    let c = (-s.k).cbrt();
    let p = RdParams::for_record(s.du, s.dv, s.k, s.record_dt, 2.0 / n as f64);
    let tr = simulate_rd(&vec![c; n * n], &vec![c; n * n], n, &p, 5.0).unwrap();
    assert_eq!(tr.frames.len(), 101);
    for f in &tr.frames {
        assert!(f.iter().all(|v| (v - c).abs() < 1e-10));
    }
}

fn reaction(u: f64, v: f64, k: f64) -> (f64, f64) {
    (u - u * u * u - k - v, u - v)
}

#[test]
fn zero_diffusion_follows_the_reaction_ode() {
    let (n, k) = (8, 5e-3);
    let (u0, v0) = (0.3, -0.2);
    let p = RdParams {
        du: 0.0,
        dv: 0.0,
        k,
        dt: 1e-3,
        stride: 250,
    };
    let tr = simulate_rd(&vec![u0; n * n], &vec![v0; n * n], n, &p, 5.0).unwrap();
    // Reference: RK4 at a step 100 times finer.
    let dt = 1e-5;
    let (mut u, mut v) = (u0, v0);
    for (r, frame) in tr.frames.iter().enumerate() {
        if r > 0 {
            for _ in 0..25_000 {
                let (a1, b1) = reaction(u, v, k);
                let (a2, b2) = reaction(u + 0.5 * dt * a1, v + 0.5 * dt * b1, k);
                let (a3, b3) = reaction(u + 0.5 * dt * a2, v + 0.5 * dt * b2, k);
                let (a4, b4) = reaction(u + dt * a3, v + dt * b3, k);
                u += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
                v += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
            }
        }
        assert!(frame[..n * n].iter().all(|x| (x - u).abs() < 1e-8), "frame {r}");
        assert!(frame[n * n..].iter().all(|x| (x - v).abs() < 1e-8), "frame {r}");
    }
}

#[test]
fn reaction_diffusion_is_fourth_order_in_time() {
    let n = 64;
    let s = RdSettings::default();
    let u0 = cell_plane(n, |x, y| 0.5 * (PI * x).cos() * (PI * y).cos());
    let v0 = cell_plane(n, |x, y| 0.3 * (0.5 * PI * x).sin() + 0.1 * (PI * y).cos());
    let finals: Vec<Vec<f64>> = [0.02, 0.01, 0.005]
        .iter()
        .map(|&dt| {
            let stride = (1.0f64 / dt).round() as usize;
            let p = RdParams {
                du: s.du,
                dv: s.dv,
                k: s.k,
                dt,
                stride,
            };
            simulate_rd(&u0, &v0, n, &p, 1.0).unwrap().frames.pop().unwrap()
        })
        .collect();
    let d1 = rel(&finals[0], &finals[1]);
    let d2 = rel(&finals[1], &finals[2]);
    let order = (d1 / d2).log2();
    assert!(order >= 3.5, "observed order {order} ({d1:e}, {d2:e})");
}

#[test]
fn reaction_diffusion_stays_bounded() {
    let cfg = GenConfig::new(Pde::Rd, 2, 64, Stage::Train, true, 8);
    let (ds, _) = generate(&cfg).unwrap();
    for s in &ds.samples {
        for part in [&s.input, s.solution.as_ref().unwrap()] {
            for f in part.frames() {
                assert!(f.data().iter().all(|v| v.abs() < 10.0));
            }
        }
    }
}

#[test]
fn worker_count_does_not_change_the_payload() {
    for (pde, labeled) in [(Pde::Poisson, true), (Pde::Ns, false), (Pde::Rd, false)] {
        let base = GenConfig::new(pde, 12, 32, Stage::Pretrain, labeled, 5);
        let (a, _) = generate(&GenConfig { threads: 1, ..base.clone() }).unwrap();
        let (b, _) = generate(&GenConfig { threads: 8, ..base }).unwrap();
        assert_eq!(a, b, "{pde:?}");
    }
}

#[test]
fn helmholtz_parameter_is_broadcast() {
    let (ds, _) = generate(&GenConfig::new(Pde::Helmholtz, 2, 16, Stage::Ood, false, 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = &ds.samples[rng.random_range(0..2)];
    let FieldData::Field(f) = &s.input else { panic!() };
    assert_eq!(f.channels(), 2);
    let omega = s.params["omega"] as f32;
    assert!((15.0..=20.0).contains(&omega));
    assert!(f.channel(1).iter().all(|&v| v == omega));
}
