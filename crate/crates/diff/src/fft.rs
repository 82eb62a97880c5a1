//! Two-dimensional real transforms over the trailing `H×W` axes.
//!
//! Convention: unnormalized forward, `1/(H·W)` inverse. The half spectrum has
//! `W/2 + 1` columns; rows carry all `H` vertical wavenumbers in FFT order.

use rustfft::num_complex::Complex;

use crate::error::DiffError;
use crate::scalar::Scalar;

pub fn half_width(w: usize) -> usize {
    w / 2 + 1
}

fn check_even(h: usize, w: usize) -> Result<(), DiffError> {
    if h == 0 || w == 0 || !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(DiffError::OddSpatial(h, w));
    }
    Ok(())
}

/// Real-to-complex transform of `batch` stacked `h×w` planes.
pub fn rfft2<T: Scalar>(x: &[T], h: usize, w: usize) -> Result<Vec<Complex<T>>, DiffError> {
    check_even(h, w)?;
    let plane = h * w;
    assert_eq!(x.len() % plane, 0, "rfft2 input is not a stack of planes");
    let batch = x.len() / plane;
    let wh = half_width(w);
    let mut out = vec![Complex::new(T::zero(), T::zero()); batch * h * wh];
    let half = T::lit(0.5);
    T::with_plans(|plans| {
        let row_fft = plans.forward(w);
        let col_fft = plans.forward(h);
        let mut scratch =
            vec![Complex::default(); row_fft.get_inplace_scratch_len().max(col_fft.get_inplace_scratch_len())];
        let mut row = vec![Complex::default(); w];
        let mut cols = vec![Complex::default(); wh * h];
        for b in 0..batch {
            let xs = &x[b * plane..(b + 1) * plane];
            let spec = &mut out[b * h * wh..(b + 1) * h * wh];
            // Two real rows ride in one complex transform.
            for r in (0..h).step_by(2) {
                for n in 0..w {
                    row[n] = Complex::new(xs[r * w + n], xs[(r + 1) * w + n]);
                }
                row_fft.process_with_scratch(&mut row, &mut scratch);
                for k in 0..wh {
                    let zk = row[k];
                    let zc = row[(w - k) % w].conj();
                    let a = (zk + zc) * half;
                    let d = (zk - zc) * half;
                    // d / i
                    let bk = Complex::new(d.im, -d.re);
                    spec[r * wh + k] = a;
                    spec[(r + 1) * wh + k] = bk;
                }
            }
            for k in 0..wh {
                for y in 0..h {
                    cols[k * h + y] = spec[y * wh + k];
                }
            }
            col_fft.process_with_scratch(&mut cols, &mut scratch);
            for k in 0..wh {
                for y in 0..h {
                    spec[y * wh + k] = cols[k * h + y];
                }
            }
        }
    });
    Ok(out)
}

/// Complex-to-real inverse of [`rfft2`], scaled by `1/(h·w)`. Imaginary parts
/// of the `kx = 0` and `kx = w/2` columns (after the vertical pass) are
/// discarded, which projects onto Hermitian-symmetric spectra.
pub fn irfft2<T: Scalar>(z: &[Complex<T>], h: usize, w: usize) -> Result<Vec<T>, DiffError> {
    check_even(h, w)?;
    let wh = half_width(w);
    let spec_len = h * wh;
    assert_eq!(z.len() % spec_len, 0, "irfft2 input is not a stack of half spectra");
    let batch = z.len() / spec_len;
    let plane = h * w;
    let mut out = vec![T::zero(); batch * plane];
    let norm = T::one() / T::from_usize(plane).expect("plane size");
    T::with_plans(|plans| {
        let row_ifft = plans.inverse(w);
        let col_ifft = plans.inverse(h);
        let mut scratch = vec![
            Complex::default();
            row_ifft.get_inplace_scratch_len().max(col_ifft.get_inplace_scratch_len())
        ];
        let mut cols = vec![Complex::default(); wh * h];
        let mut row = vec![Complex::default(); w];
        for b in 0..batch {
            let spec = &z[b * spec_len..(b + 1) * spec_len];
            for k in 0..wh {
                for y in 0..h {
                    cols[k * h + y] = spec[y * wh + k];
                }
            }
            col_ifft.process_with_scratch(&mut cols, &mut scratch);
            let xs = &mut out[b * plane..(b + 1) * plane];
            let at = |y: usize, k: usize| cols[k * h + y];
            for r in (0..h).step_by(2) {
                for n in 0..w {
                    let (k, conj) = if n < wh { (n, false) } else { (w - n, true) };
                    let mut a = at(r, k);
                    let mut bb = at(r + 1, k);
                    if k == 0 || k == w / 2 {
                        a.im = T::zero();
                        bb.im = T::zero();
                    }
                    if conj {
                        a = a.conj();
                        bb = bb.conj();
                    }
                    // a + i·b
                    row[n] = Complex::new(a.re - bb.im, a.im + bb.re);
                }
                row_ifft.process_with_scratch(&mut row, &mut scratch);
                for n in 0..w {
                    xs[r * w + n] = row[n].re * norm;
                    xs[(r + 1) * w + n] = row[n].im * norm;
                }
            }
        }
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn naive_rfft2(x: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
        let wh = half_width(w);
        let mut out = vec![Complex::new(0.0, 0.0); h * wh];
        for ky in 0..h {
            for kx in 0..wh {
                let mut acc = Complex::new(0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let th = -2.0 * PI * ((ky * y) as f64 / h as f64 + (kx * xx) as f64 / w as f64);
                        acc += Complex::new(th.cos(), th.sin()) * x[y * w + xx];
                    }
                }
                out[ky * wh + kx] = acc;
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (6, 8);
        let x: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = rfft2(&x, h, w).unwrap();
        for b in 0..2 {
            let want = naive_rfft2(&x[b * h * w..(b + 1) * h * w], h, w);
            let g = &got[b * h * half_width(w)..(b + 1) * h * half_width(w)];
            for (a, e) in g.iter().zip(&want) {
                assert!((a - e).norm() < 1e-10, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (8, 4);
        let x: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let back = irfft2(&rfft2(&x, h, w).unwrap(), h, w).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_axes_rejected() {
        assert_eq!(rfft2(&[0.0f64; 15], 3, 5), Err(DiffError::OddSpatial(3, 5)));
    }
}
