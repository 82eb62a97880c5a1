//! Central finite-difference oracle for the tape's gradients.
//!
//! Each check draws random inputs, contracts the op output with a random seed
//! tensor `S` to form `L = ⟨S, f(x)⟩`, and compares the tape's vector-Jacobian
//! product against `(L(x + h eᵢ) − L(x − h eᵢ)) / 2h` entry by entry. Complex
//! values are perturbed one real component at a time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DiffError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Builds the op under test from its recorded inputs.
pub type Builder<'f> = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var, DiffError> + 'f;

fn contract(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn eval(build: &Builder<'_>, inputs: &[Tensor<f64>], seed: &Tensor<f64>) -> Result<f64, DiffError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(contract(tape.value(out), seed))
}

/// Largest per-input relative gradient error `‖g − g_fd‖ / ‖g_fd‖` for one
/// set of inputs.
pub fn max_relative_error(build: &Builder<'_>, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> Result<f64, DiffError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let proto = tape.value(out);
    let mut seed = proto.clone();
    seed.data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-1.0..1.0));
    let grads = tape.backward_from(out, seed.clone())?;

    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| inputs[i].map(|_| 0.0));
        let mut fd = vec![0.0; inputs[i].data().len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *slot = (eval(build, &plus, &seed)? - eval(build, &minus, &seed)?) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = if norm < 1e-12 { diff } else { diff / norm };
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// One op's outcome over its random trials.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub trials: usize,
    pub worst: f64,
}

fn real(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Real values bounded away from zero, so kinks stay outside the FD stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    real(rng, shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn complex(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_interleaved(shape, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape")
}

type Case = (
    &'static str,
    Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>,
    Box<Builder<'static>>,
);

fn cases() -> Vec<Case> {
    let s33 = [3usize, 3];
    vec![
        (
            "add",
            Box::new(move |r| vec![real(r, &s33), real(r, &s33)]),
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            Box::new(move |r| vec![real(r, &s33), real(r, &s33)]),
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul",
            Box::new(move |r| vec![real(r, &s33), real(r, &s33)]),
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "scale",
            Box::new(move |r| vec![real(r, &s33)]),
            Box::new(|t, v| t.scale(v[0], -1.7)),
        ),
        (
            "affine",
            Box::new(|r| vec![real(r, &[2, 3, 3]), real(r, &[3, 2]), real(r, &[3])]),
            Box::new(|t, v| t.affine(v[0], v[1], Some(v[2]))),
        ),
        (
            "relu",
            Box::new(move |r| vec![off_zero(r, &s33)]),
            Box::new(|t, v| t.relu(v[0])),
        ),
        (
            "gelu",
            Box::new(move |r| vec![real(r, &s33).map(|x| 3.0 * x)]),
            Box::new(|t, v| t.gelu(v[0])),
        ),
        (
            "rfft2",
            Box::new(|r| vec![real(r, &[2, 4, 4])]),
            Box::new(|t, v| t.rfft2(v[0])),
        ),
        (
            "irfft2",
            Box::new(|r| vec![complex(r, &[2, 4, 3])]),
            Box::new(|t, v| t.irfft2(v[0])),
        ),
        (
            "truncate_modes",
            Box::new(|r| vec![complex(r, &[2, 4, 3])]),
            Box::new(|t, v| t.truncate_modes(v[0], 1, 2)),
        ),
        (
            "pad_modes",
            Box::new(|r| vec![complex(r, &[2, 2, 2])]),
            Box::new(|t, v| t.pad_modes(v[0], 4, 3)),
        ),
        (
            "complex_mul",
            Box::new(move |r| vec![complex(r, &s33), complex(r, &s33)]),
            Box::new(|t, v| t.complex_mul(v[0], v[1])),
        ),
        (
            "spectral_mix",
            Box::new(|r| vec![complex(r, &[2, 2, 2]), complex(r, &[2, 2, 2, 3])]),
            Box::new(|t, v| t.spectral_mix(v[0], v[1])),
        ),
        (
            "mean",
            Box::new(move |r| vec![real(r, &s33)]),
            Box::new(|t, v| t.mean(v[0])),
        ),
        (
            "sum",
            Box::new(move |r| vec![real(r, &s33)]),
            Box::new(|t, v| t.sum(v[0])),
        ),
        (
            "mse",
            Box::new(move |r| vec![real(r, &s33), real(r, &s33)]),
            Box::new(|t, v| t.mse(v[0], v[1])),
        ),
        (
            "relative_l2",
            Box::new(move |r| vec![real(r, &s33), real(r, &s33)]),
            Box::new(|t, v| t.relative_l2(v[0], v[1])),
        ),
    ]
}

/// Names of every op kind covered by [`check_all_ops`].
pub fn op_names() -> Vec<&'static str> {
    cases().into_iter().map(|c| c.0).collect()
}

/// Runs `trials` random finite-difference checks per op kind. Real-axis ops
/// use 3×3 inputs; the transforms need even axes and use 4×4 planes.
pub fn check_all_ops(trials: usize, seed: u64) -> Result<Vec<OpCheck>, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (op, gen, build) in cases() {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let inputs = gen(&mut rng);
            worst = worst.max(max_relative_error(build.as_ref(), &inputs, &mut rng)?);
        }
        out.push(OpCheck { op, trials, worst });
    }
    Ok(out)
}
