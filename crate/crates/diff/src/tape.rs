//! Reverse-mode differentiation over a linear recording of tensor operations.
//!
//! Node ids are handed out in recording order, so every op's inputs have
//! smaller ids than the op itself and the backward sweep is a plain reverse
//! walk over the node list.
//!
//! Complex gradients follow the real-pair convention: for a complex value
//! `z = a + ib` the stored gradient is `∂L/∂a + i ∂L/∂b`. For a complex-linear
//! map `y = A z` this makes the pullback `z̄ = Aᴴ ȳ`.

use rustfft::num_complex::Complex;

use crate::error::DiffError;
use crate::fft::{half_width, irfft2, rfft2};
use crate::param::ParamId;
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Affine { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Gelu(Var),
    Rfft2(Var),
    Irfft2(Var),
    Truncate { x: Var, m1: usize, m2: usize },
    Pad { x: Var, h: usize, wh: usize },
    ComplexMul(Var, Var),
    SpectralMix { z: Var, w: Var },
    Mean(Var),
    Sum(Var),
    Mse(Var, Var),
    RelL2(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Rfft2(_) => "rfft2",
            Op::Irfft2(_) => "irfft2",
            Op::Truncate { .. } => "truncate_modes",
            Op::Pad { .. } => "pad_modes",
            Op::ComplexMul(..) => "complex_mul",
            Op::SpectralMix { .. } => "spectral_mix",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Mse(..) => "mse",
            Op::RelL2(..) => "relative_l2",
        }
    }
}

enum Value<'a, T> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

struct Node<'a, T> {
    op: Op,
    value: Value<'a, T>,
}

/// Recording of one forward computation. Parameter values are borrowed, so a
/// tape built against a parameter store lives no longer than that store.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; much cheaper than the libm routine.
fn tanh<T: Scalar>(u: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    /// Name of the op that produced `v` (for diagnostics).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf(None),
            value: Value::Owned(t),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a borrowed constant input.
    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf(None),
            value: Value::Borrowed(t),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, value: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf(Some(id)),
            value: Value::Borrowed(value),
        });
        Var(self.nodes.len() - 1)
    }

    fn binary_layout(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_layout(tb) {
            return Err(DiffError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn require_real(&self, op: &'static str, v: Var) -> Result<(), DiffError> {
        if self.value(v).is_complex() {
            return Err(DiffError::Kind { op, expected: "real" });
        }
        Ok(())
    }

    fn require_complex(&self, op: &'static str, v: Var) -> Result<(), DiffError> {
        if !self.value(v).is_complex() {
            return Err(DiffError::Kind {
                op,
                expected: "complex",
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_layout("add", a, b)?;
        let mut out = self.value(a).clone();
        out.axpy(T::one(), self.value(b));
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_layout("sub", a, b)?;
        let mut out = self.value(a).clone();
        out.axpy(-T::one(), self.value(b));
        self.push(Op::Sub(a, b), out)
    }

    /// Elementwise product of two real tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_layout("mul", a, b)?;
        self.require_real("mul", a)?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * y;
        }
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, DiffError> {
        let k = T::lit(s);
        let out = self.value(a).map(|v| v * k);
        self.push(Op::Scale(a, s), out)
    }

    /// Channel-wise affine map (a 1×1 convolution): `x` is `[Cin, ...]`,
    /// `w` is `[Cout, Cin]`, optional `b` is `[Cout]`; result `[Cout, ...]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, DiffError> {
        self.require_real("affine", x)?;
        self.require_real("affine", w)?;
        let (tx, tw) = (self.value(x), self.value(w));
        if tw.shape().len() != 2 || tx.shape().is_empty() || tx.shape()[0] != tw.shape()[1] {
            return Err(DiffError::ShapeMismatch {
                op: "affine",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (cout, cin) = (tw.shape()[0], tw.shape()[1]);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [cout] || tb.is_complex() {
                return Err(DiffError::ShapeMismatch {
                    op: "affine",
                    lhs: vec![cout],
                    rhs: tb.shape().to_vec(),
                });
            }
        }
        let p = tx.numel() / cin;
        let mut shape = tx.shape().to_vec();
        shape[0] = cout;
        let mut out = Tensor::zeros(&shape);
        matmul(cout, cin, p, tw.data(), false, tx.data(), false, out.data_mut(), false);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (row, &bo) in out.data_mut().chunks_mut(p.max(1)).zip(bias) {
                row.iter_mut().for_each(|v| *v = *v + bo);
            }
        }
        self.push(Op::Affine { x, w, b }, out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.require_real("relu", a)?;
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(Op::Relu(a), out)
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.require_real("gelu", a)?;
        let out = self.value(a).map(gelu);
        self.push(Op::Gelu(a), out)
    }

    /// Real-to-complex 2D transform over the two trailing axes.
    pub fn rfft2(&mut self, a: Var) -> Result<Var, DiffError> {
        self.require_real("rfft2", a)?;
        let t = self.value(a);
        let nd = t.shape().len();
        if nd < 2 {
            return Err(DiffError::Kind {
                op: "rfft2",
                expected: "at least 2-D",
            });
        }
        let (h, w) = (t.shape()[nd - 2], t.shape()[nd - 1]);
        let spec = rfft2(t.data(), h, w)?;
        let mut shape = t.shape().to_vec();
        shape[nd - 1] = half_width(w);
        let out = complex_tensor(&shape, spec);
        self.push(Op::Rfft2(a), out)
    }

    /// Inverse of [`Tape::rfft2`]; the trailing axis must hold `W/2 + 1` columns.
    pub fn irfft2(&mut self, a: Var) -> Result<Var, DiffError> {
        self.require_complex("irfft2", a)?;
        let t = self.value(a);
        let nd = t.shape().len();
        if nd < 2 || t.shape()[nd - 1] < 2 {
            return Err(DiffError::Kind {
                op: "irfft2",
                expected: "at least 2-D half-spectrum",
            });
        }
        let (h, wh) = (t.shape()[nd - 2], t.shape()[nd - 1]);
        let w = 2 * (wh - 1);
        let x = irfft2(t.as_complex(), h, w)?;
        let mut shape = t.shape().to_vec();
        shape[nd - 1] = w;
        let out = Tensor::from_vec(&shape, x)?;
        self.push(Op::Irfft2(a), out)
    }

    /// Keeps the low-frequency corner blocks of a half spectrum: rows
    /// `[0, m1)` and `[H - m1, H)`, columns `[0, m2)`. Result `[.., 2·m1, m2]`.
    pub fn truncate_modes(&mut self, a: Var, m1: usize, m2: usize) -> Result<Var, DiffError> {
        self.require_complex("truncate_modes", a)?;
        let t = self.value(a);
        let nd = t.shape().len();
        let (h, wh) = (t.shape()[nd - 2], t.shape()[nd - 1]);
        if 2 * m1 > h {
            return Err(DiffError::ModesTooLarge { modes: m1, extent: h });
        }
        if m2 > wh {
            return Err(DiffError::ModesTooLarge { modes: m2, extent: wh });
        }
        let mut shape = t.shape().to_vec();
        shape[nd - 2] = 2 * m1;
        shape[nd - 1] = m2;
        let mut out = Tensor::complex_zeros(&shape);
        gather_corners(t.as_complex(), h, wh, out.as_complex_mut(), m1, m2);
        self.push(Op::Truncate { x: a, m1, m2 }, out)
    }

    /// Zero-pads corner blocks produced by [`Tape::truncate_modes`] back to an
    /// `h × wh` half spectrum.
    pub fn pad_modes(&mut self, a: Var, h: usize, wh: usize) -> Result<Var, DiffError> {
        self.require_complex("pad_modes", a)?;
        let t = self.value(a);
        let nd = t.shape().len();
        let (r, m2) = (t.shape()[nd - 2], t.shape()[nd - 1]);
        if r % 2 != 0 || r > h || m2 > wh {
            return Err(DiffError::ShapeMismatch {
                op: "pad_modes",
                lhs: t.shape().to_vec(),
                rhs: vec![h, wh],
            });
        }
        let mut shape = t.shape().to_vec();
        shape[nd - 2] = h;
        shape[nd - 1] = wh;
        let mut out = Tensor::complex_zeros(&shape);
        scatter_corners(t.as_complex(), r / 2, m2, out.as_complex_mut(), h, wh);
        self.push(Op::Pad { x: a, h, wh }, out)
    }

    /// Elementwise complex product.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary_layout("complex_mul", a, b)?;
        self.require_complex("complex_mul", a)?;
        let mut out = self.value(a).clone();
        for (o, &y) in out.as_complex_mut().iter_mut().zip(self.value(b).as_complex()) {
            *o = *o * y;
        }
        self.push(Op::ComplexMul(a, b), out)
    }

    /// Per-mode complex channel mixing: `z` is `[Cin, M1, M2]`, `w` is
    /// `[M1, M2, Cin, Cout]`, result `[Cout, M1, M2]` with
    /// `out[o, k] = Σ_i z[i, k] · w[k, i, o]`.
    pub fn spectral_mix(&mut self, z: Var, w: Var) -> Result<Var, DiffError> {
        self.require_complex("spectral_mix", z)?;
        self.require_complex("spectral_mix", w)?;
        let (tz, tw) = (self.value(z), self.value(w));
        let (zs, ws) = (tz.shape(), tw.shape());
        if zs.len() != 3 || ws.len() != 4 || ws[0] != zs[1] || ws[1] != zs[2] || ws[2] != zs[0] {
            return Err(DiffError::ShapeMismatch {
                op: "spectral_mix",
                lhs: zs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (cin, modes, cout) = (zs[0], zs[1] * zs[2], ws[3]);
        let mut out = Tensor::complex_zeros(&[cout, zs[1], zs[2]]);
        {
            let zc = tz.as_complex();
            let wc = tw.as_complex();
            let oc = out.as_complex_mut();
            let mut acc = vec![Complex::new(T::zero(), T::zero()); cout];
            for k in 0..modes {
                acc.iter_mut().for_each(|a| *a = Complex::new(T::zero(), T::zero()));
                let wk = &wc[k * cin * cout..(k + 1) * cin * cout];
                for i in 0..cin {
                    let zi = zc[i * modes + k];
                    for (a, &wv) in acc.iter_mut().zip(&wk[i * cout..(i + 1) * cout]) {
                        *a = *a + zi * wv;
                    }
                }
                for (o, a) in acc.iter().enumerate() {
                    oc[o * modes + k] = *a;
                }
            }
        }
        self.push(Op::SpectralMix { z, w }, out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        self.require_real("mean", a)?;
        let t = self.value(a);
        let n = T::from_usize(t.numel().max(1)).expect("count");
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Op::Mean(a), Tensor::scalar(s / n))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        self.require_real("sum", a)?;
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Mean squared error between two real tensors of equal shape.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, DiffError> {
        self.binary_layout("mse", pred, target)?;
        self.require_real("mse", pred)?;
        let (p, t) = (self.value(pred), self.value(target));
        let n = T::from_usize(p.numel().max(1)).expect("count");
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        self.push(Op::Mse(pred, target), Tensor::scalar(s / n))
    }

    /// `‖pred − target‖₂ / ‖target‖₂` over the whole tensor.
    pub fn relative_l2(&mut self, pred: Var, target: Var) -> Result<Var, DiffError> {
        self.binary_layout("relative_l2", pred, target)?;
        self.require_real("relative_l2", pred)?;
        let (p, t) = (self.value(pred), self.value(target));
        let tn = t.sum_sq().sqrt();
        if tn == T::zero() {
            return Err(DiffError::ZeroNormTarget);
        }
        let dn = p
            .data()
            .iter()
            .zip(t.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
            .sqrt();
        self.push(Op::RelL2(pred, target), Tensor::scalar(dn / tn))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, DiffError> {
        let lt = self.value(loss);
        if lt.numel() != 1 || lt.is_complex() {
            return Err(DiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.backward_from(loss, Tensor::full(lt.shape(), T::one()))
    }

    /// Vector-Jacobian product: propagates `seed` (same layout as `out`) back
    /// through the tape.
    pub fn backward_from(&self, out: Var, seed: Tensor<T>) -> Result<Gradients<T>, DiffError> {
        let ot = self.value(out);
        if !ot.same_layout(&seed) {
            return Err(DiffError::ShapeMismatch {
                op: "backward",
                lhs: ot.shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.pullback(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf(Some(pid)) => Some((pid, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            node_grads: grads,
            params,
        })
    }

    fn pullback(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let out = node.value.get();
        match node.op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                accumulate(grads, a, zip_map(g, tb, |gv, bv| gv * bv));
                accumulate(grads, b, zip_map(g, ta, |gv, av| gv * av));
            }
            Op::Scale(a, s) => {
                let k = T::lit(s);
                accumulate(grads, a, g.map(|v| v * k));
            }
            Op::Affine { x, w, b } => {
                let (tx, tw) = (self.value(x), self.value(w));
                let (cout, cin) = (tw.shape()[0], tw.shape()[1]);
                let p = tx.numel() / cin;
                let mut gx = Tensor::zeros(tx.shape());
                matmul(cin, cout, p, tw.data(), true, g.data(), false, gx.data_mut(), false);
                accumulate(grads, x, gx);
                let mut gw = Tensor::zeros(tw.shape());
                matmul(cout, p, cin, g.data(), false, tx.data(), true, gw.data_mut(), false);
                accumulate(grads, w, gw);
                if let Some(b) = b {
                    let sums: Vec<T> = g
                        .data()
                        .chunks(p.max(1))
                        .map(|row| row.iter().fold(T::zero(), |acc, &v| acc + v))
                        .collect();
                    accumulate(grads, b, Tensor::from_vec(&[cout], sums).expect("bias grad"));
                }
            }
            Op::Relu(a) => {
                let ta = self.value(a);
                accumulate(
                    grads,
                    a,
                    zip_map(g, ta, |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
                );
            }
            Op::Gelu(a) => {
                let ta = self.value(a);
                accumulate(grads, a, zip_map(g, ta, |gv, xv| gv * gelu_grad(xv)));
            }
            Op::Rfft2(a) => {
                // x̄ = H·W · irfft2(Ȳ with interior columns halved)
                let nd = out.shape().len();
                let (h, wh) = (out.shape()[nd - 2], out.shape()[nd - 1]);
                let w = 2 * (wh - 1);
                let mut gs = g.as_complex().to_vec();
                let half = T::lit(0.5);
                for (idx, v) in gs.iter_mut().enumerate() {
                    let kx = idx % wh;
                    if kx != 0 && kx != wh - 1 {
                        *v = *v * half;
                    }
                }
                let n = T::from_usize(h * w).expect("plane");
                let mut x = irfft2(&gs, h, w).expect("shape checked in forward");
                x.iter_mut().for_each(|v| *v = *v * n);
                let ta = self.value(a);
                accumulate(grads, a, Tensor::from_vec(ta.shape(), x).expect("rfft2 grad"));
            }
            Op::Irfft2(a) => {
                // Z̄ = (w_kx / (H·W)) · rfft2(x̄), w = 1 on the edge columns, 2 inside
                let nd = out.shape().len();
                let (h, w) = (out.shape()[nd - 2], out.shape()[nd - 1]);
                let wh = half_width(w);
                let mut spec = rfft2(g.data(), h, w).expect("shape checked in forward");
                let inv = T::one() / T::from_usize(h * w).expect("plane");
                let two = T::lit(2.0);
                for (idx, v) in spec.iter_mut().enumerate() {
                    let kx = idx % wh;
                    let f = if kx == 0 || kx == wh - 1 { inv } else { two * inv };
                    *v = *v * f;
                }
                let ta = self.value(a);
                accumulate(grads, a, complex_tensor(ta.shape(), spec));
            }
            Op::Truncate { x, m1, m2 } => {
                let tx = self.value(x);
                let nd = tx.shape().len();
                let (h, wh) = (tx.shape()[nd - 2], tx.shape()[nd - 1]);
                let mut gx = Tensor::complex_zeros(tx.shape());
                scatter_corners(g.as_complex(), m1, m2, gx.as_complex_mut(), h, wh);
                accumulate(grads, x, gx);
            }
            Op::Pad { x, h, wh } => {
                let tx = self.value(x);
                let nd = tx.shape().len();
                let (r, m2) = (tx.shape()[nd - 2], tx.shape()[nd - 1]);
                let mut gx = Tensor::complex_zeros(tx.shape());
                gather_corners(g.as_complex(), h, wh, gx.as_complex_mut(), r / 2, m2);
                accumulate(grads, x, gx);
            }
            Op::ComplexMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let mut ga = ta.zeros_like();
                let mut gb = tb.zeros_like();
                for (((o, p), &gv), (&av, &bv)) in ga
                    .as_complex_mut()
                    .iter_mut()
                    .zip(gb.as_complex_mut().iter_mut())
                    .zip(g.as_complex())
                    .zip(ta.as_complex().iter().zip(tb.as_complex()))
                {
                    *o = gv * bv.conj();
                    *p = gv * av.conj();
                }
                accumulate(grads, a, ga);
                accumulate(grads, b, gb);
            }
            Op::SpectralMix { z, w } => {
                let (tz, tw) = (self.value(z), self.value(w));
                let (cin, modes, cout) = (
                    tz.shape()[0],
                    tz.shape()[1] * tz.shape()[2],
                    tw.shape()[3],
                );
                let mut gz = tz.zeros_like();
                let mut gw = tw.zeros_like();
                {
                    let zc = tz.as_complex();
                    let wc = tw.as_complex();
                    let gc = g.as_complex();
                    let gzc = gz.as_complex_mut();
                    let gwc = gw.as_complex_mut();
                    let mut go = vec![Complex::new(T::zero(), T::zero()); cout];
                    for k in 0..modes {
                        for (o, v) in go.iter_mut().enumerate() {
                            *v = gc[o * modes + k];
                        }
                        let base = k * cin * cout;
                        for i in 0..cin {
                            let zi = zc[i * modes + k].conj();
                            let wrow = &wc[base + i * cout..base + (i + 1) * cout];
                            let gwrow = &mut gwc[base + i * cout..base + (i + 1) * cout];
                            let mut acc = Complex::new(T::zero(), T::zero());
                            for ((gwv, &wv), &gv) in gwrow.iter_mut().zip(wrow).zip(&go) {
                                acc = acc + gv * wv.conj();
                                *gwv = gv * zi;
                            }
                            gzc[i * modes + k] = acc;
                        }
                    }
                }
                accumulate(grads, z, gz);
                accumulate(grads, w, gw);
            }
            Op::Mean(a) => {
                let ta = self.value(a);
                let n = T::from_usize(ta.numel().max(1)).expect("count");
                accumulate(grads, a, Tensor::full(ta.shape(), g.item() / n));
            }
            Op::Sum(a) => {
                let ta = self.value(a);
                accumulate(grads, a, Tensor::full(ta.shape(), g.item()));
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (self.value(p), self.value(t));
                let k = T::lit(2.0) * g.item() / T::from_usize(tp.numel().max(1)).expect("count");
                let gp = zip_map(tp, tt, |a, b| k * (a - b));
                accumulate(grads, t, gp.map(|v| -v));
                accumulate(grads, p, gp);
            }
            Op::RelL2(p, t) => {
                let (tp, tt) = (self.value(p), self.value(t));
                let tn = tt.sum_sq().sqrt();
                let dn2 = tp
                    .data()
                    .iter()
                    .zip(tt.data())
                    .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
                let dn = dn2.sqrt();
                let gv = g.item();
                if dn > T::zero() {
                    let k = gv / (dn * tn);
                    let gp = zip_map(tp, tt, |a, b| k * (a - b));
                    // ∂r/∂t = −(p − t)/(‖d‖‖t‖) − ‖d‖ t/‖t‖³
                    let kt = gv * dn / (tn * tn * tn);
                    let gt = zip_map(&gp, tt, |d, b| -d - kt * b);
                    accumulate(grads, p, gp);
                    accumulate(grads, t, gt);
                } else {
                    // zero residual: the loss sits at its minimum in `p`
                    accumulate(grads, p, tp.zeros_like());
                    accumulate(grads, t, tt.zeros_like());
                }
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let mut out = a.clone();
    for (o, &y) in out.data_mut().iter_mut().zip(b.data()) {
        *o = f(*o, y);
    }
    out
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(T::one(), &g),
        slot @ None => *slot = Some(g),
    }
}

fn complex_tensor<T: Scalar>(shape: &[usize], values: Vec<Complex<T>>) -> Tensor<T> {
    let mut data = Vec::with_capacity(values.len() * 2);
    for c in values {
        data.push(c.re);
        data.push(c.im);
    }
    Tensor::from_interleaved(shape, data).expect("complex layout")
}

/// Gathers the `2·m1 × m2` low-frequency corners of stacked `h × wh` half
/// spectra into a compact layout.
fn gather_corners<T: Copy>(full: &[T], h: usize, wh: usize, compact: &mut [T], m1: usize, m2: usize) {
    let planes = full.len() / (h * wh);
    let rows = 2 * m1;
    for p in 0..planes {
        for r in 0..rows {
            let y = if r < m1 { r } else { h - rows + r };
            let src = &full[p * h * wh + y * wh..p * h * wh + y * wh + m2];
            compact[(p * rows + r) * m2..(p * rows + r + 1) * m2].copy_from_slice(src);
        }
    }
}

/// Inverse placement of [`gather_corners`]; untouched entries keep their value.
fn scatter_corners<T: Copy>(compact: &[T], m1: usize, m2: usize, full: &mut [T], h: usize, wh: usize) {
    let planes = full.len() / (h * wh);
    let rows = 2 * m1;
    for p in 0..planes {
        for r in 0..rows {
            let y = if r < m1 { r } else { h - rows + r };
            full[p * h * wh + y * wh..p * h * wh + y * wh + m2]
                .copy_from_slice(&compact[(p * rows + r) * m2..(p * rows + r + 1) * m2]);
        }
    }
}

/// Result of [`Tape::backward`]: one optional gradient per recorded node.
pub struct Gradients<T: Scalar> {
    node_grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.node_grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter leaf reached by the sweep, in recording order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }

    /// Detaches the parameter gradients from the tape's node storage.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(id, v)| self.node_grads[v.0].take().map(|g| (id, g)))
            .collect()
    }
}
