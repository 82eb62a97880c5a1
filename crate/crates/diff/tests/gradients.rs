use nopt_diff::gradcheck::{check_all_ops, op_names};
use nopt_diff::{Adam, DiffError, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn every_op_matches_central_differences() {
    let reports = check_all_ops(20, 11).unwrap();
    assert_eq!(reports.len(), op_names().len());
    for r in &reports {
        assert!(r.worst < 1e-4, "{} worst relative error {:e}", r.op, r.worst);
    }
}

#[test]
fn adding_zero_is_identity() {
    let x = random(&[3, 5], 1);
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let z = tape.constant(Tensor::zeros(&[3, 5]));
    let y = tape.add(a, z).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn inverse_transform_recovers_input() {
    let x = random(&[2, 8, 8], 2);
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let f = tape.rfft2(a).unwrap();
    let b = tape.irfft2(f).unwrap();
    let back = tape.value(b);
    let err = x.data().iter().zip(back.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let scale = x.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(err / scale < 1e-10, "{err}");
}

#[test]
fn parseval_with_unnormalized_forward() {
    let x = random(&[8, 8], 3);
    let mut tape = Tape::new();
    let a = tape.constant(x.clone());
    let f = tape.rfft2(a).unwrap();
    let spec = tape.value(f).as_complex().to_vec();
    // Interior half-spectrum columns stand for a conjugate pair.
    let wh = 5;
    let spectral: f64 = spec
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let kx = i % wh;
            let w = if kx == 0 || kx == wh - 1 { 1.0 } else { 2.0 };
            w * c.norm_sqr()
        })
        .sum();
    let mut direct = 0.0;
    for v in x.data() {
        direct += v * v;
    }
    let want = 64.0 * direct;
    assert!((spectral - want).abs() / want < 1e-12, "{spectral} vs {want}");
}

#[test]
fn mean_gradient_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
    let m = tape.mean(x).unwrap();
    let g = tape.backward(m).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[0.25; 4]);
}

#[test]
fn relative_l2_at_its_minimum_has_zero_gradient() {
    let t = random(&[4, 4], 4);
    let mut tape = Tape::new();
    let p = tape.constant(t.clone());
    let q = tape.constant(t);
    let l = tape.relative_l2(p, q).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let g = tape.backward(l).unwrap();
    assert!(g.wrt(p).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2]));
    assert_eq!(tape.backward(x).err(), Some(DiffError::NonScalarLoss(vec![2])));
}

#[test]
fn shape_mismatch_and_non_finite_are_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(tape.add(a, b), Err(DiffError::ShapeMismatch { .. })));
    let big = tape.constant(Tensor::full(&[2], 1e300));
    assert_eq!(tape.scale(big, 1e300).err(), Some(DiffError::NonFinite("scale")));
    let zero = tape.constant(Tensor::zeros(&[2]));
    assert_eq!(tape.relative_l2(a, zero).err(), Some(DiffError::ZeroNormTarget));
}

/// L = a·L1 + b·L2 backpropagates as a·∇L1 + b·∇L2.
#[test]
fn backward_is_linear_in_the_loss() {
    let x = random(&[2, 4, 4], 5);
    let w = random(&[3, 2], 6);
    let t = random(&[3, 4, 4], 7);
    let (ca, cb) = (0.7, -1.3);
    let grad_of = |mix: (f64, f64)| {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let tv = tape.constant(t.clone());
        let h = tape.affine(xv, wv, None).unwrap();
        let h = tape.gelu(h).unwrap();
        let l1 = tape.mse(h, tv).unwrap();
        let l2 = tape.relative_l2(h, tv).unwrap();
        let a = tape.scale(l1, mix.0).unwrap();
        let b = tape.scale(l2, mix.1).unwrap();
        let l = tape.add(a, b).unwrap();
        tape.backward(l).unwrap().wrt(wv).unwrap().clone()
    };
    let both = grad_of((ca, cb));
    let g1 = grad_of((1.0, 0.0));
    let g2 = grad_of((0.0, 1.0));
    for ((g, a), b) in both.data().iter().zip(g1.data()).zip(g2.data()) {
        assert!((g - (ca * a + cb * b)).abs() < 1e-10);
    }
}

#[test]
fn repeated_training_is_bit_identical() {
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let wid = store.add(
            "w",
            Tensor::from_vec(&[2, 2], (0..4).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap(),
        );
        let x = Tensor::from_vec(&[2, 4, 4], (0..32).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let t = Tensor::from_vec(&[2, 4, 4], (0..32).map(|i| (i as f32 * 0.11).cos()).collect()).unwrap();
        let adam = Adam::default();
        for _ in 0..10 {
            let grads = {
                let mut tape = Tape::new();
                let xv = tape.constant_ref(&x);
                let tv = tape.constant_ref(&t);
                let wv = tape.param(wid, store.value(wid));
                let h = tape.affine(xv, wv, None).unwrap();
                let f = tape.rfft2(h).unwrap();
                let h = tape.irfft2(f).unwrap();
                let l = tape.relative_l2(h, tv).unwrap();
                tape.backward(l).unwrap().into_param_grads()
            };
            store.accumulate_detached(&grads, 1.0);
            adam.step_all(&mut store);
        }
        store.value(wid).clone()
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}
