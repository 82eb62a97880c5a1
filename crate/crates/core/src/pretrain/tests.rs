use std::f64::consts::PI;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::datamodel::Grid2D;
use crate::fno::FnoConfig;

fn random_field(c: usize, h: usize, w: usize, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Field::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tiny_config(c: usize) -> FnoConfig {
    FnoConfig {
        in_channels: c,
        out_channels: 1,
        width: 4,
        modes1: 2,
        modes2: 2,
        layers: 1,
        proj_hidden: 4,
    }
}

#[test]
fn zero_ratio_is_identity() {
    let x = random_field(2, 16, 16, 1);
    let (m, mask) = apply_mask(&x, &MaskSpec::pixel(0.0), 3).unwrap();
    assert_eq!(m, x);
    assert!(mask.iter().all(|&b| !b));
}

#[test]
fn seventy_percent_of_a_64_grid() {
    let x = random_field(1, 64, 64, 1);
    let (m, mask) = apply_mask(&x, &MaskSpec::pixel(0.7), 3).unwrap();
    assert_eq!(mask.iter().filter(|&&b| b).count(), 2867);
    assert_eq!(m.data().iter().filter(|&&v| v == 0.0).count(), 2867);
}

#[test]
fn mask_is_seeded() {
    let x = random_field(1, 16, 16, 1);
    let spec = MaskSpec::pixel(0.5);
    assert_eq!(apply_mask(&x, &spec, 9).unwrap().1, apply_mask(&x, &spec, 9).unwrap().1);
    assert_ne!(apply_mask(&x, &spec, 9).unwrap().1, apply_mask(&x, &spec, 10).unwrap().1);
}

#[test]
fn counts_are_exact_on_small_grids() {
    for n in [8usize, 12, 16] {
        for g in [Granularity::Pixel, Granularity::Patch(2), Granularity::Patch(4)] {
            let p = match g {
                Granularity::Pixel => 1,
                Granularity::Patch(p) => p,
            };
            if n % p != 0 {
                continue;
            }
            let units = (n / p) * (n / p);
            for i in 0..=20 {
                let ratio = i as f64 / 20.0;
                let spec = MaskSpec {
                    ratio,
                    granularity: g,
                    fill: 0.0,
                };
                let (_, mask) = apply_mask(&random_field(1, n, n, 2), &spec, i).unwrap();
                let want = (ratio * units as f64).round() as usize * p * p;
                assert_eq!(mask.iter().filter(|&&b| b).count(), want, "n={n} {g:?} ratio={ratio}");
            }
        }
    }
}

#[test]
fn patches_must_tile_the_grid() {
    let spec = MaskSpec {
        ratio: 0.5,
        granularity: Granularity::Patch(3),
        fill: 0.0,
    };
    assert!(apply_mask(&random_field(1, 16, 16, 1), &spec, 1).is_err());
    assert!(apply_mask(&random_field(1, 16, 16, 1), &MaskSpec::pixel(1.5), 1).is_err());
}

#[test]
fn same_pattern_in_every_channel_and_coordinates_untouched() {
    let x = random_field(3, 16, 16, 4);
    let (m, mask) = apply_mask_with(&x, &MaskSpec::pixel(0.3), 5, &[false, false, true]).unwrap();
    for c in 0..2 {
        for (i, &b) in mask.iter().enumerate() {
            assert_eq!(m.channel(c)[i] == 0.0, b);
        }
    }
    assert_eq!(m.channel(2), x.channel(2));
}

#[test]
fn zero_sigma_and_constants_are_unchanged() {
    let x = random_field(2, 16, 16, 1);
    assert_eq!(apply_blur(&x, 0.0).unwrap(), x);
    let c = Field::new(1, 16, 16, vec![2.5; 256]).unwrap();
    for sigma in [0.3, 1.0, 2.7] {
        let b = apply_blur(&c, sigma).unwrap();
        assert!(b.data().iter().all(|v| (v - 2.5).abs() < 1e-6));
    }
    assert!(apply_blur(&x, -1.0).is_err());
}

#[test]
fn blur_attenuates_a_mode_by_the_kernel_transfer_value() {
    let (h, w) = (32usize, 64usize);
    for (m, sigma) in [(1usize, 1.0f64), (3, 1.5), (7, 0.6), (12, 2.2)] {
        let src: Vec<f64> = (0..h * w)
            .map(|i| (2.0 * PI * m as f64 * (i % w) as f64 / w as f64).sin())
            .collect();
        // Independent kernel construction and its DFT at frequency m.
        let r = (3.0 * sigma).ceil() as i64;
        let raw: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
        let total: f64 = raw.iter().sum();
        let gain: f64 = (-r..=r)
            .zip(&raw)
            .map(|(i, k)| k / total * (2.0 * PI * m as f64 * i as f64 / w as f64).cos())
            .sum();
        let out = blur_plane(&src, h, w, sigma);
        let err = out
            .iter()
            .zip(&src)
            .map(|(o, s)| (o - gain * s).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "m={m} sigma={sigma}: {err}");
        let f = Field::from_f64(1, h, w, &src).unwrap();
        let b = apply_blur(&f, sigma).unwrap();
        let err32 = b
            .data()
            .iter()
            .zip(&src)
            .map(|(o, s)| (*o as f64 - gain * s).abs())
            .fold(0.0, f64::max);
        assert!(err32 < 1e-6, "f32 m={m}: {err32}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blur_is_linear_and_keeps_the_mean(seed in any::<u64>(), sigma in 0.1f64..3.0, a in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (16usize, 24usize);
        let x: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let (bx, by, bm) = (blur_plane(&x, h, w, sigma), blur_plane(&y, h, w, sigma), blur_plane(&mix, h, w, sigma));
        for i in 0..h * w {
            prop_assert!((bm[i] - (a * bx[i] + by[i])).abs() < 1e-12);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        prop_assert!((mean(&bx) - mean(&x)).abs() < 1e-10);
    }

    #[test]
    fn mask_count_is_exact(ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let (_, mask) = apply_mask(&random_field(1, 16, 16, 1), &MaskSpec::pixel(ratio), seed).unwrap();
        prop_assert_eq!(mask.iter().filter(|&&b| b).count(), (ratio * 256.0).round() as usize);
    }
}

#[test]
fn order_matters_once_blur_is_on() {
    let x = random_field(1, 16, 16, 3);
    let mut cfg = PretrainConfig {
        mask: MaskSpec::pixel(0.5),
        blur: BlurSpec::new(1.0, 1.0),
        ..PretrainConfig::default()
    };
    let a = corrupt(&x, &cfg, &[], 4).unwrap();
    cfg.order = Order::BlurThenMask;
    assert_ne!(a, corrupt(&x, &cfg, &[], 4).unwrap());
    cfg.blur = BlurSpec::default();
    let c = corrupt(&x, &cfg, &[], 4).unwrap();
    cfg.order = Order::MaskThenBlur;
    assert_eq!(c, corrupt(&x, &cfg, &[], 4).unwrap());
}

fn grads(m: &FnoModel<f32>) -> Vec<Tensor<f32>> {
    m.store.iter().map(|(_, p)| p.grad.clone()).collect()
}

#[test]
fn unperturbed_step_is_plain_autoencoding() {
    let batch: Vec<Field> = (0..3).map(|i| random_field(2, 16, 16, i)).collect();
    let cfg = PretrainConfig::default();
    let mut a = FnoModel::<f32>::new(tiny_config(2), 1, false, true).unwrap();
    let mut b = a.clone();
    let la = pretrain_step(&mut a, &batch, &cfg, &[], 77).unwrap();
    let lb = autoencode_step(&mut b, &batch, LossKind::RelativeL2).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(grads(&a), grads(&b));
}

#[test]
fn zero_output_has_unit_loss() {
    let batch: Vec<Field> = (0..2).map(|i| random_field(2, 16, 16, i)).collect();
    let mut m = FnoModel::<f32>::new(tiny_config(2), 1, false, true).unwrap();
    m.zero_weights();
    let l = autoencode_step(&mut m, &batch, LossKind::RelativeL2).unwrap();
    assert!((l - 1.0).abs() < 1e-6);
}

#[test]
fn step_needs_a_decoder() {
    let mut m = FnoModel::<f32>::new(tiny_config(2), 1, true, false).unwrap();
    let r = pretrain_step(&mut m, &[random_field(2, 16, 16, 1)], &PretrainConfig::default(), &[], 1);
    assert!(matches!(r, Err(Error::DecoderAbsent)));
}

fn unlabeled(n: usize) -> Dataset {
    let samples = (0..n)
        .map(|i| crate::datamodel::SampleRecord {
            input: random_field(2, 16, 16, 100 + i as u64).into(),
            solution: None,
            params: Default::default(),
            source: "toy".into(),
        })
        .collect();
    Dataset {
        pde: "toy".into(),
        grid: Grid2D::new(16, 16).unwrap(),
        channels: Vec::new(),
        solution_channels: Vec::new(),
        seed: 0,
        param_ranges: Default::default(),
        samples,
    }
}

fn adapter() -> TimeAdapter {
    TimeAdapter::Static {
        in_channels: 2,
        out_channels: 1,
    }
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let ds = unlabeled(4);
    let mut m = FnoModel::<f32>::new(tiny_config(2), 1, false, true).unwrap();
    let init = m.store.clone();
    let cfg = PretrainConfig {
        epochs: 0,
        ..PretrainConfig::default()
    };
    let out = train_pretrain(&ds, &mut m, &cfg, &adapter()).unwrap();
    assert!(out.losses.is_empty());
    assert_eq!(out.provenance.stage, CheckpointStage::Pretrained);
    assert_eq!(m.store, init);
}

#[test]
fn training_reduces_the_loss_and_depends_on_the_seed() {
    let ds = unlabeled(8);
    let cfg = PretrainConfig {
        epochs: 30,
        batch: 4,
        lr: 1e-2,
        mask: MaskSpec::pixel(0.2),
        blur: BlurSpec::new(0.0, 1.0),
        ..PretrainConfig::default()
    };
    let mut a = FnoModel::<f32>::new(tiny_config(2), 1, false, true).unwrap();
    let out = train_pretrain(&ds, &mut a, &cfg, &adapter()).unwrap();
    assert_eq!(out.losses.len(), 30);
    assert!(out.losses[29] < out.losses[0], "{:?}", out.losses);

    let mut b = FnoModel::<f32>::new(tiny_config(2), 2, false, true).unwrap();
    let cfg2 = PretrainConfig { seed: 2, ..cfg };
    train_pretrain(&ds, &mut b, &cfg2, &adapter()).unwrap();
    assert_ne!(a.store, b.store);
    for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(p.value.shape(), q.value.shape());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    write_loss_csv(&out.losses, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("epoch,loss\n1,"));
    assert_eq!(text.lines().count(), 31);
}
