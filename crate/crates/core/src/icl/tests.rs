use proptest::prelude::*;
use rand::Rng;

use super::*;

fn bank_1d(xs: &[f32], ys: &[f32]) -> DemoBank {
    let rows: Vec<Vec<f32>> = xs.iter().map(|&x| vec![x]).collect();
    let vals: Vec<Vec<f32>> = ys.iter().map(|&y| vec![y]).collect();
    DemoBank::from_rows(&rows, 1, &vals, 1).unwrap()
}

/// Full sort by (distance, index) with distances summed the same way.
fn brute_force(query: &[f32], rows: &[Vec<f32>], ys: &[Vec<f32>], d: usize, k: usize) -> Vec<f32> {
    let v = ys[0].len();
    let mut out = Vec::new();
    for q in query.chunks(d) {
        let mut scored: Vec<(f32, usize)> = rows
            .iter()
            .enumerate()
            .map(|(n, r)| {
                let mut s = 0.0f32;
                for (a, b) in q.iter().zip(r) {
                    s += (a - b).abs();
                }
                (s, n)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for c in 0..v {
            let sum: f64 = scored[..k].iter().map(|&(_, n)| ys[n][c] as f64).sum();
            out.push((sum / k as f64) as f32);
        }
    }
    out
}

fn random_rows(n: usize, d: usize, seed: u64, levels: u32) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(0..levels) as f32 / levels as f32).collect())
        .collect()
}

#[test]
fn two_nearest_of_three() {
    let bank = bank_1d(&[0.1, 0.5, 0.9], &[10.0, 20.0, 30.0]);
    let out = knn_mean(&[0.45], &bank, 2, 4).unwrap();
    assert_eq!(out, vec![15.0]);
}

#[test]
fn a_demo_location_finds_itself() {
    let rows = random_rows(40, 3, 1, 1000);
    let ys = random_rows(40, 2, 2, 1000);
    let bank = DemoBank::from_rows(&[rows.concat()], 3, &[ys.concat()], 2).unwrap();
    let out = knn_mean(&rows.concat(), &bank, 1, 7).unwrap();
    assert_eq!(out, ys.concat());
}

#[test]
fn all_neighbours_give_the_global_mean() {
    let bank = bank_1d(&[0.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 6.0]);
    assert_eq!(knn_mean(&[0.0, 10.0], &bank, 4, 1).unwrap(), vec![3.0, 3.0]);
    assert!(matches!(knn_mean(&[0.0], &bank, 5, 1), Err(Error::TopK { k: 5, max: 4 })));
    assert!(knn_mean(&[0.0], &bank, 0, 1).is_err());
    assert!(knn_mean(&[0.0], &bank, 1, 0).is_err());
}

#[test]
fn ties_prefer_the_lower_index() {
    let bank = bank_1d(&[1.0, -1.0, 1.0, -1.0], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(knn_mean(&[0.0], &bank, 1, 1).unwrap(), vec![1.0]);
    assert_eq!(knn_mean(&[0.0], &bank, 3, 1).unwrap(), vec![2.0]);
}

#[test]
fn rows_and_fields_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = Field::new(6, 4, 5, (0..120).map(|_| rng.random()).collect()).unwrap();
    for source in SimilaritySource::ALL {
        let (rows, _) = target_rows(&f, 3, source);
        assert_eq!(field_from_rows(&rows, 6, 4, 5, 3, source).unwrap(), f);
    }
    let (rows, d) = similarity_rows(&f, 3, SimilaritySource::ModelOutput);
    assert_eq!(d, 2);
    // Pixel 1, frame 2 holds channels 4 and 5.
    assert_eq!(&rows[(3 + 2) * 2..(3 + 2) * 2 + 2], &[f.channel(4)[1], f.channel(5)[1]]);
}

#[test]
fn sources_parse_by_name() {
    for s in SimilaritySource::ALL {
        assert_eq!(s.name().parse::<SimilaritySource>().unwrap(), s);
    }
    assert!("pixels".parse::<SimilaritySource>().is_err());
}

#[test]
fn slope_and_shape_examples() {
    let t: Vec<f32> = vec![1.0, -2.0, 3.0, 0.5];
    let scaled: Vec<f32> = t.iter().map(|v| 2.0 * v + 1.0).collect();
    assert!((scale_slope(&scaled, &t).unwrap() - 2.0).abs() < 1e-6);
    assert_eq!(shape_error(&t, &t).unwrap(), 0.0);
    let neg: Vec<f32> = t.iter().map(|v| -v).collect();
    let mean_sq = t.iter().map(|v| (v / 3.0).powi(2) as f64).sum::<f64>() / 4.0;
    assert!((shape_error(&neg, &t).unwrap() - 4.0 * mean_sq).abs() < 1e-6);
    let tripled: Vec<f32> = t.iter().map(|v| 3.0 * v).collect();
    assert!(shape_error(&tripled, &t).unwrap() < 1e-12);
    assert!(matches!(scale_slope(&t, &[1.0; 4]), Err(Error::ZeroVariance)));
    assert!(matches!(shape_error(&t, &[0.0; 4]), Err(Error::AllZero)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matches_a_full_sort(seed in any::<u64>(), n in 1usize..30, d in 1usize..4, k_frac in 0.0f64..1.0, levels in 2u32..6) {
        // Few distinct levels make distance ties common.
        let rows = random_rows(n, d, seed, levels);
        let ys = random_rows(n, 2, seed ^ 1, 100);
        let query = random_rows(5, d, seed ^ 2, levels).concat();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let bank = DemoBank::from_rows(&rows, d, &ys, 2).unwrap();
        let want = brute_force(&query, &rows, &ys, d, k);
        for chunk in [1usize, 2, 5, 64] {
            prop_assert_eq!(&knn_mean(&query, &bank, k, chunk).unwrap(), &want);
        }
    }

    #[test]
    fn query_order_does_not_matter(seed in any::<u64>()) {
        let rows = random_rows(20, 2, seed, 1000);
        let ys = random_rows(20, 1, seed ^ 1, 1000);
        let bank = DemoBank::from_rows(&rows, 2, &ys, 1).unwrap();
        let queries = random_rows(8, 2, seed ^ 2, 1000);
        let base = knn_mean(&queries.concat(), &bank, 3, 3).unwrap();
        let rev: Vec<Vec<f32>> = queries.iter().rev().cloned().collect();
        let mut flipped = knn_mean(&rev.concat(), &bank, 3, 3).unwrap();
        flipped.reverse();
        prop_assert_eq!(base, flipped);
    }
}
