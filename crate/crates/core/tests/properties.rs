mod common;

use common::{gaussian, rng};
use mcr2::cluster::kmeans;
use mcr2::eval::{cluster_agreement, fractional_ranks, spearman};
use mcr2::projector::{decode_checkpoint, encode_checkpoint, gumbel_softmax, ProjectorParams};
use mcr2::rate::coding_rate;
use mcr2::store::{decode_embeddings, encode_embeddings, EmbeddingMatrix};
use mcr2::Error;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn matrix_strategy(max_dim: usize, max_count: usize) -> impl Strategy<Value = Array2<f32>> {
    (1..=max_dim, 1..=max_count).prop_flat_map(|(d, n)| {
        proptest::collection::vec(-1e6f32..1e6, d * n)
            .prop_map(move |v| Array2::from_shape_vec((d, n), v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn emb_round_trip_is_exact(values in matrix_strategy(12, 12)) {
        let m = EmbeddingMatrix::new(values).unwrap();
        let bytes = encode_embeddings(&m).unwrap();
        let back = decode_embeddings(&bytes).unwrap();
        prop_assert_eq!(encode_embeddings(&back).unwrap(), bytes);
        prop_assert_eq!(back, m);
    }

    #[test]
    fn prj_round_trip_is_exact(dims in (1usize..6, 1usize..6, 1usize..6, 1usize..5), seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut p = ProjectorParams::zeros(dims.0, dims.1, dims.2, dims.3);
        for v in p.iter_mut() {
            *v = f64::from(r.gen_range(-3.0f32..3.0));
        }
        let bytes = encode_checkpoint(&p).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn coding_rate_ignores_rotation_and_order(seed in any::<u64>(), d in 1usize..10, n in 1usize..14) {
        let mut r = rng(seed);
        let z = gaussian(d, n, &mut r);
        let base = coding_rate(z.view(), 0.5).unwrap();
        // Householder reflection
        let v = gaussian(d, 1, &mut r);
        let h = Array2::eye(d) - v.dot(&v.t()) * (2.0 / v.iter().map(|x| x * x).sum::<f64>());
        let rotated = h.dot(&z);
        prop_assert!((coding_rate(rotated.view(), 0.5).unwrap() - base).abs() < 1e-9);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let shuffled = z.select(Axis(1), &order);
        prop_assert!((coding_rate(shuffled.view(), 0.5).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn spearman_ignores_monotone_maps(x in proptest::collection::vec(-100.0f64..100.0, 3..20), seed in any::<u64>()) {
        let mut r = rng(seed);
        let y: Vec<f64> = x.iter().map(|_| r.gen_range(-1.0..1.0)).collect();
        let Ok(base) = spearman(&x, &y) else { return Ok(()); };
        let mapped: Vec<f64> = x.iter().map(|v| (v / 40.0).exp() * 3.0 + 1.0).collect();
        prop_assert!((spearman(&mapped, &y).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn agreement_ignores_renaming(labels in proptest::collection::vec(0usize..6, 1..40), seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut names: Vec<usize> = (0..6).map(|i| i * 7 + 3).collect();
        names.shuffle(&mut r);
        let renamed: Vec<usize> = labels.iter().map(|l| names[*l]).collect();
        prop_assert_eq!(cluster_agreement(&renamed, &labels).unwrap().value, 1.0);
    }
}

#[test]
fn emb_header_errors() {
    assert!(matches!(decode_embeddings(b"EMB2\0\0\0\0"), Err(Error::BadMagic { offset: 0, .. })));
    assert!(matches!(decode_embeddings(b"EMB1\x02\0\0\0"), Err(Error::TruncatedFile { .. })));
    let m = EmbeddingMatrix::new(ndarray::array![[1.0f32, 2.0], [3.0, 4.0]]).unwrap();
    let bytes = encode_embeddings(&m).unwrap();
    assert!(matches!(
        decode_embeddings(&bytes[..bytes.len() - 1]),
        Err(Error::TruncatedFile { expected: 32, found: 31, .. })
    ));
    let mut nan = bytes.clone();
    nan[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(decode_embeddings(&nan), Err(Error::NonFiniteValue { offset: 20 })));
}

#[test]
fn prj_header_errors() {
    assert!(matches!(decode_checkpoint(b"EMB1"), Err(Error::BadMagic { .. })));
    assert!(matches!(decode_checkpoint(b"PR"), Err(Error::BadMagic { .. })));
    assert!(matches!(decode_checkpoint(b"PRJ1\x01\0\0\0"), Err(Error::ShapeMismatch(_))));
}

/// Each of k classes wins with frequency 1/k when logits are equal.
#[test]
fn gumbel_argmax_is_exchangeable() {
    let (k, draws) = (4usize, 10_000usize);
    let logits = Array2::<f64>::zeros((k, draws));
    let y = gumbel_softmax(logits.view(), 1.0, &mut rng(99)).unwrap();
    let mut wins = vec![0usize; k];
    for l in y.argmax_labels() {
        wins[l] += 1;
    }
    let p = 1.0 / k as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for w in wins {
        assert!((w as f64 - draws as f64 * p).abs() < 3.0 * sigma, "{w}");
    }
}

#[test]
fn kmeans_inertia_never_increases() {
    let mut r = rng(5);
    for run in 0..50 {
        let d = r.gen_range(1..6);
        let n = r.gen_range(5..60);
        let k = r.gen_range(1..=n.min(6));
        let x = gaussian(d, n, &mut r);
        let m = kmeans(x.view(), k, run).unwrap();
        for w in m.inertia_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "run {run}: {:?}", m.inertia_history);
        }
    }
}

fn inertia_of(x: &Array2<f64>, labels: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let pts = x.select(Axis(1), &members);
        let mean = pts.mean_axis(Axis(1)).unwrap();
        for p in pts.axis_iter(Axis(1)) {
            total += p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
    }
    total
}

/// Two tight pairs far apart: Lloyd must find the best of all 2-partitions.
#[test]
fn kmeans_matches_exhaustive_partition() {
    let mut r = rng(6);
    for run in 0..50 {
        let d = r.gen_range(1..4);
        let centers = gaussian(d, 2, &mut r) * 20.0;
        let mut x = Array2::<f64>::zeros((d, 4));
        for j in 0..4 {
            let offset = gaussian(d, 1, &mut r) * 0.1;
            let col = &centers.column(j / 2) + &offset.column(0);
            x.column_mut(j).assign(&col);
        }
        let best = (1u32..8)
            .map(|mask| {
                let labels: Vec<usize> = (0..4).map(|i| ((mask >> i) & 1) as usize).collect();
                inertia_of(&x, &labels, 2)
            })
            .fold(f64::INFINITY, f64::min);
        let m = kmeans(x.view(), 2, run).unwrap();
        let got = inertia_of(&x, &m.labels, 2);
        assert!((got - best).abs() <= 1e-12 * best.max(1.0), "run {run}: {got} vs {best}");
    }
}

#[test]
fn kmeans_is_deterministic() {
    let x = gaussian(3, 40, &mut rng(8));
    assert_eq!(kmeans(x.view(), 5, 17).unwrap(), kmeans(x.view(), 5, 17).unwrap());
}

/// Ranks by counting: each value's rank is 1 + #smaller + (#equal − 1)/2.
fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|w| *w < v).count() as f64;
            let equal = x.iter().filter(|w| *w == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn oracle_spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let (rx, ry) = (oracle_ranks(x), oracle_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx.sqrt() * vy.sqrt()))
}

#[test]
fn spearman_matches_counting_oracle() {
    let mut r = rng(9);
    let mut checked = 0;
    while checked < 50 {
        let n = r.gen_range(2..=8);
        // small integer range forces ties
        let x: Vec<f64> = (0..n).map(|_| r.gen_range(0..4) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| r.gen_range(0..5) as f64).collect();
        assert_eq!(fractional_ranks(&x), oracle_ranks(&x));
        match oracle_spearman(&x, &y) {
            Some(expected) => {
                assert!((spearman(&x, &y).unwrap() - expected).abs() < 1e-12);
                checked += 1;
            }
            None => assert!(spearman(&x, &y).is_err()),
        }
    }
}
