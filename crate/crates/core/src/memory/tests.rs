use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rows(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    (0..k).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

fn loss_of(x: &[Vec<f64>], tau: f64, kind: DistanceKind) -> f64 {
    let d = x[0].len();
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(vec![x.len(), d], x.concat()).unwrap();
    let l = contrastive_loss(&mut tape, v, tau, kind).unwrap();
    tape.scalar_value(l)
}

fn brute_contrastive(x: &[Vec<f64>], tau: f64) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let t = x.len();
    let mut total = 0.0;
    for m in 0..t {
        let partner = if m % 2 == 0 { m + 1 } else { m - 1 };
        let num = (-dist(&x[m], &x[partner]) / tau).exp();
        let mut den = 0.0;
        for c in 0..t {
            if c != m {
                den += (-dist(&x[m], &x[c]) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / t as f64
}

#[test]
fn prototype_is_the_mean() {
    assert_eq!(compute_prototype(&[vec![1.5, -2.0]]).unwrap(), vec![1.5, -2.0]);
    assert_eq!(compute_prototype(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap(), vec![1.0, 1.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = rows(&mut rng, 5, 7);
    let p = compute_prototype(&f).unwrap();
    for i in 0..7 {
        let want = f.iter().map(|r| r[i]).sum::<f64>() / 5.0;
        assert!((p[i] - want).abs() < 1e-15);
    }
    assert!(compute_prototype::<Vec<f64>>(&[]).is_err());
    assert!(compute_prototype(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn update_examples() {
    let p = vec![0.5, -1.0, 2.0];
    let same = update_prototype(&p, 3, &[p.clone(), p.clone()]).unwrap();
    for (a, b) in same.iter().zip(&p) {
        assert!((a - b).abs() < 1e-15);
    }
    let got = update_prototype(&[1.0, 1.0], 1, &[vec![3.0, 3.0], vec![1.0, 1.0]]).unwrap();
    assert_eq!(got, vec![1.5, 1.5]);
    assert!(update_prototype(&[1.0], 0, &[vec![1.0]]).is_err());
}

#[test]
fn chained_updates_equal_global_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let domains: Vec<Vec<Vec<f64>>> = (0..3).map(|_| rows(&mut rng, 4, 6)).collect();
    let mut store = PrototypeStore::new();
    store.insert(7, &domains[0], 1).unwrap();
    store.update(7, &domains[1]).unwrap();
    store.update(7, &domains[2]).unwrap();
    let all: Vec<Vec<f64>> = domains.concat();
    let want = compute_prototype(&all).unwrap();
    let got = &store.get(7).unwrap().vector;
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(store.get(7).unwrap().domains, 3);
}

#[test]
fn store_contract() {
    let mut store = PrototypeStore::new();
    assert!(store.update(0, &[vec![1.0]]).is_err());
    store.insert(0, &[vec![1.0, 0.0], vec![3.0, 0.0]], 2).unwrap();
    let p = store.get(0).unwrap();
    assert_eq!((p.domains, p.shots), (2, 1));
    assert!(store.insert(0, &[vec![1.0, 0.0]], 1).is_err());
    assert!(store.insert(1, &vec![vec![1.0, 0.0]; 3], 2).is_err());
    assert!(store.insert(1, &[vec![1.0, 0.0, 0.0]], 1).is_err());
    assert!(store.update(0, &[vec![1.0, 0.0], vec![1.0, 0.0]]).is_err());
    store.update(0, &[vec![5.0, 3.0]]).unwrap();
    assert_eq!(store.get(0).unwrap().vector, vec![3.0, 1.0]);
    assert_eq!(store.get(0).unwrap().domains, 3);
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = PrototypeStore::new();
    for c in [4, 1, 9] {
        store.insert(c, &rows(&mut rng, 2, 5), 1).unwrap();
    }
    store.update(9, &rows(&mut rng, 2, 5)).unwrap();
    store.quantize_f32();
    let mut ckpt = Checkpoint::new();
    store.write_checkpoint(&mut ckpt).unwrap();
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert_eq!(PrototypeStore::read_checkpoint(&back).unwrap(), store);
    assert_eq!(back.require("prototypes.meta").unwrap().shape(), &[3, 3]);

    let mut empty = Checkpoint::new();
    PrototypeStore::new().write_checkpoint(&mut empty).unwrap();
    assert!(PrototypeStore::read_checkpoint(&empty).unwrap().is_empty());
}

#[test]
fn single_pair_costs_nothing() {
    assert_eq!(loss_of(&[vec![0.0, 1.0], vec![3.0, -2.0]], 1.0, DistanceKind::Euclidean), 0.0);
}

#[test]
fn equidistant_rows_cost_log_t_minus_one() {
    // Vertices of a regular simplex: every pairwise distance is √2.
    let t = 4;
    let x: Vec<Vec<f64>> = (0..t).map(|i| (0..t).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for kind in [DistanceKind::Euclidean, DistanceKind::Cosine] {
        assert!((loss_of(&x, 0.7, kind) - ((t - 1) as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn loss_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let x = rows(&mut rng, 6, 5);
        let tau = rng.random_range(0.3..2.0);
        assert!((loss_of(&x, tau, DistanceKind::Euclidean) - brute_contrastive(&x, tau)).abs() < 1e-12);
    }
}

#[test]
fn loss_rejects_bad_arguments() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
    assert!(contrastive_loss(&mut tape, x, 1.0, DistanceKind::Euclidean).is_err());
    let y = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
    assert!(contrastive_loss(&mut tape, y, 0.0, DistanceKind::Euclidean).is_err());
    let z = tape.constant(vec![1, 2], vec![0.0; 2]).unwrap();
    assert!(contrastive_loss(&mut tape, z, 1.0, DistanceKind::Euclidean).is_err());
}

#[test]
fn forced_selection_uses_every_prototype() {
    let mut store = PrototypeStore::new();
    for c in 0..3 {
        store.insert(c, &[vec![c as f64, 1.0]], 1).unwrap();
    }
    let labels = [2, 0, 1];
    let b = sample_positive_pairs(&store, &labels, 3, 11).unwrap();
    assert_eq!(b.classes, vec![0, 1, 2]);
    assert_eq!(
        b.members,
        vec![
            Member::Prototype(0),
            Member::Feature(1),
            Member::Prototype(1),
            Member::Feature(2),
            Member::Prototype(2),
            Member::Feature(0),
        ]
    );
    assert_eq!(sample_positive_pairs(&store, &labels, 3, 11).unwrap(), b);
}

#[test]
fn sampler_matches_reference_replay() {
    let mut store = PrototypeStore::new();
    for c in [0, 2, 4] {
        store.insert(c, &[vec![0.0; 3]], 1).unwrap();
    }
    let labels = [0, 1, 1, 2, 3, 3, 4, 0, 2, 3];
    for seed in 0..25 {
        let b = sample_positive_pairs(&store, &labels, 2, seed).unwrap();

        let mut rng = crate::util::rng(seed, &[]);
        let mut picks = rand::seq::index::sample(&mut rng, 5, 2).into_vec();
        picks.sort_unstable();
        let mut members = Vec::new();
        for &c in &picks {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if c % 2 == 0 {
                members.push(Member::Prototype(c));
                members.push(Member::Feature(rows[rng.random_range(0..rows.len())]));
            } else {
                let pair = rand::seq::index::sample(&mut rng, rows.len(), 2);
                members.push(Member::Feature(rows[pair.index(0)]));
                members.push(Member::Feature(rows[pair.index(1)]));
            }
        }
        assert_eq!(b.classes, picks);
        assert_eq!(b.members, members);
        assert_ne!(b.classes[0], b.classes[1]);
    }
}

#[test]
fn sampler_rejects_too_few_classes() {
    let mut store = PrototypeStore::new();
    store.insert(0, &[vec![0.0]], 1).unwrap();
    // Class 1 has one feature and no prototype, so only class 0 qualifies.
    assert!(sample_positive_pairs(&store, &[0, 1], 2, 0).is_err());
    assert!(sample_positive_pairs(&store, &[0, 1], 0, 0).is_err());
}

#[test]
fn assembled_rows_follow_members() {
    let mut store = PrototypeStore::new();
    store.insert(3, &[vec![9.0, 8.0]], 1).unwrap();
    let batch = ContrastiveBatch {
        members: vec![Member::Prototype(3), Member::Feature(1)],
        classes: vec![3],
    };
    let mut tape = Tape::<f64>::new();
    let f = tape.variable(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let x = batch.assemble(&mut tape, f, &store).unwrap();
    assert_eq!(tape.value(x), &[9.0, 8.0, 3.0, 4.0]);
    assert!(batch.is_prototype(0) && !batch.is_prototype(1));

    // The prototype row is detached: gradient lands only on the feature.
    let loss = tape.sum_all(x);
    let g = tape.gradients(loss).unwrap();
    assert_eq!(g.get(f).unwrap(), &[0.0, 0.0, 1.0, 1.0]);

    let bad = ContrastiveBatch { members: vec![Member::Feature(5), Member::Feature(0)], classes: vec![0] };
    assert!(bad.assemble(&mut tape, f, &store).is_err());
}

#[test]
fn mean_distance_to_prototypes() {
    let mut store = PrototypeStore::new();
    store.insert(0, &[vec![0.0, 0.0]], 1).unwrap();
    store.insert(1, &[vec![1.0, 1.0]], 1).unwrap();
    let d = store.mean_distance(&[vec![3.0, 4.0], vec![1.0, 2.0]], &[0, 1]).unwrap();
    assert!((d - 3.0).abs() < 1e-15);
    assert!(store.mean_distance(&[vec![0.0, 0.0]], &[5]).is_err());
}

proptest! {
    #[test]
    fn running_mean_equivalence(seed in any::<u64>(), k in 1usize..6, d in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages: Vec<Vec<Vec<f64>>> = (0..3).map(|_| rows(&mut rng, k, d)).collect();
        let mut p = compute_prototype(&stages[0]).unwrap();
        for (e, s) in stages.iter().enumerate().skip(1) {
            p = update_prototype(&p, e, s).unwrap();
        }
        let want = compute_prototype(&stages.concat()).unwrap();
        for (a, b) in p.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_nonnegative_and_shrinks_with_positive_distance(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = rows(&mut rng, 6, 4);
        let base = loss_of(&x, 1.0, DistanceKind::Euclidean);
        prop_assert!(base >= -1e-12);
        // Pull row 1 halfway toward its partner along the segment between
        // them: only d(0,1) changes if the other rows are far away.
        for r in &mut x[2..] {
            for v in r.iter_mut() {
                *v += 50.0;
            }
        }
        let far = loss_of(&x, 1.0, DistanceKind::Euclidean);
        let mid: Vec<f64> = x[0].iter().zip(&x[1]).map(|(a, b)| 0.5 * (a + b)).collect();
        x[1] = mid;
        let closer = loss_of(&x, 1.0, DistanceKind::Euclidean);
        prop_assert!(closer <= far + 1e-12);
    }
}
