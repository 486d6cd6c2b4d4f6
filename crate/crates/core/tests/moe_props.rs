//! Routing, capacity and balance-loss properties on random instances.

use proptest::prelude::*;
use widenet_core::moe::{
    balance_loss, balance_loss_from_stats, buffer_capacity, dispatch_with_capacity, route, top_k_indices,
    RoutingOutcome,
};
use widenet_core::tensor::{RngStream, Tensor};

fn instance(seed: u64, t: usize, d: usize, e: usize, quantize: bool) -> (Tensor, Tensor) {
    let mut rng = RngStream::new(seed);
    let mut x = rng.sample_gaussian([t, d], 0.0, 1.0).unwrap();
    if quantize {
        // coarse inputs give exact probability ties
        let q: Vec<f64> = x.data().iter().map(|v| v.round()).collect();
        x = Tensor::new([t, d], q).unwrap();
    }
    let w = rng.sample_gaussian([d, e], 0.0, 1.0).unwrap();
    (x, w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn top_k_selection_is_exact(seed in 0u64..10_000, t in 1usize..20, e in 1usize..8, k_raw in 1usize..8,
                                training: bool, quantize: bool) {
        let k = k_raw.min(e);
        let (x, w) = instance(seed, t, 3, e, quantize);
        let o = route(&x, &w, k, &mut RngStream::new(seed ^ 7), training).unwrap();
        for tok in 0..t {
            let sel = o.selected(tok);
            let row = &o.probs[tok * e..(tok + 1) * e];
            let mut uniq = sel.to_vec();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), k);
            // gates: the selected probabilities, unrenormalized, zero elsewhere
            for i in 0..e {
                let g = o.gates[tok * e + i];
                if sel.contains(&i) {
                    prop_assert_eq!(g, row[i]);
                } else {
                    prop_assert_eq!(g, 0.0);
                }
            }
            let min_sel = sel.iter().map(|&i| row[i]).fold(f64::INFINITY, f64::min);
            for i in (0..e).filter(|i| !sel.contains(i)) {
                prop_assert!(row[i] <= min_sel);
                // an equal unselected value must sit at a higher index
                if row[i] == min_sel {
                    prop_assert!(sel.iter().all(|&s| row[s] > row[i] || s < i));
                }
            }
        }
    }

    #[test]
    fn capacity_is_never_exceeded(seed in 0u64..10_000, t in 1usize..24, e in 1usize..8, k_raw in 1usize..8,
                                  c in 0.25f64..2.5) {
        let k = k_raw.min(e);
        let (x, w) = instance(seed, t, 3, e, false);
        let o = route(&x, &w, k, &mut RngStream::new(seed), true).unwrap();
        let b = buffer_capacity(c, k, 1, t, e).unwrap();
        let d = dispatch_with_capacity(&o, b);
        let mut kept = vec![0usize; e];
        for (slot, &i) in d.indices.iter().enumerate() {
            if d.kept[slot] {
                kept[i] += 1;
            }
        }
        prop_assert_eq!(&kept, &d.per_expert_count);
        for i in 0..e {
            prop_assert!(kept[i] <= b);
            // first come, first served: kept tokens are a prefix of arrivals
            let arrivals: Vec<usize> = (0..t).filter(|&tok| o.selected(tok).contains(&i)).collect();
            let expect: Vec<usize> = arrivals.iter().copied().take(b).collect();
            prop_assert_eq!(d.kept_tokens(i), expect);
        }
        // dropping never changes the pre-capacity statistics
        prop_assert_eq!(d.dispatch_counts(), o.dispatch_counts());
        prop_assert_eq!(balance_loss(&d), balance_loss(&o));
    }

    #[test]
    fn balance_loss_floor_when_m_equals_p(raw in prop::collection::vec(0.001f64..1.0, 1..10)) {
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        prop_assert!(balance_loss_from_stats(&p, &p).unwrap() >= 1.0 - 1e-12);
    }

    #[test]
    fn balance_loss_ignores_expert_labels(seed in 0u64..10_000, t in 1usize..16, e in 2usize..7) {
        let (x, w) = instance(seed, t, 3, e, false);
        let o = route(&x, &w, 1, &mut RngStream::new(seed), false).unwrap();
        let m = o.dispatch_fractions();
        let p = o.mean_probs();
        let shift = (seed as usize) % e;
        let rot = |v: &[f64]| -> Vec<f64> { (0..e).map(|i| v[(i + shift) % e]).collect() };
        let a = balance_loss_from_stats(&m, &p).unwrap();
        let b = balance_loss_from_stats(&rot(&m), &rot(&p)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn dispatch_fractions_sum_to_k(seed in 0u64..10_000, t in 1usize..16, e in 1usize..7, k_raw in 1usize..7) {
        let k = k_raw.min(e);
        let (x, w) = instance(seed, t, 3, e, false);
        let o = route(&x, &w, k, &mut RngStream::new(seed), false).unwrap();
        prop_assert!((o.dispatch_fractions().iter().sum::<f64>() - k as f64).abs() <= 1e-12);
    }
}

#[test]
fn balance_loss_worked_values() {
    assert!((balance_loss_from_stats(&[0.25; 4], &[0.25; 4]).unwrap() - 1.0).abs() <= 1e-9);
    let hot = [1.0, 0.0, 0.0, 0.0];
    assert!((balance_loss_from_stats(&hot, &hot).unwrap() - 4.0).abs() <= 1e-9);
    assert!((balance_loss_from_stats(&[0.75, 0.25], &[0.6, 0.4]).unwrap() - 1.1).abs() <= 1e-12);
}

#[test]
fn uniform_top2_routing_measures_k() {
    // every expert chosen by half the tokens with uniform mean probabilities:
    // m sums to K, so the balanced value is K rather than 1
    let probs = Tensor::matrix(&[
        vec![0.3, 0.3, 0.2, 0.2],
        vec![0.2, 0.2, 0.3, 0.3],
    ])
    .unwrap();
    let o = RoutingOutcome::from_probs(&probs, 2).unwrap();
    assert_eq!(o.dispatch_fractions(), vec![0.5; 4]);
    assert!((balance_loss(&o) - 2.0).abs() < 1e-12);
}

#[test]
fn ties_go_to_the_lower_index() {
    assert_eq!(top_k_indices(&[0.25, 0.25, 0.25, 0.25], 2), vec![0, 1]);
    assert_eq!(top_k_indices(&[0.1, 0.4, 0.1, 0.4], 3), vec![1, 3, 0]);
}

#[test]
fn eval_routing_is_noise_free() {
    let (x, w) = instance(3, 6, 3, 4, false);
    let a = route(&x, &w, 2, &mut RngStream::new(1), false).unwrap();
    let b = route(&x, &w, 2, &mut RngStream::new(2), false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn capacity_formula() {
    assert_eq!(buffer_capacity(1.2, 2, 1, 8, 4).unwrap(), 5);
    assert_eq!(buffer_capacity(2.0, 2, 16, 8, 4).unwrap(), 128);
    assert_eq!(buffer_capacity(0.5, 1, 1, 3, 4).unwrap(), 1);
}
