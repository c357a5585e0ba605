use leaf_core::eaf::BankConfig;
use leaf_core::partition::ambiguous_consistency_rows;
use leaf_core::{
    ambiguous_consistency_loss, grad_check, hinge_oracle, partition, ExpertBank, ExpertKind, ParamStore,
    Partition, Tape, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| Tensor::new(r, c, d).unwrap())
    })
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.iter().map(|x| x / s).collect()
    })
}

/// `k` scores together with a random partition of their classes.
fn scored_k(k: usize) -> impl Strategy<Value = (Vec<f64>, Partition)> {
    (
        prop::collection::vec(-5.0f64..5.0, k),
        Just((0..k).collect::<Vec<usize>>()).prop_shuffle(),
        1..k,
    )
        .prop_map(|(s, order, m)| (s, Partition::from_order(order, m).unwrap()))
}

fn scored_partition() -> impl Strategy<Value = (Vec<f64>, Partition)> {
    (2usize..=10).prop_flat_map(scored_k)
}

fn loss_of(scores: &[f64], part: &Partition, margin: f64) -> f64 {
    let mut tape = Tape::new();
    let y = tape.constant(Tensor::row_vector(scores));
    let l = ambiguous_consistency_loss(&mut tape, y, std::slice::from_ref(part), margin).unwrap();
    tape.value(l).item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in matrix(4, 8), c in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let s = tape.softmax_rows(a).unwrap();
        let shifted = tape.constant(x.map(|v| v + c));
        let s2 = tape.softmax_rows(shifted).unwrap();
        let (s, s2) = (tape.value(s).clone(), tape.value(s2).clone());
        for r in 0..s.rows() {
            prop_assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for (a, b) in s.data().iter().zip(s2.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn topk_then_softmax_leaves_exact_zeros(x in matrix(4, 8), k_frac in 0.0f64..1.0) {
        let k = 1 + ((x.cols() - 1) as f64 * k_frac).round() as usize;
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let m = tape.topk_mask(a, k).unwrap();
        let s = tape.softmax_rows(m).unwrap();
        let s = tape.value(s);
        for r in 0..s.rows() {
            prop_assert_eq!(s.row(r).iter().filter(|&&v| v == 0.0).count(), x.cols() - k);
        }
    }

    #[test]
    fn forward_is_deterministic(x in matrix(3, 6)) {
        let run = || {
            let mut tape = Tape::new();
            let a = tape.constant(x.clone());
            let b = tape.softplus(a).unwrap();
            let c = tape.log_softmax_rows(b).unwrap();
            tape.value(c).clone()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn elementwise_ops_pass_grad_check(x in matrix(3, 5)) {
        let err = grad_check(
            |t, v| {
                let a = t.softplus(v)?;
                let scaled = t.scalar_mul(v, 0.3)?;
                let b = t.exp(scaled)?;
                let c = t.mul(a, b)?;
                let d = t.log_softmax_rows(c)?;
                t.sum_all(d)
            },
            &x,
            1e-3,
        ).unwrap();
        prop_assert!(err < 1e-4, "error {}", err);
    }

    #[test]
    fn partition_is_minimal_and_clamped(
        probs in (2usize..=10).prop_flat_map(simplex),
        t_idx in 0usize..3,
    ) {
        let threshold = [0.5, 0.9, 0.99][t_idx];
        let k = probs.len();
        let p = partition(&probs, threshold).unwrap();
        prop_assert!(p.m() >= 1 && p.m() < k);
        prop_assert_eq!(p.positive().len() + p.negative().len(), k);
        let sum_m: f64 = p.order()[..p.m()].iter().map(|&c| probs[c]).sum();
        let sum_less: f64 = p.order()[..p.m() - 1].iter().map(|&c| probs[c]).sum();
        prop_assert!(p.m() == 1 || sum_less < threshold);
        prop_assert!(sum_m >= threshold || p.m() == k - 1);
        let min_pos = p.positive().iter().map(|&c| probs[c]).fold(f64::INFINITY, f64::min);
        let max_neg = p.negative().iter().map(|&c| probs[c]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_pos >= max_neg);
    }

    #[test]
    fn loss_bounds_hinge_from_above_and_log_term_from_below((scores, part) in scored_partition(), margin in 0.0f64..1.0) {
        let l = loss_of(&scores, &part, margin);
        let hinge = hinge_oracle(&scores, &part, margin);
        prop_assert!(l >= hinge);
        let m = part.m() as f64;
        let k = part.num_classes() as f64;
        let slack = (1.0 + m * (k - m)).ln();
        prop_assert!(l - hinge <= slack + 1e-12, "gap {} > {}", l - hinge, slack);
    }

    #[test]
    fn raising_a_negative_or_lowering_a_positive_increases_loss(
        (scores, part) in scored_partition(),
        which in any::<prop::sample::Index>(),
        delta in 0.01f64..2.0,
    ) {
        let base = loss_of(&scores, &part, 0.0);
        let j = part.negative()[which.index(part.negative().len())];
        let mut up = scores.clone();
        up[j] += delta;
        prop_assert!(loss_of(&up, &part, 0.0) > base);
        let i = part.positive()[which.index(part.positive().len())];
        let mut down = scores.clone();
        down[i] -= delta;
        prop_assert!(loss_of(&down, &part, 0.0) > base);
    }

    #[test]
    fn gradient_signs_follow_membership((scores, part) in scored_partition()) {
        let mut tape = Tape::new();
        let y = tape.var(Tensor::row_vector(&scores));
        let l = ambiguous_consistency_loss(&mut tape, y, std::slice::from_ref(&part), 0.0).unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.get(y).unwrap();
        for (c, is_pos) in part.positive_mask().into_iter().enumerate() {
            if is_pos {
                prop_assert!(g.data()[c] < 0.0);
            } else {
                prop_assert!(g.data()[c] > 0.0);
            }
        }
    }

    #[test]
    fn scaled_loss_vanishes_iff_margin_holds((scores, part) in scored_partition()) {
        let min_pos = part.positive().iter().map(|&c| scores[c]).fold(f64::INFINITY, f64::min);
        let max_neg = part.negative().iter().map(|&c| scores[c]).fold(f64::NEG_INFINITY, f64::max);
        let gap = min_pos - max_neg;
        prop_assume!(gap.abs() > 0.2);
        let scaled: Vec<f64> = scores.iter().map(|s| s * 100.0).collect();
        let l = loss_of(&scaled, &part, 0.0);
        if gap > 0.0 {
            prop_assert!(l < 1e-6, "loss {} with gap {}", l, gap);
        } else {
            prop_assert!(l > 1.0, "loss {} with gap {}", l, gap);
        }
    }

    #[test]
    fn loss_ignores_order_within_each_set((scores, part) in scored_partition(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos = part.positive().to_vec();
        let mut neg = part.negative().to_vec();
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let reordered = Partition::from_order([pos, neg].concat(), part.m()).unwrap();
        prop_assert_eq!(loss_of(&scores, &part, 0.1), loss_of(&scores, &reordered, 0.1));
    }

    #[test]
    fn per_row_losses_are_independent(
        ((scores, part), (other, opart)) in (2usize..=10).prop_flat_map(|k| (scored_k(k), scored_k(k))),
    ) {
        let mut tape = Tape::new();
        let both = tape.constant(Tensor::from_rows(&[scores.clone(), other.clone()]).unwrap());
        let rows = ambiguous_consistency_rows(&mut tape, both, &[part.clone(), opart.clone()], 0.0).unwrap();
        let rows = tape.value(rows).clone();
        prop_assert_eq!(rows.data()[0], loss_of(&scores, &part, 0.0));
        prop_assert_eq!(rows.data()[1], loss_of(&other, &opart, 0.0));
    }
}

fn bank(n: usize, k: usize, width: usize, kind: ExpertKind, seed: u64) -> (ParamStore, ExpertBank) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BankConfig {
        width,
        num_experts: n,
        top_k: k,
        kind,
        bottleneck_ratio: 4,
    };
    let b = ExpertBank::new(&mut store, "b", cfg, &mut rng).unwrap();
    (store, b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn gate_rows_have_n_minus_k_zeros_and_sum_to_one(
        n in 1usize..=6,
        k_frac in 0.0f64..1.0,
        kind_idx in 0usize..3,
        seed in any::<u64>(),
        x in matrix(4, 6),
    ) {
        let k = 1 + ((n - 1) as f64 * k_frac).round() as usize;
        let (store, b) = bank(n, k, x.cols(), ExpertKind::ALL[kind_idx], seed);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let g = b.gate(&mut tape, &p, xv).unwrap();
        let w = tape.value(g.weights);
        for r in 0..w.rows() {
            let row = w.row(r);
            prop_assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), n - k);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(g.active_mask[r].iter().filter(|&&a| a).count(), k);
        }
    }

    #[test]
    fn full_k_never_zeroes_an_expert(n in 1usize..=6, seed in any::<u64>(), x in matrix(4, 6)) {
        let (store, b) = bank(n, n, x.cols(), ExpertKind::Residual, seed);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let g = b.gate(&mut tape, &p, xv).unwrap();
        prop_assert!(tape.value(g.weights).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn bank_output_shape_matches_input(n in 1usize..=4, seed in any::<u64>(), x in matrix(4, 7)) {
        let (store, b) = bank(n, 1, x.cols(), ExpertKind::Bottleneck, seed);
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = b.fuse(&mut tape, &p, xv).unwrap();
        prop_assert_eq!(tape.shape(y), x.shape());
    }
}

#[test]
fn residual_expert_with_zeroed_bottleneck_is_identity_in_a_bank() {
    let (mut store, b) = bank(3, 2, 5, ExpertKind::Residual, 9);
    for j in 0..3 {
        b.set_expert_identity(&mut store, j);
    }
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0, 0.0, 3.5], vec![-2.0, 1.0, 0.1, 4.0, -0.3]]).unwrap();
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let y = b.fuse(&mut tape, &p, xv).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(x.data()) {
        assert!((a - e).abs() < 1e-12);
    }
}
