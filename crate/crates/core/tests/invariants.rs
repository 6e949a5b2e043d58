//! Property tests for the structural invariants of each module.

mod common;

use common::*;
use dmnet::autograd::Graph;
use dmnet::cprm;
use dmnet::csrm::{self, CsrmConfig};
use dmnet::evaluation::{accumulate_iou, Counts};
use dmnet::kms::{suppress_test, suppress_train, warmup_gate, MetaMemory};
use dmnet::kshot;
use dmnet::Tensor64;
use proptest::prelude::*;

fn tensor(shape: &'static [usize], scale: f64) -> impl Strategy<Value = Tensor64> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-scale..scale, n).prop_map(move |d| Tensor64::new(shape, d).unwrap())
}

fn probs_4x4() -> impl Strategy<Value = Tensor64> {
    prop::collection::vec(0.0..=1.0f64, 16).prop_map(|pf| {
        let mut d: Vec<f64> = pf.iter().map(|p| 1.0 - p).collect();
        d.extend(pf);
        Tensor64::new(&[2, 4, 4], d).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_and_columns_sum_to_one(seed in 0u64..10_000, q in tensor(&[3, 3, 4], 4.0), s in tensor(&[3, 3, 4], 4.0)) {
        let mut r = rng(seed);
        let (store, fw) = random_fusion(&mut r, 3, 2, 0.5);
        let mut g = Graph::new();
        let (qv, sv) = (g.constant(q), g.constant(s));
        let pos = cprm::position_mining(&mut g, &store, &fw, qv, sv).unwrap();
        for row in g.value(pos.attn_support).data().chunks(12) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let a = g.value(pos.attn_query);
        for j in 0..12 {
            prop_assert!(((0..12).map(|i| a.at2(i, j)).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(a.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn partition_is_disjoint_and_covering(probs in probs_4x4(), mu1 in 0.0..=1.0f64, mu2 in 0.0..=1.0f64) {
        prop_assume!(mu1 + mu2 >= 1.0);
        let p = csrm::filter_regions(&probs, mu1, mu2).unwrap();
        prop_assert!(partition_ok(&p));
        let pf = &probs.data()[16..];
        for i in 0..16 {
            prop_assert_eq!(p.fg[i], pf[i] >= mu1);
        }
    }

    #[test]
    fn cpm_grows_regions_monotonically(f in tensor(&[3, 4, 4], 1.0), probs in probs_4x4()) {
        let cfg = CsrmConfig::default();
        let start = csrm::filter_regions(&probs, cfg.mu1, cfg.mu2).unwrap();
        let res = csrm::confusion_mining(&f, &probs, &start, &cfg).unwrap();
        prop_assert!(res.steps.len() <= cfg.cpm_iters);
        let (mut fg, mut bg, mut conf) = (start.fg.clone(), start.bg.clone(), start.confusion.clone());
        for st in &res.steps {
            for i in 0..16 {
                prop_assert!(!fg[i] || st.fg[i]);
                prop_assert!(!bg[i] || st.bg[i]);
                prop_assert!(conf[i] || !st.confusion[i]);
                prop_assert_eq!([st.fg[i], st.bg[i], st.confusion[i]].iter().filter(|&&b| b).count(), 1);
            }
            fg = st.fg.clone();
            bg = st.bg.clone();
            conf = st.confusion.clone();
        }
        let w: f64 = res.fg_weights.iter().sum();
        prop_assert!(w >= 1.0);
    }

    #[test]
    fn ema_fixed_point_and_contraction(
        a in prop::collection::vec(-2.0..2.0f64, 4),
        b in prop::collection::vec(-2.0..2.0f64, 4),
        rho in 0.0..=1.0f64,
    ) {
        let mut m = MetaMemory::<f64>::new(1, 4, rho);
        m.update(0, &a, Some(&a)).unwrap();
        prop_assert_eq!(m.fg(0), &a[..]);
        m.update(0, &a, None).unwrap();
        for (x, y) in m.fg(0).iter().zip(&a) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let before = max_diff(m.fg(0), &b);
        m.update(0, &b, Some(&b)).unwrap();
        prop_assert!((max_diff(m.fg(0), &b) - rho * before).abs() < 1e-12);
        prop_assert_eq!(m.update_count(0), 3);
    }

    #[test]
    fn suppression_keeps_only_winning_pixels(
        f in tensor(&[3, 3, 3], 1.0),
        protos in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 3), 5),
        target in 0usize..3,
    ) {
        let mut m = MetaMemory::<f64>::new(3, 3, 0.5);
        for k in 0..3 {
            m.update(k, &protos[k], Some(&protos[(k + 1) % 3])).unwrap();
        }
        let test = suppress_test(&f, &protos[3], &protos[4], &m).unwrap();
        let train = suppress_train(&f, &m, target).unwrap();
        let own = csrm::cosine_map(&f, &protos[3]);
        let rivals: Vec<Vec<f64>> = [&protos[4], &protos[0], &protos[1], &protos[2]]
            .iter()
            .map(|p| csrm::cosine_map(&f, p))
            .collect();
        for i in 0..9 {
            let v = test.data()[i];
            prop_assert!((0.0..=1.0).contains(&v));
            if rivals.iter().any(|c| c[i] > own[i]) {
                prop_assert_eq!(v, 0.0);
            } else {
                prop_assert!((v - (own[i] + 1.0) / 2.0).abs() < 1e-12);
            }
            prop_assert!((0.0..=1.0).contains(&train.data()[i]));
        }
    }

    #[test]
    fn appearance_factors_lie_on_the_simplex(means in prop::collection::vec(-1e3..1e3f64, 1..8)) {
        let phi = kshot::factors_from_means(&means).unwrap();
        prop_assert_eq!(phi.len(), means.len());
        prop_assert!(phi.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((phi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn warmup_gate_is_monotone(it in 0usize..1000, ipe in 1usize..200, lam in 0.0..2.0f64) {
        if warmup_gate(it, ipe, lam) {
            prop_assert!(warmup_gate(it + 1, ipe, lam));
        }
    }

    #[test]
    fn iou_is_bounded_and_symmetric(pred in prop::collection::vec(any::<bool>(), 1..64), seed in any::<u64>()) {
        let mut r = rng(seed);
        let gt: Vec<bool> = pred.iter().map(|_| rand::Rng::gen_bool(&mut r, 0.5)).collect();
        let a = accumulate_iou(&pred, &gt).unwrap();
        let b = accumulate_iou(&gt, &pred).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.iou()));
        prop_assert_eq!(a.iou(), b.iou());
        let self_iou: Counts = accumulate_iou(&gt, &gt).unwrap();
        prop_assert_eq!(self_iou.iou(), 1.0);
        prop_assert_eq!(a.tp + a.fp + a.fn_ + a.tn, pred.len() as u64);
    }
}

#[test]
fn csrm_adds_no_parameters() {
    let mut with = tiny_spec(4);
    let mut without = with.clone();
    without.use_csrm = false;
    with.use_csrm = true;
    let (a, b) = (dmnet::DmNet64::new(with, 0), dmnet::DmNet64::new(without, 0));
    assert_eq!(a.params.count(), b.params.count());
    assert!(a.params.iter().all(|(n, _)| !n.contains("csrm")));
}

#[test]
fn test_mode_leaves_memory_untouched() {
    let mut model = dmnet::DmNet64::new(tiny_spec(3), 1);
    let (ep, _) = tiny_episode(2, 4, 1, 1);
    model.update_memory(&ep).unwrap();
    let before = model.memory.clone();
    model.predict(&ep).unwrap();
    assert_eq!(model.memory, before);
}
