//! Analytic gradients against central finite differences in f64.

mod common;

use common::*;
use dmnet::autograd::Graph;
use dmnet::cprm;
use dmnet::decoder::{self, Decoder};
use dmnet::params::{ParamId, ParamStore};
use dmnet::Tensor64;

const REL_TOL: f64 = 1e-4;

#[test]
fn position_mining_weights() {
    let mut r = rng(3);
    let (mut store, fw) = random_fusion(&mut r, 3, 2, 0.5);
    let (fq, fs) = (random_tensor(&[3, 2, 3], &mut r), random_tensor(&[3, 2, 3], &mut r));
    let (rq, rs) = (random_tensor(&[3, 2, 3], &mut r), random_tensor(&[3, 2, 3], &mut r));
    let mut loss = |p: &ParamStore<f64>, want: bool| {
        let mut g = Graph::new();
        let (q, s) = (g.constant(fq.clone()), g.constant(fs.clone()));
        let out = cprm::position_mining(&mut g, p, &fw, q, s).unwrap();
        let (wq, ws) = (g.constant(rq.clone()), g.constant(rs.clone()));
        let a = g.mul(out.query, wq).unwrap();
        let b = g.mul(out.support, ws).unwrap();
        let t = g.add(a, b).unwrap();
        let l = g.sum_all(t);
        let v = g.value(l).data()[0];
        let grads = if want { g.param_grads(&g.backward(l).unwrap()) } else { Vec::new() };
        (v, grads)
    };
    for (name, e) in gradient_error(&mut store, &[fw.alpha1, fw.beta1, fw.w_p], &mut loss) {
        assert!(e < REL_TOL, "{name}: relative error {e:e}");
    }
}

#[test]
fn channel_mining_weights() {
    let mut r = rng(4);
    let (mut store, fw) = random_fusion(&mut r, 3, 2, 0.5);
    let (fq, fs) = (random_tensor(&[3, 4, 4], &mut r), random_tensor(&[3, 4, 4], &mut r));
    let rw = random_tensor(&[3, 4, 4], &mut r);
    let mut loss = |p: &ParamStore<f64>, want: bool| {
        let mut g = Graph::new();
        let (q, s) = (g.constant(fq.clone()), g.constant(fs.clone()));
        let out = cprm::channel_mining(&mut g, p, &fw, q, s).unwrap();
        let w = g.constant(rw.clone());
        let a = g.add(out.query, out.support).unwrap();
        let t = g.mul(a, w).unwrap();
        let l = g.sum_all(t);
        let v = g.value(l).data()[0];
        let grads = if want { g.param_grads(&g.backward(l).unwrap()) } else { Vec::new() };
        (v, grads)
    };
    for (name, e) in gradient_error(&mut store, &[fw.alpha2, fw.beta2, fw.w_c], &mut loss) {
        assert!(e < REL_TOL, "{name}: relative error {e:e}");
    }
}

#[test]
fn decoder_weights_under_segmentation_loss() {
    let mut r = rng(5);
    let mut store = ParamStore::<f64>::new(9);
    let dec = Decoder::register(&mut store, 2);
    jitter_biases(&mut store, &mut r);
    let f_q = random_tensor(&[2, 3, 3], &mut r);
    let proto = random_tensor(&[2], &mut r);
    let (m_p, m_a) = (random_tensor(&[3, 3], &mut r), random_tensor(&[3, 3], &mut r));
    let target: Vec<f64> = (0..36).map(|i| if (i / 6) % 3 == 0 { 1.0 } else { 0.0 }).collect();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut loss = |p: &ParamStore<f64>, want: bool| {
        let mut g = Graph::new();
        let (f, pr) = (g.constant(f_q.clone()), g.constant(proto.clone()));
        let (mp, ma) = (g.constant(m_p.clone()), g.constant(m_a.clone()));
        let logits = dec.decode(&mut g, p, f, pr, mp, ma).unwrap();
        let probs = decoder::upsampled_probs(&mut g, logits, 6, 6).unwrap();
        let l = decoder::segmentation_loss(&mut g, probs, probs, &target, 0.0).unwrap();
        let v = g.value(l).data()[0];
        let grads = if want { g.param_grads(&g.backward(l).unwrap()) } else { Vec::new() };
        (v, grads)
    };
    let errs = gradient_error(&mut store, &ids, &mut loss);
    assert_eq!(errs.len(), ids.len());
    for (name, e) in errs {
        assert!(e < REL_TOL, "{name}: relative error {e:e}");
    }
}

#[test]
fn full_model_training_loss() {
    let errs = model_gradient_suite();
    let names: Vec<&str> = errs.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["cprm.alpha1", "cprm.beta1", "cprm.w_p", "decoder.classifier.weight"] {
        assert!(names.contains(&want), "{want} not checked: {names:?}");
    }
    for (name, e) in errs {
        assert!(e < REL_TOL, "{name}: relative error {e:e}");
    }
}

#[test]
fn minmax_normalization() {
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::new(1);
    let id = store.add("x", &[7, 1], dmnet::params::Init::Uniform(1.0));
    let rw = random_tensor(&[7, 1], &mut r);
    let mut loss = |p: &ParamStore<f64>, want: bool| {
        let mut g = Graph::new();
        let x = g.param(p, id);
        let m = g.minmax_normalize(x);
        let w = g.constant(rw.clone());
        let t = g.mul(m, w).unwrap();
        let l = g.sum_all(t);
        let v = g.value(l).data()[0];
        let grads = if want { g.param_grads(&g.backward(l).unwrap()) } else { Vec::new() };
        (v, grads)
    };
    let e = gradient_error(&mut store, &[id], &mut loss);
    assert!(e[0].1 < REL_TOL, "relative error {:e}", e[0].1);
}

#[test]
fn finite_difference_harness_sanity() {
    // loss = sum(w^2) has gradient 2w; a broken harness would not agree
    let mut store = ParamStore::<f64>::new(0);
    let id = store.add("w", &[3], dmnet::params::Init::Uniform(1.0));
    let mut loss = |p: &ParamStore<f64>, _: bool| {
        let w = p.get(id);
        let v = w.data().iter().map(|x| x * x).sum();
        (v, vec![(id, w.map(|x| 2.0 * x))])
    };
    let e = gradient_error(&mut store, &[id], &mut loss);
    assert!(e[0].1 < 1e-8);
    let mut wrong = |p: &ParamStore<f64>, _: bool| {
        let w = p.get(id);
        (w.data().iter().map(|x| x * x).sum(), vec![(id, Tensor64::full(&[3], 1.0))])
    };
    assert!(gradient_error(&mut store, &[id], &mut wrong)[0].1 > 1e-2);
}
