mod common;

use aesvl::model::{Bound, ModelConfig, Net, ParamStore, TokenBatch, LOG_TAU};
use aesvl::objectives::{
    adapt_embedding, adapter_score, contrastive_loss, contrastive_loss_value, generative_loss, pretraining_loss,
    rank_loss, AdapterState, LossWeights,
};
use aesvl::tokenizer::{BOS, CLS, PAD};
use aesvl_autograd::{finite_diff_check, Graph, Tensor};
use common::{rng, tiny_cfg, uniform};
use proptest::prelude::*;
use rand::Rng;

fn unit_rows(t: &Tensor<f64>) -> Tensor<f64> {
    let d = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

#[test]
fn contrastive_loss_gradients_through_normalization() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let (n, d) = (r.random_range(2..5), r.random_range(2..6));
        let params = [
            uniform(&mut r, &[n, d], 1.0),
            uniform(&mut r, &[n, d], 1.0),
            Tensor::scalar(r.random_range(-1.0..0.5)),
        ];
        let rep = finite_diff_check(
            &params,
            |g, v| {
                let x = g.l2_normalize(v[0])?;
                let y = g.l2_normalize(v[1])?;
                contrastive_loss(g, x, y, v[2]).map_err(graph_err)
            },
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed(), "seed {seed}: {rep:?}");
    }
}

/// Gradient of the weighted pretraining objective with respect to every
/// tensor of the tiny model.
#[test]
fn pretraining_objective_gradients_through_the_model() {
    let cfg: ModelConfig = tiny_cfg();
    let mut base = ParamStore::<f64>::init(&cfg, 4).unwrap();
    let mut r = rng(4);
    for (_, t) in base.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.2..0.2));
    }
    let names: Vec<String> = base.names().map(String::from).collect();
    let images = uniform(&mut r, &[2, 8, 8, 1], 1.0);
    let contrastive = TokenBatch::from_sequences(&[vec![5, 6, CLS], vec![7, CLS]]).unwrap();
    let gen_in = TokenBatch::from_sequences(&[vec![BOS, 5, 6], vec![BOS, 7]]).unwrap();
    let targets = vec![5, 6, 2, 7, 2, PAD];
    let params: Vec<Tensor<f64>> = base.iter().map(|(_, t)| t.clone()).collect();
    let rep = finite_diff_check(
        &params,
        |g, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
            let net = Net::new(&cfg, &bound);
            let v = net.encode_image(g, &images).map_err(graph_err)?;
            let con = net.image_embedding(g, v).map_err(graph_err)?;
            let x = g.l2_normalize(con)?;
            let w = net.encode_text_unimodal(g, &contrastive).map_err(graph_err)?;
            let t = net.text_embedding(g, w, &contrastive).map_err(graph_err)?;
            let y = g.l2_normalize(t)?;
            let l_con = contrastive_loss(g, x, y, bound.get(LOG_TAU)).map_err(graph_err)?;
            let pooled = net.attentional_pool(g, v, "gen").map_err(graph_err)?;
            let logits = net.decode_multimodal(g, &gen_in, pooled).map_err(graph_err)?;
            let logits = g.reshape(logits, &[6, cfg.vocab_size])?;
            let l_gen = generative_loss(g, logits, &targets).map_err(graph_err)?;
            pretraining_loss(g, l_con, l_gen, LossWeights::default()).map_err(graph_err)
        },
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

fn graph_err(e: aesvl::Error) -> aesvl_autograd::GraphError {
    match e {
        aesvl::Error::Graph(e) => e,
        other => panic!("{other}"),
    }
}

#[test]
fn generative_loss_ignores_pad_targets() {
    let mut r = rng(1);
    let logits = uniform(&mut r, &[4, 6], 2.0);
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let a = generative_loss(&mut g, l, &[3, 4, PAD, PAD]).unwrap();
    let b = generative_loss(&mut g, l, &[3, 4, 5, 1]).unwrap();
    let (a, b) = (g.value(a).item(), g.value(b).item());
    assert!(a > 0.0 && b > a);
}

#[test]
fn adapter_residual_at_zero_is_identity_direction() {
    let mut r = rng(2);
    let v = uniform(&mut r, &[5, 4], 3.0);
    let mut g = Graph::new();
    let vv = g.constant(v.clone());
    let h = g.constant(Tensor::zeros(&[4, 4]));
    let vt = adapt_embedding(&mut g, vv, h, true).unwrap();
    let want = unit_rows(&v);
    for (a, b) in g.value(vt).data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-15);
    }
    let anchor = g.constant(Tensor::new(&[4], vec![0.0, 0.0, 2.0, 0.0]).unwrap());
    let s = adapter_score(&mut g, vt, anchor, true).unwrap();
    for i in 0..5 {
        assert!((g.value(s).data()[i] - want.row(i)[2]).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn contrastive_loss_is_nonnegative_and_symmetric(seed in 0u64..10_000, n in 1usize..6, d in 1usize..6, tau in 0.01f64..2.0) {
        let mut r = rng(seed);
        let x = unit_rows(&uniform(&mut r, &[n, d], 1.0));
        let y = unit_rows(&uniform(&mut r, &[n, d], 1.0));
        prop_assume!(x.data().iter().all(|v| v.is_finite()) && y.data().iter().all(|v| v.is_finite()));
        let a = contrastive_loss_value(&x, &y, tau).unwrap();
        let b = contrastive_loss_value(&y, &x, tau).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
    }

    #[test]
    fn rank_loss_bounds(seed in 0u64..10_000, n in 2usize..12, m in 0.0f64..0.5) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let labels: Vec<f64> = (0..n).map(|_| r.random_range(0..4) as f64).collect();
        prop_assume!(labels.iter().any(|&l| l != labels[0]));
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(&[n, 1], scores.clone()).unwrap());
        let l = rank_loss(&mut g, s, &labels, m).unwrap();
        let v = g.value(l).item();
        // each hinge is at most m + 2 for cosines in [-1, 1]
        prop_assert!(v >= 0.0 && v <= m + 2.0 + 1e-12);
        // a perfectly ordered score with gaps beyond the margin costs nothing
        let ordered: Vec<f64> = labels.iter().map(|&l| l * (m + 1.0)).collect();
        let s2 = g.constant(Tensor::new(&[n, 1], ordered).unwrap());
        let l2 = rank_loss(&mut g, s2, &labels, m).unwrap();
        prop_assert_eq!(g.value(l2).item(), 0.0);
    }

    #[test]
    fn adapter_scores_are_cosines(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let d = 6;
        let a = unit_rows(&uniform(&mut r, &[1, d], 1.0)).reshape(&[d]).unwrap();
        let mut st = AdapterState::new(a, 0.1, true, true).unwrap();
        st.h = uniform(&mut r, &[d, d], 0.5);
        let v = uniform(&mut r, &[7, d], 2.0);
        for s in st.scores(&v).unwrap() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }
    }
}
