mod common;

use aesvl::model::{image_embeddings, text_embeddings, ModelConfig, Net, ParamStore, TokenBatch};
use aesvl::tokenizer::{BOS, CLS};
use aesvl_autograd::{Graph, Tensor};
use common::naive::{normalize, Naive};
use common::{rng, tiny_cfg, uniform};
use rand::Rng;

const TOL: f64 = 1e-9;

fn close(a: &[f64], b: &[f64], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= TOL * (1.0 + y.abs()), "{what}[{i}]: {x} vs {y}");
    }
}

/// Init params, then jitter every tensor so gammas, biases and the like are
/// not at their trivial starting values.
fn params(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let mut p = ParamStore::<f64>::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xabc);
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
    }
    p
}

fn configs() -> Vec<ModelConfig> {
    let mut wide = tiny_cfg();
    wide.dim = 12;
    wide.n_heads = 3;
    wide.channels = 3;
    wide.encoder_layers = 2;
    wide.unimodal_layers = 2;
    wide.multimodal_layers = 2;
    wide.generative_pool_queries = 3;
    vec![tiny_cfg(), wide]
}

fn random_ids(r: &mut rand_chacha::ChaCha8Rng, cfg: &ModelConfig, len: usize, last: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..len - 1).map(|_| r.random_range(5..cfg.vocab_size)).collect();
    ids.push(last);
    ids
}

#[test]
fn image_embeddings_match_naive_forward() {
    for cfg in configs() {
        for seed in 0..4 {
            let p = params(&cfg, seed);
            let n = Naive { cfg: &cfg, p: &p };
            let mut r = rng(seed);
            let imgs = uniform(&mut r, &[2, cfg.image_size, cfg.image_size, cfg.channels], 1.0);
            let (x, v) = image_embeddings(&cfg, &p, &imgs).unwrap();
            let per = imgs.numel() / 2;
            for b in 0..2 {
                let want = n.image_embedding(&imgs.data()[b * per..(b + 1) * per]);
                close(v.row(b), &want, "raw image embedding");
                close(x.row(b), &normalize(&want), "unit image embedding");
            }
        }
    }
}

#[test]
fn text_embeddings_match_naive_forward_with_padding() {
    for cfg in configs() {
        for seed in 0..4 {
            let p = params(&cfg, seed);
            let n = Naive { cfg: &cfg, p: &p };
            let mut r = rng(seed + 100);
            let seqs = vec![
                random_ids(&mut r, &cfg, 3, CLS),
                random_ids(&mut r, &cfg, cfg.max_text_length, CLS),
                vec![CLS],
            ];
            let y = text_embeddings(&cfg, &p, &seqs).unwrap();
            for (b, s) in seqs.iter().enumerate() {
                close(y.row(b), &normalize(&n.text_embedding(s)), "text embedding");
            }
        }
    }
}

#[test]
fn caption_logits_match_naive_forward() {
    for cfg in configs() {
        for seed in 0..3 {
            let p = params(&cfg, seed);
            let n = Naive { cfg: &cfg, p: &p };
            let mut r = rng(seed + 200);
            let imgs = uniform(&mut r, &[2, cfg.image_size, cfg.image_size, cfg.channels], 1.0);
            let seqs = vec![random_ids(&mut r, &cfg, 2, 7), random_ids(&mut r, &cfg, 5, 9)];
            let seqs: Vec<Vec<usize>> = seqs
                .into_iter()
                .map(|s| std::iter::once(BOS).chain(s).collect())
                .collect();
            let tokens = TokenBatch::from_sequences(&seqs).unwrap();
            let mut g = Graph::new();
            let bound = p.bind(&mut g, false);
            let net = Net::new(&cfg, &bound);
            let v = net.encode_image(&mut g, &imgs).unwrap();
            let pooled = net.attentional_pool(&mut g, v, "gen").unwrap();
            let logits = net.decode_multimodal(&mut g, &tokens, pooled).unwrap();
            let out: &Tensor<f64> = g.value(logits);
            let per = imgs.numel() / 2;
            let vocab = cfg.vocab_size;
            for (b, s) in seqs.iter().enumerate() {
                let want = n.decode(s, &imgs.data()[b * per..(b + 1) * per]);
                for (t, row) in want.iter().enumerate() {
                    let start = (b * tokens.len + t) * vocab;
                    close(&out.data()[start..start + vocab], row, "caption logits");
                }
            }
        }
    }
}

#[test]
fn pooler_attention_matches_naive() {
    let cfg = tiny_cfg();
    let p = params(&cfg, 9);
    let n = Naive { cfg: &cfg, p: &p };
    let mut r = rng(9);
    let v = uniform(&mut r, &[1, 5, cfg.dim], 2.0);
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let net = Net::new(&cfg, &bound);
    let vv = g.constant(v.clone());
    let out = net.attentional_pool(&mut g, vv, "gen").unwrap();
    let rows: Vec<Vec<f64>> = v.data().chunks(cfg.dim).map(<[f64]>::to_vec).collect();
    let want = n.pool(&rows, "gen");
    let got = g.value(out);
    for (q, row) in want.iter().enumerate() {
        close(&got.data()[q * cfg.dim..(q + 1) * cfg.dim], row, "pooled");
    }
}
