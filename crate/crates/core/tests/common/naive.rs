//! Single-example model forward written with plain loops over nested
//! vectors, for comparison against the graph implementation.

use aesvl::model::{ModelConfig, ParamStore};

pub type Mat = Vec<Vec<f64>>;

pub struct Naive<'a> {
    pub cfg: &'a ModelConfig,
    pub p: &'a ParamStore<f64>,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

impl Naive<'_> {
    fn vecp(&self, name: &str) -> Vec<f64> {
        self.p.get(name).unwrap_or_else(|| panic!("{name}")).data().to_vec()
    }

    fn mat(&self, name: &str) -> Mat {
        let t = self.p.get(name).unwrap_or_else(|| panic!("{name}"));
        let c = t.shape()[1];
        t.data().chunks(c).map(<[f64]>::to_vec).collect()
    }

    fn linear(&self, x: &Mat, name: &str) -> Mat {
        let w = self.mat(&format!("{name}.weight"));
        let b = self.vecp(&format!("{name}.bias"));
        x.iter()
            .map(|row| {
                (0..b.len())
                    .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i][j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn ln(&self, x: &Mat, name: &str) -> Mat {
        let g = self.vecp(&format!("{name}.gamma"));
        let b = self.vecp(&format!("{name}.beta"));
        x.iter()
            .map(|row| {
                let d = row.len() as f64;
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) / (var + 1e-12).sqrt() * g[i] + b[i])
                    .collect()
            })
            .collect()
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
            .collect()
    }

    pub fn attention(&self, name: &str, xq: &Mat, xkv: &Mat, causal: bool) -> Mat {
        let q = self.linear(xq, &format!("{name}.q"));
        let k = self.linear(xkv, &format!("{name}.k"));
        let v = self.linear(xkv, &format!("{name}.v"));
        let (h, d) = (self.cfg.n_heads, self.cfg.dim);
        let dh = d / h;
        let mut out = vec![vec![0.0; d]; q.len()];
        for head in 0..h {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..q.len() {
                let limit = if causal { i + 1 } else { k.len() };
                let scores: Vec<f64> = (0..limit)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for c in cols.clone() {
                    out[i][c] = (0..limit).map(|j| w[j] * v[j][c]).sum();
                }
            }
        }
        self.linear(&out, &format!("{name}.o"))
    }

    fn mlp(&self, x: &Mat, name: &str) -> Mat {
        let h = self.linear(x, &format!("{name}.fc1"));
        let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        self.linear(&h, &format!("{name}.fc2"))
    }

    fn block(&self, x: &Mat, name: &str, causal: bool) -> Mat {
        let h = self.ln(x, &format!("{name}.ln1"));
        let x = Self::add(x, &self.attention(&format!("{name}.attn"), &h, &h, causal));
        let h = self.ln(&x, &format!("{name}.ln2"));
        Self::add(&x, &self.mlp(&h, &format!("{name}.mlp")))
    }

    /// `img` is one `H x W x C` image, row-major.
    pub fn encode_image(&self, img: &[f64]) -> Mat {
        let c = self.cfg;
        let (p, w, ch) = (c.patch_size, c.image_size, c.channels);
        let per = w / p;
        let mut patches = Vec::new();
        for py in 0..per {
            for px in 0..per {
                let mut row = Vec::new();
                for y in 0..p {
                    for x in 0..p {
                        for k in 0..ch {
                            row.push(img[((py * p + y) * w + px * p + x) * ch + k]);
                        }
                    }
                }
                patches.push(row);
            }
        }
        let mut x = Self::add(&self.linear(&patches, "image.patch"), &self.mat("image.pos"));
        for i in 0..c.encoder_layers {
            x = self.block(&x, &format!("image.layer{i}"), false);
        }
        self.ln(&x, "image.ln_final")
    }

    pub fn pool(&self, v: &Mat, pooler: &str) -> Mat {
        let q = self.mat(&format!("pool.{pooler}.query"));
        self.attention(&format!("pool.{pooler}.attn"), &q, v, false)
    }

    /// Unnormalized contrastive image embedding.
    pub fn image_embedding(&self, img: &[f64]) -> Vec<f64> {
        self.pool(&self.encode_image(img), "con").remove(0)
    }

    pub fn text_unimodal(&self, ids: &[usize]) -> Mat {
        let emb = self.mat("text.token_emb");
        let pos = self.mat("text.pos");
        let mut x: Mat = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| emb[id].iter().zip(&pos[t]).map(|(a, b)| a + b).collect())
            .collect();
        for i in 0..self.cfg.unimodal_layers {
            x = self.block(&x, &format!("text.uni{i}"), true);
        }
        x
    }

    /// Unnormalized contrastive text embedding from the last position.
    pub fn text_embedding(&self, ids: &[usize]) -> Vec<f64> {
        let w = self.text_unimodal(ids);
        let cls = vec![w[w.len() - 1].clone()];
        let h = self.ln(&cls, "text.cls_ln");
        self.linear(&h, "text.proj").remove(0)
    }

    /// Caption logits for every input position.
    pub fn decode(&self, ids: &[usize], img: &[f64]) -> Mat {
        let pooled = self.pool(&self.encode_image(img), "gen");
        let mut x = self.text_unimodal(ids);
        for i in 0..self.cfg.multimodal_layers {
            let p = format!("text.multi{i}");
            let h = self.ln(&x, &format!("{p}.ln1"));
            x = Self::add(&x, &self.attention(&format!("{p}.self_attn"), &h, &h, true));
            let h = self.ln(&x, &format!("{p}.ln2"));
            x = Self::add(&x, &self.attention(&format!("{p}.cross_attn"), &h, &pooled, false));
            let h = self.ln(&x, &format!("{p}.ln3"));
            x = Self::add(&x, &self.mlp(&h, &format!("{p}.mlp")));
        }
        let h = self.ln(&x, "text.ln_final");
        self.linear(&h, "text.head")
    }
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}
