//! Incremental decoder for inference. Keys and values of every decoded
//! position are kept per layer, so each step runs the decoder on one new
//! position per row instead of the whole prefix.

use crate::autograd::{gemm, GELU_A, GELU_C, LAYER_NORM_EPS};
use crate::tensor::Tensor;
use crate::text::TokenId;

use super::{dec_final, dec_layer, log_softmax, ModelParams, DEC_POS, EMBED};

/// `x [n, in] · w [in, out] + b`.
fn linear(x: &[f64], n: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let [k, m] = *w.shape() else {
        unreachable!("weights are matrices")
    };
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    gemm(n, k, m, x, (k, 1), w.data(), (m, 1), &mut out, true);
    out
}

fn layer_norm(x: &[f64], gamma: &Tensor, beta: &Tensor) -> Vec<f64> {
    let d = gamma.numel();
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![0.0; x.len()];
    for (xs, ys) in x.chunks(d).zip(out.chunks_mut(d)) {
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            ys[j] = g[j] * ((xs[j] - mean) * is) + b[j];
        }
    }
    out
}

fn gelu(x: &mut [f64]) {
    for v in x {
        let t = (GELU_C * (*v + GELU_A * *v * *v * *v)).tanh();
        *v = 0.5 * *v * (1.0 + t);
    }
}

/// One query row against `n` key/value rows of width `h`, head by head.
fn attend(q: &[f64], keys: &[f64], values: &[f64], n: usize, heads: usize, out: &mut [f64]) {
    let h = q.len();
    let d = h / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut w = vec![0.0; n];
    for hd in 0..heads {
        let qh = &q[hd * d..(hd + 1) * d];
        for (j, wj) in w.iter_mut().enumerate() {
            let kj = &keys[j * h + hd * d..j * h + (hd + 1) * d];
            *wj = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in w.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let o = &mut out[hd * d..(hd + 1) * d];
        o.fill(0.0);
        for (j, &a) in w.iter().enumerate() {
            let vj = &values[j * h + hd * d..j * h + (hd + 1) * d];
            for (x, v) in o.iter_mut().zip(vj) {
                *x += a / sum * v;
            }
        }
    }
}

struct LayerCache {
    /// `[rows, cap, H]`, filled up to `len[row]` positions.
    self_k: Vec<f64>,
    self_v: Vec<f64>,
    /// `[rows, s, H]` projections of the encoder states.
    cross_k: Vec<f64>,
    cross_v: Vec<f64>,
}

pub(super) struct DecodeCache<'p> {
    p: &'p ModelParams,
    layers: Vec<LayerCache>,
    src_lens: Vec<usize>,
    s: usize,
    cap: usize,
    len: Vec<usize>,
}

impl<'p> DecodeCache<'p> {
    /// `states` is `[rows, s, H]` encoder output; `cap` bounds decoder positions.
    pub fn new(p: &'p ModelParams, states: &Tensor, src_lens: Vec<usize>, cap: usize) -> Self {
        let [rows, s, h] = *states.shape() else {
            unreachable!("encoder states are rank 3")
        };
        let t = &p.tensors;
        let layers = (0..p.config.layers)
            .map(|l| {
                let at = dec_layer(&p.config, l);
                LayerCache {
                    self_k: vec![0.0; rows * cap * h],
                    self_v: vec![0.0; rows * cap * h],
                    cross_k: linear(states.data(), rows * s, &t[at + 14], &t[at + 15]),
                    cross_v: linear(states.data(), rows * s, &t[at + 16], &t[at + 17]),
                }
            })
            .collect();
        Self {
            p,
            layers,
            src_lens,
            s,
            cap,
            len: vec![0; rows],
        }
    }

    /// A cache whose row `i` is a copy of row `parents[i]`.
    pub fn fork(&self, parents: &[usize]) -> Self {
        let h = self.p.config.hidden;
        let gather = |src: &[f64], width: usize| -> Vec<f64> {
            parents
                .iter()
                .flat_map(|&r| src[r * width..(r + 1) * width].iter().copied())
                .collect()
        };
        Self {
            p: self.p,
            layers: self
                .layers
                .iter()
                .map(|c| LayerCache {
                    self_k: gather(&c.self_k, self.cap * h),
                    self_v: gather(&c.self_v, self.cap * h),
                    cross_k: gather(&c.cross_k, self.s * h),
                    cross_v: gather(&c.cross_v, self.s * h),
                })
                .collect(),
            src_lens: parents.iter().map(|&r| self.src_lens[r]).collect(),
            s: self.s,
            cap: self.cap,
            len: parents.iter().map(|&r| self.len[r]).collect(),
        }
    }

    /// Feeds `tokens[i]` at the next position of row `rows[i]` and returns
    /// the log-distribution over the following token for each.
    pub fn step(&mut self, rows: &[usize], tokens: &[TokenId]) -> Vec<Vec<f64>> {
        let cfg = &self.p.config;
        let t = &self.p.tensors;
        let (h, heads, n) = (cfg.hidden, cfg.heads, rows.len());
        let mut x = Vec::with_capacity(n * h);
        for (&r, &tok) in rows.iter().zip(tokens) {
            assert!(self.len[r] < self.cap, "decode cache overflow");
            let e = t[EMBED].row(tok as usize);
            let pos = t[DEC_POS].row(self.len[r]);
            x.extend(e.iter().zip(pos).map(|(a, b)| a + b));
        }
        let mut o = vec![0.0; n * h];
        for l in 0..cfg.layers {
            let at = dec_layer(cfg, l);
            let c = &mut self.layers[l];

            let hn = layer_norm(&x, &t[at], &t[at + 1]);
            let q = linear(&hn, n, &t[at + 2], &t[at + 3]);
            let k = linear(&hn, n, &t[at + 4], &t[at + 5]);
            let v = linear(&hn, n, &t[at + 6], &t[at + 7]);
            for (i, &r) in rows.iter().enumerate() {
                let at_pos = (r * self.cap + self.len[r]) * h;
                c.self_k[at_pos..at_pos + h].copy_from_slice(&k[i * h..(i + 1) * h]);
                c.self_v[at_pos..at_pos + h].copy_from_slice(&v[i * h..(i + 1) * h]);
                let base = r * self.cap * h;
                let m = self.len[r] + 1;
                attend(
                    &q[i * h..(i + 1) * h],
                    &c.self_k[base..base + m * h],
                    &c.self_v[base..base + m * h],
                    m,
                    heads,
                    &mut o[i * h..(i + 1) * h],
                );
            }
            let y = linear(&o, n, &t[at + 8], &t[at + 9]);
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);

            let hn = layer_norm(&x, &t[at + 10], &t[at + 11]);
            let q = linear(&hn, n, &t[at + 12], &t[at + 13]);
            for (i, &r) in rows.iter().enumerate() {
                let base = r * self.s * h;
                let m = self.src_lens[r];
                attend(
                    &q[i * h..(i + 1) * h],
                    &c.cross_k[base..base + m * h],
                    &c.cross_v[base..base + m * h],
                    m,
                    heads,
                    &mut o[i * h..(i + 1) * h],
                );
            }
            let y = linear(&o, n, &t[at + 18], &t[at + 19]);
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);

            let hn = layer_norm(&x, &t[at + 20], &t[at + 21]);
            let mut f = linear(&hn, n, &t[at + 22], &t[at + 23]);
            gelu(&mut f);
            let y = linear(&f, n, &t[at + 24], &t[at + 25]);
            x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
        }
        for &r in rows {
            self.len[r] += 1;
        }
        let fin = dec_final(cfg);
        let x = layer_norm(&x, &t[fin], &t[fin + 1]);
        let emb = &t[EMBED];
        let v = cfg.vocab_size;
        let mut logits = vec![0.0; n * v];
        gemm(n, h, v, &x, (h, 1), emb.data(), (1, h), &mut logits, false);
        logits.chunks(v).map(log_softmax).collect()
    }
}
