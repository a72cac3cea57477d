//! Reference implementations on plain `f64` row-major matrices, written
//! directly from the layer definitions and sharing no code with the tape.

#![allow(dead_code)]

use dcat_core::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl Mat {
    pub fn new(r: usize, c: usize, d: Vec<f64>) -> Self {
        assert_eq!(d.len(), r * c);
        Self { r, c, d }
    }

    pub fn zeros(r: usize, c: usize) -> Self {
        Self::new(r, c, vec![0.0; r * c])
    }

    pub fn of(t: &Tensor<f64>) -> Self {
        match t.shape() {
            [n] => Self::new(1, *n, t.data().to_vec()),
            [r, c] => Self::new(*r, *c, t.data().to_vec()),
            s => panic!("not a matrix: {s:?}"),
        }
    }

    pub fn tensor(&self) -> Tensor<f64> {
        Tensor::matrix(self.r, self.c, self.d.clone()).unwrap()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.d[i * self.c..(i + 1) * self.c]
    }

    pub fn mul(&self, o: &Mat) -> Mat {
        assert_eq!(self.c, o.r);
        let mut out = Mat::zeros(self.r, o.c);
        for i in 0..self.r {
            for j in 0..o.c {
                let mut s = 0.0;
                for k in 0..self.c {
                    s += self.at(i, k) * o.at(k, j);
                }
                out.d[i * o.c + j] = s;
            }
        }
        out
    }

    pub fn t(&self) -> Mat {
        let mut out = Mat::zeros(self.c, self.r);
        for i in 0..self.r {
            for j in 0..self.c {
                out.d[j * self.r + i] = self.at(i, j);
            }
        }
        out
    }

    pub fn plus(&self, o: &Mat) -> Mat {
        assert_eq!((self.r, self.c), (o.r, o.c));
        Mat::new(self.r, self.c, self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect())
    }

    pub fn add_bias(&self, b: &[f64]) -> Mat {
        let mut out = self.clone();
        for i in 0..self.r {
            for j in 0..self.c {
                out.d[i * self.c + j] += b[j];
            }
        }
        out
    }

    pub fn select(&self, rows: &[usize]) -> Mat {
        let mut d = Vec::new();
        for &r in rows {
            d.extend_from_slice(self.row(r));
        }
        Mat::new(rows.len(), self.c, d)
    }

    pub fn cols(&self, start: usize, len: usize) -> Mat {
        let mut d = Vec::new();
        for i in 0..self.r {
            d.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Mat::new(self.r, len, d)
    }

    pub fn hcat(parts: &[Mat]) -> Mat {
        let r = parts[0].r;
        let c = parts.iter().map(|p| p.c).sum();
        let mut d = Vec::with_capacity(r * c);
        for i in 0..r {
            for p in parts {
                d.extend_from_slice(p.row(i));
            }
        }
        Mat::new(r, c, d)
    }

    pub fn vcat(parts: &[Mat]) -> Mat {
        let c = parts[0].c;
        let mut d = Vec::new();
        for p in parts {
            assert_eq!(p.c, c);
            d.extend_from_slice(&p.d);
        }
        Mat::new(d.len() / c, c, d)
    }

    pub fn max_diff(&self, o: &Mat) -> f64 {
        assert_eq!((self.r, self.c), (o.r, o.c));
        self.d.iter().zip(&o.d).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    let mut out = x.clone();
    for i in 0..x.r {
        let row = x.row(i);
        let n = x.c as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        for j in 0..x.c {
            out.d[i * x.c + j] = (row[j] - mean) / (var + EPS).sqrt() * g[j] + b[j];
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Multi-head attention, `1/sqrt(d_head)` scale. Returns output and the
/// per-head probability matrices.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let dh = q.c / heads;
    let mut outs = Vec::new();
    let mut maps = Vec::new();
    for h in 0..heads {
        let (qh, kh, vh) = (q.cols(h * dh, dh), k.cols(h * dh, dh), v.cols(h * dh, dh));
        let s = qh.mul(&kh.t());
        let mut p = Mat::zeros(s.r, s.c);
        for i in 0..s.r {
            let row: Vec<f64> = s.row(i).iter().map(|x| x / (dh as f64).sqrt()).collect();
            p.d[i * s.c..(i + 1) * s.c].copy_from_slice(&softmax(&row));
        }
        outs.push(p.mul(&vh));
        maps.push(p);
    }
    (Mat::hcat(&outs), maps)
}

pub fn param(store: &ParamStore<f64>, name: &str) -> Mat {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    Mat::of(store.value(id))
}

pub fn vecp(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    param(store, name).d
}

pub fn linear(x: &Mat, store: &ParamStore<f64>, name: &str) -> Mat {
    x.mul(&param(store, &format!("{name}.weight")))
        .add_bias(&vecp(store, &format!("{name}.bias")))
}

pub fn norm(x: &Mat, store: &ParamStore<f64>, name: &str) -> Mat {
    layer_norm(x, &vecp(store, &format!("{name}.gamma")), &vecp(store, &format!("{name}.beta")))
}

/// Pre-norm encoder block with a 4x erf-GELU MLP.
pub fn encoder_block(x: &Mat, store: &ParamStore<f64>, name: &str, heads: usize) -> Mat {
    let h = norm(x, store, &format!("{name}.norm1"));
    let q = linear(&h, store, &format!("{name}.wq"));
    let k = linear(&h, store, &format!("{name}.wk"));
    let v = linear(&h, store, &format!("{name}.wv"));
    let (a, _) = attention(&q, &k, &v, heads);
    let x1 = x.plus(&linear(&a, store, &format!("{name}.proj")));
    let h = norm(&x1, store, &format!("{name}.norm2"));
    let mut h = linear(&h, store, &format!("{name}.fc1"));
    h.d.iter_mut().for_each(|v| *v = gelu(*v));
    x1.plus(&linear(&h, store, &format!("{name}.fc2")))
}

/// Patch rows (channel, row, column inside a patch), patches row-major.
pub fn patches(image: &Tensor<f64>, side: usize, p: usize) -> Mat {
    let g = side / p;
    let px = image.data();
    let mut d = Vec::new();
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for y in 0..p {
                    for x in 0..p {
                        d.push(px[c * side * side + (gy * p + y) * side + gx * p + x]);
                    }
                }
            }
        }
    }
    Mat::new(g * g, 3 * p * p, d)
}

/// Class token, projected patches, plus position embeddings.
pub fn embed(image: &Tensor<f64>, store: &ParamStore<f64>, branch: &str, side: usize, p: usize) -> Mat {
    let x = linear(&patches(image, side, p), store, &format!("{branch}.embed.proj"));
    let seq = Mat::vcat(&[param(store, &format!("{branch}.embed.cls")), x]);
    seq.plus(&param(store, &format!("{branch}.embed.pos")))
}

/// Head-averaged class-row attention over patches, renormalized to sum 1.
pub fn class_scores(q_in: &Mat, k_in: &Mat, heads: usize) -> Vec<f64> {
    let (_, maps) = attention(&q_in.select(&[0]), k_in, k_in, heads);
    let t = k_in.r;
    let mut avg = vec![0.0; t];
    for m in &maps {
        for (j, a) in avg.iter_mut().enumerate() {
            *a += m.at(0, j) / heads as f64;
        }
    }
    let mass: f64 = avg[1..].iter().sum();
    avg[1..].iter().map(|a| a / mass).collect()
}

/// Kept rows (1-based) by repeated selection of the highest remaining score,
/// first index on ties; count is the least k with k >= alpha * n.
pub fn top_rows(scores: &[f64], alpha: f64) -> Vec<usize> {
    let n = scores.len();
    let mut k = 1;
    while (k as f64) < alpha * n as f64 - 1e-9 {
        k += 1;
    }
    let mut taken = vec![false; n];
    let mut out = Vec::new();
    for _ in 0..k.min(n) {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !taken[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b + 1);
    }
    out
}

/// One cross-patch direction: rows `[0] + kept` of `src` query all of `dst`,
/// updates are added back into those rows.
pub fn cross_direction(src: &Mat, dst: &Mat, kept: &[usize], store: &ParamStore<f64>, name: &str, heads: usize) -> Mat {
    let mut rows = vec![0];
    rows.extend_from_slice(kept);
    let q = linear(&norm(&src.select(&rows), store, &format!("{name}.norm_q")), store, &format!("{name}.wq"));
    let kv = norm(dst, store, &format!("{name}.norm_kv"));
    let k = linear(&kv, store, &format!("{name}.wk"));
    let v = linear(&kv, store, &format!("{name}.wv"));
    let (a, _) = attention(&q, &k, &v, heads);
    let upd = linear(&a, store, &format!("{name}.wo"));
    let mut out = src.clone();
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..src.c {
            out.d[r * src.c + j] += upd.at(i, j);
        }
    }
    out
}

/// Replaces every parameter with Gaussian values so no weight is
/// structurally zero or one.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let shift = if p.name.ends_with(".gamma") { 1.0 } else { 0.0 };
        for v in p.value.data_mut() {
            *v = shift + std * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

pub fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::new(r, c, (0..r * c).map(|_| rng.sample(StandardNormal)).collect())
}

/// Relative error `|a - n| / max(|a|, |n|)` over a whole gradient, with an
/// absolute fallback when both are tiny.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every scalar of `values`.
pub fn numeric_grad(values: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut g = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + h;
        let up = f(values);
        values[i] = orig - h;
        let down = f(values);
        values[i] = orig;
        g.push((up - down) / (2.0 * h));
    }
    g
}

/// `tr(K H L H)` with `K = X X^T`, `L = Y Y^T` and `H = I - 11^T / n`.
pub fn hsic(x: &Mat, y: &Mat) -> f64 {
    let n = x.r;
    let h = Mat::new(
        n,
        n,
        (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 } - 1.0 / n as f64).collect(),
    );
    let m = x.mul(&x.t()).mul(&h).mul(&y.mul(&y.t())).mul(&h);
    (0..n).map(|i| m.at(i, i)).sum()
}

pub fn kernel_cka(x: &Mat, y: &Mat) -> f64 {
    hsic(x, y) / (hsic(x, x) * hsic(y, y)).sqrt()
}

/// Random `p x p` orthogonal matrix by Gram-Schmidt.
pub fn orthogonal(rng: &mut ChaCha8Rng, p: usize) -> Mat {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < p {
        let mut v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-3 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Mat::new(p, p, q.concat())
}
