//! Straight-line reference implementations on plain nested vectors. They read
//! parameters by name and share no code with the library's graph ops.

#![allow(dead_code)]

use lttr::tensor::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

const LN_EPS: f64 = 1e-5;

pub fn to_mat(t: &Tensor) -> Mat {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected a matrix, got {s:?}");
    t.data().chunks(s[1]).map(<[f64]>::to_vec).collect()
}

pub fn named(store: &ParamStore, name: &str) -> Tensor {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
    store.get(id).tensor.clone()
}

pub fn named_mat(store: &ParamStore, name: &str) -> Mat {
    to_mat(&named(store, name))
}

pub fn named_vec(store: &ParamStore, name: &str) -> Vec<f64> {
    named(store, name).data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn columns(a: &Mat, lo: usize, hi: usize) -> Mat {
    a.iter().map(|r| r[lo..hi].to_vec()).collect()
}

pub fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let k = r.len() as f64;
            let mean = r.iter().sum::<f64>() / k;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
            let denom = (var + LN_EPS).sqrt();
            r.iter().enumerate().map(|(c, v)| (v - mean) / denom * gain[c] + bias[c]).collect()
        })
        .collect()
}

pub fn norm(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    layer_norm(x, &named_vec(store, &format!("{name}.gain")), &named_vec(store, &format!("{name}.bias")))
}

pub fn linear(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let mut y = matmul(x, &named_mat(store, &format!("{name}.weight")));
    if let Some(id) = store.id(&format!("{name}.bias")) {
        let b = store.get(id).tensor.data();
        for r in &mut y {
            for (v, bv) in r.iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
    y
}

/// `softmax(Q Kᵀ / √d) V` and the weights.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> (Mat, Mat) {
    let d = q[0].len() as f64;
    let scores: Mat = matmul(q, &transpose(k)).into_iter().map(|r| r.into_iter().map(|s| s / d.sqrt()).collect()).collect();
    let w = softmax_rows(&scores);
    (matmul(&w, v), w)
}

pub fn mha(store: &ParamStore, name: &str, heads: usize, query: &Mat, context: &Mat) -> (Mat, Vec<Mat>) {
    let q = matmul(query, &named_mat(store, &format!("{name}.wq.weight")));
    let k = matmul(context, &named_mat(store, &format!("{name}.wk.weight")));
    let v = matmul(context, &named_mat(store, &format!("{name}.wv.weight")));
    let dk = q[0].len() / heads;
    let mut cat = vec![Vec::new(); query.len()];
    let mut weights = Vec::new();
    for h in 0..heads {
        let (o, w) = attention(&columns(&q, h * dk, (h + 1) * dk), &columns(&k, h * dk, (h + 1) * dk), &columns(&v, h * dk, (h + 1) * dk));
        for (row, part) in cat.iter_mut().zip(o) {
            row.extend(part);
        }
        weights.push(w);
    }
    (matmul(&cat, &named_mat(store, &format!("{name}.wo.weight"))), weights)
}

pub fn ffn(store: &ParamStore, name: &str, x: &Mat) -> Mat {
    let h: Mat = linear(store, &format!("{name}.up"), x)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    linear(store, &format!("{name}.down"), &h)
}

pub struct EncoderShape {
    pub region_size: usize,
    pub point_grid: usize,
    pub heads: usize,
    pub layers: usize,
}

/// Region memories after the encoder, `(N+1) × D`, for an `[X, Y, F]` map.
pub fn encoder(store: &ParamStore, name: &str, shape: &EncoderShape, map: &Tensor) -> Mat {
    let s = map.shape();
    let (xn, yn, f) = (s[0], s[1], s[2]);
    let (r, p) = (shape.region_size, shape.point_grid);
    let sub = r / p;
    let (gx, gy) = (xn / r, yn / r);
    let n = gx * gy;
    let np = p * p;

    // raw point tokens per region
    let mut regions_tokens: Vec<Mat> = Vec::new();
    for rx in 0..gx {
        for ry in 0..gy {
            let mut toks = Vec::new();
            for px in 0..p {
                for py in 0..p {
                    let mut tok = Vec::new();
                    for dx in 0..sub {
                        for dy in 0..sub {
                            for c in 0..f {
                                tok.push(map.at(&[rx * r + px * sub + dx, ry * r + py * sub + dy, c]));
                            }
                        }
                    }
                    toks.push(tok);
                }
            }
            regions_tokens.push(linear(store, &format!("{name}.point_embed"), &toks));
        }
    }
    let e_point = named_mat(store, &format!("{name}.point_pos"));
    let e_region = named_mat(store, &format!("{name}.region_pos"));
    let mut g = named_mat(store, &format!("{name}.memories"));
    assert_eq!(g.len(), n + 1);

    for j in 0..shape.layers {
        let l = format!("{name}.layer{j}");
        for u in regions_tokens.iter_mut() {
            let z = norm(store, &format!("{l}.point_norm"), &add(u, &e_point));
            let (o, _) = mha(store, &format!("{l}.point_mha"), shape.heads, &z, &z);
            *u = add(u, &o);
            let h = ffn(store, &format!("{l}.point_ffn"), &norm(store, &format!("{l}.point_ffn_norm"), u));
            *u = add(u, &h);
        }
        for (i, u) in regions_tokens.iter().enumerate() {
            let flat: Vec<f64> = u.iter().flatten().copied().collect();
            assert_eq!(flat.len(), np * u[0].len());
            let proj = linear(store, &format!("{l}.phi"), &vec![flat]);
            for (gv, pv) in g[i + 1].iter_mut().zip(&proj[0]) {
                *gv += pv;
            }
        }
        let z = norm(store, &format!("{l}.region_norm"), &add(&g, &e_region));
        let (o, _) = mha(store, &format!("{l}.region_mha"), shape.heads, &z, &z);
        g = add(&g, &o);
        let h = ffn(store, &format!("{l}.region_ffn"), &norm(store, &format!("{l}.region_ffn_norm"), &g));
        g = add(&g, &h);
    }
    g
}

pub fn decoder(store: &ParamStore, name: &str, heads: usize, search: &Mat, template: &Mat) -> Mat {
    let z = norm(store, &format!("{name}.self_norm"), search);
    let (o, _) = mha(store, &format!("{name}.self_mha"), heads, &z, &z);
    let x = add(search, &o);
    let q = norm(store, &format!("{name}.query_norm"), &x);
    let kv = norm(store, &format!("{name}.context_norm"), template);
    let (o, _) = mha(store, &format!("{name}.cross_mha"), heads, &q, &kv);
    let x = add(&x, &o);
    let h = ffn(store, &format!("{name}.ffn"), &norm(store, &format!("{name}.ffn_norm"), &x));
    add(&x, &h)
}

/// Penalty-reduced focal loss, one cell at a time, averaged over positive cells.
pub fn focal_loss(pred: &[f64], target: &[f64], alpha: f64, beta: f64) -> f64 {
    let mut total = 0.0;
    let mut positives = 0usize;
    for (&p, &h) in pred.iter().zip(target) {
        if h == 1.0 {
            positives += 1;
            total += (1.0 - p).powf(alpha) * p.ln();
        } else {
            total += (1.0 - h).powf(beta) * p.powf(alpha) * (1.0 - p).ln();
        }
    }
    -total / positives.max(1) as f64
}

/// Per-channel full-size correlation by explicit loops.
pub fn xcorr(search: &Tensor, template: &Tensor) -> Vec<f64> {
    let s = search.shape();
    let mut out = vec![0.0; s[2]];
    for (c, o) in out.iter_mut().enumerate() {
        for x in 0..s[0] {
            for y in 0..s[1] {
                *o += search.at(&[x, y, c]) * template.at(&[x, y, c]);
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}
