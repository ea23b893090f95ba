use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Linear, ParamId, ParamStore, Var};

/// `softmax(Q Kᵀ / √d_k) V`. Returns the output and the row-stochastic weights.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] {
        return Err(Error::dim("attention q/k", &qs, &ks));
    }
    if ks[0] != vs[0] {
        return Err(Error::dim("attention k/v", &ks, &vs));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (qs[1] as f64).sqrt());
    let weights = g.softmax(scores, 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention without biases; head `i` uses columns
/// `i·d_k .. (i+1)·d_k` of the Q/K/V projections.
#[derive(Debug, Clone)]
pub struct Mha {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl Mha {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{name}: model dim {dim} not divisible by {heads} heads")));
        }
        let mut proj = |p: &str| -> Result<ParamId> {
            Ok(Linear::new(store, &format!("{name}.{p}"), dim, dim, false, rng)?.weight)
        };
        Ok(Self {
            wq: proj("wq")?,
            wk: proj("wk")?,
            wv: proj("wv")?,
            wo: proj("wo")?,
            heads,
            dim,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }

    /// `query: [n, D]`, `context: [m, D]` → `[n, D]` plus one `[n, m]`
    /// weight matrix per head.
    pub fn forward(&self, g: &mut Graph, query: Var, context: Var) -> Result<(Var, Vec<Var>)> {
        for x in [query, context] {
            let s = g.shape(x);
            if s.len() != 2 || s[1] != self.dim {
                return Err(Error::dim("mha input", s, &[s.first().copied().unwrap_or(0), self.dim]));
            }
        }
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.matmul(query, wq)?;
        let k = g.matmul(context, wk)?;
        let v = g.matmul(context, wv)?;
        let dk = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice(q, 1, lo, hi)?, g.slice(k, 1, lo, hi)?, g.slice(v, 1, lo, hi)?)
            };
            let (o, w) = attention(g, qh, kh, vh)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        Ok((g.matmul(cat, wo)?, weights))
    }
}

/// Position-wise `Linear → relu → Linear`.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.up.params().into_iter().chain(self.down.params()).collect()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}
