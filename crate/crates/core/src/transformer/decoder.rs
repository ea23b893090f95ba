use rand::Rng;

use super::attention::{Ffn, Mha};
use super::TransformerConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, LayerNorm, ParamId, ParamStore, Var};

/// Search regions attend to themselves, then to the template regions.
#[derive(Debug, Clone)]
pub struct Decoder {
    dim: usize,
    self_norm: LayerNorm,
    self_mha: Mha,
    query_norm: LayerNorm,
    context_norm: LayerNorm,
    cross_mha: Mha,
    ffn_norm: LayerNorm,
    ffn: Ffn,
}

pub struct DecoderOutput {
    /// `N × D`.
    pub regions: Var,
    pub self_attention: Vec<Var>,
    pub cross_attention: Vec<Var>,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: &TransformerConfig, rng: &mut R) -> Result<Self> {
        let d = config.model_dim;
        Ok(Self {
            dim: d,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d, rng)?,
            self_mha: Mha::new(store, &format!("{name}.self_mha"), d, config.heads, rng)?,
            query_norm: LayerNorm::new(store, &format!("{name}.query_norm"), d, rng)?,
            context_norm: LayerNorm::new(store, &format!("{name}.context_norm"), d, rng)?,
            cross_mha: Mha::new(store, &format!("{name}.cross_mha"), d, config.heads, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d, rng)?,
            ffn: Ffn::new(store, &format!("{name}.ffn"), d, config.ffn_ratio * d, rng)?,
        })
    }

    pub fn self_mha(&self) -> &Mha {
        &self.self_mha
    }

    pub fn cross_mha(&self) -> &Mha {
        &self.cross_mha
    }

    /// Every weight matrix and bias, excluding norms.
    pub fn weight_params(&self) -> Vec<ParamId> {
        let mut out = self.self_mha.params();
        out.extend(self.cross_mha.params());
        out.extend(self.ffn.params());
        out
    }

    /// `search: N × D` (class token stripped), `template: M × D`.
    pub fn decode(&self, g: &mut Graph, search: Var, template: Var) -> Result<DecoderOutput> {
        let (ss, ts) = (g.shape(search).to_vec(), g.shape(template).to_vec());
        if ss.len() != 2 || ts.len() != 2 || ss[1] != self.dim || ts[1] != self.dim {
            return Err(Error::dim("decode", &ss, &ts));
        }
        let z = self.self_norm.forward(g, search)?;
        let (o, self_attention) = self.self_mha.forward(g, z, z)?;
        let mut x = g.add(search, o)?;
        let q = self.query_norm.forward(g, x)?;
        let kv = self.context_norm.forward(g, template)?;
        let (o, cross_attention) = self.cross_mha.forward(g, q, kv)?;
        x = g.add(x, o)?;
        let h = self.ffn_norm.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        let regions = g.add(x, h)?;
        Ok(DecoderOutput {
            regions,
            self_attention,
            cross_attention,
        })
    }
}
