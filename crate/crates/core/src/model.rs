//! The full network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BevGeometry};
use crate::error::{Error, Result};
use crate::fusion::{apply_region_weights, depthwise_xcorr, fuse, RegionAttention};
use crate::heads::{Heads, PredictionMaps};
use crate::scene::{VoxelConfig, VoxelGrid};
use crate::tensor::{Graph, ParamId, ParamStore, Var};
use crate::transformer::{Decoder, Encoder, RegionGeometry, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    EncoderOnly,
    EncoderDecoderMax,
    EncoderDecoder,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Self::Baseline, Self::EncoderOnly, Self::EncoderDecoderMax, Self::EncoderDecoder];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::EncoderOnly => "encoder_only",
            Self::EncoderDecoderMax => "encoder_decoder_max",
            Self::EncoderDecoder => "encoder_decoder",
        }
    }

    /// Row label of the transformer ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Self::Baseline => "Baseline",
            Self::EncoderOnly => "Encoder (w/o Decoder)",
            Self::EncoderDecoderMax => "Encoder + Decoder (Max)",
            Self::EncoderDecoder => "Encoder + Decoder",
        }
    }

    pub fn has_encoder(self) -> bool {
        self != Self::Baseline
    }

    pub fn has_decoder(self) -> bool {
        matches!(self, Self::EncoderDecoderMax | Self::EncoderDecoder)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub voxel: VoxelConfig,
    pub backbone: BackboneConfig,
    pub transformer: TransformerConfig,
    pub variant: Variant,
    /// Pass region weights through a sigmoid.
    pub sigmoid_region_weights: bool,
    /// Initial bias of the heatmap head's last layer.
    pub heatmap_bias: f64,
    /// Divide the cross-correlation by the number of BEV cells before fusing.
    pub normalize_similarity: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            voxel: VoxelConfig::desk(),
            backbone: BackboneConfig::default(),
            transformer: TransformerConfig::default(),
            variant: Variant::EncoderDecoder,
            sigmoid_region_weights: false,
            heatmap_bias: -2.19,
            normalize_similarity: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub encoder: Option<Encoder>,
    pub decoder: Option<Decoder>,
    pub region_attention: Option<RegionAttention>,
    pub heads: Heads,
}

/// Intermediate quantities of one forward pass, for inspection and export.
#[derive(Default)]
pub struct Trace {
    pub search_map: Option<Var>,
    pub template_map: Option<Var>,
    pub search_region_weights: Option<Var>,
    pub template_region_weights: Option<Var>,
    /// Search branch, per layer, per region, per head.
    pub point_attention: Vec<Vec<Vec<Var>>>,
    /// Search branch, per layer, per head.
    pub region_attention: Vec<Vec<Var>>,
    pub cross_attention: Vec<Var>,
    pub similarity: Option<Var>,
}

pub struct ForwardOutput {
    pub preds: PredictionMaps,
    pub geometry: BevGeometry,
    pub trace: Trace,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config.backbone, &config.voxel, &mut rng)?;
        let geo = backbone.geometry();
        let f = config.backbone.feature_dim();
        let (mut encoder, mut decoder, mut region_attention) = (None, None, None);
        if config.variant.has_encoder() {
            let t = &config.transformer;
            let regions = RegionGeometry::new([geo.extents[0], geo.extents[1], f], t.region_size, t.point_grid)?;
            encoder = Some(Encoder::new(&mut store, "encoder", t, regions, &mut rng)?);
            if config.variant.has_decoder() {
                decoder = Some(Decoder::new(&mut store, "decoder", t, &mut rng)?);
            }
            region_attention = Some(RegionAttention::new(
                &mut store,
                "fusion.region_attention",
                t.model_dim,
                config.sigmoid_region_weights,
                &mut rng,
            )?);
        }
        let heads = Heads::new(&mut store, "heads", f, config.heatmap_bias, &mut rng)?;
        Ok(Self {
            config,
            store,
            backbone,
            encoder,
            decoder,
            region_attention,
            heads,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn geometry(&self) -> BevGeometry {
        self.backbone.geometry()
    }

    /// Parameters that only exist for transformer variants.
    pub fn transformer_params(&self) -> Vec<ParamId> {
        let mut prefixed = self.store.with_prefix("encoder.");
        prefixed.extend(self.store.with_prefix("decoder."));
        prefixed.extend(self.store.with_prefix("fusion."));
        prefixed
    }

    /// Full forward pass on two `[W, L, H, 4]` voxel volumes.
    pub fn forward_volumes(&self, g: &mut Graph, search: Var, template: Var) -> Result<ForwardOutput> {
        let ms = self.backbone.forward(g, search)?;
        let mt = self.backbone.forward(g, template)?;
        let geometry = ms.geometry;
        let mut trace = Trace::default();
        let (mut s_map, mut t_map) = (ms.map, mt.map);
        let transformer = match (&self.encoder, &self.region_attention) {
            (Some(enc), Some(ra)) if self.config.variant.has_encoder() => Some((enc, ra)),
            _ => None,
        };
        if let Some((enc, ra)) = transformer {
            let n = enc.geometry().regions();
            let es = enc.encode(g, s_map)?;
            let et = enc.encode(g, t_map)?;
            let gs = g.slice(es.regions, 0, 1, n + 1)?;
            let gt = g.slice(et.regions, 0, 1, n + 1)?;
            let decoder = self.decoder.as_ref().filter(|_| self.config.variant.has_decoder());
            let search_tokens = match (decoder, self.config.variant) {
                (Some(dec), Variant::EncoderDecoderMax) => {
                    let class = g.slice(et.regions, 0, 0, 1)?;
                    let out = dec.decode(g, gs, class)?;
                    trace.cross_attention = out.cross_attention;
                    out.regions
                }
                (Some(dec), _) => {
                    let out = dec.decode(g, gs, gt)?;
                    trace.cross_attention = out.cross_attention;
                    out.regions
                }
                (None, _) => gs,
            };
            let ws = ra.forward(g, search_tokens)?;
            let wt = ra.forward(g, gt)?;
            let r = enc.geometry().region_size;
            s_map = apply_region_weights(g, s_map, ws, r)?;
            t_map = apply_region_weights(g, t_map, wt, r)?;
            trace.search_region_weights = Some(ws);
            trace.template_region_weights = Some(wt);
            trace.point_attention = es.point_attention;
            trace.region_attention = es.region_attention;
        }
        let mut sim = depthwise_xcorr(g, s_map, t_map)?;
        if self.config.normalize_similarity {
            sim = g.scale(sim, 1.0 / geometry.cells() as f64);
        }
        let fused = fuse(g, s_map, sim)?;
        let preds = self.heads.forward(g, fused)?;
        trace.search_map = Some(s_map);
        trace.template_map = Some(t_map);
        trace.similarity = Some(sim);
        Ok(ForwardOutput { preds, geometry, trace })
    }

    pub fn forward(&self, g: &mut Graph, search: &VoxelGrid, template: &VoxelGrid) -> Result<ForwardOutput> {
        if !search.same_geometry(template) {
            return Err(Error::Config("search and template grids differ in geometry".into()));
        }
        let s = g.constant(search.features());
        let t = g.constant(template.features());
        self.forward_volumes(g, s, t)
    }
}
