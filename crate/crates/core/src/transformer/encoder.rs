use rand::Rng;

use super::attention::{Ffn, Mha};
use super::TransformerConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, LayerNorm, Linear, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionGeometry {
    pub map_shape: [usize; 3],
    pub region_size: usize,
    pub point_grid: usize,
}

impl RegionGeometry {
    pub fn new(map_shape: [usize; 3], region_size: usize, point_grid: usize) -> Result<Self> {
        let [x, y, _] = map_shape;
        if region_size == 0 || point_grid == 0 || x % region_size != 0 || y % region_size != 0 {
            return Err(Error::Config(format!("BEV map {x}x{y} is not divisible into regions of {region_size}")));
        }
        if region_size % point_grid != 0 {
            return Err(Error::Config(format!("region size {region_size} is not divisible by point grid {point_grid}")));
        }
        Ok(Self {
            map_shape,
            region_size,
            point_grid,
        })
    }

    /// Regions per side `(X/R, Y/R)`.
    pub fn grid(&self) -> [usize; 2] {
        [self.map_shape[0] / self.region_size, self.map_shape[1] / self.region_size]
    }

    /// `N`.
    pub fn regions(&self) -> usize {
        self.grid()[0] * self.grid()[1]
    }

    /// `N' = R'²`.
    pub fn points_per_region(&self) -> usize {
        self.point_grid * self.point_grid
    }

    /// Cells per point-token side `R / R'`.
    pub fn sub_block(&self) -> usize {
        self.region_size / self.point_grid
    }

    /// Raw width of one point token before projection.
    pub fn token_width(&self) -> usize {
        self.sub_block() * self.sub_block() * self.map_shape[2]
    }
}

/// Gather indices turning an `[X, Y, F]` map into `[N·N', (R/R')²·F]`.
/// Regions are row-major over the region grid; each region's point tokens
/// are contiguous and row-major inside it; a token is flattened as `(dx, dy, f)`.
pub fn region_token_indices(geo: &RegionGeometry) -> Vec<usize> {
    let [_, yn, f] = geo.map_shape;
    let [gx, gy] = geo.grid();
    let (r, p, s) = (geo.region_size, geo.point_grid, geo.sub_block());
    let mut idx = Vec::with_capacity(geo.map_shape.iter().product());
    for rx in 0..gx {
        for ry in 0..gy {
            for px in 0..p {
                for py in 0..p {
                    for dx in 0..s {
                        for dy in 0..s {
                            let (x, y) = (rx * r + px * s + dx, ry * r + py * s + dy);
                            let base = (x * yn + y) * f;
                            idx.extend(base..base + f);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Unprojected point tokens `[N·N', (R/R')²·F]` of a BEV map.
pub fn split_regions(g: &mut Graph, map: Var, geo: &RegionGeometry) -> Result<Var> {
    if g.shape(map) != geo.map_shape {
        return Err(Error::Config(format!("map {:?} does not match region geometry {:?}", g.shape(map), geo.map_shape)));
    }
    let rows = geo.regions() * geo.points_per_region();
    g.gather(map, region_token_indices(geo), &[rows, geo.token_width()])
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    point_norm: LayerNorm,
    point_mha: Mha,
    point_ffn_norm: LayerNorm,
    point_ffn: Ffn,
    phi: Linear,
    region_norm: LayerNorm,
    region_mha: Mha,
    region_ffn_norm: LayerNorm,
    region_ffn: Ffn,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    geometry: RegionGeometry,
    config: TransformerConfig,
    point_embed: Linear,
    /// Learnable memories `G₀`, `(N+1) × D`, class token at row 0.
    pub memories: ParamId,
    pub region_pos: ParamId,
    pub point_pos: ParamId,
    layers: Vec<EncoderLayer>,
}

pub struct EncoderOutput {
    /// `(N+1) × D`.
    pub regions: Var,
    /// Per layer, per region, per head: `N' × N'`.
    pub point_attention: Vec<Vec<Vec<Var>>>,
    /// Per layer, per head: `(N+1) × (N+1)`.
    pub region_attention: Vec<Vec<Var>>,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: &TransformerConfig, geometry: RegionGeometry, rng: &mut R) -> Result<Self> {
        let (d, s) = (config.model_dim, config.point_dim);
        if config.layers == 0 || config.ffn_ratio == 0 {
            return Err(Error::Config("encoder needs at least one layer and a positive FFN ratio".into()));
        }
        if s % config.heads != 0 || d % config.heads != 0 {
            return Err(Error::Config(format!("token widths D={d}, S={s} must be divisible by {} heads", config.heads)));
        }
        let (n, np) = (geometry.regions(), geometry.points_per_region());
        let point_embed = Linear::new(store, &format!("{name}.point_embed"), geometry.token_width(), s, true, rng)?;
        let memories = store.init(&format!("{name}.memories"), &[n + 1, d], Init::Normal(0.02), rng)?;
        let region_pos = store.init(&format!("{name}.region_pos"), &[n + 1, d], Init::Normal(0.02), rng)?;
        let point_pos = store.init(&format!("{name}.point_pos"), &[np, s], Init::Normal(0.02), rng)?;
        let mut layers = Vec::with_capacity(config.layers);
        for j in 0..config.layers {
            let p = format!("{name}.layer{j}");
            layers.push(EncoderLayer {
                point_norm: LayerNorm::new(store, &format!("{p}.point_norm"), s, rng)?,
                point_mha: Mha::new(store, &format!("{p}.point_mha"), s, config.heads, rng)?,
                point_ffn_norm: LayerNorm::new(store, &format!("{p}.point_ffn_norm"), s, rng)?,
                point_ffn: Ffn::new(store, &format!("{p}.point_ffn"), s, config.ffn_ratio * s, rng)?,
                phi: Linear::new(store, &format!("{p}.phi"), np * s, d, true, rng)?,
                region_norm: LayerNorm::new(store, &format!("{p}.region_norm"), d, rng)?,
                region_mha: Mha::new(store, &format!("{p}.region_mha"), d, config.heads, rng)?,
                region_ffn_norm: LayerNorm::new(store, &format!("{p}.region_ffn_norm"), d, rng)?,
                region_ffn: Ffn::new(store, &format!("{p}.region_ffn"), d, config.ffn_ratio * d, rng)?,
            });
        }
        Ok(Self {
            geometry,
            config: config.clone(),
            point_embed,
            memories,
            region_pos,
            point_pos,
            layers,
        })
    }

    pub fn geometry(&self) -> &RegionGeometry {
        &self.geometry
    }

    /// Every weight matrix and bias, excluding memories, embeddings and norms.
    pub fn weight_params(&self) -> Vec<ParamId> {
        let mut out = self.point_embed.params();
        for l in &self.layers {
            out.extend(l.point_mha.params());
            out.extend(l.point_ffn.params());
            out.extend(l.phi.params());
            out.extend(l.region_mha.params());
            out.extend(l.region_ffn.params());
        }
        out
    }

    /// Projected point tokens `U₀`, `[N·N', S]`.
    pub fn point_tokens(&self, g: &mut Graph, map: Var) -> Result<Var> {
        let raw = split_regions(g, map, &self.geometry)?;
        self.point_embed.forward(g, raw)
    }

    pub fn encode(&self, g: &mut Graph, map: Var) -> Result<EncoderOutput> {
        let (n, np, s) = (self.geometry.regions(), self.geometry.points_per_region(), self.config.point_dim);
        let mut u = self.point_tokens(g, map)?;
        let mut regions = g.param(self.memories);
        let e_point = g.param(self.point_pos);
        let e_point = if n == 1 { e_point } else { g.concat(&vec![e_point; n], 0)? };
        let e_region = g.param(self.region_pos);
        let mut point_attention = Vec::new();
        let mut region_attention = Vec::new();
        for layer in &self.layers {
            // point level, attention restricted to each region's tokens
            let z = g.add(u, e_point)?;
            let z = layer.point_norm.forward(g, z)?;
            let mut outs = Vec::with_capacity(n);
            let mut maps = Vec::with_capacity(n);
            for i in 0..n {
                let zi = g.slice(z, 0, i * np, (i + 1) * np)?;
                let (o, w) = layer.point_mha.forward(g, zi, zi)?;
                outs.push(o);
                maps.push(w);
            }
            let attn = if n == 1 { outs[0] } else { g.concat(&outs, 0)? };
            u = g.add(u, attn)?;
            let h = layer.point_ffn_norm.forward(g, u)?;
            let h = layer.point_ffn.forward(g, h)?;
            u = g.add(u, h)?;
            point_attention.push(maps);

            // memories of the N regions receive their flattened tokens
            let flat = g.reshape(u, &[n, np * s])?;
            let proj = layer.phi.forward(g, flat)?;
            let class = g.slice(regions, 0, 0, 1)?;
            let rest = g.slice(regions, 0, 1, n + 1)?;
            let rest = g.add(rest, proj)?;
            regions = g.concat(&[class, rest], 0)?;

            // region level, class token included
            let z = g.add(regions, e_region)?;
            let z = layer.region_norm.forward(g, z)?;
            let (o, w) = layer.region_mha.forward(g, z, z)?;
            regions = g.add(regions, o)?;
            let h = layer.region_ffn_norm.forward(g, regions)?;
            let h = layer.region_ffn.forward(g, h)?;
            regions = g.add(regions, h)?;
            region_attention.push(w);
        }
        Ok(EncoderOutput {
            regions,
            point_attention,
            region_attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(shape: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn region_counts() {
        assert_eq!(RegionGeometry::new([32, 32, 8], 16, 4).unwrap().regions(), 4);
        let desk = RegionGeometry::new([8, 8, 32], 4, 2).unwrap();
        assert_eq!((desk.regions(), desk.points_per_region()), (4, 4));
        assert!(RegionGeometry::new([8, 8, 32], 3, 1).is_err());
        assert!(RegionGeometry::new([8, 8, 32], 4, 3).is_err());
    }

    #[test]
    fn split_then_fold_back_reproduces_map() {
        let geo = RegionGeometry::new([8, 8, 3], 4, 2).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let m = random_map([8, 8, 3], 1);
        let x = g.constant(m.clone());
        let tokens = split_regions(&mut g, x, &geo).unwrap();
        assert_eq!(g.shape(tokens), &[16, 12]);
        let mut back = Tensor::zeros(&[8, 8, 3]);
        for (pos, &src) in region_token_indices(&geo).iter().enumerate() {
            back.data_mut()[src] = g.data(tokens)[pos];
        }
        assert_eq!(back, m);
    }

    #[test]
    fn token_layout() {
        // region 1 is the block at x 0..4, y 4..8; its point token 2 covers x 2..4, y 4..6
        let geo = RegionGeometry::new([8, 8, 1], 4, 2).unwrap();
        let idx = region_token_indices(&geo);
        let row = 1 * 4 + 2;
        let cells: Vec<usize> = idx[row * 4..row * 4 + 4].to_vec();
        assert_eq!(cells, vec![2 * 8 + 4, 2 * 8 + 5, 3 * 8 + 4, 3 * 8 + 5]);
    }

    #[test]
    fn output_shape_and_zero_weight_collapse() {
        let cfg = TransformerConfig {
            model_dim: 8,
            point_dim: 4,
            ..TransformerConfig::default()
        };
        let geo = RegionGeometry::new([8, 8, 3], 4, 2).unwrap();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", &cfg, geo, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        {
            let mut g = Graph::new(&store);
            let m = g.constant(random_map([8, 8, 3], 3));
            let out = enc.encode(&mut g, m).unwrap();
            assert_eq!(g.shape(out.regions), &[5, 8]);
        }
        for id in enc.weight_params() {
            let shape = store.get(id).tensor.shape().to_vec();
            store.get_mut(id).tensor = Tensor::zeros(&shape);
        }
        let mut g = Graph::new(&store);
        let m = g.constant(random_map([8, 8, 3], 3));
        let out = enc.encode(&mut g, m).unwrap();
        assert_eq!(g.value(out.regions).data(), store.get(enc.memories).tensor.data());
    }

    #[test]
    fn branches_do_not_interact() {
        let cfg = TransformerConfig {
            model_dim: 8,
            point_dim: 4,
            ..TransformerConfig::default()
        };
        let geo = RegionGeometry::new([8, 8, 3], 4, 2).unwrap();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", &cfg, geo, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut g = Graph::new(&store);
        let t = g.constant(random_map([8, 8, 3], 4));
        let s1 = g.constant(random_map([8, 8, 3], 5));
        let s2 = g.constant(random_map([8, 8, 3], 6));
        let a = enc.encode(&mut g, t).unwrap().regions;
        let _ = enc.encode(&mut g, s1).unwrap();
        let b = enc.encode(&mut g, t).unwrap().regions;
        let _ = enc.encode(&mut g, s2).unwrap();
        assert_eq!(g.data(a), g.data(b));
    }
}
