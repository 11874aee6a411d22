//! Patch-token transformer encoder.
//!
//! An image is cut into non-overlapping patches by a strided convolution,
//! a learned position table is added, and the tokens pass through pre-norm
//! self-attention blocks. The token sequence is folded back into a spatial
//! [`FeatureMap`] so the correlation head can slide one map over another.
//! There is no class token.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Element, Result as TResult, Tensor, TensorError};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("input side {side} is not divisible by patch size {patch}")]
    Patch { side: usize, patch: usize },
    #[error("embedding width {dim} is not divisible by {heads} heads")]
    Heads { dim: usize, heads: usize },
    #[error("invalid encoder setting: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub input_side: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 || self.input_side == 0 {
            return Err(ConfigError::Invalid("sizes must be positive".into()));
        }
        if self.input_side % self.patch_size != 0 {
            return Err(ConfigError::Patch {
                side: self.input_side,
                patch: self.patch_size,
            });
        }
        if self.embed_dim % self.heads != 0 {
            return Err(ConfigError::Heads {
                dim: self.embed_dim,
                heads: self.heads,
            });
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(ConfigError::Invalid(format!("mlp_ratio {}", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_side / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Encoder output: `channels x grid_h x grid_w`.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Element = f32> {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub values: Tensor<T>,
}

impl<T: Element> FeatureMap<T> {
    /// Tokens in row-major grid order, `(grid_h * grid_w) x channels`.
    pub fn flatten(&self) -> TResult<Tensor<T>> {
        self.values
            .reshape(&[self.channels, self.grid_h * self.grid_w])?
            .transpose()
    }

    pub fn inverse_flatten(tokens: &Tensor<T>, grid_h: usize, grid_w: usize) -> TResult<Self> {
        let &[n, c] = tokens.shape() else {
            return Err(TensorError::Shape {
                op: "inverse_flatten",
                detail: format!("tokens must be N x C, got {:?}", tokens.shape()),
            });
        };
        if n != grid_h * grid_w {
            return Err(TensorError::Shape {
                op: "inverse_flatten",
                detail: format!("{n} tokens for a {grid_h}x{grid_w} grid"),
            });
        }
        Ok(FeatureMap {
            grid_h,
            grid_w,
            channels: c,
            values: tokens.transpose()?.reshape(&[c, grid_h, grid_w])?,
        })
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    norm_g: ParamId,
    norm_b: ParamId,
}

impl Encoder {
    pub fn init<T: Element>(
        config: EncoderConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let (d, p, h) = (config.embed_dim, config.patch_size, config.hidden());
        let mut param = |name: &str, shape: &[usize], init: Init| {
            store.init(format!("{prefix}.{name}"), shape, init, rng)
        };
        let tn = Init::TruncNormal(INIT_STD);
        let patch_w = param("patch_embed.weight", &[d, 3, p, p], tn);
        let patch_b = param("patch_embed.bias", &[d], Init::Zeros);
        let pos = param("pos_embed", &[config.tokens(), d], tn);
        let blocks = (0..config.depth)
            .map(|i| {
                let mut bp = |name: &str, shape: &[usize], init: Init| {
                    param(&format!("blocks.{i}.{name}"), shape, init)
                };
                Block {
                    ln1_g: bp("norm1.weight", &[d], Init::Ones),
                    ln1_b: bp("norm1.bias", &[d], Init::Zeros),
                    qkv_w: bp("attn.qkv.weight", &[d, 3 * d], tn),
                    qkv_b: bp("attn.qkv.bias", &[3 * d], Init::Zeros),
                    proj_w: bp("attn.proj.weight", &[d, d], tn),
                    proj_b: bp("attn.proj.bias", &[d], Init::Zeros),
                    ln2_g: bp("norm2.weight", &[d], Init::Ones),
                    ln2_b: bp("norm2.bias", &[d], Init::Zeros),
                    fc1_w: bp("mlp.fc1.weight", &[d, h], tn),
                    fc1_b: bp("mlp.fc1.bias", &[h], Init::Zeros),
                    fc2_w: bp("mlp.fc2.weight", &[h, d], tn),
                    fc2_b: bp("mlp.fc2.bias", &[d], Init::Zeros),
                }
            })
            .collect();
        let norm_g = param("norm.weight", &[d], Init::Ones);
        let norm_b = param("norm.bias", &[d], Init::Zeros);
        Ok(Encoder {
            config,
            patch_w,
            patch_b,
            pos,
            blocks,
            norm_g,
            norm_b,
        })
    }

    /// A second encoder reusing every weight of `self` except the position
    /// table, which gets the token count of `input_side`.
    pub fn sibling<T: Element>(
        &self,
        input_side: usize,
        pos_name: &str,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self, ConfigError> {
        let config = EncoderConfig {
            input_side,
            ..self.config.clone()
        };
        config.validate()?;
        let pos = store.init(pos_name, &[config.tokens(), config.embed_dim], Init::TruncNormal(INIT_STD), rng);
        Ok(Encoder {
            config,
            pos,
            ..self.clone()
        })
    }

    /// Ids of every parameter this encoder reads.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.pos];
        for b in &self.blocks {
            ids.extend([
                b.ln1_g, b.ln1_b, b.qkv_w, b.qkv_b, b.proj_w, b.proj_b, b.ln2_g, b.ln2_b, b.fc1_w, b.fc1_b,
                b.fc2_w, b.fc2_b,
            ]);
        }
        ids.extend([self.norm_g, self.norm_b]);
        ids
    }

    /// Image `3 x S x S` (normalized) to a `grid x grid x embed_dim` map.
    pub fn encode<T: Element>(&self, p: &Bound<T>, image: &Tensor<T>) -> TResult<FeatureMap<T>> {
        let cfg = &self.config;
        match image.shape() {
            &[3, h, w] if h == cfg.input_side && w == cfg.input_side => {}
            other => {
                return Err(TensorError::Shape {
                    op: "encode",
                    detail: format!("image {other:?}, encoder expects 3x{0}x{0}", cfg.input_side),
                })
            }
        }
        let tokens = self.embed(p, image)?;
        let mut x = tokens;
        for block in &self.blocks {
            x = self.block(p, block, &x)?;
        }
        let x = x.layernorm(&p[self.norm_g], &p[self.norm_b], LN_EPS)?;
        FeatureMap::inverse_flatten(&x, cfg.grid(), cfg.grid())
    }

    /// Patch embedding plus position table, `tokens x embed_dim`.
    pub fn embed<T: Element>(&self, p: &Bound<T>, image: &Tensor<T>) -> TResult<Tensor<T>> {
        let cfg = &self.config;
        let g = cfg.grid();
        let patches = image.conv2d(&p[self.patch_w], cfg.patch_size, 0, 1)?;
        let fm = FeatureMap {
            grid_h: g,
            grid_w: g,
            channels: cfg.embed_dim,
            values: patches,
        };
        fm.flatten()?.add_bias(&p[self.patch_b])?.add(&p[self.pos])
    }

    fn block<T: Element>(&self, p: &Bound<T>, b: &Block, x: &Tensor<T>) -> TResult<Tensor<T>> {
        let d = self.config.embed_dim;
        let heads = self.config.heads;
        let hd = d / heads;
        let h = x.layernorm(&p[b.ln1_g], &p[b.ln1_b], LN_EPS)?;
        let qkv = h.matmul(&p[b.qkv_w])?.add_bias(&p[b.qkv_b])?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let q = qkv.narrow_last(head * hd, hd)?;
            let k = qkv.narrow_last(d + head * hd, hd)?;
            let v = qkv.narrow_last(2 * d + head * hd, hd)?;
            let attn = q.matmul(&k.transpose()?)?.scale(scale).softmax_last();
            outs.push(attn.matmul(&v)?);
        }
        let attn_out = Tensor::concat_last(&outs)?
            .matmul(&p[b.proj_w])?
            .add_bias(&p[b.proj_b])?;
        let x = x.add(&attn_out)?;
        let h = x.layernorm(&p[b.ln2_g], &p[b.ln2_b], LN_EPS)?;
        let mlp = h
            .matmul(&p[b.fc1_w])?
            .add_bias(&p[b.fc1_b])?
            .gelu()
            .matmul(&p[b.fc2_w])?
            .add_bias(&p[b.fc2_b])?;
        x.add(&mlp)
    }
}

/// Query and search encoders. With `shared`, both read the same weights
/// and differ only in their position tables.
#[derive(Debug, Clone)]
pub struct TwinEncoder {
    pub query: Encoder,
    pub search: Encoder,
    pub shared: bool,
}

/// Builds the two encoders. `base` supplies everything but the input side.
pub fn make_twin<T: Element>(
    base: &EncoderConfig,
    query_side: usize,
    search_side: usize,
    share: bool,
    store: &mut ParamStore<T>,
    rng: &mut Rng,
) -> Result<TwinEncoder, ConfigError> {
    let qcfg = EncoderConfig {
        input_side: query_side,
        ..base.clone()
    };
    if share {
        let query = Encoder::init(qcfg, "encoder", store, rng)?;
        let search = query.sibling(search_side, "encoder.search_pos_embed", store, rng)?;
        Ok(TwinEncoder { query, search, shared: true })
    } else {
        let scfg = EncoderConfig {
            input_side: search_side,
            ..base.clone()
        };
        let query = Encoder::init(qcfg, "query", store, rng)?;
        let search = Encoder::init(scfg, "search", store, rng)?;
        Ok(TwinEncoder { query, search, shared: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    fn cfg(patch: usize, dim: usize, depth: usize, heads: usize, side: usize) -> EncoderConfig {
        EncoderConfig {
            patch_size: patch,
            embed_dim: dim,
            depth,
            heads,
            mlp_ratio: 4.0,
            input_side: side,
        }
    }

    fn image(side: usize, seed: u64) -> Tensor<f32> {
        use rand::Rng as _;
        let mut r = rng(seed);
        Tensor::new(&[3, side, side], (0..3 * side * side).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn desk_shape() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::init(cfg(8, 64, 4, 4, 64), "q", &mut store, &mut rng(0)).unwrap();
        let fm = enc.encode(&store.bind(false), &image(64, 1)).unwrap();
        assert_eq!((fm.grid_h, fm.grid_w, fm.channels), (8, 8, 64));
        assert_eq!(fm.values.shape(), &[64, 8, 8]);
        assert!(fm.values.all_finite());
    }

    #[test]
    fn token_counts_follow_patch_grid() {
        assert_eq!(cfg(16, 384, 12, 6, 112).tokens(), 49);
        assert_eq!(cfg(16, 384, 12, 6, 400).tokens(), 625);
    }

    #[test]
    fn rejects_bad_configs() {
        assert_eq!(cfg(16, 384, 1, 6, 100).validate(), Err(ConfigError::Patch { side: 100, patch: 16 }));
        assert_eq!(cfg(16, 384, 1, 5, 112).validate(), Err(ConfigError::Heads { dim: 384, heads: 5 }));
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::init(cfg(8, 16, 1, 2, 32), "q", &mut store, &mut rng(0)).unwrap();
        assert!(enc.encode(&store.bind(false), &image(40, 1)).is_err());
    }

    #[test]
    fn flatten_roundtrip_is_exact() {
        let vals: Vec<f32> = (0..5 * 3 * 4).map(|v| v as f32 * 0.37 - 3.0).collect();
        let fm = FeatureMap {
            grid_h: 3,
            grid_w: 4,
            channels: 5,
            values: Tensor::new(&[5, 3, 4], vals.clone()).unwrap(),
        };
        let tokens = fm.flatten().unwrap();
        assert_eq!(tokens.shape(), &[12, 5]);
        // token (r, c) holds the channel vector at grid cell (r, c)
        assert_eq!(tokens.data()[(1 * 4 + 2) * 5 + 3], vals[3 * 12 + 1 * 4 + 2]);
        let back = FeatureMap::inverse_flatten(&tokens, 3, 4).unwrap();
        assert_eq!(back.values.to_vec(), vals);
    }

    #[test]
    fn twin_parameter_counts() {
        let base = cfg(8, 32, 2, 4, 64);
        let mut single = ParamStore::<f32>::new();
        Encoder::init(base.clone(), "e", &mut single, &mut rng(0)).unwrap();
        let one = single.num_values();

        let mut sep = ParamStore::<f32>::new();
        let t = make_twin(&base, 64, 160, false, &mut sep, &mut rng(0)).unwrap();
        assert!(!t.shared);
        let pos_delta = (400 - 64) * 32;
        assert_eq!(sep.num_values(), 2 * one + pos_delta);

        let mut shared = ParamStore::<f32>::new();
        let t = make_twin(&base, 64, 160, true, &mut shared, &mut rng(0)).unwrap();
        assert!(t.shared);
        assert_eq!(shared.num_values(), one + 400 * 32);
        let q: std::collections::HashSet<_> = t.query.param_ids().into_iter().collect();
        let s: std::collections::HashSet<_> = t.search.param_ids().into_iter().collect();
        assert_eq!(q.intersection(&s).count(), q.len() - 1);
    }

    #[test]
    fn batch_order_does_not_leak() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::init(cfg(8, 32, 2, 4, 32), "q", &mut store, &mut rng(5)).unwrap();
        let p = store.bind(false);
        let (a, b) = (image(32, 1), image(32, 2));
        let forward: Vec<_> = [&a, &b].iter().map(|x| enc.encode(&p, x).unwrap().values.to_vec()).collect();
        let reversed: Vec<_> = [&b, &a].iter().map(|x| enc.encode(&p, x).unwrap().values.to_vec()).collect();
        assert_eq!(forward[0], reversed[1]);
        assert_eq!(forward[1], reversed[0]);
    }

    #[test]
    fn zeroed_blocks_reduce_to_normalized_embedding() {
        let mut store = ParamStore::<f64>::new();
        let c = cfg(8, 16, 2, 2, 32);
        let enc = Encoder::init(c.clone(), "q", &mut store, &mut rng(9)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            if name.contains(".attn.") || name.contains(".mlp.") {
                store.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let img = image(32, 4);
        let img = Tensor::<f64>::new(&[3, 32, 32], img.data().iter().map(|&v| v as f64).collect()).unwrap();
        let out = enc.encode(&store.bind(false), &img).unwrap();

        // independent reference: explicit patch dot products + position, then row standardization
        let w = store.values(store.find("q.patch_embed.weight").unwrap());
        let pos = store.values(store.find("q.pos_embed").unwrap());
        let g = 4;
        for tok in 0..g * g {
            let (gy, gx) = (tok / g, tok % g);
            let mut row = vec![0.0; 16];
            for (ch, r) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for ci in 0..3 {
                    for ky in 0..8 {
                        for kx in 0..8 {
                            acc += w[((ch * 3 + ci) * 8 + ky) * 8 + kx]
                                * img.data()[(ci * 32 + gy * 8 + ky) * 32 + gx * 8 + kx];
                        }
                    }
                }
                *r = acc + pos[tok * 16 + ch];
            }
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            for (ch, v) in row.iter().enumerate() {
                let expect = (v - mean) / (var + LN_EPS).sqrt();
                let got = out.values.data()[ch * g * g + tok];
                assert!((expect - got).abs() < 1e-9, "token {tok} ch {ch}: {expect} vs {got}");
            }
        }
    }
}
