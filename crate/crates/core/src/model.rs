//! The end-to-end localizer: two encoders feeding the correlation head.

use serde::{Deserialize, Serialize};

use crate::encoder::{make_twin, ConfigError, EncoderConfig, TwinEncoder};
use crate::fusion::{correlate, HeatGeometry, Heatmap, Prediction};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Element, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub query_side: usize,
    pub search_side: usize,
    pub share_weights: bool,
    pub padded_correlation: bool,
}

impl ModelConfig {
    /// 16 px patches, 384 wide, 12 blocks; 112 px query, 400 px search.
    pub fn paper() -> Self {
        ModelConfig {
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4.0,
            query_side: 112,
            search_side: 400,
            share_weights: false,
            padded_correlation: true,
        }
    }

    /// 8 px patches, 64 wide, 4 blocks; 56 px query, 200 px search. Same
    /// 7x7 / 25x25 token grids as [`ModelConfig::paper`].
    pub fn desk() -> Self {
        ModelConfig {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            query_side: 56,
            search_side: 200,
            share_weights: false,
            padded_correlation: true,
        }
    }

    pub fn encoder(&self, input_side: usize) -> EncoderConfig {
        EncoderConfig {
            patch_size: self.patch_size,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            input_side,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        self.encoder(self.query_side).validate()?;
        self.encoder(self.search_side).validate()?;
        if self.query_side > self.search_side {
            return Err(ConfigError::Invalid(format!(
                "query side {} exceeds search side {}",
                self.query_side, self.search_side
            )));
        }
        Ok(())
    }

    pub fn query_grid(&self) -> usize {
        self.query_side / self.patch_size
    }

    pub fn search_grid(&self) -> usize {
        self.search_side / self.patch_size
    }

    /// Geometry of the response grid over a `search_side` image.
    pub fn heat_geometry(&self) -> HeatGeometry {
        HeatGeometry::correlation(
            self.search_side as f64,
            self.search_grid(),
            self.query_grid(),
            self.padded_correlation,
        )
    }

    /// Fixed factor applied to the raw correlation so that responses start
    /// O(1) regardless of width and kernel area.
    pub fn response_scale(&self) -> f64 {
        let k = self.query_grid();
        1.0 / ((k * k * self.embed_dim) as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct FpiModel {
    pub config: ModelConfig,
    pub encoders: TwinEncoder,
}

impl FpiModel {
    /// Fresh weights in a new store; initialization order is fixed, so the
    /// seed determines every value.
    pub fn init<T: Element>(config: ModelConfig, rng: &mut Rng) -> std::result::Result<(Self, ParamStore<T>), ConfigError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoders = make_twin(
            &config.encoder(config.query_side),
            config.query_side,
            config.search_side,
            config.share_weights,
            &mut store,
            rng,
        )?;
        Ok((FpiModel { config, encoders }, store))
    }

    /// Query `3 x Sq x Sq` and search `3 x Ss x Ss` (both normalized) to the
    /// response heatmap. Differentiable with respect to every parameter.
    pub fn forward_pair<T: Element>(&self, p: &Bound<T>, query: &Tensor<T>, search: &Tensor<T>) -> Result<Heatmap<T>> {
        let q = self.encoders.query.encode(p, query)?;
        let s = self.encoders.search.encode(p, search)?;
        let grid = correlate(&s, &q, self.config.padded_correlation)?.scale(self.config.response_scale());
        Ok(Heatmap {
            grid,
            geometry: self.config.heat_geometry(),
            search_side_px: self.config.search_side,
        })
    }

    /// Inference: heatmap plus decoded prediction.
    pub fn predict<T: Element>(&self, p: &Bound<T>, query: &Tensor<T>, search: &Tensor<T>) -> Result<(Heatmap<T>, Prediction)> {
        let heat = self.forward_pair(p, query, search)?;
        let pred = heat.decode()?;
        Ok((heat, pred))
    }
}
