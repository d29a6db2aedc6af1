use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the hierarchical encoder.
///
/// Stage `s` has width `embed_dim · 2^s` and a token grid halved in each
/// extent relative to the previous stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Patch grid of the first stage, `[rows, cols]`.
    pub grid: [usize; 2],
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    /// Transformer blocks per stage.
    pub depths: Vec<usize>,
    /// Attention heads per stage.
    pub heads: Vec<usize>,
    pub mlp_ratio: f64,
    pub ln_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            grid: [16, 16],
            patch_size: 2,
            in_channels: 3,
            embed_dim: 48,
            depths: vec![2, 2],
            heads: vec![2, 4],
            mlp_ratio: 2.0,
            ln_eps: default_ln_eps(),
        }
    }
}

impl BackboneConfig {
    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn stage_grid(&self, stage: usize) -> (usize, usize) {
        (self.grid[0] >> stage, self.grid[1] >> stage)
    }

    pub fn stage_tokens(&self, stage: usize) -> usize {
        let (h, w) = self.stage_grid(stage);
        h * w
    }

    pub fn mlp_hidden(&self, stage: usize) -> usize {
        ((self.stage_dim(stage) as f64) * self.mlp_ratio).round() as usize
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid[0] * self.patch_size, self.grid[1] * self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.depths.len();
        if stages == 0 {
            return Err(Error::config("backbone.depths: at least one stage is required"));
        }
        if self.heads.len() != stages {
            return Err(Error::config(format!(
                "backbone.heads: expected {stages} entries (one per stage), got {}",
                self.heads.len()
            )));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(Error::config("backbone.depths: every stage needs at least one block"));
        }
        if self.patch_size == 0 || self.in_channels == 0 || self.embed_dim == 0 {
            return Err(Error::config("backbone: patch_size, in_channels and embed_dim must be positive"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config("backbone.mlp_ratio: must be positive"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("backbone.ln_eps: must be positive"));
        }
        for s in 0..stages {
            let heads = self.heads[s];
            if heads == 0 || self.stage_dim(s) % heads != 0 {
                return Err(Error::config(format!(
                    "backbone.heads: stage {s} width {} is not divisible by {heads} heads",
                    self.stage_dim(s)
                )));
            }
            if self.mlp_hidden(s) == 0 {
                return Err(Error::config("backbone.mlp_ratio: hidden width rounds to zero"));
            }
        }
        let scale = 1usize << (stages - 1);
        if self.grid[0] == 0 || self.grid[1] == 0 || self.grid[0] % scale != 0 || self.grid[1] % scale != 0 {
            return Err(Error::config(format!(
                "backbone.grid: {}x{} must be divisible by {scale} for {stages} stages",
                self.grid[0], self.grid[1]
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_shapes() {
        let c = BackboneConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stage_dim(1), 96);
        assert_eq!(c.stage_grid(1), (8, 8));
        assert_eq!(c.image_size(), (32, 32));
    }

    #[test]
    fn rejects_indivisible_heads_and_odd_grids() {
        let mut c = BackboneConfig { heads: vec![5, 4], ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().contains("heads"));
        c.heads = vec![2, 4];
        c.grid = [6, 5];
        assert!(c.validate().unwrap_err().to_string().contains("grid"));
    }
}
