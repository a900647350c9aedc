//! Encoder configuration: defaults, a TOML config file, and CLI overrides —
//! in that precedence order. The effective values are echoed into the run
//! manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use voxvid_core::math::{Aabb, Vec3};
use voxvid_core::TrainConfig;

use crate::dataset::MultiViewDataset;
use crate::error::{Result, VoxvidError};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeConfig {
    pub lambda: f64,
    pub alpha: f64,
    pub group_size: usize,
    pub iters_i: usize,
    pub iters_p: usize,
    pub lr_grids: f64,
    pub lr_mlps: f64,
    pub lr_entropy: f64,
    pub lr_qsteps: f64,
    pub ray_batch: usize,
    pub rate_batch: usize,
    pub seed: u64,
    /// Coefficient grid is `grid_dim`^3; basis grids halve per scale.
    pub grid_dim: usize,
    pub basis_scales: usize,
    pub channels: usize,
    pub q_init: f64,
    pub adaptive_q: bool,
    pub occupancy_threshold: f64,
    pub step_divisor: f64,
    pub occupancy_warmup: usize,
    pub occupancy_refresh: usize,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        EncodeConfig {
            lambda: t.lambda,
            alpha: t.alpha,
            group_size: t.group_size,
            iters_i: t.iters_i,
            iters_p: t.iters_p,
            lr_grids: t.lr_grids,
            lr_mlps: t.lr_mlps,
            lr_entropy: t.lr_entropy,
            lr_qsteps: t.lr_qsteps,
            ray_batch: t.ray_batch,
            rate_batch: t.rate_batch,
            seed: t.seed,
            grid_dim: 32,
            basis_scales: 3,
            channels: t.channels,
            q_init: t.q_init,
            adaptive_q: t.adaptive_q,
            occupancy_threshold: t.occupancy_threshold,
            step_divisor: t.step_divisor,
            occupancy_warmup: t.occupancy_warmup,
            occupancy_refresh: t.occupancy_refresh,
        }
    }
}

/// CLI flag overrides; `None` keeps the file/default value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub group_size: Option<usize>,
    pub iters_i: Option<usize>,
    pub iters_p: Option<usize>,
    pub seed: Option<u64>,
    pub grid_dim: Option<usize>,
    pub adaptive_q: Option<bool>,
}

impl EncodeConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VoxvidError::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| VoxvidError::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.lambda {
            self.lambda = v;
        }
        if let Some(v) = o.alpha {
            self.alpha = v;
        }
        if let Some(v) = o.group_size {
            self.group_size = v;
        }
        if let Some(v) = o.iters_i {
            self.iters_i = v;
        }
        if let Some(v) = o.iters_p {
            self.iters_p = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.grid_dim {
            self.grid_dim = v;
        }
        if let Some(v) = o.adaptive_q {
            self.adaptive_q = v;
        }
    }

    /// Grid dims per scale: the coefficient dimension halved per basis
    /// scale, never below 2.
    pub fn basis_dims(&self) -> Vec<[usize; 3]> {
        (0..self.basis_scales)
            .map(|s| {
                let d = (self.grid_dim >> s).max(2);
                [d; 3]
            })
            .collect()
    }

    /// Bind the config to a dataset's geometry.
    pub fn train_config(&self, dataset: &MultiViewDataset) -> Result<TrainConfig> {
        let aabb = dataset.aabb();
        let cfg = TrainConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            group_size: self.group_size,
            iters_i: self.iters_i,
            iters_p: self.iters_p,
            lr_grids: self.lr_grids,
            lr_mlps: self.lr_mlps,
            lr_entropy: self.lr_entropy,
            lr_qsteps: self.lr_qsteps,
            ray_batch: self.ray_batch,
            rate_batch: self.rate_batch,
            seed: self.seed,
            coeff_dims: [self.grid_dim; 3],
            basis_dims: self.basis_dims(),
            channels: self.channels,
            aabb: Aabb::new(
                Vec3::new(aabb.min.x, aabb.min.y, aabb.min.z),
                Vec3::new(aabb.max.x, aabb.max.y, aabb.max.z),
            ),
            background: dataset.manifest.background,
            q_init: self.q_init,
            adaptive_q: self.adaptive_q,
            occupancy_dims: [self.grid_dim; 3],
            occupancy_threshold: self.occupancy_threshold,
            step_divisor: self.step_divisor,
            occupancy_warmup: self.occupancy_warmup,
            occupancy_refresh: self.occupancy_refresh,
        };
        cfg.validate().map_err(VoxvidError::Core)?;
        Ok(cfg)
    }

    pub fn echo_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
