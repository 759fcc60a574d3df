//! Flat TOML configuration covering mapping, disambiguation and evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disambiguation::{DisambiguationConfig, HttpClientConfig};
use crate::eval::EvalConfig;
use crate::fusion::{AssociationConfig, FusionConfig};
use crate::map::OccupancyParams;
use crate::opinion::ClusteringParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub voxel_size: f64,
    pub max_range: f64,
    /// Defaults to four map voxels.
    pub coarse_voxel: Option<f64>,
    pub dbscan_eps_factor: f64,
    pub dbscan_min_pts: usize,

    pub p_hit: f64,
    pub p_miss: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub carve_free_space: bool,
    pub carve_stride: usize,

    pub tau_iou: f64,
    pub tau_ios: f64,
    pub refine_every: u64,

    pub entropy_threshold: f64,
    pub min_prob: f64,
    pub views_per_candidate: usize,
    /// Archive RGB crops of every semantic observation during `build`.
    pub archive_views: bool,

    pub endpoint: String,
    pub api_key_env: Option<String>,
    pub model: Option<String>,
    pub timeout_s: f64,

    pub iou_threshold: f64,
    pub classes: Option<Vec<String>>,
}

impl Default for Config {
    fn default() -> Self {
        let occ = OccupancyParams::default();
        Self {
            voxel_size: 0.02,
            max_range: 4.0,
            coarse_voxel: None,
            dbscan_eps_factor: 1.8,
            dbscan_min_pts: 4,
            p_hit: occ.p_hit,
            p_miss: occ.p_miss,
            l_min: occ.l_min,
            l_max: occ.l_max,
            carve_free_space: false,
            carve_stride: 8,
            tau_iou: 0.4,
            tau_ios: 0.7,
            refine_every: 30,
            entropy_threshold: 0.5,
            min_prob: 0.15,
            views_per_candidate: 3,
            archive_views: false,
            endpoint: String::new(),
            api_key_env: None,
            model: None,
            timeout_s: 60.0,
            iou_threshold: 0.5,
            classes: None,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return invalid(format!("voxel_size {}", self.voxel_size));
        }
        let o = self.occupancy();
        let prob = |p: f64| p > 0.0 && p < 1.0;
        if !(prob(o.p_hit) && prob(o.p_miss) && o.l_min < 0.0 && o.l_max > 0.0) {
            return invalid(format!("occupancy parameters {o:?}"));
        }
        if !(self.entropy_threshold >= 0.0) || !(0.0..=1.0).contains(&self.min_prob) || self.views_per_candidate == 0 {
            return invalid("disambiguation parameters out of range".into());
        }
        self.fusion().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.eval().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn occupancy(&self) -> OccupancyParams {
        OccupancyParams {
            p_hit: self.p_hit,
            p_miss: self.p_miss,
            l_min: self.l_min,
            l_max: self.l_max,
        }
    }

    pub fn clustering(&self) -> ClusteringParams {
        let coarse = self.coarse_voxel.unwrap_or(4.0 * self.voxel_size);
        ClusteringParams {
            coarse_voxel: coarse,
            eps: self.dbscan_eps_factor * coarse,
            min_pts: self.dbscan_min_pts,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            voxel_size: self.voxel_size,
            occupancy: self.occupancy(),
            clustering: self.clustering(),
            max_range: self.max_range,
            association: AssociationConfig {
                tau_iou: self.tau_iou,
                tau_ios: self.tau_ios,
                refine_every: self.refine_every,
            },
            carve_free_space: self.carve_free_space,
            carve_stride: self.carve_stride,
        }
    }

    pub fn disambiguation(&self) -> DisambiguationConfig {
        DisambiguationConfig {
            min_prob: self.min_prob,
            views_per_candidate: self.views_per_candidate,
        }
    }

    pub fn http_client(&self) -> HttpClientConfig {
        HttpClientConfig {
            endpoint: self.endpoint.clone(),
            api_key_env: self.api_key_env.clone(),
            model: self.model.clone(),
            timeout_s: self.timeout_s,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            iou_threshold: self.iou_threshold,
            classes: self.classes.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        let f = c.fusion();
        assert_eq!(f.association, AssociationConfig::default());
        assert!((f.clustering.coarse_voxel - 0.08).abs() < 1e-15);
        assert!((f.clustering.eps - 0.144).abs() < 1e-12);
        assert_eq!(c.disambiguation(), DisambiguationConfig::default());
        assert_eq!(c.eval(), EvalConfig::default());
    }

    #[test]
    fn overrides_and_round_trip() {
        let c = Config::from_toml("voxel_size = 0.05\nrefine_every = 10\nmodel = \"m\"\n").unwrap();
        assert_eq!(c.voxel_size, 0.05);
        assert_eq!(c.fusion().association.refine_every, 10);
        assert!((c.clustering().coarse_voxel - 0.2).abs() < 1e-15);
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Config::from_toml("tau_iou = 0.0").is_err());
        assert!(Config::from_toml("refine_every = 0").is_err());
        assert!(Config::from_toml("voxel = 0.1").is_err());
        assert!(Config::from_toml("p_hit = 1.5").is_err());
        assert!(Config::from_toml("iou_threshold = 2.0").is_err());
    }
}
