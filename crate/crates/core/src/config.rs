//! Flat run configuration covering every module parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmesa::{default_t_c, DmesaParams};
use crate::geometry::LevelThresholds;
use crate::graph::GraphParams;
use crate::ingest::ScreeningParams;
use crate::mesa::{EnergyWeights, MesaParams};
use crate::pipeline::PipelineConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(rename = "T_s")]
    pub t_s: i64,
    #[serde(rename = "T_r")]
    pub t_r: f64,
    #[serde(rename = "TL")]
    pub tl: LevelThresholds,
    pub delta_l: f64,
    pub delta_h: f64,
    pub lambda: f64,
    #[serde(rename = "T_as")]
    pub t_as: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(rename = "T_Emax")]
    pub t_emax: f64,
    #[serde(rename = "T_Er")]
    pub t_er: f64,
    pub l_star: usize,
    #[serde(rename = "T_c")]
    pub t_c: f64,
    #[serde(rename = "S_EM")]
    pub s_em: usize,
    pub em_samples: usize,
    pub r_a: f64,
    pub pm_input_side: usize,
    pub occupancy_ratio: f64,
    pub phi: f64,
    pub ransac_iters: usize,
    pub global_collection: bool,
    pub abn_pruning: bool,
    pub bidirectional: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = ScreeningParams::default();
        let g = GraphParams::default();
        let m = MesaParams::default();
        let d = DmesaParams::default();
        let p = PipelineConfig::default();
        Self {
            t_s: s.min_size,
            t_r: s.max_aspect,
            tl: g.thresholds,
            delta_l: g.delta_l,
            delta_h: g.delta_h,
            lambda: m.lambda,
            t_as: 0.05,
            mu: m.weights.mu,
            alpha: m.weights.alpha,
            beta: m.weights.beta,
            gamma: m.weights.gamma,
            t_emax: m.t_emax,
            t_er: m.t_er,
            l_star: m.source_level,
            t_c: default_t_c(),
            s_em: d.em_steps,
            em_samples: d.samples,
            r_a: p.r_a,
            pm_input_side: p.pm_input_side,
            occupancy_ratio: p.occupancy_ratio,
            phi: p.phi,
            ransac_iters: p.ransac_iters,
            global_collection: p.global_collection,
            abn_pruning: true,
            bidirectional: m.bidirectional,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let c: RunConfig = serde_json::from_str(s).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.t_s < 0 {
            return bad(format!("T_s must be non-negative, got {}", self.t_s));
        }
        if self.t_r < 1.0 {
            return bad(format!("T_r must be at least 1, got {}", self.t_r));
        }
        if !(0.0 <= self.delta_l && self.delta_l < self.delta_h && self.delta_h <= 1.0) {
            return bad(format!("need 0 <= delta_l < delta_h <= 1, got {} and {}", self.delta_l, self.delta_h));
        }
        if !(0.0..=1.0).contains(&self.t_as) {
            return bad(format!("T_as must be in [0, 1], got {}", self.t_as));
        }
        for (k, v) in [("lambda", self.lambda), ("mu", self.mu), ("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if v.is_nan() || v < 0.0 {
                return bad(format!("{k} must be non-negative, got {v}"));
            }
        }
        if self.mu <= 0.0 {
            return bad("mu must be positive".into());
        }
        if self.t_c.is_nan() || self.t_c <= 0.0 {
            return bad(format!("T_c must be positive, got {}", self.t_c));
        }
        if self.l_star >= self.tl.num_levels() {
            return bad(format!("l_star {} exceeds the {} levels of TL", self.l_star, self.tl.num_levels()));
        }
        self.pipeline().validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn screening(&self) -> ScreeningParams {
        ScreeningParams {
            min_size: self.t_s,
            max_aspect: self.t_r,
        }
    }

    pub fn graph(&self) -> GraphParams {
        GraphParams {
            thresholds: self.tl.clone(),
            delta_l: self.delta_l,
            delta_h: self.delta_h,
        }
    }

    pub fn mesa(&self) -> MesaParams {
        MesaParams {
            lambda: self.lambda,
            weights: EnergyWeights {
                mu: self.mu,
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
            },
            t_emax: self.t_emax,
            t_er: self.t_er,
            source_level: self.l_star,
            bidirectional: self.bidirectional,
        }
    }

    pub fn dmesa(&self) -> DmesaParams {
        DmesaParams {
            t_c: self.t_c,
            em_steps: self.s_em,
            samples: self.em_samples,
            seed: self.seed,
            ..DmesaParams::default()
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            r_a: self.r_a,
            pm_input_side: self.pm_input_side,
            occupancy_ratio: self.occupancy_ratio,
            phi: self.phi,
            ransac_iters: self.ransac_iters,
            seed: self.seed,
            global_collection: self.global_collection,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.mesa(), MesaParams::default());
        assert_eq!(c.t_as, 0.05);
    }

    #[test]
    fn keys_use_symbol_names() {
        let c = RunConfig::from_json(r#"{"T_as": 0.1, "T_Emax": 0.5, "TL": [100, 400, 1600], "l_star": 0, "phi": 2.0}"#).unwrap();
        assert_eq!(c.t_as, 0.1);
        assert_eq!(c.mesa().t_emax, 0.5);
        assert_eq!(c.graph().thresholds.num_levels(), 2);
        assert_eq!(c.pipeline().phi, 2.0);
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::from_json(r#"{"t_as": 0.1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"delta_l": 0.9, "delta_h": 0.5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"occupancy_ratio": 1.5}"#).is_err());
        assert!(RunConfig::from_json(r#"{"TL": [5, 3]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"r_a": 0}"#).is_err());
    }
}
