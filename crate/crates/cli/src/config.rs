//! Run configuration: a JSON file with one section per module, plus
//! `--set section.key=value` overrides applied before parsing so overrides go
//! through the same unknown-key and range checks as the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use texmesh::metrics::{ChamferReduction, DEFAULT_SAMPLES};
use texmesh::pipeline::{FitConfig, ToyGanConfig};
use texmesh::shading::SgLobe;
use texmesh::Vec3;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Cells per axis for extraction and grid statistics.
    pub res: u32,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { res: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Surface points sampled per mesh.
    pub samples: usize,
    pub reduction: ChamferReduction,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            reduction: ChamferReduction::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadingSection {
    /// SG lobes used by `render`.
    pub lights: Vec<SgLobe>,
    pub roughness: f64,
    pub metallic: f64,
    /// Lobe count, iterations and initial step for `fit-env`.
    pub env_lobes: usize,
    pub env_steps: usize,
    pub env_step_size: f64,
}

impl Default for ShadingSection {
    fn default() -> Self {
        Self {
            lights: vec![
                SgLobe {
                    axis: Vec3::new(0.4, 0.8, 0.45).normalize(),
                    sharpness: 6.0,
                    amplitude: [2.5, 2.4, 2.2],
                },
                SgLobe {
                    axis: Vec3::new(0.0, 1.0, 0.0),
                    sharpness: 0.5,
                    amplitude: [0.25, 0.3, 0.35],
                },
            ],
            roughness: 0.5,
            metallic: 0.0,
            env_lobes: 8,
            env_steps: 300,
            env_step_size: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridSection,
    pub fit: FitConfig,
    pub gan: ToyGanConfig,
    pub metrics: MetricsSection,
    pub shading: ShadingSection,
}

impl RunConfig {
    /// Parse `file` (if any), apply overrides, then range-check everything.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: texmesh::Error| CliError::config(e.to_string());
        if self.grid.res == 0 || self.grid.res > 256 {
            return Err(CliError::config(format!("grid.res must be in 1..=256, got {}", self.grid.res)));
        }
        self.fit.validate().map_err(cfg_err)?;
        self.gan.validate().map_err(cfg_err)?;
        if self.metrics.samples == 0 {
            return Err(CliError::config("metrics.samples must be positive"));
        }
        let s = &self.shading;
        for (i, l) in s.lights.iter().enumerate() {
            l.validate().map_err(|e| CliError::config(format!("shading.lights[{i}]: {e}")))?;
        }
        for (k, v) in [("shading.roughness", s.roughness), ("shading.metallic", s.metallic)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::config(format!("{k} must be in [0, 1], got {v}")));
            }
        }
        if s.env_lobes == 0 {
            return Err(CliError::config("shading.env_lobes must be positive"));
        }
        if !(s.env_step_size > 0.0 && s.env_step_size.is_finite()) {
            return Err(CliError::config("shading.env_step_size must be positive"));
        }
        Ok(())
    }

    /// Route a global `--seed` to every seeded section.
    pub fn set_seed(&mut self, seed: u64) {
        self.fit.seed = seed;
        self.gan.seed = seed;
    }
}

/// `a.b.c=value`; the value is read as JSON and falls back to a plain string.
fn apply_override(root: &mut Value, arg: &str) -> Result<()> {
    let (path, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override {arg:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::config(format!("bad override key {path:?}")));
    }
    let mut node = root;
    for k in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("override {path}: {k} is not a section")))?;
        node = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| CliError::config(format!("override {path}: parent is not a section")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(json: &str, sets: &[&str]) -> Result<RunConfig> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, json).unwrap();
        RunConfig::load(Some(&p), &sets.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(load(&text, &[]).unwrap(), c);
    }

    #[test]
    fn overrides_apply() {
        let c = load(r#"{"fit": {"steps": 10}}"#, &["fit.views=8", "metrics.reduction=sum", "grid.res=12"]).unwrap();
        assert_eq!((c.fit.steps, c.fit.views, c.grid.res), (10, 8, 12));
        assert_eq!(c.metrics.reduction, ChamferReduction::Sum);
    }

    #[test]
    fn rejections_name_the_key() {
        let msg = |r: Result<RunConfig>| match r {
            Err(e @ CliError::Config(_)) => e.to_string(),
            other => panic!("expected config error, got {other:?}"),
        };
        assert!(msg(load(r#"{"fit": {"stepz": 1}}"#, &[])).contains("stepz"));
        assert!(msg(load(r#"{"extra": {}}"#, &[])).contains("extra"));
        assert!(msg(load("{}", &["fit.views=2"])).contains("fit.views"));
        assert!(msg(load("{}", &["gan.r1_weight=-1"])).contains("gan.r1_weight"));
        assert!(msg(load("{}", &["shading.roughness=2"])).contains("shading.roughness"));
        assert!(msg(load("{}", &["grid.res=0"])).contains("grid.res"));
        assert!(msg(load("{}", &["metrics.reduction=median"])).contains("median"));
        assert!(msg(load("{not json", &[])).contains("c.json"));
        assert!(msg(load("{}", &["novalue"])).contains("novalue"));
    }
}
