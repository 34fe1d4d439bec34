use std::path::{Path, PathBuf};

use dampc_core::datagen::ExplorationConfig;
use dampc_core::diffusion::DiffusionConfig;
use dampc_core::evalharness::{EvalConfig, LsmConfig};
use dampc_core::nlp::OcpConfig;
use dampc_core::selection::SelectionConfig;
use dampc_core::ArmModel;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Input files. Relative paths resolve against the directory of the config
/// file, or the working directory without one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub diffusion: PathBuf,
    pub lsm: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "dataset.bin".into(),
            diffusion: "diffusion.bin".into(),
            lsm: "lsm.bin".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.dataset, &mut self.diffusion, &mut self.lsm] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arm: ArmModel,
    pub ocp: OcpConfig,
    pub exploration: ExplorationConfig,
    pub diffusion: DiffusionConfig,
    pub lsm: LsmConfig,
    pub selection: SelectionConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
    pub seed: u64,
}

impl RunConfig {
    /// Parses and validates a JSON config. Input paths come back resolved.
    pub fn from_json(text: &str, base: &Path) -> Result<Self, Failure> {
        let mut cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Failure::usage(format!("invalid config: {e}")))?;
        cfg.paths.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, or the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => {
                let mut cfg = RunConfig::default();
                cfg.paths.resolve(Path::new(""));
                cfg.validate()?;
                Ok(cfg)
            }
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Failure::usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                RunConfig::from_json(&text, p.parent().unwrap_or(Path::new("")))
            }
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.arm.validate()?;
        self.ocp.validate(self.arm.dof())?;
        self.exploration.validate()?;
        self.diffusion.validate()?;
        self.lsm.validate()?;
        self.selection.validate()?;
        self.eval.validate()?;
        Ok(())
    }
}
