//! Hardware description loaded from a JSON file.
//!
//! Every section is optional; missing sections take the shipped defaults and
//! the pattern layout follows the workspace unless given explicitly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DeltaGeometry, WorkspaceSpec};
use crate::kinematics::{workspace_report, WorkspaceReport};
use crate::patterns::PatternLayout;
use crate::protocol::ServoCalibration;
use crate::render::RenderConfig;
use crate::sim::FingerPadModel;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoModel {
    /// deg/s
    pub slew_limit: f64,
    pub latency_ticks: usize,
}

impl Default for ServoModel {
    fn default() -> Self {
        Self { slew_limit: 600.0, latency_ticks: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceModel {
    pub geometry: DeltaGeometry,
    pub workspace: WorkspaceSpec,
    pub layout: PatternLayout,
    pub render: RenderConfig,
    pub calibration: ServoCalibration,
    pub servo: ServoModel,
    pub friction_mu: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceFile {
    geometry: Option<DeltaGeometry>,
    workspace: Option<WorkspaceSpec>,
    layout: Option<PatternLayout>,
    render: Option<RenderConfig>,
    calibration: Option<ServoCalibration>,
    servo: Option<ServoModel>,
    friction_mu: Option<f64>,
}

impl Default for DeviceModel {
    fn default() -> Self {
        let workspace = WorkspaceSpec::default();
        Self {
            geometry: DeltaGeometry::default(),
            workspace,
            layout: PatternLayout::for_workspace(&workspace),
            render: RenderConfig::default(),
            calibration: ServoCalibration::default(),
            servo: ServoModel::default(),
            friction_mu: 0.5,
        }
    }
}

impl<'de> Deserialize<'de> for DeviceModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let f = DeviceFile::deserialize(d)?;
        let workspace = f.workspace.unwrap_or_default();
        Ok(Self {
            geometry: f.geometry.unwrap_or_default(),
            workspace,
            layout: f.layout.unwrap_or_else(|| PatternLayout::for_workspace(&workspace)),
            render: f.render.unwrap_or_default(),
            calibration: f.calibration.unwrap_or_default(),
            servo: f.servo.unwrap_or_default(),
            friction_mu: f.friction_mu.unwrap_or(0.5),
        })
    }
}

impl DeviceModel {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    /// Field-level validation; reachability is checked by [`Self::feasibility`].
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.geometry.validate().map_err(|e| invalid(e.to_string()))?;
        self.workspace.validate().map_err(|e| invalid(e.to_string()))?;
        self.layout.validate().map_err(|e| invalid(e.to_string()))?;
        self.render.validate().map_err(|e| invalid(e.to_string()))?;
        self.calibration.validate().map_err(|e| invalid(e.to_string()))?;
        self.pad().validate().map_err(invalid)?;
        if self.layout.contact_plane_z != self.workspace.contact_plane_z {
            return Err(invalid("layout and workspace disagree on contact_plane_z".into()));
        }
        Ok(())
    }

    pub fn feasibility(&self) -> Result<WorkspaceReport, ConfigError> {
        workspace_report(&self.geometry, &self.workspace).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn pad(&self) -> FingerPadModel {
        FingerPadModel {
            contact_plane_z: self.workspace.contact_plane_z,
            stiffness: self.render.pad_stiffness,
            friction_mu: self.friction_mu,
        }
    }
}
