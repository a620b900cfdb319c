//! Service configuration: device model, backend, data directory and port.

use std::fmt;
use std::net::{IpAddr, Ipv4Addr};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use deltapad_core::config::{ConfigError, DeviceModel};
use deltapad_core::patterns::PatternLayout;
use deltapad_core::render::RenderConfig;
use serde::{Deserialize, Serialize};

pub const ENV_PORT: &str = "DELTAPAD_PORT";
pub const ENV_DATA_DIR: &str = "DELTAPAD_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DeviceBackend {
    Sim,
    Serial(PathBuf),
}

impl FromStr for DeviceBackend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sim" => Ok(DeviceBackend::Sim),
            _ => match s.strip_prefix("serial:") {
                Some(p) if !p.is_empty() => Ok(DeviceBackend::Serial(PathBuf::from(p))),
                _ => Err(format!("unknown device `{s}` (expected sim or serial:<path>)")),
            },
        }
    }
}

impl TryFrom<String> for DeviceBackend {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<DeviceBackend> for String {
    fn from(d: DeviceBackend) -> String {
        d.to_string()
    }
}

impl fmt::Display for DeviceBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeviceBackend::Sim => f.write_str("sim"),
            DeviceBackend::Serial(p) => write!(f, "serial:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Device model JSON (geometry, workspace, layout, render, calibration).
    pub device_model: Option<PathBuf>,
    /// Overrides applied on top of the device model.
    pub render: Option<RenderConfig>,
    pub layout: Option<PatternLayout>,
    pub device: DeviceBackend,
    pub data_dir: PathBuf,
    pub bind: IpAddr,
    /// 0 binds any free port.
    pub port: u16,
    /// Pace playback at the tick rate. Off plays trajectories as fast as the
    /// link allows, which only makes sense for the simulator.
    pub realtime: bool,
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            device_model: None,
            render: None,
            layout: None,
            device: DeviceBackend::Sim,
            data_dir: PathBuf::from("data"),
            bind: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 8080,
            realtime: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AppConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ConfigError),
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, AppConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| AppConfigError::Io { path: path.into(), source })?;
        serde_json::from_str(&text).map_err(|source| AppConfigError::Parse { path: path.into(), source })
    }

    /// Apply `DELTAPAD_PORT` and `DELTAPAD_DATA_DIR` from `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), AppConfigError> {
        if let Some(p) = lookup(ENV_PORT) {
            self.port = p
                .trim()
                .parse()
                .map_err(|_| AppConfigError::Invalid(format!("{ENV_PORT}={p} is not a port number")))?;
        }
        if let Some(d) = lookup(ENV_DATA_DIR) {
            self.data_dir = PathBuf::from(d);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), AppConfigError> {
        if let Some(p) = &self.device_model {
            if !p.is_file() {
                return Err(AppConfigError::Invalid(format!("device model {} does not exist", p.display())));
            }
        }
        if let DeviceBackend::Serial(p) = &self.device {
            if !p.exists() {
                return Err(AppConfigError::Invalid(format!("serial port {} does not exist", p.display())));
            }
        }
        if self.data_dir.as_os_str().is_empty() {
            return Err(AppConfigError::Invalid("data_dir is empty".into()));
        }
        Ok(())
    }

    /// The device model with overrides applied and checked.
    pub fn model(&self) -> Result<DeviceModel, AppConfigError> {
        let mut m = match &self.device_model {
            Some(p) => DeviceModel::load(p)?,
            None => DeviceModel::default(),
        };
        if let Some(r) = &self.render {
            m.render = *r;
        }
        if let Some(l) = &self.layout {
            m.layout = *l;
        }
        m.validate()?;
        Ok(m)
    }
}
