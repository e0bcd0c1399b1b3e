use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use surgisim::envs::{TaskConfig, TaskId};
use surgisim::physics::GraspMode;
use surgisim_rl::TrainConfig;

use crate::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of a command invocation, written before the command does any work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub task: Option<TaskId>,
    pub config_path: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub grasp_mode: Option<GraspMode>,
    pub git_describe: String,
    pub output_dir: PathBuf,
    pub version: String,
    /// Full argument list; `surgisim rerun <dir>` replays it.
    pub args: Vec<String>,
    /// Resolved environment configuration.
    pub task_config: Option<TaskConfig>,
    /// Resolved training configuration (first seed) for training runs.
    pub train_config: Option<TrainConfig>,
}

impl RunManifest {
    pub fn new(command: &str, output_dir: &Path, args: &[String]) -> Self {
        Self {
            command: command.into(),
            task: None,
            config_path: None,
            seeds: Vec::new(),
            grasp_mode: None,
            git_describe: git_describe(),
            output_dir: output_dir.to_path_buf(),
            version: env!("CARGO_PKG_VERSION").into(),
            args: args.to_vec(),
            task_config: None,
            train_config: None,
        }
    }

    pub fn with_task(mut self, config: &TaskConfig) -> Self {
        self.task = Some(config.task);
        self.grasp_mode = Some(config.grasp_mode);
        self.task_config = Some(config.clone());
        self
    }

    /// Creates the output directory and writes `manifest.json` into it.
    pub fn write(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir)?;
        let path = self.output_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| crate::CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| crate::CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// `git describe` of the working directory, or "unknown" outside a checkout.
pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
