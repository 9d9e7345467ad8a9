//! Experiment configuration: one JSON file with a block per concern.

use std::path::{Path, PathBuf};

use hypermerton::analysis::CompareConfig;
use hypermerton::closed_policies::{baseline_rate, AgentKind};
use hypermerton::mpe_oracle::OracleConfig;
use hypermerton::problem::Problem;
use hypermerton::simulator::SimulationSpec;
use hypermerton::soph_solver::SolverConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentName {
    Constant,
    Precommitment,
    Naive,
    Sophisticated,
}

impl AgentName {
    pub fn label(self) -> &'static str {
        match self {
            AgentName::Constant => "constant",
            AgentName::Precommitment => "precommitment",
            AgentName::Naive => "naive",
            AgentName::Sophisticated => "sophisticated",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputBlock {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            directory: PathBuf::from("out"),
            formats: vec![Format::Json, Format::Csv],
        }
    }
}

/// Which policy `simulate` drives: a saved policy file, or one built from
/// the problem for `agent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateBlock {
    pub agent: AgentName,
    pub policy_file: Option<PathBuf>,
}

impl Default for SimulateBlock {
    fn default() -> Self {
        SimulateBlock {
            agent: AgentName::Sophisticated,
            policy_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Problem,
    #[serde(default = "all_agents")]
    pub agents: Vec<AgentName>,
    /// Rate of the constant-rate baseline; defaults to `r(0)`.
    #[serde(default)]
    pub constant_rate: Option<f64>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub oracle: Option<OracleConfig>,
    #[serde(default)]
    pub simulation: Option<SimulationSpec>,
    #[serde(default)]
    pub simulate: SimulateBlock,
    #[serde(default = "default_t_nodes")]
    pub report_nodes: usize,
    #[serde(default)]
    pub output: OutputBlock,
}

fn all_agents() -> Vec<AgentName> {
    vec![AgentName::Constant, AgentName::Precommitment, AgentName::Naive, AgentName::Sophisticated]
}

fn default_t_nodes() -> usize {
    101
}

/// A rejected configuration, with the config line when it can be located.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError {
            line: (e.line() > 0).then_some(e.line()),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|(field, message)| ConfigError {
            line: locate(text, &field),
            message,
        })?;
        Ok(cfg)
    }

    /// Checks every block before any computation; errors carry the field path.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let core = |e: hypermerton::Error| -> (String, String) {
            let field = match &e {
                hypermerton::Error::InvalidParameter { field, .. } => field.clone(),
                _ => String::new(),
            };
            (field, e.to_string())
        };
        self.problem.validate().map_err(core)?;
        self.solver.validate().map_err(core)?;
        if let Some(o) = &self.oracle {
            o.validate().map_err(core)?;
        }
        if let Some(s) = &self.simulation {
            s.validate().map_err(core)?;
        }
        if self.agents.is_empty() {
            return Err(("agents".into(), "invalid parameter `agents`: the agent list is empty".into()));
        }
        if let Some(r) = self.constant_rate {
            if !(r.is_finite() && r >= 0.0) {
                return Err(("constant_rate".into(), format!("invalid parameter `constant_rate`: must be >= 0, got {r}")));
            }
        }
        if self.report_nodes < 2 {
            return Err(("report_nodes".into(), "invalid parameter `report_nodes`: at least two nodes are required".into()));
        }
        Ok(())
    }

    pub fn agent_kind(&self, name: AgentName) -> AgentKind {
        match name {
            AgentName::Constant => AgentKind::ConstantRate(self.constant_rate.unwrap_or_else(|| baseline_rate(&self.problem.discount))),
            AgentName::Precommitment => AgentKind::PreCommitment,
            AgentName::Naive => AgentKind::Naive,
            AgentName::Sophisticated => AgentKind::Sophisticated,
        }
    }

    pub fn compare_config(&self) -> CompareConfig {
        CompareConfig {
            t_nodes: self.report_nodes,
            solver: self.solver,
            oracle: self.oracle.clone(),
        }
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}

/// First line holding the last segment of `field` as a JSON key.
fn locate(text: &str, field: &str) -> Option<usize> {
    let key = field.rsplit('.').next().filter(|k| !k.is_empty())?;
    let quoted = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&quoted)).map(|i| i + 1)
}
