//! Experiment configuration: a single strict JSON document.  Unknown keys
//! are rejected everywhere so a typo'd hyperparameter fails loudly instead
//! of silently running the defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use diffmpc::imitation::OptimizerSpec;
use serde::{Deserialize, Serialize};

/// Environment variable consulted for the output directory when the `--out`
/// flag is absent.
pub const OUT_DIR_VAR: &str = "DIFFMPC_OUT";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(std::io::Error),
    Train(diffmpc::imitation::ImitationError),
    Solver(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
            CliError::Train(e) => write!(f, "training error: {e}"),
            CliError::Solver(msg) => write!(f, "solver error: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<diffmpc::imitation::ImitationError> for CliError {
    fn from(e: diffmpc::imitation::ImitationError) -> Self {
        CliError::Train(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub env: EnvSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    /// Independently initialized runs for training experiments; timing
    /// repetitions for the backward benchmark.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    /// Forward-iteration caps for the backward benchmark.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caps: Option<Vec<usize>>,
    /// Finite-difference step for the gradcheck experiment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    LqrImitate,
    MpcImitate,
    SysidCompare,
    BenchBackward,
    Gradcheck,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::LqrImitate => "lqr-imitate",
            Experiment::MpcImitate => "mpc-imitate",
            Experiment::SysidCompare => "sysid-compare",
            Experiment::BenchBackward => "bench-backward",
            Experiment::Gradcheck => "gradcheck",
        }
    }
}

/// The tag sits inline (`"kind": "pendulum"`), while each variant body is a
/// standalone struct so `deny_unknown_fields` still applies to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSpec {
    Pendulum(PendulumSpec),
    Cartpole(CartpoleSpec),
    Lqr(LqrSpec),
}

impl EnvSpec {
    pub fn horizon(&self) -> usize {
        match self {
            EnvSpec::Pendulum(p) => p.horizon,
            EnvSpec::Cartpole(c) => c.horizon,
            EnvSpec::Lqr(l) => l.horizon,
        }
    }

    pub fn ctrl_bound(&self) -> f64 {
        match self {
            EnvSpec::Pendulum(p) => p.ctrl_bound,
            EnvSpec::Cartpole(c) => c.ctrl_bound,
            EnvSpec::Lqr(l) => l.ctrl_bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumSpec {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    #[serde(default)]
    pub damping: f64,
    #[serde(default)]
    pub wind: f64,
    pub horizon: usize,
    pub ctrl_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CartpoleSpec {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub gravity: f64,
    pub length: f64,
    pub horizon: usize,
    pub ctrl_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrSpec {
    pub n_state: usize,
    pub n_ctrl: usize,
    pub horizon: usize,
    pub ctrl_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub method: MethodSpec,
    pub optimizer: OptSpec,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_alternation_period")]
    pub alternation_period: usize,
}

fn default_alternation_period() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MethodSpec {
    #[serde(rename = "lqr.dx")]
    LqrDx,
    #[serde(rename = "mpc.dx")]
    MpcDx,
    #[serde(rename = "mpc.cost")]
    MpcCost,
    #[serde(rename = "mpc.cost.dx")]
    MpcCostDx,
    #[serde(rename = "sysid")]
    Sysid,
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::LqrDx => "lqr.dx",
            MethodSpec::MpcDx => "mpc.dx",
            MethodSpec::MpcCost => "mpc.cost",
            MethodSpec::MpcCostDx => "mpc.cost.dx",
            MethodSpec::Sysid => "sysid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum OptSpec {
    Rmsprop(RmspropSpec),
    Adam(AdamSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RmspropSpec {
    pub lr: f64,
    pub decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSpec {
    pub lr: f64,
}

impl OptSpec {
    pub fn to_optimizer(self) -> OptimizerSpec {
        match self {
            OptSpec::Rmsprop(r) => OptimizerSpec::RmsProp { lr: r.lr, decay: r.decay },
            OptSpec::Adam(a) => OptimizerSpec::Adam { lr: a.lr },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl DatasetSpec {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train_size, self.val_size, self.test_size)
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    validate(&cfg)?;
    Ok(cfg)
}

/// Semantic checks that the schema alone cannot express.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let err = |msg: String| Err(CliError::Config(msg));
    match &cfg.env {
        EnvSpec::Pendulum(p) => {
            if p.mass <= 0.0 || p.length <= 0.0 || p.gravity < 0.0 {
                return err("pendulum mass and length must be positive, gravity nonnegative".into());
            }
        }
        EnvSpec::Cartpole(c) => {
            if c.cart_mass <= 0.0 || c.pole_mass <= 0.0 || c.length <= 0.0 || c.gravity < 0.0 {
                return err("cartpole masses and length must be positive, gravity nonnegative".into());
            }
        }
        EnvSpec::Lqr(l) => {
            if l.n_state == 0 || l.n_ctrl == 0 {
                return err("lqr dimensions must be positive".into());
            }
        }
    }
    if cfg.env.horizon() < 2 {
        return err("horizon must be at least 2".into());
    }
    if !(cfg.env.ctrl_bound() > 0.0) {
        return err("ctrl_bound must be positive".into());
    }
    if let Some(d) = &cfg.dataset {
        if d.train_size == 0 || d.val_size == 0 || d.test_size == 0 {
            return err("dataset split sizes must be positive".into());
        }
    }
    if let Some(t) = &cfg.trials {
        if *t == 0 {
            return err("trials must be positive".into());
        }
    }
    match cfg.experiment {
        Experiment::LqrImitate => {
            let train = require_train(cfg)?;
            require_dataset(cfg)?;
            if train.method != MethodSpec::LqrDx {
                return err(format!(
                    "lqr-imitate trains with method \"lqr.dx\", got \"{}\"",
                    train.method.name()
                ));
            }
            if !matches!(cfg.env, EnvSpec::Lqr(_)) {
                return err("lqr-imitate needs an env of kind \"lqr\"".into());
            }
        }
        Experiment::MpcImitate => {
            let train = require_train(cfg)?;
            require_dataset(cfg)?;
            if train.method == MethodSpec::LqrDx {
                return err("mpc-imitate supports mpc.dx, mpc.cost, mpc.cost.dx, and sysid".into());
            }
            if matches!(cfg.env, EnvSpec::Lqr(_)) {
                return err("mpc-imitate needs a pendulum or cartpole env".into());
            }
        }
        Experiment::SysidCompare => {
            let train = require_train(cfg)?;
            require_dataset(cfg)?;
            if train.method != MethodSpec::MpcDx {
                return err(
                    "sysid-compare trains an mpc.dx arm and a sysid arm with shared \
                     hyperparameters; set method to \"mpc.dx\""
                        .into(),
                );
            }
            if !matches!(cfg.env, EnvSpec::Pendulum(_)) {
                return err("sysid-compare needs a pendulum env".into());
            }
        }
        Experiment::BenchBackward => {
            if let Some(caps) = &cfg.caps {
                if caps.is_empty() || caps.iter().any(|&c| c == 0) {
                    return err("caps must be a nonempty list of positive iteration counts".into());
                }
            }
        }
        Experiment::Gradcheck => {
            if let Some(eps) = cfg.eps {
                if !(eps > 0.0 && eps.is_finite()) {
                    return err("eps must be positive and finite".into());
                }
            }
        }
    }
    if let Some(train) = &cfg.train {
        if train.batch_size == 0 || train.epochs == 0 {
            return err("batch_size and epochs must be positive".into());
        }
        if let Some(d) = &cfg.dataset {
            if train.batch_size > d.train_size {
                return err(format!(
                    "batch_size {} exceeds train_size {}",
                    train.batch_size, d.train_size
                ));
            }
        }
        if train.alternation_period == 0 {
            return err("alternation_period must be at least 1".into());
        }
    }
    Ok(())
}

fn require_train(cfg: &ExperimentConfig) -> Result<&TrainSpec, CliError> {
    cfg.train.as_ref().ok_or_else(|| {
        CliError::Config(format!("{} requires a \"train\" section", cfg.experiment.name()))
    })
}

fn require_dataset(cfg: &ExperimentConfig) -> Result<&DatasetSpec, CliError> {
    cfg.dataset.as_ref().ok_or_else(|| {
        CliError::Config(format!("{} requires a \"dataset\" section", cfg.experiment.name()))
    })
}

/// Output-directory precedence: `--out` flag, then `DIFFMPC_OUT`, then the
/// config's `out_dir`.
pub fn resolve_out_dir(
    flag: Option<&Path>,
    cfg_out: Option<&str>,
) -> Result<PathBuf, CliError> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    if let Ok(v) = std::env::var(OUT_DIR_VAR) {
        if !v.is_empty() {
            return Ok(PathBuf::from(v));
        }
    }
    match cfg_out {
        Some(p) => Ok(PathBuf::from(p)),
        None => Err(CliError::Config(
            "no output directory: pass --out, set DIFFMPC_OUT, or put out_dir in the config"
                .to_string(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> String {
        r#"{
            "experiment": "lqr-imitate",
            "env": {"kind": "lqr", "n_state": 2, "n_ctrl": 1, "horizon": 3, "ctrl_bound": 1.0},
            "train": {"method": "lqr.dx",
                      "optimizer": {"name": "rmsprop", "lr": 0.01, "decay": 0.5},
                      "batch_size": 4, "epochs": 2},
            "dataset": {"train_size": 8, "val_size": 4, "test_size": 4},
            "seed": 7
        }"#
        .to_string()
    }

    #[test]
    fn round_trips_through_serialization() {
        let cfg: ExperimentConfig = serde_json::from_str(&minimal_json()).unwrap();
        validate(&cfg).unwrap();
        let echoed = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&echoed).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.train.as_ref().unwrap().alternation_period, 10);
    }

    #[test]
    fn unknown_top_level_key_is_rejected() {
        let text = minimal_json().replacen("\"seed\": 7", "\"sead\": 7, \"seed\": 7", 1);
        let got = serde_json::from_str::<ExperimentConfig>(&text);
        assert!(got.is_err());
        assert!(got.unwrap_err().to_string().contains("unknown field"));
    }

    #[test]
    fn unknown_env_key_is_rejected() {
        let text = minimal_json().replacen("\"n_state\": 2", "\"n_state\": 2, \"mass\": 1.0", 1);
        assert!(serde_json::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn unknown_optimizer_key_is_rejected() {
        let text = minimal_json().replacen("\"decay\": 0.5", "\"decay\": 0.5, \"beta\": 0.9", 1);
        assert!(serde_json::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn method_env_mismatch_is_rejected() {
        let text = minimal_json().replacen("lqr.dx", "mpc.dx", 1);
        let cfg: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert!(validate(&cfg).is_err());
    }

    #[test]
    fn batch_larger_than_train_split_is_rejected() {
        let text = minimal_json().replacen("\"batch_size\": 4", "\"batch_size\": 9", 1);
        let cfg: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert!(validate(&cfg).is_err());
    }
}
