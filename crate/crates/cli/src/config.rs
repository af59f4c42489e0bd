//! TOML run configuration. Every table rejects unknown keys and every
//! field has a default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ssn_core::analysis::ScoreNorm;
use ssn_core::fsm::CaVariant;
use ssn_core::posenet::{attach_esp, build_3block3fsm, build_shift_probe_net, build_tiny_fsm_net, InputSpec, NetworkGraph};
use ssn_core::trainer::{ShiftTaskSpec, SynthSpec, TaskSpec, TrainConfig};

use crate::CliError;

pub const OUTPUT_DIR_ENV: &str = "SSN_OUTPUT_DIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    /// Full-resolution `conv, (FSM, conv) x fsms, 1x1 head`.
    Tiny,
    /// Stem, pool, three FSM + Bottleneck pairs, head; quarter resolution.
    ThreeBlock,
    /// One FSM and a 1x1 head.
    ShiftProbe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub kind: NetworkKind,
    /// Backbone width of the tiny network.
    pub channels: usize,
    pub shift_channels: usize,
    /// FSMs in the tiny network.
    pub fsms: usize,
    pub ca_variant: CaVariant,
    /// Layers that get an early stage predictor.
    pub esp_after: Vec<String>,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            kind: NetworkKind::Tiny,
            channels: 16,
            shift_channels: 16,
            fsms: 2,
            ca_variant: CaVariant::SoftplusNormalized,
            esp_after: Vec::new(),
            init_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CueTarget,
    ShiftedCopy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: TaskKind,
    pub cue_target: SynthSpec,
    pub shifted_copy: ShiftTaskSpec,
    /// The evaluation set uses the training recipe with this count and seed.
    pub eval_count: usize,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::CueTarget,
            cue_target: SynthSpec::default(),
            shifted_copy: ShiftTaskSpec::default(),
            eval_count: 64,
            eval_seed: 1_000_003,
        }
    }
}

impl DataConfig {
    pub fn train_spec(&self) -> TaskSpec {
        match self.task {
            TaskKind::CueTarget => TaskSpec::CueTarget(self.cue_target),
            TaskKind::ShiftedCopy => TaskSpec::ShiftedCopy(self.shifted_copy),
        }
    }

    pub fn eval_spec(&self) -> TaskSpec {
        self.train_spec().resampled(self.eval_count, self.eval_seed)
    }

    fn key(&self) -> &'static str {
        match self.task {
            TaskKind::CueTarget => "data.cue_target",
            TaskKind::ShiftedCopy => "data.shifted_copy",
        }
    }

    /// Input layout and output channels of the selected task.
    fn io(&self) -> (InputSpec, usize) {
        match self.task {
            TaskKind::CueTarget => {
                let s = &self.cue_target;
                let input = InputSpec {
                    channels: ssn_core::trainer::synth::SYNTH_CHANNELS,
                    height: s.height,
                    width: s.width,
                };
                (input, 1)
            }
            TaskKind::ShiftedCopy => {
                let s = &self.shifted_copy;
                let input = InputSpec {
                    channels: 1,
                    height: s.height,
                    width: s.width,
                };
                (input, 1)
            }
        }
    }

    fn target_extent(&self) -> (usize, usize) {
        match self.task {
            TaskKind::CueTarget => {
                let s = &self.cue_target;
                (s.height / s.heatmap_stride.max(1), s.width / s.heatmap_stride.max(1))
            }
            TaskKind::ShiftedCopy => (self.shifted_copy.height, self.shifted_copy.width),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub module: String,
    /// Shifting channel (erf) or output channel (window energies).
    pub channel: usize,
    /// `[x, y]` on the module's maps.
    pub position: [usize; 2],
    pub threshold: f64,
    pub normalization: ScoreNorm,
    pub magnitude: bool,
    /// Evaluation samples fed to the score and ERF analyses.
    pub samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            module: "fsm1".into(),
            channel: 0,
            position: [0, 0],
            threshold: 0.5,
            normalization: ScoreNorm::Max,
            magnitude: true,
            samples: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write the offsets of every FSM at the end of each epoch.
    pub offset_snapshots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("ssn-run"),
            offset_snapshots: true,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            CliError::Config {
                path: if path == "." { String::new() } else { path },
                message: inner.message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |path: &str, e: ssn_core::Error| CliError::Config {
            path: path.to_string(),
            message: match e {
                ssn_core::Error::Config(m) => m,
                other => other.to_string(),
            },
        };
        self.train.validate().map_err(|e| cfg_err("train", e))?;
        match self.data.task {
            TaskKind::CueTarget => self.data.cue_target.validate(),
            TaskKind::ShiftedCopy => self.data.shifted_copy.validate(),
        }
        .map_err(|e| cfg_err(self.data.key(), e))?;
        if self.data.eval_count == 0 {
            return Err(CliError::Config {
                path: "data.eval_count".into(),
                message: "must be positive".into(),
            });
        }
        let graph = self.graph()?;
        let out = graph.output_shape().map_err(|e| cfg_err("network", e))?;
        let (h, w) = self.data.target_extent();
        if (out.height, out.width) != (h, w) {
            return Err(CliError::Config {
                path: "network.kind".into(),
                message: format!(
                    "network output is {}x{} but {} targets are {h}x{w}",
                    out.height,
                    out.width,
                    self.data.key()
                ),
            });
        }
        Ok(())
    }

    pub fn graph(&self) -> Result<NetworkGraph, CliError> {
        let n = &self.network;
        let (input, outputs) = self.data.io();
        let err = |e: ssn_core::Error| CliError::Config {
            path: "network".into(),
            message: match e {
                ssn_core::Error::Config(m) => m,
                other => other.to_string(),
            },
        };
        let mut graph = match n.kind {
            NetworkKind::Tiny => build_tiny_fsm_net(input, n.channels, n.shift_channels, n.fsms, outputs, n.ca_variant),
            NetworkKind::ThreeBlock => {
                if input.channels != 3 {
                    return Err(CliError::Config {
                        path: "network.kind".into(),
                        message: "three_block needs a 3-channel task".into(),
                    });
                }
                build_3block3fsm(input.height, input.width, n.shift_channels, outputs, n.ca_variant)
            }
            NetworkKind::ShiftProbe => build_shift_probe_net(input, n.shift_channels, n.ca_variant),
        }
        .map_err(err)?;
        for (i, layer) in n.esp_after.iter().enumerate() {
            graph = attach_esp(graph, layer).map_err(|e| CliError::Config {
                path: format!("network.esp_after[{i}]"),
                message: e.to_string(),
            })?;
        }
        Ok(graph)
    }
}

/// `--out` beats the environment override, which beats the config.
pub fn output_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(v) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(v);
    }
    config.map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config_error(text: &str) -> (String, String) {
        match RunConfig::parse(text) {
            Err(CliError::Config { path, message }) => (path, message),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_names_its_path() {
        let (path, msg) = config_error("[train]\nbase_lr = 0.1\nlearning_rate = 3\n");
        assert_eq!(path, "train.learning_rate");
        assert!(msg.contains("learning_rate"), "{msg}");
        let (path, _) = config_error("[output]\ndirectory = \"x\"\n");
        assert_eq!(path, "output.directory");
    }

    #[test]
    fn wrong_type_names_the_field() {
        let (path, _) = config_error("[train]\nbatch_size = \"big\"\n");
        assert_eq!(path, "train.batch_size");
        let (path, _) = config_error("[network]\nkind = \"huge\"\n");
        assert_eq!(path, "network.kind");
    }

    #[test]
    fn semantic_errors_carry_the_section() {
        let (path, msg) = config_error("[train]\nbatch_size = 0\n");
        assert_eq!(path, "train");
        assert!(msg.contains("batch_size"), "{msg}");
        let (path, _) = config_error("[network]\nkind = \"three_block\"\n[data.cue_target]\nheight = 30\n");
        assert!(path.starts_with("network"), "{path}");
    }

    #[test]
    fn shifted_copy_task_selects_its_table() {
        let cfg = RunConfig::parse("[network]\nkind = \"shift_probe\"\n[data]\ntask = \"shifted_copy\"\n").unwrap();
        assert!(matches!(cfg.data.eval_spec(), TaskSpec::ShiftedCopy(s) if s.count == 64));
    }
}
