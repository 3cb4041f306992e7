//! Experiment configuration files.
//!
//! ```toml
//! [data]                     # either IDX paths or a [data.synth] table
//! train_images = "../data/mnist/train-images-idx3-ubyte"
//! train_labels = "../data/mnist/train-labels-idx1-ubyte"
//! test_images = "../data/mnist/t10k-images-idx3-ubyte"
//! test_labels = "../data/mnist/t10k-labels-idx1-ubyte"
//! train_limit = 10000        # keep the first N training samples (optional)
//! test_limit = 10000         # optional
//! num_classes = 10           # default 10
//!
//! [model]
//! hidden = [300, 100]        # default [300, 100]
//! activation = "relu"        # relu | tanh
//!
//! [training]
//! clients = 5                # default 5
//! rounds = 30                # default 30
//! local_steps = 5            # tau, default 5
//! local_unit = "epochs"      # steps | epochs, default steps
//! batch_size = 64            # default 64
//! learning_rate = 0.01       # default 0.01
//! momentum = 0.5             # default 0.0
//! payload_mode = "updates"   # updates | weights
//! weights = [0.2, ...]       # optional aggregation weights
//! shard_size = 2000          # optional fixed per-client shard size
//! track_grad_norm = false
//!
//! [channel]
//! noisy_links = "none"       # none | downlink_only | uplink_only | both
//! downlink_sharing = "shared" # shared | per_client
//! bits = 32                  # default 32
//! downlink = { ber = 1e-4, flip_mode = "iid" }   # ber may be a per-round list
//! uplink = { ber = 0.0 }
//!
//! [run]
//! seeds = [0, 1, 2]          # default [0]
//! out_dir = "../runs/name"   # default runs/<config file stem>
//! format = "csv"             # csv | jsonl
//! svg = false                # also write an accuracy plot
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use noisyfl::codec::QuantSpec;
use noisyfl::data::{load_idx_dataset, synth_dataset, Dataset, SynthSpec};
use noisyfl::nn::{Activation, MlpSpec};
use noisyfl::sim::{DownlinkSharing, FlConfig, LinkSettings, LocalUnit, NoisyLinks, PayloadMode};

use crate::ConfigFault;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    pub synth: Option<SynthSection>,
}

fn default_classes() -> usize {
    10
}

/// Gaussian blobs; the test set uses `seed + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![300, 100]
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub clients: usize,
    pub rounds: usize,
    pub local_steps: usize,
    pub local_unit: LocalUnit,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub payload_mode: PayloadMode,
    pub weights: Option<Vec<f64>>,
    pub shard_size: Option<usize>,
    pub track_grad_norm: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let fl = FlConfig::default();
        Self {
            clients: fl.clients,
            rounds: fl.rounds,
            local_steps: fl.local_steps,
            local_unit: fl.local_unit,
            batch_size: fl.batch_size,
            learning_rate: fl.learning_rate,
            momentum: fl.momentum,
            payload_mode: fl.payload_mode,
            weights: None,
            shard_size: None,
            track_grad_norm: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub noisy_links: NoisyLinks,
    pub downlink_sharing: DownlinkSharing,
    pub bits: QuantSpec,
    pub downlink: LinkSettings,
    pub uplink: LinkSettings,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            noisy_links: NoisyLinks::None,
            downlink_sharing: DownlinkSharing::Shared,
            bits: QuantSpec::default(),
            downlink: LinkSettings::default(),
            uplink: LinkSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub format: OutputFormat,
    pub svg: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out_dir: None,
            format: OutputFormat::Csv,
            svg: false,
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config file, resolving relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))
            .map_err(|e| e.context(ConfigFault))?;
        let mut cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))
            .map_err(|e| e.context(ConfigFault))?;
        // Absolute paths keep the echoed copy of the config runnable from anywhere.
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
        let base = std::path::absolute(parent.unwrap_or(Path::new(".")))
            .with_context(|| format!("cannot resolve {}", path.display()))?;
        cfg.resolve_paths(&base);
        if cfg.run.out_dir.is_none() {
            let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            cfg.run.out_dir = Some(std::path::absolute(Path::new("runs").join(stem))?);
        }
        cfg.validate().map_err(|e| e.context(ConfigFault))?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.data.train_images);
        fix(&mut self.data.train_labels);
        fix(&mut self.data.test_images);
        fix(&mut self.data.test_labels);
        fix(&mut self.run.out_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let idx = [&d.train_images, &d.train_labels, &d.test_images, &d.test_labels];
        let given = idx.iter().filter(|p| p.is_some()).count();
        match (&d.synth, given) {
            (Some(_), 0) | (None, 4) => {}
            (Some(_), _) => bail!("data: give either IDX paths or [data.synth], not both"),
            (None, _) => bail!(
                "data: train_images, train_labels, test_images and test_labels are all required without [data.synth]"
            ),
        }
        if self.run.seeds.is_empty() {
            bail!("run.seeds must not be empty");
        }
        self.fl_config(0).validate()?;
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.run.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/run"))
    }

    pub fn fl_config(&self, seed: u64) -> FlConfig {
        let t = &self.training;
        let c = &self.channel;
        FlConfig {
            clients: t.clients,
            rounds: t.rounds,
            local_steps: t.local_steps,
            local_unit: t.local_unit,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            payload_mode: t.payload_mode,
            noisy_links: c.noisy_links,
            downlink_sharing: c.downlink_sharing,
            downlink: c.downlink.clone(),
            uplink: c.uplink.clone(),
            quant: c.bits,
            weights: t.weights.clone(),
            shard_size: t.shard_size,
            master_seed: seed,
            track_grad_norm: t.track_grad_norm,
        }
    }

    /// Training and test sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        if let Some(s) = &d.synth {
            let mk = |per_class, seed| {
                synth_dataset(&SynthSpec {
                    num_classes: d.num_classes,
                    dim: s.dim,
                    per_class,
                    separation: s.separation,
                    seed,
                })
            };
            return Ok((mk(s.per_class, s.seed)?, mk(s.test_per_class, s.seed.wrapping_add(1))?));
        }
        let path = |p: &Option<PathBuf>| p.clone().expect("validated");
        let train = load_idx_dataset(&path(&d.train_images), &path(&d.train_labels), d.num_classes, d.train_limit)?;
        let test = load_idx_dataset(&path(&d.test_images), &path(&d.test_labels), d.num_classes, d.test_limit)?;
        Ok((train, test))
    }

    pub fn model(&self, input_dim: usize) -> Result<MlpSpec> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.model.hidden);
        sizes.push(self.data.num_classes);
        Ok(MlpSpec::new(sizes, self.model.activation)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data.synth]
dim = 4
per_class = 10
test_per_class = 5
separation = 6.0

[training]
clients = 2
rounds = 3

[channel]
noisy_links = "downlink_only"
downlink = { ber = 1e-4 }
"#;

    #[test]
    fn parses_minimal_and_applies_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.training.batch_size, 64);
        assert_eq!(cfg.model.hidden, vec![300, 100]);
        assert_eq!(cfg.run.seeds, vec![0]);
        assert_eq!(cfg.channel.bits.bits(), 32);
        let fl = cfg.fl_config(7);
        assert_eq!(fl.master_seed, 7);
        assert_eq!(fl.downlink.ber.at(2), 1e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("rounds = 3", "rounds = 3\nround = 4");
        let err = toml::from_str::<ExperimentConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("round"), "{err}");
    }

    #[test]
    fn echo_round_trips() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn per_round_schedule_parses() {
        let text = MINIMAL.replace("downlink = { ber = 1e-4 }", "downlink = { ber = [1e-4, 2e-4, 3e-4] }");
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.fl_config(0).downlink.ber.at(1), 2e-4);
    }

    #[test]
    fn mixed_data_sources_are_rejected() {
        let text = format!("{MINIMAL}\n[run]\nseeds = []\n");
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(cfg.validate().is_err());
        let text = MINIMAL.replace("[data.synth]", "[data]\ntrain_images = \"x\"\n[data.synth]");
        let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
        assert!(cfg.validate().is_err());
    }
}
