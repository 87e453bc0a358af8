//! The experiment document: one JSON file configuring every stage.

use std::fmt;
use std::path::{Path, PathBuf};

use dpsguard_core::datagen::Budget;
use dpsguard_core::features::FeatureKind;
use dpsguard_core::gossip_train::{ActivationMode, GossipConfig};
use dpsguard_core::neural::TrainConfig;
use dpsguard_core::protocol::{ProjectionBox, ProtocolConfig, StepSize};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Converge,
    OneAttacker,
    MultiAttacker,
    DegreeTailor,
    Mismatch,
    GossipLearning,
    SmallWorld,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Converge,
        Family::OneAttacker,
        Family::MultiAttacker,
        Family::DegreeTailor,
        Family::Mismatch,
        Family::GossipLearning,
        Family::SmallWorld,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Converge => "converge",
            Family::OneAttacker => "one-attacker",
            Family::MultiAttacker => "multi-attacker",
            Family::DegreeTailor => "degree-tailor",
            Family::Mismatch => "mismatch",
            Family::GossipLearning => "gossip-learning",
            Family::SmallWorld => "small-world",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    pub d: usize,
    pub iterations: usize,
    /// Instances recorded per sample; detectors use any prefix of them.
    pub instances: usize,
    pub step_size: StepSize,
    pub projection: ProjectionBox,
    /// Manhattan torus dimensions.
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            d: 2,
            iterations: 2000,
            instances: 5,
            step_size: StepSize::default(),
            projection: ProjectionBox::default(),
            grid_rows: 3,
            grid_cols: 3,
        }
    }
}

impl ProtocolSpec {
    pub fn config(&self) -> ProtocolConfig {
        ProtocolConfig {
            d: self.d,
            iterations: self.iterations,
            instances: self.instances,
            step_size: self.step_size,
            projection: self.projection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSpec {
    /// `K` values for the score detectors.
    pub score_instances: Vec<usize>,
    /// Extra state dimensions at which TD is also evaluated.
    pub td_extra_dims: Vec<usize>,
    pub tdnn_instances: usize,
    pub sdnn_instances: usize,
    /// Model input width `M`.
    pub slots: usize,
    /// Standardize network inputs with statistics of the training rows.
    pub standardize: bool,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            score_instances: vec![1, 2, 5],
            td_extra_dims: vec![1],
            tdnn_instances: 5,
            sdnn_instances: 2,
            slots: 4,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSpec {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            epochs: t.epochs,
        }
    }
}

impl TrainingSpec {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GossipSpec {
    pub rounds: usize,
    pub mu: f64,
    pub mode: ActivationMode,
    pub starved_agent: usize,
    pub starved_fraction: f64,
    /// Feature family and instances per sample of the gossip-trained detectors.
    pub kind: FeatureKind,
    pub instances: usize,
}

impl Default for GossipSpec {
    fn default() -> Self {
        Self {
            rounds: 200,
            mu: 0.5,
            mode: ActivationMode::Synchronous,
            starved_agent: 1,
            starved_fraction: 0.02,
            kind: FeatureKind::Spatial,
            instances: 1,
        }
    }
}

impl GossipSpec {
    pub fn config(&self, training: &TrainingSpec) -> GossipConfig {
        GossipConfig {
            mu: self.mu,
            learning_rate: training.learning_rate,
            batch_size: training.batch_size,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmallWorldSpec {
    pub agents: usize,
    pub mean_degree: usize,
    pub rewire_prob: f64,
    pub attackers: Vec<usize>,
}

impl Default for SmallWorldSpec {
    fn default() -> Self {
        Self {
            agents: 20,
            mean_degree: 8,
            rewire_prob: 0.2,
            attackers: vec![2, 9, 16],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiAttackerSpec {
    /// Attacker counts `m`; attackers are agents `0..m`.
    pub counts: Vec<usize>,
}

impl Default for MultiAttackerSpec {
    fn default() -> Self {
        Self {
            counts: vec![1, 2, 3, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegreeTailorSpec {
    pub monitor: usize,
    pub attacker: usize,
    /// Edges at the monitor cut one after another; `p` uses the first `p`.
    pub cuts: Vec<usize>,
}

impl Default for DegreeTailorSpec {
    fn default() -> Self {
        Self {
            monitor: 1,
            attacker: 0,
            cuts: vec![2, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeSpec {
    pub attacker: usize,
    /// Iteration stride of the exported trajectory.
    pub trajectory_stride: usize,
}

impl Default for ConvergeSpec {
    fn default() -> Self {
        Self {
            attacker: 0,
            trajectory_stride: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub family: Family,
    pub seed: u64,
    pub repetitions: usize,
    /// Fraction of the full sample budgets.
    pub scale: f64,
    pub protocol: ProtocolSpec,
    pub detectors: DetectorSpec,
    pub training: TrainingSpec,
    pub gossip: GossipSpec,
    pub small_world: SmallWorldSpec,
    pub multi_attacker: MultiAttackerSpec,
    pub degree_tailor: DegreeTailorSpec,
    pub converge: ConvergeSpec,
    /// Output root. Not part of the digest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            family: Family::OneAttacker,
            seed: 0,
            repetitions: 5,
            scale: 0.1,
            protocol: ProtocolSpec::default(),
            detectors: DetectorSpec::default(),
            training: TrainingSpec::default(),
            gossip: GossipSpec::default(),
            small_world: SmallWorldSpec::default(),
            multi_attacker: MultiAttackerSpec::default(),
            degree_tailor: DegreeTailorSpec::default(),
            converge: ConvergeSpec::default(),
            output: None,
        }
    }
}

fn check(ok: bool, path: &str, message: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::config(path, message))
    }
}

impl ExperimentSpec {
    pub fn for_family(family: Family) -> Self {
        let mut spec = Self {
            family,
            ..Self::default()
        };
        if family == Family::Converge {
            spec.repetitions = 10;
        }
        spec
    }

    /// Parses a JSON document; errors carry the path of the offending field.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config {
                path: if path == "." {
                    origin.display().to_string()
                } else {
                    path
                },
                message: e.into_inner().to_string(),
            }
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::config("--config", format!("{} does not exist", path.display()))
            } else {
                CliError::io(path, e)
            }
        })?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        check(self.repetitions >= 1, "repetitions", "must be at least 1")?;
        check(self.scale > 0.0 && self.scale <= 1.0, "scale", "must lie in (0, 1]")?;
        let p = &self.protocol;
        check(p.d >= 1, "protocol.d", "must be at least 1")?;
        check(p.iterations >= 1, "protocol.iterations", "must be at least 1")?;
        check(p.instances >= 1, "protocol.instances", "must be at least 1")?;
        check(p.grid_rows >= 3 && p.grid_cols >= 3, "protocol.grid_rows", "torus needs at least 3 rows and 3 columns")?;
        p.config()
            .validate()
            .map_err(|e| CliError::config("protocol", e.to_string()))?;
        let det = &self.detectors;
        check(!det.score_instances.is_empty(), "detectors.score_instances", "must not be empty")?;
        for (name, k) in det
            .score_instances
            .iter()
            .map(|&k| ("detectors.score_instances", k))
            .chain([
                ("detectors.tdnn_instances", det.tdnn_instances),
                ("detectors.sdnn_instances", det.sdnn_instances),
                ("gossip.instances", self.gossip.instances),
            ])
        {
            check(
                k >= 1 && k <= p.instances,
                name,
                "must lie between 1 and protocol.instances",
            )?;
        }
        check(det.td_extra_dims.iter().all(|&d| d >= 1), "detectors.td_extra_dims", "dimensions must be at least 1")?;
        check(det.slots >= 1, "detectors.slots", "must be at least 1")?;
        let t = &self.training;
        check(t.learning_rate > 0.0 && t.learning_rate.is_finite(), "training.learning_rate", "must be positive")?;
        check(t.batch_size >= 1, "training.batch_size", "must be at least 1")?;
        check(t.epochs >= 1, "training.epochs", "must be at least 1")?;
        let n = p.grid_rows * p.grid_cols;
        let g = &self.gossip;
        check(g.rounds >= 1, "gossip.rounds", "must be at least 1")?;
        check((0.0..=1.0).contains(&g.mu), "gossip.mu", "must lie in [0, 1]")?;
        check(g.starved_agent < n, "gossip.starved_agent", "must be an agent of the grid")?;
        check(
            g.starved_fraction > 0.0 && g.starved_fraction < 1.0,
            "gossip.starved_fraction",
            "must lie in (0, 1)",
        )?;
        let sw = &self.small_world;
        check(
            sw.mean_degree >= 2 && sw.mean_degree % 2 == 0 && sw.mean_degree < sw.agents,
            "small_world.mean_degree",
            "must be even, positive and smaller than the agent count",
        )?;
        check((0.0..=1.0).contains(&sw.rewire_prob), "small_world.rewire_prob", "must lie in [0, 1]")?;
        check(
            !sw.attackers.is_empty() && sw.attackers.iter().all(|&a| a < sw.agents),
            "small_world.attackers",
            "must name at least one agent of the network",
        )?;
        check(
            !self.multi_attacker.counts.is_empty() && self.multi_attacker.counts.iter().all(|&m| m >= 1 && m < n),
            "multi_attacker.counts",
            "each count must lie between 1 and n - 1",
        )?;
        let dt = &self.degree_tailor;
        check(dt.monitor < n, "degree_tailor.monitor", "must be an agent of the grid")?;
        check(dt.attacker < n && dt.attacker != dt.monitor, "degree_tailor.attacker", "must be another agent of the grid")?;
        check(!dt.cuts.contains(&dt.attacker), "degree_tailor.cuts", "the attacker edge must stay")?;
        check(dt.cuts.iter().all(|&c| c < n), "degree_tailor.cuts", "must be agents of the grid")?;
        check(self.converge.attacker < n, "converge.attacker", "must be an agent of the grid")?;
        check(self.converge.trajectory_stride >= 1, "converge.trajectory_stride", "must be at least 1")?;
        Ok(())
    }

    pub fn budget(&self) -> Result<Budget> {
        Budget::scaled(self.scale).map_err(|e| CliError::config("scale", e.to_string()))
    }

    /// Canonical JSON of everything that influences results.
    pub fn canonical_json(&self) -> String {
        let mut spec = self.clone();
        spec.output = None;
        serde_json::to_string(&spec).expect("spec serializes")
    }

    /// Hex SHA-256 of [`Self::canonical_json`].
    pub fn digest(&self) -> String {
        hex_digest(self.canonical_json().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
