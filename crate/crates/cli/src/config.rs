//! Experiment configuration. One TOML file drives every verb; all
//! randomness flows from `root_seed` through named substreams, so a config
//! plus a verb fully determines the artifacts.

use anyhow::{bail, Context, Result};
use diffalloc_core::bcq::BcqConfig;
use diffalloc_core::diffusion::DiffusionConfig;
use diffalloc_core::env::{NetworkScenario, ScenarioRanges};
use diffalloc_core::sac::SacConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub root_seed: u64,
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub collect: CollectSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub bcq: BcqSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(default)]
    pub trace: TraceSection,
    #[serde(default)]
    pub sample: SampleSection,
}

/// Scenarios either come from frozen files or are sampled from ranges.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// Frozen scenario files, resolved relative to the config file.
    #[serde(default)]
    pub paths: Vec<String>,
    #[serde(default)]
    pub ranges: Option<ScenarioRanges>,
    /// Number of scenarios to sample in ranges mode.
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_count() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectSection {
    pub episodes: u64,
    /// Defaults to the scenario-derived horizon.
    pub horizon: Option<usize>,
    pub eval_every: u64,
    pub eval_episodes: u64,
    /// Greedy episodes appended after training to seed top return buckets.
    pub final_greedy: u64,
    pub random_init_fraction: f64,
    pub sac: SacConfig,
}

impl Default for CollectSection {
    fn default() -> Self {
        Self {
            episodes: 200,
            horizon: None,
            eval_every: 25,
            eval_episodes: 2,
            final_greedy: 20,
            random_init_fraction: 0.25,
            sac: SacConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub steps: u64,
    pub invdyn_steps: u64,
    pub model: DiffusionConfig,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: 8000,
            invdyn_steps: 4000,
            model: DiffusionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcqSection {
    pub steps: u64,
    pub model: BcqConfig,
}

impl Default for BcqSection {
    fn default() -> Self {
        Self {
            steps: 8000,
            model: BcqConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Diffusion plans sampled per scenario.
    pub plan_samples: usize,
    /// 0 executes plans open-loop; N > 0 replans every N steps.
    pub replan_every: usize,
    /// Defaults to the scenario-derived horizon.
    pub horizon: Option<usize>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            plan_samples: 20,
            replan_every: 0,
            horizon: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsSection {
    /// Dataset to describe; defaults to the run's own dataset.jsonl.
    pub dataset: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    /// Substream index for the traced plan.
    pub seed_index: u64,
    /// Condition bucket; defaults to the top decile.
    pub return_bucket: Option<usize>,
    /// Grid stride for the 2-user utility surface.
    pub surface_stride: u32,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self {
            seed_index: 0,
            return_bucket: None,
            surface_stride: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub count: usize,
    pub return_bucket: Option<usize>,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            count: 1,
            return_bucket: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            bail!(
                "invalid config: schema_version {} unsupported, expected {}",
                self.schema_version,
                CONFIG_SCHEMA_VERSION
            );
        }
        let s = &self.scenario;
        match (!s.paths.is_empty(), s.ranges.is_some()) {
            (true, true) => bail!("invalid config: scenario gives both paths and ranges"),
            (false, false) => bail!("invalid config: scenario needs paths or ranges"),
            _ => {}
        }
        if s.ranges.is_some() && s.count == 0 {
            bail!("invalid config: scenario count must be positive");
        }
        Ok(())
    }

    /// Loads the scenario set. File paths resolve relative to `config_dir`
    /// and are reported back for input hashing; sampled scenarios draw
    /// their seeds from the root seed's scenario substream.
    pub fn load_scenarios(&self, config_dir: &Path) -> Result<(Vec<NetworkScenario>, Vec<PathBuf>)> {
        let mut scenarios = Vec::new();
        let mut files = Vec::new();
        if !self.scenario.paths.is_empty() {
            for rel in &self.scenario.paths {
                let path = config_dir.join(rel);
                let scn = NetworkScenario::load(&path)
                    .with_context(|| format!("scenario file {}", path.display()))?;
                scenarios.push(scn);
                files.push(path);
            }
        } else {
            let ranges = self.scenario.ranges.as_ref().unwrap();
            for i in 0..self.scenario.count {
                let seed = crate::pipeline::sub_seed(self.root_seed, "scenario")
                    .wrapping_add(i as u64);
                scenarios.push(diffalloc_core::env::sample_scenario(ranges, seed)?);
            }
        }
        Ok((scenarios, files))
    }
}
