use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use altprint_core::detector::DetectorConfig;
use altprint_core::eval::ExperimentConfig;
use altprint_core::gan::GanConfig;
use altprint_core::localizer::LocalizerConfig;
use altprint_core::synth::DatasetRequest;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "ALTPRINT_SEED";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

/// Every tunable of a run. Unknown keys are rejected; omitted keys take
/// their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; when set it overrides every component seed.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub synth: DatasetRequest,
    pub detector: DetectorConfig,
    pub experiment: ExperimentConfig,
    pub localizer: LocalizerConfig,
    pub gan: GanConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Seed precedence: flag, then config file, then `ALTPRINT_SEED`.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<Option<u64>> {
        let env_seed = match env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().with_context(|| format!("{SEED_ENV}={v} is not a u64"))?),
            Err(_) => None,
        };
        let seed = flag.or(self.seed).or(env_seed);
        if let Some(s) = seed {
            self.seed = Some(s);
            self.synth.seed = s;
            self.detector.seed = s;
            self.experiment.seed = s;
            self.localizer.seed = s;
            self.localizer.classifier.seed = s;
            self.gan.seed = s;
        }
        Ok(seed)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}
