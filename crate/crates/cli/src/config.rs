use geonovel::data::SynthConfig;
use geonovel::encoder::TrainConfig;
use geonovel::pipeline::DiscoverConfig;
use geonovel::proxy::{BaseSelection, EnergyMinConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyConfig {
    pub count: usize,
    pub dim: usize,
    pub s: f64,
    /// Proxies reserved as class anchors; the rest stay open.
    pub num_base: usize,
    pub base_selection: BaseSelection,
    pub seed: u64,
    pub energy: EnergyMinConfig,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            count: 32,
            dim: 16,
            s: 1.0,
            num_base: 5,
            base_selection: BaseSelection::Random,
            seed: 0,
            energy: EnergyMinConfig::default(),
        }
    }
}

/// Every tunable of a run. Omitted sections and keys take their defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub proxies: ProxyConfig,
    pub train: TrainConfig,
    pub discover: DiscoverConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
