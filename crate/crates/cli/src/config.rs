//! Optional TOML configuration. Every field may be omitted; command-line
//! flags override it and built-in defaults fill the rest.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub ingest: IngestSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub streamline: StreamlineSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub cost: CostSection,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub attack: Option<String>,
    pub duration: Option<f64>,
    pub burst: Option<f64>,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSection {
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub ratios: Option<[u32; 3]>,
    pub lenient: Option<bool>,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub bits: Option<u8>,
    pub epochs: Option<u64>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub loss: Option<String>,
    pub dims: Option<Vec<usize>>,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StreamlineSection {
    pub check_blocks: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub mode: Option<String>,
    pub workers: Option<usize>,
    pub frames: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub bits: Option<u32>,
    pub baseline_bits: Option<u32>,
    pub input_bits: Option<u32>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag, then config value, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick(None::<i32>, None, 3), 3);
    }

    #[test]
    fn parses_sections_and_rejects_unknown_keys() {
        let c: FileConfig = toml::from_str("seed = 4\n[train]\nbits = 3\nepochs = 2\n").unwrap();
        assert_eq!(c.seed, Some(4));
        assert_eq!(c.train.bits, Some(3));
        assert!(c.simulate.attack.is_none());
        assert!(toml::from_str::<FileConfig>("[train]\nbitz = 3\n").is_err());
    }
}
