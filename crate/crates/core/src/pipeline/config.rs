use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::ingest::QuicFilterConfig;
use crate::labels::{Holdout, SplitMode, MAX_LABEL};
use crate::render::NormalizationMode;
use crate::window::{WindowSpec, WindowSpecError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitSetting {
    #[default]
    #[serde(rename = "known-servers-80-20")]
    KnownServers8020,
    LeaveServersOut,
}

/// Run-level parameters. Deserializes from TOML; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Window length T in seconds.
    pub window: f64,
    /// Image side: M time bins by N = M length bins.
    pub resolution: usize,
    /// Largest binned packet length L in bytes.
    pub mtu: u32,
    pub overlap: f64,
    pub normalize: NormalizationMode,
    pub dedup: bool,
    pub max_label: u32,
    pub seed: u64,
    pub split: SplitSetting,
    /// Servers held out in leave-servers-out mode.
    pub holdout: Vec<String>,
    /// Alternatively, how many servers to hold out at random.
    pub holdout_count: Option<usize>,
    pub out: PathBuf,
    pub quic_ports: Vec<u16>,
    /// CSV `server_label,websites` backing the websites column of stats.csv.
    pub websites: Option<PathBuf>,
    /// Worker threads; the global pool when unset.
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window: 0.1,
            resolution: 32,
            mtu: 1500,
            overlap: 0.0,
            normalize: NormalizationMode::PerWindow,
            dedup: true,
            max_label: MAX_LABEL,
            seed: 0,
            split: SplitSetting::KnownServers8020,
            holdout: Vec::new(),
            holdout_count: None,
            out: PathBuf::from("out"),
            quic_ports: vec![443],
            websites: None,
            threads: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn window_spec(&self) -> Result<WindowSpec, WindowSpecError> {
        WindowSpec::new(
            self.window,
            self.resolution,
            self.resolution,
            self.mtu,
            self.overlap,
        )
    }

    pub fn filter(&self) -> QuicFilterConfig {
        QuicFilterConfig {
            quic_ports: self.quic_ports.iter().copied().collect(),
            endpoints: None,
        }
    }

    pub fn split_mode(&self) -> SplitMode {
        match self.split {
            SplitSetting::KnownServers8020 => SplitMode::KnownServers8020,
            SplitSetting::LeaveServersOut => match self.holdout_count {
                Some(n) if self.holdout.is_empty() => SplitMode::LeaveServersOut(Holdout::Count(n)),
                _ => SplitMode::LeaveServersOut(Holdout::Servers(self.holdout.clone())),
            },
        }
    }
}
