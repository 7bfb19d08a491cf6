//! Flat JSON run configuration shared by every subcommand. Command-line
//! flags override file values.

use std::path::{Path, PathBuf};

use gridcast::linalg::Activation;
use gridcast::measurement::LoadProfile;
use gridcast::model::Architecture;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,

    pub buses: Option<usize>,
    pub steps: Option<usize>,
    pub profile: Option<LoadProfile>,
    pub noise: Option<f64>,

    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,

    pub architecture: Option<Architecture>,
    pub seq_len: Option<usize>,
    pub horizon: Option<usize>,
    pub hidden_size: Option<usize>,
    pub depth: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub conv_filters: Option<usize>,
    pub conv_kernel: Option<usize>,
    pub conv_stride: Option<usize>,
    pub teacher_forcing: Option<bool>,
    pub rnn_activation: Option<Activation>,

    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub patience: Option<usize>,
    pub clip_norm: Option<f64>,
    pub train_frac: Option<f64>,
    pub val_frac: Option<f64>,
    pub test_frac: Option<f64>,

    pub snapshot_t: Option<usize>,
    pub bus: Option<usize>,
    pub origin: Option<usize>,
    pub trace_steps: Option<usize>,

    pub threshold: Option<f64>,
    pub trials: Option<usize>,
    pub fd_step: Option<f64>,

    pub architectures: Option<Vec<Architecture>>,
    pub seq_lens: Option<Vec<usize>>,
    pub repetitions: Option<usize>,
}

pub fn load(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seq_len": 5, "hiden_size": 3}"#).unwrap_err();
        assert!(err.to_string().contains("hiden_size"));
    }

    #[test]
    fn enums_use_snake_case() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"architecture": "conv_bigru", "profile": "random_walk", "seq_lens": [5, 10]}"#,
        )
        .unwrap();
        assert_eq!(cfg.architecture, Some(Architecture::ConvBigru));
        assert_eq!(cfg.profile, Some(LoadProfile::RandomWalk));
        assert_eq!(cfg.seq_lens, Some(vec![5, 10]));
    }
}
