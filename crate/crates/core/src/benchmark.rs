//! Architecture × sequence-length comparison with repeated, sequentially
//! seeded training runs.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measurement::{fmt_real, StateSeries};
use crate::model::{Architecture, ModelConfig};
use crate::training::{train, SplitSpec, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub architectures: Vec<Architecture>,
    pub seq_lens: Vec<usize>,
    pub repetitions: usize,
    pub base_seed: u64,
    pub hidden_size: usize,
    pub depth: usize,
    pub horizon: usize,
    pub dropout_rate: f64,
    pub split: SplitSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            architectures: vec![Architecture::Rnn, Architecture::Bigru],
            seq_lens: vec![5, 10, 15, 20],
            repetitions: 30,
            base_seed: 0,
            hidden_size: 16,
            depth: 3,
            horizon: 5,
            dropout_rate: 0.05,
            split: SplitSpec::default(),
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            patience: 10,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.architectures.is_empty() || self.seq_lens.is_empty() || self.repetitions == 0 {
            return Err(Error::Config(
                "benchmark needs at least one architecture, sequence length and repetition".into(),
            ));
        }
        self.split.validate()
    }

    fn model_config(&self, arch: Architecture, input_dim: usize, seq_len: usize, seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig::standard(arch, input_dim, self.hidden_size, seq_len, self.horizon, seed);
        cfg.depth = self.depth;
        cfg.dropout_rate = self.dropout_rate;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub architecture: Architecture,
    pub seq_len: usize,
    pub run_index: usize,
    pub seed: u64,
    pub test_nrmse: f64,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub seq_lens: Vec<usize>,
    pub architectures: Vec<Architecture>,
    /// Sorted by architecture, then sequence length, then run index.
    pub runs: Vec<RunRecord>,
}

impl BenchmarkResult {
    pub fn mean(&self, arch: Architecture, seq_len: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.architecture == arch && r.seq_len == seq_len)
            .map(|r| r.test_nrmse)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// One row per architecture, one `l=…` column per sequence length.
    pub fn write_table_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let head: Vec<String> = self.seq_lens.iter().map(|l| format!("l={l}")).collect();
        writeln!(w, "architecture,{}", head.join(","))?;
        for &arch in &self.architectures {
            let cells: Vec<String> = self
                .seq_lens
                .iter()
                .map(|&l| self.mean(arch, l).map(fmt_real).unwrap_or_default())
                .collect();
            writeln!(w, "{arch},{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn write_runs_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "architecture,seq_len,run_index,seed,test_nrmse,best_epoch,stopped_epoch")?;
        for r in &self.runs {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.architecture,
                r.seq_len,
                r.run_index,
                r.seed,
                fmt_real(r.test_nrmse),
                r.best_epoch,
                r.stopped_epoch
            )?;
        }
        Ok(())
    }
}

/// Trains every (architecture, sequence length, repetition) cell. Run `i`
/// uses seed `base_seed + i` for both initialisation and shuffling, so any
/// single run can be reproduced on its own.
pub fn run_benchmark(cfg: &BenchmarkConfig, data: &StateSeries) -> Result<BenchmarkResult> {
    cfg.validate()?;
    let jobs: Vec<(Architecture, usize, usize)> = cfg
        .architectures
        .iter()
        .flat_map(|&a| {
            cfg.seq_lens
                .iter()
                .flat_map(move |&l| (0..cfg.repetitions).map(move |i| (a, l, i)))
        })
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(arch, seq_len, run_index)| {
            let seed = cfg.base_seed.wrapping_add(run_index as u64);
            let model_cfg = cfg.model_config(arch, data.state_dim(), seq_len, seed);
            let opts = TrainOptions {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                lr: cfg.lr,
                patience: cfg.patience,
                seed,
                clip_norm: None,
                standardize: true,
            };
            let (_, report) = train(&model_cfg, data, &cfg.split, &opts)?;
            Ok(RunRecord {
                architecture: arch,
                seq_len,
                run_index,
                seed,
                test_nrmse: report.test_nrmse,
                best_epoch: report.best_epoch,
                stopped_epoch: report.stopped_epoch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchmarkResult {
        seq_lens: cfg.seq_lens.clone(),
        architectures: cfg.architectures.clone(),
        runs,
    })
}
