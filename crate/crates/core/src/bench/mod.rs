//! Synthetic benchmark harness: data, base-model training, evaluation, sweeps, statistics.

pub mod data;
pub mod eval;
pub mod stats;
pub mod sweep;

use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;
use crate::error::Result;
use crate::network::{train_base, MlpSpec, Parameters, TrainConfig, TrainReport};

pub use data::{gen_synthetic, DatasetSpec};
pub use eval::{evaluate_config, partition_uncertain, topk_accuracy, EvalOptions, EvalReport};
pub use stats::sign_test;
pub use sweep::{lr_grid, lr_sweep, single_vs_multi};

/// Offset added to the run seed for the test split.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

/// A dataset recipe plus the base model trained on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub dataset: DatasetSpec,
    pub test_samples_per_class: usize,
    pub hidden_widths: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            test_samples_per_class: 2000,
            hidden_widths: vec![32],
            train: TrainConfig::default(),
        }
    }
}

pub struct Prepared {
    pub seed: u64,
    pub mlp: MlpSpec,
    pub params: Parameters,
    pub report: TrainReport,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

impl Benchmark {
    pub fn mlp_spec(&self, seed: u64) -> Result<MlpSpec> {
        let mut widths = vec![self.dataset.feature_dim];
        widths.extend(&self.hidden_widths);
        widths.push(self.dataset.num_classes);
        MlpSpec::new(widths, seed)
    }

    /// Data, init and training all seeded from `seed`; the test split uses
    /// `seed + TEST_SEED_OFFSET`.
    pub fn prepare(&self, seed: u64) -> Result<Prepared> {
        let train_spec = DatasetSpec { seed, ..self.dataset.clone() };
        let test_spec = DatasetSpec {
            seed: seed.wrapping_add(TEST_SEED_OFFSET),
            samples_per_class: self.test_samples_per_class,
            ..self.dataset.clone()
        };
        let train = gen_synthetic(&train_spec)?;
        let test = gen_synthetic(&test_spec)?;
        let mlp = self.mlp_spec(seed)?;
        let cfg = TrainConfig { seed, ..self.train.clone() };
        let (params, report) = train_base(&mlp, &train, &cfg)?;
        Ok(Prepared {
            seed,
            mlp,
            params,
            report,
            train,
            test,
        })
    }
}
