//! The ablation matrix: named training variants run over seeds × folds on
//! synthetic boards.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic_dataset, make_cv_splits, perfect_proposals, BatchMode, ExtraMode,
    SyntheticConfig,
};
use crate::error::Result;
use crate::eval::{evaluate_classification, run_pipeline_eval, TemplatePlan};
use crate::model::{BlockKind, LossKind};
use crate::train::{run_training, TrainConfig};

/// One row of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: &'static str,
    pub batching: BatchMode,
    pub loss: LossKind,
    pub block: BlockKind,
    pub extra: ExtraMode,
}

impl Variant {
    const fn new(
        name: &'static str,
        batching: BatchMode,
        loss: LossKind,
        block: BlockKind,
        extra: ExtraMode,
    ) -> Self {
        Self {
            name,
            batching,
            loss,
            block,
            extra,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            batching: self.batching,
            loss: self.loss,
            block: self.block,
            extra: self.extra,
            ..base.clone()
        }
    }
}

use BatchMode::{Across, Within};
use BlockKind as B;
use ExtraMode as X;
use LossKind as L;

pub const VARIANTS: &[Variant] = &[
    Variant::new("CLF", Within, L::Ce, B::None, X::None),
    Variant::new("CLF-GN", Within, L::Ce, B::Gn, X::None),
    Variant::new("SPN-B-A", Across, L::Bce, B::None, X::None),
    Variant::new("SPN-T-A", Across, L::Triplet, B::None, X::None),
    Variant::new("SPN-T-A-GN", Across, L::Triplet, B::Gn, X::None),
    Variant::new("SPN-T-W-NLNN", Within, L::Triplet, B::Nlnn, X::None),
    Variant::new("SPN-T-W-GN", Within, L::Triplet, B::Gn, X::None),
    Variant::new("SPN-T-W-GN-GF", Within, L::Triplet, B::Gn, X::Geometry),
    Variant::new("SPN-T-W-GN-LF", Within, L::Triplet, B::Gn, X::Label),
];

pub fn variant(name: &str) -> Option<Variant> {
    VARIANTS
        .iter()
        .copied()
        .find(|v| v.name.eq_ignore_ascii_case(name))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: String,
    pub data_seed: u64,
    pub fold: usize,
    pub top1: f64,
    pub top5: f64,
    /// Pipeline mAP over synthetic proposals, when requested.
    pub map: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mean_top1: f64,
    pub mean_top5: f64,
    pub mean_map: Option<f64>,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    pub data: SyntheticConfig,
    pub data_seeds: Vec<u64>,
    pub folds: usize,
    pub train: TrainConfig,
    pub with_pipeline: bool,
    /// Evaluate the validation-selected checkpoint instead of the last one.
    pub use_best: bool,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            data: SyntheticConfig::default(),
            data_seeds: vec![1, 2, 3],
            folds: 3,
            train: benchmark_train_config(),
            with_pipeline: false,
            use_best: false,
        }
    }
}

/// Desk-scale schedule for the synthetic benchmark: a larger step and a fifth
/// of the default epochs, so a full table fits in minutes.
pub fn benchmark_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

/// Trains and evaluates every variant on every (data seed, fold). Each
/// dataset seed also seeds its split and the training runs on it.
pub fn run_ablation(
    settings: &AblationSettings,
    variants: &[Variant],
    mut on_run: impl FnMut(&RunResult),
) -> Result<(Vec<RunResult>, Vec<VariantSummary>)> {
    let mut runs = Vec::new();
    for &seed in &settings.data_seeds {
        let mut ds = generate_synthetic_dataset(&SyntheticConfig {
            seed,
            ..settings.data.clone()
        })?;
        let split = make_cv_splits(
            &ds,
            settings.folds,
            None,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        if settings.with_pipeline {
            for b in &mut ds.boards {
                if b.proposals.is_none() {
                    b.proposals = Some(perfect_proposals(b));
                }
            }
        }
        for (k, fold) in split.folds.iter().enumerate() {
            let test = ds.board_indices(&fold.test)?;
            for v in variants {
                let start = Instant::now();
                let cfg = TrainConfig {
                    seed: seed * 1000 + k as u64,
                    ..v.apply(&settings.train)
                };
                let out = run_training(&ds, fold, &cfg)?;
                let ck = if settings.use_best {
                    &out.best_checkpoint
                } else {
                    &out.final_checkpoint
                };
                let plan = TemplatePlan::on_board(cfg.seed);
                let clf = evaluate_classification(&ds, &test, &ck.model, &plan)?;
                let map = if settings.with_pipeline {
                    run_pipeline_eval(&ds, &test, &ck.model, &plan, 0.3)?.map
                } else {
                    None
                };
                let r = RunResult {
                    variant: v.name.to_string(),
                    data_seed: seed,
                    fold: k,
                    top1: clf.top1.unwrap_or(0.0),
                    top5: clf.top5.unwrap_or(0.0),
                    map,
                    seconds: start.elapsed().as_secs_f64(),
                };
                on_run(&r);
                runs.push(r);
            }
        }
    }
    let summaries = variants
        .iter()
        .map(|v| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v.name).collect();
            let n = mine.len().max(1) as f64;
            let maps: Vec<f64> = mine.iter().filter_map(|r| r.map).collect();
            VariantSummary {
                variant: v.name.to_string(),
                mean_top1: mine.iter().map(|r| r.top1).sum::<f64>() / n,
                mean_top5: mine.iter().map(|r| r.top5).sum::<f64>() / n,
                mean_map: (!maps.is_empty()).then(|| maps.iter().sum::<f64>() / maps.len() as f64),
                runs: mine.len(),
            }
        })
        .collect();
    Ok((runs, summaries))
}
