//! Optimiser, learning-rate schedule, checkpoints, and the training loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, geometry_features, BatchMode, BatchSampler, Dataset, ExtraMode, Fold, SampledBatch,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_classification, TemplatePlan};
use crate::linalg::{LinearParams, Matrix};
use crate::model::{BlockKind, InputNorm, LossKind, Model, ModelConfig};
use crate::similarity::{SimilarityMetric, TripletBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Defaults to the number of training boards.
    pub iterations_per_epoch: Option<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub margin: f64,
    pub batching: BatchMode,
    pub block: BlockKind,
    pub depth: usize,
    pub loss: LossKind,
    pub extra: ExtraMode,
    pub metric: SimilarityMetric,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs without improvement before the learning rate is cut.
    pub patience: usize,
    pub lr_factor: f64,
    /// Feature jitter, relative to the per-dimension feature std.
    pub jitter: f64,
    /// Share of training boards held out to drive the scheduler.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            iterations_per_epoch: None,
            n_way: 10,
            k_shot: 10,
            margin: 1.0,
            batching: BatchMode::Within,
            block: BlockKind::Gn,
            depth: 1,
            loss: LossKind::Triplet,
            extra: ExtraMode::None,
            metric: SimilarityMetric::Dot,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            patience: 50,
            lr_factor: 0.5,
            jitter: 0.05,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_way == 0 || self.k_shot == 0 {
            return bad("N and K must be positive".into());
        }
        if self.iterations_per_epoch == Some(0) {
            return bad("iterations per epoch must be positive".into());
        }
        if !(self.margin > 0.0) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must be in [0, 1) and weight decay >= 0".into());
        }
        if self.patience == 0 || !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad("patience must be positive and the lr factor in (0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!(
                "validation fraction must be in [0, 1), got {}",
                self.val_fraction
            ));
        }
        Ok(())
    }
}

/// Optimiser and scheduler state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimState {
    /// One buffer per layer, created on the first step.
    #[serde(skip)]
    pub velocity: Vec<LinearParams>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub lr_factor: f64,
    pub epochs_since_improvement: usize,
    pub best_accuracy: f64,
}

impl OptimState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: Vec::new(),
            lr,
            momentum,
            weight_decay,
            patience: 50,
            lr_factor: 0.5,
            epochs_since_improvement: 0,
            best_accuracy: 0.0,
        }
    }

    fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            patience: cfg.patience,
            lr_factor: cfg.lr_factor,
            ..Self::new(cfg.lr, cfg.momentum, cfg.weight_decay)
        }
    }
}

/// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v` for every layer. Nothing is
/// modified when any gradient is non-finite.
pub fn sgd_update<'a>(
    params: impl IntoIterator<Item = &'a mut LinearParams>,
    grads: impl IntoIterator<Item = &'a LinearParams>,
    state: &mut OptimState,
) -> Result<()> {
    let mut params: Vec<&mut LinearParams> = params.into_iter().collect();
    let grads: Vec<&LinearParams> = grads.into_iter().collect();
    if params.len() != grads.len() {
        return Err(Error::shape("gradient layers", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(&grads) {
        if p.in_dim() != g.in_dim() || p.out_dim() != g.out_dim() {
            return Err(Error::shape(
                "gradient layer",
                p.num_params(),
                g.num_params(),
            ));
        }
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    if state.velocity.len() != params.len() {
        state.velocity = params.iter().map(|p| p.zeros_like()).collect();
    }
    let (lr, mu, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(&grads).zip(&mut state.velocity) {
        for ((pv, gv), vv) in p
            .flat_values_mut()
            .zip(g.flat_values())
            .zip(v.flat_values_mut())
        {
            *vv = mu * *vv + (gv + wd * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Feeds one epoch's evaluation accuracy to the plateau rule. Returns true
/// when the learning rate was cut.
pub fn plateau_lr_schedule(state: &mut OptimState, accuracy: f64) -> bool {
    if accuracy > state.best_accuracy {
        state.best_accuracy = accuracy;
        state.epochs_since_improvement = 0;
        return false;
    }
    state.epochs_since_improvement += 1;
    if state.epochs_since_improvement >= state.patience {
        state.lr *= state.lr_factor;
        state.epochs_since_improvement = 0;
        return true;
    }
    false
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub eval_top1: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub fn write_metrics_csv(path: impl AsRef<Path>, metrics: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A model plus the optimiser state it was saved with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optim: OptimState,
    pub epoch: usize,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct OptimRecord {
    #[serde(flatten)]
    state: OptimState,
    epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    feature_dim: usize,
    extra_mode: ExtraMode,
    block: BlockKind,
    depth: usize,
    loss: LossKind,
    metric: SimilarityMetric,
    categories: Vec<String>,
    params: BTreeMap<String, Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input_norm: Option<InputNorm>,
    optim: OptimRecord,
    seed: u64,
}

const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let cfg = &self.model.config;
        let mut params = BTreeMap::new();
        for (name, layer) in self.model.params.named_layers() {
            params.insert(
                format!("{name}.weight"),
                Tensor {
                    shape: vec![layer.out_dim(), layer.in_dim()],
                    data: layer.weight.as_slice().to_vec(),
                },
            );
            params.insert(
                format!("{name}.bias"),
                Tensor {
                    shape: vec![layer.out_dim()],
                    data: layer.bias.clone(),
                },
            );
        }
        let file = CheckpointFile {
            version: CHECKPOINT_VERSION,
            feature_dim: cfg.feature_dim,
            extra_mode: cfg.extra,
            block: cfg.block,
            depth: cfg.depth,
            loss: cfg.loss,
            metric: cfg.metric,
            categories: cfg.categories.clone(),
            params,
            input_norm: self.model.input_norm.clone(),
            optim: OptimRecord {
                state: self.optim.clone(),
                epoch: self.epoch,
            },
            seed: self.seed,
        };
        let mut text = serde_json::to_string(&file)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |message: String| Error::Config(format!("checkpoint: {message}"));
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", file.version)));
        }
        let config = ModelConfig {
            feature_dim: file.feature_dim,
            extra: file.extra_mode,
            block: file.block,
            depth: file.depth,
            loss: file.loss,
            metric: file.metric,
            categories: file.categories,
        };
        let mut model = Model::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut tensors = file.params;
        let expected = 2 * model.params.named_layers().len();
        if tensors.len() != expected {
            return Err(bad(format!(
                "expected {expected} tensors, found {}",
                tensors.len()
            )));
        }
        for (name, layer) in model.params.named_layers_mut() {
            let mut take = |key: String, shape: Vec<usize>| -> Result<Vec<f64>> {
                let t = tensors
                    .remove(&key)
                    .ok_or_else(|| bad(format!("missing tensor {key}")))?;
                if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                    return Err(bad(format!(
                        "tensor {key} has shape {:?}, expected {shape:?}",
                        t.shape
                    )));
                }
                Ok(t.data)
            };
            let (out, inp) = (layer.out_dim(), layer.in_dim());
            let w = take(format!("{name}.weight"), vec![out, inp])?;
            let b = take(format!("{name}.bias"), vec![out])?;
            *layer = LinearParams::new(Matrix::from_vec(out, inp, w)?, b)?;
        }
        if !model.params.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        if let Some(norm) = &file.input_norm {
            if norm.dim() != model.config.feature_dim {
                return Err(bad(format!(
                    "input normaliser has {} dimensions, expected {}",
                    norm.dim(),
                    model.config.feature_dim
                )));
            }
            if !norm.scale.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("checkpoint input normaliser"));
            }
        }
        model.input_norm = file.input_norm;
        Ok(Self {
            model,
            optim: file.optim.state,
            epoch: file.optim.epoch,
            seed: file.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Parse {
                path: path.to_path_buf(),
                message: j.to_string(),
            },
            other => other,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Checkpoint from the epoch with the highest validation accuracy.
    pub best_checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    pub train_boards: Vec<String>,
    pub validation_boards: Vec<String>,
}

/// Model inputs for a sampled batch: normalised features with extra
/// dimensions appended; label mode marks the first row of each category as
/// labelled.
pub fn augment_batch(
    dataset: &Dataset,
    sample: &SampledBatch,
    model: &Model,
) -> Result<TripletBatch> {
    let b = &sample.batch;
    let config = &model.config;
    let n_model = config.categories.len();
    let mut rows = Vec::with_capacity(b.len());
    for (r, &(board, inst)) in sample.members.iter().enumerate() {
        let rec = &dataset.boards[board];
        let geom = geometry_features(
            &rec.instances[inst].bbox,
            rec.width as f64,
            rec.height as f64,
        );
        let label = if sample.labeled[r] && config.extra == ExtraMode::Label {
            let name = &dataset.categories[b.categories[r]];
            Some(
                config
                    .categories
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| {
                        Error::Label(format!("category '{name}' unknown to the model"))
                    })?,
            )
        } else {
            None
        };
        rows.push(augment(
            &model.prepare_feature(b.features.row(r)),
            &geom,
            config.extra,
            label,
            n_model,
        )?);
    }
    Ok(TripletBatch {
        features: Matrix::from_rows(&rows)?,
        categories: b.categories.clone(),
        board_ids: b.board_ids.clone(),
        margin: b.margin,
    })
}

/// Splits the fold's training boards into (train, validation).
fn holdout(
    dataset: &Dataset,
    fold: &Fold,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut boards = dataset.board_indices(&fold.train)?;
    if boards.is_empty() {
        return Err(Error::Config("fold has no training boards".into()));
    }
    boards.shuffle(rng);
    let n = boards.len();
    let n_val = if n < 2 || fraction == 0.0 {
        0
    } else {
        ((fraction * n as f64).round() as usize).clamp(1, n - 1)
    };
    let val = boards.split_off(n - n_val);
    Ok((boards, val))
}

/// Trains one model on `fold.train`. Board categories must already be
/// indexed in `dataset`; test boards are never touched.
pub fn run_training(dataset: &Dataset, fold: &Fold, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run_training_with(dataset, fold, cfg, |_| {})
}

/// [`run_training`] with a callback after each epoch.
pub fn run_training_with(
    dataset: &Dataset,
    fold: &Fold,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_rng.set_stream(1);
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_rng.set_stream(2);

    let (train, val) = holdout(dataset, fold, cfg.val_fraction, &mut split_rng)?;
    let pair_loss = cfg.loss != LossKind::Ce;
    let pool: Vec<usize> = match (cfg.batching, pair_loss) {
        // a one-category board cannot form a single triplet
        (BatchMode::Within, true) => train
            .iter()
            .copied()
            .filter(|&b| dataset.instances_by_category(b).len() >= 2)
            .collect(),
        _ => train.clone(),
    };
    if pair_loss && (pool.is_empty() || dataset.categories_on(&pool).len() < 2) {
        return Err(Error::DegenerateBatch(
            "training data offers fewer than two categories per batch".into(),
        ));
    }
    let sampler = BatchSampler::new(
        dataset,
        &pool,
        cfg.batching,
        cfg.n_way,
        cfg.k_shot,
        cfg.jitter,
        cfg.margin,
    )?;

    let model_cfg = ModelConfig {
        feature_dim: dataset.feature_dim,
        extra: cfg.extra,
        block: cfg.block,
        depth: cfg.depth,
        loss: cfg.loss,
        metric: cfg.metric,
        categories: dataset.categories.clone(),
    };
    let mut model = Model::init(model_cfg, &mut init_rng)?;
    let train_features = train.iter().flat_map(|&b| {
        dataset.boards[b]
            .instances
            .iter()
            .map(|i| i.feature.as_slice())
    });
    model.input_norm = Some(InputNorm::fit(train_features, dataset.feature_dim)?);
    let mut optim = OptimState::from_config(cfg);
    let eval_boards = if val.is_empty() { &train } else { &val };
    let eval_plan = TemplatePlan::on_board(cfg.seed ^ 0x5eed_e7a1);
    let iterations = cfg.iterations_per_epoch.unwrap_or(train.len());

    let snapshot = |model: &Model, optim: &OptimState, epoch: usize| Checkpoint {
        model: model.clone(),
        optim: OptimState {
            velocity: Vec::new(),
            ..optim.clone()
        },
        epoch,
        seed: cfg.seed,
    };
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = optim.lr;
        let mut loss_sum = 0.0;
        for _ in 0..iterations {
            let sample = sampler.sample(&mut sample_rng);
            let batch = augment_batch(dataset, &sample, &model)?;
            let g = model.batch_gradient(&batch)?;
            if !g.report.loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            loss_sum += g.report.loss;
            sgd_update(
                model.params.named_layers_mut().into_iter().map(|(_, l)| l),
                g.params.named_layers().into_iter().map(|(_, l)| l),
                &mut optim,
            )?;
        }
        let top1 = evaluate_classification(dataset, eval_boards, &model, &eval_plan)?
            .top1
            .unwrap_or(0.0);
        plateau_lr_schedule(&mut optim, top1);
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / iterations as f64,
            eval_top1: top1,
            lr,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} val top1 {:.4} lr {lr:e}",
            m.loss,
            top1
        );
        on_epoch(&m);
        metrics.push(m);
        if best.as_ref().is_none_or(|(b, _)| top1 > *b) {
            best = Some((top1, snapshot(&model, &optim, epoch)));
        }
    }
    let final_checkpoint = snapshot(&model, &optim, cfg.epochs);
    let best_checkpoint = best.map_or_else(|| final_checkpoint.clone(), |(_, c)| c);
    let ids = |bs: &[usize]| {
        bs.iter()
            .map(|&b| dataset.boards[b].board_id.clone())
            .collect()
    };
    Ok(TrainOutcome {
        final_checkpoint,
        best_checkpoint,
        metrics,
        train_boards: ids(&train),
        validation_boards: ids(&val),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar(w: f64) -> LinearParams {
        LinearParams::new(Matrix::from_vec(1, 1, vec![w]).unwrap(), vec![0.0]).unwrap()
    }

    #[test]
    fn zero_gradient_is_fixed_point_without_decay() {
        let mut p = scalar(2.5);
        let g = scalar(0.0);
        let mut s = OptimState::new(0.1, 0.9, 0.0);
        for _ in 0..3 {
            sgd_update([&mut p], [&g], &mut s).unwrap();
        }
        assert_eq!(p.weight[(0, 0)], 2.5);
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = scalar(1.0);
        let g = scalar(0.25);
        let mut s = OptimState::new(0.1, 0.0, 0.0);
        sgd_update([&mut p], [&g], &mut s).unwrap();
        assert_eq!(p.weight[(0, 0)], 1.0 - 0.1 * 0.25);
    }

    #[test]
    fn momentum_on_quadratic_matches_recurrence() {
        // f(w) = w²/2, so g = w
        let (lr, mu) = (0.1, 0.9);
        let (mut w, mut v) = (1.0f64, 0.0f64);
        for _ in 0..2 {
            v = mu * v + w;
            w -= lr * v;
        }
        // by hand: v1 = 1, w1 = 0.9; v2 = 0.9 + 0.9 = 1.8, w2 = 0.72
        assert!((w - 0.72).abs() < 1e-15);

        let mut p = scalar(1.0);
        let mut s = OptimState::new(lr, mu, 0.0);
        for _ in 0..2 {
            let g = scalar(p.weight[(0, 0)]);
            sgd_update([&mut p], [&g], &mut s).unwrap();
        }
        assert_eq!(p.weight[(0, 0)], w);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut p = scalar(1.0);
        let mut s = OptimState::new(0.1, 0.9, 0.0);
        let err = sgd_update([&mut p], [&scalar(f64::NAN)], &mut s).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(p.weight[(0, 0)], 1.0);
    }

    #[test]
    fn improving_accuracy_keeps_lr() {
        let mut s = OptimState::new(1.0, 0.9, 0.0);
        for e in 0..200 {
            plateau_lr_schedule(&mut s, (e + 1) as f64 / 201.0);
        }
        assert_eq!(s.lr, 1.0);
    }

    #[test]
    fn constant_accuracy_halves_every_fifty() {
        let mut s = OptimState::new(1.0, 0.9, 0.0);
        for epoch in 1..=150 {
            let cut = plateau_lr_schedule(&mut s, 0.0);
            assert_eq!(cut, epoch % 50 == 0, "epoch {epoch}");
        }
        assert_eq!(s.lr, 1.0 / 8.0);
    }

    /// Reference: the counter is the distance to the later of the last
    /// improvement and the last cut.
    fn simulate(accs: &[f64]) -> Vec<usize> {
        let mut cuts = Vec::new();
        let mut best = 0.0;
        let mut anchor = 0usize;
        for (t, &a) in accs.iter().enumerate() {
            let epoch = t + 1;
            if a > best {
                best = a;
                anchor = epoch;
            } else if epoch - anchor == 50 {
                cuts.push(epoch);
                anchor = epoch;
            }
        }
        cuts
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn scheduler_matches_reference(seed in any::<u64>(), len in 1usize..400, levels in 1u32..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse levels make ties and long plateaus common
            let accs: Vec<f64> = (0..len).map(|_| rng.random_range(0..=levels) as f64 / levels as f64).collect();
            let mut s = OptimState::new(1.0, 0.9, 0.0);
            let mut cuts = Vec::new();
            for (t, &a) in accs.iter().enumerate() {
                if plateau_lr_schedule(&mut s, a) {
                    cuts.push(t + 1);
                }
            }
            let expected = simulate(&accs);
            prop_assert_eq!(&cuts, &expected);
            prop_assert_eq!(s.lr, 0.5f64.powi(expected.len() as i32));
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            lr: 0.01,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    fn all_boards_fold(ds: &Dataset) -> Fold {
        Fold {
            train: ds.boards.iter().map(|b| b.board_id.clone()).collect(),
            test: Vec::new(),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            n_boards: 6,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let out = run_training(&ds, &all_boards_fold(&ds), &small_cfg()).unwrap();
        let ck = out.final_checkpoint;
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let bits = |m: &Model| {
            m.params
                .flat_values()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&back.model), bits(&ck.model));
        assert_eq!(back.to_json().unwrap(), ck.to_json().unwrap());
    }

    #[test]
    fn triplet_loss_trends_down() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            n_boards: 10,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            block: BlockKind::None,
            ..TrainConfig::default()
        };
        let out = run_training(&ds, &all_boards_fold(&ds), &cfg).unwrap();
        let mut losses: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
        let first = losses[0];
        losses.sort_by(f64::total_cmp);
        let median = losses[losses.len() / 2];
        assert!(median < first, "median {median} vs first {first}");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            n_boards: 5,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let a = run_training(&ds, &all_boards_fold(&ds), &small_cfg()).unwrap();
        let b = run_training(&ds, &all_boards_fold(&ds), &small_cfg()).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(
            a.final_checkpoint.to_json().unwrap(),
            b.final_checkpoint.to_json().unwrap()
        );
    }

    #[test]
    fn single_category_data_is_degenerate_for_triplets() {
        let mut ds = generate_synthetic_dataset(&SyntheticConfig::degenerate(3, 2, 4, 0)).unwrap();
        for b in &mut ds.boards {
            b.instances
                .iter_mut()
                .for_each(|i| i.category = "only".into());
        }
        let ds = Dataset::new(ds.boards).unwrap();
        let err = run_training(&ds, &all_boards_fold(&ds), &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(_)));
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let ds = generate_synthetic_dataset(&SyntheticConfig::degenerate(3, 3, 4, 0)).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..small_cfg()
        };
        let json = run_training(&ds, &all_boards_fold(&ds), &cfg)
            .unwrap()
            .final_checkpoint
            .to_json()
            .unwrap();
        let broken = json.replacen("\"shape\":[2,4]", "\"shape\":[4,2]", 1);
        assert_ne!(broken, json);
        assert!(Checkpoint::from_json(&broken).is_err());
    }
}
